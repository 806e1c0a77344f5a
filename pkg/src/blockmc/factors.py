"""Distribution factors: conditional log-densities, analytic gradients,
and predictive sampling.

Each factor ties one child node to argument expressions over other pool
names. Log-densities are finite on the interior of the child's support
and -inf outside; gradients are exact and defined for every continuous
argument. Densities are unnormalized only where the dropped terms are
constant in every samplable quantity (noted per factor).
"""

from __future__ import annotations

import numpy as np
from scipy.special import betaln, digamma, gammaln

from .exprs import Const, Expr, reduce_to_shape

SIMPLEX_TOL = 1e-12

NEG_INF = -np.inf


class FactorError(Exception):
    pass


class Factor:
    """Base factor: `child` is a node name, `args` are expressions."""

    kind = "abstract"
    child_support = "unbounded"
    exchangeable = True  # pointwise terms independent given the arguments

    def __init__(self, child, args, kind=None):
        self.child = child
        self.args = [a if isinstance(a, Expr) else Const(a) for a in args]
        if kind is not None:
            self.kind = kind
        self.fid = f"{self.kind}({child})"

    def arg_refs(self) -> set:
        out = set()
        for a in self.args:
            out |= a.refs()
        return out

    def refs(self) -> set:
        return {self.child} | self.arg_refs()

    def arg_values(self, env):
        return [a.eval(env) for a in self.args]

    # -- interface -------------------------------------------------------
    def log_density(self, env) -> float:
        raise NotImplementedError

    def grad(self, env, wrt) -> np.ndarray:
        """d log_density / d env[wrt]; wrt is the child or a referenced name."""
        raise NotImplementedError

    def sample(self, env, rng, shape=None) -> np.ndarray:
        raise NotImplementedError

    def pointwise(self, env) -> np.ndarray:
        """Per-observation log-likelihood contributions (for LOO)."""
        raise NotImplementedError

    def __repr__(self):
        return self.fid


class ElementwiseFactor(Factor):
    """Factor whose log density is a sum of independent elementwise terms
    over the broadcast of child and arguments."""

    n_args = 2

    def _terms(self, x, params):
        raise NotImplementedError

    def _dx(self, x, params):
        raise NotImplementedError

    def _dparam(self, i, x, params):
        raise NotImplementedError

    def _draw(self, rng, params, shape):
        raise NotImplementedError

    def _broadcast(self, env):
        x = np.asarray(env[self.child], dtype=float)
        vals = [np.asarray(v, dtype=float) for v in self.arg_values(env)]
        return np.broadcast_arrays(x, *vals)

    def log_density(self, env):
        x, *params = self._broadcast(env)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = self._terms(x, params)
        return float(np.sum(terms))

    def pointwise(self, env):
        x, *params = self._broadcast(env)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.asarray(self._terms(x, params), dtype=float).reshape(-1)

    def grad(self, env, wrt):
        x, *params = self._broadcast(env)
        out = None
        if wrt == self.child:
            out = reduce_to_shape(self._dx(x, params), np.shape(env[self.child]))
        for i, arg in enumerate(self.args):
            if wrt in arg.refs():
                g = self._dparam(i, x, params)
                contrib = arg.backprop(env, g, wrt)
                out = contrib if out is None else out + contrib
        if out is None:
            raise FactorError(f"{self.fid} does not involve '{wrt}'")
        return out

    def sample(self, env, rng, shape=None):
        vals = [np.asarray(v, dtype=float) for v in self.arg_values(env)]
        if shape is None:
            shape = np.broadcast_shapes(*(v.shape for v in vals)) if vals else ()
        params = [np.broadcast_to(v, shape) for v in vals]
        return self._draw(rng, params, shape)


class Normal(ElementwiseFactor):
    kind = "normal"

    def _terms(self, x, params):
        loc, scale = params
        terms = -0.5 * np.log(2 * np.pi) - np.log(scale) - 0.5 * ((x - loc) / scale) ** 2
        return np.where(scale > 0, terms, NEG_INF)

    def _dx(self, x, params):
        loc, scale = params
        return -(x - loc) / scale**2

    def _dparam(self, i, x, params):
        loc, scale = params
        if i == 0:
            return (x - loc) / scale**2
        return -1.0 / scale + (x - loc) ** 2 / scale**3

    def _draw(self, rng, params, shape):
        loc, scale = params
        return rng.normal(loc, scale, size=shape)


class Laplace(ElementwiseFactor):
    kind = "laplace"

    def _terms(self, x, params):
        loc, b = params
        terms = -np.log(2 * b) - np.abs(x - loc) / b
        return np.where(b > 0, terms, NEG_INF)

    def _dx(self, x, params):
        loc, b = params
        return -np.sign(x - loc) / b

    def _dparam(self, i, x, params):
        loc, b = params
        if i == 0:
            return np.sign(x - loc) / b
        return -1.0 / b + np.abs(x - loc) / b**2

    def _draw(self, rng, params, shape):
        loc, b = params
        return rng.laplace(loc, b, size=shape)


class Cauchy(ElementwiseFactor):
    kind = "cauchy"

    def _terms(self, x, params):
        loc, scale = params
        u = (x - loc) / scale
        terms = -np.log(np.pi) - np.log(scale) - np.log1p(u**2)
        return np.where(scale > 0, terms, NEG_INF)

    def _dx(self, x, params):
        loc, scale = params
        u = (x - loc) / scale
        return -2 * u / (scale * (1 + u**2))

    def _dparam(self, i, x, params):
        loc, scale = params
        u = (x - loc) / scale
        if i == 0:
            return 2 * u / (scale * (1 + u**2))
        return -1.0 / scale + 2 * u**2 / (scale * (1 + u**2))

    def _draw(self, rng, params, shape):
        loc, scale = params
        return loc + scale * rng.standard_cauchy(size=shape)


class HalfCauchy(Cauchy):
    """Cauchy restricted to the positive half-line. The truncation
    constant is dropped: the arguments are hyperparameters here, so it
    is constant in every sampled quantity."""

    kind = "half-cauchy"
    child_support = "positive"

    def _terms(self, x, params):
        terms = super()._terms(x, params)
        return np.where(x > 0, terms, NEG_INF)

    def _draw(self, rng, params, shape):
        loc, scale = params
        return np.abs(scale * rng.standard_cauchy(size=shape)) + loc


class InverseGamma(ElementwiseFactor):
    kind = "inverse-gamma"
    child_support = "positive"

    def _terms(self, x, params):
        a, b = params
        terms = a * np.log(b) - gammaln(a) - (a + 1) * np.log(x) - b / x
        return np.where(x > 0, terms, NEG_INF)

    def _dx(self, x, params):
        a, b = params
        return -(a + 1) / x + b / x**2

    def _dparam(self, i, x, params):
        a, b = params
        if i == 0:
            return np.log(b) - digamma(a) - np.log(x)
        return a / b - 1.0 / x

    def _draw(self, rng, params, shape):
        a, b = params
        return 1.0 / rng.gamma(a, 1.0 / b, size=shape)


class GammaFactor(ElementwiseFactor):
    """Gamma with shape/rate parameterization."""

    kind = "gamma"
    child_support = "positive"

    def _terms(self, x, params):
        a, b = params
        terms = a * np.log(b) - gammaln(a) + (a - 1) * np.log(x) - b * x
        return np.where(x > 0, terms, NEG_INF)

    def _dx(self, x, params):
        a, b = params
        return (a - 1) / x - b

    def _dparam(self, i, x, params):
        a, b = params
        if i == 0:
            return np.log(b) - digamma(a) + np.log(x)
        return a / b - x

    def _draw(self, rng, params, shape):
        a, b = params
        return rng.gamma(a, 1.0 / b, size=shape)


class BetaFactor(ElementwiseFactor):
    kind = "beta"
    child_support = "unit-interval"

    def _terms(self, x, params):
        a, b = params
        terms = (a - 1) * np.log(x) + (b - 1) * np.log1p(-x) - betaln(a, b)
        return np.where((x > 0) & (x < 1), terms, NEG_INF)

    def _dx(self, x, params):
        a, b = params
        return (a - 1) / x - (b - 1) / (1 - x)

    def _dparam(self, i, x, params):
        a, b = params
        if i == 0:
            return np.log(x) - digamma(a) + digamma(a + b)
        return np.log1p(-x) - digamma(b) + digamma(a + b)

    def _draw(self, rng, params, shape):
        a, b = params
        return rng.beta(a, b, size=shape)


class Uniform(ElementwiseFactor):
    kind = "uniform"
    child_support = "interval"

    def _terms(self, x, params):
        a, b = params
        return np.where((x >= a) & (x <= b), -np.log(b - a), NEG_INF)

    def _dx(self, x, params):
        return np.zeros_like(x)

    def _dparam(self, i, x, params):
        a, b = params
        return (1.0 if i == 0 else -1.0) / (b - a)

    def _draw(self, rng, params, shape):
        a, b = params
        return rng.uniform(a, b, size=shape)


class Bernoulli(ElementwiseFactor):
    kind = "bernoulli"
    child_support = "binary"
    n_args = 1

    def _broadcast(self, env):
        x = np.asarray(env[self.child], dtype=float)
        p = np.asarray(self.arg_values(env)[0], dtype=float)
        return np.broadcast_arrays(x, p)

    def _terms(self, x, params):
        (p,) = params
        return np.where(x == 1, np.log(p), np.log1p(-p))

    def _dx(self, x, params):
        raise FactorError("bernoulli child is discrete")

    def _dparam(self, i, x, params):
        (p,) = params
        return np.where(x == 1, 1.0 / p, -1.0 / (1 - p))

    def grad(self, env, wrt):
        if wrt == self.child:
            raise FactorError("gradient requested for a discrete node")
        return super().grad(env, wrt)

    def _draw(self, rng, params, shape):
        (p,) = params
        return (rng.random(shape) < p).astype(np.int64)


class Categorical(Factor):
    """Integer child vector with a shared probability-vector argument."""

    kind = "categorical"
    child_support = "integer-range"
    n_args = 1

    def _weights(self, env):
        w = np.asarray(self.args[0].eval(env), dtype=float)
        if abs(float(np.sum(w)) - 1.0) > SIMPLEX_TOL:
            raise FactorError(f"{self.fid}: probabilities sum to {np.sum(w)!r}, not 1")
        return w

    def log_density(self, env):
        w = self._weights(env)
        z = np.atleast_1d(np.asarray(env[self.child], dtype=int))
        if np.any((z < 0) | (z >= w.size)):
            return NEG_INF
        with np.errstate(divide="ignore"):
            return float(np.sum(np.log(w[z])))

    def pointwise(self, env):
        w = self._weights(env)
        z = np.atleast_1d(np.asarray(env[self.child], dtype=int))
        with np.errstate(divide="ignore"):
            return np.log(w[z])

    def grad(self, env, wrt):
        if wrt == self.child:
            raise FactorError("gradient requested for a discrete node")
        w = self._weights(env)
        z = np.atleast_1d(np.asarray(env[self.child], dtype=int))
        counts = np.bincount(z, minlength=w.size).astype(float)
        return self.args[0].backprop(env, counts / w, wrt)

    def sample(self, env, rng, shape=None):
        w = self._weights(env)
        if shape is None:
            shape = ()
        n = int(np.prod(shape)) if shape else 1
        u = rng.random(n)
        draws = np.searchsorted(np.cumsum(w), u, side="right")
        draws = np.minimum(draws, w.size - 1).astype(np.int64)
        return draws.reshape(shape) if shape else draws[0]


class Dirichlet(Factor):
    kind = "dirichlet"
    child_support = "simplex"
    n_args = 1

    def _alpha(self, env):
        return np.asarray(self.args[0].eval(env), dtype=float)

    def log_density(self, env):
        alpha = self._alpha(env)
        x = np.asarray(env[self.child], dtype=float)
        if abs(float(np.sum(x)) - 1.0) > SIMPLEX_TOL:
            raise FactorError(f"{self.fid}: simplex child sums to {np.sum(x)!r}, not 1")
        if np.any(x <= 0):
            return NEG_INF
        return float(np.sum((alpha - 1) * np.log(x)) + gammaln(np.sum(alpha))
                     - np.sum(gammaln(alpha)))

    def grad(self, env, wrt):
        alpha = self._alpha(env)
        x = np.asarray(env[self.child], dtype=float)
        if wrt == self.child:
            return (alpha - 1) / x
        g = np.log(x) + digamma(np.sum(alpha)) - digamma(alpha)
        return self.args[0].backprop(env, g, wrt)

    def sample(self, env, rng, shape=None):
        return rng.dirichlet(self._alpha(env))


class MarkovChain(Factor):
    """Discrete path prior: initial distribution plus row-stochastic
    transition matrix."""

    kind = "hmm-transition"
    child_support = "integer-range"
    exchangeable = False
    n_args = 2

    def _params(self, env):
        init = np.asarray(self.args[0].eval(env), dtype=float)
        trans = np.asarray(self.args[1].eval(env), dtype=float)
        if abs(float(np.sum(init)) - 1.0) > SIMPLEX_TOL:
            raise FactorError(f"{self.fid}: initial probabilities do not sum to 1")
        if np.any(np.abs(trans.sum(axis=1) - 1.0) > SIMPLEX_TOL):
            raise FactorError(f"{self.fid}: transition rows do not sum to 1")
        return init, trans

    def log_density(self, env):
        init, trans = self._params(env)
        z = np.atleast_1d(np.asarray(env[self.child], dtype=int))
        with np.errstate(divide="ignore"):
            out = np.log(init[z[0]])
            if z.size > 1:
                out = out + np.sum(np.log(trans[z[:-1], z[1:]]))
        return float(out)

    def grad(self, env, wrt):
        if wrt == self.child:
            raise FactorError("gradient requested for a discrete node")
        init, trans = self._params(env)
        z = np.atleast_1d(np.asarray(env[self.child], dtype=int))
        out = None
        if wrt in self.args[0].refs():
            g = np.zeros_like(init)
            g[z[0]] = 1.0 / init[z[0]]
            out = self.args[0].backprop(env, g, wrt)
        if wrt in self.args[1].refs():
            counts = np.zeros_like(trans)
            np.add.at(counts, (z[:-1], z[1:]), 1.0)
            g = self.args[1].backprop(env, counts / trans, wrt)
            out = g if out is None else out + g
        if out is None:
            raise FactorError(f"{self.fid} does not involve '{wrt}'")
        return out

    def sample(self, env, rng, shape=None):
        init, trans = self._params(env)
        T = int(shape[0]) if shape else 1
        K = init.size
        z = np.empty(T, dtype=np.int64)
        z[0] = min(np.searchsorted(np.cumsum(init), rng.random(), side="right"), K - 1)
        for t in range(1, T):
            row = np.cumsum(trans[z[t - 1]])
            z[t] = min(np.searchsorted(row, rng.random(), side="right"), K - 1)
        return z


class StickBreakingPrior(Factor):
    """Truncated stick-breaking weights: sticks v_k ~ Beta(1, alpha),
    w_k = v_k * prod_{j<k} (1 - v_j), remainder in the last component.

    Density as a free function of the components:
        (K-1) log a + (a-1) log w_K - sum_{k=2}^{K-1} log R_k,
    with R_k = 1 - sum_{j<k} w_j.
    """

    kind = "stick-breaking-prior"
    child_support = "simplex"
    n_args = 1

    def _alpha(self, env):
        alpha = float(np.asarray(self.args[0].eval(env), dtype=float))
        if alpha <= 0:
            raise FactorError(f"{self.fid}: concentration must be positive")
        return alpha

    def log_density(self, env):
        alpha = self._alpha(env)
        w = np.asarray(env[self.child], dtype=float)
        if abs(float(np.sum(w)) - 1.0) > SIMPLEX_TOL:
            raise FactorError(f"{self.fid}: simplex child sums to {np.sum(w)!r}, not 1")
        if np.any(w <= 0):
            return NEG_INF
        K = w.size
        remainders = 1.0 - np.concatenate([[0.0], np.cumsum(w[:-1])])  # R_1..R_K
        return float((K - 1) * np.log(alpha) + (alpha - 1) * np.log(w[-1])
                     - np.sum(np.log(remainders[1:K - 1])))

    def grad(self, env, wrt):
        alpha = self._alpha(env)
        w = np.asarray(env[self.child], dtype=float)
        K = w.size
        remainders = 1.0 - np.concatenate([[0.0], np.cumsum(w[:-1])])
        if wrt == self.child:
            g = np.zeros(K)
            g[-1] = (alpha - 1) / w[-1]
            # -log R_k terms for k = 2..K-1 depend on w_i for i < k
            for k in range(2, K):
                g[: k - 1] += 1.0 / remainders[k - 1]
            return g
        g_alpha = (K - 1) / alpha + np.log(w[-1])
        return self.args[0].backprop(env, np.asarray(g_alpha), wrt)

    def sample(self, env, rng, shape=None):
        alpha = self._alpha(env)
        K = int(shape[0]) if shape else 1
        sticks = rng.beta(1.0, alpha, size=max(K - 1, 0))
        w = np.empty(K)
        rem = 1.0
        for k in range(K - 1):
            w[k] = sticks[k] * rem
            rem *= 1.0 - sticks[k]
        w[-1] = rem
        return w


FACTOR_CLASSES = {
    "normal": Normal,
    "laplace": Laplace,
    "cauchy": Cauchy,
    "half_cauchy": HalfCauchy,
    "inverse_gamma": InverseGamma,
    "gamma": GammaFactor,
    "beta": BetaFactor,
    "uniform": Uniform,
    "bernoulli": Bernoulli,
    "categorical": Categorical,
    "dirichlet": Dirichlet,
    "markov_chain": MarkovChain,
    "stick_breaking": StickBreakingPrior,
}
