"""Generic transition kernels.

Everything here is model-agnostic: targets come in as callables or
sufficient statistics, state lives in small state objects owned by the
calling block. Draw routines are deterministic functions of the supplied
generator.
"""

from __future__ import annotations

import numpy as np

from .core import BlockMcError


class KernelError(BlockMcError):
    code = "E_KERNEL"


def logsumexp(a, axis=None):
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if axis is not None else float(out)


def sample_categorical(log_weights, rng) -> int:
    """Index draw proportional to softmax(log_weights), max-shifted so
    arbitrarily large inputs cannot overflow."""
    lw = np.asarray(log_weights, dtype=float)
    m = np.max(lw)
    if not np.isfinite(m):
        raise KernelError("sample_categorical: no finite weight")
    w = np.exp(lw - m)
    total = w.sum()
    u = rng.random() * total
    return int(min(np.searchsorted(np.cumsum(w), u, side="right"), lw.size - 1))


def sample_categorical_columns(log_weights, rng) -> np.ndarray:
    """Vectorized draw: log_weights has shape (K, n); one index per column."""
    lw = np.asarray(log_weights, dtype=float)
    m = lw.max(axis=0)
    if not np.all(np.isfinite(m)):
        raise KernelError("sample_categorical: column with no finite weight")
    w = np.exp(lw - m)
    cdf = np.cumsum(w, axis=0)
    u = rng.random(lw.shape[1]) * cdf[-1]
    idx = (u[None, :] > cdf).sum(axis=0)
    return np.minimum(idx, lw.shape[0] - 1).astype(np.int64)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sample_binary_vector(log_odds, rng) -> np.ndarray:
    lo = np.asarray(log_odds, dtype=float)
    if np.any(np.isnan(lo)):
        raise KernelError("sample_binary_vector: NaN log-odds")
    p = sigmoid(lo)
    return (rng.random(lo.shape) < p).astype(np.int64)


# -- Hamiltonian pieces ------------------------------------------------------

def leapfrog(q, p, eps, inv_metric, grad):
    """One leapfrog step for target log-density gradient `grad`.

    Returns (q', p', ok); ok is False when a gradient went non-finite,
    which the caller treats as a divergence rather than an error.
    """
    g = grad(q)
    if not np.all(np.isfinite(g)):
        return q, p, False
    p_half = p + 0.5 * eps * g
    q_new = q + eps * inv_metric * p_half
    g_new = grad(q_new)
    if not np.all(np.isfinite(g_new)):
        return q_new, p_half, False
    p_new = p_half + 0.5 * eps * g_new
    return q_new, p_new, True


DIVERGENCE_THRESHOLD = 1000.0


class NutsState:
    """Per-block NUTS adaptation state.

    During the first `warmup` calls, dual averaging tunes the step size
    toward the target acceptance rate and draws from the second half of
    warmup feed a diagonal metric estimate. At the end of warmup both
    freeze; a frozen state is never re-adapted.
    """

    def __init__(self, dim, warmup=1000, max_tree_depth=10, target_accept=0.8,
                 init_step_size=None):
        self.dim = int(dim)
        self.warmup = int(warmup)
        self.max_tree_depth = int(max_tree_depth)
        self.target_accept = float(target_accept)
        self.step_size = init_step_size
        self.inv_metric = np.ones(self.dim)
        self.warmup_done = self.warmup == 0
        self.iterations = 0
        self.divergences = 0
        # dual averaging accumulators
        self.da_mu = 0.0
        self.da_h_bar = 0.0
        self.da_log_eps_bar = 0.0
        self.da_gamma = 0.05
        self.da_t0 = 10.0
        self.da_kappa = 0.75
        # running variance of warmup draws (second half)
        self._var_count = 0
        self._var_mean = np.zeros(self.dim)
        self._var_m2 = np.zeros(self.dim)

    def state_dict(self):
        return {
            "step_size": self.step_size,
            "inv_metric": self.inv_metric,
            "warmup_done": self.warmup_done,
            "iterations": self.iterations,
            "divergences": self.divergences,
            "da_h_bar": self.da_h_bar,
            "da_log_eps_bar": self.da_log_eps_bar,
        }

    def _welford_update(self, q):
        self._var_count += 1
        delta = q - self._var_mean
        self._var_mean += delta / self._var_count
        self._var_m2 += delta * (q - self._var_mean)

    def _finish_warmup(self):
        if self._var_count >= 2:
            var = self._var_m2 / (self._var_count - 1)
            n = self._var_count
            # shrink toward a small diagonal, as usual for short warmups
            self.inv_metric = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            self.inv_metric = np.maximum(self.inv_metric, 1e-10)
        self.step_size = float(np.exp(self.da_log_eps_bar))
        self.warmup_done = True


def find_reasonable_step_size(q, target, inv_metric, rng):
    """Crude doubling/halving search so the first leapfrog step has
    acceptance probability near 1/2."""
    eps = 1.0
    logp, _ = target(q)
    grad = lambda x: target(x)[1]
    p = rng.standard_normal(q.size) / np.sqrt(inv_metric)

    def joint(q_, p_):
        lp, _ = target(q_)
        return lp - 0.5 * np.sum(inv_metric * p_**2)

    h0 = joint(q, p)
    q1, p1, ok = leapfrog(q, p, eps, inv_metric, grad)
    ratio = joint(q1, p1) - h0 if ok else -np.inf
    direction = 1.0 if ratio > np.log(0.5) else -1.0
    for _ in range(50):
        eps *= 2.0**direction
        q1, p1, ok = leapfrog(q, p, eps, inv_metric, grad)
        ratio = joint(q1, p1) - h0 if ok else -np.inf
        if direction * ratio <= direction * np.log(0.5):
            break
    return max(eps, 1e-10)


class _Tree:
    __slots__ = ("q_minus", "p_minus", "q_plus", "p_plus", "q_prop",
                 "log_sum_weight", "sum_alpha", "n_alpha", "ok")

    def __init__(self, q_minus, p_minus, q_plus, p_plus, q_prop,
                 log_sum_weight, sum_alpha, n_alpha, ok):
        self.q_minus = q_minus
        self.p_minus = p_minus
        self.q_plus = q_plus
        self.p_plus = p_plus
        self.q_prop = q_prop
        self.log_sum_weight = log_sum_weight
        self.sum_alpha = sum_alpha
        self.n_alpha = n_alpha
        self.ok = ok


def _no_uturn(q_minus, p_minus, q_plus, p_plus, inv_metric):
    dq = q_plus - q_minus
    return (np.dot(dq, inv_metric * p_minus) >= 0
            and np.dot(dq, inv_metric * p_plus) >= 0)


def nuts_step(state, q, target, rng):
    """One No-U-Turn transition.

    `target(q)` returns (log-density, gradient) in unconstrained
    coordinates. Multinomial sampling over the trajectory, tree doubling
    up to `state.max_tree_depth`, divergence at energy error > 1000.
    """
    q = np.asarray(q, dtype=float)
    grad = lambda x: target(x)[1]

    logp0, g0 = target(q)
    if not np.isfinite(logp0):
        raise KernelError("nuts: non-finite target at the current point")

    if state.step_size is None:
        state.step_size = find_reasonable_step_size(q, target, state.inv_metric, rng)
        state.da_mu = np.log(10.0 * state.step_size)

    inv_metric = state.inv_metric
    eps = state.step_size
    p0 = rng.standard_normal(q.size) / np.sqrt(inv_metric)
    h0 = logp0 - 0.5 * np.sum(inv_metric * p0**2)

    def joint(q_, p_):
        lp, _ = target(q_)
        return lp - 0.5 * np.sum(inv_metric * p_**2)

    diverged = False

    def build(q_, p_, direction, depth):
        nonlocal diverged
        if depth == 0:
            q1, p1, ok = leapfrog(q_, p_, direction * eps, inv_metric, grad)
            h1 = joint(q1, p1) if ok else -np.inf
            delta = h1 - h0
            if not ok or delta < -DIVERGENCE_THRESHOLD:
                diverged = True
                return _Tree(q1, p1, q1, p1, q1, -np.inf, 0.0, 1, False)
            alpha = min(1.0, float(np.exp(min(delta, 0.0))))
            return _Tree(q1, p1, q1, p1, q1, float(delta), alpha, 1, True)
        inner = build(q_, p_, direction, depth - 1)
        if not inner.ok:
            return inner
        if direction == 1:
            outer = build(inner.q_plus, inner.p_plus, direction, depth - 1)
            q_minus, p_minus = inner.q_minus, inner.p_minus
            q_plus, p_plus = outer.q_plus, outer.p_plus
        else:
            outer = build(inner.q_minus, inner.p_minus, direction, depth - 1)
            q_minus, p_minus = outer.q_minus, outer.p_minus
            q_plus, p_plus = inner.q_plus, inner.p_plus
        sum_alpha = inner.sum_alpha + outer.sum_alpha
        n_alpha = inner.n_alpha + outer.n_alpha
        if not outer.ok:
            return _Tree(q_minus, p_minus, q_plus, p_plus, inner.q_prop,
                         -np.inf, sum_alpha, n_alpha, False)
        total = np.logaddexp(inner.log_sum_weight, outer.log_sum_weight)
        take_outer = np.log(rng.random()) < outer.log_sum_weight - total
        prop = outer.q_prop if take_outer else inner.q_prop
        ok = _no_uturn(q_minus, p_minus, q_plus, p_plus, inv_metric)
        return _Tree(q_minus, p_minus, q_plus, p_plus, prop, total,
                     sum_alpha, n_alpha, ok)

    q_minus = q_plus = q
    p_minus = p_plus = p0
    q_current = q
    log_sum_weight = 0.0  # weight of the initial point: exp(h0 - h0)
    sum_alpha, n_alpha = 0.0, 0

    for depth in range(state.max_tree_depth):
        direction = 1 if rng.random() < 0.5 else -1
        if direction == 1:
            tree = build(q_plus, p_plus, 1, depth)
            q_plus, p_plus = tree.q_plus, tree.p_plus
        else:
            tree = build(q_minus, p_minus, -1, depth)
            q_minus, p_minus = tree.q_minus, tree.p_minus
        sum_alpha += tree.sum_alpha
        n_alpha += tree.n_alpha
        if not tree.ok:
            break
        # progressive multinomial sampling across the doubled half
        total = np.logaddexp(log_sum_weight, tree.log_sum_weight)
        if np.log(rng.random()) < tree.log_sum_weight - total:
            q_current = tree.q_prop
        log_sum_weight = total
        if not _no_uturn(q_minus, p_minus, q_plus, p_plus, inv_metric):
            break

    if diverged:
        state.divergences += 1

    accept_mean = sum_alpha / max(n_alpha, 1)
    state.iterations += 1
    if not state.warmup_done:
        m = state.iterations
        frac = 1.0 / (m + state.da_t0)
        state.da_h_bar = ((1 - frac) * state.da_h_bar
                          + frac * (state.target_accept - accept_mean))
        log_eps = state.da_mu - np.sqrt(m) / state.da_gamma * state.da_h_bar
        eta = m ** -state.da_kappa
        state.da_log_eps_bar = eta * log_eps + (1 - eta) * state.da_log_eps_bar
        state.step_size = float(np.exp(log_eps))
        if m > state.warmup // 2:
            state._welford_update(q_current)
        if m >= state.warmup:
            state._finish_warmup()

    return q_current


# -- univariate slice sampling ----------------------------------------------

class SliceSettings:
    def __init__(self, width=1.0, max_expansions=50):
        if width <= 0:
            raise KernelError("slice width must be positive")
        if max_expansions < 1:
            raise KernelError("slice expansion budget must be >= 1")
        self.width = float(width)
        self.max_expansions = int(max_expansions)


def slice_step_univariate(x0, logpdf, settings, rng):
    """Stepping-out/shrinkage slice transition for a scalar target."""
    x0 = float(x0)
    logp0 = logpdf(x0)
    if not np.isfinite(logp0):
        raise KernelError(f"slice: non-finite log-density at current point {x0!r}")
    log_height = logp0 + np.log(rng.random())

    w = settings.width
    u = rng.random()
    left = x0 - w * u
    right = left + w
    j = int(np.floor(settings.max_expansions * rng.random()))
    k = settings.max_expansions - 1 - j
    while j > 0 and logpdf(left) > log_height:
        left -= w
        j -= 1
    while k > 0 and logpdf(right) > log_height:
        right += w
        k -= 1

    while True:
        if right - left < 1e-12:
            raise KernelError("slice: interval shrank below 1e-12")
        x1 = left + rng.random() * (right - left)
        if logpdf(x1) >= log_height:
            return x1
        if x1 < x0:
            left = x1
        else:
            right = x1


# -- conjugate draws ---------------------------------------------------------

def gibbs_normal_mean(prior, likelihood, rng):
    """Posterior draw for a normal mean: prior (mu0, tau0_sq), likelihood
    summary (ybar, n, sigma_sq) with known variance."""
    mu0, tau0_sq = prior
    ybar, n, sigma_sq = likelihood
    if tau0_sq <= 0 or sigma_sq <= 0:
        raise KernelError("gibbs_normal_mean: variances must be positive")
    if n < 1:
        raise KernelError("gibbs_normal_mean: need n >= 1")
    v = 1.0 / (1.0 / tau0_sq + n / sigma_sq)
    m = v * (mu0 / tau0_sq + n * ybar / sigma_sq)
    return rng.normal(m, np.sqrt(v))


def gibbs_inv_gamma(prior, residual_ss, n, rng):
    a, b = prior
    if a <= 0 or b <= 0:
        raise KernelError("gibbs_inv_gamma: hyperparameters must be positive")
    if n < 1:
        raise KernelError("gibbs_inv_gamma: need n >= 1")
    return 1.0 / rng.gamma(a + 0.5 * n, 1.0 / (b + 0.5 * residual_ss))


def gibbs_gamma(prior, shape_increment, rate_increment, rng):
    a, b = prior
    if a <= 0 or b <= 0:
        raise KernelError("gibbs_gamma: hyperparameters must be positive")
    return rng.gamma(a + shape_increment, 1.0 / (b + rate_increment))


def gibbs_beta(prior, successes, failures, rng):
    a, b = prior
    if a <= 0 or b <= 0:
        raise KernelError("gibbs_beta: hyperparameters must be positive")
    if successes < 0 or failures < 0:
        raise KernelError("gibbs_beta: counts must be nonnegative")
    return rng.beta(a + successes, b + failures)


def gibbs_dirichlet(alpha, counts, rng):
    alpha = np.asarray(alpha, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if alpha.shape != counts.shape:
        raise KernelError("gibbs_dirichlet: length mismatch")
    if np.any(alpha <= 0) or np.any(counts < 0):
        raise KernelError("gibbs_dirichlet: invalid concentration or counts")
    w = rng.dirichlet(alpha + counts)
    return w / w.sum()


def stick_breaking_update(alpha, cluster_counts, rng):
    """Conjugate update of truncated stick-breaking weights given
    cluster occupancy counts; the remainder closes the simplex exactly."""
    counts = np.asarray(cluster_counts, dtype=float)
    K = counts.size
    if K < 1:
        raise KernelError("stick_breaking_update: need K >= 1")
    if alpha <= 0 or np.any(counts < 0):
        raise KernelError("stick_breaking_update: invalid concentration or counts")
    tail = np.concatenate([np.cumsum(counts[::-1])[::-1][1:], [0.0]])
    w = np.empty(K)
    rem = 1.0
    for k in range(K - 1):
        v = rng.beta(1.0 + counts[k], alpha + tail[k])
        w[k] = v * rem
        rem *= 1.0 - v
    w[-1] = rem
    return w


# -- forward filtering, backward sampling ------------------------------------

def hmm_forward(log_init, log_trans, log_emit):
    """Log forward messages alpha[t, k] = log p(z_t = k, y_{1..t})."""
    log_init = np.asarray(log_init, dtype=float)
    log_trans = np.asarray(log_trans, dtype=float)
    log_emit = np.asarray(log_emit, dtype=float)
    T, K = log_emit.shape
    if log_init.shape != (K,) or log_trans.shape != (K, K):
        raise KernelError("hmm_forward: dimension mismatch")
    alpha = np.empty((T, K))
    alpha[0] = log_init + log_emit[0]
    for t in range(1, T):
        alpha[t] = log_emit[t] + logsumexp(alpha[t - 1][:, None] + log_trans, axis=0)[0]
    return alpha


def hmm_log_marginal(log_init, log_trans, log_emit) -> float:
    alpha = hmm_forward(log_init, log_trans, log_emit)
    return logsumexp(alpha[-1])


def ffbs_hmm(log_init, log_trans, log_emit, rng):
    """Exact joint draw of the hidden path given emissions, in log space."""
    log_init = np.asarray(log_init, dtype=float)
    log_trans = np.asarray(log_trans, dtype=float)
    log_emit = np.asarray(log_emit, dtype=float)
    for name, arr, axis in (("initial", log_init, None), ("transition", log_trans, 1)):
        sums = np.exp(arr).sum(axis=axis)
        if np.any(np.abs(sums - 1.0) > 1e-10):
            raise KernelError(f"ffbs: {name} probabilities do not sum to 1")
    if np.any(np.all(np.isinf(log_emit) & (log_emit < 0), axis=1)):
        raise KernelError("ffbs: emission column with no support")
    alpha = hmm_forward(log_init, log_trans, log_emit)
    T = log_emit.shape[0]
    z = np.empty(T, dtype=np.int64)
    z[T - 1] = sample_categorical(alpha[T - 1], rng)
    for t in range(T - 2, -1, -1):
        z[t] = sample_categorical(alpha[t] + log_trans[:, z[t + 1]], rng)
    return z
