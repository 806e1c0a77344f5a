"""Kernel-backed blocks and sampler assembly.

Each planned block becomes a stateful Block whose conditional target is
compiled from the model graph. Kernel state (step sizes, metrics, slice
widths) lives inside the block and survives set_current updates.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .core import Block, BlockError, Sampler, SharedPool, Value
from .exprs import Ref
from .graph import (ConditionalTarget, GraphError, build_graph, initial_values,
                    predict_at)
from .kernels import (NutsState, SliceSettings, ffbs_hmm, gibbs_beta,
                      gibbs_dirichlet, gibbs_gamma, gibbs_inv_gamma,
                      nuts_step, sample_categorical_columns,
                      slice_step_univariate, stick_breaking_update)
from .modelspec import assign_blocks


def _block_requires(graph, owns):
    blanket = graph.markov_blanket(set(owns))
    return tuple(sorted(n for n in blanket if n not in graph.det_exprs))


def _shape_map(graph, names):
    return {n: graph.node(n).shape for n in names}


class GraphBlock(Block):
    """Common plumbing: a cached environment of conditioning values."""

    def __init__(self, name, owns, graph, init_env, keep_history=True):
        requires = _block_requires(graph, owns)
        shapes = _shape_map(graph, tuple(owns) + requires)
        super().__init__(name, owns, requires, shapes, keep_history=keep_history)
        self.graph = graph
        self._env = {}
        for key in set(owns) | set(requires):
            self._env[key] = np.array(init_env[key], copy=True)
        graph.refresh_dets(self._env, set(owns) | set(requires))

    def _set_conditioning(self, values):
        owned_update = False
        for key, arr in values.items():
            self._env[key] = np.array(arr, copy=True)
            if key in self.owns:
                owned_update = True
        self.graph.refresh_dets(self._env, set(values))
        if owned_update:
            self._owned_values_changed()

    def _owned_values_changed(self):
        pass

    def _current(self):
        return {name: np.array(self._env[name], copy=True) for name in self.owns}


class NutsBlock(GraphBlock):
    def __init__(self, name, owns, graph, init_env, keep_history=True,
                 warmup=1000, max_tree_depth=10, target_accept=0.8):
        super().__init__(name, owns, graph, init_env, keep_history)
        transforms = {n: graph.transforms[n] for n in owns}
        self.target = ConditionalTarget(graph, list(owns), transforms)
        self.x = self.target.encode({n: self._env[n] for n in owns})
        self.nuts = NutsState(self.x.size, warmup=warmup,
                              max_tree_depth=max_tree_depth,
                              target_accept=target_accept)

    def _owned_values_changed(self):
        self.x = self.target.encode({n: self._env[n] for n in self.owns})

    def _advance(self, rng):
        env = self._env
        cache = {"key": None, "value": None}

        def target_fn(x):
            key = x.tobytes()
            if cache["key"] != key:
                cache["key"] = key
                cache["value"] = self.target.logp_grad(x, env)
            return cache["value"]

        self.x = nuts_step(self.nuts, self.x, target_fn, rng)
        self.target.decode_into(self.x, env)
        return self._current()

    @property
    def divergences(self):
        return self.nuts.divergences

    def state_dict(self):
        state = self.nuts.state_dict()
        state["x"] = self.x
        return state


class SliceBlock(GraphBlock):
    def __init__(self, name, owns, graph, init_env, keep_history=True,
                 width=1.0, max_expansions=50):
        super().__init__(name, owns, graph, init_env, keep_history)
        transforms = {n: graph.transforms[n] for n in owns}
        self.target = ConditionalTarget(graph, list(owns), transforms)
        if self.target.dim != 1:
            raise BlockError(f"block '{name}': slice kernel is univariate")
        self.settings = SliceSettings(width, max_expansions)
        self.x = self.target.encode({n: self._env[n] for n in owns})

    def _owned_values_changed(self):
        self.x = self.target.encode({n: self._env[n] for n in self.owns})

    def _advance(self, rng):
        env = self._env
        logpdf = lambda v: self.target.logp(np.array([v]), env)
        try:
            x_new = slice_step_univariate(self.x[0], logpdf, self.settings, rng)
        except kernels.KernelError as err:
            raise BlockError(f"block '{self.name}': {err}") from err
        self.x = np.array([x_new])
        self.target.decode_into(self.x, env)
        return self._current()

    def state_dict(self):
        return {"x": self.x}


class _DiscreteConditional:
    """Per-element conditional logits for an integer latent vector: the
    prior and every elementwise factor referencing it, evaluated with
    the latent clamped to each level."""

    def __init__(self, graph, z_name):
        self.graph = graph
        self.z = z_name
        node = graph.node(z_name)
        lo = node.support[1]
        if lo != 0:
            raise BlockError(f"latent '{z_name}': levels must start at 0")
        self.n_levels = node.support[2] + 1
        self.length = node.shape[0] if node.shape else 1
        self.factors = [f for f in graph.factors
                        if f.child == z_name or z_name in f.arg_refs()]

    def logits(self, env):
        out = np.zeros((self.n_levels, self.length))
        saved = env[self.z]
        try:
            for k in range(self.n_levels):
                env[self.z] = np.full(self.length, k, dtype=np.int64)
                for f in self.factors:
                    out[k] += f.pointwise(env)
        finally:
            env[self.z] = saved
        return out


class CategoricalGibbsBlock(GraphBlock):
    def __init__(self, name, owns, graph, init_env, keep_history=True):
        super().__init__(name, owns, graph, init_env, keep_history)
        self.conditional = _DiscreteConditional(graph, owns[0])

    def _advance(self, rng):
        z_name = self.owns[0]
        logits = self.conditional.logits(self._env)
        self._env[z_name] = sample_categorical_columns(logits, rng)
        return self._current()


class FfbsBlock(GraphBlock):
    def __init__(self, name, owns, graph, init_env, keep_history=True):
        super().__init__(name, owns, graph, init_env, keep_history)
        z_name = owns[0]
        prior = graph.factor_of[z_name]
        if prior.kind != "hmm-transition":
            raise BlockError(f"block '{name}': ffbs needs a markov_chain prior")
        self.prior = prior
        node = graph.node(z_name)
        self.n_levels = node.support[2] + 1
        self.length = node.shape[0]
        self.emissions = [f for f in graph.factors
                          if f.child != z_name and z_name in f.arg_refs()]

    def _advance(self, rng):
        env = self._env
        z_name = self.owns[0]
        init = np.asarray(self.prior.args[0].eval(env), dtype=float)
        trans = np.asarray(self.prior.args[1].eval(env), dtype=float)
        log_emit = np.zeros((self.length, self.n_levels))
        saved = env[z_name]
        try:
            for k in range(self.n_levels):
                env[z_name] = np.full(self.length, k, dtype=np.int64)
                for f in self.emissions:
                    log_emit[:, k] += f.pointwise(env)
        finally:
            env[z_name] = saved
        with np.errstate(divide="ignore"):
            z = ffbs_hmm(np.log(init), np.log(trans), log_emit, rng)
        env[z_name] = z
        return self._current()


class StickBreakingBlock(GraphBlock):
    def __init__(self, name, owns, graph, init_env, keep_history=True):
        super().__init__(name, owns, graph, init_env, keep_history)
        w_name = owns[0]
        prior = graph.factor_of[w_name]
        if prior.kind != "stick-breaking-prior":
            raise BlockError(f"block '{name}': needs a stick_breaking prior")
        self.alpha_expr = prior.args[0]
        users = [f for f in graph.factors
                 if f.kind == "categorical" and w_name in f.arg_refs()]
        if len(users) != 1 or not isinstance(users[0].args[0], Ref):
            raise BlockError(f"block '{name}': stick_breaking needs one "
                             "categorical user of the weights")
        self.assign = users[0].child
        self.K = graph.node(w_name).shape[0]

    def _advance(self, rng):
        env = self._env
        alpha = float(np.asarray(self.alpha_expr.eval(env)))
        counts = np.bincount(np.asarray(env[self.assign], dtype=int), minlength=self.K)
        env[self.owns[0]] = stick_breaking_update(alpha, counts, rng)
        return self._current()


class DirichletGibbsBlock(GraphBlock):
    def __init__(self, name, owns, graph, init_env, keep_history=True, obs=None):
        super().__init__(name, owns, graph, init_env, keep_history)
        w_name = owns[0]
        prior = graph.factor_of[w_name]
        if prior.kind != "dirichlet":
            raise BlockError(f"block '{name}': dirichlet_gibbs needs a dirichlet prior")
        self.alpha_expr = prior.args[0]
        self.obs = obs
        self.K = graph.node(w_name).shape[0]

    def _advance(self, rng):
        env = self._env
        alpha = np.broadcast_to(np.asarray(self.alpha_expr.eval(env), dtype=float),
                                (self.K,))
        counts = np.bincount(np.asarray(env[self.obs], dtype=int), minlength=self.K)
        env[self.owns[0]] = gibbs_dirichlet(alpha, counts, rng)
        return self._current()


class BetaGibbsBlock(GraphBlock):
    def __init__(self, name, owns, graph, init_env, keep_history=True, obs=None):
        super().__init__(name, owns, graph, init_env, keep_history)
        prior = graph.factor_of[owns[0]]
        self.a_expr, self.b_expr = prior.args
        self.obs = obs

    def _advance(self, rng):
        env = self._env
        x = np.asarray(env[self.obs], dtype=int)
        s = int(np.sum(x == 1))
        f = int(x.size - s)
        a = float(np.asarray(self.a_expr.eval(env)))
        b = float(np.asarray(self.b_expr.eval(env)))
        env[self.owns[0]] = np.float64(gibbs_beta((a, b), s, f, rng))
        return self._current()


class NormalMeanGibbsBlock(GraphBlock):
    """Conjugate draw of a normal mean (scalar, or elementwise vector)
    under a normal likelihood with known scale."""

    def __init__(self, name, owns, graph, init_env, keep_history=True, obs=None):
        super().__init__(name, owns, graph, init_env, keep_history)
        theta = owns[0]
        prior = graph.factor_of[theta]
        self.prior_loc, self.prior_scale = prior.args
        lik = graph.factor_of[obs]
        self.obs = obs
        self.lik_scale = lik.args[1]
        self.theta_shape = graph.node(theta).shape
        self.obs_shape = graph.node(obs).shape
        if self.theta_shape not in ((), self.obs_shape):
            raise BlockError(f"block '{name}': mean shape must be scalar or "
                             "match the observations")

    def _advance(self, rng):
        env = self._env
        y = np.asarray(env[self.obs], dtype=float)
        m0 = np.asarray(self.prior_loc.eval(env), dtype=float)
        tau0_sq = np.asarray(self.prior_scale.eval(env), dtype=float) ** 2
        sigma_sq = np.asarray(self.lik_scale.eval(env), dtype=float) ** 2
        if self.theta_shape == ():
            prec = 1.0 / tau0_sq + np.sum(1.0 / np.broadcast_to(sigma_sq, y.shape))
            v = 1.0 / prec
            m = v * (m0 / tau0_sq + np.sum(y / np.broadcast_to(sigma_sq, y.shape)))
            env[self.owns[0]] = np.float64(rng.normal(m, np.sqrt(v)))
        else:
            tau0_sq = np.broadcast_to(tau0_sq, self.theta_shape)
            sigma_sq = np.broadcast_to(sigma_sq, self.theta_shape)
            m0 = np.broadcast_to(m0, self.theta_shape)
            v = 1.0 / (1.0 / tau0_sq + 1.0 / sigma_sq)
            m = v * (m0 / tau0_sq + y / sigma_sq)
            env[self.owns[0]] = rng.normal(m, np.sqrt(v))
        return self._current()


class _ScaleGibbsBlock(GraphBlock):
    """Shared machinery for the inverse-gamma/gamma scale conjugacies."""

    def __init__(self, name, owns, graph, init_env, keep_history=True, obs=None):
        super().__init__(name, owns, graph, init_env, keep_history)
        prior = graph.factor_of[owns[0]]
        self.a_expr, self.b_expr = prior.args
        lik = graph.factor_of[obs]
        self.obs = obs
        self.lik_loc = lik.args[0]

    def _residual_ss(self, env):
        y = np.asarray(env[self.obs], dtype=float)
        loc = np.broadcast_to(np.asarray(self.lik_loc.eval(env), dtype=float), y.shape)
        return float(np.sum((y - loc) ** 2)), y.size


class InvGammaGibbsBlock(_ScaleGibbsBlock):
    def _advance(self, rng):
        env = self._env
        ss, n = self._residual_ss(env)
        a = float(np.asarray(self.a_expr.eval(env)))
        b = float(np.asarray(self.b_expr.eval(env)))
        env[self.owns[0]] = np.float64(gibbs_inv_gamma((a, b), ss, n, rng))
        return self._current()


class GammaGibbsBlock(_ScaleGibbsBlock):
    def _advance(self, rng):
        env = self._env
        ss, n = self._residual_ss(env)
        a = float(np.asarray(self.a_expr.eval(env)))
        b = float(np.asarray(self.b_expr.eval(env)))
        env[self.owns[0]] = np.float64(gibbs_gamma((a, b), 0.5 * n, 0.5 * ss, rng))
        return self._current()


_BLOCK_BUILDERS = {
    "nuts": NutsBlock,
    "joint_nuts": NutsBlock,
    "univariate_slice": SliceBlock,
    "categorical_gibbs": CategoricalGibbsBlock,
    "ffbs": FfbsBlock,
    "stick_breaking": StickBreakingBlock,
    "dirichlet_gibbs": DirichletGibbsBlock,
    "beta_gibbs": BetaGibbsBlock,
    "normal_mean_gibbs": NormalMeanGibbsBlock,
    "inv_gamma_gibbs": InvGammaGibbsBlock,
    "gamma_gibbs": GammaGibbsBlock,
}


def build_sampler(spec, data=None, seed=0, keep_history=True, chain=0,
                  warmup=1000, max_tree_depth=10, pool_debug=True):
    """Compile a spec + data into a ready sampler.

    Returns (sampler, graph). The sampler's blocks follow the planned
    assignment; NUTS blocks adapt for `warmup` steps and then freeze.
    """
    graph = build_graph(spec, data)
    plan = assign_blocks(spec)
    init = initial_values(graph)

    pool = SharedPool(debug=pool_debug)
    for d in spec.data:
        pool.declare(d.name, Value.from_array(graph.data[d.name]))
    for name in graph.sampled_names():
        pool.declare(name, Value.from_array(init[name]))

    covered = []
    blocks = []
    for planned in plan:
        builder = _BLOCK_BUILDERS[planned.kernel]
        kwargs = dict(planned.settings)
        if planned.kernel in ("nuts", "joint_nuts"):
            kwargs.update(warmup=warmup, max_tree_depth=max_tree_depth)
        block = builder(planned.name, planned.owns, graph, init,
                        keep_history=keep_history, **kwargs)
        blocks.append(block)
        covered.extend(planned.owns)
    missing = [n for n in graph.sampled_names() if n not in covered]
    if missing:
        raise BlockError(f"no block assigned for {missing}")

    sampler = Sampler(pool, blocks, seed, chain=chain)
    sampler.graph = graph

    def _predictor(smp, new_inputs, stride):
        history = smp.get_history()
        if len(history) == 0:
            raise GraphError("empty draws: step the sampler before predicting")
        draws = {name: history.draws(name) for name in history.names}
        return predict_at(graph, draws, new_inputs, smp.prediction_rng, stride=stride)

    sampler._predictor = _predictor
    return sampler, graph
