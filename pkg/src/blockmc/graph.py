"""Model graph: nodes, factors, modular conditional targets, and the
prediction DAG.

The graph binds a parsed spec to data. Conditional log-densities sum
only the factors touching a target (Markov-blanket locality); gradients
are analytic and, when transforms are supplied, returned in
unconstrained coordinates with the Jacobian term included.
"""

from __future__ import annotations

import numpy as np

from .core import BlockMcError
from .exprs import CompRef, Expr, MatMul, contains
from .factors import FACTOR_CLASSES, Factor, FactorError
from .transforms import transform_for_support


class GraphError(BlockMcError):
    code = "E_GRAPH"


class Node:
    __slots__ = ("id", "kind", "parents", "support", "shape", "dtype")

    def __init__(self, id, kind, parents, support, shape, dtype):
        self.id = id
        self.kind = kind          # observed | parameter | latent | deterministic
        self.parents = tuple(parents)
        self.support = support
        self.shape = tuple(shape)
        self.dtype = dtype        # "real" | "int"

    def __repr__(self):
        return f"Node({self.id}, {self.kind}, shape={self.shape})"


class ModelGraph:
    def __init__(self, spec, data):
        self.spec = spec
        self.nodes = {}
        self.factors = []
        self.factor_of = {}       # child name -> Factor
        self.det_exprs = {}       # deterministic name -> Expr
        self.data = dict(data)    # observed name -> array
        self.responses = []       # observed nodes that are factor children
        self.transforms = {}      # continuous sampled name -> Transform

    # -- structure helpers ----------------------------------------------
    def node(self, name) -> Node:
        if name not in self.nodes:
            raise GraphError(f"unknown node '{name}'")
        return self.nodes[name]

    def sampled_names(self):
        """Parameters and latents, in declaration order."""
        return ([p.name for p in self.spec.params]
                + [z.name for z in self.spec.latents])

    def continuous_sampled(self):
        return [n for n in self.sampled_names() if self.nodes[n].dtype == "real"]

    def _expand_target(self, target):
        """Target plus deterministic nodes carrying it downstream."""
        expanded = set(target)
        for name, expr in self.det_exprs.items():
            if expr.refs() & expanded:
                expanded.add(name)
        return expanded

    def factors_touching(self, target):
        expanded = self._expand_target(target)
        return [f for f in self.factors
                if f.child in expanded or (f.arg_refs() & expanded)]

    def markov_blanket(self, target):
        """Pool names whose values the conditional target depends on."""
        expanded = self._expand_target(set(target))
        blanket = set()
        for f in self.factors_touching(target):
            blanket |= {f.child} | f.arg_refs()
        for name in list(blanket):
            if name in self.det_exprs:
                blanket |= self.det_exprs[name].refs()
        blanket -= set(target)
        blanket -= {n for n in expanded if n in self.det_exprs}
        return blanket

    def refresh_dets(self, env, target=None):
        touched = None if target is None else self._expand_target(set(target))
        for name, expr in self.det_exprs.items():
            if touched is None or name in touched:
                env[name] = expr.eval(env)

    # -- evaluation -------------------------------------------------------
    def conditional_logdensity(self, target, env) -> float:
        """Sum of log-factors touching `target`; finite or -inf."""
        target = {target} if isinstance(target, str) else set(target)
        self.refresh_dets(env, target)
        total = 0.0
        for f in self.factors_touching(target):
            try:
                term = f.log_density(env)
            except KeyError as err:
                raise GraphError(f"factor {f.fid}: unbound node {err}") from err
            if np.isnan(term):
                raise GraphError(f"factor {f.fid}: log-density is NaN", code="E_NUMERIC")
            total += term
            if total == -np.inf:
                return total
        return total

    def conditional_gradient(self, target, env, transforms=None):
        """Gradient of the conditional target for the ordered names in
        `target`, concatenated. With `transforms`, coordinates are
        unconstrained and the log|det J| term is included."""
        names = [target] if isinstance(target, str) else list(target)
        if transforms is None:
            ct = ConditionalTarget(self, names, {n: None for n in names})
            return ct.grad_constrained(env)
        ct = ConditionalTarget(self, names, transforms)
        x = ct.encode({n: env[n] for n in names})
        return ct.grad(x, env)


class ConditionalTarget:
    """Compiled conditional target for a block: callables over the
    block's cached environment, in unconstrained coordinates."""

    def __init__(self, graph, names, transforms):
        self.graph = graph
        self.names = list(names)
        self.transforms = dict(transforms)
        self.factors = graph.factors_touching(set(names))
        if not self.factors:
            raise GraphError(f"no factors touch target {names}")
        self._dets = [(d, e) for d, e in graph.det_exprs.items()
                      if e.refs() & set(names)]
        self.layout = []
        offset = 0
        for name in self.names:
            node = graph.node(name)
            tf = self.transforms.get(name)
            dim = tf.unconstrained_dim(node.shape) if tf is not None else (
                int(np.prod(node.shape)) if node.shape else 1)
            self.layout.append((name, offset, dim, node.shape))
            offset += dim
        self.dim = offset
        # factor -> names it must be differentiated against (direct or
        # routed through a deterministic node)
        self._grad_routes = []
        for f in self.factors:
            routes = []
            for name in self.names:
                if f.child == name or name in f.arg_refs():
                    routes.append((name, None))
                for det_name, det_expr in self._dets:
                    if name in det_expr.refs() and (
                            f.child == det_name or det_name in f.arg_refs()):
                        routes.append((name, (det_name, det_expr)))
            self._grad_routes.append((f, routes))

    # -- coordinate plumbing ----------------------------------------------
    def encode(self, values) -> np.ndarray:
        x = np.empty(self.dim)
        for name, off, dim, shape in self.layout:
            tf = self.transforms.get(name)
            v = np.asarray(values[name], dtype=float)
            xi = tf.inverse(v) if tf is not None else v
            x[off:off + dim] = np.reshape(xi, -1)
        return x

    def decode_into(self, x, env) -> float:
        """Write constrained values into env; return total log|det J|."""
        logdet = 0.0
        for name, off, dim, shape in self.layout:
            tf = self.transforms.get(name)
            xi = x[off:off + dim]
            if tf is not None:
                theta = np.asarray(tf.forward(xi))
                env[name] = theta.reshape(shape) if shape else theta.reshape(())[()]
                logdet += tf.log_abs_det(xi)
            else:
                env[name] = xi.reshape(shape).copy() if shape else float(xi[0])
        for det_name, det_expr in self._dets:
            env[det_name] = det_expr.eval(env)
        return logdet

    def current(self, env) -> dict:
        return {name: np.array(env[name], copy=True) for name in self.names}

    # -- target functions ---------------------------------------------------
    def logp(self, x, env) -> float:
        logdet = self.decode_into(x, env)
        total = logdet
        for f in self.factors:
            term = f.log_density(env)
            if np.isnan(term):
                raise GraphError(f"factor {f.fid}: log-density is NaN", code="E_NUMERIC")
            total += term
            if total == -np.inf:
                return total
        return total

    def grad_theta(self, env) -> dict:
        """Constrained-space gradient per target name at env's values."""
        grads = {name: np.zeros(np.shape(env[name])) for name in self.names}
        for f, routes in self._grad_routes:
            for name, det in routes:
                if det is None:
                    grads[name] = grads[name] + f.grad(env, name)
                else:
                    det_name, det_expr = det
                    g_det = f.grad(env, det_name)
                    grads[name] = grads[name] + det_expr.backprop(env, g_det, name)
        return grads

    def grad(self, x, env) -> np.ndarray:
        self.decode_into(x, env)
        grads = self.grad_theta(env)
        out = np.empty(self.dim)
        for name, off, dim, shape in self.layout:
            tf = self.transforms.get(name)
            xi = x[off:off + dim]
            g = np.reshape(np.asarray(grads[name], dtype=float), -1)
            if tf is not None:
                out[off:off + dim] = (np.reshape(tf.backprop(xi, g), -1)
                                      + np.reshape(tf.grad_log_det(xi), -1))
            else:
                out[off:off + dim] = g
        return out

    def grad_constrained(self, env) -> np.ndarray:
        self.graph.refresh_dets(env, set(self.names))
        grads = self.grad_theta(env)
        return np.concatenate([np.reshape(np.asarray(grads[n], dtype=float), -1)
                               for n in self.names])

    def logp_grad(self, x, env):
        """(log-density, gradient) with one decode; the gradient is NaN
        when the density is not finite (kernels treat that as a
        divergence)."""
        logdet = self.decode_into(x, env)
        total = logdet
        for f in self.factors:
            term = f.log_density(env)
            if np.isnan(term):
                raise GraphError(f"factor {f.fid}: log-density is NaN", code="E_NUMERIC")
            total += term
        if not np.isfinite(total):
            return total, np.full(self.dim, np.nan)
        grads = self.grad_theta(env)
        out = np.empty(self.dim)
        for name, off, dim, shape in self.layout:
            tf = self.transforms.get(name)
            xi = x[off:off + dim]
            g = np.reshape(np.asarray(grads[name], dtype=float), -1)
            if tf is not None:
                out[off:off + dim] = (np.reshape(tf.backprop(xi, g), -1)
                                      + np.reshape(tf.grad_log_det(xi), -1))
            else:
                out[off:off + dim] = g
        return total, out


# -- graph construction -------------------------------------------------------

def _resolve_dims(dims, scalars):
    shape = []
    for d in dims:
        if isinstance(d, int):
            shape.append(d)
        else:
            if d not in scalars:
                raise GraphError(f"dimension '{d}' is not declared integer scalar data")
            shape.append(int(scalars[d]))
    return tuple(shape)


def build_graph(spec, data=None) -> ModelGraph:
    """Bind a validated spec to data and return the model graph.

    Checks: acyclicity, every parameter attached to a factor, no dead
    parameters, support consistency, and evaluability of every factor at
    the initial point.
    """
    data = dict(data or {})
    graph = ModelGraph(spec, data)

    # bind observed values (inline literals may be overridden by `data`)
    scalars = {}
    for d in spec.data:
        if d.name in data:
            value = data[d.name]
        elif d.values is not None:
            value = d.values
        else:
            raise GraphError(f"no data supplied for '{d.name}'")
        arr = np.asarray(value, dtype=np.int64 if d.kind == "int" else np.float64)
        if not d.dims and arr.ndim == 0 and d.kind == "int":
            scalars[d.name] = int(arr)
        graph.data[d.name] = arr
    for d in spec.data:
        shape = _resolve_dims(d.dims, scalars)
        arr = graph.data[d.name]
        if tuple(arr.shape) != shape:
            raise GraphError(f"data '{d.name}' has shape {arr.shape}, declared {shape}")
        graph.nodes[d.name] = Node(d.name, "observed", (), ("unbounded",),
                                   shape, d.kind)

    # parameter and latent nodes with priors
    stmts = []
    for p in spec.params:
        shape = _resolve_dims(p.dims, scalars)
        support = _merge_support(p.name, p.support, p.prior, shape)
        graph.nodes[p.name] = Node(p.name, "parameter", (), support, shape, "real")
        stmts.append(p.prior)
    for z in spec.latents:
        shape = _resolve_dims(z.dims, scalars)
        if z.kind == "int":
            support = ("integer-range", z.lo, z.hi)
        else:
            support = _merge_support(z.name, ("unbounded",), z.prior, shape)
        graph.nodes[z.name] = Node(z.name, "latent", (), support, shape, z.kind)
        stmts.append(z.prior)
    for det in spec.dets:
        graph.nodes[det.name] = Node(det.name, "deterministic", tuple(sorted(det.expr.refs())),
                                     ("unbounded",), (), "real")
        graph.det_exprs[det.name] = det.expr

    stmts = stmts + list(spec.likelihoods)
    for stmt in stmts:
        factor = _build_factor(graph, stmt)
        graph.factors.append(factor)
        graph.factor_of[stmt.child] = factor

    # parents, responses
    for f in graph.factors:
        child = graph.node(f.child)
        parents = tuple(sorted(f.arg_refs()))
        graph.nodes[f.child] = Node(child.id, child.kind, parents, child.support,
                                    child.shape, child.dtype)
        if child.kind == "observed":
            graph.responses.append(f.child)

    _check_acyclic(graph)
    _check_dead_parameters(graph)

    for name in graph.continuous_sampled():
        graph.transforms[name] = transform_for_support(graph.node(name).support)

    # every factor must evaluate at the initial point
    env = initial_values(graph)
    graph.refresh_dets(env)
    for f in graph.factors:
        try:
            f.log_density(env)
        except (KeyError, ValueError, IndexError, FactorError) as err:
            raise GraphError(f"factor {f.fid} does not evaluate: {err}") from err
    return graph


def _merge_support(name, declared, prior, shape):
    implied = FACTOR_CLASSES[prior.dist].child_support
    if implied == "positive":
        implied_support = ("positive",)
    elif implied == "unit-interval":
        implied_support = ("interval", 0.0, 1.0)
    elif implied == "simplex":
        implied_support = ("simplex", shape[0] if shape else 1)
    elif implied == "interval":
        args = prior.args
        from .exprs import Const
        if all(isinstance(a, Const) for a in args):
            implied_support = ("interval", float(args[0].value), float(args[1].value))
        else:
            implied_support = None
    else:
        implied_support = None

    if declared[0] == "simplex":
        if implied == "simplex" or prior.dist in ("dirichlet", "stick_breaking"):
            return ("simplex", shape[0] if shape else declared[1])
        raise GraphError(f"parameter '{name}': simplex declaration needs a simplex prior")
    if implied_support is None:
        return declared
    if declared[0] == "unbounded":
        return implied_support
    if implied_support[0] == "simplex":
        raise GraphError(f"parameter '{name}': prior {prior.dist} needs a simplex declaration")
    return declared


def _build_factor(graph, stmt) -> Factor:
    cls = FACTOR_CLASSES[stmt.dist]
    kind = None
    if stmt.dist == "normal" and stmt.args:
        loc = stmt.args[0]
        if contains(loc, MatMul):
            kind = "linear-normal-likelihood"
        elif contains(loc, CompRef):
            comp = _first_compref(loc)
            idx_node = graph.nodes.get(comp.index)
            if idx_node is not None and idx_node.kind == "latent":
                prior = graph.spec.find_latent(comp.index)
                kind = "hmm-emission" if prior and prior.prior.dist == "markov_chain" \
                    else "mixture-component"
    factor = cls(stmt.child, stmt.args, kind=kind)
    for ref in factor.refs():
        if ref not in graph.nodes:
            raise GraphError(f"factor {factor.fid} references unknown node '{ref}'")
    return factor


def _first_compref(expr):
    if isinstance(expr, CompRef):
        return expr
    for attr in ("inner", "left", "right"):
        child = getattr(expr, attr, None)
        if isinstance(child, Expr):
            found = _first_compref(child)
            if found is not None:
                return found
    return None


def _check_acyclic(graph):
    color = {}

    def visit(name, stack):
        color[name] = 1
        stack.append(name)
        for parent in graph.node(name).parents:
            if color.get(parent) == 1:
                cycle = stack[stack.index(parent):] + [parent]
                raise GraphError("cycle detected: " + " -> ".join(cycle),
                                 code="E_CYCLE")
            if color.get(parent, 0) == 0:
                visit(parent, stack)
        stack.pop()
        color[name] = 2

    for name in graph.nodes:
        if color.get(name, 0) == 0:
            visit(name, [])


def _check_dead_parameters(graph):
    for name in graph.sampled_names():
        used = any(name in f.arg_refs() for f in graph.factors)
        used = used or any(name in e.refs() for e in graph.det_exprs.values())
        if graph.node(name).kind == "parameter" and not used:
            raise GraphError(f"dead parameter '{name}': sampled but never used",
                             code="E_DEAD_PARAM")


# -- initial values ------------------------------------------------------------

def initial_values(graph) -> dict:
    """Deterministic, data-informed starting point.

    Discrete latents are seeded by rank-binning their emission data;
    component locations start at the implied group means so parallel
    chains share a labeling basin. Everything else starts at a neutral
    point of its support.
    """
    env = {name: np.array(v, copy=True) for name, v in graph.data.items()}
    z_inits = {}
    for z in graph.spec.latents:
        node = graph.node(z.name)
        if node.dtype != "int":
            continue
        K = z.hi - z.lo + 1
        emission = _emission_factor(graph, z.name)
        if emission is not None:
            y = np.asarray(graph.data[emission.child], dtype=float)
            ranks = np.argsort(np.argsort(y))
            init = z.lo + (ranks * K) // max(y.size, 1)
        else:
            init = np.full(node.shape, z.lo, dtype=np.int64)
        init = np.clip(init, z.lo, z.hi).astype(np.int64)
        env[z.name] = init.reshape(node.shape)
        z_inits[z.name] = env[z.name]

    for name in graph.sampled_names():
        if name in env:
            continue
        node = graph.node(name)
        support = node.support
        if support[0] == "simplex":
            K = support[1]
            env[name] = np.full(K, 1.0 / K)
        elif support[0] == "positive":
            env[name] = np.ones(node.shape) if node.shape else np.float64(1.0)
        elif support[0] == "interval":
            mid = 0.5 * (support[1] + support[2])
            env[name] = np.full(node.shape, mid) if node.shape else np.float64(mid)
        else:
            env[name] = _informed_unbounded_init(graph, name, node, z_inits)
    graph.refresh_dets(env)
    return env


def _emission_factor(graph, z_name):
    for f in graph.factors:
        if f.kind in ("mixture-component", "hmm-emission") and f.child in graph.data:
            comp = _first_compref(f.args[0])
            if comp is not None and comp.index == z_name:
                return f
    return None


def _informed_unbounded_init(graph, name, node, z_inits):
    # component locations: group means under the initial assignment
    for f in graph.factors:
        if f.kind in ("mixture-component", "hmm-emission"):
            comp = _first_compref(f.args[0])
            if comp is not None and comp.base == name and f.child in graph.data:
                y = np.asarray(graph.data[f.child], dtype=float)
                z = z_inits.get(comp.index)
                if z is None:
                    break
                K = node.shape[0] if node.shape else 1
                out = np.empty(K)
                overall = float(np.mean(y))
                for k in range(K):
                    members = y[z == k]
                    out[k] = members.mean() if members.size else overall
                return out
    # latent that is the elementwise mean of observed data: start there
    for f in graph.factors:
        if f.kind in ("normal", "laplace") and f.child in graph.data:
            from .exprs import Ref
            if isinstance(f.args[0], Ref) and f.args[0].name == name:
                y = np.asarray(graph.data[f.child], dtype=float)
                if y.shape == node.shape:
                    return y.copy()
    return np.zeros(node.shape) if node.shape else np.float64(0.0)


# -- prediction ---------------------------------------------------------------

class PredictionDag:
    """Derived DAG for posterior prediction.

    Fitted parameters come from draws; observed non-child nodes become
    input slots (`name_new`); responses and latents become predicted
    counterparts, redrawn once their mapped parents are all specified.
    """

    def __init__(self, graph):
        self.graph = graph
        self.slots = {}        # slot label -> source node id
        self.predicted = {}    # predicted label -> node id (topological order)
        self.fitted = tuple(p.name for p in graph.spec.params)
        self.edges = set()
        referenced = set()
        for f in graph.factors:
            referenced |= f.arg_refs()
        for e in graph.det_exprs.values():
            referenced |= e.refs()
        for name, node in graph.nodes.items():
            if (node.kind == "observed" and name not in graph.factor_of
                    and name in referenced):
                self.slots[f"{name}_new"] = name
        counterpart = {}
        for name, node in graph.nodes.items():
            if name in graph.factor_of and node.kind in ("observed", "latent"):
                counterpart[name] = f"{name}_new"
        ordered = [z.name for z in graph.spec.latents if z.name in counterpart]
        ordered += [r for r in graph.responses if r in counterpart]
        for name in ordered:
            label = counterpart[name]
            self.predicted[label] = name
            for ref in sorted(graph.factor_of[name].arg_refs()):
                if ref in counterpart:
                    self.edges.add((counterpart[ref], label))
                elif f"{ref}_new" in self.slots:
                    self.edges.add((f"{ref}_new", label))
                else:
                    self.edges.add((ref, label))
        self._counterpart = counterpart

    def node_set(self):
        return set(self.fitted) | set(self.slots) | set(self.predicted)

    def predictable(self, provided_slots):
        """Predicted labels reachable from fitted draws plus the provided
        slots; adding inputs never shrinks this set."""
        specified = set(self.fitted) | set(provided_slots)
        out = []
        for label, name in self.predicted.items():
            parents = {p for p, c in self.edges if c == label}
            if parents <= (specified | set(out)):
                out.append(label)
                specified.add(label)
        return out


def derive_prediction_dag(graph) -> PredictionDag:
    return PredictionDag(graph)


def predict_at(graph, draws, new_inputs, rng, stride=1):
    """Frontier propagation over the prediction DAG.

    `draws` maps fitted names to (S, ...) arrays; returns one predicted
    value per (strided) posterior draw for exactly the predictable set.
    Never touches sampler or pool state.
    """
    dag = derive_prediction_dag(graph)
    new_inputs = dict(new_inputs or {})
    for label in new_inputs:
        if label not in dag.slots:
            raise GraphError(f"unknown predictive input slot '{label}'")
    for label, value in new_inputs.items():
        src = graph.node(dag.slots[label])
        arr = np.asarray(value, dtype=float)
        if arr.ndim != len(src.shape):
            raise GraphError(f"input '{label}' has ndim {arr.ndim}, expected {len(src.shape)}")
        if arr.ndim == 2 and src.shape and arr.shape[1] != src.shape[1]:
            raise GraphError(f"input '{label}' has {arr.shape[1]} columns, "
                             f"expected {src.shape[1]}")
        new_inputs[label] = arr
    for name in dag.fitted:
        if name not in draws or len(draws[name]) == 0:
            raise GraphError(f"empty draws for parameter '{name}'")
    n_draws = min(len(draws[name]) for name in dag.fitted) if dag.fitted else 0
    if n_draws == 0:
        raise GraphError("empty draws")
    if stride < 1:
        raise GraphError("stride must be >= 1")

    order = dag.predictable(new_inputs.keys())
    results = {label: [] for label in order}
    indices = range(0, n_draws, stride)
    for s in indices:
        env = {}
        for name in dag.fitted:
            env[name] = draws[name][s]
        for label, value in new_inputs.items():
            env[dag.slots[label]] = value
        graph.refresh_dets(env)
        for label in order:
            name = dag.predicted[label]
            factor = graph.factor_of[name]
            shape = _predictive_shape(graph, factor, env)
            sampled = factor.sample(env, rng, shape=shape)
            env[name] = sampled
            results[label].append(np.array(sampled, copy=True))
    return {label: np.stack(vals, axis=0) for label, vals in results.items()}


def _predictive_shape(graph, factor, env):
    node = graph.node(factor.child)
    if factor.kind in ("categorical", "hmm-transition", "stick-breaking-prior",
                       "dirichlet"):
        return node.shape
    try:
        shapes = [np.shape(a.eval(env)) for a in factor.args]
        bshape = np.broadcast_shapes(*shapes) if shapes else ()
    except ValueError:
        bshape = ()
    return bshape if bshape else node.shape


def replicate_observed(graph, draws, rng, indices):
    """Posterior replicates of every response at the observed inputs,
    conditioning on the fitted draws of all parameters and latents."""
    fitted = [n for n in graph.sampled_names() if n in draws]
    out = {r: [] for r in graph.responses}
    for s in indices:
        env = {name: np.array(v, copy=True) for name, v in graph.data.items()}
        for name in fitted:
            env[name] = draws[name][s]
        graph.refresh_dets(env)
        for r in graph.responses:
            factor = graph.factor_of[r]
            shape = graph.node(r).shape
            out[r].append(factor.sample(env, rng, shape=shape))
    return {r: np.stack(v, axis=0) for r, v in out.items()}


def pointwise_loglik(graph, draws, indices):
    """(S, n) pointwise log-likelihood for the exchangeable response, or
    None when leave-one-out is not well-defined for this model."""
    if len(graph.responses) != 1:
        return None, None
    response = graph.responses[0]
    factor = graph.factor_of[response]
    if not factor.exchangeable or graph.node(response).shape == ():
        return None, None
    fitted = [n for n in graph.sampled_names() if n in draws]
    rows = []
    for s in indices:
        env = {name: v for name, v in graph.data.items()}
        for name in fitted:
            env[name] = draws[name][s]
        graph.refresh_dets(env)
        rows.append(factor.pointwise(env))
    return np.asarray(rows), response
