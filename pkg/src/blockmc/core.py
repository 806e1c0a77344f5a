"""Stateful sampling core: tagged values, the shared pool, RNG streams,
the block contract, and the outer sampler loop.

A sampler is a list of blocks visited in declaration order. Each outer
iteration reads every block's conditioning quantities from the pool,
advances the block by one transition, and commits the block's owned
parameters back to the pool so later blocks in the same iteration see
the fresh values (sequential-scan semantics).
"""

from __future__ import annotations

import json

import numpy as np

STREAM_SAMPLING = 0
STREAM_PREDICTION = 1


def chain_stream(chain: int) -> int:
    """Sampling-stream id for chain `chain` (0-based).

    The primary chain keeps the default sampling stream; extra chains in
    multi-chain runs get dedicated substreams so they are independent of
    the primary chain and of the prediction stream.
    """
    return STREAM_SAMPLING if chain == 0 else 2 + chain


class BlockMcError(Exception):
    """Base error; `code` is the machine-readable diagnostic code."""

    code = "E_RUNTIME"

    def __init__(self, message, code=None):
        super().__init__(message)
        if code is not None:
            self.code = code


class PoolError(BlockMcError):
    code = "E_POOL"


class ShapeError(BlockMcError):
    code = "E_SHAPE"


class NonFiniteError(BlockMcError):
    code = "E_NONFINITE"


class BlockError(BlockMcError):
    code = "E_BLOCK"


class SamplerError(BlockMcError):
    """Raised when a block fails inside the outer loop; names the block
    and the 1-based outer iteration."""

    code = "E_SAMPLER"

    def __init__(self, block, iteration, cause):
        super().__init__(f"block '{block}' failed at iteration {iteration}: {cause}")
        self.block = block
        self.iteration = iteration


REAL_KINDS = ("real", "real_vector", "real_matrix")
INT_KINDS = ("int", "int_vector")


class Value:
    """Tagged numeric payload moved between blocks through the pool.

    Payloads are dense numpy arrays: float64 for the real kinds, int64
    for the integer kinds. Scalars are 0-d arrays.
    """

    __slots__ = ("kind", "array")

    def __init__(self, kind, array):
        if kind not in REAL_KINDS + INT_KINDS:
            raise ValueError(f"unknown value kind {kind!r}")
        dtype = np.float64 if kind in REAL_KINDS else np.int64
        arr = np.asarray(array, dtype=dtype)
        expected_ndim = {"real": 0, "real_vector": 1, "real_matrix": 2,
                         "int": 0, "int_vector": 1}[kind]
        if arr.ndim != expected_ndim:
            raise ShapeError(f"{kind} payload must have ndim {expected_ndim}, got {arr.ndim}")
        self.kind = kind
        self.array = arr

    @classmethod
    def from_array(cls, array):
        arr = np.asarray(array)
        if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
            kind = {0: "int", 1: "int_vector"}.get(arr.ndim)
        else:
            kind = {0: "real", 1: "real_vector", 2: "real_matrix"}.get(arr.ndim)
        if kind is None:
            raise ShapeError(f"no value kind for dtype {arr.dtype} with ndim {arr.ndim}")
        return cls(kind, arr)

    @property
    def shape(self):
        return self.array.shape

    @property
    def is_real(self):
        return self.kind in REAL_KINDS

    def copy(self):
        return Value(self.kind, self.array.copy())

    def __repr__(self):
        return f"Value({self.kind}, shape={self.shape})"


def check_finite(name, array):
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite value for '{name}'")


class SharedPool:
    """Named, versioned store of the current values of all data, latents,
    and parameters.

    Every name must be declared before it is read or written; versions
    increase strictly on each committed write. Real payloads are rejected
    if non-finite (`debug=False` disables the scan, never the contract).
    """

    def __init__(self, debug=True):
        self._entries = {}
        self._versions = {}
        self.debug = debug

    @property
    def names(self):
        return tuple(self._entries)

    def declare(self, name, value):
        if name in self._entries:
            raise PoolError(f"name '{name}' already declared")
        value = value if isinstance(value, Value) else Value.from_array(value)
        if value.is_real:
            check_finite(name, value.array)
        self._entries[name] = value.copy()
        self._versions[name] = 0

    def _require(self, name):
        if name not in self._entries:
            raise PoolError(f"read of undeclared pool name '{name}'", code="E_POOL_UNDECLARED")

    def read(self, name) -> Value:
        self._require(name)
        return self._entries[name].copy()

    def value(self, name) -> np.ndarray:
        self._require(name)
        return self._entries[name].array

    def version(self, name) -> int:
        self._require(name)
        return self._versions[name]

    def write(self, name, value):
        self._require(name)
        value = value if isinstance(value, Value) else Value.from_array(value)
        current = self._entries[name]
        if value.kind != current.kind:
            raise ShapeError(f"kind mismatch writing '{name}': {value.kind} != {current.kind}")
        if value.shape != current.shape:
            raise ShapeError(f"shape mismatch writing '{name}': {value.shape} != {current.shape}")
        if self.debug and value.is_real:
            check_finite(name, value.array)
        self._entries[name] = value.copy()
        self._versions[name] += 1

    def snapshot(self) -> dict:
        """name -> plain array copy of the current state."""
        return {name: v.array.copy() for name, v in self._entries.items()}


class RngStreams:
    """Deterministic substreams of one 64-bit seed.

    Streams are keyed counter-based generators, so draws on one stream
    never perturb any other stream: 0 is the sampling stream, 1 the
    prediction stream, and `chain_stream(k)` the per-chain sampling
    streams used by multi-chain runs.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, stream_id: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=[self.seed, int(stream_id)]))


class BlockDescriptor:
    """Static description of a block: its owned parameters, the pool
    names it conditions on, and the kernel that updates it."""

    def __init__(self, name, owns, requires, kernel, settings=None):
        self.name = name
        self.owns = tuple(owns)
        self.requires = tuple(requires)
        self.kernel = kernel
        self.settings = dict(settings or {})
        overlap = set(self.owns) & set(self.requires)
        if overlap:
            raise BlockError(f"block '{name}': owns and requires overlap on {sorted(overlap)}")

    def __repr__(self):
        return f"BlockDescriptor({self.name}, owns={self.owns}, kernel={self.kernel})"


class History:
    """Append-only per-parameter trajectory with iteration indices.

    When recording is disabled only the most recent draw is kept.
    """

    def __init__(self, names, enabled=True):
        self.names = tuple(names)
        self.enabled = enabled
        self._draws = {name: [] for name in self.names}
        self._iterations = []

    def record(self, iteration, values):
        if not self.enabled:
            self._iterations = [iteration]
            for name in self.names:
                self._draws[name] = [np.array(values[name], copy=True)]
            return
        self._iterations.append(iteration)
        for name in self.names:
            self._draws[name].append(np.array(values[name], copy=True))

    def __len__(self):
        return len(self._iterations)

    @property
    def iterations(self):
        return list(self._iterations)

    def draws(self, name) -> np.ndarray:
        if name not in self._draws:
            raise KeyError(f"no history for '{name}'")
        rows = self._draws[name]
        if not rows:
            return np.empty((0,))
        return np.stack(rows, axis=0)

    @staticmethod
    def merged(histories):
        """Combine block histories into one view over all names."""
        out = History([], enabled=any(h.enabled for h in histories))
        for h in histories:
            out.names = out.names + h.names
            for name in h.names:
                out._draws[name] = h._draws[name]
            if len(h._iterations) > len(out._iterations):
                out._iterations = h._iterations
        return out


class Block:
    """Stateful sampling unit owning a parameter set.

    Subclasses implement `_set_conditioning` and `_advance`; this base
    class provides input validation, history recording, and the public
    set_current / step / get_current / get_history surface. Kernel state
    survives across set_current calls: conditioning updates never
    reinitialize a block.
    """

    def __init__(self, name, owns, requires, shapes, keep_history=True):
        self.name = name
        self.owns = tuple(owns)
        self.requires = tuple(requires)
        self._shapes = dict(shapes)  # name -> expected array shape
        self._history = History(self.owns, enabled=keep_history)
        self._steps_taken = 0

    # -- subclass hooks -------------------------------------------------
    def _set_conditioning(self, values):
        raise NotImplementedError

    def _advance(self, rng):
        """One transition; returns dict name -> array for owned names."""
        raise NotImplementedError

    def _current(self) -> dict:
        raise NotImplementedError

    def state_dict(self) -> dict:
        """Internal kernel state for serialization checks."""
        return {}

    # -- public contract ------------------------------------------------
    def set_current(self, inputs):
        known = set(self.requires) | set(self.owns)
        arrays = {}
        for name, value in inputs.items():
            if name not in known:
                raise BlockError(f"block '{self.name}': unknown input '{name}'")
            arr = value.array if isinstance(value, Value) else np.asarray(value)
            expected = self._shapes.get(name)
            if expected is not None and arr.shape != tuple(expected):
                raise ShapeError(
                    f"block '{self.name}': shape mismatch for '{name}': "
                    f"{arr.shape} != {tuple(expected)}")
            if np.issubdtype(arr.dtype, np.floating):
                check_finite(name, arr)
            arrays[name] = arr
        if arrays:
            self._set_conditioning(arrays)

    def step(self, rng):
        values = self._advance(rng)
        self._steps_taken += 1
        self._history.record(self._steps_taken, values)

    def get_current(self) -> dict:
        return {name: Value.from_array(arr) for name, arr in self._current().items()}

    def get_history(self) -> History:
        return self._history

    @property
    def steps_taken(self):
        return self._steps_taken


class CompositeBlock(Block):
    """Container block that steps its children in order against an
    internal pool, so inner blocks observe each other's same-iteration
    updates exactly as top-level blocks do."""

    def __init__(self, name, children, keep_history=True):
        if not children:
            raise BlockError(f"composite '{name}' needs at least one child")
        self.children = list(children)
        owns = []
        child_requires = set()
        for child in self.children:
            owns.extend(child.owns)
            child_requires.update(child.requires)
        requires = tuple(sorted(child_requires - set(owns)))
        super().__init__(name, owns, requires, shapes={}, keep_history=keep_history)
        # internal pool seeded with the children's current state
        self._pool = SharedPool()
        for child in self.children:
            for pname, val in child.get_current().items():
                self._pool.declare(pname, val)
        self._external = set(requires)
        for rname in requires:
            self._pool.declare(rname, Value("real", 0.0))
        self._external_ready = set()

    def _set_conditioning(self, values):
        for name, arr in values.items():
            if name in self._external and name not in self._external_ready:
                # shape fixed by first delivery
                self._pool._entries[name] = Value.from_array(arr)
                self._external_ready.add(name)
            else:
                self._pool.write(name, arr)

    def _advance(self, rng):
        for child in self.children:
            inputs = {nm: self._pool.read(nm) for nm in child.requires}
            try:
                child.set_current(inputs)
                child.step(rng)
            except BlockMcError as err:
                raise BlockError(f"{self.name}/{err}") from err
            for pname, val in child.get_current().items():
                self._pool.write(pname, val)
        return self._current()

    def _current(self):
        out = {}
        for child in self.children:
            for pname, val in child.get_current().items():
                out[pname] = val.array
        return out

    def state_dict(self):
        return {child.name: child.state_dict() for child in self.children}

    def get_history(self):
        return History.merged([child.get_history() for child in self.children])


class Sampler:
    """Outer stateful sampler: visits blocks in declared order and keeps
    the shared pool current.

    The sampler itself follows the block contract (set_current / step /
    get_current / get_history), so it composes recursively with the same
    semantics as any block.
    """

    def __init__(self, pool, blocks, seed, chain=0):
        self.pool = pool
        self.blocks = list(blocks)
        self.streams = RngStreams(seed)
        self.seed = int(seed)
        self.chain = chain
        self.sampling_rng = self.streams.stream(chain_stream(chain))
        self.prediction_rng = self.streams.stream(STREAM_PREDICTION)
        self.iteration = 0
        self._predictor = None  # attached by the model builder
        owned = [name for b in self.blocks for name in b.owns]
        dupes = {n for n in owned if owned.count(n) > 1}
        if dupes:
            raise BlockError(f"parameters owned by more than one block: {sorted(dupes)}")
        self._owned = set(owned)
        for b in self.blocks:
            for name in list(b.owns) + list(b.requires):
                pool._require(name)

    def set_current(self, inputs):
        """Update conditioning quantities (e.g. refreshed data) in place;
        block kernel state is retained."""
        staged = {}
        for name, value in inputs.items():
            value = value if isinstance(value, Value) else Value.from_array(value)
            current = self.pool.read(name)  # raises on undeclared
            if value.kind != current.kind or value.shape != current.shape:
                raise ShapeError(f"set_current('{name}') shape/kind mismatch")
            if value.is_real:
                check_finite(name, value.array)
            staged[name] = value
        for name, value in staged.items():
            self.pool.write(name, value)
            for b in self.blocks:
                if name in b.owns:
                    b.set_current({name: value})

    def step(self, n=1):
        if n < 0:
            raise ValueError("step count must be >= 0")
        for _ in range(n):
            self.iteration += 1
            for block in self.blocks:
                inputs = {nm: self.pool.read(nm) for nm in block.requires}
                try:
                    block.set_current(inputs)
                    block.step(self.sampling_rng)
                except Exception as err:
                    raise SamplerError(block.name, self.iteration, err) from err
                for name, val in block.get_current().items():
                    self.pool.write(name, val)

    def get_current(self) -> dict:
        out = {}
        for block in self.blocks:
            out.update(block.get_current())
        return out

    def get_history(self) -> History:
        return History.merged([b.get_history() for b in self.blocks])

    def predict_at(self, new_inputs, stride=1):
        if self._predictor is None:
            raise BlockMcError("sampler has no prediction graph attached")
        return self._predictor(self, new_inputs, stride)

    def state_bytes(self) -> bytes:
        """Deterministic serialization of pool contents, block states,
        and the sampling stream (the prediction stream is excluded: it
        may advance without affecting MCMC state)."""
        parts = [b"pool"]
        for name in sorted(self.pool.names):
            v = self.pool.read(name)
            parts += [name.encode(), v.kind.encode(),
                      repr(self.pool.version(name)).encode(),
                      repr(v.shape).encode(), v.array.tobytes()]
        parts.append(b"blocks")
        for block in self.blocks:
            parts += [block.name.encode(), _pack_state(block.state_dict())]
        parts.append(b"rng")
        parts.append(_pack_state(self.sampling_rng.bit_generator.state))
        parts.append(repr(self.iteration).encode())
        return b"\x00".join(parts)


def _pack_state(obj) -> bytes:
    """Stable byte packing for nested dicts of arrays and primitives."""
    if isinstance(obj, dict):
        items = [(k, _pack_state(obj[k])) for k in sorted(obj)]
        return b"{" + b",".join(k.encode() + b":" + v for k, v in items) + b"}"
    if isinstance(obj, (list, tuple)):
        return b"[" + b",".join(_pack_state(x) for x in obj) + b"]"
    if isinstance(obj, np.ndarray):
        return repr(obj.shape).encode() + obj.tobytes()
    if isinstance(obj, (np.integer, np.floating)):
        return repr(obj.item()).encode()
    return json.dumps(obj, sort_keys=True, default=repr).encode()
