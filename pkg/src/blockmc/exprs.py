"""Argument expressions for factors.

A factor argument is a tiny expression over pool names: constants,
references, elementwise sums/products, `sqrt`/`inv_sqrt`, a single
matrix-vector product, and component indexing `mu[z]` by an integer
vector. Each node evaluates against an environment of arrays and can
push a gradient back to any referenced name (`backprop`), which is all
the structure the conditional-gradient machinery needs.
"""

from __future__ import annotations

import numpy as np


def reduce_to_shape(grad, shape):
    """Sum `grad` over broadcast axes so it matches `shape`."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape == tuple(shape):
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    for axis, n in enumerate(shape):
        if grad.shape[axis] != n:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Expr:
    def eval(self, env):
        raise NotImplementedError

    def refs(self) -> set:
        raise NotImplementedError

    def backprop(self, env, grad, wrt):
        """Return (d value / d env[wrt])^T applied to `grad`, shaped like
        env[wrt]. Only called when wrt is in refs()."""
        raise NotImplementedError


class Const(Expr):
    def __init__(self, value):
        self.value = np.asarray(value, dtype=float)

    def eval(self, env):
        return self.value

    def refs(self):
        return set()

    def backprop(self, env, grad, wrt):
        raise ValueError("constant has no gradient")

    def __repr__(self):
        if self.value.ndim == 0:
            return format(float(self.value), "g")
        return "[" + ", ".join(format(v, "g") for v in self.value) + "]"


class Ref(Expr):
    def __init__(self, name):
        self.name = name

    def eval(self, env):
        return env[self.name]

    def refs(self):
        return {self.name}

    def backprop(self, env, grad, wrt):
        if wrt != self.name:
            raise ValueError(f"{self.name} does not reference {wrt}")
        return reduce_to_shape(grad, np.shape(env[self.name]))

    def __repr__(self):
        return self.name


class CompRef(Expr):
    """base[index]: gather components of `base` by an integer vector."""

    def __init__(self, base, index):
        self.base = base
        self.index = index

    def eval(self, env):
        return env[self.base][env[self.index]]

    def refs(self):
        return {self.base, self.index}

    def backprop(self, env, grad, wrt):
        if wrt == self.index:
            raise ValueError("gradient with respect to a discrete index")
        idx = env[self.index]
        out = np.zeros_like(np.asarray(env[self.base], dtype=float))
        np.add.at(out, idx, np.broadcast_to(grad, np.shape(idx)))
        return out

    def __repr__(self):
        return f"{self.base}[{self.index}]"


class Sqrt(Expr):
    def __init__(self, inner):
        self.inner = inner

    def eval(self, env):
        return np.sqrt(self.inner.eval(env))

    def refs(self):
        return self.inner.refs()

    def backprop(self, env, grad, wrt):
        val = self.inner.eval(env)
        return self.inner.backprop(env, grad * 0.5 / np.sqrt(val), wrt)

    def __repr__(self):
        return f"sqrt({self.inner!r})"


class InvSqrt(Expr):
    def __init__(self, inner):
        self.inner = inner

    def eval(self, env):
        return self.inner.eval(env) ** -0.5

    def refs(self):
        return self.inner.refs()

    def backprop(self, env, grad, wrt):
        val = self.inner.eval(env)
        return self.inner.backprop(env, grad * (-0.5) * val ** -1.5, wrt)

    def __repr__(self):
        return f"inv_sqrt({self.inner!r})"


class MatMul(Expr):
    """X @ beta for a data matrix and a coefficient vector."""

    def __init__(self, matrix, vector):
        self.matrix = matrix
        self.vector = vector

    def eval(self, env):
        return env[self.matrix] @ env[self.vector]

    def refs(self):
        return {self.matrix, self.vector}

    def backprop(self, env, grad, wrt):
        grad = np.broadcast_to(grad, (env[self.matrix].shape[0],))
        if wrt == self.vector:
            return env[self.matrix].T @ grad
        return np.outer(grad, env[self.vector])

    def __repr__(self):
        return f"{self.matrix} @ {self.vector}"


class Add(Expr):
    def __init__(self, left, right):
        self.left = left
        self.right = right

    def eval(self, env):
        return self.left.eval(env) + self.right.eval(env)

    def refs(self):
        return self.left.refs() | self.right.refs()

    def backprop(self, env, grad, wrt):
        out = None
        for side in (self.left, self.right):
            if wrt in side.refs():
                g = side.backprop(env, grad, wrt)
                out = g if out is None else out + g
        if out is None:
            raise ValueError(f"{self!r} does not reference {wrt}")
        return out

    def __repr__(self):
        return f"{self.left!r} + {self.right!r}"


class Mul(Expr):
    def __init__(self, left, right):
        self.left = left
        self.right = right

    def eval(self, env):
        return self.left.eval(env) * self.right.eval(env)

    def refs(self):
        return self.left.refs() | self.right.refs()

    def backprop(self, env, grad, wrt):
        out = None
        lval = self.left.eval(env)
        rval = self.right.eval(env)
        if wrt in self.left.refs():
            out = self.left.backprop(env, grad * rval, wrt)
        if wrt in self.right.refs():
            g = self.right.backprop(env, grad * lval, wrt)
            out = g if out is None else out + g
        if out is None:
            raise ValueError(f"{self!r} does not reference {wrt}")
        return out

    def __repr__(self):
        left = f"({self.left!r})" if isinstance(self.left, Add) else repr(self.left)
        right = f"({self.right!r})" if isinstance(self.right, Add) else repr(self.right)
        return f"{left} * {right}"


def contains(expr, kind) -> bool:
    if isinstance(expr, kind):
        return True
    for attr in ("inner", "left", "right"):
        child = getattr(expr, attr, None)
        if isinstance(child, Expr) and contains(child, kind):
            return True
    return False
