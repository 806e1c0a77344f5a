"""Constraint transforms between unconstrained sampling coordinates and
declared parameter supports.

Each transform provides the forward map, its inverse, log |det J| of the
forward map, and the two gradient pieces kernels need: a vector-Jacobian
product and the gradient of log |det J|. The unconstrained target is
then  logp(forward(x)) + log_abs_det(x)  with gradient
backprop(x, dlogp) + grad_log_det(x).
"""

from __future__ import annotations

import numpy as np


def _sigmoid(x):
    out = np.empty_like(np.asarray(x, dtype=float))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Transform:
    kind = "abstract"

    def unconstrained_dim(self, constrained_shape) -> int:
        return int(np.prod(constrained_shape)) if constrained_shape else 1

    def forward(self, x) -> np.ndarray:
        raise NotImplementedError

    def inverse(self, theta) -> np.ndarray:
        raise NotImplementedError

    def log_abs_det(self, x) -> float:
        raise NotImplementedError

    def backprop(self, x, grad_theta) -> np.ndarray:
        """grad_theta^T (d theta / d x), shaped like x."""
        raise NotImplementedError

    def grad_log_det(self, x) -> np.ndarray:
        raise NotImplementedError


class Identity(Transform):
    kind = "identity"

    def forward(self, x):
        return np.asarray(x, dtype=float)

    def inverse(self, theta):
        return np.asarray(theta, dtype=float)

    def log_abs_det(self, x):
        return 0.0

    def backprop(self, x, grad_theta):
        return np.asarray(grad_theta, dtype=float)

    def grad_log_det(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))


class Log(Transform):
    """Positive support: theta = exp(x)."""

    kind = "log"

    def forward(self, x):
        return np.exp(x)

    def inverse(self, theta):
        return np.log(theta)

    def log_abs_det(self, x):
        return float(np.sum(x))

    def backprop(self, x, grad_theta):
        return np.asarray(grad_theta) * np.exp(x)

    def grad_log_det(self, x):
        return np.ones_like(np.asarray(x, dtype=float))


class Logit(Transform):
    """Interval (a, b): theta = a + (b - a) * sigmoid(x)."""

    kind = "logit"

    def __init__(self, lower=0.0, upper=1.0):
        if not upper > lower:
            raise ValueError("interval transform needs upper > lower")
        self.lower = float(lower)
        self.upper = float(upper)

    def forward(self, x):
        return self.lower + (self.upper - self.lower) * _sigmoid(np.asarray(x, dtype=float))

    def inverse(self, theta):
        p = (np.asarray(theta, dtype=float) - self.lower) / (self.upper - self.lower)
        return np.log(p) - np.log1p(-p)

    def log_abs_det(self, x):
        s = _sigmoid(np.asarray(x, dtype=float))
        return float(np.sum(np.log(self.upper - self.lower) + np.log(s) + np.log1p(-s)))

    def backprop(self, x, grad_theta):
        s = _sigmoid(np.asarray(x, dtype=float))
        return np.asarray(grad_theta) * (self.upper - self.lower) * s * (1 - s)

    def grad_log_det(self, x):
        s = _sigmoid(np.asarray(x, dtype=float))
        return 1.0 - 2.0 * s


class StickBreaking(Transform):
    """Simplex of dimension K from K-1 unconstrained coordinates.

    z_k = sigmoid(x_k - log(K - 1 - k)), w_k = z_k * prod_{j<k} (1 - z_j),
    with the remainder in the last component. The shifted logit makes the
    zero vector map to the uniform weight vector.
    """

    kind = "stick-breaking"

    def __init__(self, dim):
        if dim < 1:
            raise ValueError("simplex dimension must be >= 1")
        self.dim = int(dim)
        self._offset = np.log(np.arange(self.dim - 1, 0, -1, dtype=float))

    def unconstrained_dim(self, constrained_shape=None) -> int:
        return self.dim - 1

    def _sticks(self, x):
        return _sigmoid(np.asarray(x, dtype=float) - self._offset)

    def _remainders(self, z):
        # R_k = prod_{j<k} (1 - z_j), k = 0..K-2
        return np.concatenate([[1.0], np.cumprod(1.0 - z)[:-1]]) if z.size else np.array([])

    def forward(self, x):
        z = self._sticks(x)
        w = np.empty(self.dim)
        rem = 1.0
        for k in range(self.dim - 1):
            w[k] = z[k] * rem
            rem *= 1.0 - z[k]
        w[-1] = rem
        return w

    def inverse(self, theta):
        w = np.asarray(theta, dtype=float)
        x = np.empty(self.dim - 1)
        rem = 1.0
        for k in range(self.dim - 1):
            z = w[k] / rem
            x[k] = np.log(z) - np.log1p(-z) + self._offset[k]
            rem -= w[k]
        return x

    def log_abs_det(self, x):
        z = self._sticks(x)
        rem = self._remainders(z)
        return float(np.sum(np.log(z) + np.log1p(-z) + np.log(rem)))

    def backprop(self, x, grad_theta):
        g = np.asarray(grad_theta, dtype=float)
        z = self._sticks(x)
        rem = self._remainders(z)
        w = self.forward(x)
        out = np.empty(self.dim - 1)
        for k in range(self.dim - 1):
            # d w_k / d z_k = R_k; d w_j / d z_k = -w_j / (1 - z_k) for j > k
            tail = np.sum(g[k + 1:] * w[k + 1:])
            out[k] = (g[k] * rem[k] - tail / (1.0 - z[k])) * z[k] * (1.0 - z[k])
        return out

    def grad_log_det(self, x):
        z = self._sticks(x)
        k = np.arange(self.dim - 1)
        return 1.0 - z * (self.dim - k)


def transform_for_support(support) -> Transform:
    """Pick the sampling transform for a declared support.

    `support` is a tuple: ("unbounded",), ("positive",),
    ("interval", lower, upper), or ("simplex", dim).
    """
    kind = support[0]
    if kind == "unbounded":
        return Identity()
    if kind == "positive":
        return Log()
    if kind == "interval":
        return Logit(support[1], support[2])
    if kind == "simplex":
        return StickBreaking(support[1])
    raise ValueError(f"no transform for support {support!r}")


def apply_transform(transform, x):
    """Map unconstrained coordinates to the constrained value plus the
    Jacobian correction to add to the unconstrained target."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite unconstrained input")
    return transform.forward(x), transform.log_abs_det(x)
