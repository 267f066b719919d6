"""Dense layer primitives with analytic gradients, Adam, and Gaussian utilities.

Everything operates on float64 numpy arrays. Matrices are 2-D row-major
arrays; a batch of frames is one matrix with one frame per row. There is no
autodiff graph: each forward returns what its backward needs, and backward
passes are hand-derived.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected 1-D or 2-D array, got shape {a.shape}")
    return a


def affine_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x @ w + b with b broadcast per row. x is (n, din), w (din, dout), b (dout,)."""
    x = _as_matrix(x)
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: input cols {x.shape[1]} != weight rows {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} != ({w.shape[1]},)")
    return x @ w + b


def affine_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Gradients of affine_forward. Returns (dx, dw, db)."""
    dout = _as_matrix(dout)
    x = _as_matrix(x)
    if dout.shape != (x.shape[0], w.shape[1]):
        raise ShapeError(
            f"affine backward: upstream shape {dout.shape} != ({x.shape[0]}, {w.shape[1]})"
        )
    dx = dout @ w.T
    dw = x.T @ dout
    db = dout.sum(axis=0)
    return dx, dw, db


def tanh_forward(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Backward through tanh given the forward output."""
    return dout * (1.0 - out * out)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, output strictly in (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-shift; accepts a single vector or a matrix."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class DiagGaussian:
    """Diagonal Gaussian given by mean and log-variance of equal shape.

    Shapes may be (m,) for a single distribution or (n, m) for one
    distribution per row.
    """

    mean: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.logvar = np.asarray(self.logvar, dtype=np.float64)
        if self.mean.shape != self.logvar.shape:
            raise ShapeError(
                f"mean shape {self.mean.shape} != logvar shape {self.logvar.shape}"
            )
        if not np.all(np.isfinite(self.logvar)):
            raise ValueError("log-variance must be finite")

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.logvar)


def gaussian_log_density(x: np.ndarray, g: DiagGaussian) -> float:
    """Log density of x under g, summed over coordinates.

    For row-shaped inputs ((n, m) against an (n, m) Gaussian) returns the
    per-row log densities as an (n,) array.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != g.mean.shape:
        raise ShapeError(f"point shape {x.shape} != gaussian shape {g.mean.shape}")
    var = np.exp(g.logvar)
    sq = (x - g.mean) ** 2 / var
    terms = -0.5 * (LOG_2PI + g.logvar + sq)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian) -> float:
    """Closed-form KL(q || p) for diagonal Gaussians, summed over coordinates.

    Row-shaped inputs give per-row KLs as an (n,) array.
    """
    if q.mean.shape != p.mean.shape:
        raise ShapeError(f"q shape {q.mean.shape} != p shape {p.mean.shape}")
    var_ratio = np.exp(q.logvar - p.logvar)
    sq = (q.mean - p.mean) ** 2 / np.exp(p.logvar)
    terms = 0.5 * (var_ratio + sq - 1.0 + p.logvar - q.logvar)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def sample_gaussian(g: DiagGaussian, rng: np.random.Generator):
    """Reparameterized sample: mean + exp(logvar/2) * noise. Returns (sample, noise)."""
    noise = rng.standard_normal(g.mean.shape)
    return g.mean + g.std * noise, noise


@dataclass
class _Slot:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamStore:
    """Named parameter tensors with paired gradient and Adam moment buffers.

    Single-writer: gradient accumulation and optimizer steps must not run
    concurrently. Values are updated in place so callers may hold views.
    """

    _slots: dict[str, _Slot] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._slots:
            raise KeyError(f"parameter {name!r} already registered")
        value = np.array(value, dtype=np.float64)
        self._slots[name] = _Slot(
            value=value,
            grad=np.zeros_like(value),
            m=np.zeros_like(value),
            v=np.zeros_like(value),
        )
        return value

    def names(self):
        return list(self._slots)

    def value(self, name: str) -> np.ndarray:
        return self._slots[name].value

    def grad(self, name: str) -> np.ndarray:
        return self._slots[name].grad

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        slot = self._slots[name]
        if grad.shape != slot.value.shape:
            raise ShapeError(
                f"gradient shape {grad.shape} != parameter {name!r} shape {slot.value.shape}"
            )
        slot.grad += grad

    def zero_grads(self, names=None) -> None:
        for name in names if names is not None else self._slots:
            self._slots[name].grad[...] = 0.0

    def scale_grads(self, factor: float, names=None) -> None:
        for name in names if names is not None else self._slots:
            self._slots[name].grad *= factor

    def grad_norm(self, names=None) -> float:
        total = 0.0
        for name in names if names is not None else self._slots:
            g = self._slots[name].grad
            total += float(np.dot(g.ravel(), g.ravel()))
        return math.sqrt(total)

    def snapshot(self, names=None) -> dict[str, np.ndarray]:
        return {
            name: self._slots[name].value.copy()
            for name in (names if names is not None else self._slots)
        }


def adam_step(
    store: ParamStore,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    names=None,
) -> None:
    """Bias-corrected Adam update on the named parameters (all by default).

    Clears the gradients it consumed and increments each slot's step counter.
    """
    for name in names if names is not None else store._slots:
        slot = store._slots[name]
        g = slot.grad
        slot.step += 1
        slot.m[...] = beta1 * slot.m + (1.0 - beta1) * g
        slot.v[...] = beta2 * slot.v + (1.0 - beta2) * g * g
        m_hat = slot.m / (1.0 - beta1**slot.step)
        v_hat = slot.v / (1.0 - beta2**slot.step)
        slot.value -= learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        slot.grad[...] = 0.0
