"""Dense float64 linear algebra, losses, parameters, and plain SGD.

All math in the package runs through these routines. Matrix products use a
fixed left-to-right summation order over the inner dimension, so results are
bit-identical to a naive triple loop and reproducible across machines (BLAS
kernels reorder the summation and were measured to differ in the last bits).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import NumericError, ShapeError

Mat = np.ndarray  # 2-D float64, row-major

EPS_NORM = 1e-12  # zero-norm guard in l2_normalize


def as_mat(a, rows: int | None = None, cols: int | None = None) -> Mat:
    """Coerce to a C-contiguous 2-D float64 array, checking shape if given."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {m.shape[1]}")
    return m


def matmul(a: Mat, b: Mat) -> Mat:
    """Matrix product with left-to-right accumulation over the inner index.

    Equivalent to ``sum_k a[i,k]*b[k,j]`` accumulated in increasing k, which
    makes the result exactly equal to a scalar triple-loop implementation.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul operands must be 2-D")
    n, ka = a.shape
    kb, m = b.shape
    if ka != kb:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = np.zeros((n, m))
    scratch = np.empty((n, m))
    for k in range(ka):
        np.multiply(a[:, k, None], b[k, :], out=scratch)
        np.add(out, scratch, out=out)
    return out


def softmax(z) -> np.ndarray:
    """Stable softmax of a vector (max subtraction)."""
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_rows(z: Mat) -> Mat:
    """Row-wise stable softmax."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(z: Mat) -> Mat:
    z = np.asarray(z, dtype=np.float64)
    zm = z - z.max(axis=1, keepdims=True)
    return zm - np.log(np.exp(zm).sum(axis=1, keepdims=True))


def cross_entropy(logits, label: int) -> float:
    """-log softmax(logits)[label], computed via logsumexp; always >= 0."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    if not 0 <= label < z.size:
        raise IndexError(f"label {label} out of range for {z.size} logits")
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    return max(float(lse - z[label]), 0.0)


def ce_mean_and_grad(logits: Mat, labels: np.ndarray) -> tuple[float, Mat]:
    """Mean cross-entropy over rows and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    ls = log_softmax_rows(logits)
    loss = -float(ls[np.arange(n), labels].mean())
    grad = np.exp(ls)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


def l2_normalize(v) -> np.ndarray:
    """v / ||v||, or v unchanged when ||v|| <= 1e-12."""
    v = np.asarray(v, dtype=np.float64)
    nrm = float(np.sqrt((v * v).sum()))
    if nrm <= EPS_NORM:
        return v.copy()
    return v / nrm


def l2_normalize_rows(x: Mat) -> Mat:
    nrm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    safe = np.where(nrm <= EPS_NORM, 1.0, nrm)
    return x / safe


def row_norms(x: Mat) -> np.ndarray:
    return np.sqrt((x * x).sum(axis=1))


@dataclass
class Param:
    """A trainable (or frozen) tensor with an accumulated gradient."""

    value: Mat
    grad: Mat = None  # type: ignore[assignment]
    frozen: bool = False
    name: str = ""
    velocity: Mat | None = None  # allocated lazily when momentum > 0

    def __post_init__(self):
        self.value = as_mat(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = as_mat(self.grad, *self.value.shape)

    def accumulate(self, g: Mat) -> None:
        """Add to the gradient unless frozen (frozen grads stay zero)."""
        if not self.frozen:
            np.add(self.grad, g, out=self.grad)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


@dataclass
class SgdConfig:
    """Plain SGD with stepwise learning-rate decay.

    ``epochs`` may be 0, which turns any training call into a no-op (used by
    several reduction tests). Momentum and weight decay exist as knobs but
    default to off.
    """

    base_lr: float = 0.1
    decay_every: int = 30
    decay_factor: float = 0.1
    epochs: int = 90
    batch_size: int = 64
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must be in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * self.decay_factor ** (epoch // self.decay_every)


def sgd_step(params: Iterable[Param], epoch: int, cfg: SgdConfig) -> None:
    """Apply one SGD update in place and zero all gradients.

    Frozen parameters are left bitwise untouched (their grads are zero by the
    accumulate contract, but we never even read them).
    """
    lr = cfg.lr_at(epoch)
    for p in params:
        if not p.frozen:
            g = p.grad
            if cfg.weight_decay > 0.0:
                g = g + cfg.weight_decay * p.value
            if cfg.momentum > 0.0:
                if p.velocity is None:
                    p.velocity = np.zeros_like(p.value)
                np.multiply(p.velocity, cfg.momentum, out=p.velocity)
                np.add(p.velocity, g, out=p.velocity)
                g = p.velocity
            p.value -= lr * g
            if not np.isfinite(p.value).all():
                raise NumericError(f"parameter {p.name or '<unnamed>'} became non-finite")
        p.zero_grad()


def finite_diff_grad(loss_fn: Callable[[], float], p: Param, h: float) -> Mat:
    """Central-difference gradient of ``loss_fn()`` w.r.t. every entry of p.

    ``loss_fn`` must be deterministic and read ``p.value``; entries are
    perturbed in place and restored afterwards.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    flat = p.value.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        dn = loss_fn()
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(dn)):
            raise NumericError("loss is non-finite during finite differencing")
        out[i] = (up - dn) / (2.0 * h)
    return out.reshape(p.value.shape)


def params_digest(params: Iterable[Param]) -> str:
    """SHA-256 over parameter value bytes, for bitwise freeze checks."""
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()
