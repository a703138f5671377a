"""Dense float64 kernel: matmul, softmax, layernorm, attention, 2-layer MLP.

All matrices are C-contiguous numpy float64 arrays of shape (rows, cols).
Compute cost is tracked by an explicit per-run :class:`FlopCounter` using
two documented conventions:

* a multiply-accumulate counts as 2 FLOPs (so matmul of (m,k)@(k,n) is
  ``2*m*k*n``, and a bias add is ``m*n``),
* softmax, normalisation and elementwise nonlinearities count 5 FLOPs per
  element.

The counts are exact integers and additive over composed operations; only
relative comparisons between runs are meaningful.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

ELEMWISE_FLOPS = 5

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class FlopCounter:
    """Exact integer FLOP tally, bucketed by category. Per run, not global."""

    def __init__(self):
        self.by_category: dict[str, int] = {}
        self._current = "uncategorized"

    def add(self, n: int) -> None:
        c = self._current
        self.by_category[c] = self.by_category.get(c, 0) + int(n)

    @contextmanager
    def category(self, name: str):
        prev = self._current
        self._current = name
        try:
            yield self
        finally:
            self._current = prev

    def total(self) -> int:
        return sum(self.by_category.values())

    def get(self, name: str) -> int:
        return self.by_category.get(name, 0)


def _check_2d(name: str, a: np.ndarray) -> None:
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")


def matmul(a: np.ndarray, b: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    _check_2d("a", a)
    _check_2d("b", b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if counter is not None:
        counter.add(2 * a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray,
           counter: FlopCounter | None = None) -> np.ndarray:
    """x @ w + b with the bias add costed as one FLOP per output element."""
    out = matmul(x, w, counter) + b
    if counter is not None:
        counter.add(out.size)
    return out


def softmax_rows(a: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    _check_2d("a", a)
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    if counter is not None:
        counter.add(ELEMWISE_FLOPS * a.size)
    return e / e.sum(axis=1, keepdims=True)


def layernorm(a: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
              eps: float = 1e-5, counter: FlopCounter | None = None) -> np.ndarray:
    _check_2d("a", a)
    if gamma.shape != (a.shape[1],) or beta.shape != (a.shape[1],):
        raise ValueError(
            f"layernorm affine shape mismatch: cols={a.shape[1]}, "
            f"gamma={gamma.shape}, beta={beta.shape}")
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    mean = a.mean(axis=1, keepdims=True)
    var = a.var(axis=1, keepdims=True)
    if counter is not None:
        counter.add(ELEMWISE_FLOPS * a.size)
    return gamma * (a - mean) / np.sqrt(var + eps) + beta


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
              counter: FlopCounter | None = None) -> np.ndarray:
    """softmax(q.kT / sqrt(d)).v, single head."""
    _check_2d("q", q)
    _check_2d("k", k)
    _check_2d("v", v)
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"attention q/k dim mismatch: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"attention k/v row mismatch: {k.shape} vs {v.shape}")
    scale = 1.0 / float(q.shape[1]) ** 0.5
    scores = matmul(q, k.T, counter) * scale
    weights = softmax_rows(scores, counter)
    return matmul(weights, v, counter)


def gelu(x: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    if counter is not None:
        counter.add(ELEMWISE_FLOPS * x.size)
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def sigmoid(x: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    if counter is not None:
        counter.add(ELEMWISE_FLOPS * x.size)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class Mlp2:
    """Two-layer MLP: linear, GELU, linear; sigmoid head when used as classifier."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def copy(self) -> "Mlp2":
        return Mlp2(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


def mlp2_init(rng, in_dim: int, hidden: int, out_dim: int) -> Mlp2:
    from .rng import init_uniform
    return Mlp2(
        w1=init_uniform(rng, in_dim, hidden, in_dim),
        b1=rng.uniforms(hidden, -1.0 / in_dim ** 0.5, 1.0 / in_dim ** 0.5),
        w2=init_uniform(rng, hidden, out_dim, hidden),
        b2=rng.uniforms(out_dim, -1.0 / hidden ** 0.5, 1.0 / hidden ** 0.5),
    )


def mlp2_zeros(in_dim: int, hidden: int, out_dim: int) -> Mlp2:
    return Mlp2(np.zeros((in_dim, hidden)), np.zeros(hidden),
                np.zeros((hidden, out_dim)), np.zeros(out_dim))


def mlp2_forward(x: np.ndarray, p: Mlp2, counter: FlopCounter | None = None,
                 sigmoid_out: bool = False):
    """Forward pass; returns (output, cache) where cache feeds the backward pass."""
    _check_2d("x", x)
    if x.shape[1] != p.in_dim:
        raise ValueError(f"mlp2 input dim mismatch: x {x.shape}, w1 {p.w1.shape}")
    z1 = linear(x, p.w1, p.b1, counter)
    h = gelu(z1, counter)
    z2 = linear(h, p.w2, p.b2, counter)
    out = sigmoid(z2, counter) if sigmoid_out else z2
    return out, (x, z1, h, out)


def bce_loss(pred: np.ndarray, y: np.ndarray, pos_weight: float = 1.0) -> float:
    """Mean binary cross-entropy; positives weighted by pos_weight."""
    eps = 1e-12
    w = np.where(y > 0.5, pos_weight, 1.0)
    per = -(y * np.log(pred + eps) + (1.0 - y) * np.log(1.0 - pred + eps))
    return float(np.mean(w * per))


def mlp2_backward(cache, p: Mlp2, y: np.ndarray, pos_weight: float = 1.0):
    """Analytic gradients of mean weighted BCE for a sigmoid-headed Mlp2.

    For sigmoid + BCE the head gradient collapses to w*(pred - y)/n, which
    is what makes these gradients finite-difference checkable to 1e-4.
    Returns dict with dw1, db1, dw2, db2, dx.
    """
    x, z1, h, pred = cache
    if pred.shape != y.shape:
        raise ValueError(f"label shape mismatch: pred {pred.shape}, y {y.shape}")
    n = y.size
    w = np.where(y > 0.5, pos_weight, 1.0)
    dz2 = w * (pred - y) / n
    dw2 = h.T @ dz2
    db2 = dz2.sum(axis=0)
    dh = dz2 @ p.w2.T
    dz1 = dh * gelu_grad(z1)
    dw1 = x.T @ dz1
    db1 = dz1.sum(axis=0)
    dx = dz1 @ p.w1.T
    return {"dw1": dw1, "db1": db1, "dw2": dw2, "db2": db2, "dx": dx}


@dataclass
class LossCurve:
    """Per-epoch training losses plus convenience accessors."""

    losses: list[float] = field(default_factory=list)

    def append(self, loss: float) -> None:
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss: {loss}")
        self.losses.append(float(loss))

    def __len__(self) -> int:
        return len(self.losses)

    def __getitem__(self, i):
        return self.losses[i]
