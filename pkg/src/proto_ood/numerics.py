"""Dense float64 matrix helpers and a hand-differentiated two-layer MLP.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  Every
trainable piece in the package is built from :class:`Parameter` and
:class:`MLP2`; gradients are written by hand and verified with
:func:`grad_check`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

COSINE_EPS = 1e-12
NORM_EPS = 1e-12
# sigmoid outputs are kept strictly inside (0, 1)
PROB_CLIP = 1e-15


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class UsageError(RuntimeError):
    """An operation was called out of order (e.g. backward without forward)."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1) if m.size else m.reshape(0, 0)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    return m


@dataclass
class Parameter:
    value: np.ndarray
    name: str = "param"
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def l2_normalize_rows(m, eps: float = NORM_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Scale each row to unit norm.

    Returns ``(normalized, flagged)`` where ``flagged[i]`` is True for rows whose
    norm fell below ``eps``; those rows are returned unchanged.
    """
    m = as_matrix(m)
    norms = np.sqrt(np.sum(m * m, axis=1))
    flagged = norms < eps
    safe = np.where(flagged, 1.0, norms)
    return m / safe[:, None], flagged


def l2_normalize_rows_backward(grad_out: np.ndarray, m: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    m = as_matrix(m)
    norms = np.sqrt(np.sum(m * m, axis=1))
    flagged = norms < eps
    safe = np.where(flagged, 1.0, norms)
    z = m / safe[:, None]
    dot = np.sum(z * grad_out, axis=1, keepdims=True)
    g = (grad_out - z * dot) / safe[:, None]
    g[flagged] = grad_out[flagged]
    return g


def cosine_rows(a, b, eps: float = COSINE_EPS) -> np.ndarray:
    """Pairwise cosine similarity between rows of ``a`` (n x d) and ``b`` (t x d)."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"row widths differ: {a.shape[1]} vs {b.shape[1]}")
    na = np.sqrt(np.sum(a * a, axis=1))
    nb = np.sqrt(np.sum(b * b, axis=1))
    denom = np.maximum(np.outer(na, nb), eps)
    return np.clip((a @ b.T) / denom, -1.0, 1.0)


def cosine_rows_backward(grad_out: np.ndarray, a: np.ndarray, b: np.ndarray, eps: float = COSINE_EPS) -> np.ndarray:
    """Gradient of ``cosine_rows(a, b)`` with respect to ``a`` (``b`` held fixed).

    Clamping is treated as the identity; the eps floor is honoured.
    """
    na = np.sqrt(np.sum(a * a, axis=1))
    nb = np.sqrt(np.sum(b * b, axis=1))
    prod = np.outer(na, nb)
    guarded = prod < eps
    denom = np.where(guarded, eps, prod)
    dots = a @ b.T
    cos = dots / denom
    # d cos_ij / d a_i = b_j / (|a||b|) - cos_ij * a_i / |a|^2
    g_dir = np.where(guarded, grad_out / eps, grad_out / denom)
    grad = g_dir @ b
    inv_na2 = np.where(na > 0, 1.0 / np.where(na > 0, na * na, 1.0), 0.0)
    radial = np.sum(np.where(guarded, 0.0, grad_out * cos), axis=1) * inv_na2
    return grad - radial[:, None] * a


def softmax_rows(m) -> np.ndarray:
    m = as_matrix(m)
    if m.size == 0:
        return m.copy()
    shifted = m - np.max(m, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def softmax_rows_backward(grad_out: np.ndarray, soft: np.ndarray) -> np.ndarray:
    return soft * (grad_out - np.sum(grad_out * soft, axis=1, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, PROB_CLIP, 1.0 - PROB_CLIP)


FINAL_ACTIVATIONS = ("none", "sigmoid", "relu_sigmoid")


@dataclass
class MLPCache:
    x: np.ndarray
    pre1: np.ndarray
    hidden: np.ndarray
    pre2: np.ndarray
    out: np.ndarray


class MLP2:
    """``final(Linear2(ReLU(Linear1(x))))``.

    ``final`` is ``"none"``, ``"sigmoid"`` or ``"relu_sigmoid"`` (sigmoid applied
    after a second ReLU, i.e. the literal two-ReLU composition).
    """

    def __init__(self, n_in: int, n_hidden: int, n_out: int, final_activation: str = "none",
                 rng: np.random.Generator | None = None, name: str = "mlp"):
        if final_activation not in FINAL_ACTIVATIONS:
            raise ValueError(f"unknown final activation {final_activation!r}")
        self.n_in, self.n_hidden, self.n_out = n_in, n_hidden, n_out
        self.final_activation = final_activation
        self.name = name
        if rng is None:
            w1 = np.zeros((n_in, n_hidden))
            w2 = np.zeros((n_hidden, n_out))
        else:
            # He initialisation for the ReLU layer, Glorot-like for the output
            w1 = rng.standard_normal((n_in, n_hidden)) * np.sqrt(2.0 / max(n_in, 1))
            w2 = rng.standard_normal((n_hidden, n_out)) * np.sqrt(1.0 / max(n_hidden, 1))
        self.w1 = Parameter(w1, f"{name}.w1")
        self.b1 = Parameter(np.zeros((1, n_hidden)), f"{name}.b1")
        self.w2 = Parameter(w2, f"{name}.w2")
        self.b2 = Parameter(np.zeros((1, n_out)), f"{name}.b2")

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, x, return_cache: bool = False):
        x = as_matrix(x, "x")
        if x.shape[0] == 0:
            x = x.reshape(0, self.n_in)
        if x.shape[1] != self.n_in:
            raise DimensionError(f"{self.name}: expected {self.n_in} input columns, got {x.shape[1]}")
        pre1 = x @ self.w1.value + self.b1.value
        hidden = np.maximum(pre1, 0.0)
        pre2 = hidden @ self.w2.value + self.b2.value
        if self.final_activation == "none":
            out = pre2
        elif self.final_activation == "sigmoid":
            out = sigmoid(pre2)
        else:
            out = sigmoid(np.maximum(pre2, 0.0))
        if return_cache:
            return out, MLPCache(x, pre1, hidden, pre2, out)
        return out

    def backward(self, grad_out, cache: MLPCache | None) -> np.ndarray:
        """Accumulate parameter gradients and return the gradient w.r.t. the input."""
        if cache is None:
            raise UsageError(f"{self.name}: backward called without a forward cache")
        g = as_matrix(grad_out, "grad_out")
        if g.shape != cache.out.shape:
            raise DimensionError(f"{self.name}: upstream grad {g.shape} != output {cache.out.shape}")
        if self.final_activation == "sigmoid":
            g = g * cache.out * (1.0 - cache.out)
        elif self.final_activation == "relu_sigmoid":
            g = g * cache.out * (1.0 - cache.out) * (cache.pre2 > 0)
        self.w2.grad += cache.hidden.T @ g
        self.b2.grad += np.sum(g, axis=0, keepdims=True)
        gh = (g @ self.w2.value.T) * (cache.pre1 > 0)
        self.w1.grad += cache.x.T @ gh
        self.b1.grad += np.sum(gh, axis=0, keepdims=True)
        return gh @ self.w1.value.T


def mlp2_forward(x, mlp: MLP2):
    """Functional alias returning ``(output, cache)``."""
    return mlp.forward(x, return_cache=True)


def mlp2_backward(upstream_grad, mlp: MLP2, cache: MLPCache | None) -> np.ndarray:
    return mlp.backward(upstream_grad, cache)


class Linear:
    """Single affine layer ``x @ w + b``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None, name: str = "linear"):
        self.n_in, self.n_out, self.name = n_in, n_out, name
        w = np.zeros((n_in, n_out)) if rng is None else rng.standard_normal((n_in, n_out)) * np.sqrt(1.0 / max(n_in, 1))
        self.w = Parameter(w, f"{name}.w")
        self.b = Parameter(np.zeros((1, n_out)), f"{name}.b")

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]

    def forward(self, x) -> np.ndarray:
        x = as_matrix(x, "x")
        if x.shape[0] == 0:
            x = x.reshape(0, self.n_in)
        if x.shape[1] != self.n_in:
            raise DimensionError(f"{self.name}: expected {self.n_in} input columns, got {x.shape[1]}")
        return x @ self.w.value + self.b.value

    def backward(self, grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
        self.w.grad += x.T @ grad_out
        self.b.grad += np.sum(grad_out, axis=0, keepdims=True)
        return grad_out @ self.w.value.T


def grad_check(fn: Callable[[], float], params: Sequence[Parameter], step: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` must return the scalar loss and *accumulate* its analytic gradient
    into each parameter's ``grad``.  The relative error of a coordinate is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    zero_grads(params)
    fn()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            zero_grads(params)
            up = fn()
            flat[k] = orig - step
            zero_grads(params)
            down = fn()
            flat[k] = orig
            num = (up - down) / (2.0 * step)
            an = a.reshape(-1)[k]
            err = abs(an - num) / max(1.0, abs(an), abs(num))
            worst = max(worst, err)
    zero_grads(params)
    return worst
