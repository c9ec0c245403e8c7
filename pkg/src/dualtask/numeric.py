"""Dense float64 kernels with hand-written backward passes.

Matrices are plain ``numpy.ndarray`` objects in row-major float64.  Every
differentiable layer comes as a ``*_forward`` returning ``(output, cache)``
and a ``*_backward`` consuming the upstream gradient and that cache.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    DegenerateBatchError,
    ShapeError,
    TrainingDivergenceError,
    UndefinedSimilarityError,
)

FLOAT = np.float64


def as_vector(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=FLOAT)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-d, got shape {arr.shape}")
    return arr


def as_matrix(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=FLOAT)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Fully connected
# ---------------------------------------------------------------------------


def fc_forward(x, W, b) -> np.ndarray:
    """Return ``W @ x + b`` for a single input vector."""
    x = as_vector(x, "x")
    W = as_matrix(W, "W")
    b = as_vector(b, "b")
    if W.shape[1] != x.shape[0] or W.shape[0] != b.shape[0]:
        raise ShapeError(
            f"fc shapes disagree: W {W.shape}, x {x.shape}, b {b.shape}"
        )
    return W @ x + b


def linear_forward(X: np.ndarray, W: np.ndarray, b: np.ndarray):
    """Batched fully connected layer, rows of ``X`` are samples."""
    if X.ndim != 2 or X.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(
            f"linear shapes disagree: X {X.shape}, W {W.shape}, b {b.shape}"
        )
    return X @ W.T + b, (X, W)


def linear_backward(dY: np.ndarray, cache):
    X, W = cache
    return dY @ W, dY.T @ X, dY.sum(axis=0)


def fc_backward(dy, x, W):
    """Gradients ``(dx, dW, db)`` of ``fc_forward`` for one vector."""
    dy = as_vector(dy, "dy")
    x = as_vector(x, "x")
    return W.T @ dy, np.outer(dy, x), dy.copy()


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def sigmoid(x):
    x = np.asarray(x, dtype=FLOAT)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dy, y):
    """Gradient through a sigmoid given its output ``y``."""
    return dy * y * (1.0 - y)


def tanh_backward(dy, y):
    return dy * (1.0 - y * y)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"

    def __post_init__(self):
        k = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == k):
            raise ShapeError("batch-norm vectors must share one length")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if self.mode not in ("train", "infer"):
            raise ValueError(f"unknown batch-norm mode {self.mode!r}")

    @classmethod
    def create(cls, k: int, **kw) -> "BatchNormState":
        return cls(
            gamma=np.ones(k),
            beta=np.zeros(k),
            running_mean=np.zeros(k),
            running_var=np.ones(k),
            **kw,
        )

    @property
    def size(self) -> int:
        return self.gamma.shape[0]


def batchnorm_forward(batch, state: BatchNormState, update_running: bool = True):
    """Normalize columns of ``batch``.

    Train mode uses the batch statistics (biased variance) and, unless
    ``update_running`` is false, folds them into the running averages.
    Infer mode uses the running statistics only.  Returns ``(out, cache)``.
    """
    X = as_matrix(batch, "batch")
    if X.shape[1] != state.size:
        raise ShapeError(f"batch has {X.shape[1]} columns, state expects {state.size}")
    if state.mode == "infer":
        inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (X - state.running_mean) * inv_std
        return state.gamma * xhat + state.beta, ("infer", xhat, inv_std, state.gamma)

    B = X.shape[0]
    if B < 2:
        raise DegenerateBatchError("train-mode batch normalization needs B >= 2")
    mean = X.mean(axis=0)
    var = X.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (X - mean) * inv_std
    if update_running:
        m = state.momentum
        state.running_mean[...] = (1.0 - m) * state.running_mean + m * mean
        state.running_var[...] = (1.0 - m) * state.running_var + m * var * B / (B - 1)
    return state.gamma * xhat + state.beta, ("train", xhat, inv_std, state.gamma)


def batchnorm_backward(dout, cache):
    """Return ``(dX, dgamma, dbeta)``."""
    mode, xhat, inv_std, gamma = cache
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    if mode == "infer":
        return dxhat * inv_std, dgamma, dbeta
    B = dout.shape[0]
    dX = (inv_std / B) * (
        B * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
    )
    return dX, dgamma, dbeta


# ---------------------------------------------------------------------------
# Cosine similarity
# ---------------------------------------------------------------------------


def cosine_sim(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def l2_normalize_forward(X: np.ndarray):
    """Row-wise unit normalization with a cache for the backward pass."""
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise UndefinedSimilarityError("cannot normalize a zero row")
    Xn = X / norms
    return Xn, (Xn, norms)


def l2_normalize_backward(dXn: np.ndarray, cache):
    Xn, norms = cache
    return (dXn - Xn * (dXn * Xn).sum(axis=1, keepdims=True)) / norms


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n_or_shape, **kw) -> "AdamState":
        return cls(np.zeros(n_or_shape), np.zeros(n_or_shape), **kw)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update.

    Returns ``(new_params, new_state)``; neither input is modified.
    """
    params = np.asarray(params, dtype=FLOAT)
    grads = np.asarray(grads, dtype=FLOAT)
    if params.shape != grads.shape:
        raise ShapeError(f"params {params.shape} and grads {grads.shape} differ")
    if not np.all(np.isfinite(grads)):
        raise TrainingDivergenceError("non-finite gradient passed to Adam")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, dataclasses.replace(
        state, first_moment=m, second_moment=v, step_count=t
    )


@dataclass
class Adam:
    """Adam over a dict of named arrays, updated in place."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        for name, p in params.items():
            g = grads[name]
            st = self.states.get(name)
            if st is None:
                st = AdamState.zeros(p.shape, lr=self.lr, beta1=self.beta1,
                                     beta2=self.beta2, eps=self.eps)
            new_p, self.states[name] = adam_step(p, g, st)
            p[...] = new_p


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def numerical_gradient(fun: Callable[[np.ndarray], float], x, eps: float = 1e-5):
    """Central finite differences of a scalar function."""
    x = np.array(x, dtype=FLOAT)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = fun(x)
        x[idx] = orig - eps
        fm = fun(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest per-coordinate ``|a - n| / max(|a| + |n|, floor)``."""
    a = np.asarray(analytic, dtype=FLOAT)
    n = np.asarray(numeric, dtype=FLOAT)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.abs(a) + np.abs(n), floor)
    return float(np.max(np.abs(a - n) / denom))


def grad_check(function, x, eps: float = 1e-5) -> float:
    """Compare ``function``'s analytic gradient with central differences.

    ``function(x)`` must return ``(value, gradient)``.  Returns the max
    relative error over all coordinates.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    x = np.array(x, dtype=FLOAT)
    _, analytic = function(x.copy())
    numeric = numerical_gradient(lambda z: float(function(z)[0]), x, eps)
    return relative_error(analytic, numeric)
