"""Dense-network building blocks with hand-written gradients.

Everything runs in float64. Layers are plain functions over explicit
parameter objects; the forward functions return whatever the matching
backward needs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class ShapeMismatch(ValueError):
    pass


class BatchTooSmall(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class Mode(str, enum.Enum):
    TRAIN = "train"
    INFER = "infer"


LEAKY_SLOPE = 0.1
DROPOUT_RATE = 0.5
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


# ----------------------------------------------------------------------------
# dense


@dataclass
class DenseParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


def dense_forward(p: DenseParams, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise ShapeMismatch(f"input of shape {x.shape} for a layer of shape {p.weight.shape}")
    return x @ p.weight.T + p.bias


def dense_backward(p: DenseParams, x: np.ndarray, grad_out: np.ndarray) -> tuple[np.ndarray, DenseParams]:
    if grad_out.shape != (x.shape[0], p.weight.shape[0]):
        raise ShapeMismatch(f"upstream gradient {grad_out.shape} does not match output {(x.shape[0], p.weight.shape[0])}")
    return grad_out @ p.weight, DenseParams(grad_out.T @ x, grad_out.sum(axis=0))


def he_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> DenseParams:
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"layer dims must be >= 1, got {fan_in}x{fan_out}")
    w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
    return DenseParams(w, np.zeros(fan_out))


# ----------------------------------------------------------------------------
# activations / regularizers


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    if not 0.0 <= slope <= 1.0:
        return np.where(x >= 0, x, slope * x)
    return np.maximum(x, slope * x)


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    # derivative at exactly 0 is taken as 1
    return np.where(x >= 0, grad_out, slope * grad_out)


def dropout(
    x: np.ndarray, rate: float, mode: Mode, rng: np.random.Generator | None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is None for identity passes."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode is Mode.INFER or rate == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate) * (1.0 / (1.0 - rate))
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, width: int) -> "BatchNormState":
        return cls(np.ones(width), np.zeros(width), np.zeros(width), np.ones(width))


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray


def batchnorm_forward(
    state: BatchNormState, x: np.ndarray, mode: Mode, update_running: bool = True
) -> tuple[np.ndarray, BatchNormCache | None]:
    """Batch normalization.

    In training mode the batch statistics normalize ``x`` and the running
    statistics move toward them (unbiased variance, as most frameworks do).
    In inference mode the running statistics are used and no cache is
    returned.
    """
    if mode is Mode.INFER:
        return (x - state.running_mean) / np.sqrt(state.running_var + state.eps) * state.gamma + state.beta, None
    n = x.shape[0]
    if n < 2:
        raise BatchTooSmall(f"batch norm needs at least 2 rows in training mode, got {n}")
    mean = x.sum(axis=0) * (1.0 / n)
    centered = x - mean
    var = np.einsum("ij,ij->j", centered, centered) * (1.0 / n)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv_std
    if update_running:
        m = state.momentum
        state.running_mean *= 1.0 - m
        state.running_mean += m * mean
        state.running_var *= 1.0 - m
        state.running_var += m * var * (n / (n - 1))
    return xhat * state.gamma + state.beta, BatchNormCache(xhat, inv_std)


def batchnorm_backward(
    state: BatchNormState, cache: BatchNormCache, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(grad_x, grad_gamma, grad_beta)`` for a training-mode pass."""
    n = grad_out.shape[0]
    xhat = cache.xhat
    grad_beta = grad_out.sum(axis=0)
    grad_gamma = np.einsum("ij,ij->j", grad_out, xhat)
    # with g = grad_out * gamma: sum(g) = gamma * grad_beta, sum(g * xhat) = gamma * grad_gamma
    scale = state.gamma * cache.inv_std
    grad_x = (grad_out - (grad_beta + xhat * grad_gamma) * (1.0 / n)) * scale
    return grad_x, grad_gamma, grad_beta


# ----------------------------------------------------------------------------
# loss


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise LengthMismatch(f"prediction shape {pred.shape} != target shape {target.shape}")
    n = pred.size
    if n < 1:
        raise LengthMismatch("mse of an empty vector")
    diff = pred - target
    return float(np.dot(diff.ravel(), diff.ravel()) / n), 2.0 * diff / n


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    """Per-parameter moment estimates for Adam with the AMSGrad maximum."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    v_max: list[np.ndarray] = field(default_factory=list)
    scratch: list[np.ndarray] = field(default_factory=list, repr=False)

    @classmethod
    def for_params(cls, params: list[np.ndarray], learning_rate: float, **kw) -> "OptimState":
        return cls(
            learning_rate=learning_rate,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            v_max=[np.zeros_like(p) for p in params],
            **kw,
        )


def adam_amsgrad_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimState) -> None:
    """One bias-corrected AMSGrad update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and optimizer state differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"parameter {p.shape} / gradient {g.shape} / state {m.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    step = state.learning_rate / bc1
    if len(state.scratch) != len(params):
        state.scratch = [np.empty_like(p) for p in params]
    # in place throughout: these arrays hold every parameter of a network
    for p, g, m, v, v_max, tmp in zip(params, grads, state.m, state.v, state.v_max, state.scratch):
        m *= b1
        np.multiply(g, 1.0 - b1, out=tmp)
        m += tmp
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v += tmp
        np.maximum(v_max, v, out=v_max)
        np.multiply(v_max, 1.0 / bc2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step
        p -= tmp
