"""Dense layer kernels with hand-written backward passes, masked AdamW and
the cosine-with-warmup learning-rate schedule.

Everything is float64. Forward functions return ``(output, cache)``; the cache
is handed to the matching ``*_backward`` exactly once.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (DegenerateEmbeddingError, DimensionError, NumericError,
                     ScheduleExhaustedError)

LN_EPS = 1e-5
NORM_DELTA = 1e-12


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"{name}: non-finite input")


def as_tensor2(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-d tensor, got shape {x.shape}")
    return x


def affine(x, W, b):
    """y = x @ W.T + b for x (B, n), W (m, n), b (m,)."""
    x = as_tensor2(x)
    if W.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise DimensionError(
            f"affine: x {x.shape}, W {W.shape}, b {b.shape} do not conform")
    _check_finite("affine", x, W, b)
    return x @ W.T + b, (x, W)


def affine_backward(cache, dy):
    x, W = cache
    if dy.shape != (x.shape[0], W.shape[0]):
        raise DimensionError(f"affine_backward: dy {dy.shape} does not match output")
    return dy @ W, dy.T @ x, dy.sum(axis=0)


def affine_backward_abs(cache, dy):
    """Backward that also returns per-example absolute parameter gradients
    summed over the batch: sum_b |dy_b x_b^T| = |dy|^T |x| and sum_b |dy_b|.

    Only valid when the loss is a sum of independent per-row terms.
    """
    x, W = cache
    return dy @ W, np.abs(dy).T @ np.abs(x), np.abs(dy).sum(axis=0)


def gelu(x):
    x = as_tensor2(x)
    _check_finite("gelu", x)
    x = np.ascontiguousarray(x)
    return kernels.gelu_forward(x), x


def gelu_backward(cache, dy):
    return kernels.gelu_backward(cache, np.ascontiguousarray(dy))


def layer_norm(x, gamma, beta, eps=LN_EPS):
    x = as_tensor2(x)
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs {x.shape[1]} cols")
    if eps <= 0:
        raise DimensionError("layer_norm: eps must be positive")
    _check_finite("layer_norm", x, gamma, beta)
    y, xhat, rstd = kernels.layer_norm_forward(x, gamma, beta, eps)
    return y, (xhat, rstd, gamma)


def layer_norm_backward(cache, dy):
    xhat, rstd, gamma = cache
    return kernels.layer_norm_backward(dy, xhat, rstd, gamma)


def l2_normalize(v, delta=NORM_DELTA):
    """Row-wise unit normalization. A 1-d input is treated as a single row."""
    v = as_tensor2(v)
    _check_finite("l2_normalize", v)
    norms = np.sqrt((v * v).sum(axis=1))
    if np.any(norms <= delta):
        raise DegenerateEmbeddingError(
            f"l2_normalize: vector norm {norms.min():.3g} <= {delta:g}")
    u = v / norms[:, None]
    return u, (u, norms)


def l2_normalize_backward(cache, du):
    # (I - u u^T) du / |v| per row
    u, norms = cache
    proj = (u * du).sum(axis=1, keepdims=True)
    return (du - u * proj) / norms[:, None]


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros_like(cls, theta, **hyper):
        return cls(np.zeros_like(theta, dtype=np.float64),
                   np.zeros_like(theta, dtype=np.float64), **hyper)


def mask_indices(mask):
    """Sorted int64 indices of a boolean mask (or pass-through for index arrays)."""
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return np.flatnonzero(mask)
    return np.asarray(mask, dtype=np.int64)


def adamw_masked_step(theta, grad, mask, state, lr):
    """One AdamW step restricted to ``mask`` (bool array or index array), in place.

    Entries outside the mask -- parameter, first and second moment -- are not
    touched at all, weight decay included. ``step_count`` is global.
    """
    if theta.shape != grad.shape or state.m.shape != theta.shape or state.v.shape != theta.shape:
        raise DimensionError("adamw_masked_step: theta/grad/state shapes differ")
    mask = np.asarray(mask)
    if mask.dtype == bool and mask.shape != theta.shape:
        raise DimensionError("adamw_masked_step: mask shape differs from theta")
    if lr < 0:
        raise ValueError("adamw_masked_step: lr must be >= 0")
    state.step_count += 1
    t = state.step_count
    idx = mask_indices(mask.ravel() if mask.dtype == bool else mask)
    if idx.size == 0:
        return theta, state
    kernels.adamw_update(theta.reshape(-1), grad.reshape(-1), state.m.reshape(-1),
                         state.v.reshape(-1), idx, float(lr), state.beta1, state.beta2,
                         state.eps, state.weight_decay,
                         1.0 - state.beta1 ** t, 1.0 - state.beta2 ** t)
    return theta, state


@dataclass
class LrSchedule:
    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("LrSchedule: need 0 <= warmup_steps <= total_steps")

    @classmethod
    def with_warmup_fraction(cls, base_lr, total_steps, fraction=0.1, min_lr=0.0):
        return cls(base_lr, total_steps, int(round(fraction * total_steps)), min_lr)

    def __call__(self, step):
        return cosine_warmup_lr(step, self)


def cosine_warmup_lr(step, sched):
    if step < 0:
        raise ValueError("cosine_warmup_lr: negative step")
    if step > sched.total_steps:
        raise ScheduleExhaustedError(
            f"step {step} beyond schedule of {sched.total_steps} steps")
    if step < sched.warmup_steps:
        return sched.base_lr * step / sched.warmup_steps
    span = sched.total_steps - sched.warmup_steps
    if span == 0:
        return sched.base_lr
    progress = (step - sched.warmup_steps) / span
    return sched.min_lr + 0.5 * (sched.base_lr - sched.min_lr) * (1.0 + math.cos(math.pi * progress))


def finite_difference_gradient(loss_fn, theta, eps=1e-5, indices=None):
    """Central differences of ``loss_fn`` w.r.t. ``theta``.

    ``theta`` is perturbed in place and restored. With ``indices`` only those
    flat coordinates are probed; the rest of the result stays 0.
    """
    flat = theta.reshape(-1)
    out = np.zeros_like(flat, dtype=np.float64)
    probe = range(flat.size) if indices is None else np.asarray(indices).ravel()
    for i in probe:
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn(theta)
        flat[i] = orig - eps
        down = loss_fn(theta)
        flat[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericError(f"finite_difference_gradient: non-finite loss at index {i}")
        out[i] = (up - down) / (2.0 * eps)
    return out.reshape(theta.shape)


def max_relative_error(analytic, numeric, floor=1e-12):
    """max|a - n| scaled by the largest magnitude present in either array."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)
