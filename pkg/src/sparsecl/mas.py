"""Memory-aware-synapses importance and the masked quadratic drift penalty."""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ArgumentError, DimensionError
from .model import (class_tower_backward, class_tower_forward, input_tower_backward,
                    input_tower_forward)

DEFAULT_ALPHA = 0.5
DEFAULT_LAMBDA = 0.05


@dataclass
class MasState:
    """Importance ``omega`` and drift anchor, both in the flat parameter layout.

    ``omega`` is only ever nonzero on the eligible set.
    """
    omega: np.ndarray
    anchor: np.ndarray
    alpha: float = DEFAULT_ALPHA
    lam: float = DEFAULT_LAMBDA

    @classmethod
    def fresh(cls, theta, alpha=DEFAULT_ALPHA, lam=DEFAULT_LAMBDA):
        if not 0.0 <= alpha <= 1.0:
            raise ArgumentError(f"alpha {alpha} outside [0, 1]")
        if lam < 0:
            raise ArgumentError("lambda must be >= 0")
        return cls(np.zeros_like(theta), theta.copy(), alpha, lam)

    def set_anchor(self, theta):
        self.anchor = theta.copy()

    def update(self, raw):
        self.omega = update_importance(self.omega, raw, self.alpha)
        return self.omega


def compute_raw_importance(model, features, class_ids=None, eligible=None):
    """Mean |d ||f(x)||^2 / d theta| over examples, in the flat layout.

    Input-tower parameters use the pre-normalization input-tower output over
    ``features``; class-tower parameters use the pre-normalization class-tower
    output over ``class_ids``. Restricted to ``eligible`` when given.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        raise ArgumentError("compute_raw_importance: empty data")
    raw = model.zeros_like_theta()
    h, cache = input_tower_forward(model, features)
    part = model.zeros_like_theta()
    input_tower_backward(model, cache, 2.0 * h, part, absolute=True)
    raw += part / features.shape[0]
    if class_ids is not None and len(class_ids):
        class_ids = np.asarray(class_ids, dtype=np.int64)
        h, cache = class_tower_forward(model, class_ids)
        part = model.zeros_like_theta()
        class_tower_backward(model, cache, 2.0 * h, part, absolute=True)
        raw += part / class_ids.size
    if eligible is not None:
        keep = np.zeros(raw.size, dtype=bool)
        keep[eligible] = True
        raw[~keep] = 0.0
    return raw


def normalize_by_max(raw):
    peak = np.max(raw, initial=0.0)
    return raw / peak if peak > 0 else raw.copy()


def update_importance(omega_prev, raw, alpha):
    """Omega <- (1 - alpha) * Omega_prev + alpha * raw / max(raw)."""
    if not 0.0 <= alpha <= 1.0:
        raise ArgumentError(f"alpha {alpha} outside [0, 1]")
    omega_prev = np.asarray(omega_prev, dtype=np.float64)
    raw = np.asarray(raw, dtype=np.float64)
    if omega_prev.shape != raw.shape:
        raise DimensionError(f"omega {omega_prev.shape} vs raw {raw.shape}")
    if np.any(raw < 0):
        raise ArgumentError("raw importance must be nonnegative")
    return (1.0 - alpha) * omega_prev + alpha * normalize_by_max(raw)


def penalty_and_grad(theta, mas, mask):
    """lam * sum_{i in mask} omega_i (theta_i - anchor_i)^2 and its gradient."""
    if theta.shape != mas.anchor.shape or theta.shape != mas.omega.shape:
        raise DimensionError("penalty_and_grad: theta / MAS state shapes differ")
    idx = mask.indices if hasattr(mask, "indices") else np.flatnonzero(mask)
    grad = np.zeros_like(theta)
    if idx.size == 0 or mas.lam == 0.0:
        return 0.0, grad
    loss, g = kernels.masked_penalty(theta, mas.anchor, mas.omega, idx, float(mas.lam))
    grad[idx] = g
    return float(loss), grad
