"""Elementwise/row-wise hot loops with numba and pure-numpy implementations.

Each kernel exists as ``<name>_np`` (numpy) and, when numba imports, as
``<name>_nb`` (``@njit``). The bare ``<name>`` is whichever backend is active.
Set ``SPCL_NUMBA=0`` before import to force the numpy path; matmuls always go
through numpy/BLAS since numba cannot beat it there.
"""

import math
import os

import numpy as np
from scipy.special import erf as _erf

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SPCL_NUMBA", "1").strip().lower() not in (
    "0", "false", "no", "off")

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------- numpy path

def gelu_forward_np(x):
    return 0.5 * x * (1.0 + _erf(x * _INV_SQRT2))


def gelu_backward_np(x, dy):
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return dy * (cdf + x * pdf)


def layer_norm_forward_np(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_backward_np(dy, xhat, rstd, gamma):
    n = xhat.shape[1]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    s1 = dxhat.sum(axis=1, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=1, keepdims=True)
    dx = (rstd[:, None] / n) * (n * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def adamw_update_np(theta, grad, m, v, idx, lr, beta1, beta2, eps, weight_decay,
                    bias_c1, bias_c2):
    g = grad[idx]
    p = theta[idx]
    if weight_decay != 0.0:
        p = p * (1.0 - lr * weight_decay)
    mi = beta1 * m[idx] + (1.0 - beta1) * g
    vi = beta2 * v[idx] + (1.0 - beta2) * (g * g)
    m_hat = mi / bias_c1
    v_hat = vi / bias_c2
    theta[idx] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    m[idx] = mi
    v[idx] = vi


def masked_penalty_np(theta, anchor, omega, idx, lam):
    d = theta[idx] - anchor[idx]
    w = omega[idx]
    loss = lam * float(np.sum(w * d * d))
    return loss, 2.0 * lam * w * d


def reservoir_owner_np(draws, seen0, capacity, owner):
    # sequential on purpose: later items must overwrite earlier ones in order
    for k in range(draws.shape[0]):
        seen = seen0 + k
        if seen < capacity:
            owner[seen] = k
        elif draws[k] < capacity:
            owner[draws[k]] = k
    return owner


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def gelu_forward_nb(x):
        out = np.empty_like(x)
        flat_x = x.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.shape[0]):
            xi = flat_x[i]
            flat_o[i] = 0.5 * xi * (1.0 + math.erf(xi * _INV_SQRT2))
        return out

    @njit(cache=True)
    def gelu_backward_nb(x, dy):
        out = np.empty_like(x)
        fx = x.ravel()
        fd = dy.ravel()
        fo = out.ravel()
        for i in range(fx.shape[0]):
            xi = fx[i]
            cdf = 0.5 * (1.0 + math.erf(xi * _INV_SQRT2))
            pdf = math.exp(-0.5 * xi * xi) * _INV_SQRT2PI
            fo[i] = fd[i] * (cdf + xi * pdf)
        return out

    @njit(cache=True)
    def layer_norm_forward_nb(x, gamma, beta, eps):
        rows, n = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows)
        for r in range(rows):
            mu = 0.0
            for j in range(n):
                mu += x[r, j]
            mu /= n
            var = 0.0
            for j in range(n):
                c = x[r, j] - mu
                var += c * c
            var /= n
            rs = 1.0 / math.sqrt(var + eps)
            rstd[r] = rs
            for j in range(n):
                h = (x[r, j] - mu) * rs
                xhat[r, j] = h
                y[r, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @njit(cache=True)
    def layer_norm_backward_nb(dy, xhat, rstd, gamma):
        rows, n = xhat.shape
        dx = np.empty_like(xhat)
        dgamma = np.zeros(n)
        dbeta = np.zeros(n)
        for r in range(rows):
            s1 = 0.0
            s2 = 0.0
            for j in range(n):
                dh = dy[r, j] * gamma[j]
                s1 += dh
                s2 += dh * xhat[r, j]
                dgamma[j] += dy[r, j] * xhat[r, j]
                dbeta[j] += dy[r, j]
            scale = rstd[r] / n
            for j in range(n):
                dh = dy[r, j] * gamma[j]
                dx[r, j] = scale * (n * dh - s1 - xhat[r, j] * s2)
        return dx, dgamma, dbeta

    @njit(cache=True)
    def adamw_update_nb(theta, grad, m, v, idx, lr, beta1, beta2, eps, weight_decay,
                        bias_c1, bias_c2):
        for k in range(idx.shape[0]):
            i = idx[k]
            g = grad[i]
            p = theta[i]
            if weight_decay != 0.0:
                p = p * (1.0 - lr * weight_decay)
            mi = beta1 * m[i] + (1.0 - beta1) * g
            vi = beta2 * v[i] + (1.0 - beta2) * (g * g)
            m_hat = mi / bias_c1
            v_hat = vi / bias_c2
            theta[i] = p - lr * m_hat / (math.sqrt(v_hat) + eps)
            m[i] = mi
            v[i] = vi

    @njit(cache=True)
    def masked_penalty_nb(theta, anchor, omega, idx, lam):
        grad = np.empty(idx.shape[0])
        acc = 0.0
        for k in range(idx.shape[0]):
            i = idx[k]
            d = theta[i] - anchor[i]
            w = omega[i]
            acc += w * d * d
            grad[k] = 2.0 * lam * w * d
        return lam * acc, grad

    reservoir_owner_nb = njit(cache=True)(reservoir_owner_np)


def _pick(name):
    if USE_NUMBA:
        return globals()[name + "_nb"]
    return globals()[name + "_np"]


gelu_forward = _pick("gelu_forward")
gelu_backward = _pick("gelu_backward")
layer_norm_forward = _pick("layer_norm_forward")
layer_norm_backward = _pick("layer_norm_backward")
adamw_update = _pick("adamw_update")
masked_penalty = _pick("masked_penalty")
reservoir_owner = _pick("reservoir_owner")

KERNELS = ("gelu_forward", "gelu_backward", "layer_norm_forward",
           "layer_norm_backward", "adamw_update", "masked_penalty", "reservoir_owner")


def backend():
    return "numba" if USE_NUMBA else "numpy"
