"""Self-verification oracles: finite-difference gradients, top-k selection,
reservoir uniformity and the importance recurrence.

Each oracle returns an :class:`OracleResult`; ``run_all`` runs the whole set
for one seed. Backward passes are looked up through the ``autodiff`` module at
call time, so a patched kernel is seen by every check.
"""

import time
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import autodiff as ad
from .mas import MasState, penalty_and_grad, update_importance
from .model import BlockSpec, build_model, contrastive_loss, loss_and_grad, batch_loss
from .replay import ReplayBuffer
from .selection import ImportanceMap, SelectionMask, build_mask

GRAD_TOL = 1e-4
FD_EPS = 1e-5


@dataclass
class OracleResult:
    name: str
    value: float
    tol: float
    passed: bool
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name:<28s} value={self.value:.3e} tol={self.tol:.1e}{extra}"


def _grad_result(name, errs):
    worst = max(errs)
    return OracleResult(name, worst, GRAD_TOL, bool(worst < GRAD_TOL))


def _fd(fn, x):
    return ad.finite_difference_gradient(lambda _: fn(), x, eps=FD_EPS)


# ------------------------------------------------------------------ layers

def check_affine(rng):
    x, W, b = rng.standard_normal((5, 4)), rng.standard_normal((3, 4)), rng.standard_normal(3)
    R = rng.standard_normal((5, 3))
    f = lambda: float((R * ad.affine(x, W, b)[0]).sum())
    dx, dW, db = ad.affine_backward(ad.affine(x, W, b)[1], R)
    return _grad_result("affine", [ad.max_relative_error(dx, _fd(f, x)),
                                   ad.max_relative_error(dW, _fd(f, W)),
                                   ad.max_relative_error(db, _fd(f, b))])


def check_gelu(rng):
    x = rng.standard_normal((6, 5)) * 2.0
    R = rng.standard_normal((6, 5))
    f = lambda: float((R * ad.gelu(x)[0]).sum())
    dx = ad.gelu_backward(ad.gelu(x)[1], R)
    return _grad_result("gelu", [ad.max_relative_error(dx, _fd(f, x))])


def check_layer_norm(rng):
    x = rng.standard_normal((5, 6)) * 1.5 + 0.3
    gamma, beta = 1.0 + 0.3 * rng.standard_normal(6), 0.2 * rng.standard_normal(6)
    R = rng.standard_normal((5, 6))
    f = lambda: float((R * ad.layer_norm(x, gamma, beta)[0]).sum())
    dx, dg, db = ad.layer_norm_backward(ad.layer_norm(x, gamma, beta)[1], R)
    return _grad_result("layer_norm", [ad.max_relative_error(dx, _fd(f, x)),
                                       ad.max_relative_error(dg, _fd(f, gamma)),
                                       ad.max_relative_error(db, _fd(f, beta))])


def check_l2_normalize(rng):
    v = rng.standard_normal((4, 5))
    R = rng.standard_normal((4, 5))
    f = lambda: float((R * ad.l2_normalize(v)[0]).sum())
    dv = ad.l2_normalize_backward(ad.l2_normalize(v)[1], R)
    return _grad_result("l2_normalize", [ad.max_relative_error(dv, _fd(f, v))])


def check_contrastive(rng):
    img = ad.l2_normalize(rng.standard_normal((7, 4)))[0]
    labels = rng.integers(0, 3, 7)
    C = np.unique(labels).size
    cls = ad.l2_normalize(rng.standard_normal((C, 4)))[0]
    tau = 0.3
    f = lambda: contrastive_loss(img, cls, labels, tau)[0]
    _, di, dc = contrastive_loss(img, cls, labels, tau)
    return _grad_result("contrastive_loss", [ad.max_relative_error(di, _fd(f, img)),
                                             ad.max_relative_error(dc, _fd(f, cls))])


def check_model(rng, seed):
    """Every trainable coordinate of a small composed dual-tower model."""
    spec = BlockSpec(width=6, expansion=2, block_count=2)
    model = build_model(spec, 5, 6, seed=[int(seed), 99], temperature=0.5)
    x = rng.standard_normal((8, 5))
    labels = rng.integers(0, 6, 8)
    _, grad = loss_and_grad(model, x, labels)
    idx = model.registry.trainable_indices()
    num = ad.finite_difference_gradient(lambda th: batch_loss(model, x, labels), model.theta,
                                        eps=FD_EPS, indices=idx)
    errs = [ad.max_relative_error(grad[e.slice], num[e.slice])
            for e in model.registry if e.trainable]
    return _grad_result("dual_tower_loss", errs)


def check_penalty(rng):
    n = 40
    theta = rng.standard_normal(n)
    mas = MasState(rng.uniform(0, 1, n), theta + 0.1 * rng.standard_normal(n), 0.5, 0.07)
    mask = SelectionMask(np.sort(rng.choice(n, 15, replace=False)), n, 0.375, "weight")
    _, grad = penalty_and_grad(theta, mas, mask)
    num = ad.finite_difference_gradient(lambda th: penalty_and_grad(th, mas, mask)[0], theta,
                                        eps=FD_EPS)
    return _grad_result("mas_penalty", [ad.max_relative_error(grad, num)])


# ------------------------------------------------------------------ selection / replay / MAS

def topk_reference(eligible, values, k):
    """Sort then take: descending score, ascending flat index among equals."""
    pairs = sorted(zip(values.tolist(), eligible.tolist()), key=lambda p: (-p[0], p[1]))
    return np.sort(np.array([i for _, i in pairs[:k]], dtype=np.int64))


def check_topk(rng, trials=1000):
    bad = 0
    for t in range(trials):
        total = int(rng.integers(1, 60))
        m = int(rng.integers(1, total + 1))
        eligible = np.sort(rng.choice(total, m, replace=False)).astype(np.int64)
        kind = t % 4
        if kind == 0:
            values = np.full(m, 0.5)  # all ties
        elif kind == 1:
            values = rng.integers(0, 3, m).astype(np.float64)  # heavy ties
        else:
            values = rng.random(m)
        rate = float(rng.choice([0.0, 0.01, 0.1, 0.5, 1.0, rng.random()]))
        mask = build_mask(ImportanceMap(eligible, values), rate, "weight", total=total)
        ref = topk_reference(eligible, values, len(mask))
        if len(mask) != int(np.floor(rate * m + 0.5)) or not np.array_equal(mask.indices, ref):
            bad += 1
    return OracleResult("topk_selection", float(bad), 0.5, bad == 0, f"{trials} score maps")


def check_reservoir(rng, capacity=10, stream=100, trials=20000):
    counts = np.zeros(stream)
    items = np.arange(stream, dtype=np.float64)[:, None]
    labels = np.arange(stream)
    for _ in range(trials):
        buf = ReplayBuffer(capacity, 1).extend(items, labels, 0, rng)
        counts[buf.labels] += 1
    p = float(stats.chisquare(counts).pvalue)
    return OracleResult("reservoir_uniformity", p, 0.01, p > 0.01,
                        f"chi-square p, {trials} trials, lower bound")


def check_mas_recurrence(rng, updates=5, alpha=0.5, n=50):
    raws = [rng.uniform(0, 3, n) * (rng.random(n) < 0.7) for _ in range(updates)]
    omega = np.zeros(n)
    for r in raws:
        omega = update_importance(omega, r, alpha)
    closed = sum(alpha * (1 - alpha) ** (updates - 1 - t) * (r / r.max())
                 for t, r in enumerate(raws))
    err = float(np.max(np.abs(omega - closed)))
    theta = rng.standard_normal(n)
    fresh = MasState.fresh(theta, alpha, 0.1)
    moved = theta + rng.standard_normal(n)
    pen, pgrad = penalty_and_grad(moved, fresh, SelectionMask(np.arange(n), n, 1.0, "weight"))
    ok = err <= 1e-12 and pen == 0.0 and not np.any(pgrad)
    return OracleResult("mas_recurrence", err, 1e-12, ok, f"zero-omega penalty={pen}")


# ------------------------------------------------------------------ drivers

GRADIENT_CHECKS = ("affine", "gelu", "layer_norm", "l2_normalize", "contrastive_loss",
                   "dual_tower_loss", "mas_penalty")


def gradient_checks(seed):
    rng = np.random.default_rng([int(seed), 7])
    return [check_affine(rng), check_gelu(rng), check_layer_norm(rng), check_l2_normalize(rng),
            check_contrastive(rng), check_model(rng, seed), check_penalty(rng)]


def run_all(seed=0, reservoir_trials=20000, topk_trials=1000):
    rng = np.random.default_rng([int(seed), 8])
    t0 = time.perf_counter()
    results = gradient_checks(seed)
    results.append(check_topk(rng, topk_trials))
    results.append(check_reservoir(rng, trials=reservoir_trials))
    results.append(check_mas_recurrence(rng))
    return results, time.perf_counter() - t0
