import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparsecl import autodiff as ad
from sparsecl.errors import DegenerateEmbeddingError, DimensionError, NumericError, \
    ScheduleExhaustedError

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def fd_check(f, x, analytic, tol=1e-6):
    num = ad.finite_difference_gradient(lambda _: f(), x)
    assert ad.max_relative_error(analytic, num) < tol


def test_affine_values_and_grads(rng):
    x, W, b = rng.standard_normal((3, 4)), rng.standard_normal((2, 4)), rng.standard_normal(2)
    y, cache = ad.affine(x, W, b)
    np.testing.assert_allclose(y, x @ W.T + b)
    R = rng.standard_normal((3, 2))
    dx, dW, db = ad.affine_backward(cache, R)
    f = lambda: float((R * ad.affine(x, W, b)[0]).sum())
    fd_check(f, x, dx)
    fd_check(f, W, dW)
    fd_check(f, b, db)


def test_affine_shape_errors():
    with pytest.raises(DimensionError):
        ad.affine(np.ones((2, 3)), np.ones((4, 2)), np.ones(4))
    with pytest.raises(DimensionError):
        ad.affine(np.ones((2, 3)), np.ones((4, 3)), np.ones(3))


def test_affine_rejects_nan():
    with pytest.raises(NumericError):
        ad.affine(np.array([[np.nan, 1.0]]), np.ones((1, 2)), np.ones(1))


def test_affine_abs_is_sum_of_per_example_abs(rng):
    x, W, b = rng.standard_normal((5, 3)), rng.standard_normal((2, 3)), rng.standard_normal(2)
    dy = rng.standard_normal((5, 2))
    _, dW, db = ad.affine_backward_abs(ad.affine(x, W, b)[1], dy)
    ref = sum(np.abs(np.outer(dy[i], x[i])) for i in range(5))
    np.testing.assert_allclose(dW, ref, rtol=1e-13)
    np.testing.assert_allclose(db, np.abs(dy).sum(0), rtol=1e-13)


def test_gelu_known_values():
    y, _ = ad.gelu(np.array([[0.0, 1.0, -1.0]]))
    ref = [0.0, 0.5 * (1 + math.erf(1 / math.sqrt(2))), -0.5 * (1 - math.erf(1 / math.sqrt(2)))]
    np.testing.assert_allclose(y[0], ref, rtol=1e-15, atol=0)


def test_gelu_grad(rng):
    x = rng.standard_normal((4, 5)) * 3
    R = rng.standard_normal((4, 5))
    f = lambda: float((R * ad.gelu(x)[0]).sum())
    fd_check(f, x, ad.gelu_backward(ad.gelu(x)[1], R))


def test_layer_norm_output_stats(rng):
    x = rng.standard_normal((6, 10)) * 4 + 2
    y, _ = ad.layer_norm(x, np.ones(10), np.zeros(10))
    np.testing.assert_allclose(y.mean(1), 0, atol=1e-12)
    var = x.var(1)
    np.testing.assert_allclose(y.var(1), var / (var + ad.LN_EPS), rtol=1e-12)


def test_layer_norm_grads(rng):
    x = rng.standard_normal((3, 7))
    g, b = rng.standard_normal(7), rng.standard_normal(7)
    R = rng.standard_normal((3, 7))
    dx, dg, db = ad.layer_norm_backward(ad.layer_norm(x, g, b)[1], R)
    f = lambda: float((R * ad.layer_norm(x, g, b)[0]).sum())
    fd_check(f, x, dx)
    fd_check(f, g, dg)
    fd_check(f, b, db)


def test_layer_norm_shape_error():
    with pytest.raises(DimensionError):
        ad.layer_norm(np.ones((2, 3)), np.ones(4), np.zeros(4))


def test_l2_normalize_grad_and_degenerate(rng):
    v = rng.standard_normal((3, 4))
    R = rng.standard_normal((3, 4))
    f = lambda: float((R * ad.l2_normalize(v)[0]).sum())
    fd_check(f, v, ad.l2_normalize_backward(ad.l2_normalize(v)[1], R))
    with pytest.raises(DegenerateEmbeddingError):
        ad.l2_normalize(np.zeros((1, 4)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_l2_normalize_unit_rows(v):
    if np.any(np.linalg.norm(v, axis=1) <= 1e-6):
        return
    u, _ = ad.l2_normalize(v)
    np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0, rtol=1e-12)


def test_adamw_first_step_closed_form():
    theta = np.array([1.0, -2.0, 0.5])
    grad = np.array([0.3, -0.1, 2.0])
    state = ad.AdamWState.zeros_like(theta, weight_decay=0.1)
    lr = 0.01
    expected = theta * (1 - lr * 0.1) - lr * grad / (np.abs(grad) + 1e-8)
    ad.adamw_masked_step(theta, grad, np.ones(3, bool), state, lr)
    np.testing.assert_allclose(theta, expected, rtol=1e-15)
    assert state.step_count == 1


def test_adamw_mask_leaves_rest_untouched(rng):
    theta = rng.standard_normal(20)
    before = theta.copy()
    state = ad.AdamWState.zeros_like(theta, weight_decay=0.5)
    mask = np.zeros(20, bool)
    mask[[2, 7, 11]] = True
    for _ in range(5):
        ad.adamw_masked_step(theta, rng.standard_normal(20), mask, state, 0.1)
    assert np.array_equal(theta[~mask], before[~mask])
    assert not np.any(state.m[~mask]) and not np.any(state.v[~mask])
    assert state.step_count == 5


def test_adamw_bool_and_index_masks_agree(rng):
    g = rng.standard_normal((4, 10))
    a = rng.standard_normal(10)
    b = a.copy()
    sa, sb = ad.AdamWState.zeros_like(a), ad.AdamWState.zeros_like(b)
    mask = rng.random(10) < 0.5
    for row in g:
        ad.adamw_masked_step(a, row, mask, sa, 0.01)
        ad.adamw_masked_step(b, row, np.flatnonzero(mask), sb, 0.01)
    assert np.array_equal(a, b)


def test_adamw_shape_error():
    with pytest.raises(DimensionError):
        ad.adamw_masked_step(np.zeros(3), np.zeros(4), np.ones(3, bool),
                             ad.AdamWState.zeros_like(np.zeros(3)), 0.1)


def test_schedule_shape():
    s = ad.LrSchedule.with_warmup_fraction(1.0, 100, 0.1)
    assert s.warmup_steps == 10
    assert s(0) == 0.0
    assert s(5) == pytest.approx(0.5)
    assert s(10) == 1.0
    assert s(55) == pytest.approx(0.5)
    assert s(100) == pytest.approx(0.0, abs=1e-15)
    lrs = [s(k) for k in range(10, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ScheduleExhaustedError):
        s(101)


def test_schedule_min_lr_and_no_warmup():
    s = ad.LrSchedule(2.0, 10, 0, min_lr=0.5)
    assert s(0) == 2.0
    assert s(10) == pytest.approx(0.5)


def test_fd_restores_theta(rng):
    theta = rng.standard_normal(5)
    before = theta.copy()
    ad.finite_difference_gradient(lambda t: float((t ** 3).sum()), theta)
    assert np.array_equal(theta, before)


def test_max_relative_error_is_scale_free():
    a = np.array([1.0, 1e-9])
    assert ad.max_relative_error(a, a + 1e-6) == pytest.approx(1e-6)
    assert ad.max_relative_error(1000 * a, 1000 * (a + 1e-6)) == pytest.approx(1e-6)
