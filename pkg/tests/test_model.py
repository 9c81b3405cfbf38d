import numpy as np
import pytest

from sparsecl import autodiff as ad
from sparsecl.errors import DimensionError
from sparsecl.model import (ROLE_FC1, ROLE_FC2, ROLE_OTHER, BlockSpec, batch_loss, build_model,
                            contrastive_loss, encode_class, encode_input, loss_and_grad,
                            parameter_count, predict)

SPEC = BlockSpec(width=6, expansion=2, block_count=2)


@pytest.fixture
def model():
    return build_model(SPEC, 5, 7, seed=3, temperature=0.5)


def test_parameter_count_matches_layout(model):
    assert model.theta.size == parameter_count(SPEC, 5, 7)
    # hand count, width 32, hidden 128: proj 1056, block 8416 x 4, table 1280, tau 1
    assert parameter_count(BlockSpec(32, 4, 2), 32, 40) == 1056 + 4 * 8416 + 1280 + 1
    sizes = sum(e.size for e in model.registry)
    assert sizes == model.registry.total


def test_registry_roles(model):
    reg = model.registry
    fc1 = reg.role_indices(ROLE_FC1)
    fc2 = reg.role_indices(ROLE_FC2)
    other = reg.role_indices(ROLE_OTHER)
    assert np.intersect1d(fc1, fc2).size == 0
    assert fc1.size + fc2.size + other.size == reg.total
    # per block: fc1 = h*d + h, fc2 = d*h + d; two towers
    d, h = SPEC.width, SPEC.hidden
    assert fc1.size == 2 * SPEC.block_count * (h * d + h)
    assert fc2.size == 2 * SPEC.block_count * (d * h + d)
    assert reg["temperature"].role == ROLE_OTHER
    assert not reg["temperature"].trainable
    assert reg["temperature"].start not in set(reg.trainable_indices())


def test_views_share_memory(model):
    model["input.proj.bias"][0] = 42.0
    assert model.theta[model.registry["input.proj.bias"].start] == 42.0
    assert model.temperature == 0.5


def test_build_is_deterministic():
    a = build_model(SPEC, 5, 7, seed=11)
    b = build_model(SPEC, 5, 7, seed=11)
    assert np.array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, build_model(SPEC, 5, 7, seed=12).theta)


def test_embeddings_are_unit(model, rng):
    u, _ = encode_input(model, rng.standard_normal((4, 5)))
    np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0, rtol=1e-12)
    c, _ = encode_class(model, 3)
    assert c.shape == (1, SPEC.width)


def test_input_dim_checked(model):
    with pytest.raises(DimensionError):
        encode_input(model, np.zeros((2, 4)))


def test_full_model_gradient(model, rng):
    x = rng.standard_normal((6, 5))
    y = np.array([0, 2, 2, 5, 6, 0])
    _, grad = loss_and_grad(model, x, y)
    num = ad.finite_difference_gradient(lambda t: batch_loss(model, x, y), model.theta,
                                        indices=model.registry.trainable_indices())
    assert ad.max_relative_error(grad, num) < 1e-6
    assert grad[model.registry["temperature"].start] == 0.0


def test_grad_accumulates(model, rng):
    x = rng.standard_normal((3, 5))
    y = np.array([1, 2, 3])
    _, g1 = loss_and_grad(model, x, y)
    _, g2 = loss_and_grad(model, x, y, g1.copy())
    np.testing.assert_allclose(g2, 2 * g1)


def test_contrastive_loss_perfect_alignment_is_low():
    e = np.eye(3)
    low, _, _ = contrastive_loss(e, e, np.array([0, 1, 2]), 0.07)
    high, _, _ = contrastive_loss(e, e[[1, 2, 0]], np.array([0, 1, 2]), 0.07)
    assert low < 1e-5 < high


def test_contrastive_single_class():
    # rows: one candidate, CE 0. columns: uniform softmax over 4 images against a
    # uniform target, CE log 4. Symmetric mean: log 2, with zero gradients.
    img = np.tile([[1.0, 0.0]], (4, 1))
    loss, di, dc = contrastive_loss(img, np.array([[0.0, 1.0]]), np.zeros(4, int), 0.1)
    assert loss == pytest.approx(np.log(2.0), rel=1e-14)
    assert np.allclose(di, 0, atol=1e-15) and np.allclose(dc, 0, atol=1e-15)


def test_predict_ties_to_smallest_id(model, rng):
    table = model["class.table"]
    table[4] = table[2]
    x = rng.standard_normal((5, 5))
    assert np.all(predict(model, x, [4, 2]) == 2)
    assert np.all(predict(model, x, [2, 4]) == 2)
