import numpy as np
import pytest

from auxgrad.errors import DimensionMismatch, JacobianTooLarge
from auxgrad.model import (
    Batch,
    MlpModel,
    batch_gradient,
    layer_mask,
    load_checkpoint,
    loss,
    per_example_jacobian,
    save_checkpoint,
    trunk_mask,
    weighted_batch_gradient,
)


@pytest.fixture(params=["tanh", "relu"])
def setup(request):
    rng = np.random.default_rng(0)
    model = MlpModel.create(5, (7, 4), 3, 2, request.param, seed=1)
    batch = Batch(rng.standard_normal((6, 5)), rng.integers(0, 3, 6), "primary")
    return model, batch, rng


def test_layout_partitions_parameters():
    m = MlpModel.create(4, (3,), 2, 5)
    offsets = sorted((s.offset, s.size) for s in m.layout)
    pos = 0
    for off, size in offsets:
        assert off == pos
        pos += size
    assert pos == m.dim
    assert m.tensor("head.auxiliary.W").shape == (3, 5)
    assert m.tensor("head.primary.b").shape == (2,)


def test_glorot_init_bounds():
    m = MlpModel.create(10, (20,), 2, 2, seed=3)
    w = m.tensor("trunk.0.W")
    assert np.max(np.abs(w)) <= np.sqrt(6 / 30)
    assert not np.any(m.tensor("trunk.0.b"))
    assert np.array_equal(w, MlpModel.create(10, (20,), 2, 2, seed=3).tensor("trunk.0.W"))


def test_uniform_logits_give_log_c():
    m = MlpModel.create(3, (4,), 5, 2)
    m.params[:] = 0.0
    b = Batch(np.ones((2, 3)), [0, 4])
    assert loss(m, b) == pytest.approx(np.log(5), abs=1e-15)


def test_loss_vanishes_as_logits_grow():
    m = MlpModel.create(2, (2,), 2, 2)
    m.params[:] = 0.0
    m.tensor("trunk.0.W")[:] = np.eye(2)
    b = Batch([[1.0, 0.0]], [0])
    prev = np.inf
    for scale in (1, 4, 16, 64):
        m.tensor("head.primary.W")[:] = scale * np.eye(2)
        cur = loss(m, b)
        assert cur < prev
        prev = cur
    assert prev < 1e-20


def test_duplicated_batch(setup):
    model, batch, _ = setup
    twice = Batch(np.repeat(batch.inputs, 2, axis=0), np.repeat(batch.labels, 2))
    assert loss(model, twice) == pytest.approx(loss(model, batch), rel=1e-14)
    one = batch.take(slice(0, 1))
    copies = Batch(np.repeat(one.inputs, 4, axis=0), np.repeat(one.labels, 4))
    np.testing.assert_allclose(batch_gradient(model, copies), batch_gradient(model, one), atol=1e-12)


def test_jacobian_rows(setup):
    model, batch, rng = setup
    jac = per_example_jacobian(model, batch)
    assert jac.shape == (len(batch), model.dim)
    assert np.max(np.abs(jac.mean(axis=0) - batch_gradient(model, batch))) <= 1e-10
    one = batch.take(slice(2, 3))
    np.testing.assert_allclose(per_example_jacobian(model, one)[0], batch_gradient(model, one), atol=1e-15)
    perm = rng.permutation(len(batch))
    np.testing.assert_allclose(per_example_jacobian(model, batch.take(perm)), jac[perm], atol=1e-15)
    with pytest.raises(JacobianTooLarge):
        per_example_jacobian(model, batch, cap=3)


def test_weighted_gradient(setup):
    model, batch, rng = setup
    m = len(batch)
    jac = per_example_jacobian(model, batch)
    np.testing.assert_allclose(weighted_batch_gradient(model, batch, np.full(m, 1 / m)),
                               batch_gradient(model, batch), atol=1e-15)
    e = np.zeros(m)
    e[3] = 1.0
    np.testing.assert_allclose(weighted_batch_gradient(model, batch, e), jac[3], atol=1e-15)
    pi = rng.standard_normal((4, m))
    sk = weighted_batch_gradient(model, batch, pi)
    assert np.linalg.norm(sk - pi @ jac) <= 1e-8 * np.linalg.norm(pi @ jac)
    w1, w2 = rng.standard_normal(m), rng.standard_normal(m)
    lhs = weighted_batch_gradient(model, batch, 2 * w1 - 3 * w2)
    rhs = 2 * weighted_batch_gradient(model, batch, w1) - 3 * weighted_batch_gradient(model, batch, w2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10
    with pytest.raises(DimensionMismatch):
        weighted_batch_gradient(model, batch, np.ones(m + 1))


def test_gradients_are_bit_deterministic(setup):
    model, batch, _ = setup
    assert np.array_equal(batch_gradient(model, batch), batch_gradient(model, batch))


def test_finite_differences(setup):
    model, batch, rng = setup
    g = batch_gradient(model, batch)
    base = model.params.copy()
    for c in rng.choice(model.dim, 50, replace=False):
        e = np.zeros_like(base)
        e[c] = 1e-5
        model.params[:] = base + e
        up = loss(model, batch)
        model.params[:] = base - e
        down = loss(model, batch)
        fd = (up - down) / 2e-5
        assert abs(fd - g[c]) <= 1e-4 * max(abs(fd), abs(g[c]), 1e-6)
    model.params[:] = base


def test_local_minimum_gradient_vanishes():
    # cross-entropy on one example has no finite minimizer; one input seen
    # with both labels does, at equal logits
    m = MlpModel.create(2, (3,), 2, 2)
    m.params[:] = 0.0
    b = Batch([[0.5, -1.0], [0.5, -1.0]], [0, 1])
    assert np.linalg.norm(batch_gradient(m, b)) <= 1e-8


def test_trunk_appears_in_both_supports():
    rng = np.random.default_rng(4)
    m = MlpModel.create(3, (4,), 2, 3, seed=0)
    gp = batch_gradient(m, Batch(rng.standard_normal((5, 3)), rng.integers(0, 2, 5), "primary"))
    ga = batch_gradient(m, Batch(rng.standard_normal((5, 3)), rng.integers(0, 3, 5), "auxiliary"))
    trunk = trunk_mask(m)
    assert np.any(gp[trunk]) and np.any(ga[trunk])
    assert not np.any(gp[layer_mask(m, ["head.auxiliary"])])
    assert not np.any(ga[layer_mask(m, ["head.primary"])])


def test_batch_validation():
    m = MlpModel.create(3, (4,), 2, 3)
    with pytest.raises(ValueError):
        loss(m, Batch(np.zeros((1, 3)), [2], "primary"))
    with pytest.raises(DimensionMismatch):
        loss(m, Batch(np.zeros((1, 4)), [0]))
    with pytest.raises(KeyError):
        layer_mask(m, ["trunk.7"])


def test_dropout_is_seeded():
    rng = np.random.default_rng(5)
    m = MlpModel.create(3, (8,), 2, 2, dropout=0.5, seed=0)
    b = Batch(rng.standard_normal((4, 3)), [0, 1, 0, 1])
    a1 = batch_gradient(m, b, np.random.default_rng(9))
    a2 = batch_gradient(m, b, np.random.default_rng(9))
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, batch_gradient(m, b))


def test_checkpoint_round_trip(tmp_path):
    m = MlpModel.create(4, (5, 3), 2, 6, "relu", seed=11)
    path = tmp_path / "ckpt.json"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert np.array_equal(back.params, m.params)
    assert back.layout == m.layout and back.activation == "relu"
