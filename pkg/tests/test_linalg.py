import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from auxgrad.errors import AllRowsDegenerate, DimensionMismatch, NonFiniteInput, ZeroVector
from auxgrad.linalg import (
    SubspaceBasis,
    captured_fraction,
    exact_topk_basis,
    gram_schmidt,
    norm_fraction,
    orthonormality_error,
    project_onto,
    randomized_lowrank_approx,
    sketch_matrix,
    span_residual,
)


def e_basis(dim, idx):
    return SubspaceBasis(np.eye(dim)[list(idx)], dim, len(idx))


def test_gram_schmidt_examples():
    np.testing.assert_allclose(gram_schmidt([[1, 0], [1, 1]]).vectors, [[1, 0], [0, 1]], atol=1e-15)
    np.testing.assert_allclose(gram_schmidt([[2, 0, 0]]).vectors, [[1, 0, 0]])
    b = gram_schmidt([[1, 1], [2, 2]])
    assert b.k_effective == 1 and b.k_requested == 2
    np.testing.assert_allclose(b.vectors, [[2**-0.5, 2**-0.5]])


def test_gram_schmidt_errors():
    with pytest.raises(AllRowsDegenerate):
        gram_schmidt(np.zeros((3, 4)))
    with pytest.raises(NonFiniteInput):
        gram_schmidt([[1.0, np.nan]])
    with pytest.raises(ValueError):
        gram_schmidt([[1.0, 0.0]], drop_tolerance=0.0)


def test_gram_schmidt_stays_orthonormal_in_high_dimension():
    rng = np.random.default_rng(0)
    # nearly collinear rows are where single-pass classical GS falls apart
    base = rng.standard_normal(10_000)
    rows = base + 1e-6 * rng.standard_normal((20, 10_000))
    b = gram_schmidt(rows)
    assert orthonormality_error(b) <= 1e-10


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 12)),
              elements=st.floats(-1e3, 1e3, allow_subnormal=False)))
def test_gram_schmidt_properties(a):
    try:
        b = gram_schmidt(a)
    except AllRowsDegenerate:
        assert np.max(np.abs(a)) < 1e-6 or not np.any(a)
        return
    assert b.k_effective <= b.k_requested == a.shape[0]
    assert orthonormality_error(b) <= 1e-10
    norms = np.linalg.norm(b.vectors, axis=1)
    assert np.all(np.abs(norms - 1) <= 1e-10)
    # containment: each basis row is reproduced from the input rows
    coef, *_ = np.linalg.lstsq(a.T, b.vectors.T, rcond=None)
    assert np.max(np.abs(a.T @ coef - b.vectors.T)) <= 1e-8


def test_sketch_is_seeded():
    a = sketch_matrix(3, 5, 7)
    assert a.shape == (3, 5)
    assert np.array_equal(a, sketch_matrix(3, 5, 7))
    assert not np.array_equal(a, sketch_matrix(3, 5, 8))


def test_randomized_rank_one():
    g = np.array([1.0, -2.0, 3.0, 0.5])
    for k in (1, 3, 6):
        b = randomized_lowrank_approx(np.tile(g, (5, 1)), k, seed=k)
        assert b.k_effective == 1
        assert abs(abs(b.vectors[0] @ g) / np.linalg.norm(g) - 1) <= 1e-12


def test_randomized_identity_rows_span_everything():
    j = np.eye(3)
    b = randomized_lowrank_approx(j, 3, seed=0)
    assert span_residual(b, j) <= 1e-10
    assert span_residual(exact_topk_basis(j, 3), b.vectors) <= 1e-10


def test_randomized_is_deterministic():
    j = np.random.default_rng(1).standard_normal((16, 40))
    a, b = randomized_lowrank_approx(j, 5, 3), randomized_lowrank_approx(j, 5, 3)
    assert np.array_equal(a.vectors, b.vectors)


def test_sketch_captures_low_rank():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        r = int(rng.integers(1, 6))
        j = rng.standard_normal((20, r)) @ rng.standard_normal((r, 60))
        b = randomized_lowrank_approx(j, 5, seed)
        coef = j @ b.vectors.T
        frac = np.sum(coef**2, axis=1) / np.sum(j**2, axis=1)
        hits += bool(np.all(frac >= 1 - 1e-6))
    assert hits >= 99


def test_exact_topk_examples():
    b = exact_topk_basis(np.diag([3.0, 2.0, 1.0]), 2)
    assert span_residual(e_basis(3, [0, 1]), b.vectors) <= 1e-12
    rng = np.random.default_rng(2)
    rank1 = np.outer(rng.standard_normal(6), rng.standard_normal(9))
    ex, rd = exact_topk_basis(rank1, 1), randomized_lowrank_approx(rank1, 1, 0)
    assert span_residual(ex, rd.vectors) <= 1e-10 and span_residual(rd, ex.vectors) <= 1e-10
    j = rng.standard_normal((8, 20))
    assert captured_fraction(exact_topk_basis(j, 8), j) == pytest.approx(1.0, abs=1e-12)
    assert span_residual(exact_topk_basis(j, 8), j) <= 1e-10


def test_exact_topk_limits():
    with pytest.raises(ValueError):
        exact_topk_basis(np.ones((2, 3)), 3)


def test_project_onto_examples():
    b = e_basis(3, [0, 1])
    coef, ins, res = project_onto(b, [2.0, -3.0, 5.0])
    np.testing.assert_array_equal(coef, [2, -3])
    np.testing.assert_array_equal(ins, [2, -3, 0])
    np.testing.assert_array_equal(res, [0, 0, 5])
    for out in project_onto(b, np.zeros(3)):
        assert not np.any(out)
    with pytest.raises(DimensionMismatch):
        project_onto(b, np.zeros(4))


def test_project_onto_in_span_and_exactness():
    rng = np.random.default_rng(3)
    b = gram_schmidt(rng.standard_normal((4, 30)))
    g = rng.standard_normal(4) @ b.vectors
    _, ins, res = project_onto(b, g)
    assert np.linalg.norm(res) <= 1e-10
    h = rng.standard_normal(30)
    _, ins, res = project_onto(b, h)
    assert np.max(np.abs(ins + res - h)) <= 1e-12 * np.linalg.norm(h)
    assert np.max(np.abs(b.vectors @ res)) <= 1e-8 * np.linalg.norm(h)


def test_norm_fraction_examples():
    b = e_basis(3, [0])
    assert norm_fraction(b, [1.0, 1.0, 0.0]) == pytest.approx(0.5)
    assert norm_fraction(b, [4.0, 0.0, 0.0]) == 1.0
    assert norm_fraction(b, [0.0, 2.0, 1.0]) == 0.0
    assert norm_fraction(SubspaceBasis.canonical(3), [1.0, 2.0, 3.0]) == 1.0
    with pytest.raises(ZeroVector):
        norm_fraction(b, np.zeros(3))
