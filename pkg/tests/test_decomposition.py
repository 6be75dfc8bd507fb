import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from auxgrad.decomposition import (
    PRESET_GRID,
    PRESETS,
    BasisStrategy,
    ControlParams,
    attittud_surrogate,
    build_basis,
    decompose,
    descent_check,
    diagnostic_record,
    pcgrad_reference,
    reweight,
    surrogate_with_basis,
)
from auxgrad.errors import DegeneratePrimaryGradient, DimensionMismatch, ZeroPrimary
from auxgrad.linalg import SubspaceBasis, gram_schmidt, randomized_lowrank_approx

E12 = SubspaceBasis(np.eye(3)[:2], 3, 2)


def random_instance(seed, d=30, m=8, k=4):
    rng = np.random.default_rng(seed)
    jac = rng.standard_normal((m, d))
    return jac, jac.mean(axis=0), rng.standard_normal(d), randomized_lowrank_approx(jac, k, seed)


def test_control_params():
    assert set(PRESET_GRID) <= set(PRESETS.values())
    cp = ControlParams.from_aux("flip_conflict", 0.1)
    assert cp.aux == (1.0, 1.0, -1.0) and cp.eta_prim == 0.1
    with pytest.raises(ValueError):
        ControlParams(1, 1, np.inf)
    with pytest.raises(ValueError):
        ControlParams(1, 1, 1, -0.5)


def test_running_example():
    d = decompose([2.0, -3.0, 5.0], [1.0, 1.0, 0.0], E12)
    np.testing.assert_array_equal(d.g_plus, [2, 0, 0])
    np.testing.assert_array_equal(d.g_minus, [0, -3, 0])
    np.testing.assert_array_equal(d.g_perp, [0, 0, 5])
    np.testing.assert_array_equal(reweight(d, (1, 1, -1)), [2, 3, 5])
    np.testing.assert_array_equal(reweight(d, (0, 0, 0)), [0, 0, 0])


def test_decompose_special_cases():
    d = decompose([0.0, 0.0, 4.0], [1.0, 2.0, 0.0], E12)
    assert not np.any(d.g_plus) and not np.any(d.g_minus)
    np.testing.assert_array_equal(d.g_perp, [0, 0, 4])
    g = np.array([1.0, -2.0, 0.0])
    d = decompose(g, g, E12)
    np.testing.assert_array_equal(d.g_plus, g)
    assert not np.any(d.g_minus) and not np.any(d.g_perp)


def test_zero_product_counts_as_agreement():
    d = decompose([1.0, 1.0, 0.0], [0.0, 1.0, 0.0], E12)
    np.testing.assert_array_equal(d.g_plus, [1, 1, 0])


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        decompose(np.ones(3), np.ones(4), E12)
    with pytest.raises(DimensionMismatch):
        decompose(np.ones(4), np.ones(4), E12)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40), st.integers(1, 10), st.integers(1, 8))
def test_invariants(seed, d, m, k):
    rng = np.random.default_rng(seed)
    jac = rng.standard_normal((m, d))
    g_prim, g_aux = jac.mean(axis=0), rng.standard_normal(d)
    basis = randomized_lowrank_approx(jac, k, seed)
    p = decompose(g_aux, g_prim, basis)
    na = np.linalg.norm(g_aux)
    assert np.max(np.abs(p.g_plus + p.g_minus + p.g_perp - g_aux)) <= 1e-10 * na
    assert np.max(np.abs(basis.vectors @ p.g_perp)) <= 1e-8 * na
    in_span = p.g_plus + p.g_minus
    assert np.linalg.norm(in_span - basis.vectors.T @ (basis.vectors @ in_span)) <= 1e-10 * na
    npr = np.linalg.norm(g_prim)
    assert p.g_plus @ g_prim >= -1e-8 * np.linalg.norm(p.g_plus) * npr
    assert p.g_minus @ g_prim <= 1e-8 * np.linalg.norm(p.g_minus) * npr
    assert abs(p.g_plus @ p.g_minus) <= 1e-10 * na**2
    assert abs(p.g_perp @ p.g_plus) <= 1e-8 * na**2 and abs(p.g_perp @ p.g_minus) <= 1e-8 * na**2
    assert np.linalg.norm(reweight(p, (1, 1, 1)) - g_aux) <= 1e-10 * na


@pytest.mark.parametrize("c", [3.0, -2.0])
def test_scale_equivariance(c):
    jac, g_prim, g_aux, basis = random_instance(5)
    a, b = decompose(g_aux, g_prim, basis), decompose(c * g_aux, g_prim, basis)
    if c > 0:
        np.testing.assert_allclose(b.g_plus, c * a.g_plus, atol=1e-12)
        np.testing.assert_allclose(b.g_minus, c * a.g_minus, atol=1e-12)
    else:
        # supports swap, except that exact zero products stay in the plus part
        np.testing.assert_allclose(b.g_plus, c * a.g_minus, atol=1e-12)
        np.testing.assert_allclose(b.g_minus, c * a.g_plus, atol=1e-12)
    np.testing.assert_allclose(b.g_perp, c * a.g_perp, atol=1e-12)


def test_build_basis_examples():
    b = build_basis(BasisStrategy("unit_avg_grad"), g_prim=[3.0, 4.0])
    np.testing.assert_allclose(b.vectors, [[0.6, 0.8]])
    g = np.array([1.0, 2.0, -2.0])
    b = build_basis(BasisStrategy("randomized_svd", 3, 0), np.tile(g, (4, 1)))
    assert b.k_effective == 1 and abs(abs(b.vectors[0] @ g) - 3.0) <= 1e-12
    r1 = build_basis(BasisStrategy("random", 4, 9), g_prim=np.ones(20))
    r2 = build_basis(BasisStrategy("random", 4, 9), g_prim=np.ones(20))
    assert np.array_equal(r1.vectors, r2.vectors) and r1.k_effective == 4
    assert build_basis(BasisStrategy("canonical"), g_prim=np.ones(7)).k_effective == 7
    with pytest.raises(DegeneratePrimaryGradient):
        build_basis(BasisStrategy("unit_avg_grad"), g_prim=np.zeros(3))
    with pytest.raises(ValueError):
        BasisStrategy("svd")


def test_canonical_matches_materialized_identity():
    rng = np.random.default_rng(6)
    g_prim, g_aux = rng.standard_normal(12), rng.standard_normal(12)
    a = decompose(g_aux, g_prim, SubspaceBasis.canonical(12))
    b = decompose(g_aux, g_prim, SubspaceBasis(np.eye(12), 12, 12))
    for x, y in ((a.g_plus, b.g_plus), (a.g_minus, b.g_minus), (a.g_perp, b.g_perp)):
        np.testing.assert_allclose(x, y, atol=1e-15)


def test_surrogate_masks_and_degenerate():
    jac, g_prim, g_aux, _ = random_instance(7)
    full = attittud_surrogate(g_aux, jac, (1, 1, 1), BasisStrategy("randomized_svd", 4, 0))
    np.testing.assert_allclose(full.vector, g_aux, atol=1e-12)
    empty = attittud_surrogate(g_aux, jac, (0, 0, 0), BasisStrategy(), mask=np.zeros(30, bool))
    np.testing.assert_array_equal(empty.vector, g_aux)
    mask = np.zeros(30, bool)
    mask[:12] = True
    part = attittud_surrogate(g_aux, jac, (1, 0, -1), BasisStrategy("randomized_svd", 3, 0), mask=mask)
    np.testing.assert_array_equal(part.vector[~mask], g_aux[~mask])
    degen = attittud_surrogate(g_aux, np.zeros((4, 30)), (0, 0, 0), BasisStrategy("unit_avg_grad"))
    assert degen.degenerate and np.array_equal(degen.vector, g_aux)


def test_surrogate_is_the_manual_pipeline():
    jac, g_prim, g_aux, _ = random_instance(8)
    strat = BasisStrategy("randomized_svd", 4, 3)
    eta = (0.5, 2.0, -1.5)
    manual = reweight(decompose(g_aux, g_prim, build_basis(strat, jac, g_prim)), eta)
    np.testing.assert_array_equal(attittud_surrogate(g_aux, jac, eta, strat).vector, manual)


def test_pcgrad_examples():
    np.testing.assert_allclose(pcgrad_reference([-1.0, 1.0], [1.0, 0.0]), [0, 1])
    np.testing.assert_array_equal(pcgrad_reference([1.0, 1.0], [1.0, 0.0]), [1, 1])
    assert np.linalg.norm(pcgrad_reference([-2.0, 3.0], [2.0, -3.0])) <= 1e-15
    with pytest.raises(ZeroPrimary):
        pcgrad_reference([1.0], [0.0])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 50))
def test_pcgrad_equivalence(seed, d):
    rng = np.random.default_rng(seed)
    g_prim, g_aux = rng.standard_normal(d), rng.standard_normal(d)
    basis = build_basis(BasisStrategy("unit_avg_grad"), g_prim=g_prim)
    ours = surrogate_with_basis(g_aux, g_prim, basis, (1, 1, 0)).vector
    ref = pcgrad_reference(g_aux, g_prim)
    assert np.linalg.norm(ours - ref) <= 1e-8 * max(np.linalg.norm(ref), 1e-300)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.0, 0.5, 1.0, 3.0]), st.sampled_from([0.0, 0.5, 1.0, 3.0]))
def test_first_order_non_harm(seed, perp, plus):
    rng = np.random.default_rng(seed)
    jac = rng.standard_normal((3, 15))
    g_prim, g_aux = jac.mean(axis=0), rng.standard_normal(15)
    s = attittud_surrogate(g_aux, jac, (perp, plus, 0.0), BasisStrategy("randomized_svd", 5, seed)).vector
    r = descent_check(g_prim, g_aux, s)
    scale = np.linalg.norm(s) * max(np.linalg.norm(g_prim), np.linalg.norm(g_aux))
    assert r.dot_prim >= -1e-8 * scale and r.dot_aux >= -1e-8 * scale
    flip = attittud_surrogate(g_aux, jac, (1, 0, -1), BasisStrategy("randomized_svd", 5, seed)).vector
    assert descent_check(g_prim, g_aux, flip).dot_prim >= -1e-8 * np.linalg.norm(flip) * np.linalg.norm(g_prim)


def test_descent_check_zero():
    r = descent_check(np.ones(3), np.ones(3), np.zeros(3))
    assert r.dot_prim == 0.0 and r.dot_aux == 0.0


def test_diagnostic_record_fields():
    jac, g_prim, g_aux, _ = random_instance(9)
    res = attittud_surrogate(g_aux, jac, (1, 1, -1), BasisStrategy("randomized_svd", 4, 0))
    rec = diagnostic_record(12, res, g_prim, g_aux)
    assert set(rec) == {"step", "k_effective", "norm_fraction_prim", "norm_fraction_aux", "norm_g_plus",
                        "norm_g_minus", "norm_g_perp", "dot_prim", "dot_aux", "degenerate_flag"}
    assert rec["k_effective"] == 4 and rec["degenerate_flag"] is False
    assert 0 <= rec["norm_fraction_aux"] <= 1 and rec["norm_fraction_prim"] > rec["norm_fraction_aux"]
