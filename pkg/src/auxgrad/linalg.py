"""Dense kernels: orthonormalization, Gaussian sketching and subspace projection.

Matrices are plain ``float64`` numpy arrays stored row-major.  A subspace is
always described by its orthonormal *rows* (``k x D``), matching the layout of a
Jacobian whose rows are per-example gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AllRowsDegenerate,
    ConvergenceFailure,
    DimensionMismatch,
    NonFiniteInput,
    ZeroVector,
)
from .rng import generator

DEFAULT_DROP_TOLERANCE = 1e-10


@dataclass(frozen=True)
class SubspaceBasis:
    """Row-orthonormal basis ``vectors`` (``k_effective x dim``).

    ``kind == "canonical"`` is the per-coordinate basis of R^dim; it is never
    materialized and ``vectors`` is ``None``.
    """

    vectors: np.ndarray | None
    dim: int
    k_requested: int
    drop_tolerance: float = DEFAULT_DROP_TOLERANCE
    kind: str = "explicit"
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def k_effective(self) -> int:
        if self.vectors is None:
            return self.dim
        return self.vectors.shape[0]

    @property
    def is_canonical(self) -> bool:
        return self.kind == "canonical"

    @classmethod
    def canonical(cls, dim: int) -> "SubspaceBasis":
        return cls(vectors=None, dim=int(dim), k_requested=int(dim), kind="canonical")


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteInput("matrix contains NaN or Inf")
    return m


def gram_schmidt(rows, drop_tolerance: float = DEFAULT_DROP_TOLERANCE) -> SubspaceBasis:
    """Orthonormalize the rows of ``rows`` with modified Gram-Schmidt.

    Each row is orthogonalized twice against the accepted rows ("twice is
    enough"), which keeps orthogonality at machine precision for long vectors.
    Rows are first scaled so the largest row has unit norm; a row whose
    residual norm then falls below ``drop_tolerance`` is dropped.
    """
    if drop_tolerance <= 0:
        raise ValueError("drop_tolerance must be positive")
    a = as_matrix(rows)
    if a.shape[0] < 1:
        raise DimensionMismatch("need at least one row")
    scale = np.max(np.linalg.norm(a, axis=1))
    if scale == 0.0:
        raise AllRowsDegenerate("all rows are zero")
    a = a / scale

    basis: list[np.ndarray] = []
    for row in a:
        v = row.copy()
        for _ in range(2):
            for q in basis:
                v -= np.dot(q, v) * q
        nrm = np.linalg.norm(v)
        if nrm < drop_tolerance:
            continue
        basis.append(v / nrm)
    if not basis:
        raise AllRowsDegenerate(f"all {a.shape[0]} rows fell below drop tolerance {drop_tolerance:g}")
    return SubspaceBasis(
        vectors=np.vstack(basis),
        dim=a.shape[1],
        k_requested=a.shape[0],
        drop_tolerance=drop_tolerance,
    )


def sketch_matrix(k: int, m: int, seed) -> np.ndarray:
    """Gaussian sketch with i.i.d. N(0, 1) entries, shape ``(k, m)``.

    ``seed`` may be an int (PCG64 seed) or a ``numpy.random.Generator``.
    """
    if k < 1 or m < 1:
        raise ValueError("sketch dimensions must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else generator(seed)
    return rng.standard_normal((k, m))


def randomized_lowrank_approx(
    jacobian, k: int, seed, drop_tolerance: float = DEFAULT_DROP_TOLERANCE
) -> SubspaceBasis:
    """Basis for the dominant row space of ``jacobian`` from a ``k``-row Gaussian sketch."""
    if k < 1:
        raise ValueError("k must be >= 1")
    j = as_matrix(jacobian)
    pi = sketch_matrix(k, j.shape[0], seed)
    basis = gram_schmidt(pi @ j, drop_tolerance)
    return SubspaceBasis(basis.vectors, basis.dim, k, drop_tolerance, "randomized_svd")


def exact_topk_basis(jacobian, k: int) -> SubspaceBasis:
    """Top-``k`` right singular vectors of ``jacobian`` (LAPACK SVD; verification oracle)."""
    j = as_matrix(jacobian)
    m, d = j.shape
    if not 1 <= k <= min(m, d):
        raise ValueError(f"k={k} must lie in [1, min(m, D)={min(m, d)}]")
    if m * d > 10**7:
        raise ValueError("exact_topk_basis is limited to m*D <= 1e7")
    try:
        _, _, vt = np.linalg.svd(j, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(str(exc)) from exc
    return SubspaceBasis(vt[:k].copy(), d, k, kind="exact_svd")


def project_onto(basis: SubspaceBasis, g):
    """Split ``g`` into ``(coefficients, in_span, residual)`` w.r.t. ``basis``."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1 or g.shape[0] != basis.dim:
        raise DimensionMismatch(f"vector of shape {g.shape} does not match basis dim {basis.dim}")
    if basis.is_canonical:
        return g.copy(), g.copy(), np.zeros_like(g)
    coef = basis.vectors @ g
    in_span = basis.vectors.T @ coef
    return coef, in_span, g - in_span


def norm_fraction(basis: SubspaceBasis, g) -> float:
    """Fraction of ``||g||^2`` captured by the span of ``basis``."""
    g = np.asarray(g, dtype=np.float64)
    total = float(np.dot(g, g))
    if total == 0.0:
        raise ZeroVector("norm_fraction of a zero vector is undefined")
    _, in_span, _ = project_onto(basis, g)
    return min(1.0, float(np.dot(in_span, in_span)) / total)


def captured_fraction(basis: SubspaceBasis, matrix) -> float:
    """Fraction of the squared Frobenius norm of ``matrix`` whose rows lie in the span."""
    a = as_matrix(matrix)
    total = float(np.sum(a * a))
    if total == 0.0:
        raise ZeroVector("matrix is zero")
    if basis.is_canonical:
        return 1.0
    coef = a @ basis.vectors.T
    return min(1.0, float(np.sum(coef * coef)) / total)


def span_residual(basis: SubspaceBasis, rows) -> float:
    """Largest residual norm of any row of ``rows`` after projecting onto ``basis``."""
    a = as_matrix(rows)
    if basis.is_canonical:
        return 0.0
    res = a - (a @ basis.vectors.T) @ basis.vectors
    return float(np.max(np.linalg.norm(res, axis=1)))


def orthonormality_error(basis: SubspaceBasis) -> float:
    """max_ij |v_i . v_j - delta_ij|."""
    if basis.is_canonical:
        return 0.0
    v = basis.vectors
    return float(np.max(np.abs(v @ v.T - np.eye(v.shape[0]))))
