"""Primary-task-aware decomposition of auxiliary gradients.

The auxiliary gradient is split against an orthonormal basis of (an estimate
of) the primary per-example gradient span:

* ``g_plus``  -- in-span coordinates whose sign agrees with the primary gradient,
* ``g_minus`` -- in-span coordinates whose sign conflicts with it,
* ``g_perp``  -- the out-of-span remainder,

and recombined as ``eta_perp * g_perp + eta_plus * g_plus + eta_minus * g_minus``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import (
    AllRowsDegenerate,
    DegeneratePrimaryGradient,
    DimensionMismatch,
    ZeroPrimary,
)
from .linalg import (
    DEFAULT_DROP_TOLERANCE,
    SubspaceBasis,
    as_matrix,
    gram_schmidt,
    norm_fraction,
    randomized_lowrank_approx,
)
from .rng import generator

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12
BASIS_KINDS = ("randomized_svd", "random", "unit_avg_grad", "canonical")


@dataclass(frozen=True)
class ControlParams:
    eta_perp: float
    eta_plus: float
    eta_minus: float
    eta_prim: float = 0.0

    def __post_init__(self):
        vals = (self.eta_perp, self.eta_plus, self.eta_minus, self.eta_prim)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("control parameters must be finite")
        if self.eta_prim < 0:
            raise ValueError("eta_prim must be >= 0")

    @property
    def aux(self) -> tuple[float, float, float]:
        return (self.eta_perp, self.eta_plus, self.eta_minus)

    @classmethod
    def from_aux(cls, aux, eta_prim: float = 0.0) -> "ControlParams":
        if isinstance(aux, str):
            aux = PRESETS[aux]
        perp, plus, minus = (float(a) for a in aux)
        return cls(perp, plus, minus, float(eta_prim))


# The four auxiliary weightings used for experiments, plus named special cases.
PRESET_GRID = ((1.0, 1.0, -1.0), (1.0, 1.0, 0.0), (1.0, 0.0, -1.0), (1.0, 0.0, 0.0))
PRESETS = {
    "flip_conflict": (1.0, 1.0, -1.0),
    "drop_conflict": (1.0, 1.0, 0.0),
    "perp_flip": (1.0, 0.0, -1.0),
    "perp_only": (1.0, 0.0, 0.0),
    "identity": (1.0, 1.0, 1.0),
    "off": (0.0, 0.0, 0.0),
    "helpful_only": (0.0, 1.0, 0.0),
}


@dataclass(frozen=True)
class BasisStrategy:
    kind: str = "randomized_svd"
    k: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in BASIS_KINDS:
            raise ValueError(f"basis kind must be one of {BASIS_KINDS}, got {self.kind!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class DecomposedGradient:
    g_plus: np.ndarray
    g_minus: np.ndarray
    g_perp: np.ndarray
    p_prim: np.ndarray
    p_aux: np.ndarray
    basis: SubspaceBasis

    @property
    def agree(self) -> np.ndarray:
        return self.p_prim * self.p_aux >= 0


@dataclass
class SurrogateResult:
    vector: np.ndarray
    parts: DecomposedGradient | None
    degenerate: bool
    basis: SubspaceBasis | None = None


@dataclass(frozen=True)
class DescentReport:
    dot_prim: float
    dot_aux: float


def _vec(g, name="vector") -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {g.shape}")
    return g


def build_basis(strategy: BasisStrategy, jacobian=None, g_prim=None, *, sketch=None,
                drop_tolerance: float = DEFAULT_DROP_TOLERANCE) -> SubspaceBasis:
    """Basis for the requested strategy.

    ``randomized_svd`` needs ``jacobian`` or a precomputed ``sketch`` (the
    ``k x D`` product of a Gaussian matrix with the Jacobian). ``unit_avg_grad``
    uses ``g_prim``, defaulting to the row mean of ``jacobian``.
    """
    kind = strategy.kind
    if g_prim is None and jacobian is not None:
        g_prim = as_matrix(jacobian).mean(axis=0)
    if g_prim is not None:
        g_prim = _vec(g_prim, "g_prim")
    dim = g_prim.shape[0] if g_prim is not None else (
        as_matrix(jacobian).shape[1] if jacobian is not None else as_matrix(sketch).shape[1])

    if kind == "canonical":
        return SubspaceBasis.canonical(dim)
    if kind == "unit_avg_grad":
        nrm = np.linalg.norm(g_prim) if g_prim is not None else 0.0
        if nrm <= DEGENERATE_NORM:
            raise DegeneratePrimaryGradient(f"||g_prim|| = {nrm:.3g}")
        return SubspaceBasis((g_prim / nrm)[None, :], dim, 1, drop_tolerance, "unit_avg_grad")
    if kind == "random":
        rng = generator(strategy.seed)
        basis = gram_schmidt(rng.standard_normal((strategy.k, dim)), drop_tolerance)
        return SubspaceBasis(basis.vectors, dim, strategy.k, drop_tolerance, "random")
    # randomized_svd
    if sketch is not None:
        basis = gram_schmidt(sketch, drop_tolerance)
        return SubspaceBasis(basis.vectors, dim, strategy.k, drop_tolerance, "randomized_svd")
    if jacobian is None:
        raise ValueError("randomized_svd needs a jacobian or a sketch")
    return randomized_lowrank_approx(jacobian, strategy.k, strategy.seed, drop_tolerance)


def decompose(g_aux, g_prim, basis: SubspaceBasis) -> DecomposedGradient:
    """Split ``g_aux`` into agreeing, conflicting and out-of-span parts.

    A basis direction counts as agreeing when ``p_prim[i] * p_aux[i] >= 0``, so
    zero products land in ``g_plus``.
    """
    g_aux = _vec(g_aux, "g_aux")
    g_prim = _vec(g_prim, "g_prim")
    if g_aux.shape != g_prim.shape or g_aux.shape[0] != basis.dim:
        raise DimensionMismatch(
            f"g_aux {g_aux.shape}, g_prim {g_prim.shape} and basis dim {basis.dim} disagree")
    if basis.is_canonical:
        agree = g_prim * g_aux >= 0
        g_plus = np.where(agree, g_aux, 0.0)
        g_minus = np.where(agree, 0.0, g_aux)
        return DecomposedGradient(g_plus, g_minus, g_aux - (g_plus + g_minus),
                                  g_prim.copy(), g_aux.copy(), basis)
    v = basis.vectors
    p_prim = v @ g_prim
    p_aux = v @ g_aux
    agree = p_prim * p_aux >= 0
    g_plus = v.T @ np.where(agree, p_aux, 0.0)
    g_minus = v.T @ np.where(agree, 0.0, p_aux)
    g_perp = g_aux - (g_plus + g_minus)
    return DecomposedGradient(g_plus, g_minus, g_perp, p_prim, p_aux, basis)


def reweight(d: DecomposedGradient, eta) -> np.ndarray:
    perp, plus, minus = eta.aux if isinstance(eta, ControlParams) else eta
    return perp * d.g_perp + plus * d.g_plus + minus * d.g_minus


def surrogate_with_basis(g_aux, g_prim, basis: SubspaceBasis | None, eta, mask=None) -> SurrogateResult:
    """Decompose and reweight with a ready basis living in the masked coordinates.

    ``basis=None`` means the caller could not build one; like a (near) zero
    ``g_prim``, this returns ``g_aux`` unchanged with ``degenerate=True``.
    """
    g_aux = _vec(g_aux, "g_aux")
    g_prim = _vec(g_prim, "g_prim")
    if mask is None:
        sel = slice(None)
    else:
        sel = np.asarray(mask, dtype=bool)
        if sel.shape != g_aux.shape:
            raise DimensionMismatch("mask length must equal the gradient length")
        if not sel.any():
            return SurrogateResult(g_aux.copy(), None, False, basis)
    ga, gp = g_aux[sel], g_prim[sel]
    if basis is None or np.linalg.norm(gp) <= DEGENERATE_NORM:
        log.info("degenerate primary gradient; passing auxiliary gradient through")
        return SurrogateResult(g_aux.copy(), None, True, basis)
    parts = decompose(ga, gp, basis)
    out = g_aux.copy()
    out[sel] = reweight(parts, eta)
    return SurrogateResult(out, parts, False, basis)


def attittud_surrogate(g_aux, jacobian, eta, strategy: BasisStrategy, mask=None,
                       g_prim=None) -> SurrogateResult:
    """Build the basis from the primary Jacobian, decompose ``g_aux`` and reweight.

    Only coordinates selected by ``mask`` are decomposed (against the masked
    columns of the Jacobian); the others keep ``g_aux`` verbatim.
    """
    g_aux = _vec(g_aux, "g_aux")
    j = as_matrix(jacobian)
    if j.shape[1] != g_aux.shape[0]:
        raise DimensionMismatch("jacobian columns must match the gradient length")
    if g_prim is None:
        g_prim = j.mean(axis=0)
    g_prim = _vec(g_prim, "g_prim")
    sel = slice(None) if mask is None else np.asarray(mask, dtype=bool)
    if mask is not None and not sel.any():
        return SurrogateResult(g_aux.copy(), None, False, None)
    try:
        basis = build_basis(strategy, j[:, sel], g_prim[sel])
    except (DegeneratePrimaryGradient, AllRowsDegenerate):
        basis = None
    return surrogate_with_basis(g_aux, g_prim, basis, eta, mask)


def pcgrad_reference(g_aux, g_prim) -> np.ndarray:
    """Remove the component of ``g_aux`` along ``g_prim`` when the two conflict."""
    g_aux = _vec(g_aux, "g_aux")
    g_prim = _vec(g_prim, "g_prim")
    sq = float(np.dot(g_prim, g_prim))
    if sq == 0.0:
        raise ZeroPrimary("g_prim is zero")
    dot = float(np.dot(g_aux, g_prim))
    if dot < 0:
        return g_aux - (dot / sq) * g_prim
    return g_aux.copy()


def descent_check(g_prim, g_aux, surrogate) -> DescentReport:
    s = _vec(surrogate, "surrogate")
    return DescentReport(float(np.dot(s, _vec(g_prim))), float(np.dot(s, _vec(g_aux))))


def diagnostic_record(step: int, result: SurrogateResult, g_prim, g_aux, mask=None) -> dict:
    """One JSON-serializable diagnostics line for a decomposition event."""
    g_prim = _vec(g_prim)
    g_aux = _vec(g_aux)
    sel = slice(None) if mask is None else np.asarray(mask, dtype=bool)
    gp, ga = g_prim[sel], g_aux[sel]
    report = descent_check(gp, ga, result.vector[sel])
    rec = {
        "step": int(step),
        "k_effective": None,
        "norm_fraction_prim": None,
        "norm_fraction_aux": None,
        "norm_g_plus": None,
        "norm_g_minus": None,
        "norm_g_perp": None,
        "dot_prim": report.dot_prim,
        "dot_aux": report.dot_aux,
        "degenerate_flag": bool(result.degenerate),
    }
    parts = result.parts
    if parts is not None:
        basis = parts.basis
        rec["k_effective"] = int(basis.k_effective)
        if np.any(gp):
            rec["norm_fraction_prim"] = norm_fraction(basis, gp)
        if np.any(ga):
            rec["norm_fraction_aux"] = norm_fraction(basis, ga)
        rec["norm_g_plus"] = float(np.linalg.norm(parts.g_plus))
        rec["norm_g_minus"] = float(np.linalg.norm(parts.g_minus))
        rec["norm_g_perp"] = float(np.linalg.norm(parts.g_perp))
    return rec
