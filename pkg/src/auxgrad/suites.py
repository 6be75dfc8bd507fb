"""Seeded property suites behind ``auxgrad verify``.

Each suite returns a :class:`SuiteResult` holding one :class:`Check` per
property, with the worst value seen over all instances and the threshold it
is compared against.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from .decomposition import (
    BasisStrategy,
    attittud_surrogate,
    build_basis,
    decompose,
    pcgrad_reference,
    reweight,
    surrogate_with_basis,
)
from .linalg import captured_fraction, exact_topk_basis, randomized_lowrank_approx, span_residual
from .model import Batch, MlpModel, batch_gradient, loss, per_example_jacobian, weighted_batch_gradient
from .rng import substream
from .trainer import verify_theorem1_quadratic

SUITES = ("decomposition", "theorem1", "sketch", "gradients")
FD_STEP = 1e-5
# |fd - analytic| is ~1e-10 at this step, so relative error is measured
# against max(|fd|, |analytic|, GRAD_FLOOR) to keep vanishing partials meaningful
GRAD_FLOOR = 1e-6


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    threshold: float
    op: str  # "<=" or ">="
    detail: str = ""

    @property
    def passed(self) -> bool:
        if not np.isfinite(self.value):
            return False
        return self.value <= self.threshold if self.op == "<=" else self.value >= self.threshold

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<44s} {self.value:12.4e} {self.op} {self.threshold:.1e}  {self.detail}"


@dataclass
class SuiteResult:
    name: str
    checks: list[Check] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def values(self) -> dict[str, float]:
        return {c.name: c.value for c in self.checks}

    def table(self) -> str:
        head = f"[{self.name}] {'PASS' if self.passed else 'FAIL'} ({self.elapsed:.1f}s)"
        return "\n".join([head] + ["  " + c.line() for c in self.checks])


def _timed(name, fn, *args, **kw) -> SuiteResult:
    t0 = time.perf_counter()
    checks = fn(*args, **kw)
    return SuiteResult(name, checks, time.perf_counter() - t0)


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


# -- decomposition -------------------------------------------------------------

DIMS = (10, 100, 1000)
SAMPLES = (4, 16, 64)
RANKS = (1, 5, 10)


def decomposition_checks(n_instances: int = 1000, seed: int = 0) -> list[Check]:
    grid = list(itertools.product(DIMS, SAMPLES, RANKS))
    recon = perp = 0.0
    plus_min, minus_max = np.inf, -np.inf
    for i in range(n_instances):
        d, m, k = grid[i % len(grid)]
        rng = substream(seed, "decomposition", i)
        jac = rng.standard_normal((m, d)) * rng.uniform(0.1, 10.0)
        g_prim = jac.mean(axis=0)
        g_aux = rng.standard_normal(d) * rng.uniform(0.1, 10.0)
        basis = randomized_lowrank_approx(jac, k, rng)
        parts = decompose(g_aux, g_prim, basis)
        na, npr = np.linalg.norm(g_aux), np.linalg.norm(g_prim)
        recon = max(recon, _rel(reweight(parts, (1, 1, 1)), g_aux))
        perp = max(perp, float(np.max(np.abs(basis.vectors @ parts.g_perp))) / na)
        plus_min = min(plus_min, float(parts.g_plus @ g_prim) / (na * npr))
        minus_max = max(minus_max, float(parts.g_minus @ g_prim) / (na * npr))
    tag = f"{n_instances} instances"
    return [
        Check("reconstruction (1,1,1) rel. error", recon, 1e-10, "<=", tag),
        Check("g_perp orthogonality to basis", perp, 1e-8, "<=", tag),
        Check("min normalized g_plus . g_prim", plus_min, -1e-8, ">=", tag),
        Check("max normalized g_minus . g_prim", minus_max, 1e-8, "<=", tag),
    ]


def pcgrad_checks(n_pairs: int = 1000, seed: int = 0) -> list[Check]:
    worst = 0.0
    conflicts = 0
    for i in range(n_pairs):
        rng = substream(seed, "pcgrad", i)
        d = DIMS[i % len(DIMS)]
        g_prim = rng.standard_normal(d)
        g_aux = rng.standard_normal(d)
        if i % 2:  # force a conflict on half the pairs
            g_aux -= 2.0 * max(0.0, g_aux @ g_prim) / (g_prim @ g_prim) * g_prim
        conflicts += bool(g_aux @ g_prim < 0)
        basis = build_basis(BasisStrategy("unit_avg_grad"), g_prim=g_prim)
        ours = surrogate_with_basis(g_aux, g_prim, basis, (1.0, 1.0, 0.0)).vector
        worst = max(worst, _rel(ours, pcgrad_reference(g_aux, g_prim)))
    return [Check("PCGrad equivalence rel. error", worst, 1e-8, "<=",
                  f"{n_pairs} pairs, {conflicts} conflicting")]


# -- descent guarantee -----------------------------------------------------------

ETA_GRID = tuple((p, q, 0.0) for p in (0.0, 0.5, 1.0, 2.0) for q in (0.0, 0.5, 1.0, 2.0))
# the single-step quadratic bound needs alpha * eta <= 2 / L-ish; keep eta <= 1 there
QUAD_ETA_GRID = tuple((p, q, 0.0) for p in (0.0, 0.5, 1.0) for q in (0.0, 0.5, 1.0))


def first_order_checks(n_instances: int = 1000, seed: int = 0) -> list[Check]:
    """``s . g_prim`` and ``s . g_aux`` for eta with ``eta_minus = 0``.

    The sketch keeps at least as many rows as there are primary samples, so
    the mean primary gradient lies inside the basis span.
    """
    kinds = ("randomized_svd", "unit_avg_grad", "canonical")
    worst_p = worst_a = np.inf
    for i in range(n_instances):
        rng = substream(seed, "first_order", i)
        d = DIMS[i % len(DIMS)]
        m = int(rng.integers(1, 6))
        k = int(rng.choice((5, 10)))
        kind = kinds[i % len(kinds)]
        jac = rng.standard_normal((m, d))
        g_prim = jac.mean(axis=0)
        g_aux = rng.standard_normal(d)
        eta = ETA_GRID[i % len(ETA_GRID)]
        s = attittud_surrogate(g_aux, jac, eta, BasisStrategy(kind, k, i), g_prim=g_prim).vector
        ns = np.linalg.norm(s)
        if ns == 0.0:
            continue
        worst_p = min(worst_p, float(s @ g_prim) / (ns * np.linalg.norm(g_prim)))
        worst_a = min(worst_a, float(s @ g_aux) / (ns * np.linalg.norm(g_aux)))
    tag = f"{n_instances} instances, eta_minus = 0"
    return [
        Check("min normalized surrogate . g_prim", worst_p, -1e-8, ">=", tag),
        Check("min normalized surrogate . g_aux", worst_a, -1e-8, ">=", tag),
    ]


def quadratic_checks(n_seeds: int = 100, dims=(2, 10, 50)) -> list[Check]:
    aux_excess = prim_excess = -np.inf
    flip_dot = np.inf
    zero_delta = 0.0
    for seed in range(n_seeds):
        for d in dims:
            for eta in QUAD_ETA_GRID:
                r = verify_theorem1_quadratic(d, seed, eta)
                aux_excess = max(aux_excess, r.delta_aux)
                prim_excess = max(prim_excess, r.delta_prim - r.prim_bound)
                if eta == (0.0, 0.0, 0.0):
                    zero_delta = max(zero_delta, abs(r.delta_prim), abs(r.delta_aux))
            flip = verify_theorem1_quadratic(d, seed, (1.0, 0.0, -1.0))
            scale = max(abs(flip.dot_aux), 1.0)
            flip_dot = min(flip_dot, flip.dot_prim / scale)
    tag = f"{n_seeds} seeds x dims {list(dims)} x {len(QUAD_ETA_GRID)} eta"
    return [
        Check("max quadratic delta L_aux", aux_excess, 1e-10, "<=", tag),
        Check("max delta L_prim minus bound", prim_excess, 0.0, "<=", tag),
        Check("eta (0,0,0) max |delta L|", zero_delta, 0.0, "<=", tag),
        Check("eta (1,0,-1) min scaled s . g_prim", flip_dot, -1e-8, ">=", f"{n_seeds} seeds"),
    ]


# -- sketching ---------------------------------------------------------------------

SKETCH_MODELS = ((8, (4,)), (20, (16,)), (50, (32, 16)), (100, (64, 32)))


def sketch_checks(seed: int = 0) -> list[Check]:
    worst = 0.0
    max_dim = 0
    count = 0
    for (d_in, hidden), act, m, k in itertools.product(SKETCH_MODELS, ("tanh", "relu"), (1, 8, 64), (1, 5, 10)):
        rng = substream(seed, "sketch", count)
        count += 1
        model = MlpModel.create(d_in, hidden, 3, 2, act, rng)
        batch = Batch(rng.standard_normal((m, d_in)), rng.integers(0, 3, m), "primary")
        pi = rng.standard_normal((k, m))
        explicit = pi @ per_example_jacobian(model, batch)
        worst = max(worst, _rel(weighted_batch_gradient(model, batch, pi), explicit))
        max_dim = max(max_dim, model.dim)
    return [Check("sketched Pi J vs explicit rel. error", worst, 1e-8, "<=",
                  f"{count} cases, D up to {max_dim}")]


SPECTRUM_DECAY = 0.5


def subspace_checks(n_exact: int = 100, n_decay: int = 20, seed: int = 0) -> list[Check]:
    """Randomized vs exact top-k subspaces.

    Low-rank case: ``rank(J) <= k`` so both bases span the row space.  Full-rank
    case: singular values decay geometrically (``SPECTRUM_DECAY ** i``).
    """
    worst = 0.0
    for i in range(n_exact):
        rng = substream(seed, "lowrank", i)
        m, d = int(rng.choice((8, 16, 64))), int(rng.choice((50, 200, 1000)))
        k = int(rng.integers(1, 11))
        r = int(rng.integers(1, k + 1))
        jac = rng.standard_normal((m, r)) @ rng.standard_normal((r, d))
        rand = randomized_lowrank_approx(jac, k, rng)
        exact = exact_topk_basis(jac, r)
        worst = max(worst, span_residual(rand, exact.vectors), span_residual(exact, rand.vectors))
    fr_rand, fr_exact = [], []
    for i in range(n_decay):
        rng = substream(seed, "decay", i)
        m, d, k = 64, 500, 5
        u = np.linalg.qr(rng.standard_normal((m, m)))[0]
        v = np.linalg.qr(rng.standard_normal((d, m)))[0]
        jac = (u * SPECTRUM_DECAY ** np.arange(m)) @ v.T
        fr_rand.append(captured_fraction(randomized_lowrank_approx(jac, k, rng), jac))
        fr_exact.append(captured_fraction(exact_topk_basis(jac, k), jac))
    ratio = float(np.median(fr_rand) / np.median(fr_exact))
    return [
        Check("rank <= k mutual span residual", worst, 1e-6, "<=", f"{n_exact} instances"),
        Check("median captured fraction rand / exact", ratio, 0.9, ">=",
              f"{n_decay} seeds, k=5, decay {SPECTRUM_DECAY}"),
    ]


# -- finite differences --------------------------------------------------------------

GRAD_MODELS = ((6, (5,)), (10, (8, 6)), (4, (7,)), (12, (10, 4, 3)), (8, (16,)))


def _fd_model(i: int, seed: int):
    rng = substream(seed, "gradients", i)
    d_in, hidden = GRAD_MODELS[i % len(GRAD_MODELS)]
    act = "tanh" if i % 2 == 0 else "relu"
    model = MlpModel.create(d_in, hidden, 3, 4, act, rng)
    prim = Batch(rng.standard_normal((8, d_in)), rng.integers(0, 3, 8), "primary")
    aux = Batch(rng.standard_normal((8, d_in)), rng.integers(0, 4, 8), "auxiliary")
    return model, prim, aux, rng


def _relu_pattern(model: MlpModel, batches) -> list[np.ndarray]:
    if model.activation != "relu":
        return []
    return [z > 0 for b in batches for z in model._forward(b.inputs, b.task)[2]]


def gradient_checks(n_models: int = 10, per_layer: int = 50, seed: int = 0) -> list[Check]:
    """Central differences against the analytic gradient.

    For ReLU models a coordinate whose +-step flips any unit on or off straddles
    a kink, where the two-sided difference is not a derivative; those are skipped.
    """
    worst = 0.0
    n_coords = skipped = 0
    for i in range(n_models):
        model, prim, aux, rng = _fd_model(i, seed)
        grad = batch_gradient(model, prim) + batch_gradient(model, aux)
        base = model.params.copy()

        def objective(theta):
            model.params[:] = theta
            return loss(model, prim) + loss(model, aux)

        for layer in model.layer_names():
            idx = np.concatenate([np.arange(s.offset, s.offset + s.size) for s in model.layout
                                  if s.name.rsplit(".", 1)[0] == layer])
            pick = rng.choice(idx, size=min(per_layer, idx.size), replace=False)
            for c in pick:
                e = np.zeros_like(base)
                e[c] = FD_STEP
                up = objective(base + e)
                pat_up = _relu_pattern(model, (prim, aux))
                down = objective(base - e)
                pat_down = _relu_pattern(model, (prim, aux))
                if any(np.any(a != b) for a, b in zip(pat_up, pat_down)):
                    skipped += 1
                    continue
                fd = (up - down) / (2 * FD_STEP)
                err = abs(fd - grad[c]) / max(abs(fd), abs(grad[c]), GRAD_FLOOR)
                worst = max(worst, err)
                n_coords += 1
        model.params[:] = base
    return [Check("finite-difference rel. error", worst, 1e-4, "<=",
                  f"{n_models} models, {n_coords} coords, {skipped} kinks skipped, step {FD_STEP:g}")]


# -- entry points ----------------------------------------------------------------------


def run_suite(name: str, seed: int = 0) -> list[SuiteResult]:
    if name == "all":
        return [r for s in SUITES for r in run_suite(s, seed)]
    if name == "decomposition":
        return [_timed("decomposition", lambda: decomposition_checks(seed=seed) + pcgrad_checks(seed=seed))]
    if name == "theorem1":
        return [_timed("theorem1", lambda: first_order_checks(seed=seed) + quadratic_checks())]
    if name == "sketch":
        return [_timed("sketch", lambda: sketch_checks(seed) + subspace_checks(seed=seed))]
    if name == "gradients":
        return [_timed("gradients", gradient_checks, seed=seed)]
    raise KeyError(f"unknown suite {name!r}; choose from {SUITES + ('all',)}")
