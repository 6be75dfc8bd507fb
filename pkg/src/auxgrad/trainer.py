"""Training strategies over a shared-trunk model.

Every strategy other than ``none`` runs two phases:

1. *pretrain* -- each step pairs an auxiliary batch with a fresh primary batch
   and descends along a strategy-specific combination of the two gradients;
2. *finetune* -- plain descent on the primary task.

Both phases use primary validation loss for LR decay on plateau, early
stopping and best-checkpoint selection.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .decomposition import (
    BasisStrategy,
    ControlParams,
    SurrogateResult,
    attittud_surrogate,
    build_basis,
    diagnostic_record,
    pcgrad_reference,
    surrogate_with_basis,
)
from .errors import AllRowsDegenerate, ConfigInvalid, DegeneratePrimaryGradient
from .linalg import gram_schmidt, sketch_matrix
from .model import Batch, MlpModel, accuracy, batch_gradient, layer_mask, loss, trunk_mask, weighted_batch_gradient
from .rng import substream
from .tasks import TaskPair

STRATEGIES = ("none", "pretrain_finetune", "multitask", "pcgrad", "attittud")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (32,)
    activation: str = "tanh"
    dropout: float = 0.0
    tie_heads: bool = True


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "attittud"
    eta: ControlParams = ControlParams(1.0, 1.0, 0.0, 0.0)
    basis: BasisStrategy = BasisStrategy()
    recompute_interval: int = 10
    jacobian_sample_count: int = 32
    learning_rate: float = 1e-3
    finetune_learning_rate: float | None = None
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float | None = 1.0
    clip_before_decompose: bool = False
    plateau_patience: int = 4
    plateau_factor: float = 0.5
    min_lr: float = 1e-5
    early_stop_patience: int = 10
    max_pretrain_epochs: int = 20
    max_finetune_epochs: int = 50
    primary_batch_size: int = 32
    aux_batch_size: int = 64
    mask_layers: str | tuple[str, ...] = "trunk"
    log_diagnostics: bool = True
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.strategy not in STRATEGIES:
            problems.append(f"strategy must be one of {STRATEGIES}")
        if self.optimizer not in OPTIMIZERS:
            problems.append(f"optimizer must be one of {OPTIMIZERS}")
        if self.recompute_interval < 1:
            problems.append("recompute_interval must be >= 1")
        if self.jacobian_sample_count < 1:
            problems.append("jacobian_sample_count must be >= 1")
        if not self.learning_rate > 0:
            problems.append("learning_rate must be > 0")
        if self.finetune_learning_rate is not None and not self.finetune_learning_rate > 0:
            problems.append("finetune_learning_rate must be > 0")
        if not 0 < self.plateau_factor < 1:
            problems.append("plateau_factor must lie in (0, 1)")
        if self.clip_norm is not None and not self.clip_norm > 0:
            problems.append("clip_norm must be > 0 (or null to disable)")
        if min(self.primary_batch_size, self.aux_batch_size) < 1:
            problems.append("batch sizes must be >= 1")
        if min(self.max_pretrain_epochs, self.max_finetune_epochs) < 0:
            problems.append("epoch caps must be >= 0")
        if problems:
            raise ConfigInvalid("; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eta"] = asdict(self.eta)
        d["basis"] = asdict(self.basis)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "eta" in d and not isinstance(d["eta"], ControlParams):
            e = d["eta"]
            if isinstance(e, dict):
                d["eta"] = ControlParams(**e)
            else:
                d["eta"] = ControlParams.from_aux(e, d.pop("eta_prim", 0.0))
        elif "eta_prim" in d:
            d["eta"] = replace(cls.eta, eta_prim=float(d.pop("eta_prim")))
        if "basis" in d and isinstance(d["basis"], dict):
            d["basis"] = BasisStrategy(**d["basis"])
        for key in ("adam_betas",):
            if key in d:
                d[key] = tuple(d[key])
        if isinstance(d.get("mask_layers"), list):
            d["mask_layers"] = tuple(d["mask_layers"])
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def clip_gradient(g, clip_norm: float | None) -> np.ndarray:
    """Rescale ``g`` to norm ``clip_norm`` when it is longer than that."""
    g = np.asarray(g, dtype=np.float64)
    if clip_norm is None:
        return g.copy()
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    nrm = float(np.linalg.norm(g))
    if nrm > clip_norm:
        return g * (clip_norm / nrm)
    return g.copy()


class Optimizer:
    def __init__(self, kind: str, dim: int, lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.kind = kind
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)

    def step(self, params: np.ndarray, direction: np.ndarray) -> None:
        """Descend along ``direction`` in place."""
        if self.kind == "sgd":
            params -= self.lr * direction
            return
        b1, b2 = self.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * direction
        self.v = b2 * self.v + (1 - b2) * direction * direction
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainState:
    optimizer: Optimizer
    mask: np.ndarray
    step: int = 0
    basis: object = None
    sketch_rng: np.random.Generator | None = None
    basis_rng: np.random.Generator | None = None
    jacobian_rng: np.random.Generator | None = None
    dropout_rng: np.random.Generator | None = None
    diagnostics: list = field(default_factory=list)
    degenerate_events: int = 0
    recompute_steps: list = field(default_factory=list)
    last_direction: np.ndarray | None = None

    @classmethod
    def fresh(cls, model: MlpModel, cfg: TrainConfig, lr: float | None = None, phase: str = "pretrain"):
        seed = cfg.seed
        return cls(
            optimizer=Optimizer(cfg.optimizer, model.dim, cfg.learning_rate if lr is None else lr,
                                cfg.adam_betas, cfg.adam_eps),
            mask=resolve_mask(model, cfg.mask_layers),
            sketch_rng=substream(seed, "sketch"),
            basis_rng=substream(seed, "basis"),
            jacobian_rng=substream(seed, "jacobian"),
            dropout_rng=substream(seed, "dropout", 0 if phase == "pretrain" else 1),
        )


def resolve_mask(model: MlpModel, mask_layers) -> np.ndarray:
    if mask_layers in ("trunk", None):
        return trunk_mask(model)
    if mask_layers == "all":
        return np.ones(model.dim, dtype=bool)
    if isinstance(mask_layers, str):
        mask_layers = (mask_layers,)
    return layer_mask(model, mask_layers)


def _refresh_basis(model: MlpModel, jac_batch: Batch, cfg: TrainConfig, state: TrainState):
    strategy = cfg.basis
    dim = int(state.mask.sum())
    if strategy.kind == "random":
        rows = state.basis_rng.standard_normal((strategy.k, dim))
        b = gram_schmidt(rows)
        return replace(b, k_requested=strategy.k, kind="random")
    pi = sketch_matrix(strategy.k, len(jac_batch), state.sketch_rng)
    sketch = weighted_batch_gradient(model, jac_batch, pi)[:, state.mask]
    try:
        return build_basis(strategy, sketch=sketch)
    except AllRowsDegenerate:
        return None


def aux_direction(model: MlpModel, prim_batch: Batch, aux_batch: Batch, cfg: TrainConfig,
                  state: TrainState, jac_batch: Batch | None = None):
    """Raw (unclipped) update direction for one pretraining step.

    Returns ``(direction, g_prim, g_aux, surrogate_result_or_None)``.
    """
    g_prim = batch_gradient(model, prim_batch, state.dropout_rng)
    g_aux = batch_gradient(model, aux_batch, state.dropout_rng)
    if cfg.clip_before_decompose:
        g_prim = clip_gradient(g_prim, cfg.clip_norm)
        g_aux = clip_gradient(g_aux, cfg.clip_norm)
    eta = cfg.eta
    result = None
    if cfg.strategy == "pretrain_finetune":
        aux_part = g_aux
        prim_weight = 0.0
    elif cfg.strategy == "multitask":
        aux_part = g_aux
        prim_weight = eta.eta_prim
    elif cfg.strategy == "pcgrad":
        aux_part = g_aux.copy()
        sel = state.mask
        if np.linalg.norm(g_prim[sel]) > 0:
            aux_part[sel] = pcgrad_reference(g_aux[sel], g_prim[sel])
        else:
            state.degenerate_events += 1
        prim_weight = eta.eta_prim
    elif cfg.strategy == "attittud":
        kind = cfg.basis.kind
        if kind in ("randomized_svd", "random"):
            if state.step % cfg.recompute_interval == 0:
                if kind == "randomized_svd" and jac_batch is None:
                    raise ValueError("a Jacobian batch is required at recompute steps")
                state.basis = _refresh_basis(model, jac_batch, cfg, state)
                state.recompute_steps.append(state.step)
            basis = state.basis
        else:
            try:
                basis = build_basis(cfg.basis, g_prim=g_prim[state.mask])
            except DegeneratePrimaryGradient:
                basis = None
        result = surrogate_with_basis(g_aux, g_prim, basis, eta, state.mask)
        if result.degenerate:
            state.degenerate_events += 1
        aux_part = result.vector
        prim_weight = eta.eta_prim
    else:
        raise ConfigInvalid(f"strategy {cfg.strategy!r} has no pretraining step")
    direction = aux_part + prim_weight * g_prim if prim_weight else aux_part.copy()
    return direction, g_prim, g_aux, result


def needs_jacobian(cfg: TrainConfig, state: TrainState) -> bool:
    return (cfg.strategy == "attittud" and cfg.basis.kind == "randomized_svd"
            and state.step % cfg.recompute_interval == 0)


def train_step_attittud(model: MlpModel, prim_batch: Batch, aux_batch: Batch, cfg: TrainConfig,
                        state: TrainState, jac_batch: Batch | None = None) -> TrainState:
    """One pretraining step: surrogate + eta_prim * g_prim, clipped, then the optimizer."""
    direction, g_prim, g_aux, result = aux_direction(model, prim_batch, aux_batch, cfg, state, jac_batch)
    if result is not None and cfg.log_diagnostics:
        state.diagnostics.append(diagnostic_record(state.step, result, g_prim, g_aux, state.mask))
    direction = clip_gradient(direction, cfg.clip_norm)
    state.last_direction = direction
    state.optimizer.step(model.params, direction)
    state.step += 1
    return state


def primary_step(model: MlpModel, prim_batch: Batch, cfg: TrainConfig, state: TrainState) -> TrainState:
    direction = clip_gradient(batch_gradient(model, prim_batch, state.dropout_rng), cfg.clip_norm)
    state.last_direction = direction
    state.optimizer.step(model.params, direction)
    state.step += 1
    return state


# -- full runs -------------------------------------------------------------------


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    metrics: list[dict]
    final: dict
    diagnostics: list[dict]
    epochs: dict
    degenerate_events: int
    wall_clock: float

    def to_dict(self, include_diagnostics: bool = False) -> dict:
        d = asdict(self)
        if not include_diagnostics:
            d.pop("diagnostics")
        return d


def _evaluate(model: MlpModel, tasks: TaskPair, split: str):
    out = {}
    for task, ds in (("primary", tasks.primary), ("auxiliary", tasks.auxiliary)):
        if ds.splits[split].size == 0:
            continue
        b = ds.batch(split, task)
        out[task] = (loss(model, b), accuracy(model, b))
    return out


class _Cycler:
    """Endless shuffled pass over ``n`` indices in chunks of ``size``."""

    def __init__(self, n: int, size: int, rng: np.random.Generator):
        self.n, self.size, self.rng = n, min(size, n), rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.size]
        self.pos += self.size
        return idx


def run_strategy(cfg: TrainConfig, tasks: TaskPair, model_cfg: ModelConfig = ModelConfig(),
                 model: MlpModel | None = None) -> RunRecord:
    """Run the full schedule for ``cfg.strategy`` and return its record."""
    cfg.validate()
    t0 = time.perf_counter()
    if model is None:
        model = MlpModel.create(tasks.primary.d, model_cfg.hidden, tasks.primary.n_classes,
                                tasks.auxiliary.n_classes, model_cfg.activation,
                                substream(cfg.seed, "init"), model_cfg.dropout, model_cfg.tie_heads)
    metrics: list[dict] = []
    diagnostics: list[dict] = []
    epochs = {"pretrain": 0, "finetune": 0}
    degenerate = 0
    global_step = 0

    def log_epoch(phase, epoch):
        for split in ("train", "val"):
            for task, (l, a) in _evaluate(model, tasks, split).items():
                metrics.append({"step": global_step, "epoch": epoch, "phase": phase, "task": task,
                                "split": split, "loss": l, "accuracy": a})

    prim_train = tasks.primary.splits["train"].size
    batch_rng = substream(cfg.seed, "batches")

    if cfg.strategy != "none" and cfg.max_pretrain_epochs > 0:
        state = TrainState.fresh(model, cfg, phase="pretrain")
        aux_n = tasks.auxiliary.splits["train"].size
        prim_cycle = _Cycler(prim_train, cfg.primary_batch_size, batch_rng)
        jac_size = min(cfg.jacobian_sample_count, prim_train)
        steps_per_epoch = max(1, aux_n // cfg.aux_batch_size)
        tracker = _Plateau(cfg, state.optimizer)
        best = (loss(model, tasks.primary.batch("val", "primary")), model.params.copy())
        tracker.best = best[0]
        for epoch in range(cfg.max_pretrain_epochs):
            order = batch_rng.permutation(aux_n)
            for s in range(steps_per_epoch):
                aux_b = tasks.auxiliary.batch("train", "auxiliary",
                                              order[s * cfg.aux_batch_size:(s + 1) * cfg.aux_batch_size])
                prim_b = tasks.primary.batch("train", "primary", prim_cycle.next())
                jac_b = None
                if needs_jacobian(cfg, state):
                    jac_b = tasks.primary.batch(
                        "train", "primary", state.jacobian_rng.choice(prim_train, jac_size, replace=False))
                train_step_attittud(model, prim_b, aux_b, cfg, state, jac_b)
                global_step += 1
            epochs["pretrain"] = epoch + 1
            log_epoch("pretrain", epoch)
            val = loss(model, tasks.primary.batch("val", "primary"))
            if val < best[0]:
                best = (val, model.params.copy())
            if tracker.update(val):
                break
        model.params[:] = best[1]
        diagnostics = state.diagnostics
        degenerate = state.degenerate_events

    if cfg.max_finetune_epochs > 0:
        lr = cfg.finetune_learning_rate or cfg.learning_rate
        state = TrainState.fresh(model, cfg, lr=lr, phase="finetune")
        steps_per_epoch = max(1, -(-prim_train // cfg.primary_batch_size))
        tracker = _Plateau(cfg, state.optimizer)
        best = (loss(model, tasks.primary.batch("val", "primary")), model.params.copy())
        tracker.best = best[0]
        for epoch in range(cfg.max_finetune_epochs):
            order = batch_rng.permutation(prim_train)
            for s in range(steps_per_epoch):
                idx = order[s * cfg.primary_batch_size:(s + 1) * cfg.primary_batch_size]
                primary_step(model, tasks.primary.batch("train", "primary", idx), cfg, state)
                global_step += 1
            epochs["finetune"] = epoch + 1
            log_epoch("finetune", epoch)
            val = loss(model, tasks.primary.batch("val", "primary"))
            if val < best[0]:
                best = (val, model.params.copy())
            if tracker.update(val):
                break
        model.params[:] = best[1]

    test = _evaluate(model, tasks, "test")
    final = {"primary_test_loss": test["primary"][0], "primary_test_accuracy": test["primary"][1]}
    if "auxiliary" in test:
        final["auxiliary_test_loss"], final["auxiliary_test_accuracy"] = test["auxiliary"]
    return RunRecord(cfg.to_dict(), cfg.config_hash(), metrics, final, diagnostics, epochs,
                     degenerate, time.perf_counter() - t0)


class _Plateau:
    """LR decay on plateau plus early stopping, both keyed on primary val loss."""

    def __init__(self, cfg: TrainConfig, opt: Optimizer):
        self.cfg, self.opt = cfg, opt
        self.best = np.inf
        self.since_best = 0
        self.since_decay = 0

    def update(self, val: float) -> bool:
        """Record one epoch; return True when training should stop."""
        if val < self.best:
            self.best = val
            self.since_best = 0
            self.since_decay = 0
            return False
        self.since_best += 1
        self.since_decay += 1
        if self.since_decay >= self.cfg.plateau_patience:
            self.opt.lr = max(self.cfg.min_lr, self.opt.lr * self.cfg.plateau_factor)
            self.since_decay = 0
        return self.since_best >= self.cfg.early_stop_patience


# -- single-step descent check on quadratics ------------------------------------


@dataclass(frozen=True)
class QuadraticReport:
    seed: int
    dim: int
    eta: tuple[float, float, float]
    lipschitz: float
    step_size: float
    delta_prim: float
    delta_aux: float
    prim_bound: float
    dot_prim: float
    dot_aux: float

    @property
    def ok(self) -> bool:
        return self.delta_aux <= QUAD_SLACK and self.delta_prim <= self.prim_bound


QUAD_SLACK = 1e-10


def _random_psd(dim: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((dim, dim))
    return a @ a.T / dim + 1e-3 * np.eye(dim)


def verify_theorem1_quadratic(dim: int, seed: int, eta=(1.0, 1.0, 0.0), n_anchors: int = 4,
                              k: int | None = None, step_fraction: float = 1.0) -> QuadraticReport:
    """One surrogate step on two random convex quadratics.

    The primary loss is the mean of ``n_anchors`` quadratics ``0.5 (x-c_i)' H (x-c_i)``
    sharing one Hessian; their gradients are the Jacobian rows.  The sketch has
    ``k >= n_anchors`` rows so the basis spans the whole Jacobian row space and
    the mean primary gradient lies in it.  With ``alpha = step_fraction / L``
    the loss changes follow from the exact second-order expansion (no
    differencing of large loss values) and are compared against the bounds.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if not 0.0 < step_fraction <= 1.0:
        raise ValueError("step_fraction must lie in (0, 1]")
    k = max(n_anchors, k or n_anchors)
    rng = substream(seed, "theorem1", dim)
    h_prim, h_aux = _random_psd(dim, rng), _random_psd(dim, rng)
    c_prim = rng.standard_normal((n_anchors, dim))
    c_aux = rng.standard_normal(dim)
    theta = rng.standard_normal(dim)
    lip = float(max(np.linalg.eigvalsh(h_prim)[-1], np.linalg.eigvalsh(h_aux)[-1]))
    alpha = step_fraction / lip

    jac = (theta[None, :] - c_prim) @ h_prim
    g_prim = jac.mean(axis=0)
    g_aux = h_aux @ (theta - c_aux)
    res = attittud_surrogate(g_aux, jac, eta, BasisStrategy("randomized_svd", k, seed), g_prim=g_prim)
    s = res.vector
    # L(x - a s) - L(x) = -a s.g + a^2/2 s'Hs for a quadratic with Hessian H
    d_prim = -alpha * float(s @ g_prim) + 0.5 * alpha**2 * float(s @ h_prim @ s)
    d_aux = -alpha * float(s @ g_aux) + 0.5 * alpha**2 * float(s @ h_aux @ s)
    return QuadraticReport(
        seed=int(seed), dim=int(dim), eta=tuple(float(e) for e in eta), lipschitz=lip, step_size=alpha,
        delta_prim=d_prim, delta_aux=d_aux,
        prim_bound=QUAD_SLACK + 0.5 * lip * alpha**2 * float(s @ s),
        dot_prim=float(s @ g_prim), dot_aux=float(s @ g_aux))
