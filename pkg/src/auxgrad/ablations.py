"""Ablation harnesses on the synthetic conflict benchmark.

Every harness fixes the data (``data_seed``) and varies the run seed, which
drives initialization, batching, sketches and Jacobian sampling.  Results are
plain dicts holding per-seed numbers so reruns can be compared bit for bit.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .decomposition import PRESET_GRID, BasisStrategy, ControlParams
from .tasks import ConflictSpec, TaskPair, generate_conflict_pair, low_resource_pair
from .trainer import ModelConfig, TrainConfig, run_strategy

BENCH_SPEC = ConflictSpec(conflicting_fraction=0.4)
BENCH_MODEL = ModelConfig(hidden=(32,))
PER_CLASS = 50
ETA_PRIM = 0.1
SEEDS = tuple(range(10))
BASIS_KINDS = ("randomized_svd", "unit_avg_grad", "canonical", "random")
SAMPLE_COUNTS = (8, 16, 32, 64)


@dataclass(frozen=True)
class Cell:
    label: str
    cfg: TrainConfig


def benchmark_pair(spec: ConflictSpec = BENCH_SPEC, data_seed: int = 0, per_class: int = PER_CLASS) -> TaskPair:
    return low_resource_pair(generate_conflict_pair(spec, data_seed), per_class, data_seed)


def base_config(**kw) -> TrainConfig:
    kw.setdefault("eta", ControlParams.from_aux((1.0, 1.0, -1.0), ETA_PRIM))
    return TrainConfig(**kw)


def _run_one(args):
    cfg, pair, model_cfg = args
    rec = run_strategy(cfg, pair, model_cfg)
    nf = [d["norm_fraction_prim"] for d in rec.diagnostics if d["norm_fraction_prim"] is not None]
    return {
        "accuracy": rec.final["primary_test_accuracy"],
        "loss": rec.final["primary_test_loss"],
        "median_norm_fraction_prim": float(np.median(nf)) if nf else None,
        "epochs": dict(rec.epochs),
    }


def run_cells(cells: list[Cell], pair: TaskPair, seeds=SEEDS, model_cfg: ModelConfig = BENCH_MODEL,
              processes: int | None = None) -> dict[str, dict]:
    """Run every cell for every seed; accuracies are reported in percent."""
    jobs = [(replace(c.cfg, seed=s, basis=replace(c.cfg.basis, seed=s)), pair, model_cfg)
            for c in cells for s in seeds]
    processes = processes or int(os.environ.get("AUXGRAD_PROCESSES", "1"))
    if processes > 1:
        with ProcessPoolExecutor(processes) as pool:
            outs = list(pool.map(_run_one, jobs))
    else:
        outs = [_run_one(j) for j in jobs]
    results = {}
    n = len(seeds)
    for i, cell in enumerate(cells):
        runs = outs[i * n:(i + 1) * n]
        acc = [100.0 * r["accuracy"] for r in runs]
        nf = [r["median_norm_fraction_prim"] for r in runs if r["median_norm_fraction_prim"] is not None]
        results[cell.label] = {
            "seeds": list(seeds),
            "accuracy": acc,
            "mean": float(np.mean(acc)),
            "std": float(np.std(acc, ddof=1)) if n > 1 else 0.0,
            "median_norm_fraction_prim": float(np.median(nf)) if nf else None,
            "epochs": [r["epochs"] for r in runs],
        }
    return results


def basis_ablation(seeds=SEEDS, kinds=BASIS_KINDS, k: int = 5, pair: TaskPair | None = None,
                   processes: int | None = None) -> dict[str, dict]:
    pair = pair or benchmark_pair()
    cells = [Cell(kind, base_config(strategy="attittud", basis=BasisStrategy(kind, k))) for kind in kinds]
    return run_cells(cells, pair, seeds, processes=processes)


def sample_count_ablation(seeds=SEEDS, counts=SAMPLE_COUNTS, pair: TaskPair | None = None,
                          processes: int | None = None) -> dict[str, dict]:
    pair = pair or benchmark_pair()
    cells = [Cell(f"m={m}", base_config(strategy="attittud", jacobian_sample_count=m)) for m in counts]
    return run_cells(cells, pair, seeds, processes=processes)


def preset_label(eta) -> str:
    return "attittud" + str(tuple(float(e) for e in eta)).replace(" ", "")


def method_benefit(seeds=SEEDS, presets=PRESET_GRID, pair: TaskPair | None = None,
                   processes: int | None = None) -> dict[str, dict]:
    pair = pair or benchmark_pair()
    cells = [
        Cell("none", base_config(strategy="none")),
        Cell("multitask", base_config(strategy="multitask", eta=ControlParams(1.0, 1.0, 1.0, ETA_PRIM))),
    ]
    cells += [Cell(preset_label(p), base_config(strategy="attittud", eta=ControlParams.from_aux(p, ETA_PRIM)))
              for p in presets]
    return run_cells(cells, pair, seeds, processes=processes)


def inversions(values, slack: float = 0.0) -> list[int]:
    """Indices ``i`` where ``values[i+1]`` exceeds ``values[i]`` by more than ``slack``."""
    return [i for i in range(len(values) - 1) if values[i + 1] > values[i] + slack]


def std_non_increasing(stds, tolerance: float = 0.5) -> bool:
    """At most one increase, and that one no larger than ``tolerance`` points."""
    ups = inversions(stds)
    return len(ups) == 0 or (len(ups) == 1 and stds[ups[0] + 1] - stds[ups[0]] <= tolerance)
