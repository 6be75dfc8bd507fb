"""Command-line experiment runner.

    auxgrad run <config.json>     run every sweep cell x seed, write records and summary.csv
    auxgrad verify <suite>        property suites: decomposition, theorem1, sketch, gradients, all
    auxgrad diag <run_dir>        per-basis-kind norm-fraction summary of diagnostics streams

Exit codes: 0 success, 1 runtime failure or failed property, 2 bad config / usage.
Relative ``output_dir`` values resolve against ``$AUXGRAD_OUTPUT_ROOT`` when set.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .decomposition import BasisStrategy, ControlParams
from .errors import AuxGradError, ConfigInvalid, MissingDiagnostics, SpecInvalid
from .tasks import (
    ConflictSpec,
    TaskPair,
    generate_conflict_pair,
    load_csv_task,
    low_resource_pair,
    subsample_low_resource,
    verify_content_hash,
)
from .trainer import ModelConfig, TrainConfig, run_strategy

log = logging.getLogger("auxgrad")

OUTPUT_ROOT_ENV = "AUXGRAD_OUTPUT_ROOT"
SWEEP_AXES = ("strategy", "basis", "k", "m", "eta", "eta_prim")
SUMMARY_METRICS = ("primary_test_accuracy", "primary_test_loss", "auxiliary_test_accuracy", "auxiliary_test_loss")
METRICS_HEADER = ("step", "epoch", "phase", "task", "split", "loss", "accuracy")
DIAG_FIELDS = ("norm_fraction_prim", "norm_fraction_aux")


class ConfigError(AuxGradError):
    """Config that cannot be run; reported with a line number or a JSON path."""


# -- files ---------------------------------------------------------------------


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(rows: list[dict], header) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(header), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n"


# -- config --------------------------------------------------------------------


def load_schema() -> dict:
    return json.loads(resources.files("auxgrad").joinpath("schema/experiment.schema.json").read_text())


def _path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def load_config(path) -> dict:
    import jsonschema

    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        lines = []
        for err in errors:
            # oneOf failures are more useful reported through their best sub-error
            best = jsonschema.exceptions.best_match([err])
            lines.append(f"{path}: {_path(best.absolute_path)}: {best.message}")
        raise ConfigError("\n".join(lines))
    return doc


@dataclass
class Job:
    cell: str
    axes: dict
    seed: int
    cfg: TrainConfig
    out_dir: Path


@dataclass
class Experiment:
    name: str
    output_dir: Path
    model: ModelConfig
    tasks: TaskPair
    jobs: list[Job] = field(default_factory=list)
    processes: int = 1
    source: dict = field(default_factory=dict)


def _train_config(base: dict, axes: dict, seed: int) -> TrainConfig:
    d = dict(base)
    basis = dict(d.pop("basis", {}))
    eta = d.pop("eta", (1.0, 1.0, 0.0))
    eta_prim = d.pop("eta_prim", 0.0)
    if "strategy" in axes:
        d["strategy"] = axes["strategy"]
    if "basis" in axes:
        basis["kind"] = axes["basis"]
    if "k" in axes:
        basis["k"] = axes["k"]
    if "m" in axes:
        d["jacobian_sample_count"] = axes["m"]
    eta = axes.get("eta", eta)
    eta_prim = axes.get("eta_prim", eta_prim)
    d["eta"] = ControlParams.from_aux(eta, eta_prim)
    d["basis"] = BasisStrategy(seed=seed, **basis)
    d["seed"] = seed
    cfg = TrainConfig.from_dict(d)
    cfg.validate()
    return cfg


def _cell_name(axes: dict) -> str:
    if not axes:
        return "default"
    parts = []
    for key, val in axes.items():
        if isinstance(val, (list, tuple)):
            val = "_".join(f"{float(v):g}" for v in val)
        parts.append(f"{key}={val}")
    return ",".join(parts)


def _build_tasks(spec: dict, base_dir: Path) -> TaskPair:
    seed = int(spec.get("seed", 0))
    per_class = spec.get("per_class")
    if spec["source"] == "synthetic":
        params = dict(spec.get("spec", {}))
        for key in ("primary_split", "aux_split"):
            if key in params:
                params[key] = tuple(params[key])
        pair = generate_conflict_pair(ConflictSpec(**params), seed)
        return low_resource_pair(pair, per_class, seed) if per_class else pair

    split = tuple(spec.get("split", (0.6, 0.2, 0.2)))
    datasets = {}
    for role in ("primary", "auxiliary"):
        entry = spec[role]
        path = Path(entry["path"])
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"tasks.{role}.path: file not found: {path}")
        if "sha256" in entry:
            verify_content_hash(path, entry["sha256"])
        datasets[role] = load_csv_task(path, entry["label_column"], entry.get("features"),
                                       split=split, seed=seed, name=role)
    if datasets["primary"].d != datasets["auxiliary"].d:
        raise ConfigError("tasks: primary and auxiliary CSVs must have the same number of feature columns")
    primary = datasets["primary"]
    if per_class:
        primary = subsample_low_resource(primary, per_class, seed)
    return TaskPair(primary, datasets["auxiliary"],
                    {"source": "csv", "primary": primary.provenance,
                     "auxiliary": datasets["auxiliary"].provenance, "per_class": per_class})


def _output_dir(doc: dict, config_path: Path) -> Path:
    out = Path(doc.get("output_dir") or f"runs/{doc.get('name') or config_path.stem}")
    if out.is_absolute():
        return out
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / out if root else Path.cwd() / out


def plan_experiment(config_path) -> Experiment:
    """Validate everything that can be validated before any output is written."""
    config_path = Path(config_path)
    doc = load_config(config_path)
    try:
        model_doc = dict(doc.get("model", {}))
        if "hidden" in model_doc:
            model_doc["hidden"] = tuple(model_doc["hidden"])
        model = ModelConfig(**model_doc)
        tasks = _build_tasks(doc["tasks"], config_path.parent)
        sweep = doc.get("sweep", {})
        seeds = sweep.get("seeds", [0])
        names = [a for a in SWEEP_AXES if a in sweep]
        out = _output_dir(doc, config_path)
        jobs = []
        for combo in itertools.product(*(sweep[a] for a in names)):
            axes = dict(zip(names, combo))
            cell = _cell_name(axes)
            for seed in seeds:
                try:
                    cfg = _train_config(doc.get("train", {}), axes, seed)
                except (ConfigInvalid, ValueError, TypeError) as exc:
                    raise ConfigError(f"{config_path}: train (cell {cell}): {exc}") from None
                jobs.append(Job(cell, axes, seed, cfg, out / cell / f"seed_{seed}"))
    except (SpecInvalid, ConfigInvalid) as exc:
        raise ConfigError(f"{config_path}: {exc}") from None
    except AuxGradError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{config_path}: tasks: {exc}") from None
    return Experiment(doc.get("name") or config_path.stem, out, model, tasks, jobs,
                      int(doc.get("processes", 1)), doc)


# -- running -----------------------------------------------------------------------


def _execute(args) -> dict:
    job, tasks, model_cfg = args
    try:
        rec = run_strategy(job.cfg, tasks, model_cfg)
    except Exception as exc:  # reported per cell; the sweep keeps going
        log.exception("cell %s seed %d failed", job.cell, job.seed)
        return {"cell": job.cell, "seed": job.seed, "error": f"{type(exc).__name__}: {exc}"}
    doc = rec.to_dict()
    doc.update(cell=job.cell, axes=job.axes, seed=job.seed, model=asdict(model_cfg),
               diagnostics_file="diagnostics.jsonl")
    atomic_write_text(job.out_dir / "metrics.csv", csv_text(rec.metrics, METRICS_HEADER))
    atomic_write_text(job.out_dir / "diagnostics.jsonl",
                      "".join(json.dumps(d, sort_keys=True) + "\n" for d in rec.diagnostics))
    atomic_write_text(job.out_dir / "run_record.json", dumps(doc))
    return {"cell": job.cell, "seed": job.seed, "record": doc}


def summarize(records: list[dict]) -> list[dict]:
    """Mean and sample std (ddof=1; 0 for a single seed) of final metrics per cell."""
    cells: dict[str, list[dict]] = {}
    for rec in records:
        cells.setdefault(rec["cell"], []).append(rec)
    rows = []
    for cell in sorted(cells):
        group = sorted(cells[cell], key=lambda r: r["seed"])
        row = {"cell": cell, "n_seeds": len(group), "seeds": " ".join(str(r["seed"]) for r in group)}
        for metric in SUMMARY_METRICS:
            vals = np.array([r["final"][metric] for r in group if metric in r["final"]], dtype=float)
            if vals.size:
                row[f"{metric}_mean"] = repr(float(vals.mean()))
                row[f"{metric}_std"] = repr(float(vals.std(ddof=1)) if vals.size > 1 else 0.0)
        rows.append(row)
    return rows


def summary_header() -> list[str]:
    return ["cell", "n_seeds", "seeds"] + [f"{m}_{s}" for m in SUMMARY_METRICS for s in ("mean", "std")]


def load_records(run_dir) -> list[dict]:
    return [json.loads(p.read_text()) for p in sorted(Path(run_dir).rglob("run_record.json"))]


def run_experiment(exp: Experiment) -> int:
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(exp.output_dir / "config.json", dumps(exp.source))
    atomic_write_text(exp.output_dir / "manifest.json", dumps(exp.tasks.manifest()))
    args = [(job, exp.tasks, exp.model) for job in exp.jobs]
    if exp.processes > 1 and len(args) > 1:
        with ProcessPoolExecutor(exp.processes) as pool:
            results = list(pool.map(_execute, args))
    else:
        results = []
        for a in args:
            results.append(_execute(a))
            r = results[-1]
            log.info("%s seed %d: %s", r["cell"], r["seed"],
                     r.get("error") or f"primary test acc {r['record']['final']['primary_test_accuracy']:.4f}")
    records = [r["record"] for r in results if "record" in r]
    failures = [r for r in results if "error" in r]
    atomic_write_text(exp.output_dir / "summary.csv", csv_text(summarize(records), summary_header()))
    if failures:
        atomic_write_text(exp.output_dir / "failures.json", dumps(failures))
        for f in failures:
            print(f"FAILED {f['cell']} seed {f['seed']}: {f['error']}", file=sys.stderr)
        return 1
    return 0


# -- diagnostics summary -----------------------------------------------------------


def diagnostics_summary(run_dir) -> list[dict]:
    """Median and IQR of the norm fractions per basis kind over all logged steps."""
    run_dir = Path(run_dir)
    values: dict[str, dict[str, list[float]]] = {}
    for diag in sorted(run_dir.rglob("diagnostics.jsonl")):
        rec_path = diag.with_name("run_record.json")
        kind = "unknown"
        if rec_path.exists():
            cfg = json.loads(rec_path.read_text())["config"]
            kind = cfg["basis"]["kind"] if cfg["strategy"] == "attittud" else cfg["strategy"]
        for line in diag.read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            bucket = values.setdefault(kind, {f: [] for f in DIAG_FIELDS})
            for f in DIAG_FIELDS:
                if rec.get(f) is not None:
                    bucket[f].append(float(rec[f]))
    rows = []
    for kind in sorted(values):
        for f in DIAG_FIELDS:
            v = np.asarray(values[kind][f])
            if not v.size:
                continue
            q25, med, q75 = np.percentile(v, [25, 50, 75])
            rows.append({"basis_kind": kind, "metric": f, "n": int(v.size), "median": repr(float(med)),
                         "q25": repr(float(q25)), "q75": repr(float(q75)), "iqr": repr(float(q75 - q25))})
    if not rows:
        raise MissingDiagnostics(f"no diagnostics records under {run_dir}")
    return rows


DIAG_HEADER = ("basis_kind", "metric", "n", "median", "q25", "q75", "iqr")


# -- entry points ----------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    from .suites import SUITES

    p = argparse.ArgumentParser(prog="auxgrad", description="Auxiliary-gradient decomposition experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--processes", type=int, default=None, help="override the config's process count")
    v = sub.add_parser("verify", help="run a property suite")
    v.add_argument("suite", choices=SUITES + ("all",))
    v.add_argument("--seed", type=int, default=0)
    d = sub.add_parser("diag", help="summarize diagnostics streams of a run directory")
    d.add_argument("run_dir")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "run":
        try:
            exp = plan_experiment(args.config)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        if args.processes:
            exp.processes = args.processes
        try:
            code = run_experiment(exp)
        except Exception as exc:
            print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
            return 1
        print(exp.output_dir / "summary.csv")
        return code

    if args.command == "verify":
        from .suites import run_suite

        results = run_suite(args.suite, args.seed)
        for res in results:
            print(res.table())
        return 0 if all(r.passed for r in results) else 1

    if args.command == "diag":
        if not Path(args.run_dir).is_dir():
            print(f"not a directory: {args.run_dir}", file=sys.stderr)
            return 2
        try:
            rows = diagnostics_summary(args.run_dir)
        except MissingDiagnostics as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        text = csv_text(rows, DIAG_HEADER)
        atomic_write_text(Path(args.run_dir) / "diagnostics_summary.csv", text)
        sys.stdout.write(text)
        return 0
    return 2


def entry() -> None:
    sys.exit(main())
