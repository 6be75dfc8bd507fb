"""Primary/auxiliary task suppliers.

``generate_conflict_pair`` builds two binary Gaussian-mixture tasks over the
same feature space.  Features are split into three blocks:

* helpful     -- both tasks shift their class means the same way,
* conflicting -- the auxiliary task shifts its class means the opposite way,
* noise       -- carries no label information for either task.

So the part of the auxiliary signal living in the conflicting block pulls a
shared representation against the primary task, while the helpful block is
genuinely transferable.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InsufficientExamples, ParseError, SchemaMismatch, SpecInvalid
from .model import Batch
from .rng import substream

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    splits: dict[str, np.ndarray]
    name: str = ""
    provenance: dict = field(default_factory=dict)
    label_names: list[str] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = {k: np.asarray(v, dtype=np.int64) for k, v in self.splits.items()}

    def __len__(self):
        return self.labels.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def batch(self, split: str, task: str, idx=None) -> Batch:
        rows = self.splits[split]
        if idx is not None:
            rows = rows[idx]
        return Batch(self.features[rows], self.labels[rows], task)

    def class_counts(self, split: str | None = None) -> np.ndarray:
        labels = self.labels if split is None else self.labels[self.splits[split]]
        return np.bincount(labels, minlength=self.n_classes)


@dataclass
class TaskPair:
    primary: Dataset
    auxiliary: Dataset
    provenance: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        def describe(ds: Dataset):
            return {
                "name": ds.name,
                "n_examples": len(ds),
                "n_features": ds.d,
                "n_classes": ds.n_classes,
                "split_sizes": {k: int(v.shape[0]) for k, v in ds.splits.items()},
                "provenance": ds.provenance,
                "content_hash": dataset_hash(ds),
            }
        return {"provenance": self.provenance, "primary": describe(self.primary),
                "auxiliary": describe(self.auxiliary)}


def write_manifest(pair: TaskPair, path) -> None:
    Path(path).write_text(json.dumps(pair.manifest(), indent=2, sort_keys=True))


def dataset_hash(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.features, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class ConflictSpec:
    shared_feature_dim: int = 32
    helpful_fraction: float = 0.25
    conflicting_fraction: float = 0.4
    noise_scale: float = 1.0
    n_primary: int = 3000
    n_aux: int = 3000
    signal: float = 1.0
    primary_split: tuple[float, float, float] = (0.4, 0.1, 0.5)
    aux_split: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def validate(self) -> None:
        if self.shared_feature_dim < 1:
            raise SpecInvalid("shared_feature_dim must be >= 1")
        for name in ("helpful_fraction", "conflicting_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SpecInvalid(f"{name} must lie in [0, 1]")
        if self.helpful_fraction + self.conflicting_fraction > 1.0 + 1e-12:
            raise SpecInvalid("helpful_fraction + conflicting_fraction must be <= 1")
        if self.noise_scale <= 0 or self.signal < 0:
            raise SpecInvalid("noise_scale must be > 0 and signal >= 0")
        for split in (self.primary_split, self.aux_split):
            if len(split) != 3 or min(split) < 0 or abs(sum(split) - 1.0) > 1e-9:
                raise SpecInvalid("split fractions must be three non-negative numbers summing to 1")
        if self.n_primary < 10 or self.n_aux < 10:
            raise SpecInvalid("need at least 10 examples per task")

    def blocks(self) -> tuple[slice, slice, slice]:
        d = self.shared_feature_dim
        n_help = int(round(self.helpful_fraction * d))
        n_conf = min(int(round(self.conflicting_fraction * d)), d - n_help)
        return slice(0, n_help), slice(n_help, n_help + n_conf), slice(n_help + n_conf, d)


def _balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % n_classes)


def _unit(v: np.ndarray) -> np.ndarray:
    nrm = np.linalg.norm(v)
    return v / nrm if nrm > 0 else v


def split_indices(n: int, fractions: Sequence[float], rng: np.random.Generator,
                  labels: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Disjoint train/val/test index sets covering ``range(n)``.

    With ``labels`` the split is stratified per class.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    groups = [np.arange(n)] if labels is None else [np.flatnonzero(labels == c) for c in np.unique(labels)]
    out = {s: [] for s in SPLITS}
    for g in groups:
        g = rng.permutation(g)
        n_train = int(round(fractions[0] * g.size))
        n_val = int(round(fractions[1] * g.size))
        n_val = min(n_val, g.size - n_train)
        out["train"].append(g[:n_train])
        out["val"].append(g[n_train:n_train + n_val])
        out["test"].append(g[n_train + n_val:])
    return {s: np.sort(np.concatenate(v)) for s, v in out.items()}


def generate_conflict_pair(spec: ConflictSpec, seed: int) -> TaskPair:
    """Two binary Gaussian-mixture tasks with aligned and anti-aligned feature blocks."""
    spec.validate()
    rng = substream(seed, "data")
    d = spec.shared_feature_dim
    help_blk, conf_blk, _ = spec.blocks()

    # One unit-norm class-mean direction over the informative dims, so each
    # block's share of the separation energy follows its share of dims.
    direction = np.zeros(d)
    informative = slice(help_blk.start, conf_blk.stop)
    direction[informative] = _unit(rng.standard_normal(conf_blk.stop - help_blk.start))
    flipped = direction.copy()
    flipped[conf_blk] *= -1.0

    def draw(n: int, mean_dir: np.ndarray):
        y = _balanced_labels(n, 2, rng)
        s = 2.0 * y - 1.0
        x = spec.noise_scale * rng.standard_normal((n, d))
        x += spec.signal * s[:, None] * mean_dir[None, :]
        return x, y

    xp, yp = draw(spec.n_primary, direction)
    xa, ya = draw(spec.n_aux, flipped)
    prov = {"generator": "conflict_pair", "seed": int(seed), "spec": asdict(spec)}
    primary = Dataset(xp, yp, 2, split_indices(len(yp), spec.primary_split, rng, yp), "primary",
                      dict(prov, task="primary"))
    auxiliary = Dataset(xa, ya, 2, split_indices(len(ya), spec.aux_split, rng, ya), "auxiliary",
                        dict(prov, task="auxiliary"))
    return TaskPair(primary, auxiliary, prov)


def subsample_low_resource(ds: Dataset, per_class: int, seed: int, split: str = "train") -> Dataset:
    """Keep ``per_class`` examples of each class in ``split`` (stratified, no replacement).

    Dropped examples are removed from the dataset entirely so the splits keep
    covering every index.
    """
    if per_class < 1:
        raise InsufficientExamples("per_class must be >= 1")
    rng = substream(seed, "subsample")
    rows = ds.splits[split]
    keep = []
    for c in range(ds.n_classes):
        members = rows[ds.labels[rows] == c]
        if members.size < per_class:
            raise InsufficientExamples(f"class {c} has {members.size} < {per_class} examples in {split}")
        keep.append(rng.choice(members, size=per_class, replace=False))
    chosen = rng.permutation(np.concatenate(keep))
    others = [s for s in ds.splits if s != split]
    new_order = np.concatenate([chosen] + [ds.splits[s] for s in others])
    sizes = [chosen.size] + [ds.splits[s].size for s in others]
    bounds = np.cumsum([0] + sizes)
    splits = {name: np.arange(bounds[i], bounds[i + 1])
              for i, name in enumerate([split] + others)}
    prov = dict(ds.provenance, subsample={"split": split, "per_class": int(per_class), "seed": int(seed)})
    return Dataset(ds.features[new_order], ds.labels[new_order], ds.n_classes, splits, ds.name,
                   prov, ds.label_names)


def low_resource_pair(pair: TaskPair, per_class: int, seed: int) -> TaskPair:
    primary = subsample_low_resource(pair.primary, per_class, seed)
    return TaskPair(primary, pair.auxiliary, dict(pair.provenance, per_class=int(per_class)))


# -- CSV ingestion -------------------------------------------------------------


def load_csv_task(path, label_column: str, schema=None, *, split=(0.6, 0.2, 0.2), seed: int = 0,
                  standardize: bool = True, name: str | None = None) -> Dataset:
    """Read a header-row CSV into a :class:`Dataset`.

    ``schema`` lists the numeric feature columns (``None``: every column but the
    label).  Labels may be arbitrary strings and are mapped to class indices in
    sorted order.  Features are standardized with statistics of the train split.
    """
    path = Path(path)
    raw = path.read_bytes()
    text = raw.decode("utf-8-sig")
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file (header row required)", 1) from None
    header = [h.strip() for h in header]
    if label_column not in header:
        raise SchemaMismatch(f"label column {label_column!r} not in header {header}")
    if isinstance(schema, dict):
        schema = schema.get("features")
    features = [h for h in header if h != label_column] if schema is None else list(schema)
    missing = [c for c in features if c not in header]
    if missing:
        raise SchemaMismatch(f"feature columns {missing} not in header")
    if not features:
        raise SchemaMismatch("no feature columns")
    col = {h: i for i, h in enumerate(header)}
    rows, labels = [], []
    for line_no, record in enumerate(reader, start=2):
        if not record or all(not c.strip() for c in record):
            continue
        if len(record) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(record)}", line_no)
        values = []
        for c in features:
            cell = record[col[c]].strip()
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"column {c!r}: non-numeric value {cell!r}", line_no) from None
            if not np.isfinite(v):
                raise ParseError(f"column {c!r}: non-finite value {cell!r}", line_no)
            values.append(v)
        rows.append(values)
        labels.append(record[col[label_column]].strip())
    if not rows:
        raise ParseError("no data rows", 2)
    try:
        label_names = sorted(set(labels), key=int)
    except ValueError:
        label_names = sorted(set(labels))
    index = {lab: i for i, lab in enumerate(label_names)}
    y = np.array([index[lab] for lab in labels], dtype=np.int64)
    x = np.array(rows, dtype=np.float64)
    splits = split_indices(len(y), split, substream(seed, "split"))
    if standardize:
        x = standardize_features(x, splits["train"])
    prov = {"path": str(path), "sha256": hashlib.sha256(raw).hexdigest(), "label_column": label_column,
            "features": features, "split": list(split), "seed": int(seed)}
    return Dataset(x, y, max(len(label_names), 2), splits, name or path.stem, prov, label_names)


def standardize_features(x: np.ndarray, train_idx: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance scaling with statistics from ``train_idx`` only."""
    ref = x[train_idx] if train_idx.size else x
    mean = ref.mean(axis=0)
    std = ref.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (x - mean) / std


def verify_content_hash(path, expected_sha256: str) -> None:
    actual = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    if actual != expected_sha256:
        raise SchemaMismatch(f"content hash mismatch for {path}: {actual} != {expected_sha256}")


def write_csv_task(ds: Dataset, path, label_column: str = "label", feature_names=None) -> None:
    """Write features and labels; floats use ``repr`` so they round-trip exactly."""
    names = feature_names or [f"x{i}" for i in range(ds.d)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(names) + [label_column])
        for row, lab in zip(ds.features, ds.labels):
            label = ds.label_names[lab] if ds.label_names else int(lab)
            w.writerow([repr(float(v)) for v in row] + [label])
