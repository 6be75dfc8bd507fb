"""Shared-trunk MLP classifier with hand-written reverse-mode gradients.

All parameters live in one flat ``float64`` vector; ``layout`` records the
``(name, shape, offset)`` of every tensor so layer-level masks and checkpoints
can be expressed against the flat coordinates.

The backward pass is written for a *matrix* of example weights ``W (k x m)``:
it returns the ``k`` gradients of ``sum_i W[r, i] * loss_i`` in one sweep.
``k = 1`` with uniform weights is the ordinary mean-loss gradient, and sketch
rows give ``Pi @ J`` without ever forming the per-example Jacobian ``J``.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, JacobianTooLarge, NonFiniteActivation
from .rng import generator

TASKS = ("primary", "auxiliary")
ACTIVATIONS = ("tanh", "relu")
JACOBIAN_CAP = 256


@dataclass(frozen=True)
class LayerSpec:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    task: str = "primary"

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.inputs.shape[0] < 1 or self.inputs.shape[0] != self.labels.shape[0]:
            raise DimensionMismatch("inputs and labels must have the same number (>= 1) of rows")

    def __len__(self):
        return self.labels.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx], self.task)


@dataclass
class MlpModel:
    """``d_in -> hidden... -> {primary head, auxiliary head}``.

    The trunk (every hidden layer) is shared; each head is a single linear
    layer reading the last hidden representation.
    """

    d_in: int
    hidden: tuple[int, ...]
    n_classes: dict[str, int]
    activation: str = "tanh"
    dropout: float = 0.0
    params: np.ndarray = field(default=None, repr=False)
    layout: list[LayerSpec] = field(default=None, repr=False)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.layout is None:
            self.layout = _build_layout(self.d_in, self.hidden, self.n_classes)
        dim = sum(spec.size for spec in self.layout)
        if self.params is None:
            self.params = np.zeros(dim)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (dim,):
            raise DimensionMismatch(f"parameter vector must have length {dim}")

    @classmethod
    def create(cls, d_in, hidden, n_primary, n_auxiliary, activation="tanh", seed=0, dropout=0.0,
               tie_heads=False):
        model = cls(d_in, tuple(hidden), {"primary": int(n_primary), "auxiliary": int(n_auxiliary)},
                    activation, dropout)
        model.initialize(seed, tie_heads)
        return model

    def initialize(self, seed, tie_heads: bool = False) -> None:
        """Glorot-uniform weights, zero biases.

        With ``tie_heads`` and equal class counts the auxiliary head starts as a
        copy of the primary head, so class ``c`` of both tasks initially reads
        the trunk the same way.  The heads remain separate parameters.
        """
        rng = seed if isinstance(seed, np.random.Generator) else generator(seed)
        for spec in self.layout:
            if spec.name.endswith(".W"):
                fan_in, fan_out = spec.shape
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                self.params[spec.slice] = rng.uniform(-bound, bound, size=spec.size)
            else:
                self.params[spec.slice] = 0.0
        if tie_heads and self.n_classes["primary"] == self.n_classes["auxiliary"]:
            self.tensor("head.auxiliary.W")[:] = self.tensor("head.primary.W")

    @property
    def dim(self) -> int:
        return self.params.shape[0]

    def copy(self) -> "MlpModel":
        return MlpModel(self.d_in, self.hidden, dict(self.n_classes), self.activation,
                        self.dropout, self.params.copy(), list(self.layout))

    def tensor(self, name: str) -> np.ndarray:
        spec = self._spec(name)
        return self.params[spec.slice].reshape(spec.shape)

    def _spec(self, name: str) -> LayerSpec:
        for spec in self.layout:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def layer_names(self) -> list[str]:
        """Layer prefixes, e.g. ``trunk.0`` or ``head.primary``."""
        out = []
        for spec in self.layout:
            prefix = spec.name.rsplit(".", 1)[0]
            if prefix not in out:
                out.append(prefix)
        return out

    def check_batch(self, batch: Batch) -> None:
        if batch.inputs.shape[1] != self.d_in:
            raise DimensionMismatch(f"inputs have {batch.inputs.shape[1]} features, model expects {self.d_in}")
        n = self.n_classes[batch.task]
        if batch.labels.min() < 0 or batch.labels.max() >= n:
            raise ValueError(f"labels out of range for {batch.task} head with {n} classes")

    # -- forward / backward -------------------------------------------------

    def _forward(self, x: np.ndarray, task: str, dropout_rng=None):
        acts = [x]
        pre = []
        masks = []
        h = x
        for i in range(len(self.hidden)):
            z = h @ self.tensor(f"trunk.{i}.W") + self.tensor(f"trunk.{i}.b")
            h = np.tanh(z) if self.activation == "tanh" else np.maximum(z, 0.0)
            if self.dropout > 0.0 and dropout_rng is not None:
                keep = (dropout_rng.random(h.shape) >= self.dropout) / (1.0 - self.dropout)
                h = h * keep
                masks.append(keep)
            else:
                masks.append(None)
            pre.append(z)
            acts.append(h)
        logits = h @ self.tensor(f"head.{task}.W") + self.tensor(f"head.{task}.b")
        if not np.all(np.isfinite(logits)):
            raise NonFiniteActivation("non-finite logits")
        return logits, acts, pre, masks

    def logits(self, inputs, task="primary") -> np.ndarray:
        return self._forward(np.asarray(inputs, dtype=np.float64), task)[0]

    def _backward(self, batch: Batch, weights: np.ndarray, dropout_rng=None):
        """Return (k, D) gradients of sum_i weights[r, i] * loss_i and per-example losses."""
        logits, acts, pre, masks = self._forward(batch.inputs, batch.task, dropout_rng)
        losses, probs = _cross_entropy(logits, batch.labels)
        k = weights.shape[0]
        out = np.zeros((k, self.dim))
        resid = probs
        resid[np.arange(len(batch)), batch.labels] -= 1.0
        delta = weights[:, :, None] * resid[None, :, :]  # (k, m, C)

        head = f"head.{batch.task}"
        h_last = acts[-1]
        out[:, self._spec(head + ".W").slice] = np.einsum("mi,kmc->kic", h_last, delta).reshape(k, -1)
        out[:, self._spec(head + ".b").slice] = delta.sum(axis=1)
        back = delta @ self.tensor(head + ".W").T  # (k, m, h_last)
        for i in reversed(range(len(self.hidden))):
            if masks[i] is not None:
                back = back * masks[i]
            if self.activation == "tanh":
                back = back * (1.0 - np.tanh(pre[i]) ** 2)
            else:
                back = back * (pre[i] > 0.0)
            out[:, self._spec(f"trunk.{i}.W").slice] = np.einsum("mi,kmh->kih", acts[i], back).reshape(k, -1)
            out[:, self._spec(f"trunk.{i}.b").slice] = back.sum(axis=1)
            if i > 0:
                back = back @ self.tensor(f"trunk.{i}.W").T
        return out, losses


def _build_layout(d_in, hidden, n_classes) -> list[LayerSpec]:
    shapes = []
    prev = d_in
    for i, h in enumerate(hidden):
        shapes += [(f"trunk.{i}.W", (prev, h)), (f"trunk.{i}.b", (h,))]
        prev = h
    for task in TASKS:
        shapes += [(f"head.{task}.W", (prev, n_classes[task])), (f"head.{task}.b", (n_classes[task],))]
    layout, offset = [], 0
    for name, shape in shapes:
        spec = LayerSpec(name, tuple(int(s) for s in shape), offset)
        layout.append(spec)
        offset += spec.size
    return layout


def _cross_entropy(logits: np.ndarray, labels: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logz[:, None]
    losses = -logp[np.arange(labels.shape[0]), labels]
    return losses, np.exp(logp)


# -- public API -------------------------------------------------------------


def loss(model: MlpModel, batch: Batch) -> float:
    """Mean cross-entropy of ``batch`` under the head for ``batch.task``."""
    model.check_batch(batch)
    logits = model.logits(batch.inputs, batch.task)
    losses, _ = _cross_entropy(logits, batch.labels)
    value = float(np.mean(losses))
    if not np.isfinite(value):
        raise NonFiniteActivation("non-finite loss")
    return value


def accuracy(model: MlpModel, batch: Batch) -> float:
    logits = model.logits(batch.inputs, batch.task)
    return float(np.mean(np.argmax(logits, axis=1) == batch.labels))


def weighted_batch_gradient(model: MlpModel, batch: Batch, weights, dropout_rng=None) -> np.ndarray:
    """Gradient of ``sum_i w_i * loss_i``, i.e. ``w^T J`` without forming ``J``.

    ``weights`` of shape ``(m,)`` gives one gradient; shape ``(k, m)`` gives the
    ``k`` rows of ``W @ J`` from a single forward/backward sweep.
    """
    model.check_batch(batch)
    w = np.asarray(weights, dtype=np.float64)
    single = w.ndim == 1
    w2 = w[None, :] if single else w
    if w2.ndim != 2 or w2.shape[1] != len(batch):
        raise DimensionMismatch(f"weights of shape {w.shape} do not match batch of {len(batch)}")
    grads, _ = model._backward(batch, w2, dropout_rng)
    return grads[0] if single else grads


def batch_gradient(model: MlpModel, batch: Batch, dropout_rng=None) -> np.ndarray:
    """Gradient of the mean loss over ``batch``."""
    m = len(batch)
    return weighted_batch_gradient(model, batch, np.full(m, 1.0 / m), dropout_rng)


def per_example_jacobian(model: MlpModel, batch: Batch, cap: int = JACOBIAN_CAP) -> np.ndarray:
    """``m x D`` matrix of per-example loss gradients, one backward pass per example."""
    model.check_batch(batch)
    m = len(batch)
    if m > cap:
        raise JacobianTooLarge(f"batch of {m} exceeds Jacobian cap {cap}")
    rows = np.empty((m, model.dim))
    one = np.ones((1, 1))
    for i in range(m):
        rows[i] = model._backward(batch.take(slice(i, i + 1)), one)[0][0]
    return rows


def layer_mask(model: MlpModel, layers: Sequence[str]) -> np.ndarray:
    """Boolean mask over the flat parameters selecting whole layers by prefix."""
    mask = np.zeros(model.dim, dtype=bool)
    known = set(model.layer_names())
    for name in layers:
        if name not in known:
            raise KeyError(f"unknown layer {name!r}; known: {sorted(known)}")
    for spec in model.layout:
        if spec.name.rsplit(".", 1)[0] in layers:
            mask[spec.slice] = True
    return mask


def trunk_mask(model: MlpModel) -> np.ndarray:
    return layer_mask(model, [n for n in model.layer_names() if n.startswith("trunk.")])


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_FORMAT = "auxgrad-mlp/1"


def save_checkpoint(model: MlpModel, path) -> None:
    """JSON container; parameter values are stored as base64 little-endian float64."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "d_in": model.d_in,
        "hidden": list(model.hidden),
        "n_classes": model.n_classes,
        "activation": model.activation,
        "dropout": model.dropout,
        "layout": [{"name": s.name, "shape": list(s.shape), "offset": s.offset} for s in model.layout],
        "values": base64.b64encode(model.params.astype("<f8").tobytes()).decode("ascii"),
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path) -> MlpModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    layout = [LayerSpec(d["name"], tuple(d["shape"]), d["offset"]) for d in doc["layout"]]
    values = np.frombuffer(base64.b64decode(doc["values"]), dtype="<f8").astype(np.float64)
    model = MlpModel(doc["d_in"], tuple(doc["hidden"]), dict(doc["n_classes"]), doc["activation"],
                     doc["dropout"], values, layout)
    if model.layout != _build_layout(model.d_in, model.hidden, model.n_classes):
        raise ValueError("checkpoint layout does not match its architecture")
    return model
