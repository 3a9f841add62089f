"""Training with per-epoch parameter snapshots and snapshot prediction matrices."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model as nn
from .hardness import hardness_degrees
from .rng import stream

MODEL_FORMAT = "hardness-guard-snapshots"
MODEL_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    """SGD with momentum and a per-epoch multiplicative learning-rate decay."""

    epochs: int = 100
    learning_rate: float = 0.1
    lr_decay: float = 0.955
    momentum: float = 0.9
    batch_size: int = 128
    hidden: int = 32
    activation: str = "tanh"
    weight_decay: float = 0.0
    seed: int = 20240917

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.learning_rate <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError(f"invalid training config {self}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SnapshotModel:
    """A training run: one parameter vector per completed epoch."""

    arch: nn.Architecture
    snapshots: np.ndarray  # (m, num_params)
    config: TrainConfig
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.snapshots = np.asarray(self.snapshots, dtype=np.float64)
        if self.snapshots.ndim != 2 or self.snapshots.shape[0] < 1:
            raise ValueError("a snapshot model needs at least one snapshot")
        if self.snapshots.shape[1] != self.arch.num_params:
            raise ValueError("snapshot width does not match the architecture")

    @property
    def m(self) -> int:
        return int(self.snapshots.shape[0])

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    @property
    def dim(self) -> int:
        return self.arch.dim

    def _theta(self, epoch: int) -> np.ndarray:
        if not -self.m <= epoch < self.m:
            raise IndexError(f"epoch {epoch} out of range for {self.m} snapshots")
        return self.snapshots[epoch]

    def logits(self, X, epoch: int = -1) -> np.ndarray:
        return nn.logits(self.arch, self._theta(epoch), X)

    def proba(self, X, epoch: int = -1) -> np.ndarray:
        return nn.softmax(self.logits(X, epoch))

    def predict(self, X, epoch: int = -1) -> np.ndarray:
        return nn.predict(self.arch, self._theta(epoch), X)

    def loss(self, X, targets, epoch: int = -1) -> float:
        return nn.cross_entropy(self.arch, self._theta(epoch), np.asarray(X, float), _as_targets(targets, self.num_classes))

    def save(self, path) -> None:
        manifest = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "m": self.m,
            "architecture": self.arch.to_dict(),
            "train_config": self.config.to_dict(),
        }
        with open(path, "wb") as fh:
            np.savez(fh, snapshots=self.snapshots, losses=self.losses, manifest=np.array(json.dumps(manifest, sort_keys=True)))

    @classmethod
    def load(cls, path) -> "SnapshotModel":
        with np.load(path, allow_pickle=False) as z:
            manifest = json.loads(str(z["manifest"]))
            if manifest.get("format") != MODEL_FORMAT or manifest.get("version") != MODEL_VERSION:
                raise ValueError(f"{path}: unsupported model file (format={manifest.get('format')}, version={manifest.get('version')})")
            model = cls(
                nn.Architecture(**manifest["architecture"]),
                z["snapshots"],
                TrainConfig(**manifest["train_config"]),
                z["losses"],
            )
        if model.m != manifest["m"]:
            raise ValueError(f"{path}: manifest says m={manifest['m']}, file holds {model.m}")
        return model


def _as_targets(targets, num_classes: int) -> np.ndarray:
    t = np.asarray(targets)
    if t.ndim == 1:
        if (t < 0).any() or (t >= num_classes).any():
            raise ValueError("label out of range")
        out = np.zeros((t.size, num_classes))
        out[np.arange(t.size), t.astype(np.int64)] = 1.0
        return out
    if t.ndim != 2 or t.shape[1] != num_classes:
        raise ValueError(f"soft targets must have shape (n, {num_classes})")
    return t.astype(np.float64)


def fit(
    X,
    targets,
    num_classes: int,
    config: TrainConfig,
    seed_stream: str = "train",
) -> SnapshotModel:
    """Train from scratch on hard labels (1-D) or probability targets (2-D).

    A snapshot of the parameters is kept at the end of every epoch; the
    learning rate for epoch ``e`` is ``learning_rate * lr_decay**e``.
    """
    X = np.asarray(X, dtype=np.float64)
    T = _as_targets(targets, num_classes)
    n = X.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty sample set")
    arch = nn.Architecture(X.shape[1], num_classes, config.hidden, config.activation)
    theta = arch.init(stream(config.seed, seed_stream + "-init"))
    shuffle = stream(config.seed, seed_stream + "-shuffle")
    # overflow is caught below as divergence; no need for numpy to warn as well
    with np.errstate(over="ignore", invalid="ignore"):
        return _run_epochs(arch, theta, X, T, config, shuffle)


def _run_epochs(arch, theta, X, T, config: TrainConfig, shuffle) -> SnapshotModel:
    n = X.shape[0]
    velocity = np.zeros_like(theta)
    snaps = np.empty((config.epochs, arch.num_params))
    losses = np.empty(config.epochs)
    for epoch in range(config.epochs):
        lr = config.learning_rate * config.lr_decay**epoch
        order = shuffle.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            _, grad = nn.loss_and_grad(arch, theta, X[idx], T[idx])
            if config.weight_decay:
                grad = grad + config.weight_decay * theta
            velocity = config.momentum * velocity - lr * grad
            theta = theta + velocity
        loss = nn.cross_entropy(arch, theta, X, T)
        if not (math.isfinite(loss) and np.isfinite(theta).all()):
            raise TrainingDiverged(epoch, loss)
        snaps[epoch] = theta
        losses[epoch] = loss
    return SnapshotModel(arch, snaps, config, losses)


def train_with_snapshots(train, config: TrainConfig, m: int | None = None, num_classes: int | None = None) -> SnapshotModel:
    """Train the target classifier on a labelled pool, keeping ``m`` epoch snapshots."""
    if m is not None and m != config.epochs:
        config = TrainConfig(**{**config.to_dict(), "epochs": m})
    k = num_classes if num_classes is not None else int(train.y.max()) + 1
    return fit(train.X, train.y, max(k, 2), config)


@dataclass(frozen=True)
class SubclassifierSequence:
    """Ordered epoch indices whose snapshots vote on a sample's hardness."""

    indices: tuple[int, ...]
    name: str = "custom"

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise ValueError("subclassifier sequence is empty")
        if idx[0] < 0 or any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"indices must be strictly increasing and non-negative: {idx}")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)

    def check(self, m: int) -> None:
        if self.indices[-1] >= m:
            raise ValueError(f"sequence {self.name!r} needs epoch {self.indices[-1]} but the model has {m}")

    def to_dict(self) -> dict:
        return {"name": self.name, "indices": list(self.indices)}

    @classmethod
    def full(cls, m: int) -> "SubclassifierSequence":
        return cls(tuple(range(m)), "full")

    @classmethod
    def evenly_spaced(cls, m: int, count: int, include_first: bool, name: str | None = None) -> "SubclassifierSequence":
        """Snapshots at the end of every ``m/count`` epochs, optionally plus epoch 0.

        For ``m=100``: ``count=10, include_first=True`` gives 0, 9, 19, ..., 99
        and ``count=5, include_first=False`` gives 19, 39, 59, 79, 99.
        """
        idx = {math.ceil(k * m / count) - 1 for k in range(1, count + 1)}
        if include_first:
            idx.add(0)
        idx = sorted(i for i in idx if i >= 0)
        return cls(tuple(idx), name or f"{len(idx)}-snapshot")

    @classmethod
    def sparse11(cls, m: int) -> "SubclassifierSequence":
        return cls.evenly_spaced(m, 10, True, "sub11")

    @classmethod
    def late5(cls, m: int) -> "SubclassifierSequence":
        return cls.evenly_spaced(m, 5, False, "sub5")


def named_sequence(name: str, m: int) -> SubclassifierSequence:
    builders = {"full": SubclassifierSequence.full, "sub11": SubclassifierSequence.sparse11, "sub5": SubclassifierSequence.late5}
    if name not in builders:
        raise ValueError(f"unknown sequence {name!r}; expected one of {sorted(builders)}")
    return builders[name](m)


@dataclass
class PredictionMatrix:
    """Predicted labels of each sample under each snapshot of a sequence."""

    sample_ids: np.ndarray
    labels: np.ndarray  # (num_samples, len(sequence))
    sequence: SubclassifierSequence

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1, len(self.sequence))
        if self.labels.shape[0] != self.sample_ids.shape[0]:
            raise ValueError("row count does not match sample ids")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_bins(self) -> int:
        return len(self.sequence)

    def degrees(self) -> np.ndarray:
        return hardness_degrees(self.labels) if len(self) else np.zeros(0, dtype=np.int64)

    def final_labels(self) -> np.ndarray:
        return self.labels[:, -1]

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id"] + [f"e{i}" for i in self.sequence.indices])
            for sid, row in zip(self.sample_ids, self.labels):
                w.writerow([int(sid)] + [int(v) for v in row])

    @classmethod
    def load_csv(cls, path, name: str = "custom") -> "PredictionMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        if header[0] != "sample_id" or not all(h.startswith("e") for h in header[1:]):
            raise ValueError(f"{path}: not a prediction matrix file")
        seq = SubclassifierSequence(tuple(int(h[1:]) for h in header[1:]), name)
        body = rows[1:]
        ids = [int(r[0]) for r in body]
        labels = np.array([[int(v) for v in r[1:]] for r in body], dtype=np.int64).reshape(-1, len(seq))
        return cls(np.array(ids, dtype=np.int64), labels, seq)


def predict_matrix(model: SnapshotModel, seq: SubclassifierSequence, X, sample_ids=None) -> PredictionMatrix:
    """Labels of every row of ``X`` under each snapshot in ``seq`` (argmax, ties to lowest class)."""
    seq.check(model.m)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1 and X.size == 0:
        X = X.reshape(0, model.dim)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ValueError(f"expected features of dimension {model.dim}, got shape {X.shape}")
    ids = np.arange(X.shape[0]) if sample_ids is None else np.asarray(sample_ids)
    labels = np.empty((X.shape[0], len(seq)), dtype=np.int64)
    for k, epoch in enumerate(seq.indices):
        labels[:, k] = model.predict(X, epoch)
    return PredictionMatrix(ids, labels, seq)


def gradient_wrt_input(model: SnapshotModel, epoch: int, x, cls) -> np.ndarray:
    """Gradient of the cross-entropy toward class ``cls`` with respect to the input.

    Ascending this gradient makes ``cls`` less likely under the snapshot.
    """
    x = np.asarray(x, dtype=np.float64)
    g = nn.input_gradient(model.arch, model._theta(epoch), x, cls)
    return g[0] if x.ndim == 1 else g
