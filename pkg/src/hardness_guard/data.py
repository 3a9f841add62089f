"""Synthetic Gaussian-cluster classification data and sample pools."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .rng import stream

ROLES = ("train", "test", "hoda_calibration", "user_simulation", "attack_seed")


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_classes: int = 5
    dim: int = 8
    samples_per_class: int = 400
    cluster_spread: float = 1.0
    cluster_separation: float = 3.0
    label_noise: float = 0.0
    seed: int = 20240917

    def __post_init__(self):
        problems = []
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if self.dim < 2:
            problems.append("dim must be >= 2")
        if self.samples_per_class < 1:
            problems.append("samples_per_class must be positive")
        if not self.cluster_spread > 0:
            problems.append("cluster_spread must be positive")
        if not self.cluster_separation > 0:
            problems.append("cluster_separation must be positive")
        if not 0.0 <= self.label_noise < 1.0:
            problems.append("label_noise must lie in [0, 1)")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    def class_means(self) -> np.ndarray:
        """Cluster centres; directions are random unit vectors scaled by the separation."""
        rng = stream(self.seed, "dataset-means")
        u = rng.standard_normal((self.num_classes, self.dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return self.cluster_separation * u

    def sample(self, n_per_class: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n_per_class`` points per class from the mixture."""
        means = self.class_means()
        y = np.repeat(np.arange(self.num_classes), n_per_class)
        X = means[y] + self.cluster_spread * rng.standard_normal((y.size, self.dim))
        order = rng.permutation(y.size)
        return X[order], y[order]


@dataclass
class SamplePool:
    """Labelled feature vectors with stable integer ids."""

    X: np.ndarray
    y: np.ndarray
    role: str
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.y), dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.role not in ROLES:
            raise ValueError(f"unknown pool role {self.role!r}")
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0] != self.ids.shape[0]:
            raise ValueError("pool arrays disagree in length")

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def dim(self) -> int:
        return int(self.X.shape[1])

    def subset(self, index, role: str) -> "SamplePool":
        index = np.asarray(index, dtype=np.int64)
        return SamplePool(self.X[index], self.y[index], role, self.ids[index])

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "label"] + [f"x{j}" for j in range(self.dim)])
            for i in range(len(self)):
                w.writerow([int(self.ids[i]), int(self.y[i])] + [repr(float(v)) for v in self.X[i]])

    @classmethod
    def load_csv(cls, path, role: str) -> "SamplePool":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[:2] != ["sample_id", "label"]:
            raise ValueError(f"{path}: not a sample pool file")
        dim = len(header) - 2
        ids = np.array([int(r[0]) for r in body], dtype=np.int64)
        y = np.array([int(r[1]) for r in body], dtype=np.int64)
        X = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(-1, dim)
        return cls(X, y, role, ids)


def generate_dataset(spec: SyntheticDatasetSpec) -> tuple[SamplePool, SamplePool]:
    """Disjoint train and test draws of ``samples_per_class`` points per class each.

    With ``label_noise > 0`` that fraction of training labels is replaced by a
    different, uniformly chosen class; test labels are always clean.
    """
    Xtr, ytr = spec.sample(spec.samples_per_class, stream(spec.seed, "dataset-train"))
    if spec.label_noise:
        rng = stream(spec.seed, "dataset-label-noise")
        flip = rng.random(ytr.size) < spec.label_noise
        shift = rng.integers(1, spec.num_classes, size=ytr.size)
        ytr = np.where(flip, (ytr + shift) % spec.num_classes, ytr)
    Xte, yte = spec.sample(spec.samples_per_class, stream(spec.seed, "dataset-test"))
    n = len(ytr)
    train = SamplePool(Xtr, ytr, "train", np.arange(n))
    test = SamplePool(Xte, yte, "test", np.arange(n, n + len(yte)))
    return train, test


def split_test_pool(
    test: SamplePool,
    seed: int,
    calibration_fraction: float = 0.4,
    attack_seed_per_class: int = 20,
) -> tuple[SamplePool, SamplePool, SamplePool]:
    """Partition a test pool into calibration, benign-user and attack-seed pools.

    The calibration share is taken first; the attack seed samples are then
    carved out of the remaining user share, class-balanced, so the three index
    sets are disjoint.
    """
    if not 0 < calibration_fraction < 1:
        raise ValueError("calibration_fraction must be in (0, 1)")
    rng = stream(seed, "pool-split")
    order = rng.permutation(len(test))
    n_cal = int(round(calibration_fraction * len(test)))
    cal_idx, user_idx = order[:n_cal], order[n_cal:]
    seed_idx = []
    for c in np.unique(test.y):
        members = user_idx[test.y[user_idx] == c]
        seed_idx.extend(members[:attack_seed_per_class].tolist())
    seed_idx = np.sort(np.array(seed_idx, dtype=np.int64))
    user_idx = np.setdiff1d(user_idx, seed_idx)
    return (
        test.subset(np.sort(cal_idx), "hoda_calibration"),
        test.subset(user_idx, "user_simulation"),
        test.subset(seed_idx, "attack_seed"),
    )
