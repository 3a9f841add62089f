"""Normal-histogram and threshold calibration from benign sample sequences."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .hardness import HardnessError, normalize, pearson_distances
from .rng import stream
from .snapshots import PredictionMatrix, SubclassifierSequence

CALIBRATION_FORMAT = "hardness-guard-calibration"
CALIBRATION_VERSION = 1


@dataclass(frozen=True)
class CalibrationConfig:
    num_s: int = 100
    num_seq: int = 5000
    quantile: float = 1.0
    seed: int = 20240917

    def __post_init__(self):
        problems = []
        if self.num_s < 1:
            problems.append("num_s must be positive")
        if self.num_seq < 1:
            problems.append("num_seq must be positive")
        if not 0.0 < self.quantile <= 1.0:
            problems.append("quantile must lie in (0, 1]")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NormalHistogram:
    """Real-valued average of benign sequence histograms."""

    bins: np.ndarray

    def __post_init__(self):
        bins = np.array(self.bins, dtype=np.float64)
        if bins.ndim != 1 or bins.size == 0 or (bins < 0).any():
            raise ValueError("normal histogram bins must be a non-empty non-negative vector")
        bins.setflags(write=False)
        object.__setattr__(self, "bins", bins)

    @property
    def num_bins(self) -> int:
        return int(self.bins.size)

    def probabilities(self) -> np.ndarray:
        return normalize(self.bins)


@dataclass
class CalibrationResult:
    normal: NormalHistogram
    delta: float
    config: CalibrationConfig
    distance_samples: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sequence: SubclassifierSequence | None = None

    @property
    def num_bins(self) -> int:
        return self.normal.num_bins

    @property
    def num_s(self) -> int:
        return self.config.num_s

    def with_delta(self, delta: float) -> "CalibrationResult":
        return CalibrationResult(self.normal, float(delta), self.config, self.distance_samples, self.sequence)

    def to_json(self) -> str:
        doc = {
            "format": CALIBRATION_FORMAT,
            "version": CALIBRATION_VERSION,
            "num_bins": self.num_bins,
            "normal_bins": [float(v) for v in self.normal.bins],
            "delta": float(self.delta),
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "sequence": self.sequence.to_dict() if self.sequence else None,
            "distance_samples": [float(v) for v in self.distance_samples],
        }
        # json writes floats with repr(): round-trips exactly
        return json.dumps(doc, indent=1)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def from_json(cls, text: str) -> "CalibrationResult":
        doc = json.loads(text)
        if doc.get("format") != CALIBRATION_FORMAT or doc.get("version") != CALIBRATION_VERSION:
            raise ValueError(f"unsupported calibration file (format={doc.get('format')}, version={doc.get('version')})")
        normal = NormalHistogram(np.array(doc["normal_bins"], dtype=np.float64))
        if normal.num_bins != doc["num_bins"]:
            raise ValueError("calibration file: num_bins disagrees with the bin vector")
        seq = doc.get("sequence")
        return cls(
            normal,
            float(doc["delta"]),
            CalibrationConfig(**doc["config"]),
            np.array(doc.get("distance_samples", []), dtype=np.float64),
            SubclassifierSequence(tuple(seq["indices"]), seq["name"]) if seq else None,
        )

    @classmethod
    def load(cls, path) -> "CalibrationResult":
        with open(path) as fh:
            return cls.from_json(fh.read())


def draw_sequences(pool_size: int, num_s: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` rows of ``num_s`` distinct pool indices; rows are independent."""
    if num_s > pool_size:
        raise ValueError(f"num_s={num_s} exceeds the pool size {pool_size}")
    out = np.empty((count, num_s), dtype=np.int64)
    for i in range(count):
        out[i] = rng.choice(pool_size, size=num_s, replace=False)
    return out


def sequence_histograms(degrees: np.ndarray, index_rows: np.ndarray, num_bins: int) -> np.ndarray:
    """Count matrix ``(rows, num_bins)``: one hardness histogram per index row."""
    d = np.asarray(degrees, dtype=np.int64)[index_rows]
    rows = d.shape[0]
    flat = (np.arange(rows)[:, None] * num_bins + d).ravel()
    return np.bincount(flat, minlength=rows * num_bins).reshape(rows, num_bins)


def distances_to_normal(counts: np.ndarray, normal: NormalHistogram) -> np.ndarray:
    """Pearson distance of each count histogram to the normal histogram."""
    counts = np.atleast_2d(counts)
    if counts.shape[1] != normal.num_bins:
        raise HardnessError(f"bin-count mismatch: {counts.shape[1]} vs {normal.num_bins}")
    return pearson_distances(normalize(counts.astype(np.float64)), normal.probabilities())


def calibrate(matrix: PredictionMatrix, cfg: CalibrationConfig) -> CalibrationResult:
    """Average benign histogram and the distance threshold.

    Draws ``num_seq`` sequences of ``num_s`` distinct samples from the pool,
    histograms each, averages them into the normal histogram and takes the
    ``quantile`` of the sequences' distances to it as the threshold (the
    maximum at ``quantile=1``).
    """
    if len(matrix) == 0:
        raise ValueError("calibration pool is empty")
    degrees = matrix.degrees()
    rng = stream(cfg.seed, "calibration")
    rows = draw_sequences(len(matrix), cfg.num_s, cfg.num_seq, rng)
    counts = sequence_histograms(degrees, rows, matrix.num_bins)
    normal = NormalHistogram(counts.mean(axis=0))
    dists = distances_to_normal(counts, normal)
    delta = float(np.quantile(dists, cfg.quantile, method="higher"))
    return CalibrationResult(normal, delta, cfg, dists, matrix.sequence)


def fpr_estimate(result: CalibrationResult, heldout: PredictionMatrix, trials: int, seed: int) -> float:
    """Fraction of fresh benign sequences from ``heldout`` whose distance exceeds the threshold."""
    if trials < 1:
        raise ValueError("trials must be positive")
    rows = draw_sequences(len(heldout), result.num_s, trials, stream(seed, "fpr-estimate"))
    counts = sequence_histograms(heldout.degrees(), rows, result.num_bins)
    return float(np.mean(distances_to_normal(counts, result.normal) > result.delta))
