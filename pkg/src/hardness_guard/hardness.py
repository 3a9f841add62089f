"""Hardness degrees of label traces and Pearson distances between histograms.

A label trace is the sequence of labels predicted for one sample by the saved
epoch snapshots of a classifier, in training order. Its hardness degree is the
position at which the prediction settles for good: 0 means every snapshot
agreed, ``len(trace) - 1`` means the final snapshot still changed its mind.

Histograms of degrees are compared with the Pearson distance
``1 - corr(a, b)`` after normalising each histogram to a probability vector.
The correlation is undefined when a vector is constant (zero variance). This
module makes the distance total with a fixed convention:

* identical vectors are at distance 0;
* otherwise, if either vector has zero variance, the distance is 1.

The convention above is a choice, not a derived property.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "HardnessError",
    "HardnessHistogram",
    "hardness_degree",
    "hardness_degrees",
    "normalize",
    "pearson_distance",
    "pearson_distances",
    "histogram_distance",
]

# Distances outside [0, 2] by more than this indicate a bug, not rounding.
_RANGE_SLACK = 1e-9


class HardnessError(ValueError):
    """Invalid input to a hardness or distance computation."""


def hardness_degree(trace: Sequence[int]) -> int:
    """Convergence index of a label trace.

    Walks the trace once and remembers the last index at which the label
    differed from its predecessor. The label before index 0 is taken to be
    "none", so index 0 always counts as a change.

    >>> hardness_degree([2, 5, 5, 5, 5])
    1
    >>> hardness_degree([1, 1, 2, 1, 1])
    3
    """
    if len(trace) == 0:
        raise HardnessError("empty label trace")
    degree = 0
    label = None
    for i, pred in enumerate(trace):
        if pred != label:
            degree = i
            label = pred
    return degree


def hardness_degrees(labels: np.ndarray) -> np.ndarray:
    """Row-wise :func:`hardness_degree` for a ``(num_samples, num_snapshots)`` label array."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise HardnessError(f"expected a 2-D label array, got shape {labels.shape}")
    n, width = labels.shape
    if width == 0:
        raise HardnessError("empty label trace")
    if width == 1 or n == 0:
        return np.zeros(n, dtype=np.int64)
    changed = labels[:, 1:] != labels[:, :-1]
    # position of the last True per row, counted from the right
    from_right = np.argmax(changed[:, ::-1], axis=1)
    degrees = width - 1 - from_right
    return np.where(changed.any(axis=1), degrees, 0).astype(np.int64)


@dataclass(frozen=True)
class HardnessHistogram:
    """Integer counts of hardness degrees, one bin per possible degree."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size == 0:
            raise HardnessError("histogram needs a non-empty 1-D count vector")
        if (counts < 0).any():
            raise HardnessError("histogram counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def empty(cls, num_bins: int) -> "HardnessHistogram":
        if num_bins < 1:
            raise HardnessError("num_bins must be positive")
        return cls(np.zeros(num_bins, dtype=np.int64))

    @classmethod
    def from_degrees(cls, degrees, num_bins: int) -> "HardnessHistogram":
        degrees = np.asarray(degrees, dtype=np.int64)
        if degrees.size and (degrees.min() < 0 or degrees.max() >= num_bins):
            raise HardnessError(f"degree out of range for {num_bins} bins")
        return cls(np.bincount(degrees, minlength=num_bins))

    @property
    def num_bins(self) -> int:
        return int(self.counts.size)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add(self, degree: int) -> "HardnessHistogram":
        """Return a copy with one more sample of the given degree."""
        if not 0 <= degree < self.num_bins:
            raise HardnessError(f"degree {degree} out of range for {self.num_bins} bins")
        counts = self.counts.copy()
        counts[degree] += 1
        return HardnessHistogram(counts)

    def __eq__(self, other):
        if not isinstance(other, HardnessHistogram):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)

    def __hash__(self):
        return hash(self.counts.tobytes())


def _bins(h) -> np.ndarray:
    if isinstance(h, HardnessHistogram):
        return h.counts.astype(np.float64)
    bins = getattr(h, "bins", h)
    return np.asarray(bins, dtype=np.float64)


def normalize(h) -> np.ndarray:
    """Divide histogram bins by their total.

    Accepts a :class:`HardnessHistogram`, anything with a ``bins`` attribute
    (real-valued averaged histograms), or a plain 1-D/2-D array. 2-D input is
    normalised row by row.
    """
    arr = _bins(h)
    total = arr.sum(axis=-1, keepdims=True)
    if (total <= 0).any():
        raise HardnessError("empty histogram")
    return arr / total


def _distances(rows: np.ndarray, ref: np.ndarray) -> np.ndarray:
    # population statistics; one code path for single and batched calls so
    # that calibration and online monitoring produce bit-identical values
    mr = rows.mean(axis=1, keepdims=True)
    mf = ref.mean()
    dr = rows - mr
    df = ref - mf
    cov = (dr * df).mean(axis=1)
    sr = np.sqrt((dr * dr).mean(axis=1))
    sf = np.sqrt((df * df).mean())
    equal = (rows == ref).all(axis=1)
    flat = (np.ptp(rows, axis=1) == 0) | (np.ptp(ref) == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = 1.0 - cov / (sr * sf)
    dist = np.where(flat, 1.0, dist)
    dist = np.where(equal, 0.0, dist)
    if ((dist < -_RANGE_SLACK) | (dist > 2.0 + _RANGE_SLACK)).any() or not np.isfinite(dist).all():
        raise ArithmeticError("Pearson distance left [0, 2]; internal inconsistency")
    return np.clip(dist, 0.0, 2.0)


def pearson_distances(rows, ref) -> np.ndarray:
    """Pearson distance of every row of ``rows`` to the vector ``ref``."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    ref = np.asarray(ref, dtype=np.float64)
    if ref.ndim != 1 or rows.shape[1] != ref.size:
        raise HardnessError(f"length mismatch: {rows.shape[1]} vs {ref.size}")
    if ref.size < 1:
        raise HardnessError("Pearson distance needs at least one bin")
    # a single bin is always constant: the zero-variance rule decides
    return _distances(rows, ref)


def pearson_distance(a, b) -> float:
    """``1 - cov(a, b) / (std(a) * std(b))`` clamped to ``[0, 2]``.

    Bins are treated as paired observations. See the module docstring for
    the zero-variance convention.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.size != b.size:
        raise HardnessError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(pearson_distances(a[None, :], b)[0])


def histogram_distance(user, normal) -> float:
    """Pearson distance between the normalised user and normal histograms."""
    u = _bins(user)
    n = _bins(normal)
    if u.shape != n.shape:
        raise HardnessError(f"bin-count mismatch: {u.size} vs {n.size}")
    return pearson_distance(normalize(u), normalize(n))
