"""Extraction-attack query streams, surrogate training and surrogate scoring.

Streams are plain arrays of feature vectors in generation order, each tagged
with where it came from (``normal``, ``synthetic`` or ``ood``). Three families:

* out-of-distribution sampling (a uniform box, or the class mixture with moved
  or inflated clusters);
* jacobian-based augmentation of a small seed set, untargeted (``jbda``) or
  with random targets (``jbrand``);
* the adaptive mix, which dilutes any base stream with replayed normal samples.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import SyntheticDatasetSpec
from .rng import stream
from .snapshots import PredictionMatrix, SnapshotModel, TrainConfig, fit, gradient_wrt_input

PROVENANCE = ("normal", "synthetic", "ood")
KINDS = ("ood_random", "control", "jbda", "jbrand", "adaptive_mix")


@dataclass
class AttackStream:
    features: np.ndarray
    provenance: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.provenance = np.asarray(self.provenance, dtype=object)
        if self.features.ndim != 2 or self.features.shape[0] != self.provenance.shape[0]:
            raise ValueError("features and provenance disagree in length")
        bad = set(self.provenance.tolist()) - set(PROVENANCE)
        if bad:
            raise ValueError(f"unknown provenance tags {sorted(bad)}")

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "provenance"] + [f"x{j}" for j in range(self.dim)])
            for i in range(len(self)):
                w.writerow([i, self.provenance[i]] + [repr(float(v)) for v in self.features[i]])

    @classmethod
    def load_csv(cls, path, kind: str = "replay") -> "AttackStream":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[:2] != ["index", "provenance"]:
            raise ValueError(f"{path}: not an attack stream file")
        dim = len(header) - 2
        X = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(-1, dim)
        return cls(X, np.array([r[1] for r in body], dtype=object), kind)


@dataclass(frozen=True)
class OodSpec:
    """Where out-of-distribution queries come from.

    ``box``: uniform in ``[-half_width, half_width]^dim``.
    ``shifted``: the class mixture with every mean moved by ``shift`` along a
    random direction and the spread multiplied by ``spread_scale``.
    ``control``: the unmodified class mixture, i.e. benign queries.
    """

    kind: str = "box"
    dim: int = 16
    half_width: float = 6.0
    shift: float = 0.0
    spread_scale: float = 2.5
    dataset: SyntheticDatasetSpec | None = None

    def __post_init__(self):
        if self.kind not in ("box", "shifted", "control"):
            raise ValueError(f"unknown OOD kind {self.kind!r}")
        if self.kind != "box" and self.dataset is None:
            raise ValueError(f"OOD kind {self.kind!r} needs the dataset spec")


def ood_stream(spec: OodSpec, B: int, seed: int) -> AttackStream:
    if B < 1:
        raise ValueError("attack budget B must be >= 1")
    rng = stream(seed, "attack-ood-" + spec.kind)
    if spec.kind == "box":
        X = rng.uniform(-spec.half_width, spec.half_width, size=(B, spec.dim))
        return AttackStream(X, np.full(B, "ood", dtype=object), "ood_random")
    ds = spec.dataset
    y = rng.integers(0, ds.num_classes, size=B)
    if spec.kind == "control":
        X = ds.class_means()[y] + ds.cluster_spread * rng.standard_normal((B, ds.dim))
        return AttackStream(X, np.full(B, "normal", dtype=object), "control")
    direction = rng.standard_normal(ds.dim)
    direction /= np.linalg.norm(direction)
    means = ds.class_means() + spec.shift * direction
    X = means[y] + spec.spread_scale * ds.cluster_spread * rng.standard_normal((B, ds.dim))
    return AttackStream(X, np.full(B, "ood", dtype=object), "ood_random")


@dataclass(frozen=True)
class JbdaConfig:
    """Jacobian-based augmentation.

    Each round trains a fresh surrogate on everything labelled so far, picks
    ``kappa`` labelled points and emits sign-gradient perturbations of them.
    ``jbrand`` swaps the single untargeted step for ``jbrand_iters`` targeted
    steps of ``lam / jbrand_iters`` toward each of ``jbrand_targets_per_sample``
    random classes.
    """

    lam: float = 0.5
    kappa: int = 500
    rounds: int = 30
    jbrand_iters: int = 5
    jbrand_targets_per_sample: int = 3
    soft_labels: bool = True
    surrogate: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, hidden=128))
    box: tuple[float, float] | None = None

    def __post_init__(self):
        if self.lam < 0 or self.kappa < 1 or self.rounds < 1:
            raise ValueError(f"invalid JBDA config {self}")
        if self.jbrand_iters < 1 or self.jbrand_targets_per_sample < 1:
            raise ValueError("jbrand_iters and jbrand_targets_per_sample must be >= 1")


def _query(target: SnapshotModel, X: np.ndarray, soft: bool) -> np.ndarray:
    return target.proba(X) if soft else target.predict(X)


def jbda_stream(
    target: SnapshotModel,
    seed_X: np.ndarray,
    cfg: JbdaConfig,
    B: int,
    seed: int,
    targeted: bool = False,
) -> AttackStream:
    """Grow the seed set by sign-gradient augmentation until ``B`` queries exist.

    Round 1 emits the seed samples themselves; every later round emits only
    perturbed points. If ``cfg.rounds`` run out before the budget is spent,
    the stream is padded by cycling over the perturbed points (over the seeds
    only when there is a single round).
    """
    if B < 1:
        raise ValueError("attack budget B must be >= 1")
    seed_X = np.asarray(seed_X, dtype=np.float64)
    if seed_X.ndim != 2 or seed_X.shape[0] == 0:
        raise ValueError("JBDA needs a non-empty seed pool")
    kind = "jbrand" if targeted else "jbda"
    rng = stream(seed, "attack-" + kind)
    k = target.num_classes

    Xs = seed_X.copy()
    answers = _query(target, Xs, cfg.soft_labels)
    emitted = [Xs]
    tags = [np.full(len(Xs), "normal", dtype=object)]
    total = len(Xs)
    for rnd in range(1, cfg.rounds):
        if total >= B:
            break
        surrogate = fit(Xs, answers, k, cfg.surrogate, seed_stream=f"{kind}-surrogate-{rnd}")
        pick = rng.choice(len(Xs), size=min(cfg.kappa, len(Xs)), replace=False)
        src = Xs[pick]
        if not targeted:
            labels = target.predict(src)
            new = src + cfg.lam * np.sign(gradient_wrt_input(surrogate, -1, src, labels))
        else:
            reps = cfg.jbrand_targets_per_sample
            new = np.repeat(src, reps, axis=0)
            goals = rng.integers(0, k, size=len(new))
            step = cfg.lam / cfg.jbrand_iters
            for _ in range(cfg.jbrand_iters):
                # descend the loss toward the random goal class
                new = new - step * np.sign(gradient_wrt_input(surrogate, -1, new, goals))
        if cfg.box is not None:
            new = np.clip(new, cfg.box[0], cfg.box[1])
        Xs = np.concatenate([Xs, new])
        answers = np.concatenate([answers, _query(target, new, cfg.soft_labels)])
        emitted.append(new)
        tags.append(np.full(len(new), "synthetic", dtype=object))
        total += len(new)
    X = np.concatenate(emitted)
    prov = np.concatenate(tags)
    if len(X) < B:
        # pad by cycling over the synthetic part so raw seeds are only sent in round 1
        pad_X, pad_p = (X[len(seed_X):], prov[len(seed_X):]) if len(X) > len(seed_X) else (X, prov)
        reps = -(-(B - len(X)) // len(pad_X))
        X = np.concatenate([X, np.tile(pad_X, (reps, 1))])
        prov = np.concatenate([prov, np.tile(pad_p, reps)])
    return AttackStream(X[:B], prov[:B], kind)


@dataclass(frozen=True)
class AdaptiveMixConfig:
    p_n: float = 0.5
    normal_pool_size: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.p_n < 1.0:
            raise ValueError("p_n must lie in [0, 1)")
        if self.normal_pool_size < 1:
            raise ValueError("normal_pool_size must be positive")

    @property
    def cost_multiplier(self) -> float:
        """Queries sent per attack query actually used."""
        return 1.0 / (1.0 - self.p_n)


def adaptive_stream(cfg: AdaptiveMixConfig, B: int, base: AttackStream, user_X: np.ndarray, seed: int) -> AttackStream:
    """Replace each position of ``base`` by a replayed normal sample with probability ``p_n``.

    The attacker's normal pool is a fixed random subset of ``user_X`` of
    ``normal_pool_size`` samples; replays draw from it with replacement. The
    draws are coupled across ``p_n`` values: for a fixed seed, raising ``p_n``
    only adds normal positions.
    """
    if B < 1:
        raise ValueError("attack budget B must be >= 1")
    if len(base) < B:
        raise ValueError(f"base stream has {len(base)} samples, budget is {B}")
    user_X = np.asarray(user_X, dtype=np.float64)
    rng = stream(seed, "attack-adaptive")
    pool = user_X[rng.choice(len(user_X), size=min(cfg.normal_pool_size, len(user_X)), replace=False)]
    u = rng.random(B)
    replay = pool[rng.integers(0, len(pool), size=B)]
    is_normal = u < cfg.p_n
    X = np.where(is_normal[:, None], replay, base.features[:B])
    prov = np.where(is_normal, "normal", base.provenance[:B]).astype(object)
    return AttackStream(X, prov, "adaptive_mix")


def train_surrogate(X, target: SnapshotModel, config: TrainConfig | None = None, soft: bool = True) -> SnapshotModel:
    """Label ``X`` with the target and fit a surrogate of the target's architecture."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("cannot train a surrogate on an empty query set")
    if config is None:
        config = TrainConfig(**{**target.config.to_dict(), "seed": target.config.seed + 1})
    return fit(X, _query(target, X, soft), target.num_classes, config, seed_stream="surrogate")


@dataclass
class GroupScore:
    group: int
    count: int
    accuracy: float | None
    fidelity: float | None


@dataclass
class SurrogateReport:
    accuracy: float
    fidelity: float
    groups: list[GroupScore]

    def series(self, metric: str) -> list[float]:
        """Per-group values of ``metric`` over non-empty groups, easiest first."""
        return [getattr(g, metric) for g in self.groups if g.count]


def hardness_groups(degrees: np.ndarray, num_bins: int, num_groups: int = 10) -> np.ndarray:
    """Group index per degree: ``num_groups`` equal ranges over ``[0, num_bins)``."""
    return np.minimum((np.asarray(degrees) * num_groups) // num_bins, num_groups - 1)


def score_surrogate(surrogate: SnapshotModel, target: SnapshotModel, X, y, matrix: PredictionMatrix, num_groups: int = 10) -> SurrogateReport:
    """Accuracy and fidelity overall and per target-hardness group."""
    y = np.asarray(y)
    s_pred = surrogate.predict(X)
    t_pred = target.predict(X)
    right = s_pred == y
    agree = s_pred == t_pred
    groups = hardness_groups(matrix.degrees(), matrix.num_bins, num_groups)
    out = []
    for g in range(num_groups):
        mask = groups == g
        n = int(mask.sum())
        out.append(GroupScore(g, n, float(right[mask].mean()) if n else None, float(agree[mask].mean()) if n else None))
    return SurrogateReport(float(right.mean()), float(agree.mean()), out)


def count_inversions(values) -> int:
    """Adjacent increases in a sequence expected to be non-increasing."""
    v = [x for x in values if x is not None]
    return sum(1 for a, b in zip(v, v[1:]) if b > a)
