"""Desk-scale detection experiments: populations, rates, AUC and reports."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import stats

from .attacks import AdaptiveMixConfig, AttackStream, JbdaConfig, OodSpec, adaptive_stream, jbda_stream, ood_stream
from .calibration import (
    CalibrationConfig,
    CalibrationResult,
    calibrate,
    distances_to_normal,
    draw_sequences,
    sequence_histograms,
)
from .data import SyntheticDatasetSpec, generate_dataset, split_test_pool
from .rng import stream
from .snapshots import PredictionMatrix, SnapshotModel, TrainConfig, named_sequence, predict_matrix, train_with_snapshots

log = logging.getLogger(__name__)

DEFAULT_SEED = 20240917


def default_dataset() -> SyntheticDatasetSpec:
    return SyntheticDatasetSpec(num_classes=5, dim=16, samples_per_class=1000, cluster_spread=1.0, cluster_separation=3.0, seed=DEFAULT_SEED)


def default_training() -> TrainConfig:
    return TrainConfig(epochs=100, learning_rate=0.1, lr_decay=0.955, momentum=0.9, batch_size=32, hidden=128,
                       weight_decay=3e-4, seed=DEFAULT_SEED)


@dataclass(frozen=True)
class ExperimentPlan:
    dataset: SyntheticDatasetSpec = field(default_factory=default_dataset)
    training: TrainConfig = field(default_factory=default_training)
    sequences: tuple[str, ...] = ("full", "sub11", "sub5")
    num_s_values: tuple[int, ...] = (100,)
    attacks: tuple[str, ...] = ("ood", "jbda", "jbrand", "control")
    num_seq: int = 5000
    quantile: float = 1.0
    num_users: int = 2000
    num_adversaries: int = 2000
    budget: int = 5000
    calibration_fraction: float = 0.4
    attack_seed_per_class: int = 20
    ood_half_width: float = 6.0
    jbda: JbdaConfig = field(default_factory=lambda: JbdaConfig(lam=0.3))
    adaptive_base: str = "ood"
    adaptive_pool_size: int = 1000
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        problems = []
        if not 0 < self.calibration_fraction < 1:
            problems.append("calibration_fraction must be in (0, 1)")
        if min(self.num_s_values, default=1) < 1:
            problems.append("num_s values must be positive")
        if self.num_users < 1 or self.num_adversaries < 1 or self.budget < 1:
            problems.append("num_users, num_adversaries and budget must be positive")
        for a in self.attacks:
            if a not in ATTACKS and not a.startswith("adaptive-"):
                problems.append(f"unknown attack {a!r}")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def m(self) -> int:
        return self.training.epochs


ATTACKS = ("ood", "shifted", "jbda", "jbrand", "control")


def adaptive_name(p_n: float) -> str:
    return f"adaptive-{p_n:.2f}"


@dataclass
class DetectionRow:
    attack: str
    sequence: str
    num_s: int
    delta: float
    fpr: float
    detection_rate: float
    auc: float
    benign_distances: np.ndarray = field(repr=False)
    adversary_distances: np.ndarray = field(repr=False)


@dataclass
class DetectionReport:
    rows: list[DetectionRow] = field(default_factory=list)
    # (population, sequence) -> counts over hardness degrees of the whole pool or stream
    hardness_histograms: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    seed: int | None = None

    def row(self, attack: str, sequence: str, num_s: int) -> DetectionRow:
        for r in self.rows:
            if (r.attack, r.sequence, r.num_s) == (attack, sequence, num_s):
                return r
        raise KeyError((attack, sequence, num_s))

    def to_dict(self) -> dict:
        rows = []
        for r in self.rows:
            d = {k: v for k, v in asdict(r).items() if k not in ("benign_distances", "adversary_distances")}
            d["benign_distances"] = [float(v) for v in r.benign_distances]
            d["adversary_distances"] = [float(v) for v in r.adversary_distances]
            rows.append(d)
        hists = [{"population": p, "sequence": s, "counts": [int(c) for c in h]} for (p, s), h in sorted(self.hardness_histograms.items())]
        return {"format": "hardness-guard-report", "version": 1, "seed": self.seed, "rows": rows, "hardness_histograms": hists}

    @classmethod
    def from_dict(cls, doc: dict) -> "DetectionReport":
        if doc.get("format") != "hardness-guard-report" or doc.get("version") != 1:
            raise ValueError("not a version-1 detection report")
        rows = []
        for d in doc["rows"]:
            d = dict(d)
            b, a = np.array(d.pop("benign_distances")), np.array(d.pop("adversary_distances"))
            rows.append(DetectionRow(**d, benign_distances=b, adversary_distances=a))
        hists = {(h["population"], h["sequence"]): np.array(h["counts"], dtype=np.int64) for h in doc["hardness_histograms"]}
        return cls(rows, hists, doc.get("seed"))


def auc(benign_distances, adversary_distances) -> float:
    """P(random adversary distance > random benign distance), ties counting one half."""
    b = np.asarray(benign_distances, dtype=np.float64)
    a = np.asarray(adversary_distances, dtype=np.float64)
    if b.size == 0 or a.size == 0:
        raise ValueError("AUC needs non-empty benign and adversary samples")
    ranks = stats.rankdata(np.concatenate([b, a]))
    u = ranks[b.size :].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def flagged_fraction(distances, delta: float) -> float:
    """Share of sequences whose distance exceeds the threshold (FPR or detection rate)."""
    d = np.asarray(distances)
    return float(np.mean(d > delta)) if d.size else 0.0


def population_distances(degrees: np.ndarray, num_bins: int, calibration: CalibrationResult, count: int, rng: np.random.Generator) -> np.ndarray:
    """Distances to the normal histogram of ``count`` random ``num_s``-sample sequences."""
    rows = draw_sequences(len(degrees), calibration.num_s, count, rng)
    rows.sort(axis=1)  # queries keep generation order
    return distances_to_normal(sequence_histograms(degrees, rows, num_bins), calibration.normal)


class Workbench:
    """Trained target, pools, streams and calibrations for one plan, built lazily and cached."""

    def __init__(self, plan: ExperimentPlan | None = None):
        self.plan = plan or ExperimentPlan()
        self._degrees: dict[tuple[str, str], np.ndarray] = {}
        self._calibrations: dict[tuple[str, int], CalibrationResult] = {}
        self._streams: dict[str, AttackStream] = {}

    @cached_property
    def pools(self):
        plan = self.plan
        train, test = generate_dataset(plan.dataset)
        cal, users, seeds = split_test_pool(test, plan.seed, plan.calibration_fraction, plan.attack_seed_per_class)
        return train, test, cal, users, seeds

    @property
    def train(self):
        return self.pools[0]

    @property
    def test(self):
        return self.pools[1]

    @property
    def calibration_pool(self):
        return self.pools[2]

    @property
    def user_pool(self):
        return self.pools[3]

    @property
    def seed_pool(self):
        return self.pools[4]

    @cached_property
    def target(self) -> SnapshotModel:
        log.info("training target for %d epochs", self.plan.m)
        return train_with_snapshots(self.train, self.plan.training, num_classes=self.plan.dataset.num_classes)

    def sequence(self, name: str):
        return named_sequence(name, self.plan.m)

    def matrix(self, seq_name: str, X) -> PredictionMatrix:
        return predict_matrix(self.target, self.sequence(seq_name), X)

    def degrees(self, population: str, seq_name: str) -> np.ndarray:
        key = (population, seq_name)
        if key not in self._degrees:
            self._degrees[key] = self.matrix(seq_name, self.features(population)).degrees()
        return self._degrees[key]

    def features(self, population: str) -> np.ndarray:
        if population == "benign":
            return self.user_pool.X
        if population == "calibration":
            return self.calibration_pool.X
        if population == "train":
            return self.train.X
        if population == "test":
            return self.test.X
        return self.stream(population).features

    def stream(self, attack: str) -> AttackStream:
        if attack not in self._streams:
            self._streams[attack] = self._make_stream(attack)
        return self._streams[attack]

    def _make_stream(self, attack: str) -> AttackStream:
        plan = self.plan
        B = plan.budget
        if attack == "ood":
            return ood_stream(OodSpec("box", plan.dataset.dim, plan.ood_half_width), B, plan.seed)
        if attack == "shifted":
            return ood_stream(OodSpec("shifted", plan.dataset.dim, dataset=plan.dataset, shift=plan.dataset.cluster_separation), B, plan.seed)
        if attack == "control":
            return ood_stream(OodSpec("control", plan.dataset.dim, dataset=plan.dataset), B, plan.seed)
        if attack in ("jbda", "jbrand"):
            log.info("generating %s stream", attack)
            return jbda_stream(self.target, self.seed_pool.X, plan.jbda, B, plan.seed, targeted=attack == "jbrand")
        if attack.startswith("adaptive-"):
            cfg = AdaptiveMixConfig(float(attack.split("-", 1)[1]), plan.adaptive_pool_size)
            return adaptive_stream(cfg, B, self.stream(plan.adaptive_base), self.user_pool.X, plan.seed)
        raise ValueError(f"unknown attack {attack!r}")

    def calibration(self, seq_name: str, num_s: int) -> CalibrationResult:
        key = (seq_name, num_s)
        if key not in self._calibrations:
            cfg = CalibrationConfig(num_s=num_s, num_seq=self.plan.num_seq, quantile=self.plan.quantile, seed=self.plan.seed)
            self._calibrations[key] = calibrate(self.matrix(seq_name, self.calibration_pool.X), cfg)
        return self._calibrations[key]

    def benign_distances(self, seq_name: str, num_s: int) -> np.ndarray:
        cal = self.calibration(seq_name, num_s)
        rng = stream(self.plan.seed, "benign-users", num_s)
        return population_distances(self.degrees("benign", seq_name), len(self.sequence(seq_name)), cal, self.plan.num_users, rng)

    def adversary_distances(self, attack: str, seq_name: str, num_s: int) -> np.ndarray:
        cal = self.calibration(seq_name, num_s)
        # shared across attacks so that adaptive variants differ only in their streams
        rng = stream(self.plan.seed, "adversaries", num_s)
        return population_distances(self.degrees(attack, seq_name), len(self.sequence(seq_name)), cal, self.plan.num_adversaries, rng)

    def evaluate(self, attack: str, seq_name: str, num_s: int, benign: np.ndarray | None = None) -> DetectionRow:
        cal = self.calibration(seq_name, num_s)
        if benign is None:
            benign = self.benign_distances(seq_name, num_s)
        adv = self.adversary_distances(attack, seq_name, num_s)
        return DetectionRow(
            attack, seq_name, num_s, cal.delta,
            flagged_fraction(benign, cal.delta), flagged_fraction(adv, cal.delta), auc(benign, adv),
            benign, adv,
        )


def run_experiment(plan: ExperimentPlan | None = None, bench: Workbench | None = None) -> DetectionReport:
    """Train, calibrate and score every (attack, sequence, num_s) cell of the plan."""
    bench = bench or Workbench(plan)
    plan = bench.plan
    report = DetectionReport(seed=plan.seed)
    for seq_name in plan.sequences:
        nb = len(bench.sequence(seq_name))
        for pop in ("benign",) + tuple(plan.attacks):
            report.hardness_histograms[(pop, seq_name)] = np.bincount(bench.degrees(pop, seq_name), minlength=nb)
        for num_s in plan.num_s_values:
            benign = bench.benign_distances(seq_name, num_s)
            for attack in plan.attacks:
                try:
                    report.rows.append(bench.evaluate(attack, seq_name, num_s, benign))
                except Exception as exc:
                    raise RuntimeError(f"experiment stage {attack}/{seq_name}/num_s={num_s}: {exc}") from exc
    return report


def adaptive_sweep(bench: Workbench, p_values, num_s_values, seq_name: str = "full") -> dict[tuple[float, int], float]:
    """Detection rate of the normal-sample-mixing adversary over a ``p_n`` x ``num_s`` grid."""
    out = {}
    for num_s in num_s_values:
        for p in p_values:
            out[(p, num_s)] = bench.evaluate(adaptive_name(p), seq_name, num_s).detection_rate
    return out


@dataclass
class HardnessGroupRow:
    group: int
    lo: int
    hi: int
    count: int
    fraction: float
    accuracy: float | None


@dataclass
class MisclassificationReport:
    groups: list[HardnessGroupRow]
    spearman: float | None


def hardness_misclassification_report(matrix: PredictionMatrix, true_labels, num_groups: int = 10) -> MisclassificationReport:
    """Final-snapshot accuracy per hardness range and its rank correlation with difficulty.

    ``spearman`` correlates group index with misclassification rate over the
    non-empty groups; it is ``None`` when either side is constant.
    """
    y = np.asarray(true_labels)
    deg = matrix.degrees()
    nb = matrix.num_bins
    correct = matrix.final_labels() == y
    groups = np.minimum((deg * num_groups) // nb, num_groups - 1)
    rows = []
    for g in range(num_groups):
        mask = groups == g
        n = int(mask.sum())
        lo, hi = -(-g * nb // num_groups), -(-(g + 1) * nb // num_groups) - 1
        rows.append(HardnessGroupRow(g, lo, hi, n, n / len(y) if len(y) else 0.0, float(correct[mask].mean()) if n else None))
    present = [r for r in rows if r.count]
    idx = [r.group for r in present]
    err = [1.0 - r.accuracy for r in present]
    rho = None
    if len(present) >= 2 and np.ptp(err) > 0:
        rho = float(stats.spearmanr(idx, err).statistic)
    return MisclassificationReport(rows, rho)


def transferability_report(model_a: SnapshotModel, model_b: SnapshotModel, X, seq_name: str = "full") -> float | None:
    """Pearson correlation of per-sample hardness degrees under two models; ``None`` if degenerate."""
    da = predict_matrix(model_a, named_sequence(seq_name, model_a.m), X).degrees()
    db = predict_matrix(model_b, named_sequence(seq_name, model_b.m), X).degrees()
    if da.size < 2 or np.ptp(da) == 0 or np.ptp(db) == 0:
        return None
    return float(np.corrcoef(da, db)[0, 1])


DETECTION_HEADER = ["attack", "sequence", "num_s", "delta", "fpr", "detection_rate", "auc", "num_benign", "num_adversaries"]
DISTANCE_HEADER = ["attack", "sequence", "num_s", "population", "distance"]


def emit_reports(report: DetectionReport, out_dir, plots: bool = True) -> list[Path]:
    """Write CSV tables (and optional PNG histograms) describing a detection report.

    CSV files are byte-stable for a given report; floats are written with
    ``repr``. Plot images are for people and carry no stability guarantee.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    path = out / "detection.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DETECTION_HEADER)
        for r in report.rows:
            w.writerow([r.attack, r.sequence, r.num_s, repr(r.delta), repr(r.fpr), repr(r.detection_rate), repr(r.auc), len(r.benign_distances), len(r.adversary_distances)])
    written.append(path)

    path = out / "distances.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DISTANCE_HEADER)
        for r in report.rows:
            for pop, ds in (("benign", r.benign_distances), ("adversary", r.adversary_distances)):
                for d in np.sort(ds):
                    w.writerow([r.attack, r.sequence, r.num_s, pop, repr(float(d))])
    written.append(path)

    for (pop, seq), counts in sorted(report.hardness_histograms.items()):
        path = out / f"hardness_hist_{pop}_{seq}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["degree", "count"])
            for d, c in enumerate(counts):
                w.writerow([d, int(c)])
        written.append(path)

    if plots and (report.rows or report.hardness_histograms):
        written.extend(_plot(report, out))
    return written


def _plot(report: DetectionReport, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for (pop, seq), counts in sorted(report.hardness_histograms.items()):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(np.arange(len(counts)), counts, width=1.0, color="purple")
        ax.set_xlabel("hardness degree")
        ax.set_ylabel("samples")
        ax.set_title(f"{pop} ({seq})")
        fig.tight_layout()
        p = out / f"hardness_hist_{pop}_{seq}.png"
        fig.savefig(p)
        plt.close(fig)
        paths.append(p)
    for r in report.rows:
        fig, ax = plt.subplots(figsize=(5, 3))
        hi = max(float(np.max(r.adversary_distances, initial=0)), float(np.max(r.benign_distances, initial=0)), r.delta) * 1.05 or 1.0
        bins = np.linspace(0, hi, 60)
        ax.hist(r.benign_distances, bins=bins, alpha=0.6, label="benign")
        ax.hist(r.adversary_distances, bins=bins, alpha=0.6, label=r.attack)
        ax.axvline(r.delta, color="k", lw=1, ls="--")
        ax.set_xlabel("Pearson distance to normal histogram")
        ax.legend()
        fig.tight_layout()
        p = out / f"distance_hist_{r.attack}_{r.sequence}_ns{r.num_s}.png"
        fig.savefig(p)
        plt.close(fig)
        paths.append(p)
    return paths
