"""Frozen regression values of the default experiment.

``measure`` recomputes every tracked quantity from a :class:`Workbench`;
``compare`` checks a measurement against the checked-in JSON file. The file
was produced by ``measure`` on the default plan and is only regenerated
deliberately (``python -m hardness_guard.expectations --write``).
"""

from __future__ import annotations

import json
import math
from importlib import resources
from pathlib import Path

import numpy as np

from .calibration import CalibrationConfig, calibrate, fpr_estimate
from .evaluation import Workbench, hardness_misclassification_report, transferability_report
from .snapshots import TrainConfig, train_with_snapshots

EXPECTATIONS_FILE = "expectations.json"
REL_TOL = 1e-9


def measure(bench: Workbench) -> dict:
    plan = bench.plan
    m = plan.m
    target = bench.target
    out: dict = {"seed": plan.seed}
    out["train_accuracy"] = float(np.mean(target.predict(bench.train.X) == bench.train.y))
    out["test_accuracy"] = float(np.mean(target.predict(bench.test.X) == bench.test.y))
    out["train_easy_fraction"] = float(np.mean(bench.degrees("train", "full") < m / 10))

    cal2000 = calibrate(bench.matrix("full", bench.calibration_pool.X), CalibrationConfig(100, 2000, 1.0, plan.seed))
    out["delta_full_num_s100_num_seq2000"] = cal2000.delta
    out["fpr_estimate_10000"] = fpr_estimate(bench.calibration("full", 100), bench.matrix("full", bench.user_pool.X), 10000, plan.seed)

    out["ood_late_fraction"] = float(np.mean(bench.degrees("ood", "full") > m / 2))
    out["benign_degree0_fraction"] = float(np.mean(bench.degrees("benign", "full") == 0))
    out["jbda_degree0_fraction"] = float(np.mean(bench.degrees("jbda", "full") == 0))

    rows = {}
    for attack in ("ood", "jbda", "jbrand", "control"):
        for seq in plan.sequences:
            r = bench.evaluate(attack, seq, 100)
            rows[f"{attack}/{seq}/100"] = {"delta": r.delta, "fpr": r.fpr, "detection_rate": r.detection_rate, "auc": r.auc}
    out["detection"] = rows

    mr = hardness_misclassification_report(bench.matrix("full", bench.test.X), bench.test.y)
    out["misclassification_spearman"] = mr.spearman
    other = train_with_snapshots(bench.train, TrainConfig(**{**plan.training.to_dict(), "seed": plan.seed + 1}))
    out["transferability"] = transferability_report(target, other, bench.test.X)
    return out


def load(path=None) -> dict:
    if path is None:
        text = resources.files("hardness_guard").joinpath("data", EXPECTATIONS_FILE).read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


def _walk(prefix: str, got, want, problems: list[str]) -> None:
    if isinstance(want, dict):
        if not isinstance(got, dict):
            problems.append(f"{prefix}: expected a table, got {got!r}")
            return
        for k in want:
            _walk(f"{prefix}.{k}" if prefix else k, got.get(k), want[k], problems)
        return
    if want is None or got is None:
        if want is not got:
            problems.append(f"{prefix}: expected {want!r}, got {got!r}")
        return
    if not math.isclose(float(got), float(want), rel_tol=REL_TOL, abs_tol=1e-12):
        problems.append(f"{prefix}: expected {want!r}, got {got!r}")


def compare(measured: dict, expected: dict) -> list[str]:
    """Every key of ``expected`` missing from or different in ``measured``."""
    problems: list[str] = []
    _walk("", measured, expected, problems)
    return problems


def main(argv=None) -> int:
    import argparse

    ap = argparse.ArgumentParser(description="measure the default experiment against the frozen expectations")
    ap.add_argument("--write", action="store_true", help="overwrite the packaged expectations file")
    args = ap.parse_args(argv)
    got = measure(Workbench())
    if args.write:
        path = Path(__file__).parent / "data" / EXPECTATIONS_FILE
        path.parent.mkdir(exist_ok=True)
        path.write_text(json.dumps(got, indent=1, sort_keys=True) + "\n")
        print(f"wrote {path}")
        return 0
    problems = compare(got, load())
    for p in problems:
        print(p)
    return 1 if problems else 0


if __name__ == "__main__":
    raise SystemExit(main())
