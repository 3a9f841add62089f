"""
Hardness histograms of benign and attack queries
================================================

Train the default target, keep one snapshot per epoch, and look at when each
query's predicted label stops changing. Benign queries mostly settle at the
first snapshot; synthetic attack queries settle later.
"""

import numpy as np

from hardness_guard.evaluation import ExperimentPlan, Workbench

bench = Workbench(ExperimentPlan())
m = bench.plan.m
print(f"target: {m} snapshots, test accuracy {np.mean(bench.target.predict(bench.test.X) == bench.test.y):.3f}")

# hardness degree = last snapshot index where the label changed (0 means never)
for pop in ("benign", "ood", "jbda", "jbrand", "control"):
    deg = bench.degrees(pop, "full")
    counts = np.bincount(deg, minlength=m)
    deciles = counts.reshape(10, -1).sum(axis=1) / len(deg)
    print(f"{pop:>8}  degree 0: {np.mean(deg == 0):.3f}   by tenth of training: " + " ".join(f"{v:.2f}" for v in deciles))

# the detector compares windows of num_s queries against the normal histogram
cal = bench.calibration("full", 100)
print(f"\nthreshold delta = {cal.delta:.6f} (num_s={cal.num_s}, {cal.config.num_seq} calibration sequences)")
for attack in ("ood", "jbda", "jbrand", "control"):
    row = bench.evaluate(attack, "full", 100)
    print(f"{attack:>8}  detection {row.detection_rate:.4f}  FPR {row.fpr:.4f}  AUC {row.auc:.4f}")

# fewer snapshots: 11 and 5 evenly spaced epochs
for seq in ("sub11", "sub5"):
    row = bench.evaluate("jbda", seq, 100)
    print(f"jbda with {seq:>5}: detection {row.detection_rate:.4f}  FPR {row.fpr:.4f}")
