"""Acceptance criteria for the frozen desk-scale configuration.

Each test prints one ``CRITERION n PASS|FAIL: ...`` line (visible without -s)
and then asserts, so a failing criterion still reports what was measured.
"""

import asyncio
import threading
import time
from fractions import Fraction

import numpy as np
import pytest

from hardness_guard import model as nn
from hardness_guard.attacks import count_inversions, score_surrogate, train_surrogate
from hardness_guard.calibration import CalibrationConfig, calibrate
from hardness_guard.evaluation import (
    ExperimentPlan,
    Workbench,
    adaptive_sweep,
    hardness_misclassification_report,
    transferability_report,
)
from hardness_guard.hardness import hardness_degree, histogram_distance, normalize, pearson_distance
from hardness_guard.monitor import HardnessMonitor, MonitorConfig, UserState, ingest
from hardness_guard.service import DetectionService, replay, serve
from hardness_guard.snapshots import SubclassifierSequence, TrainConfig, predict_matrix, train_with_snapshots


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, f"criterion {n}: {detail}"

    return emit


def scan_degree(trace):
    n = len(trace)
    for h in range(n):
        if all(trace[k] == trace[-1] for k in range(h, n)) and (h == 0 or trace[h - 1] != trace[h]):
            return h


def test_c01_hardness_oracle(verdict):
    rng = np.random.default_rng(1)
    traces = [rng.integers(0, rng.integers(1, 11), size=rng.integers(1, 21)).tolist() for _ in range(10_000)]
    want = [scan_degree(t) for t in traces]
    t0 = time.perf_counter()
    got = [hardness_degree(t) for t in traces]
    dt = time.perf_counter() - t0
    bad = sum(a != b for a, b in zip(got, want))
    verdict(1, bad == 0 and dt < 1.0, f"{bad} mismatches on 10000 traces, {dt:.3f}s")


def test_c02_pearson_distance(verdict):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    problems = 0
    for _ in range(2000):
        k = int(rng.integers(2, 12))
        a, b = rng.integers(0, 30, k), rng.integers(0, 30, k)
        a[rng.integers(k)] += 1
        b[rng.integers(k)] += 1
        pa, pb = normalize(a), normalize(b)
        d = pearson_distance(pa, pb)
        problems += not (0.0 <= d <= 2.0)
        problems += abs(d - pearson_distance(pb, pa)) > 1e-12
        problems += np.ptp(pa) > 0 and abs(pearson_distance(pa, pa)) > 1e-12
        problems += abs(histogram_distance(a * 7, b) - histogram_distance(a, b)) > 1e-12
    hand = pearson_distance([1, 0, 0, 0], [0, 0, 0, 1])
    dt = time.perf_counter() - t0
    ok = problems == 0 and abs(hand - float(Fraction(4, 3))) <= 1e-9 and dt < 1.0
    verdict(2, ok, f"{problems} property violations in 2000 pairs, PD([1,0,0,0],[0,0,0,1])={hand!r}, {dt:.3f}s")


def test_c03_calibration_soundness(verdict, bench):
    mat = bench.matrix("full", bench.calibration_pool.X)
    cfg = CalibrationConfig(num_s=100, num_seq=5000, quantile=1.0, seed=bench.plan.seed)
    t0 = time.perf_counter()
    a = calibrate(mat, cfg)
    dt = time.perf_counter() - t0
    b = calibrate(mat, cfg)
    below = bool((a.distance_samples <= a.delta).all())
    mass = abs(a.normal.bins.sum() - 100)
    same = np.array_equal(a.normal.bins, b.normal.bins) and a.delta == b.delta and np.array_equal(a.distance_samples, b.distance_samples)
    ok = below and mass <= 1e-9 and same and dt < 10
    verdict(3, ok, f"all<=delta={below}, |sum-num_s|={mass:.1e}, bit-exact rerun={same}, {dt:.2f}s")


@pytest.fixture(scope="module")
def fresh_bench():
    """A separately built default workbench so timings include training."""
    t0 = time.perf_counter()
    b = Workbench(ExperimentPlan())
    b.calibration("full", 100)
    return b, time.perf_counter() - t0


def test_c04_benign_fpr(verdict, fresh_bench):
    b, build = fresh_bench
    t0 = time.perf_counter()
    benign = b.benign_distances("full", 100)
    fpr = float(np.mean(benign > b.calibration("full", 100).delta))
    dt = build + time.perf_counter() - t0
    verdict(4, fpr <= 0.02 and len(benign) == 2000 and dt < 60, f"FPR {fpr:.4f} over {len(benign)} benign sequences, {dt:.1f}s incl. training")


def test_c05_ood_detection(verdict, fresh_bench):
    b, build = fresh_bench
    t0 = time.perf_counter()
    row = b.evaluate("ood", "full", 100)
    dt = build + time.perf_counter() - t0
    ok = row.detection_rate >= 0.95 and row.auc >= 0.99 and dt < 60
    verdict(5, ok, f"detection {row.detection_rate:.4f}, AUC {row.auc:.4f}, FPR {row.fpr:.4f}, {dt:.1f}s incl. training")


def test_c06_jbda_detection(verdict, bench):
    jb = float(np.mean(bench.degrees("jbda", "full") == 0))
    be = float(np.mean(bench.degrees("benign", "full") == 0))
    row = bench.evaluate("jbda", "full", 100)
    ok = jb < be and row.detection_rate >= 0.9
    verdict(6, ok, f"degree-0 fraction jbda {jb:.4f} vs benign {be:.4f}, detection {row.detection_rate:.4f}")


def test_c07_adaptive_monotonicity(verdict, bench):
    ps, ns = (0.0, 0.25, 0.5, 0.75), (25, 50, 100, 200)
    grid = adaptive_sweep(bench, ps, ns)
    inversions = []  # (size of the wrong-way step, where)
    for n in ns:
        for p0, p1 in zip(ps, ps[1:]):
            if grid[(p1, n)] > grid[(p0, n)]:
                inversions.append((grid[(p1, n)] - grid[(p0, n)], f"p_n {p0}->{p1} at num_s {n}"))
    for p in ps:
        for n0, n1 in zip(ns, ns[1:]):
            if grid[(p, n1)] < grid[(p, n0)]:
                inversions.append((grid[(p, n0)] - grid[(p, n1)], f"num_s {n0}->{n1} at p_n {p}"))
    ok = len(inversions) == 0 or (len(inversions) == 1 and inversions[0][0] <= 0.02)
    table = "; ".join(f"num_s {n}: " + ",".join(f"{grid[(p, n)]:.3f}" for p in ps) for n in ns)
    verdict(7, ok, f"{len(inversions)} inversion(s) {[w for _, w in inversions]}; rates by p_n {ps}: {table}")


def test_c08_control_attack(verdict, bench):
    row = bench.evaluate("control", "full", 100)
    gap = abs(row.detection_rate - row.fpr)
    verdict(8, gap <= 0.02, f"control detection {row.detection_rate:.4f} vs FPR {row.fpr:.4f} (gap {gap:.4f})")


def test_c09_hardness_misclassification(verdict, bench):
    rep = hardness_misclassification_report(bench.matrix("full", bench.test.X), bench.test.y)
    rho = rep.spearman
    verdict(9, rho is not None and rho >= 0.7, f"Spearman(group, misclassification) = {rho}")


def test_c10_transferability(verdict, bench):
    other = train_with_snapshots(bench.train, TrainConfig(**{**bench.plan.training.to_dict(), "seed": bench.plan.seed + 1}))
    r = transferability_report(bench.target, other, bench.test.X)
    verdict(10, r is not None and r >= 0.4, f"Pearson correlation of degrees across seeds = {r}")


def _serve_in_thread(service):
    bound, started, loop, stop = {}, threading.Event(), asyncio.new_event_loop(), asyncio.Event()

    def ready(addr):
        bound["addr"] = addr
        started.set()

    t = threading.Thread(target=loop.run_until_complete, args=(serve(service, "127.0.0.1", 0, None, stop, ready),), daemon=True)
    t.start()
    started.wait(10)

    def shutdown():
        loop.call_soon_threadsafe(stop.set)
        t.join(10)
        loop.close()

    return bound["addr"], shutdown


def test_c11_replay_equivalence_and_isolation(verdict, bench):
    cal = bench.calibration("full", 100)
    model = bench.target
    rng = np.random.default_rng(11)
    X = np.concatenate([bench.user_pool.X[:250], bench.stream("ood").features[:250]])
    users = np.where(np.arange(500) < 250, "benign", "ood")
    order = rng.permutation(500)
    X, users = X[order], users[order]
    records = [{"id": i, "kind": "query", "user_id": str(u), "features": x.tolist()} for i, (u, x) in enumerate(zip(users, X))]
    (host, port), shutdown = _serve_in_thread(DetectionService(model, cal))
    try:
        online = replay(host, port, records)
    finally:
        shutdown()
    traces = predict_matrix(model, SubclassifierSequence.full(model.m), X).labels
    offline = HardnessMonitor(MonitorConfig(cal))
    replay_diffs = sum({k: r[k] for k in v} != v for r, v in ((r, offline.ingest(str(u), t).to_dict()) for r, u, t in zip(online, users, traces)))

    # per-user isolation: ingest the two users' traces in 1000 random interleavings
    cfg = MonitorConfig(cal)
    per_user = {u: traces[users == u] for u in ("benign", "ood")}
    alone = {}
    for u, ts in per_user.items():
        s = UserState.fresh(u, cal.num_bins)
        alone[u] = [ingest(s, t, cfg) for t in ts]
    labels = users.copy()
    iso_diffs = 0
    for _ in range(1000):
        mon = HardnessMonitor(cfg)
        pos = {"benign": 0, "ood": 0}
        got = {"benign": [], "ood": []}
        for u in rng.permutation(labels):
            got[u].append(mon.ingest(u, per_user[u][pos[u]]))
            pos[u] += 1
        iso_diffs += sum(got[u] != alone[u] for u in got)
    flagged = any(v.flagged for v in alone["ood"])
    ok = replay_diffs == 0 and iso_diffs == 0 and flagged
    verdict(11, ok, f"{replay_diffs} service/offline verdict differences over 500 queries; {iso_diffs} differences over 1000 interleavings")


def test_c12_gradient_check(verdict, bench):
    rng = np.random.default_rng(12)
    model = bench.target
    arch, theta = model.arch, model.snapshots[-1]
    worst = 0.0
    eps = 1e-6
    for _ in range(100):
        x = bench.test.X[rng.integers(len(bench.test))] + 0.1 * rng.standard_normal(model.dim)
        c = int(rng.integers(model.num_classes))
        g = nn.input_gradient(arch, theta, x, c)[0]

        def f(v):
            # -log p_c as log1p(sum_j!=c exp(z_j - z_c)), which keeps full precision when p_c is near 1
            z = nn.logits(arch, theta, v[None])[0]
            return np.log1p(np.exp(np.delete(z, c) - z[c]).sum())

        fd = np.array([(f(x + eps * e) - f(x - eps * e)) / (2 * eps) for e in np.eye(model.dim)])
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    verdict(12, worst <= 1e-4, f"worst relative error over 100 probes = {worst:.2e}")


def test_c13_surrogate_scoring(verdict, bench):
    target = bench.target
    mat = bench.matrix("full", bench.test.X)
    same = score_surrogate(target, target, bench.test.X, bench.test.y, mat)
    surrogate = train_surrogate(bench.stream("jbda").features, target)
    rep = score_surrogate(surrogate, target, bench.test.X, bench.test.y, mat)
    acc = [g.accuracy for g in rep.groups]
    fid = [g.fidelity for g in rep.groups]
    ia, if_ = count_inversions(acc), count_inversions(fid)
    ok = same.fidelity == 1.0 and ia <= 1 and if_ <= 1
    fmt = lambda v: ",".join("-" if a is None else f"{a:.2f}" for a in v)
    verdict(13, ok, f"self-fidelity {same.fidelity}; JBDA surrogate per-group accuracy [{fmt(acc)}] ({ia} inversions), "
                    f"fidelity [{fmt(fid)}] ({if_} inversions), group sizes {[g.count for g in rep.groups]}")
