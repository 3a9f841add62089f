import asyncio
import json
import socket
import threading
import tracemalloc
from contextlib import contextmanager

import numpy as np
import pytest

from hardness_guard.attacks import AttackStream
from hardness_guard.calibration import CalibrationConfig, calibrate, draw_sequences
from hardness_guard.monitor import HardnessMonitor, MonitorConfig
from hardness_guard.rng import stream
from hardness_guard.service import DetectionService, StartupError, query_records, replay, replay_file, serve
from hardness_guard.snapshots import SubclassifierSequence, predict_matrix

from test_calibration import matrix_from_degrees


@pytest.fixture(scope="module")
def small_service_parts(small_model, small_pools):
    mat = predict_matrix(small_model, SubclassifierSequence.full(small_model.m), small_pools[1].X)
    return small_model, calibrate(mat, CalibrationConfig(num_s=10, num_seq=200, seed=4))


@contextmanager
def running(service, snapshot_path=None):
    """Serve on an ephemeral port from a background thread."""
    bound, started = {}, threading.Event()
    loop = asyncio.new_event_loop()
    stop = asyncio.Event()

    def ready(addr):
        bound["addr"] = addr
        started.set()

    async def main():
        await serve(service, "127.0.0.1", 0, snapshot_path, stop, ready)

    t = threading.Thread(target=loop.run_until_complete, args=(main(),), daemon=True)
    t.start()
    assert started.wait(10)
    try:
        yield bound["addr"]
    finally:
        loop.call_soon_threadsafe(stop.set)
        t.join(10)
        loop.close()


def ask(service, **req):
    return service.handle_request({"id": 1, **req})


def test_wrong_dim_names_expected_dim(small_service_parts):
    svc = DetectionService(*small_service_parts)
    r = ask(svc, kind="query", user_id="u", features=[0.0] * 7)
    assert not r["ok"] and r["error"]["code"] == "bad_request"
    assert "expected dim 4" in r["error"]["message"]


@pytest.mark.parametrize("req", [
    {"kind": "query", "user_id": "", "features": [0, 0, 0, 0]},
    {"kind": "query", "user_id": "x" * 129, "features": [0, 0, 0, 0]},
    {"kind": "query", "user_id": "u", "features": [0, 0, "a", 0]},
    {"kind": "query", "user_id": "u", "features": [0, 0, float("nan"), 0]},
    {"kind": "fly"},
    {"kind": "admin", "query": "everything"},
])
def test_malformed_requests_get_error_records(small_service_parts, req):
    r = ask(DetectionService(*small_service_parts), **req)
    assert r["ok"] is False and r["kind"] == "error" and r["id"] == 1


def test_admin_queries(small_service_parts, small_pools):
    svc = DetectionService(*small_service_parts)
    h = ask(svc, kind="admin", query="health")
    assert h["ok"] and h["status"] == "ok" and h["users"] == 0
    nf = ask(svc, kind="admin", query="user:ghost")
    assert nf["error"]["code"] == "not_found"
    for x in small_pools[1].X[:7]:
        ask(svc, kind="query", user_id="kay", features=x.tolist())
    u = ask(svc, kind="admin", query="user:kay")
    assert u["user"]["samples_seen"] == 7
    c = ask(svc, kind="admin", query="calibration")
    cal = small_service_parts[1]
    assert (c["delta"], c["num_s"], c["num_bins"]) == (cal.delta, cal.num_s, cal.num_bins)
    assert [s["user_id"] for s in ask(svc, kind="admin", query="users")["users"]] == ["kay"]


def test_predicted_label_is_final_snapshot(small_service_parts, small_pools):
    model, cal = small_service_parts
    svc = DetectionService(model, cal)
    X = small_pools[1].X[:20]
    got = [ask(svc, kind="query", user_id="p", features=x.tolist())["predicted_label"] for x in X]
    assert got == predict_matrix(model, SubclassifierSequence((model.m - 1,)), X).labels[:, 0].tolist()


def test_startup_rejects_inconsistent_files(small_service_parts, small_pools, small_model):
    model, _ = small_service_parts
    # calibrated against a 30-snapshot sequence; the model only has 12
    bad = calibrate(matrix_from_degrees(np.arange(40) % 30, 30), CalibrationConfig(num_s=5, num_seq=20, seed=1))
    with pytest.raises(StartupError):
        DetectionService(model, bad)


def test_tcp_replay_matches_offline_monitor(small_service_parts, small_pools):
    model, cal = small_service_parts
    rng = np.random.default_rng(5)
    X = np.concatenate([small_pools[1].X, rng.uniform(-8, 8, (60, 4))])
    users = rng.choice(["ann", "bob", "cy"], size=len(X))
    records = [{"id": i, "kind": "query", "user_id": str(u), "features": x.tolist()} for i, (u, x) in enumerate(zip(users, X))]
    svc = DetectionService(model, cal, window_policy="cumulative")
    with running(svc) as (host, port):
        got = replay(host, port, records, window=16)
    assert [r["id"] for r in got] == list(range(len(X)))
    offline = HardnessMonitor(MonitorConfig(cal, window_policy="cumulative"))
    traces = predict_matrix(model, SubclassifierSequence.full(model.m), X).labels
    for r, u, t in zip(got, users, traces):
        v = offline.ingest(str(u), t).to_dict()
        assert {k: r[k] for k in v} == v
    assert any(r["window_evaluated"] for r in got)


def test_benign_and_ood_replays(bench, tmp_path):
    cal = bench.calibration("full", 100)
    svc = DetectionService(bench.target, cal)
    # a benign user replaying one calibration sequence sits at distance <= delta
    rows = draw_sequences(len(bench.calibration_pool), cal.num_s, cal.config.num_seq, stream(cal.config.seed, "calibration"))
    benign = AttackStream(bench.calibration_pool.X[rows[0]], np.array(["normal"] * cal.num_s), "benign")
    ood = AttackStream(bench.stream("ood").features[: 2 * cal.num_s], bench.stream("ood").provenance[: 2 * cal.num_s], "ood")
    ood.save_csv(tmp_path / "ood.csv")
    with running(svc) as (host, port):
        b = replay(host, port, query_records(benign, "b"))
        o = replay_file(host, port, tmp_path / "ood.csv", "o")
    assert not any(r["flagged"] for r in b) and b[-1]["window_evaluated"]
    assert b[-1]["distance"] == cal.distance_samples[0]
    first = next(i for i, r in enumerate(o) if r["flagged"])
    assert first == cal.num_s - 1 and o[first]["distance"] > cal.delta


def test_reject_user_mode(small_service_parts):
    model, cal = small_service_parts
    svc = DetectionService(model, cal.with_delta(-1.0), action_on_flag="reject_user")
    replies = [ask(svc, kind="query", user_id="z", features=[9.0, -9.0, 9.0, -9.0]) for _ in range(cal.num_s + 2)]
    assert replies[cal.num_s - 1]["flagged"]
    assert replies[cal.num_s]["kind"] == "refusal" and replies[cal.num_s]["error"]["code"] == "user_rejected"
    assert ask(svc, kind="query", user_id="other", features=[0, 0, 0, 0])["ok"]


def test_malformed_line_keeps_connection_open(small_service_parts):
    svc = DetectionService(*small_service_parts)
    with running(svc) as (host, port):
        with socket.create_connection((host, port), timeout=10) as s:
            f = s.makefile("rwb")
            f.write(b"{not json\n")
            f.write(json.dumps({"id": "h", "kind": "admin", "query": "health"}).encode() + b"\n")
            f.flush()
            first, second = json.loads(f.readline()), json.loads(f.readline())
    assert first["ok"] is False and first["id"] is None
    assert second["ok"] and second["id"] == "h"


def test_shutdown_writes_snapshot(small_service_parts, tmp_path, small_pools):
    svc = DetectionService(*small_service_parts)
    path = tmp_path / "snap.json"
    with running(svc, path) as (host, port):
        replay(host, port, [{"id": i, "kind": "query", "user_id": "s", "features": x.tolist()} for i, x in enumerate(small_pools[1].X[:5])])
    snap = json.loads(path.read_text())
    assert snap["queries"] == 5 and snap["users"][0]["user_id"] == "s" and snap["users"][0]["samples_seen"] == 5


def test_memory_does_not_grow_with_query_count(small_service_parts):
    svc = DetectionService(*small_service_parts)
    rng = np.random.default_rng(1)
    reqs = [{"id": i, "kind": "query", "user_id": f"u{i % 4}", "features": rng.normal(size=4).tolist()} for i in range(3000)]
    for r in reqs[:500]:
        svc.handle_request(r)
    tracemalloc.start()
    before = tracemalloc.take_snapshot()
    for r in reqs[500:]:
        svc.handle_request(r)
    after = tracemalloc.take_snapshot()
    tracemalloc.stop()
    grown = sum(s.size_diff for s in after.compare_to(before, "filename") if "hardness_guard" in s.traceback[0].filename)
    # 2500 stored 4-float vectors would be ~80 kB even as raw arrays
    assert grown < 20_000
