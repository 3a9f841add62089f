"""
Serving the detector over TCP
=============================

Start the NDJSON gateway in-process, replay one benign user and one OOD
attacker through it, then ask the admin interface what it saw.
"""

import asyncio
import threading

import numpy as np

from hardness_guard.evaluation import ExperimentPlan, Workbench
from hardness_guard.service import DetectionService, query_records, replay, serve

bench = Workbench(ExperimentPlan())
cal = bench.calibration("full", 100)
service = DetectionService(bench.target, cal)

# run the server on an ephemeral port in a background thread
loop, stop, ready = asyncio.new_event_loop(), asyncio.Event(), threading.Event()
addr = {}
thread = threading.Thread(
    target=loop.run_until_complete,
    args=(serve(service, "127.0.0.1", 0, None, stop, lambda a: (addr.update(a=a), ready.set())),),
    daemon=True,
)
thread.start()
ready.wait()
host, port = addr["a"]

rng = np.random.default_rng(0)
benign = bench.user_pool.X[rng.choice(len(bench.user_pool), 300, replace=False)]
ood = bench.stream("ood")

b = replay(host, port, [{"id": i, "kind": "query", "user_id": "alice", "features": x.tolist()} for i, x in enumerate(benign)])
o = replay(host, port, query_records(ood, "mallory")[:300])

for name, rs in (("alice", b), ("mallory", o)):
    windows = [r["distance"] for r in rs if r["window_evaluated"]]
    first = next((i for i, r in enumerate(rs) if r["flagged"]), None)
    print(f"{name:>8}: window distances {[round(d, 4) for d in windows]}  (delta {cal.delta:.4f})  first flag at query {first}")

admin = replay(host, port, [{"id": "h", "kind": "admin", "query": "health"}, {"id": "u", "kind": "admin", "query": "users"}])
print("health:", admin[0]["status"], "users:", admin[0]["users"], "queries:", admin[0]["queries"])
for u in admin[1]["users"]:
    print(f"  {u['user_id']}: seen {u['samples_seen']}, windows {u['windows_completed']}, flagged {u['flagged']}")

loop.call_soon_threadsafe(stop.set)
thread.join()
