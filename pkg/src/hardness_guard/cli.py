"""Command-line pipeline: data, training, matrices, calibration, attacks, evaluation, serving.

Every invocation writes into a fresh run directory holding its outputs and a
``run_manifest.json`` (config hash, seed, tool version, input and output file
digests). Exit codes: 0 success, 1 validation error, 2 runtime failure.

The optional ``--config`` file is JSON with these top-level keys (all optional)::

    seed         int, the root of every random stream
    dataset      SyntheticDatasetSpec fields except seed
    training     TrainConfig fields except seed
    calibration  {"num_s", "num_seq", "quantile", "sequence"}
    attacks      {"budget", "ood_half_width", "jbda": JbdaConfig fields (surrogate excluded),
                  "adaptive": {"p_n", "normal_pool_size", "base"}}
    experiment   {"num_users", "num_adversaries", "num_s_values", "attacks", "sequences",
                  "calibration_fraction", "attack_seed_per_class"}
    service      {"host", "port", "window_policy", "action_on_flag"}
    output_dir   parent directory for run directories (default "runs")
"""

from __future__ import annotations

import argparse
import asyncio
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AdaptiveMixConfig, AttackStream, JbdaConfig, OodSpec, adaptive_stream, jbda_stream, ood_stream
from .calibration import CalibrationConfig, CalibrationResult, calibrate
from .data import SamplePool, SyntheticDatasetSpec, generate_dataset, split_test_pool
from .evaluation import DetectionReport, ExperimentPlan, Workbench, default_dataset, default_training, emit_reports, run_experiment
from .monitor import FLAG_ACTIONS, WINDOW_POLICIES
from .snapshots import PredictionMatrix, SnapshotModel, TrainConfig, named_sequence, predict_matrix, train_with_snapshots

log = logging.getLogger("hardness_guard")

MANIFEST = "run_manifest.json"
SEQUENCES = ("full", "sub11", "sub5")
ATTACK_KINDS = ("ood", "shifted", "control", "jbda", "jbrand", "adaptive")


class ValidationError(Exception):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    dataset: SyntheticDatasetSpec
    training: TrainConfig
    calibration: CalibrationConfig
    calibration_sequence: str
    jbda: JbdaConfig
    adaptive: AdaptiveMixConfig
    adaptive_base: str
    budget: int
    ood_half_width: float
    plan: ExperimentPlan
    service: dict
    output_dir: str
    raw: dict

    def resolved(self) -> dict:
        """Every effective setting, defaults included; this is what the config hash covers."""
        plan = asdict(self.plan)
        for k in ("dataset", "training", "jbda"):
            plan.pop(k)
        return {
            "seed": self.seed,
            "dataset": self.dataset.to_dict(),
            "training": self.training.to_dict(),
            "calibration": {**self.calibration.to_dict(), "sequence": self.calibration_sequence},
            "attacks": {"budget": self.budget, "ood_half_width": self.ood_half_width, "jbda": asdict(self.jbda),
                        "adaptive": {**asdict(self.adaptive), "base": self.adaptive_base}},
            "experiment": plan,
            "service": dict(self.service),
            "output_dir": self.output_dir,
        }

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.resolved(), sort_keys=True).encode()).hexdigest()

    @property
    def calibration_pool_size(self) -> int:
        n = self.dataset.num_classes * self.dataset.samples_per_class
        return int(round(self.plan.calibration_fraction * n))


_SECTIONS = ("seed", "dataset", "training", "calibration", "attacks", "experiment", "service", "output_dir")


def _build(cls, values: dict, where: str, problems: list, **fixed):
    """Instantiate a frozen config dataclass, collecting unknown keys and validation failures."""
    known = {f.name for f in fields(cls)}
    bad = sorted(set(values) - known)
    if bad:
        problems.append(f"{where}: unknown keys {bad}")
    kw = {k: v for k, v in values.items() if k in known}
    kw.update(fixed)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
        return None


def _section(raw: dict, name: str, problems: list) -> dict:
    v = raw.get(name, {})
    if not isinstance(v, dict):
        problems.append(f"{name}: must be an object")
        return {}
    return dict(v)


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read, merge and cross-check a pipeline config; raise one ValidationError listing every problem."""
    problems: list[str] = []
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError([f"config file {path}: {exc}"]) from exc
        if not isinstance(raw, dict):
            raise ValidationError([f"config file {path}: top level must be an object"])
    for k, v in (overrides or {}).items():
        sec, _, key = k.partition(".")
        if key:
            raw.setdefault(sec, {})[key] = v
        else:
            raw[sec] = v
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        problems.append(f"unknown top-level keys {unknown}")

    seed = raw.get("seed", default_dataset().seed)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        problems.append("seed must be an integer in [0, 2**64)")
        seed = 0

    ds_vals = {**{k: v for k, v in default_dataset().to_dict().items() if k != "seed"}, **_section(raw, "dataset", problems)}
    if "seed" in ds_vals:
        problems.append("dataset.seed: set the top-level seed instead")
        ds_vals.pop("seed")
    dataset = _build(SyntheticDatasetSpec, ds_vals, "dataset", problems, seed=seed)

    tr_vals = {**{k: v for k, v in default_training().to_dict().items() if k != "seed"}, **_section(raw, "training", problems)}
    if "seed" in tr_vals:
        problems.append("training.seed: set the top-level seed instead")
        tr_vals.pop("seed")
    training = _build(TrainConfig, tr_vals, "training", problems, seed=seed)

    cal_vals = _section(raw, "calibration", problems)
    cal_seq = cal_vals.pop("sequence", "full")
    if cal_seq not in SEQUENCES:
        problems.append(f"calibration.sequence must be one of {SEQUENCES}")
    calibration = _build(CalibrationConfig, cal_vals, "calibration", problems, seed=seed)

    att = _section(raw, "attacks", problems)
    budget = att.pop("budget", 5000)
    half_width = att.pop("ood_half_width", 6.0)
    jb_vals = att.pop("jbda", {"lam": 0.3})
    ad_vals = dict(att.pop("adaptive", {}))
    if att:
        problems.append(f"attacks: unknown keys {sorted(att)}")
    if not isinstance(budget, int) or budget < 1:
        problems.append("attacks.budget must be a positive integer")
        budget = 1
    if not isinstance(half_width, (int, float)) or half_width <= 0:
        problems.append("attacks.ood_half_width must be positive")
        half_width = 1.0
    if "surrogate" in jb_vals:
        problems.append("attacks.jbda.surrogate: not configurable from the file")
        jb_vals.pop("surrogate")
    if "box" in jb_vals and jb_vals["box"] is not None:
        jb_vals["box"] = tuple(jb_vals["box"])
    jbda = _build(JbdaConfig, jb_vals, "attacks.jbda", problems)
    base = ad_vals.pop("base", "ood")
    if base not in ("ood", "shifted", "jbda", "jbrand"):
        problems.append("attacks.adaptive.base must be one of ood, shifted, jbda, jbrand")
    adaptive = _build(AdaptiveMixConfig, ad_vals, "attacks.adaptive", problems)

    ex = _section(raw, "experiment", problems)
    for key in ("num_s_values", "attacks", "sequences"):
        if key in ex:
            ex[key] = tuple(ex[key])
    for s in ex.get("sequences", ()):
        if s not in SEQUENCES:
            problems.append(f"experiment.sequences: unknown sequence {s!r}")
    plan = None
    if None not in (dataset, training, jbda):
        plan = _build(
            ExperimentPlan, ex, "experiment", problems,
            dataset=dataset, training=training, jbda=jbda, seed=seed, budget=budget,
            ood_half_width=float(half_width), num_seq=calibration.num_seq if calibration else 5000,
            quantile=calibration.quantile if calibration else 1.0,
            adaptive_base=base, adaptive_pool_size=adaptive.normal_pool_size if adaptive else 1000,
        )

    svc = {"host": "127.0.0.1", "port": 8765, "window_policy": "tumbling", "action_on_flag": "flag_only", **_section(raw, "service", problems)}
    if set(svc) - {"host", "port", "window_policy", "action_on_flag"}:
        problems.append(f"service: unknown keys {sorted(set(svc) - {'host', 'port', 'window_policy', 'action_on_flag'})}")
    if svc["window_policy"] not in WINDOW_POLICIES:
        problems.append(f"service.window_policy must be one of {WINDOW_POLICIES}")
    if svc["action_on_flag"] not in FLAG_ACTIONS:
        problems.append(f"service.action_on_flag must be one of {FLAG_ACTIONS}")
    if not isinstance(svc["port"], int) or not 0 <= svc["port"] < 65536:
        problems.append("service.port must be an integer in [0, 65535]")

    output_dir = raw.get("output_dir", "runs")
    if not isinstance(output_dir, str) or not output_dir:
        problems.append("output_dir must be a non-empty string")

    # cross-references
    if plan is not None and calibration is not None:
        pool = int(round(plan.calibration_fraction * dataset.num_classes * dataset.samples_per_class))
        if calibration.num_s > pool:
            problems.append(f"calibration.num_s={calibration.num_s} exceeds the calibration pool size {pool}")
        for ns in plan.num_s_values:
            if ns > pool:
                problems.append(f"experiment.num_s_values: {ns} exceeds the calibration pool size {pool}")
            if ns > budget:
                problems.append(f"experiment.num_s_values: {ns} exceeds the attack budget {budget}")
    if problems:
        raise ValidationError(problems)
    return PipelineConfig(seed, dataset, training, calibration, cal_seq, jbda, adaptive, base, budget, float(half_width), plan, svc, output_dir, raw)


# ---------------------------------------------------------------- run directories


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """A fresh output directory plus its manifest."""

    def __init__(self, cfg: PipelineConfig, command: str, run_dir=None):
        self.cfg = cfg
        self.command = command
        if run_dir is None:
            stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
            run_dir = Path(cfg.output_dir) / f"{command}-{stamp}"
        self.dir = Path(run_dir)
        if self.dir.exists() and any(self.dir.iterdir()):
            raise ValidationError([f"run directory {self.dir} already exists and is not empty; runs are immutable"])
        self.dir.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, dict] = {}
        self.outputs: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.dir / name
        self.outputs.append(p)
        return p

    def add_input(self, role: str, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise ValidationError([f"input {role}: {path} does not exist"])
        _check_against_manifest(path)
        self.inputs[role] = {"path": str(path), "sha256": _sha256(path)}
        return path

    def finish(self, extra: dict | None = None) -> Path:
        manifest = {
            "tool": "hardness-guard",
            "version": __version__,
            "command": self.command,
            "seed": self.cfg.seed,
            "config_hash": self.cfg.hash,
            "config": self.cfg.resolved(),
            "created_utc": datetime.now(timezone.utc).isoformat(),
            "inputs": self.inputs,
            "outputs": {p.name: _sha256(p) for p in sorted(set(self.outputs)) if p.is_file()},
            **(extra or {}),
        }
        p = self.dir / MANIFEST
        p.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return p


def _check_against_manifest(path: Path) -> None:
    """If ``path`` came out of an earlier run, its digest must still match that run's manifest."""
    mf = path.parent / MANIFEST
    if not mf.is_file():
        return
    try:
        recorded = json.loads(mf.read_text()).get("outputs", {})
    except json.JSONDecodeError:
        raise ValidationError([f"{mf}: unreadable manifest"]) from None
    if path.name in recorded and recorded[path.name] != _sha256(path):
        raise ValidationError([f"{path} was modified after its run wrote it (digest differs from {mf})"])


# ---------------------------------------------------------------- subcommands


def _pools(cfg: PipelineConfig):
    train, test = generate_dataset(cfg.dataset)
    cal, users, seeds = split_test_pool(test, cfg.seed, cfg.plan.calibration_fraction, cfg.plan.attack_seed_per_class)
    return {"train": train, "test": test, "hoda_calibration": cal, "user_simulation": users, "attack_seed": seeds}


def cmd_gen_data(args, cfg: PipelineConfig, run: Run) -> dict:
    pools = _pools(cfg)
    for role, pool in pools.items():
        pool.save_csv(run.path(f"{role}.csv"))
    return {"sizes": {k: len(v) for k, v in pools.items()}}


def _load_pool(run: Run, role: str, path, pool_role: str) -> SamplePool:
    try:
        return SamplePool.load_csv(run.add_input(role, path), pool_role)
    except (ValueError, IndexError) as exc:
        raise ValidationError([f"{role}: {exc}"]) from exc


def cmd_train(args, cfg: PipelineConfig, run: Run) -> dict:
    train = _load_pool(run, "train", args.train, "train") if args.train else _pools(cfg)["train"]
    if train.dim != cfg.dataset.dim:
        raise ValidationError([f"train pool has dim {train.dim}, config says {cfg.dataset.dim}"])
    model = train_with_snapshots(train, cfg.training, num_classes=cfg.dataset.num_classes)
    model.save(run.path("model.npz"))
    acc = float(np.mean(model.predict(train.X) == train.y))
    return {"m": model.m, "train_accuracy": acc, "final_loss": float(model.losses[-1])}


def _load_model(run: Run, path) -> SnapshotModel:
    try:
        return SnapshotModel.load(run.add_input("model", path))
    except (ValueError, KeyError, OSError) as exc:
        raise ValidationError([f"model: {exc}"]) from exc


def cmd_predict_matrix(args, cfg: PipelineConfig, run: Run) -> dict:
    model = _load_model(run, args.model)
    pool = _load_pool(run, "pool", args.pool, args.role)
    try:
        seq = named_sequence(args.sequence, model.m)
        if pool.dim != model.dim:
            raise ValueError(f"pool has dim {pool.dim}, model expects {model.dim}")
    except ValueError as exc:
        raise ValidationError([str(exc)]) from exc
    mat = predict_matrix(model, seq, pool.X, pool.ids)
    mat.save_csv(run.path("matrix.csv"))
    return {"rows": len(mat), "sequence": seq.to_dict()}


def cmd_calibrate(args, cfg: PipelineConfig, run: Run) -> dict:
    path = run.add_input("matrix", args.matrix)
    name = args.sequence or cfg.calibration_sequence
    try:
        mat = PredictionMatrix.load_csv(path, name)
    except (ValueError, IndexError) as exc:
        raise ValidationError([f"matrix: {exc}"]) from exc
    # named sequences all end at the last epoch, so the header pins down m
    expected = named_sequence(name, mat.sequence.indices[-1] + 1)
    if expected.indices != mat.sequence.indices:
        raise ValidationError([f"matrix columns {list(mat.sequence.indices)[:6]}... are not the {name!r} sequence"])
    ccfg = cfg.calibration
    if args.num_s is not None:
        try:
            ccfg = replace(ccfg, num_s=args.num_s)
        except ValueError as exc:
            raise ValidationError([str(exc)]) from exc
    if ccfg.num_s > len(mat):
        raise ValidationError([f"num_s={ccfg.num_s} exceeds the calibration pool size {len(mat)}"])
    result = calibrate(mat, ccfg)
    result.save(run.path("calibration.json"))
    return {"delta": result.delta, "num_s": result.num_s, "num_bins": result.num_bins}


def _base_stream(kind: str, cfg: PipelineConfig, model, seeds) -> AttackStream:
    if kind == "ood":
        return ood_stream(OodSpec("box", cfg.dataset.dim, cfg.ood_half_width), cfg.budget, cfg.seed)
    if kind in ("shifted", "control"):
        return ood_stream(OodSpec(kind, cfg.dataset.dim, dataset=cfg.dataset, shift=cfg.dataset.cluster_separation), cfg.budget, cfg.seed)
    return jbda_stream(model, seeds.X, cfg.jbda, cfg.budget, cfg.seed, targeted=kind == "jbrand")


def cmd_attack(args, cfg: PipelineConfig, run: Run) -> dict:
    kind = args.kind
    base_kind = cfg.adaptive_base if kind == "adaptive" else kind
    problems = []
    if base_kind in ("jbda", "jbrand") and not (args.model and args.seeds):
        problems.append(f"attack {base_kind} needs --model and --seeds")
    if kind == "adaptive" and not args.users:
        problems.append("attack adaptive needs --users (the benign pool the attacker samples from)")
    if problems:
        raise ValidationError(problems)
    model = _load_model(run, args.model) if args.model else None
    seeds = _load_pool(run, "seeds", args.seeds, "attack_seed") if args.seeds else None
    stream = _base_stream(base_kind, cfg, model, seeds)
    if kind == "adaptive":
        users = _load_pool(run, "users", args.users, "user_simulation")
        acfg = cfg.adaptive if args.p_n is None else AdaptiveMixConfig(args.p_n, cfg.adaptive.normal_pool_size)
        stream = adaptive_stream(acfg, cfg.budget, stream, users.X, cfg.seed)
    stream.save_csv(run.path("stream.csv"))
    tags, counts = np.unique(stream.provenance.astype(str), return_counts=True)
    return {"kind": stream.kind, "length": len(stream), "provenance": dict(zip(tags.tolist(), counts.tolist()))}


def cmd_evaluate(args, cfg: PipelineConfig, run: Run) -> dict:
    plan = cfg.plan
    if args.attack:
        plan = replace(plan, attacks=tuple(args.attack))
    if args.num_s:
        plan = replace(plan, num_s_values=tuple(args.num_s))
    if args.sequence:
        plan = replace(plan, sequences=tuple(args.sequence))
    report = run_experiment(plan, Workbench(plan))
    run.path("report.json").write_text(json.dumps(report.to_dict()) + "\n")
    emit_reports(report, run.dir, plots=False)
    for name in ["detection.csv", "distances.csv"] + [f"hardness_hist_{p}_{s}.csv" for p, s in sorted(report.hardness_histograms)]:
        run.path(name)
    rows = [{"attack": r.attack, "sequence": r.sequence, "num_s": r.num_s, "detection_rate": r.detection_rate, "fpr": r.fpr, "auc": r.auc, "delta": r.delta} for r in report.rows]
    for r in rows:
        print(f"{r['attack']:>14} {r['sequence']:>6} num_s={r['num_s']:<4} detection={r['detection_rate']:.4f} fpr={r['fpr']:.4f} auc={r['auc']:.4f} delta={r['delta']:.6f}")
    out = {"rows": rows}
    if args.check_expectations:
        mismatches = _check_expectations(report)
        out["expectation_mismatches"] = mismatches
        if mismatches:
            for m in mismatches:
                print("expectation mismatch:", m, file=sys.stderr)
            raise RuntimeError(f"{len(mismatches)} value(s) differ from the frozen expectations")
        print("all evaluated rows match the frozen expectations")
    return out


def _check_expectations(report: DetectionReport) -> list[str]:
    from .expectations import load

    exp = load()
    problems = []
    if report.seed != exp["seed"]:
        return [f"seed {report.seed} has no frozen expectations (frozen seed is {exp['seed']})"]
    for r in report.rows:
        want = exp["detection"].get(f"{r.attack}/{r.sequence}/{r.num_s}")
        if want is None:
            continue
        for k, v in want.items():
            got = getattr(r, k)
            if not np.isclose(got, v, rtol=1e-9, atol=1e-12):
                problems.append(f"{r.attack}/{r.sequence}/{r.num_s} {k}: expected {v!r}, got {got!r}")
    return problems


def cmd_report(args, cfg: PipelineConfig, run: Run) -> dict:
    src = Path(args.report)
    if src.is_dir():
        src = src / "report.json"
    try:
        report = DetectionReport.from_dict(json.loads(run.add_input("report", src).read_text()))
    except (ValueError, KeyError, TypeError) as exc:
        raise ValidationError([f"report: {exc}"]) from exc
    written = emit_reports(report, run.dir, plots=not args.no_plots)
    run.outputs.extend(written)
    return {"files": sorted(p.name for p in written)}


def _env(name: str, default):
    return os.environ.get(name, default)


def cmd_serve(args, cfg: PipelineConfig, run: Run) -> dict:
    from .service import DetectionService, StartupError, serve

    model_path = args.model or _env("HARDNESS_GUARD_MODEL", None)
    cal_path = args.calibration or _env("HARDNESS_GUARD_CALIBRATION", None)
    listen = args.listen or _env("HARDNESS_GUARD_LISTEN", f"{cfg.service['host']}:{cfg.service['port']}")
    policy = args.window_policy or _env("HARDNESS_GUARD_WINDOW_POLICY", cfg.service["window_policy"])
    action = args.action_on_flag or _env("HARDNESS_GUARD_FLAG_ACTION", cfg.service["action_on_flag"])
    problems = []
    if not model_path:
        problems.append("serve needs --model (or HARDNESS_GUARD_MODEL)")
    if not cal_path:
        problems.append("serve needs --calibration (or HARDNESS_GUARD_CALIBRATION)")
    host, _, port = listen.rpartition(":")
    if not host or not port.isdigit():
        problems.append(f"listen address {listen!r} must look like host:port")
    if policy not in WINDOW_POLICIES:
        problems.append(f"window policy must be one of {WINDOW_POLICIES}")
    if action not in FLAG_ACTIONS:
        problems.append(f"flag action must be one of {FLAG_ACTIONS}")
    if problems:
        raise ValidationError(problems)
    run.add_input("model", model_path)
    run.add_input("calibration", cal_path)
    try:
        service = DetectionService.from_files(model_path, cal_path, window_policy=policy, action_on_flag=action)
    except StartupError as exc:
        raise ValidationError([f"startup: {exc}"]) from exc
    snap = run.path("user_state_snapshot.json")

    def ready(bound):
        print(f"listening on {bound[0]}:{bound[1]}", flush=True)

    asyncio.run(serve(service, host, int(port), snapshot_path=snap, ready=ready))
    return {"queries": service.queries, "users": len(service.monitor)}


def cmd_replay(args, cfg: PipelineConfig, run: Run) -> dict:
    from .service import query_records, replay

    path = run.add_input("stream", args.stream)
    try:
        stream = AttackStream.load_csv(path)
    except (ValueError, IndexError) as exc:
        raise ValidationError([f"stream: {exc}"]) from exc
    host, _, port = (args.connect or f"{cfg.service['host']}:{cfg.service['port']}").rpartition(":")
    responses = replay(host, int(port), query_records(stream, args.user_id))
    with open(run.path("responses.ndjson"), "w") as fh:
        for r in responses:
            fh.write(json.dumps(r) + "\n")
    first_flag = next((i for i, r in enumerate(responses) if r.get("flagged")), None)
    errors = sum(1 for r in responses if not r.get("ok"))
    print(f"replayed {len(responses)} queries as {args.user_id!r}: first flag at query {first_flag}, {errors} error responses")
    return {"responses": len(responses), "first_flag": first_flag, "errors": errors}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict-matrix": cmd_predict_matrix,
    "calibrate": cmd_calibrate,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "serve": cmd_serve,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hardness-guard", description=__doc__.split("\n")[0])
    ap.add_argument("--config", help="JSON pipeline config (defaults apply to missing keys)")
    ap.add_argument("--run-dir", help="write outputs here instead of a new directory under output_dir")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic train/test pools and the test-pool split")

    p = sub.add_parser("train", help="train the target and keep one snapshot per epoch")
    p.add_argument("--train", help="train pool CSV (default: regenerate from the config)")

    p = sub.add_parser("predict-matrix", help="label a pool with every snapshot of a sequence")
    p.add_argument("--model", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--sequence", default="full", choices=SEQUENCES)
    p.add_argument("--role", default="hoda_calibration", choices=("train", "test", "hoda_calibration", "user_simulation", "attack_seed"))

    p = sub.add_parser("calibrate", help="normal histogram and threshold from a calibration-pool matrix")
    p.add_argument("--matrix", required=True)
    p.add_argument("--num-s", type=int)
    p.add_argument("--sequence", choices=SEQUENCES, help="sequence the matrix was built with (default from config)")

    p = sub.add_parser("attack", help="generate an attack query stream")
    p.add_argument("--kind", required=True, choices=ATTACK_KINDS)
    p.add_argument("--model", help="target model (jbda, jbrand)")
    p.add_argument("--seeds", help="attack seed pool CSV (jbda, jbrand)")
    p.add_argument("--users", help="benign user pool CSV (adaptive)")
    p.add_argument("--p-n", type=float, help="normal fraction for the adaptive mix")

    p = sub.add_parser("evaluate", help="run the detection experiment and write report tables")
    p.add_argument("--attack", action="append", help="attack to evaluate (repeatable; default from config)")
    p.add_argument("--num-s", type=int, action="append", help="window length (repeatable)")
    p.add_argument("--sequence", action="append", choices=SEQUENCES, help="subclassifier sequence (repeatable)")
    p.add_argument("--check-expectations", action="store_true", help="compare rows against the frozen expectations file")

    p = sub.add_parser("report", help="render CSV tables and plots from an evaluate run")
    p.add_argument("--report", required=True, help="report.json or the evaluate run directory")
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("serve", help="run the NDJSON detection service")
    p.add_argument("--model")
    p.add_argument("--calibration")
    p.add_argument("--listen", help="host:port")
    p.add_argument("--window-policy", choices=WINDOW_POLICIES)
    p.add_argument("--action-on-flag", choices=FLAG_ACTIONS)

    p = sub.add_parser("replay", help="replay an attack-stream CSV against a running service")
    p.add_argument("--stream", required=True)
    p.add_argument("--user-id", default="replay")
    p.add_argument("--connect", help="host:port (default from config)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed} if args.seed is not None else None)
        run = Run(cfg, args.command, args.run_dir)
        result = COMMANDS[args.command](args, cfg, run)
        run.finish({"result": result})
        print(f"run directory: {run.dir}")
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
