"""Operator entry points: data generation, training, distillation,
quantization, evaluation, benchmarking, offline simulation, and serving.

Every command resolves its configuration (JSON file + flags), runs under the
requested seed/thread settings, and leaves a self-describing run directory:
outputs, a resolved-config snapshot, and a manifest.

Exit codes: 0 ok, 2 config error, 3 missing prerequisite, 4 infeasible.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .engine import AvatarSession, ScriptedSource, SessionEvent, PlanError, plan_chunks, predict_latency, run_pipeline, write_telemetry
from .gateway import GatewayConfig, GatewayError
from .gateway import serve as serve_gateway
from .model.net import DenoisingNet, NetConfig
from .quant import (
    InfeasibleError,
    build_mixed_precision,
    build_quant_spec,
    calibrate,
    make_calib_batches,
    sensitivity_scan,
    validate_spec,
)
from .sched import build_schedule
from .training.data import tensorize_dataset
from .training.loop import (
    ConsistencyTrainConfig,
    DdpmTrainConfig,
    TrainHyper,
    load_denoiser,
    train_consistency,
    train_ddpm,
)
from .training.rollout import rollout_clip
from .world.audio import synth_audio
from .world.clips import LABELS
from .world.dataset import DatasetConfig, Sample, make_dataset
from .world.metrics import lipsync_score
from .world.render import AvatarIdentity, FaceParams, extract_face_params, identity_correlation, render_frame

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_INFEASIBLE = 4

VOLATILE_METRIC_KEYS = ("wall_ms",)


class ConfigError(Exception):
    """Configuration problem, reported with a field path."""


class MissingArtifact(Exception):
    pass


# ------------------------------------------------------------- config utils


def _load_json(path: str | Path | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{path}: no such config file")
    try:
        data = json.loads(p.read_text())
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _typed(cfg: dict, key: str, types, default, prefix: str = ""):
    """cfg[key] checked against types; field-path error messages."""
    path = f"{prefix}{key}"
    if key not in cfg:
        if default is ...:
            raise ConfigError(f"{path}: required")
        return default
    v = cfg[key]
    if types is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if not isinstance(v, types) or isinstance(v, bool) and types is not bool:
        want = types.__name__ if isinstance(types, type) else "/".join(t.__name__ for t in types)
        raise ConfigError(f"{path}: expected {want}, got {type(v).__name__}")
    return v


def _dataclass_from(cfg: dict, cls, prefix: str):
    """Builds a dataclass from a dict, checking field names and types."""
    known = {f.name: f for f in dataclasses.fields(cls)}
    extra = set(cfg) - set(known)
    if extra:
        raise ConfigError(f"{prefix}{sorted(extra)[0]}: unknown field")
    kwargs = {}
    for name, value in cfg.items():
        f = known[name]
        ann = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
        if ann == "float" and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if isinstance(value, list):  # JSON has no tuples
            value = tuple(value)
        want = {"int": int, "float": float, "str": str, "bool": bool}.get(ann)
        if want is not None and (not isinstance(value, want) or (want is not bool and isinstance(value, bool))):
            raise ConfigError(f"{prefix}{name}: expected {ann}, got {type(value).__name__}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix}: {exc}") from exc


def _require(path: str | Path | None, what: str) -> Path:
    if path is None:
        raise MissingArtifact(f"{what} not given")
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{what}: {path} does not exist")
    return p


def _rundir(args) -> Path:
    out = Path(args.out) if args.out else Path("runs") / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(outdir: Path, resolved: dict) -> None:
    (outdir / "config.resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _manifest(outdir: Path, command: str, artifacts: list[str], **extra) -> None:
    doc = {"command": command, "artifacts": sorted(artifacts), **extra}
    (outdir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _globals(args) -> dict:
    torch.set_num_threads(args.threads)
    if args.seed is not None:
        torch.manual_seed(args.seed)
    return {
        "seed": args.seed,
        "threads": args.threads,
        "deterministic": args.deterministic,
    }


def _strip_volatile(path: Path) -> None:
    """Removes timing fields from a metrics JSONL so reruns byte-match."""
    rows = [json.loads(line) for line in path.read_text().splitlines() if line]
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps({k: v for k, v in row.items() if k not in VOLATILE_METRIC_KEYS}) + "\n")


# --------------------------------------------------------- dataset plumbing


def save_dataset(ds, path: Path) -> None:
    arrays: dict[str, np.ndarray] = {}
    meta = []
    for i, s in enumerate(ds.samples):
        arrays[f"s{i}_reference"] = s.reference
        arrays[f"s{i}_motion"] = s.motion
        arrays[f"s{i}_target"] = s.target
        arrays[f"s{i}_envelope"] = s.envelope
        meta.append(
            {
                "identity_seed": s.identity_seed,
                "label": s.label,
                "expression": s.expression,
                "start": s.start,
                "window": s.window,
            }
        )
    header = {"config": dataclasses.asdict(ds.config), "samples": meta}
    np.savez_compressed(path, meta=json.dumps(header), **arrays)


def load_dataset_file(path: str | Path) -> list[Sample]:
    z = np.load(path, allow_pickle=False)
    header = json.loads(str(z["meta"]))
    samples = []
    for i, m in enumerate(header["samples"]):
        samples.append(
            Sample(
                reference=z[f"s{i}_reference"],
                motion=z[f"s{i}_motion"],
                target=z[f"s{i}_target"],
                envelope=z[f"s{i}_envelope"],
                **m,
            )
        )
    return samples


def _load_samples(args):
    path = _require(args.dataset, "dataset")
    return [s for s in load_dataset_file(path)]


def write_pgm(path: Path, frame: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (frame.shape[1], frame.shape[0]))
        fh.write(np.ascontiguousarray(frame, dtype=np.uint8).tobytes())


# ----------------------------------------------------------------- commands


def cmd_dataset(args) -> int:
    cfg = _load_json(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    dcfg = _dataclass_from(cfg, DatasetConfig, "dataset.")
    out = _rundir(args)
    ds = make_dataset(dcfg)
    save_dataset(ds, out / "dataset.npz")
    _snapshot(out, {**_globals(args), "dataset": dataclasses.asdict(dcfg)})
    _manifest(out, "dataset", ["dataset.npz"], samples=len(ds.samples))
    print(f"dataset: {len(ds.samples)} samples -> {out / 'dataset.npz'}")
    return EXIT_OK


def _train_common(args, cls, prefix):
    cfg = _load_json(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    hyper = _dataclass_from(cfg.pop("hyper", {}), TrainHyper, f"{prefix}.hyper.")
    tcfg_kwargs = dict(cfg, hyper=hyper)
    if cls is DdpmTrainConfig and "net" in tcfg_kwargs:
        try:
            tcfg_kwargs["net"] = NetConfig.from_dict(tcfg_kwargs["net"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{prefix}.net: {exc}") from exc
    return _dataclass_from(tcfg_kwargs, cls, f"{prefix}.")


def cmd_train_ddpm(args) -> int:
    tcfg = _train_common(args, DdpmTrainConfig, "train-ddpm")
    samples = tensorize_dataset(_load_samples(args))
    out = _rundir(args)
    t0 = time.perf_counter()
    train_ddpm(
        tcfg,
        samples,
        metrics_path=out / "metrics.jsonl",
        checkpoint_path=out / "ddpm.ckpt",
    )
    if args.deterministic:
        _strip_volatile(out / "metrics.jsonl")
    _snapshot(out, {**_globals(args), "train": dataclasses.asdict(tcfg)})
    _manifest(out, "train-ddpm", ["ddpm.ckpt", "metrics.jsonl"])
    print(f"train-ddpm: {tcfg.hyper.steps} steps in {time.perf_counter() - t0:.1f}s -> {out / 'ddpm.ckpt'}")
    return EXIT_OK


def cmd_train_lcm(args) -> int:
    tcfg = _train_common(args, ConsistencyTrainConfig, "train-lcm")
    ddpm = _require(args.checkpoint, "teacher checkpoint")
    samples = tensorize_dataset(_load_samples(args))
    out = _rundir(args)
    t0 = time.perf_counter()
    train_consistency(
        tcfg,
        ddpm,
        samples,
        metrics_path=out / "metrics.jsonl",
        checkpoint_path=out / "lcm.ckpt",
    )
    if args.deterministic:
        _strip_volatile(out / "metrics.jsonl")
    _snapshot(out, {**_globals(args), "train": dataclasses.asdict(tcfg), "teacher": str(ddpm)})
    _manifest(out, "train-lcm", ["lcm.ckpt", "metrics.jsonl"])
    print(f"train-lcm: {tcfg.hyper.steps} steps in {time.perf_counter() - t0:.1f}s -> {out / 'lcm.ckpt'}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    cfg = _load_json(args.config)
    ckpt = _require(args.checkpoint, "checkpoint")
    samples = tensorize_dataset(_load_samples(args))
    net, meta = load_denoiser(ckpt)
    net.eval().requires_grad_(False)
    sched = build_schedule(int(meta.get("num_steps", 1000)))

    chunks = _typed(cfg, "calib_chunks", int, 64)
    batch_size = _typed(cfg, "calib_batch", int, 4)
    f = _typed(cfg, "calib_f", int, 8)
    method = _typed(cfg, "method", str, "minmax")
    percentile = _typed(cfg, "percentile", float, 99.9)
    seed = args.seed if args.seed is not None else 0
    batches = make_calib_batches(net, samples, sched, chunks=chunks, batch_size=batch_size, f=f, seed=seed)
    split = max(1, len(batches) // 2)
    calib_batches, eval_batches = batches[:split], batches[split:] or batches[:split]

    stats = calibrate(net, calib_batches, method=method, percentile=percentile)
    spec = build_quant_spec(net, stats)
    report: dict = {"layers": len(spec.layers), "method": method}

    target_drop = cfg.get("target_drop")
    if target_drop is not None:
        target_drop = _typed(cfg, "target_drop", float, ...)

        with torch.no_grad():
            refs = [net(x, t, cond) for x, t, cond in eval_batches]

        def metric(denoiser) -> float:
            err = 0.0
            with torch.no_grad():
                for (x, t, cond), ref in zip(eval_batches, refs):
                    err += float(((denoiser(x, t, cond) - ref) ** 2).mean())
            return -err / len(eval_batches)

        ranking = sensitivity_scan(net, spec, eval_batches)
        result = build_mixed_precision(net, spec, ranking, metric, target_drop=target_drop)
        spec = result.spec
        report.update(
            fallback_layers=sorted(spec.fallback_names()),
            achieved_drop=result.achieved_drop,
            target_drop=target_drop,
        )
    validate_spec(net, spec)

    out = _rundir(args)
    spec.save(out / "quantspec.json")
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _snapshot(
        out,
        {
            **_globals(args),
            "checkpoint": str(ckpt),
            "calib_chunks": chunks,
            "calib_batch": batch_size,
            "calib_f": f,
            "method": method,
            "percentile": percentile,
            "target_drop": target_drop,
        },
    )
    _manifest(out, "quantize", ["quantspec.json", "report.json"])
    print(f"quantize: {report['layers']} layers -> {out / 'quantspec.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_json(args.config)
    ckpt = _require(args.checkpoint, "checkpoint")
    net, meta = load_denoiser(ckpt)
    net.eval().requires_grad_(False)
    sched = build_schedule(int(meta.get("num_steps", 1000)))

    identities = cfg.get("identities", [0, 3])
    audio_seeds = cfg.get("audio_seeds", [999])
    states = cfg.get("states", list(LABELS))
    expressions = cfg.get("expressions", [-1.0, 0.5])
    frames = _typed(cfg, "frames", int, 64)
    chunk_f = _typed(cfg, "chunk_f", int, 8)
    baseline_steps = _typed(cfg, "baseline_steps", int, 25)
    seed = args.seed if args.seed is not None else 7
    points = [{"sampler": "ddim", "steps": baseline_steps}]
    for s in args.steps or cfg.get("steps", []):
        points.append({"sampler": args.sampler, "steps": int(s)})

    def mean_r(sampler: str, steps: int, label: str) -> float:
        rs = []
        for ident in identities:
            for aseed in audio_seeds:
                env = synth_audio("speechlike", frames, seed=aseed).envelope
                clip = rollout_clip(
                    net, sched, AvatarIdentity(ident), env,
                    label=label, sampler=sampler, steps=steps, chunk_f=chunk_f, seed=seed,
                )
                r, _ = lipsync_score(clip.astype(np.float32) / 255.0, env, AvatarIdentity(ident))
                rs.append(r)
        return float(np.mean(rs))

    rows = []
    baseline: dict[str, float] = {}
    for point in points:
        for label in states:
            r = mean_r(point["sampler"], point["steps"], label)
            if point["steps"] == baseline_steps and point["sampler"] == "ddim":
                baseline[label] = r
            rows.append(
                {
                    "sampler": point["sampler"],
                    "steps": point["steps"],
                    "state": label,
                    "r": r,
                    "delta_r": r - baseline[label],
                }
            )

    expr_rows = []
    for s in expressions:
        env = synth_audio("speechlike", frames, seed=audio_seeds[0]).envelope
        clip = rollout_clip(
            net, sched, AvatarIdentity(identities[0]), env,
            label="speaking", expression=float(s),
            sampler=points[-1]["sampler"], steps=points[-1]["steps"], chunk_f=chunk_f, seed=seed,
        )
        ident = AvatarIdentity(identities[0])
        got = [extract_face_params(fr / 255.0, ident).expression for fr in clip.astype(np.float32)]
        expr_rows.append({"target": float(s), "mean_abs_err": float(np.mean(np.abs(np.array(got) - s)))})

    ident = AvatarIdentity(identities[0])
    reference = render_frame(ident, FaceParams(mouth=0.0, nod=0.0, expression=0.0))
    env = synth_audio("speechlike", frames, seed=audio_seeds[0]).envelope
    clip = rollout_clip(
        net, sched, ident, env, label="speaking",
        sampler=points[-1]["sampler"], steps=points[-1]["steps"], chunk_f=chunk_f, seed=seed,
    )
    id_corr = float(
        np.mean([identity_correlation(fr / 255.0, ident, reference) for fr in clip.astype(np.float32)])
    )

    report = {"lipsync": rows, "expression": expr_rows, "identity_correlation": id_corr}
    out = _rundir(args)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _snapshot(
        out,
        {
            **_globals(args),
            "checkpoint": str(ckpt),
            "identities": identities,
            "audio_seeds": audio_seeds,
            "states": states,
            "expressions": expressions,
            "frames": frames,
            "chunk_f": chunk_f,
            "points": points,
        },
    )
    _manifest(out, "eval", ["report.json"])
    for row in rows:
        print(
            f"eval: {row['sampler']}@{row['steps']:>2} {row['state']:<10}"
            f" r={row['r']:+.3f} dr={row['delta_r']:+.3f}"
        )
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_json(args.config)
    if args.checkpoint:
        net, meta = load_denoiser(_require(args.checkpoint, "checkpoint"))
        num_steps = int(meta.get("num_steps", 1000))
    else:
        # timing does not depend on the weights, so a fresh net is fine
        torch.manual_seed(args.seed if args.seed is not None else 0)
        net = DenoisingNet(NetConfig())
        num_steps = 1000
    net.eval().requires_grad_(False)
    sched = build_schedule(num_steps)

    steps_list = [args.steps] if args.steps else cfg.get("steps", [2, 4])
    f_list = [args.f] if args.f else cfg.get("frames", [4, 12])
    repeat = _typed(cfg, "chunks", int, 3)
    seed = args.seed if args.seed is not None else 0

    rows = []
    costs: dict[tuple[int, int], dict[str, float]] = {}
    for steps in steps_list:
        for f in f_list:
            try:
                plan = plan_chunks(f_first=f, f_steady=f, steps=steps)
            except PlanError as exc:
                raise ConfigError(str(exc)) from exc
            session = AvatarSession(
                net, sched, AvatarIdentity(0),
                plan=plan, sampler="cm", seed=seed, anchor_idle=False,
            )
            summary = run_pipeline(
                session, ScriptedSource([]), mode="sync", pace=False, max_chunks=repeat + 1
            )
            tele = summary.telemetry[1:]  # first chunk pays warmup costs
            pipe = statistics.median(t.pipe_ms for t in tele)
            denoise = statistics.median(t.denoise_ms for t in tele)
            decode = statistics.median(t.decode_ms for t in tele)
            costs[(steps, f)] = {"pipe": pipe, "decode": decode}
            rows.append(
                {
                    "steps": steps,
                    "resolution": 32,
                    "frames": f,
                    "pipe_ms": round(pipe, 2),
                    "denoise_ms": round(denoise, 2),
                }
            )

    # compare the analytic latency model against a short measured run
    predicted = None
    measured = None
    plan = plan_chunks(steps=steps_list[0])
    if (steps_list[0], plan.f_first) in costs and (steps_list[0], plan.f_steady) in costs:
        est = predict_latency(
            lambda f, s: costs[(s, f)]["pipe"],
            lambda f: costs[(steps_list[0], f)]["decode"],
            plan,
        )
        predicted = {"first_frame_ms": est.first_frame_ms, "steady_fps": est.steady_fps}
        session = AvatarSession(
            net, sched, AvatarIdentity(0), plan=plan, sampler="cm", seed=seed, anchor_idle=False
        )
        summary = run_pipeline(
            session, ScriptedSource([]), mode="threaded", pace=False, max_chunks=repeat + 1
        )
        measured = {
            "first_frame_ms": summary.first_frame_ms,
            "steady_fps": summary.steady_fps,
        }

    report = {"rows": rows, "predicted": predicted, "measured": measured}
    out = _rundir(args)
    (out / "bench.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _snapshot(out, {**_globals(args), "steps": steps_list, "frames": f_list, "chunks": repeat})
    _manifest(out, "bench", ["bench.json"])
    for row in rows:
        print(
            f"bench: steps={row['steps']} res={row['resolution']} f={row['frames']}"
            f" pipe={row['pipe_ms']}ms denoise={row['denoise_ms']}ms"
        )
    return EXIT_OK


EVENT_PAYLOAD_KEYS = {"state": ("label",), "expression": ("s",), "audio": ("envelope",), "stop": ()}


def load_event_script(path: str | Path) -> list[SessionEvent]:
    events = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            row = json.loads(line)
            ev = SessionEvent(t_ms=float(row["t_ms"]), kind=str(row["kind"]), payload=row.get("payload", {}))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path}:{ln}: bad event ({exc})") from exc
        if ev.kind not in EVENT_PAYLOAD_KEYS:
            raise ConfigError(f"{path}:{ln}: kind: unknown event kind {ev.kind!r}")
        for key in EVENT_PAYLOAD_KEYS[ev.kind]:
            if key not in ev.payload:
                raise ConfigError(f"{path}:{ln}: payload.{key}: required for {ev.kind!r} events")
        events.append(ev)
    return events


def cmd_simulate(args) -> int:
    cfg = _load_json(args.config)
    ckpt = _require(args.checkpoint, "checkpoint")
    net, meta = load_denoiser(ckpt)
    net.eval().requires_grad_(False)
    sched = build_schedule(int(meta.get("num_steps", 1000)))

    events = load_event_script(args.script) if args.script else []
    duration_ms = _typed(cfg, "duration_ms", float, 2000.0)
    plan_cfg = cfg.get("plan", {})
    if not isinstance(plan_cfg, dict):
        raise ConfigError("plan: expected object")
    seed = args.seed if args.seed is not None else 0
    try:
        plan = plan_chunks(**plan_cfg)
        session = AvatarSession(
            net, sched, AvatarIdentity(_typed(cfg, "avatar_seed", int, 0)),
            plan=plan,
            sampler=_typed(cfg, "sampler", str, "cm"),
            seed=seed,
        )
    except (PlanError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    source = ScriptedSource(events, duration_ms=duration_ms)
    frames_dir = _rundir(args) / "frames"
    frames_dir.mkdir(exist_ok=True)
    written: list[str] = []

    def sink(msg: dict) -> None:
        if msg["type"] == "frame":
            name = f"frame_{msg['index']:05d}.pgm"
            write_pgm(frames_dir / name, msg["pixels"])
            written.append(f"frames/{name}")

    summary = run_pipeline(
        session, source, sink=sink, mode=_typed(cfg, "mode", str, "sync"), pace=False
    )
    out = _rundir(args)
    write_telemetry(summary.telemetry, out / "telemetry.jsonl")
    (out / "summary.json").write_text(
        json.dumps(
            {
                "chunks": summary.chunks,
                "frames": summary.frames,
                "acks": summary.acks,
                "labels": [t.label for t in summary.telemetry],
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    _snapshot(
        out,
        {
            **_globals(args),
            "checkpoint": str(ckpt),
            "script": str(args.script) if args.script else None,
            "duration_ms": duration_ms,
            "plan": plan_cfg,
            "events": len(events),
        },
    )
    _manifest(out, "simulate", ["telemetry.jsonl", "summary.json"] + written)
    print(f"simulate: {summary.frames} frames over {summary.chunks} chunks -> {frames_dir}")
    return EXIT_OK


def cmd_serve(args) -> int:
    try:
        gcfg = GatewayConfig.from_sources(args.config)
    except GatewayError as exc:
        raise ConfigError(str(exc)) from exc
    _require(gcfg.checkpoint, "checkpoint")
    if gcfg.quant_spec is not None:
        _require(gcfg.quant_spec, "quantization spec")
    _globals(args)
    print(f"serving on {gcfg.host}:{gcfg.port} (checkpoint {gcfg.checkpoint})")
    serve_gateway(gcfg)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avatarstream", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=False, checkpoint=False):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", default=None, help="run directory (default runs/<command>)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--deterministic", action="store_true")
        if dataset:
            p.add_argument("--dataset", default=None, help="dataset.npz from the dataset command")
        if checkpoint:
            p.add_argument("--checkpoint", default=None)

    p = sub.add_parser("dataset", help="generate a synthetic talking-head dataset")
    common(p)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train-ddpm", help="train the diffusion teacher")
    common(p, dataset=True)
    p.set_defaults(func=cmd_train_ddpm)

    p = sub.add_parser("train-lcm", help="distill a few-step consistency model")
    common(p, dataset=True, checkpoint=True)
    p.set_defaults(func=cmd_train_lcm)

    p = sub.add_parser("quantize", help="calibrate and build an INT8 spec")
    common(p, dataset=True, checkpoint=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="lip-sync / expression / identity report")
    common(p, checkpoint=True)
    p.add_argument("--steps", type=int, action="append", default=None)
    p.add_argument("--sampler", default="cm")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure chunk latency on this machine")
    common(p, checkpoint=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--f", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("simulate", help="run a scripted offline session")
    common(p, checkpoint=True)
    p.add_argument("--script", default=None, help="JSONL event file: {t_ms, kind, payload}")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve", help="start the websocket gateway")
    common(p)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
