"""Command-line front end.

Exit codes: 0 success, 2 depth-budget violation, 3 trace divergence,
4 unreadable input, 5 invalid configuration, 6 missing keys.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import datetime as _dt
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import pipelines as P
from .ckks import MissingGaloisKey
from .config import Config, ConfigError, apply_overrides, load_config
from .formats import FormatError, RadarCube, load_keys, read_cube, save_keys, write_cube
from .oracle import format_fidelity, standard_vitals
from .synth import generate_cube, random_gesture_spec, vitals_fixture_spec
from .vm import DepthBudgetError, trace_equals

logger = logging.getLogger("oblivdsp")

EXIT_OK, EXIT_DEPTH, EXIT_TRACE, EXIT_INPUT, EXIT_CONFIG, EXIT_KEYS = 0, 2, 3, 4, 5, 6

DEFAULT_GESTURE_SHAPE = (100, 3, 16, 32)
DEFAULT_GESTURE_RATE = 33.0


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def fixture_path() -> Path:
    return Path(str(resources.files("oblivdsp") / "data" / "vitals_fixture.cube"))


def _shape(text: str):
    try:
        dims = tuple(int(x) for x in text.split(","))
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"bad shape {text!r}") from exc
    if len(dims) != 4 or min(dims) < 1:
        raise CliError(EXIT_CONFIG, "shape must be F,A,R,D with positive sizes")
    return dims


def _load_cube(path) -> RadarCube:
    try:
        return read_cube(path)
    except (FormatError, OSError, UnicodeDecodeError) as exc:
        raise CliError(EXIT_INPUT, f"unreadable input {path}: {exc}") from exc


def build_config(args) -> Config:
    cfg = load_config(args.config)
    for item in args.set or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        apply_overrides(cfg, section.strip(), {name.strip(): value})
    if getattr(args, "backend", None):
        cfg.run.backend = args.backend
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    if getattr(args, "profile", None):
        cfg.ckks.profile = args.profile
    if getattr(args, "taylor_order", None):
        cfg.vitals.taylor_order = args.taylor_order
    if getattr(args, "weights", None):
        cfg.gesture.weights = args.weights
    return cfg.validate()


def out_dir(args) -> Path:
    d = Path(args.out or os.environ.get("OBLIVDSP_OUT") or "oblivdsp_out")
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_report(args, name: str, cfg: Config, body: dict) -> Path:
    report = {
        "command": args.command,
        "config_digest": cfg.digest(),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        **body,
    }
    path = out_dir(args) / name
    path.write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x).__name__)


def _session(cfg: Config, pipeline: str, shape, frame_rate, layers, keys_dir=None):
    params = cfg.ckks.params()
    if cfg.run.backend == "exactsim":
        return P.make_session("exactsim", params)
    if keys_dir:
        try:
            keys = load_keys(keys_dir)
        except FileNotFoundError as exc:
            raise CliError(EXIT_KEYS, str(exc)) from exc
        except FormatError as exc:
            raise CliError(EXIT_KEYS, f"key material unusable: {exc}") from exc
        if keys.params.digest() != params.digest():
            raise CliError(EXIT_KEYS, "keys were generated for different CKKS parameters")
        return P.make_session("ckks", params, keys=keys)
    rots = P.dry_run(pipeline, cfg, shape, frame_rate, params, layers).trace.rotations()
    return P.make_session("ckks", params, rots, seed=cfg.run.seed)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_depth_audit(args, cfg: Config) -> int:
    params = cfg.ckks.params()
    pipes = ["vitals", "gesture"] if args.pipeline == "both" else [args.pipeline]
    body = {}
    for name in pipes:
        try:
            if name == "vitals":
                cube = P.zero_cube_like((200, 1, 16, 1), 20.0)
                run = P.run_vitals(cube, cfg.vitals, P.make_session("levelsim", params))
            else:
                # per-frame circuits are identical and frames are merged by
                # addition, so one frame yields the same ledger as many
                f, a, r, d = DEFAULT_GESTURE_SHAPE
                shape = (f if args.full else 1, a, r, d)
                layers = P.fc_layers_for(cfg.gesture)
                run = P.run_gesture(P.zero_cube_like(shape, DEFAULT_GESTURE_RATE), cfg.gesture, layers,
                                    P.make_session("levelsim", params))
        except DepthBudgetError as exc:
            print(f"{name}: DEPTH BUDGET EXCEEDED at stage '{exc.stage}': {exc}")
            return EXIT_DEPTH
        print(f"{name} (budget {params.max_level})")
        print(P.format_ledger(run.ledger))
        print(f"total depth: {run.ledger[-1].cumulative}")
        print()
        body[name] = [vars(r) for r in run.ledger]
    if not args.no_report:
        write_report(args, "depth_audit.json", cfg, {"ledgers": body})
    return EXIT_OK


def cmd_synth(args, cfg: Config) -> int:
    if args.kind == "vitals":
        spec = vitals_fixture_spec(args.noise)
        if args.frames:
            spec.frames = args.frames
    else:
        f, a, r, d = _shape(args.shape) if args.shape else DEFAULT_GESTURE_SHAPE
        spec = random_gesture_spec(np.random.default_rng(args.seed), a, r, d, f, DEFAULT_GESTURE_RATE)
    try:
        cube = generate_cube(spec, seed=args.seed)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    path = Path(args.output)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_cube(cube, path)
    print(f"wrote {path} shape={cube.shape}")
    return EXIT_OK


def cmd_keygen(args, cfg: Config) -> int:
    params = cfg.ckks.params()
    rots = set()
    layers = P.fc_layers_for(cfg.gesture)
    for name in (["vitals", "gesture"] if args.pipeline == "both" else [args.pipeline]):
        if name == "vitals":
            shape = _shape(args.vitals_shape)
            rots |= P.dry_run("vitals", cfg, shape, args.frame_rate, params).trace.rotations()
        else:
            shape = _shape(args.gesture_shape)
            rots |= P.dry_run("gesture", cfg, shape, DEFAULT_GESTURE_RATE, params, layers).trace.rotations()
    from .ckks import keygen

    t0 = time.time()
    keys = keygen(params, sorted(rots), seed=cfg.run.seed)
    save_keys(keys, args.keys)
    print(f"{params.tag}: N={params.n}, depth={params.max_level}, {len(keys.galois)} Galois keys "
          f"-> {args.keys} ({time.time() - t0:.1f} s)")
    return EXIT_OK


def _vitals_once(cube, cfg: Config, keys_dir=None):
    session = _session(cfg, "vitals", cube.shape, cube.frame_rate, None, keys_dir)
    try:
        return P.run_vitals(cube, cfg.vitals, session)
    except MissingGaloisKey as exc:
        raise CliError(EXIT_KEYS, f"missing Galois key: {exc}") from exc


def cmd_run_vitals(args, cfg: Config) -> int:
    cube = _load_cube(args.input or fixture_path())
    run = _vitals_once(cube, cfg, args.keys)
    res = run.result
    fmt = lambda v: "n/a" if v is None else f"{v:.3f}"  # noqa: E731
    print(f"backend={run.backend} target_bin={fmt(res.target_bin)} rr_bpm={fmt(res.rr_bpm)} "
          f"hr_bpm={fmt(res.hr_bpm)} low_confidence={res.low_confidence}")
    body = run.report(cfg.digest())
    if args.standard:
        std = standard_vitals(P.client_preprocess(cube, "vital", cfg.vitals.antenna), cube.frame_rate,
                              cfg.vitals.resp_band, cfg.vitals.heart_band, cfg.vitals.numtaps)
        body["standard"] = {"target_bin": std.target_bin, "rr_bpm": std.rr_bpm, "hr_bpm": std.hr_bpm}
    path = write_report(args, "vitals_report.json", cfg, body)
    (out_dir(args) / "vitals_trace.txt").write_text(run.trace.dump())
    print(f"report: {path}")
    return EXIT_OK


def cmd_run_gesture(args, cfg: Config) -> int:
    cube = _load_cube(args.input) if args.input else generate_cube(
        random_gesture_spec(np.random.default_rng(cfg.run.seed), *DEFAULT_GESTURE_SHAPE[1:],
                            DEFAULT_GESTURE_SHAPE[0], DEFAULT_GESTURE_RATE), seed=cfg.run.seed)
    try:
        layers = P.fc_layers_for(cfg.gesture)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_INPUT, f"unreadable weights: {exc}") from exc
    try:
        plan = P.gesture_plan(cfg.gesture, cube.shape, cfg.ckks.params().slot_count, layers)
    except ValueError as exc:  # capacity, chirp count or weight shapes
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    session = _session(cfg, "gesture", cube.shape, cube.frame_rate, layers, args.keys)
    try:
        run = P.run_gesture(cube, cfg.gesture, layers, session, plan)
    except MissingGaloisKey as exc:
        raise CliError(EXIT_KEYS, f"missing Galois key: {exc}") from exc
    print(f"backend={run.backend} predicted={run.result.predicted} "
          f"logits={np.array2string(run.result.logits, precision=4)}")
    path = write_report(args, "gesture_report.json", cfg, run.report(cfg.digest()))
    (out_dir(args) / "gesture_trace.txt").write_text(run.trace.dump())
    print(f"report: {path}")
    return EXIT_OK


def fidelity_for(pipeline: str, cube: RadarCube, cfg: Config, layers=None, seed: int = 0):
    """Run one input on ExactSim and CKKS and compare per-kernel probes."""
    params = cfg.ckks.params()
    if pipeline == "vitals":
        plain = P.run_vitals(cube, cfg.vitals, P.make_session("exactsim", params))
        rots = P.dry_run("vitals", cfg, cube.shape, cube.frame_rate, params).trace.rotations()
        enc_session = P.make_session("ckks", params, rots, seed=seed)
        enc = P.run_vitals(cube, cfg.vitals, enc_session)
    else:
        plain = P.run_gesture(cube, cfg.gesture, layers, P.make_session("exactsim", params))
        rots = P.dry_run("gesture", cfg, cube.shape, cube.frame_rate, params, layers).trace.rotations()
        enc_session = P.make_session("ckks", params, rots, seed=seed)
        enc = P.run_gesture(cube, cfg.gesture, layers, enc_session)
    top = params.max_level
    sim_client = P.make_session("exactsim", params).client
    rows = P.fidelity_rows(
        P.decrypt_probes(enc_session.client, enc.outputs, top),
        P.decrypt_probes(sim_client, plain.outputs, top),
    )
    return rows, enc, plain


def cmd_fidelity(args, cfg: Config) -> int:
    rows = []
    body = {}
    if args.pipeline in ("vitals", "both"):
        cube = _load_cube(args.input or fixture_path())
        r, enc, plain = fidelity_for("vitals", cube, cfg, seed=cfg.run.seed)
        rows += r
        body["vitals"] = {"ckks": enc.result.to_dict(), "exactsim": plain.result.to_dict()}
    if args.pipeline in ("gesture", "both"):
        f, a, r_, d = _shape(args.gesture_shape)
        cube = generate_cube(random_gesture_spec(np.random.default_rng(cfg.run.seed), a, r_, d, f), seed=cfg.run.seed)
        dims = (a * r_ * d,) + tuple(cfg.gesture.fc_dims[1:])
        gcfg = dataclasses.replace(cfg, gesture=dataclasses.replace(cfg.gesture, fc_dims=dims))
        layers = P.fc_layers_for(gcfg.gesture) if cfg.gesture.weights else P.default_fc_layers(
            gcfg.gesture.fc_dims, cfg.gesture.weight_seed)
        r, enc, plain = fidelity_for("gesture", cube, gcfg, layers, seed=cfg.run.seed)
        rows += r
        body["gesture"] = {"ckks": enc.result.to_dict(), "exactsim": plain.result.to_dict()}
    print(cfg.ckks.params().tag)
    print(format_fidelity(rows))
    body["kernels"] = [vars(r) for r in rows]
    write_report(args, "fidelity_report.json", cfg, body)
    return EXIT_OK


def _random_cube(pipeline: str, shape, seed: int) -> RadarCube:
    rng = np.random.default_rng(seed)
    if pipeline == "vitals":
        spec = vitals_fixture_spec(float(rng.uniform(0.0, 0.1)))
        f, a, r, d = shape
        spec.frames, spec.antennas, spec.range_bins, spec.chirps = f, a, r, d
        t = spec.targets[0]
        t.range_bin = int(rng.integers(0, r))
        t.amplitude = float(rng.uniform(0.3, 1.5))
        t.motions = [(float(rng.uniform(0.15, 0.5)), float(rng.uniform(0.001, 0.005))),
                     (float(rng.uniform(0.9, 2.0)), float(rng.uniform(1e-4, 5e-4)))]
        return generate_cube(spec, seed=seed)
    f, a, r, d = shape
    return generate_cube(random_gesture_spec(rng, a, r, d, f, DEFAULT_GESTURE_RATE), seed=seed)


def trace_of(pipeline: str, cfg: Config, shape, seed: int, layers=None):
    """Trace of one ExactSim run on a seeded random cube of the given shape."""
    cube = _random_cube(pipeline, shape, seed)
    params = cfg.ckks.params()
    session = P.make_session("exactsim", params)
    if pipeline == "vitals":
        return P.run_vitals(cube, cfg.vitals, session).trace
    return P.run_gesture(cube, cfg.gesture, layers, session).trace


def _trace_job(job):
    pipeline, cfg, shape, seed, layers = job
    return trace_of(pipeline, cfg, shape, seed, layers).dump()


def cmd_trace_check(args, cfg: Config) -> int:
    from .vm import TraceRecord

    if args.shape:
        shape = _shape(args.shape)
    else:
        shape = (200, 1, 16, 1) if args.pipeline == "vitals" else DEFAULT_GESTURE_SHAPE
    layers = None
    if args.pipeline == "gesture":
        layers = P.fc_layers_for(cfg.gesture)
    trials = args.trials or cfg.run.trials
    jobs = [(args.pipeline, cfg, shape, cfg.run.seed + i, layers) for i in range(trials)]
    if args.compare_shape:
        jobs.append((args.pipeline, cfg, _shape(args.compare_shape), cfg.run.seed + trials, layers))
    workers = args.jobs or cfg.run.jobs
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as ex:
            dumps = list(ex.map(_trace_job, jobs))
    else:
        dumps = [_trace_job(j) for j in jobs]
    traces = [TraceRecord.parse(d) for d in dumps]
    ref = traces[0]
    same = 0
    result = {"trials": trials, "shape": list(shape), "reference_digest": ref.digest(), "divergences": []}
    for i, t in enumerate(traces):
        ok, idx = trace_equals(ref, t)
        if ok:
            same += i < trials
        else:
            result["divergences"].append({"trial": i, "index": idx})
            ev_a = ref.events[idx].line() if idx < len(ref) else "<end>"
            ev_b = t.events[idx].line() if idx < len(t) else "<end>"
            print(f"DIVERGED trial {i} at event {idx}: {ev_a!r} vs {ev_b!r}")
    (out_dir(args) / f"trace_{args.pipeline}.txt").write_text(dumps[0])
    write_report(args, f"trace_check_{args.pipeline}.json", cfg, result)
    if result["divergences"]:
        return EXIT_TRACE
    print(f"IDENTICAL ({same}/{trials}) events={len(ref)} digest={ref.digest()[:16]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--out", help="output directory (default $OBLIVDSP_OUT or ./oblivdsp_out)")
    common.add_argument("--seed", type=int, help="run seed")
    common.add_argument("-v", "--verbose", action="store_true")

    backend = argparse.ArgumentParser(add_help=False)
    backend.add_argument("--backend", choices=["exactsim", "ckks"])
    backend.add_argument("--profile", choices=["desk", "standard128"])
    backend.add_argument("--keys", help="key directory from 'keygen' (ckks backend)")

    p = argparse.ArgumentParser(prog="oblivdsp", description="Encrypted radar DSP over a leveled slot VM.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("keygen", parents=[common], help="generate CKKS keys for a pipeline")
    s.add_argument("--pipeline", choices=["vitals", "gesture", "both"], default="vitals")
    s.add_argument("--keys", required=True, help="output key directory")
    s.add_argument("--profile", choices=["desk", "standard128"])
    s.add_argument("--vitals-shape", default="200,1,16,1")
    s.add_argument("--gesture-shape", default=",".join(map(str, DEFAULT_GESTURE_SHAPE)))
    s.add_argument("--frame-rate", type=float, default=20.0)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic radar cube")
    s.add_argument("--kind", choices=["vitals", "gesture"], default="vitals")
    s.add_argument("--output", required=True, help=".cube (binary) or .csv")
    s.add_argument("--shape", help="F,A,R,D for gesture scenes")
    s.add_argument("--frames", type=int, help="frame count for vitals scenes")
    s.add_argument("--noise", type=float, default=0.05)

    s = sub.add_parser("run-vitals", parents=[common, backend], help="vital-sign pipeline")
    s.add_argument("--input", help="cube file (default: bundled fixture)")
    s.add_argument("--taylor-order", type=int, choices=[1, 3])
    s.add_argument("--standard", action="store_true", help="also run the standard plaintext baseline")

    s = sub.add_parser("run-gesture", parents=[common, backend], help="classification pipeline")
    s.add_argument("--input", help="cube file (default: seeded synthetic scene)")
    s.add_argument("--weights", help=".npz with W0,b0,W1,b1,...")

    s = sub.add_parser("fidelity", parents=[common], help="per-kernel CKKS vs ExactSim report")
    s.add_argument("--pipeline", choices=["vitals", "gesture", "both"], default="both")
    s.add_argument("--input", help="vitals cube (default: bundled fixture)")
    s.add_argument("--gesture-shape", default="4,2,4,8")
    s.add_argument("--profile", choices=["desk", "standard128"])
    s.add_argument("--taylor-order", type=int, choices=[1, 3])

    s = sub.add_parser("trace-check", parents=[common], help="obliviousness check over random inputs")
    s.add_argument("--pipeline", choices=["vitals", "gesture"], default="vitals")
    s.add_argument("--trials", type=int)
    s.add_argument("--jobs", type=int)
    s.add_argument("--shape", help="F,A,R,D")
    s.add_argument("--compare-shape", help="add one run with a different shape (expect divergence)")

    s = sub.add_parser("depth-audit", parents=[common], help="print the per-stage depth ledger")
    s.add_argument("--pipeline", choices=["vitals", "gesture", "both"], default="both")
    s.add_argument("--taylor-order", type=int, choices=[1, 3])
    s.add_argument("--full", action="store_true", help="evaluate every gesture frame")
    s.add_argument("--no-report", action="store_true")
    return p


COMMANDS = {
    "keygen": cmd_keygen,
    "synth": cmd_synth,
    "run-vitals": cmd_run_vitals,
    "run-gesture": cmd_run_gesture,
    "fidelity": cmd_fidelity,
    "trace-check": cmd_trace_check,
    "depth-audit": cmd_depth_audit,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DepthBudgetError as exc:
        print(f"error: depth budget exceeded at stage '{exc.stage}': {exc}", file=sys.stderr)
        return EXIT_DEPTH
    except FormatError as exc:
        print(f"error: unreadable input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
