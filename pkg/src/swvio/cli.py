"""Command-line harness: a thin HTTP client of the compute service.

All numerics run in the FastAPI app; the CLI only reads files, posts
JSON, and writes results.  By default the app is mounted in-process
(httpx ASGI transport), so no server is needed; pass --server URL to
target a running instance (`uvicorn swvio.service.app:app`).

Subcommands: gen, solve, calibrate, run-adaptive, model.
Exit codes: 0 ok, 2 invalid input/config, 3 solver divergence,
4 insufficient calibration.  The default output directory comes from
$SWVIO_OUT (falling back to '.').

Each command writes a manifest.json listing its inputs, seeds and the
sha256 of every output file; identical reruns produce identical hashes.
"""

import argparse
import hashlib
import json
import os
import sys
import tempfile

import httpx

from . import __version__
from .model import dumps
from .service.app import app

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SOLVER = 3
EXIT_CALIBRATION = 4


def _client(server: str = None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=600.0)
    # sync httpx client over the in-process ASGI app
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient
    return TestClient(app)


def _fail(code: int, message: str):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(code)


def _check(resp: httpx.Response):
    if resp.status_code == 200:
        return resp.json()
    try:
        detail = resp.json()["detail"]
    except Exception:
        _fail(EXIT_INPUT, f"service error {resp.status_code}: {resp.text}")
    kind = detail.get("type", "invalid_input")
    msg = detail.get("message", str(detail))
    if kind == "divergence":
        _fail(EXIT_SOLVER, msg)
    if kind == "calibration":
        _fail(EXIT_CALIBRATION, msg)
    _fail(EXIT_INPUT, msg)


def _atomic_write(path: str, text: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: str, command: str, inputs: dict, outputs: list,
                    seeds=None):
    manifest = {
        "command": command,
        "version": __version__,
        "inputs": inputs,
        "seeds": seeds or [],
        "outputs": [{"path": os.path.basename(p), "sha256": _sha256(p)}
                    for p in sorted(outputs)],
    }
    _atomic_write(os.path.join(out_dir, "manifest.json"), dumps(manifest) + "\n")


def _out_dir(args) -> str:
    out = args.out or os.environ.get("SWVIO_OUT", ".")
    os.makedirs(out, exist_ok=True)
    return out


def _load_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        _fail(EXIT_INPUT, f"file not found: {path}")
    except json.JSONDecodeError as err:
        _fail(EXIT_INPUT, f"{path}: invalid JSON at line {err.lineno}: {err.msg}")


def _trajectory_csv(rows) -> str:
    lines = ["kf_id,px,py,pz,qw,qx,qy,qz"]
    for r in rows:
        vals = [format(r[k], ".17g") for k in
                ("px", "py", "pz", "qw", "qx", "qy", "qz")]
        lines.append(f"{r['kf_id']}," + ",".join(vals))
    return "\n".join(lines) + "\n"


def _lm_options(args) -> dict:
    opts = {}
    if getattr(args, "iterations", None) is not None:
        opts["max_iterations"] = args.iterations
    if getattr(args, "mu0", None) is not None:
        opts["mu0"] = args.mu0
    return opts


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    out = _out_dir(args)
    config = _load_json(args.config) if args.config else {}
    payload = {"config": config}
    if args.seed is not None:
        payload["seed"] = args.seed
    with _client(args.server) as client:
        data = _check(client.post("/generate", json=payload))
    stream_path = os.path.join(out, "stream.json")
    gt_path = os.path.join(out, "ground_truth.json")
    _atomic_write(stream_path, dumps(data["stream"]) + "\n")
    _atomic_write(gt_path, dumps(data["ground_truth"]) + "\n")
    seed = data["stream"].get("meta", {}).get("seed")
    _write_manifest(out, "gen", {"config": args.config or "<defaults>"},
                    [stream_path, gt_path], seeds=[seed] if seed is not None else [])
    n = len(data["stream"]["windows"])
    print(f"wrote {stream_path} ({n} windows), {gt_path}")
    return EXIT_OK


def cmd_solve(args) -> int:
    out = _out_dir(args)
    payload = {"stream": _load_json(args.stream), "lm": _lm_options(args)}
    if args.gt:
        payload["ground_truth"] = _load_json(args.gt)
    with _client(args.server) as client:
        data = _check(client.post("/solve", json=payload))
    traj_path = os.path.join(out, "trajectory.csv")
    stats_path = args.stats or os.path.join(out, "stats.json")
    _atomic_write(traj_path, _trajectory_csv(data["trajectory"]))
    _atomic_write(stats_path, dumps(data["stats"]) + "\n")
    _write_manifest(out, "solve", {"stream": args.stream, "gt": args.gt},
                    [traj_path, stats_path])
    if data.get("ate") is not None:
        print(f"ATE: {data['ate']:.9g} m")
    print(f"wrote {traj_path}, {stats_path}")
    return EXIT_OK


def _collect_scenes(scene_dir: str) -> list:
    scenes = []
    for root, _, files in sorted(os.walk(scene_dir)):
        if "stream.json" in files and "ground_truth.json" in files:
            scenes.append((os.path.join(root, "stream.json"),
                           os.path.join(root, "ground_truth.json")))
    for name in sorted(os.listdir(scene_dir)):
        if name.endswith(".stream.json"):
            gt = os.path.join(scene_dir, name[:-len(".stream.json")] + ".gt.json")
            if os.path.exists(gt):
                scenes.append((os.path.join(scene_dir, name), gt))
    return scenes


def cmd_calibrate(args) -> int:
    out = _out_dir(args)
    pairs = _collect_scenes(args.scenes)
    if not pairs:
        _fail(EXIT_INPUT, f"no scenes (stream.json + ground_truth.json) under {args.scenes}")
    scenes = []
    seeds = []
    for stream_path, gt_path in pairs:
        stream = _load_json(stream_path)
        scenes.append({"stream": stream, "ground_truth": _load_json(gt_path)})
        seed = stream.get("meta", {}).get("seed")
        if seed is not None:
            seeds.append(seed)
    payload = {"scenes": scenes, "target_accuracy": args.target,
               "bucket_width": args.bucket_width,
               "max_iterations": args.budget_iterations,
               "max_schur_lanes": args.budget_lanes,
               "max_update_units": args.budget_units,
               "lm": _lm_options(args), "seeds": seeds}
    with _client(args.server) as client:
        data = _check(client.post("/calibrate", json=payload))
    table_path = os.path.join(out, "table.json")
    _atomic_write(table_path, dumps(data["table"]) + "\n")
    _write_manifest(out, "calibrate", {"scenes": args.scenes},
                    [table_path], seeds=seeds)
    print(f"wrote {table_path} ({len(data['table']['entries'])} buckets)")
    return EXIT_OK


def cmd_run_adaptive(args) -> int:
    out = _out_dir(args)
    payload = {"stream": _load_json(args.stream),
               "table": _load_json(args.table),
               "lm": _lm_options(args),
               "baseline": bool(args.baseline)}
    if args.gt:
        payload["ground_truth"] = _load_json(args.gt)
    with _client(args.server) as client:
        data = _check(client.post("/run-adaptive", json=payload))
    traj_path = os.path.join(out, "trajectory.csv")
    trace_path = os.path.join(out, "activity_trace.json")
    stats_path = args.stats or os.path.join(out, "stats.json")
    _atomic_write(traj_path, _trajectory_csv(data["trajectory"]))
    _atomic_write(trace_path, dumps(data["activity_trace"]) + "\n")
    _atomic_write(stats_path, dumps(data["stats"]) + "\n")
    outputs = [traj_path, trace_path, stats_path]
    if data.get("baseline_trace") is not None:
        base_path = os.path.join(out, "baseline_trace.json")
        _atomic_write(base_path, dumps(data["baseline_trace"]) + "\n")
        outputs.append(base_path)
    _write_manifest(out, "run-adaptive",
                    {"stream": args.stream, "table": args.table, "gt": args.gt},
                    outputs)
    for d in data["diagnostics"]:
        print(f"diagnostic: {d}")
    if data.get("ate") is not None:
        print(f"ATE: {data['ate']:.9g} m")
    if data.get("delta_ate") is not None:
        print(f"delta ATE (adaptive - max-budget): {data['delta_ate']:.9g} m")
    print(f"wrote {', '.join(outputs)}")
    return EXIT_OK


def cmd_model(args) -> int:
    out = _out_dir(args)
    outputs = []
    with _client(args.server) as client:
        report = _check(client.post("/model/schedule", json={
            "n": args.n, "m": args.m, "schur_lanes": args.lanes,
            "n_keyframes": args.kf, "n_features": args.features,
            "co_obs_span": args.span,
            "n_schur_features": args.schur_features}))
        report_path = os.path.join(out, "cost_report.json")
        _atomic_write(report_path, dumps(report) + "\n")
        outputs.append(report_path)
        if args.sweep:
            data = _check(client.post("/model/sweep", json={}))
            lines = ["n,m,mode,cycles,speedup"]
            for r in data["rows"]:
                lines.append(f"{r['n']},{r['m']},{r['mode']},{r['cycles']},"
                             f"{format(r['speedup'], '.17g')}")
            sweep_path = os.path.join(out, "sweep.csv")
            _atomic_write(sweep_path, "\n".join(lines) + "\n")
            outputs.append(sweep_path)
    _write_manifest(out, "model", {}, outputs)
    sched = report["schedule"]
    print(f"n={sched['n']} m={sched['m']}: sequential(m=1) {sched['sequential_cycles_m1']} cycles, "
          f"pipelined {sched['pipelined_cycles']} cycles, "
          f"speedup {sched['speedup_pipelined_vs_seq1']:.4g}x")
    if args.audit:
        ratios = report["memory"]["ratios"]
        print(f"imu_jacobian reduction: {100.0 * ratios['imu_jacobian_reduction']:.1f}% "
              f"(126/450 words per factor)")
        print(f"schur storage ratio (X folded into W^T): "
              f"{ratios['schur_x_saving']:.4g}x")
        print(f"structured S vs dense: {ratios['structured_s_vs_dense']:.4g}x, "
              f"vs symmetric half: {ratios['structured_s_vs_half']:.4g}x")
    print(f"wrote {', '.join(outputs)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="swvio",
        description="Sliding-window visual-inertial backend experiments. "
                    "File formats: window streams and reports are JSON "
                    "(floats at 17 significant digits), trajectories are CSV "
                    "(kf_id,px,py,pz,qw,qx,qy,qz).")
    p.add_argument("--server", help="URL of a running service; default runs "
                                    "the app in-process")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic window stream")
    g.add_argument("--config", help="SceneConfig JSON path (defaults used if omitted)")
    g.add_argument("--seed", type=int, help="override the config seed")
    g.add_argument("--out", help="output directory (default $SWVIO_OUT or .)")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="solve every window of a stream")
    s.add_argument("stream", help="window-stream JSON path")
    s.add_argument("--gt", help="ground-truth JSON; prints ATE when given")
    s.add_argument("--stats", help="write SolveStats JSON to this path")
    s.add_argument("--iterations", type=int, help="LM iteration cap")
    s.add_argument("--mu0", type=float, help="initial LM damping")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("calibrate", help="build the feature-count lookup table")
    c.add_argument("--scenes", required=True,
                   help="directory of scenes (stream.json + ground_truth.json "
                        "per subdirectory, or paired *.stream.json/*.gt.json)")
    c.add_argument("--target", type=float, required=True,
                   help="target accuracy (ATE bound, meters)")
    c.add_argument("--bucket-width", type=int, default=50)
    c.add_argument("--budget-iterations", type=int, default=10)
    c.add_argument("--budget-lanes", type=int, default=4)
    c.add_argument("--budget-units", type=int, default=8)
    c.add_argument("--mu0", type=float, help="initial LM damping")
    c.add_argument("--out", help="output directory")
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("run-adaptive", help="adaptive run over a stream")
    r.add_argument("stream", help="window-stream JSON path")
    r.add_argument("--table", required=True, help="lookup-table JSON path")
    r.add_argument("--baseline", action="store_true",
                   help="also run the max-budget arm and report delta ATE")
    r.add_argument("--gt", help="ground-truth JSON; prints ATE when given")
    r.add_argument("--stats", help="write SolveStats JSON to this path")
    r.add_argument("--mu0", type=float, help="initial LM damping")
    r.add_argument("--out", help="output directory")
    r.set_defaults(func=cmd_run_adaptive)

    m = sub.add_parser("model", help="hardware cost model reports")
    m.add_argument("--n", type=int, default=165, help="Cholesky matrix size")
    m.add_argument("--m", type=int, default=6, help="Update units")
    m.add_argument("--lanes", type=int, default=1, help="Schur lanes")
    m.add_argument("--kf", type=int, default=11, help="audit keyframes")
    m.add_argument("--features", type=int, default=110, help="audit features")
    m.add_argument("--span", type=int, default=4, help="audit co-observation span")
    m.add_argument("--schur-features", type=int, default=None,
                   help="n_f for the Schur storage audit (default: features)")
    m.add_argument("--audit", action="store_true",
                   help="print the memory-audit summary lines")
    m.add_argument("--sweep", action="store_true",
                   help="also write the (n, m, mode) sweep CSV")
    m.add_argument("--out", help="output directory")
    m.set_defaults(func=cmd_model)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
