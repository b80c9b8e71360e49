"""FastAPI service wrapping the core backend.

Every endpoint is a pure computation: JSON in, JSON out, no server-side
state or files.  The CLI is a thin client of this app; run it standalone
with `uvicorn swvio.service.app:app`.

Domain errors map to HTTP 400 with a typed body {"type", "message"};
exit-code mapping for scripts lives in the CLI.
"""

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__, hwmodel
from ..marginalize import ConditioningError, PatternViolation
from ..linsolve import NotPositiveDefinite, SingularAssembly
from ..model import (feature_dim, state_dim, stream_from_json, stream_to_json,
                     window_from_json, validate)
from ..nls import DivergenceError, LmConfig, ate, lm_solve
from ..reconfig import (Budgets, InsufficientCalibration, LookupTable,
                        calibrate, max_budget_table, run_adaptive)
from ..scenegen import (GenerationError, GroundTruth, SceneConfig, generate,
                        stream_meta)
from . import schemas

app = FastAPI(title="swvio", version=__version__,
              description="Sliding-window visual-inertial backend "
                          "and accelerator cost model")

_ERROR_TYPES = {
    GenerationError: "generation",
    InsufficientCalibration: "calibration",
    DivergenceError: "divergence",
    NotPositiveDefinite: "not_positive_definite",
    SingularAssembly: "singular_assembly",
    PatternViolation: "pattern_violation",
    ConditioningError: "conditioning",
}


def _bad_request(err: Exception):
    name = _ERROR_TYPES.get(type(err), "invalid_input")
    return HTTPException(status_code=400,
                         detail={"type": name, "message": str(err)})


def _lm_config(opts: schemas.LmOptions) -> LmConfig:
    return LmConfig(max_iterations=opts.max_iterations, mu0=opts.mu0,
                    mu_up=opts.mu_up, mu_down=opts.mu_down,
                    gradient_tol=opts.gradient_tol, step_tol=opts.step_tol)


def _trajectory_rows(states) -> list:
    rows = []
    for kf in sorted(states, key=lambda s: s.id):
        rows.append(schemas.TrajectoryRow(
            kf_id=kf.id, px=kf.p[0], py=kf.p[1], pz=kf.p[2],
            qw=kf.q[0], qx=kf.q[1], qy=kf.q[2], qz=kf.q[3]))
    return rows


@app.get("/health", response_model=schemas.HealthResponse)
def health():
    return schemas.HealthResponse(status="ok", version=__version__)


@app.post("/validate", response_model=schemas.ValidateResponse)
def validate_window(req: schemas.ValidateRequest):
    try:
        window = window_from_json(req.window, gravity=req.gravity)
    except (KeyError, ValueError, TypeError) as err:
        raise _bad_request(err)
    return schemas.ValidateResponse(violations=validate(window),
                                    state_dim=state_dim(window),
                                    feature_dim=feature_dim(window))


@app.post("/generate", response_model=schemas.GenerateResponse)
def generate_scene(req: schemas.GenerateRequest):
    try:
        cfg = SceneConfig.from_json(req.config) if req.config else SceneConfig()
        if req.seed is not None:
            cfg.seed = req.seed
        windows, gt = generate(cfg)
    except (GenerationError, TypeError, KeyError, ValueError) as err:
        raise _bad_request(err)
    return schemas.GenerateResponse(
        stream=stream_to_json(windows, windows[0].gravity, meta=stream_meta(cfg)),
        ground_truth=gt.to_json())


@app.post("/solve", response_model=schemas.SolveResponse)
def solve_stream(req: schemas.SolveRequest):
    try:
        windows = stream_from_json(req.stream)
    except (KeyError, ValueError, TypeError) as err:
        raise _bad_request(err)
    for i, w in enumerate(windows):
        problems = validate(w)
        if problems:
            raise HTTPException(status_code=400, detail={
                "type": "invalid_window",
                "message": f"window {i}: " + "; ".join(problems)})
    cfg = _lm_config(req.lm)
    estimates = {}
    stats = []
    for i, w in enumerate(windows):
        try:
            solved, st = lm_solve(w, cfg)
        except DivergenceError as err:
            raise HTTPException(status_code=422, detail={
                "type": "divergence", "message": f"window {i}: {err}"})
        estimates.update({kf.id: kf for kf in solved.keyframes})
        stats.append(st.to_json())
    result_ate = None
    if req.ground_truth is not None:
        gt = GroundTruth.from_json(req.ground_truth)
        result_ate = ate(list(estimates.values()), gt.positions())
    return schemas.SolveResponse(trajectory=_trajectory_rows(estimates.values()),
                                 stats=stats, ate=result_ate)


@app.post("/calibrate", response_model=schemas.CalibrateResponse)
def calibrate_table(req: schemas.CalibrateRequest):
    try:
        scenes = []
        for entry in req.scenes:
            windows = stream_from_json(entry["stream"])
            gt = GroundTruth.from_json(entry["ground_truth"])
            scenes.append((windows[0], gt))
        budgets = Budgets(max_iterations=req.max_iterations,
                          max_schur_lanes=req.max_schur_lanes,
                          max_update_units=req.max_update_units)
        table = calibrate(scenes, budgets, req.target_accuracy,
                          bucket_width=req.bucket_width,
                          features_per_lane=req.features_per_lane,
                          seeds=req.seeds, lm_template=_lm_config(req.lm))
    except InsufficientCalibration as err:
        raise HTTPException(status_code=422,
                            detail={"type": "calibration", "message": str(err)})
    except (KeyError, ValueError, TypeError) as err:
        raise _bad_request(err)
    return schemas.CalibrateResponse(table=table.to_json())


@app.post("/run-adaptive", response_model=schemas.RunAdaptiveResponse)
def run_adaptive_stream(req: schemas.RunAdaptiveRequest):
    try:
        windows = stream_from_json(req.stream)
        table = LookupTable.from_json(req.table)
    except (KeyError, ValueError, TypeError) as err:
        raise _bad_request(err)
    tpl = _lm_config(req.lm)
    res = run_adaptive(windows, table, lm_template=tpl)
    gt = (GroundTruth.from_json(req.ground_truth)
          if req.ground_truth is not None else None)
    out = schemas.RunAdaptiveResponse(
        trajectory=_trajectory_rows(res.trajectory.values()),
        stats=[s.to_json() for s in res.stats],
        activity_trace=res.trace, diagnostics=res.diagnostics,
        ate=ate(list(res.trajectory.values()), gt.positions()) if gt else None)
    if req.baseline:
        base = run_adaptive(windows, max_budget_table(
            table.budgets, bucket_width=table.bucket_width), lm_template=tpl)
        out.baseline_trajectory = _trajectory_rows(base.trajectory.values())
        out.baseline_trace = base.trace
        if gt:
            out.baseline_ate = ate(list(base.trajectory.values()), gt.positions())
            out.delta_ate = out.ate - out.baseline_ate
    return out


@app.post("/model/schedule")
def model_schedule(req: schemas.ScheduleRequest):
    try:
        dims = hwmodel.AuditDims(n_keyframes=req.n_keyframes,
                                 n_features=req.n_features,
                                 co_obs_span=req.co_obs_span,
                                 n_schur_features=req.n_schur_features)
        return hwmodel.cost_report(req.n, req.m, dims=dims,
                                   schur_lanes=req.schur_lanes)
    except ValueError as err:
        raise _bad_request(err)


@app.post("/model/sweep", response_model=schemas.SweepResponse)
def model_sweep(req: schemas.SweepRequest):
    rows = hwmodel.sweep(range(req.n_min, req.n_max + 1, req.n_step),
                         req.m_values)
    return schemas.SweepResponse(rows=rows)


@app.post("/model/power")
def model_power(req: schemas.PowerRequest):
    try:
        params = hwmodel.PowerParams(
            weights=req.weights or dict(hwmodel.DEFAULT_WEIGHTS),
            gated_leakage_fraction=req.gated_leakage_fraction,
            reconfig_cost_cycles=req.reconfig_cost_cycles)
        return hwmodel.power_model(req.trace, params,
                                   baseline_trace=req.baseline_trace)
    except (ValueError, KeyError) as err:
        raise _bad_request(err)
