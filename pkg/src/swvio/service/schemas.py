"""Pydantic request/response models for the compute service.

Window streams, ground truth, lookup tables and activity traces travel as
plain JSON documents in the formats owned by the core package (see
swvio.model / swvio.scenegen / swvio.reconfig); they are typed as dicts
here and validated by the core loaders so there is a single source of
truth for those schemas.
"""

from typing import Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class ValidateRequest(BaseModel):
    window: dict
    gravity: Optional[list] = None


class ValidateResponse(BaseModel):
    violations: list[str]
    state_dim: int
    feature_dim: int


class GenerateRequest(BaseModel):
    config: dict = Field(default_factory=dict)
    seed: Optional[int] = None          # overrides config["seed"] when set


class GenerateResponse(BaseModel):
    stream: dict
    ground_truth: dict


class LmOptions(BaseModel):
    max_iterations: int = 25
    mu0: float = 1e-4
    mu_up: float = 2.0
    mu_down: float = 0.5
    gradient_tol: float = 1e-8
    step_tol: float = 1e-10


class SolveRequest(BaseModel):
    stream: dict
    lm: LmOptions = Field(default_factory=LmOptions)
    ground_truth: Optional[dict] = None


class TrajectoryRow(BaseModel):
    kf_id: int
    px: float
    py: float
    pz: float
    qw: float
    qx: float
    qy: float
    qz: float


class SolveResponse(BaseModel):
    trajectory: list[TrajectoryRow]
    stats: list[dict]
    ate: Optional[float] = None


class CalibrateRequest(BaseModel):
    scenes: list[dict]                  # each {"stream": ..., "ground_truth": ...}
    target_accuracy: float
    bucket_width: int = 50
    max_iterations: int = 10
    max_schur_lanes: int = 4
    max_update_units: int = 8
    features_per_lane: int = 64
    lm: LmOptions = Field(default_factory=LmOptions)
    seeds: list[int] = Field(default_factory=list)


class CalibrateResponse(BaseModel):
    table: dict


class RunAdaptiveRequest(BaseModel):
    stream: dict
    table: dict
    lm: LmOptions = Field(default_factory=LmOptions)
    ground_truth: Optional[dict] = None
    baseline: bool = False              # also run the max-budget arm


class RunAdaptiveResponse(BaseModel):
    trajectory: list[TrajectoryRow]
    stats: list[dict]
    activity_trace: list[dict]
    diagnostics: list[str]
    ate: Optional[float] = None
    baseline_trajectory: Optional[list[TrajectoryRow]] = None
    baseline_trace: Optional[list[dict]] = None
    baseline_ate: Optional[float] = None
    delta_ate: Optional[float] = None


class ScheduleRequest(BaseModel):
    n: int
    m: int = 1
    schur_lanes: int = 1
    n_keyframes: int = 11
    n_features: int = 110
    co_obs_span: int = 4
    n_schur_features: Optional[int] = None


class SweepRequest(BaseModel):
    n_min: int = 60
    n_max: int = 200
    n_step: int = 5
    m_values: list[int] = Field(default_factory=lambda: [4, 5, 6, 7, 8])


class SweepResponse(BaseModel):
    rows: list[dict]


class PowerRequest(BaseModel):
    trace: list[dict]
    baseline_trace: Optional[list[dict]] = None
    weights: Optional[dict] = None
    gated_leakage_fraction: float = 0.05
    reconfig_cost_cycles: int = 128


class ErrorBody(BaseModel):
    type: str
    message: str
