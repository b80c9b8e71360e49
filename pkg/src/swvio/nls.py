"""Levenberg-Marquardt loop for the sliding-window MAP estimate.

One iteration runs jacobians -> assemble -> schur_eliminate -> cholesky ->
solve -> retract -> cost.  A step is accepted iff the cost decreases;
rejected steps (including failed factorizations) raise the damping and
count toward the iteration budget, so a configured iteration cap bounds
true work.
"""

from dataclasses import dataclass, field

import numpy as np

from . import linsolve
from .factors import CheiralityError, imu_residual, visual_residual
from .geometry import quat_exp, quat_mul, quat_normalize
from .model import (KF_DIM, LAMBDA_MIN, Feature, KeyframeState, Ordering,
                    WindowProblem)

MU_MAX = 1e12


class DivergenceError(Exception):
    """Damping exceeded MU_MAX without an accepted step."""


@dataclass
class LmConfig:
    max_iterations: int = 25
    mu0: float = 1e-4
    mu_up: float = 2.0
    mu_down: float = 0.5
    gradient_tol: float = 1e-8
    step_tol: float = 1e-10

    def __post_init__(self):
        if not (self.mu0 > 0 and self.mu_up > 1.0 > self.mu_down > 0.0):
            raise ValueError("require mu0 > 0 and mu_up > 1 > mu_down > 0")


@dataclass
class SolveStats:
    iterations_run: int = 0
    accepted_steps: int = 0
    rejected_steps: int = 0
    cost_trace: list = field(default_factory=list)   # initial + accepted costs
    final_gradient_norm: float = float("nan")
    iteration_records: list = field(default_factory=list)
    clamped_features: list = field(default_factory=list)
    exit_reason: str = ""

    def to_json(self) -> dict:
        return {
            "iterations_run": self.iterations_run,
            "accepted_steps": self.accepted_steps,
            "rejected_steps": self.rejected_steps,
            "cost_trace": [float(c) for c in self.cost_trace],
            "final_gradient_norm": float(self.final_gradient_norm),
            "iteration_records": self.iteration_records,
            "clamped_features": sorted(set(int(f) for f in self.clamped_features)),
            "exit_reason": self.exit_reason,
        }


def cost(window: WindowProblem) -> float:
    """0.5 * sum of squared whitened residuals over visual, IMU and prior
    factors.  Cheirality-degenerate observations are skipped, matching the
    assembly's factor set."""
    total = 0.0
    for obs in window.observations:
        try:
            r = visual_residual(window, obs)
        except CheiralityError:
            continue
        total += float(r @ r)
    for fac in window.imu_factors:
        r = imu_residual(fac, window.keyframe_by_id(fac.kf_i),
                         window.keyframe_by_id(fac.kf_j), window.gravity)
        total += float(r @ r)
    if window.prior is not None:
        Jp, r0 = window.prior.sqrt_form()
        delta = np.concatenate([
            window.keyframe_by_id(sid).error_from(lin)
            for sid, lin in zip(window.prior.state_ids, window.prior.lin_states)
        ]) if window.prior.state_ids else np.zeros(0)
        r = Jp @ delta - r0
        total += float(r @ r)
    return 0.5 * total


def retract(window: WindowProblem, dx_s, dx_f, ordering: Ordering,
            lambda_min: float = LAMBDA_MIN):
    """Apply an error-state step; returns (window', clamped feature ids)."""
    new_kfs = []
    for kf in window.keyframes:
        d = dx_s[ordering.kf_state_slice(kf.id)]
        new_kfs.append(KeyframeState(
            id=kf.id,
            p=kf.p + d[0:3],
            q=quat_normalize(quat_mul(kf.q, quat_exp(d[3:6]))),
            v=kf.v + d[6:9],
            ba=kf.ba + d[9:12],
            bg=kf.bg + d[12:15],
        ))
    new_feats = []
    clamped = []
    for f in window.features:
        lam = f.inv_depth + float(dx_f[ordering.feat_col(f.id)])
        if lam < lambda_min:
            lam = lambda_min
            clamped.append(f.id)
        new_feats.append(Feature(id=f.id, anchor_kf=f.anchor_kf,
                                 anchor_uv=f.anchor_uv, inv_depth=lam))
    return WindowProblem(keyframes=tuple(new_kfs), features=tuple(new_feats),
                         observations=window.observations,
                         imu_factors=window.imu_factors,
                         prior=window.prior, gravity=window.gravity), clamped


def lm_solve(window: WindowProblem, config: LmConfig = None):
    """Run LM to convergence or budget; returns (window', SolveStats)."""
    cfg = config or LmConfig()
    stats = SolveStats()
    current = window
    current_cost = cost(current)
    stats.cost_trace.append(current_cost)
    mu = cfg.mu0

    while stats.iterations_run < cfg.max_iterations:
        jac = linsolve.evaluate_jacobians(current)
        blocks = linsolve.assemble(current, jac, mu)
        grad = np.concatenate([blocks.b_s, blocks.b_f])
        grad_norm = float(np.max(np.abs(grad))) if grad.size else 0.0
        stats.final_gradient_norm = grad_norm
        if grad_norm <= cfg.gradient_tol:
            stats.exit_reason = "gradient_tol"
            return current, stats

        stats.iterations_run += 1
        record = {"iteration": stats.iterations_run, "damping": mu}
        try:
            S, b_prime, sc = linsolve.schur_eliminate(blocks)
            chol = linsolve.cholesky(S)
        except linsolve.NotPositiveDefinite as err:
            stats.rejected_steps += 1
            record.update({"accepted": False, "failure": f"not_pd@{err.column}"})
            stats.iteration_records.append(record)
            mu *= cfg.mu_up
            if mu > MU_MAX:
                raise DivergenceError(f"damping {mu:.3g} exceeded {MU_MAX:.0e}")
            continue

        dx_s, dx_f = linsolve.solve(blocks, chol, b_prime)
        candidate, clamped = retract(current, dx_s, dx_f, blocks.ordering)
        new_cost = cost(candidate)
        step_norm = float(np.linalg.norm(np.concatenate([dx_s, dx_f])))
        record.update({
            "schur": {"u_inverse_divisions": sc.u_inverse_divisions,
                      "outer_macs": sc.outer_macs, "rhs_macs": sc.rhs_macs},
            "cholesky": {"evaluate_ops": int(sum(chol.evaluate_ops)),
                         "update_ops": int(sum(chol.update_ops))},
            "step_norm": step_norm,
            "cost": new_cost,
        })
        if new_cost < current_cost:
            current = candidate
            current_cost = new_cost
            stats.accepted_steps += 1
            stats.cost_trace.append(new_cost)
            stats.clamped_features.extend(clamped)
            record["accepted"] = True
            stats.iteration_records.append(record)
            mu *= cfg.mu_down
            if step_norm <= cfg.step_tol:
                stats.exit_reason = "step_tol"
                return current, stats
        else:
            stats.rejected_steps += 1
            record["accepted"] = False
            stats.iteration_records.append(record)
            mu *= cfg.mu_up
            if mu > MU_MAX:
                raise DivergenceError(f"damping {mu:.3g} exceeded {MU_MAX:.0e}")

    stats.exit_reason = "max_iterations"
    return current, stats


def ate(keyframes, true_positions: dict) -> float:
    """RMS position error of keyframe estimates against ground truth.

    Frames share a global datum (windows are anchored by a prior), so no
    alignment is applied.
    """
    errs = [np.linalg.norm(kf.p - true_positions[kf.id]) for kf in keyframes
            if kf.id in true_positions]
    if not errs:
        return float("nan")
    return float(np.sqrt(np.mean(np.square(errs))))
