"""Offline lookup-table calibration and the adaptive runtime policy.

The environmental signal is the window's feature count.  Feature counts
are bucketed half-open ([lo, hi), a boundary count belongs to the bucket
it starts); per bucket the calibration picks the smallest iteration
budget whose median trajectory error over the calibration scenes meets
the target, plus the Schur-lane and Update-unit provisioning.  At runtime
`select` is a pure table lookup, and unused lanes/units are clock gated.

Table updates are modeled as atomic swaps between windows; a window never
sees a half-updated table.
"""

import datetime
from dataclasses import dataclass, field, asdict

import numpy as np

from . import hwmodel
from .marginalize import build_partition, marginalize
from .model import WindowProblem
from .nls import DivergenceError, LmConfig, ate, lm_solve

FEATURES_PER_LANE = 64
LATENCY_LOSS_BUDGET = 0.05


class InsufficientCalibration(Exception):
    """A feature-count bucket has fewer than the required scenes."""


@dataclass
class Budgets:
    max_iterations: int = 10
    max_schur_lanes: int = 4
    max_update_units: int = 8


@dataclass
class LookupEntry:
    iterations: int
    schur_lanes: int
    update_units: int
    flagged: bool = False       # no iteration count met the target


@dataclass(frozen=True)
class RuntimeConfig:
    iterations: int
    schur_lanes: int
    update_units: int
    gated_modules: tuple

    def __post_init__(self):
        if self.iterations < 1 or self.schur_lanes < 1 or self.update_units < 1:
            raise ValueError("iterations, lanes and units must be >= 1")


@dataclass
class LookupTable:
    bucket_width: int
    entries: dict               # bucket index -> LookupEntry
    target_accuracy: float
    budgets: Budgets
    provenance: dict = field(default_factory=dict)

    def entry_for(self, feature_count: int) -> LookupEntry:
        bucket = feature_count // self.bucket_width
        fallback = LookupEntry(iterations=self.budgets.max_iterations,
                               schur_lanes=self.budgets.max_schur_lanes,
                               update_units=self.budgets.max_update_units,
                               flagged=True)
        return self.entries.get(bucket, fallback)

    def to_json(self) -> dict:
        return {
            "bucket_width": self.bucket_width,
            "target_accuracy": self.target_accuracy,
            "budgets": asdict(self.budgets),
            "entries": {str(k): asdict(v) for k, v in sorted(self.entries.items())},
            "provenance": self.provenance,
        }

    @staticmethod
    def from_json(d: dict) -> "LookupTable":
        return LookupTable(
            bucket_width=int(d["bucket_width"]),
            target_accuracy=float(d["target_accuracy"]),
            budgets=Budgets(**d["budgets"]),
            entries={int(k): LookupEntry(**v) for k, v in d["entries"].items()},
            provenance=d.get("provenance", {}),
        )


def max_budget_table(budgets: Budgets, bucket_width: int = 50) -> LookupTable:
    """Table whose every lookup returns the full budget (the baseline arm
    of paired adaptive runs)."""
    return LookupTable(bucket_width=bucket_width, entries={},
                       target_accuracy=0.0, budgets=budgets,
                       provenance={"kind": "max-budget"})


def _capped(tpl: LmConfig, k: int) -> LmConfig:
    return LmConfig(max_iterations=k, mu0=tpl.mu0, mu_up=tpl.mu_up,
                    mu_down=tpl.mu_down, gradient_tol=tpl.gradient_tol,
                    step_tol=tpl.step_tol)


def _update_units_for(n_s: int, budgets: Budgets) -> int:
    """Fewest Update units within a 5% pipelined-latency loss of the full
    budget (hwmodel sweep)."""
    best = hwmodel.pipelined_cycles(n_s, budgets.max_update_units)
    limit = (1.0 + LATENCY_LOSS_BUDGET) * best
    for m in range(1, budgets.max_update_units + 1):
        if hwmodel.pipelined_cycles(n_s, m) <= limit:
            return m
    return budgets.max_update_units


def calibrate(scenes, budgets: Budgets, target_accuracy: float,
              bucket_width: int = 50,
              features_per_lane: int = FEATURES_PER_LANE,
              seeds=None, lm_template: LmConfig = None) -> LookupTable:
    """Build the lookup table from calibration scenes.

    scenes: list of (WindowProblem, GroundTruth) pairs with known truth.
    Per bucket, iterations is the smallest k whose median ATE over the
    bucket's scenes at k iterations meets the target (ties to smaller k);
    if none qualifies the bucket falls back to the full budget and is
    flagged.
    """
    buckets = {}
    for window, gt in scenes:
        buckets.setdefault(len(window.features) // bucket_width, []).append(
            (window, gt))
    for b, group in sorted(buckets.items()):
        if len(group) < 3:
            raise InsufficientCalibration(
                f"bucket {b}: {len(group)} scenes, need >= 3")

    tpl = lm_template or LmConfig()
    entries = {}
    for b, group in sorted(buckets.items()):
        chosen = None
        for k in range(1, budgets.max_iterations + 1):
            ates = []
            for window, gt in group:
                solved, _ = lm_solve(window, _capped(tpl, k))
                ates.append(ate(solved.keyframes, gt.positions()))
            if float(np.median(ates)) <= target_accuracy:
                chosen = k
                break
        flagged = chosen is None
        if chosen is None:
            chosen = budgets.max_iterations
        bucket_hi = (b + 1) * bucket_width
        lanes = min(max(1, -(-bucket_hi // features_per_lane)),
                    budgets.max_schur_lanes)
        n_s = max(15 * len(window.keyframes) for window, _ in group)
        entries[b] = LookupEntry(
            iterations=chosen, schur_lanes=lanes,
            update_units=_update_units_for(n_s, budgets), flagged=flagged)

    return LookupTable(
        bucket_width=bucket_width, entries=entries,
        target_accuracy=target_accuracy, budgets=budgets,
        provenance={"seeds": list(seeds) if seeds else [],
                    "date": datetime.date.today().isoformat(),
                    "scenes_per_bucket": {str(b): len(g)
                                          for b, g in sorted(buckets.items())}})


def select(table: LookupTable, window: WindowProblem) -> RuntimeConfig:
    """Pure O(1) lookup; unused lanes and units become the gated list."""
    e = table.entry_for(len(window.features))
    gated = tuple(
        [f"schur_lane_{i}" for i in range(e.schur_lanes,
                                          table.budgets.max_schur_lanes)]
        + [f"update_unit_{i}" for i in range(e.update_units,
                                             table.budgets.max_update_units)])
    return RuntimeConfig(iterations=e.iterations, schur_lanes=e.schur_lanes,
                         update_units=e.update_units, gated_modules=gated)


def _with_carried_state(window: WindowProblem, estimates: dict, prior):
    new_kfs = tuple(estimates.get(kf.id, kf) for kf in window.keyframes)
    kf_ids = {kf.id for kf in window.keyframes}
    carried = prior if (prior is not None
                        and set(prior.state_ids) <= kf_ids) else window.prior
    return WindowProblem(keyframes=new_kfs, features=window.features,
                         observations=window.observations,
                         imu_factors=window.imu_factors,
                         prior=carried, gravity=window.gravity)


@dataclass
class AdaptiveResult:
    trajectory: dict            # kf id -> final KeyframeState estimate
    stats: list
    trace: list                 # activity trace for the power model
    diagnostics: list


def run_adaptive(window_stream, table: LookupTable,
                 lm_template: LmConfig = None) -> AdaptiveResult:
    """Per window: select -> lm_solve under the selected iteration cap ->
    marginalize into the next window's prior.  Emits the module-activity
    trace the power model consumes.  Solver failures are recorded as
    diagnostics and the stream continues."""
    tpl = lm_template or LmConfig()
    estimates = {}
    stats_list = []
    trace = []
    diagnostics = []
    prior = None
    prev_cfg = None
    for idx, window in enumerate(window_stream):
        cfg = select(table, window)
        work = _with_carried_state(window, estimates, prior)
        try:
            solved, stats = lm_solve(work, _capped(tpl, cfg.iterations))
        except DivergenceError as err:
            diagnostics.append(f"window {idx}: {err}")
            solved, stats = work, None
        if stats is not None:
            stats_list.append(stats)
        estimates.update({kf.id: kf for kf in solved.keyframes})

        last = idx + 1 == len(window_stream)
        cycles = hwmodel.window_cycles(
            n_keyframes=len(window.keyframes),
            n_features=len(window.features),
            n_observations=len(window.observations),
            iterations=stats.iterations_run if stats else cfg.iterations,
            schur_lanes=cfg.schur_lanes, update_units=cfg.update_units,
            marginalized=not last)
        trace.append({
            "window": idx,
            "feature_count": len(window.features),
            "iterations_selected": cfg.iterations,
            "iterations_executed": stats.iterations_run if stats else cfg.iterations,
            "schur_lanes_active": cfg.schur_lanes,
            "update_units_active": cfg.update_units,
            "max_schur_lanes": table.budgets.max_schur_lanes,
            "max_update_units": table.budgets.max_update_units,
            "gated_modules": list(cfg.gated_modules),
            "cycles": cycles,
            "reconfigured": prev_cfg is not None and cfg != prev_cfg,
        })
        prev_cfg = cfg

        if not last and stats is not None:
            oldest = min(kf.id for kf in solved.keyframes)
            try:
                prior = marginalize(build_partition(solved, oldest))
            except Exception as err:   # keep streaming; next window unanchored
                diagnostics.append(f"window {idx}: marginalization failed: {err}")
                prior = None
        elif not last:
            prior = None

    return AdaptiveResult(trajectory=estimates, stats=stats_list, trace=trace,
                          diagnostics=diagnostics)
