"""End-to-end steps behind the command-line tools: simulate, calibrate, run, evaluate, report."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .calibration import (
    FORWARD_STEER_LIMIT,
    CalibResult,
    calibrate_stage1,
    calibrate_stage2,
)
from .config import ExperimentConfig, perturb_extrinsics
from .dynamics import DynamicsParams, LongitudinalHyperParams
from .errors import SchemaError
from .estimator import SlidingWindowEstimator
from .evaluation import (
    PredictionStart,
    Trajectory,
    align,
    predict_from_starts,
    score_predictions,
    tracking_rpe,
    trim_standing_tail,
)
from .geometry import Pose3
from .simulation import SimOutput, make_script, simulate


def simulate_script(cfg: ExperimentConfig, script: str, seed: int | None = None) -> SimOutput:
    sim_cfg = cfg.sim.build(seed)
    ctrl = make_script(script, cfg.sim.duration, cfg.sim.control_rate)
    return simulate(sim_cfg, ctrl, cfg.sim.duration)


def is_forward_motion(data: SimOutput) -> bool:
    return bool(np.all(np.abs(data.ctrl.u_str) < FORWARD_STEER_LIMIT))


@dataclass
class CalibrationOutcome:
    result: CalibResult
    stage1: CalibResult | None
    init_params: DynamicsParams
    init_extrinsics: Pose3


def calibrate_datasets(datasets: list, cfg: ExperimentConfig, init: DynamicsParams | None = None, init_ext: Pose3 | None = None, seed: int | None = None) -> CalibrationOutcome:
    """Stage 1 on the straight-driving datasets, then stage 2 on each mixed dataset in turn.

    Without an explicit ``init`` the first dataset's true parameters are
    perturbed per the config; the extrinsics start from the recorded truth
    with a CAD-style perturbation.
    """
    if not datasets:
        raise SchemaError("no datasets given")
    cc = cfg.calibration
    seed = cfg.init.seed if seed is None else seed
    ref = datasets[0]
    if init is None:
        init = cfg.init.apply(ref.config.params_schedule[0][1], seed)
    if init_ext is None:
        init_ext = perturb_extrinsics(ref.config.extrinsics, cc.ext_perturb_trans, cc.ext_perturb_rot_deg, seed + 1)
    hyper = cc.hyper_init.build()
    forward = [d for d in datasets if is_forward_motion(d)]
    mixed = [d for d in datasets if not is_forward_motion(d)]
    stage1 = None
    current = CalibResult(init, hyper, init_ext, math.nan, 0)
    for d in forward:
        stage1 = calibrate_stage1(d, current.hyper, current.params, extrinsics=current.extrinsics, segment=cc.segment, stride=cc.stride, sub=cc.sub, max_nfev=cc.max_nfev_stage1)
        current = stage1
    max_steer = None if cc.max_steer_angle_deg is None else math.radians(cc.max_steer_angle_deg)
    first = True
    for d in mixed:
        current = calibrate_stage2(
            d,
            current,
            init=current.params,
            extrinsics=current.extrinsics,
            max_steer_angle=max_steer if first else None,
            l_cam1=cfg.estimator.l_cam1,
            l_cam2=cfg.estimator.l_cam2,
            ext_prior=cc.ext_prior,
            segment=cc.segment,
            stride=cc.stride,
            sub=cc.sub,
            max_nfev=cc.max_nfev_stage2,
        )
        first = False
    return CalibrationOutcome(current, stage1, init, init_ext)


@dataclass
class RunOutput:
    records: list
    diagnostics: list
    starts: list
    predictions: dict  # "calib" / "init" -> list of {steps: pose}
    horizons: list
    frame_dt: float


def run_dataset(data: SimOutput, cfg: ExperimentConfig, params: DynamicsParams, hyper: LongitudinalHyperParams, extrinsics: Pose3, horizons=None) -> RunOutput:
    """Run the estimator over a dataset and predict from every frame once the model coupling is on."""
    est_cfg = replace(cfg.estimator.build(), frame_dt=data.frame_dt)
    est = SlidingWindowEstimator(est_cfg, data.ctrl, data.gyro, data.initial_pose, params, extrinsics, data.config.geometry, hyper)
    for meas in data.odom:
        est.step(meas)
    horizons = list(horizons or cfg.evaluation.horizons)
    starts = prediction_starts(est.records)
    t_end = float(data.odom[-1].t) + 0.5 * data.frame_dt
    preds = {
        "calib": predict_from_starts(starts, data.ctrl, data.config.geometry, hyper, horizons, data.frame_dt, None, t_end, est_cfg.dt_max),
        "init": predict_from_starts(starts, data.ctrl, data.config.geometry, hyper, horizons, data.frame_dt, params.as_array(), t_end, est_cfg.dt_max),
    }
    return RunOutput(est.records, est.diagnostics, starts, preds, horizons, data.frame_dt)


def prediction_starts(records: list) -> list:
    """Frames after gate-on (all frames if the gate never opened)."""
    gated = [r for r in records if r.gate] or list(records)
    return [PredictionStart(r.t, np.asarray(r.body_vel), np.asarray(r.params), r.ext) for r in gated]


def prediction_rows(run: RunOutput) -> list:
    rows = []
    for i, s in enumerate(run.starts):
        rows.append(
            {
                "kind": "prediction",
                "t": float(s.t),
                "body_vel": [float(v) for v in s.body_vel],
                "params": [float(v) for v in s.params],
                "ext": {"R": [float(v) for v in s.ext.R.ravel()], "t": [float(v) for v in s.ext.t]},
                "calib": {str(k): [float(v) for v in p] for k, p in run.predictions["calib"][i].items()},
                "init": {str(k): [float(v) for v in p] for k, p in run.predictions["init"][i].items()},
            }
        )
    return rows


def parse_prediction_rows(rows: list) -> tuple[list, dict]:
    starts, preds = [], {"calib": [], "init": []}
    for r in rows:
        try:
            ext = Pose3(np.array(r["ext"]["R"], dtype=float).reshape(3, 3), np.array(r["ext"]["t"], dtype=float))
            starts.append(PredictionStart(float(r["t"]), np.array(r["body_vel"], dtype=float), np.array(r["params"], dtype=float), ext))
            for key in ("calib", "init"):
                preds[key].append({int(k): np.array(v, dtype=float) for k, v in r[key].items()})
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed prediction record at t={r.get('t')!r}: {exc}") from exc
    return starts, preds


def gt_trajectory(data: SimOutput) -> Trajectory:
    return Trajectory(data.gt.t, data.gt.poses, data.gt.vel_world)


def records_trajectory(records: list) -> Trajectory:
    return Trajectory([r.t for r in records], [r.pose for r in records], np.array([r.vel for r in records]))


def evaluate_run(
    data: SimOutput,
    records: list,
    cfg: ExperimentConfig,
    starts: list | None = None,
    predictions: dict | None = None,
    horizons=None,
    hyper: LongitudinalHyperParams | None = None,
) -> dict:
    """Tracking RPE over path-length fractions and per-horizon prediction RPE (online vs initial parameters).

    The standing-still tail of the ground truth is excluded from both.
    """
    ev = cfg.evaluation
    horizons = list(horizons or ev.horizons)
    gt = trim_standing_tail(gt_trajectory(data), ev.still_speed, ev.still_window)
    est = records_trajectory(records)
    idx = align(est, gt)
    tracking = tracking_rpe(Trajectory(est.t[idx], [est.poses[i] for i in idx]), gt, ev.fractions)
    report = {"tracking": tracking.as_dict(), "horizons": horizons, "prediction": {}}
    if starts is None:
        starts = prediction_starts(records)
    if predictions is None:
        t_end = float(gt.t[-1]) + 0.5 * data.frame_dt
        hyper = hyper or data.config.hyper
        predictions = {"calib": predict_from_starts(starts, data.ctrl, data.config.geometry, hyper, horizons, data.frame_dt, None, t_end)}
    for key, preds in predictions.items():
        scored = score_predictions(starts, preds, gt, horizons, data.frame_dt)
        report["prediction"][key] = {str(h): r.as_dict() for h, r in scored.items()}
    return report


def report_rows(named_reports: dict, horizons) -> tuple[list, list]:
    """Table rows: one per sequence plus the average, tracking RPE then init/calib prediction RPE per horizon."""
    header = ["sequence", "track_trans_m", "track_rot_deg"]
    for h in horizons:
        for key in ("init", "calib"):
            header += [f"{key}_{h}s_trans_m", f"{key}_{h}s_rot_deg"]
    rows = []
    for name, rep in named_reports.items():
        row = [name, rep["tracking"]["trans_rmse"], rep["tracking"]["rot_rmse"]]
        for h in horizons:
            for key in ("init", "calib"):
                r = rep.get("prediction", {}).get(key, {}).get(str(h))
                row += [r["trans_rmse"], r["rot_rmse"]] if r and r["count"] else [math.nan, math.nan]
        rows.append(row)
    if rows:
        cols = np.array([r[1:] for r in rows], dtype=float)
        with np.errstate(all="ignore"):
            avg = [float(np.nanmean(c)) if np.any(np.isfinite(c)) else math.nan for c in cols.T]
        rows.append(["average", *avg])
    return header, rows


def format_table(header: list, rows: list) -> str:
    def cell(v):
        return v if isinstance(v, str) else ("-" if not math.isfinite(v) else f"{v:.4f}")

    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(cell(v) for v in r) + " |" for r in rows]
    return "\n".join(lines)


def param_table(records: list) -> list:
    return [[float(r.t), *map(float, r.params)] for r in records if r.gate]

