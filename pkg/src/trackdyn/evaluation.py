"""Relative pose error for tracking and for model-based prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentFailure, EmptyAfterTrim, NearPiRotation
from .geometry import Pose3, project_planar, relative_body_pose, so3_angle
from .integration import ControlTimeline, rollout

FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5)
HORIZONS = (0.33, 0.66, 1.66, 3.33, 10.0)


@dataclass
class Trajectory:
    t: np.ndarray
    poses: list
    velocities: np.ndarray | None = None  # (N, 3), any frame; only the norm is used

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        if len(self.t) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        if self.velocities is not None:
            self.velocities = np.asarray(self.velocities, dtype=float).reshape(len(self.t), -1)

    def __len__(self):
        return len(self.t)

    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    def arc_length(self) -> np.ndarray:
        p = self.positions()
        return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))])

    def head(self, n: int) -> Trajectory:
        v = None if self.velocities is None else self.velocities[:n]
        return Trajectory(self.t[:n], self.poses[:n], v)

    def transformed(self, T: Pose3) -> Trajectory:
        return Trajectory(self.t, [T @ p for p in self.poses], self.velocities)


@dataclass
class RpeReport:
    trans_rmse: float  # m
    rot_rmse: float  # deg
    count: int
    breakdown: dict = field(default_factory=dict)  # key -> (trans_rmse, rot_rmse, count)

    def as_dict(self) -> dict:
        return {
            "trans_rmse": self.trans_rmse,
            "rot_rmse": self.rot_rmse,
            "count": self.count,
            "breakdown": {str(k): list(v) for k, v in self.breakdown.items()},
        }


def _rmse(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(math.sqrt(np.mean(x * x))) if x.size else 0.0


def trim_standing_tail(traj: Trajectory, threshold: float = 0.02, window: float = 0.5) -> Trajectory:
    """Drop the maximal trailing run of samples with speed below ``threshold`` if it lasts ``window`` seconds."""
    if traj.velocities is None:
        raise ValueError("trim_standing_tail needs velocities")
    speed = np.linalg.norm(traj.velocities, axis=1)
    moving = np.nonzero(speed >= threshold)[0]
    start = 0 if len(moving) == 0 else int(moving[-1]) + 1
    if start >= len(traj):
        return traj
    if traj.t[-1] - traj.t[start] < window:
        return traj
    if start == 0:
        raise EmptyAfterTrim("trajectory is at rest throughout")
    return traj.head(start)


def align(est: Trajectory, gt: Trajectory, tol: float | None = None) -> np.ndarray:
    """Index into ``est`` for every ``gt`` sample (nearest neighbour within ``tol``)."""
    if len(est) == 0 or len(gt) == 0:
        raise AlignmentFailure("empty trajectory")
    if tol is None:
        dt = np.diff(gt.t)
        tol = 0.5 * float(np.median(dt)) if len(dt) else 1e-9
    j = np.clip(np.searchsorted(est.t, gt.t), 1, max(len(est) - 1, 1))
    j = np.where(len(est) > 1, j, 0)
    cand = np.stack([np.maximum(j - 1, 0), j], axis=1)
    d = np.abs(est.t[cand] - gt.t[:, None])
    pick = cand[np.arange(len(gt)), np.argmin(d, axis=1)]
    if np.any(np.abs(est.t[pick] - gt.t) > tol + 1e-12):
        raise AlignmentFailure("timestamps cannot be matched within half a frame")
    return pick


def _pair_error(Ga: Pose3, Gb: Pose3, Ea: Pose3, Eb: Pose3) -> tuple[float, float]:
    dG = Ga.inverse() @ Gb
    dE = Ea.inverse() @ Eb
    err = dG.inverse() @ dE
    return float(np.linalg.norm(err.t)), math.degrees(so3_angle(err.R))


def tracking_rpe(est: Trajectory, gt: Trajectory, fractions=FRACTIONS) -> RpeReport:
    """Relative pose error over sub-trajectories whose ground-truth path length is a fraction of the total."""
    idx = align(est, gt)
    E = [est.poses[i] for i in idx]
    arc = gt.arc_length()
    total = arc[-1]
    all_t, all_r, breakdown = [], [], {}
    for frac in fractions:
        L = frac * total
        et, er = [], []
        if L > 0:
            ends = np.searchsorted(arc, arc + L, side="left")
            for i, j in enumerate(ends):
                if j >= len(arc):
                    break
                t_err, r_err = _pair_error(gt.poses[i], gt.poses[j], E[i], E[j])
                et.append(t_err)
                er.append(r_err)
        breakdown[frac] = (_rmse(et), _rmse(er), len(et))
        all_t += et
        all_r += er
    if not all_t:
        raise AlignmentFailure("no sub-trajectory of the requested lengths fits the sequence")
    return RpeReport(_rmse(all_t), _rmse(all_r), len(all_t), breakdown)


@dataclass
class PredictionStart:
    """Estimator output needed to replay a prediction from one frame."""

    t: float
    body_vel: np.ndarray
    params: np.ndarray
    ext: Pose3


def horizon_steps(horizons, frame_dt: float) -> dict:
    return {h: int(round(h / frame_dt)) for h in horizons}


def predict_from_starts(starts: list, ctrl: ControlTimeline, geometry, hyper, horizons=HORIZONS, frame_dt: float = 1.0 / 30.0, params=None, t_end: float | None = None, dt_max: float = 0.005) -> list:
    """Planar pose predicted ``round(h / frame_dt)`` frames ahead of every start.

    Each start is rolled out once on the frame grid up to the longest horizon
    (ending no later than ``t_end``).  Returns one ``{steps: (x, y, theta)}``
    mapping per start.  ``params`` overrides the per-start parameters.
    """
    steps = horizon_steps(horizons, frame_dt)
    n_max = max(steps.values()) if steps else 0
    out = []
    for s in starts:
        n = n_max
        if t_end is not None:
            n = min(n, int(math.floor((t_end - s.t) / frame_dt + 1e-6)))
        preds = {}
        if n > 0:
            frames = s.t + frame_dt * np.arange(n + 1)
            p = s.params if params is None else params
            ro = rollout(frames, s.body_vel, ctrl, p, geometry, hyper, dt_max=dt_max)
            for k in sorted(set(steps.values())):
                if 0 < k <= n:
                    preds[k] = ro.poses[k].copy()
        out.append(preds)
    return out


def score_predictions(starts: list, predictions: list, gt: Trajectory, horizons=HORIZONS, frame_dt: float | None = None) -> dict:
    """Per-horizon translation / heading error of planar predictions against ground truth.

    The ground-truth relative pose is projected to the vehicle frame with the
    start's extrinsics.  Starts whose horizon runs past the end of ``gt`` are
    skipped, as are starts outside ``gt``; trimming the standing tail
    beforehand therefore excludes it.
    """
    if frame_dt is None:
        frame_dt = float(np.median(np.diff(gt.t)))
    steps = horizon_steps(horizons, frame_dt)
    errs = {h: ([], []) for h in horizons}
    half = 0.5 * frame_dt
    inside = [i for i, s in enumerate(starts) if gt.t[0] - half <= s.t <= gt.t[-1] + half]
    starts = [starts[i] for i in inside]
    predictions = [predictions[i] for i in inside]
    g_idx = align(gt, Trajectory([s.t for s in starts], [Pose3.identity()] * len(starts))) if starts else []
    for s, preds, gi in zip(starts, predictions, g_idx):
        for h in horizons:
            k = steps[h]
            if gi + k >= len(gt):
                continue
            if k == 0:
                errs[h][0].append(0.0)
                errs[h][1].append(0.0)
                continue
            if k not in preds:
                continue
            try:
                meas = project_planar(relative_body_pose(gt.poses[gi], s.ext, gt.poses[gi + k], s.ext))
            except NearPiRotation:
                continue
            pred = preds[k]
            errs[h][0].append(float(np.hypot(pred[0] - meas[0], pred[1] - meas[1])))
            errs[h][1].append(math.degrees(abs(math.remainder(pred[2] - meas[2], 2 * math.pi))))
    return {h: RpeReport(_rmse(errs[h][0]), _rmse(errs[h][1]), len(errs[h][0]), {}) for h in horizons}


def prediction_rpe(
    starts: list,
    gt: Trajectory,
    ctrl: ControlTimeline,
    geometry,
    hyper,
    horizons=HORIZONS,
    params=None,
    frame_dt: float | None = None,
    dt_max: float = 0.005,
) -> dict:
    """Per-horizon error of predicted planar relative poses against ground truth.

    Every start is rolled out once up to the longest horizon that still fits
    inside ``gt`` (trim the standing tail beforehand).  ``params`` overrides
    the per-frame parameters, e.g. to evaluate the initial guess.
    """
    if frame_dt is None:
        frame_dt = float(np.median(np.diff(gt.t)))
    preds = predict_from_starts(starts, ctrl, geometry, hyper, horizons, frame_dt, params, float(gt.t[-1]) + 0.5 * frame_dt, dt_max)
    return score_predictions(starts, preds, gt, horizons, frame_dt)
