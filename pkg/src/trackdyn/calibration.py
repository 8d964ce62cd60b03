"""Two-stage offline estimation of the model parameters.

Both stages first run the estimator with the model coupling switched off to
obtain odometry-only states, then fit the single-track model to those states
over overlapping rollout segments.  Stage 1 uses straight driving and fits
only the longitudinal force parameters; stage 2 fits everything, including the
hyper-parameters and the extrinsics, adding the plane/lever-arm constraints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .dynamics import EPS_P, DynamicsParams, LongitudinalHyperParams, VehicleGeometry
from .errors import NearPiRotation, NonFiniteState, NotForwardMotion, SolverFailure
from .estimator import EstimatorConfig, run_estimator
from .factors import FactorWeights
from .geometry import (
    Pose3,
    body_velocity_j,
    const_rot,
    const_vec,
    geometry_residual_j,
    jconcat,
    plane_offset,
    project_planar_j,
    relative_body_pose_j,
    right_jacobian,
    seed_pose,
)
from .integration import DT_MAX, rollout

FORWARD_STEER_LIMIT = 0.05
HYPER_LOWER = np.array([0.0, 1.0, 1.0])
HYPER_UPPER = np.array([2.0, 10.0, 100.0])


@dataclass
class CalibResult:
    params: DynamicsParams
    hyper: LongitudinalHyperParams
    extrinsics: Pose3
    cost: float
    iterations: int
    cost_history: list = field(default_factory=list)


@dataclass
class OdometryStates:
    """Per-frame states from an odometry-only estimator run."""

    t: np.ndarray
    poses: list
    vel: np.ndarray
    bg: np.ndarray
    gyro: np.ndarray  # gyro rate sample nearest each frame

    @classmethod
    def from_run(cls, data, extrinsics: Pose3, geometry: VehicleGeometry, hyper) -> OdometryStates:
        cfg = EstimatorConfig(use_dynamics=False, use_geometry=False)
        res = run_estimator(data, cfg, np.ones(5), extrinsics, geometry, hyper)
        recs = res.records
        return cls(
            np.array([r.t for r in recs]),
            [r.pose for r in recs],
            np.array([r.vel for r in recs]),
            np.array([r.bg for r in recs]),
            np.array([data.gyro.nearest(r.t) for r in recs]),
        )


def _segments(n_frames: int, frame_dt: float, length: float, stride: float):
    seg = max(int(round(length / frame_dt)), 1)
    step = max(int(round(stride / frame_dt)), 1)
    out = []
    i = 0
    while i + seg < n_frames:
        out.append((i, i + seg))
        i += step
    if not out and n_frames > 1:
        out.append((0, n_frames - 1))
    return out


class _SegmentModel:
    """Stacked weighted dynamics (and optionally geometry) residuals over all segments.

    Free variables: model parameters ``p`` (5), hyper-parameters (3), an
    extrinsics tangent (6) about ``ext0`` and a plane-offset correction (1).
    With geometry on, a weak prior holds the extrinsics near ``ext0``; it
    resolves the sensor height, which otherwise trades off against the plane
    offset.
    """

    def __init__(self, data, states: OdometryStates, geometry, ext0: Pose3, weights: FactorWeights, segment: float, stride: float, sub: int, components, with_geometry: bool, l_cam1: float, l_cam2: float, dt_max: float, ext_prior: float = 0.0):
        self.data = data
        self.st = states
        self.geometry = geometry
        self.ext0 = ext0
        self.ctrl = data.ctrl
        dt = float(np.median(np.diff(states.t)))
        self.segs = _segments(len(states.t), dt, segment, stride)
        self.sub = max(int(sub), 1)
        self.components = np.asarray(components)
        self.sw_dyn = np.sqrt(np.array([weights.dynamics_pose] * 3 + [weights.dynamics_vel] * 3))[self.components]
        self.with_geometry = with_geometry
        self.sw_geom = math.sqrt(weights.geometry)
        self.sw_prior = math.sqrt(ext_prior)
        self.d = plane_offset(states.poses[0], ext0)
        self.l_cam1, self.l_cam2 = l_cam1, l_cam2
        self.dt_max = dt_max
        self._cache = None

    def ext(self, dx) -> Pose3:
        return self.ext0.retract(dx)

    def evaluate(self, p, h, dx, dd=0.0):
        key = (tuple(p), tuple(h), tuple(dx), float(dd))
        if self._cache is not None and self._cache[0] == key:
            return self._cache[1]
        ext = self.ext(dx)
        Rx, tx = seed_pose(ext, 6, 0)
        rows, jac = [], []
        st = self.st
        for i0, i1 in self.segs:
            Rw0, pw0 = const_rot(st.poses[i0].R, 6), const_vec(st.poses[i0].t, 6)
            v0 = body_velocity_j(Rw0, const_vec(st.vel[i0], 6), st.gyro[i0], const_vec(st.bg[i0], 6), Rx, tx)
            frames = st.t[i0 : i1 + 1]
            ro = rollout(frames, v0.v, self.ctrl, p, self.geometry, h, with_sensitivities=True, dt_max=self.dt_max)
            for n in range(self.sub, i1 - i0 + 1, self.sub):
                j = i0 + n
                Rw1, pw1 = const_rot(st.poses[j].R, 6), const_vec(st.poses[j].t, 6)
                R_rel, t_rel = relative_body_pose_j(Rw0, pw0, Rx, tx, Rw1, pw1, Rx, tx)
                try:
                    meas = jconcat([project_planar_j(R_rel, t_rel), body_velocity_j(Rw1, const_vec(st.vel[j], 6), st.gyro[j], const_vec(st.bg[j], 6), Rx, tx)])
                except NearPiRotation:
                    continue
                pred = np.concatenate([ro.poses[n], ro.velocities[n]])
                S = ro.sensitivities[n]
                r = pred - meas.v
                r[2] = math.remainder(r[2], 2.0 * math.pi)
                d_ext = v0.d @ S[:, 0:3].T - meas.d  # (6, 6): ext tangent x residual
                J = np.hstack([S[:, 3:8], S[:, 8:11], d_ext.T, np.zeros((6, 1))])
                c = self.components
                rows.append(r[c] * self.sw_dyn)
                jac.append(J[c] * self.sw_dyn[:, None])
        if self.with_geometry:
            for j in range(0, len(st.t), self.sub):
                Rw, pw = const_rot(st.poses[j].R, 6), const_vec(st.poses[j].t, 6)
                g = geometry_residual_j(Rw, pw, Rx, tx, self.d + dd, self.l_cam1, self.l_cam2, self.geometry.l_f)
                jd = np.zeros((6, 1))
                jd[2] = 1.0
                rows.append(g.v * self.sw_geom)
                jac.append(np.hstack([np.zeros((6, 8)), g.d.T, jd]) * self.sw_geom)
            rows.append(np.asarray(dx, dtype=float) * self.sw_prior)
            jac.append(np.hstack([np.zeros((6, 8)), np.eye(6) * self.sw_prior, np.zeros((6, 1))]))
        r = np.concatenate(rows) if rows else np.zeros(0)
        J = np.vstack(jac) if jac else np.zeros((0, 15))
        # chain the right-perturbation derivative onto the tangent coordinates about ext0
        Jr = np.eye(6)
        Jr[3:6, 3:6] = right_jacobian(np.asarray(dx)[3:6])
        n_geom_prior = 6 if self.with_geometry else 0
        J[: len(r) - n_geom_prior, 8:14] = J[: len(r) - n_geom_prior, 8:14] @ Jr
        self._cache = (key, (r, J))
        return r, J


def _solve(model: _SegmentModel, x0, mask, unpack, lower, upper, max_nfev):
    history = []

    def fun(x):
        r, _ = model.evaluate(*unpack(x))
        return r

    def jac(x):
        r, J = model.evaluate(*unpack(x))
        history.append(0.5 * float(r @ r))
        return J[:, mask]

    try:
        sol = least_squares(fun, x0, jac=jac, bounds=(lower, upper), method="trf", x_scale="jac", max_nfev=max_nfev, xtol=1e-10, ftol=1e-10, gtol=1e-10)
    except (NonFiniteState, ValueError) as exc:
        raise SolverFailure(f"offline calibration failed: {exc}") from exc
    if sol.status < 0 or not np.isfinite(sol.cost):
        raise SolverFailure(f"offline calibration failed: {sol.message}")
    r, _ = model.evaluate(*unpack(sol.x))
    return sol, 0.5 * float(r @ r), history


def calibrate_stage1(
    data,
    hyper: LongitudinalHyperParams,
    init: DynamicsParams,
    geometry: VehicleGeometry | None = None,
    extrinsics: Pose3 | None = None,
    states: OdometryStates | None = None,
    weights: FactorWeights | None = None,
    segment: float = 2.0,
    stride: float = 1.0,
    sub: int = 3,
    max_nfev: int = 100,
    dt_max: float = DT_MAX,
) -> CalibResult:
    """Fit ``c_thr1, c_thr2, c_res`` on straight driving with everything else frozen."""
    if np.any(np.abs(data.ctrl.u_str) >= FORWARD_STEER_LIMIT):
        raise NotForwardMotion(f"steering magnitude reaches {np.max(np.abs(data.ctrl.u_str)):.3f} (limit {FORWARD_STEER_LIMIT})")
    geometry = geometry or data.config.geometry
    ext = extrinsics or data.config.extrinsics
    states = states or OdometryStates.from_run(data, ext, geometry, hyper)
    model = _SegmentModel(data, states, geometry, ext, weights or FactorWeights(), segment, stride, sub, [0, 3], False, 0.0, 0.0, dt_max)
    p0 = init.as_array()
    h = hyper.as_array()
    mask = np.array([1, 2, 3])

    def unpack(x):
        p = p0.copy()
        p[1:4] = x
        return p, h, np.zeros(6)

    sol, cost, hist = _solve(model, p0[1:4], mask, unpack, np.full(3, EPS_P), np.full(3, np.inf), max_nfev)
    p = p0.copy()
    p[1:4] = sol.x
    return CalibResult(DynamicsParams.from_array(p), hyper, ext, cost, max(int(sol.njev) - 1, 0), hist)


def initial_steering_gain(data, max_steer_angle: float) -> float:
    """Front-wheel angle per unit steering input from the largest command and the largest wheel angle."""
    u_max = float(np.max(np.abs(data.ctrl.u_str)))
    if u_max <= 0:
        raise ValueError("no steering input in the data")
    return max_steer_angle / u_max


def calibrate_stage2(
    data,
    stage1: CalibResult,
    init: DynamicsParams | None = None,
    extrinsics: Pose3 | None = None,
    geometry: VehicleGeometry | None = None,
    max_steer_angle: float | None = None,
    states: OdometryStates | None = None,
    weights: FactorWeights | None = None,
    l_cam1: float = 0.01,
    l_cam2: float = 0.03,
    ext_prior: float = 1e4,
    segment: float = 2.0,
    stride: float = 1.0,
    sub: int = 3,
    max_nfev: int = 50,
    dt_max: float = DT_MAX,
) -> CalibResult:
    """Fit all model parameters, hyper-parameters and extrinsics jointly.

    ``ext_prior`` is the information weight tying the extrinsics to their
    initial value (1e4 corresponds to 1 cm / 0.6 deg); the sensor height is
    not observable from planar driving and rests on it.
    """
    geometry = geometry or data.config.geometry
    ext0 = extrinsics or stage1.extrinsics
    base = init if init is not None else stage1.params
    p0 = base.as_array().copy()
    p0[1:4] = stage1.params.as_array()[1:4]
    if max_steer_angle is not None:
        p0[0] = initial_steering_gain(data, max_steer_angle)
    h0 = np.clip(stage1.hyper.as_array(), HYPER_LOWER, HYPER_UPPER)
    states = states or OdometryStates.from_run(data, ext0, geometry, stage1.hyper)
    model = _SegmentModel(data, states, geometry, ext0, weights or FactorWeights(), segment, stride, sub, np.arange(6), True, l_cam1, l_cam2, dt_max, ext_prior)
    mask = np.arange(15)

    def unpack(x):
        return x[0:5], x[5:8], x[8:14], x[14]

    x0 = np.concatenate([p0, h0, np.zeros(7)])
    lower = np.concatenate([np.full(5, EPS_P), HYPER_LOWER, np.full(7, -np.inf)])
    upper = np.concatenate([np.full(5, np.inf), HYPER_UPPER, np.full(7, np.inf)])
    x0 = np.clip(x0, lower, upper)
    sol, cost, hist = _solve(model, x0, mask, unpack, lower, upper, max_nfev)
    p, h, dx, _ = unpack(sol.x)
    return CalibResult(DynamicsParams.from_array(p), LongitudinalHyperParams.from_array(h), model.ext(dx), cost, max(int(sol.njev) - 1, 0), hist)
