"""Residuals of the windowed estimation problem.

Variables are keyed ``(frame_index, kind)`` with kinds ``pose`` (sensor pose in
the world, 6), ``vel`` (world velocity, 3), ``bg`` (gyro bias, 3), ``ext``
(sensor pose in the vehicle frame, 6) and ``param`` (model parameters, 5).
Each factor returns its raw residual and Jacobian blocks; the diagonal
information weights are kept on the factor and applied by the solver.
"""

from __future__ import annotations

import math
from collections.abc import Hashable, Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .dynamics import N_PARAM, VehicleGeometry
from .errors import ControlError, FactorEvaluationFailure, NonFiniteState
from .geometry import (
    E3,
    JVec,
    Pose3,
    body_velocity_j,
    const_rot,
    const_vec,
    geometry_residual_j,
    hat,
    jconcat,
    jlog,
    project_planar_j,
    relative_body_pose_j,
    right_jacobian,
    right_jacobian_inv,
    right_jacobian_inv_batch,
    seed_pose,
    seed_vec,
    so3_exp,
    so3_log,
)
from .integration import DT_MAX, ControlTimeline, rollout
from .measurements import GyroStream

Key = tuple[int, str]


@dataclass
class Residual:
    value: np.ndarray
    jac: dict[Hashable, np.ndarray] = field(default_factory=dict)


@dataclass
class FrameNode:
    t: float
    pose: Pose3
    vel: np.ndarray
    bg: np.ndarray
    ext: Pose3
    params: np.ndarray | None = None

    def values(self, index: int) -> dict[Key, object]:
        out = {(index, "pose"): self.pose, (index, "vel"): self.vel, (index, "bg"): self.bg, (index, "ext"): self.ext}
        if self.params is not None:
            out[(index, "param")] = self.params
        return out


@dataclass
class FactorWeights:
    """Diagonal information weights (inverse variances).

    ``ext_rw`` and ``param_rw`` are per unit of ``30 * frame interval``.
    """

    dynamics_pose: float = 1e3
    dynamics_vel: float = 1e3
    geometry: float = 1e4
    ext_prior: float = 1.0
    ext_rw: float = 1e4
    param_abs: float = 20.0
    param_rw: float = 1e6
    # surrogate front-end noise (standard deviations)
    rel_trans_sigma: float = 0.005
    rel_rot_sigma: float = math.radians(0.1)
    vel_sigma: float = 0.01
    gyro_sigma: float = 0.005
    bias_rw_sigma: float = 1e-4
    initial_pose_sigma: float = 1e-5
    initial_bias_sigma: float = 0.02
    # Huber threshold on the whitened residual norm of measurement and dynamics factors; None = plain least squares
    huber: float | None = None


def _dim(value) -> int:
    return 6 if isinstance(value, Pose3) else int(np.size(value))


class _Seeds:
    """Assigns tangent offsets to the variables a factor touches."""

    def __init__(self, values: Mapping, keys, want_jac: bool):
        self.values = values
        self.offsets: dict = {}
        self.dims: dict = {}
        k = 0
        for key in keys:
            d = _dim(values[key])
            self.offsets[key] = k if want_jac else None
            self.dims[key] = d
            k += d
        self.K = k if want_jac else 0

    def pose(self, key):
        return seed_pose(self.values[key], self.K, self.offsets[key])

    def vec(self, key) -> JVec:
        return seed_vec(self.values[key], self.K, self.offsets[key])

    def split(self, out: JVec) -> Residual:
        res = Residual(np.asarray(out.v, dtype=float))
        if self.K:
            for key, off in self.offsets.items():
                res.jac[key] = out.d[off : off + self.dims[key]].T.copy()
        return res


class Factor:
    keys: tuple = ()
    weight: np.ndarray
    absorb: bool = True  # marginalize into the prior when a connected variable leaves
    name: str = "factor"
    huber: float | None = None  # robust threshold on sqrt(r^T W r)

    def evaluate(self, values: Mapping, want_jac: bool = True) -> Residual:
        raise NotImplementedError

    def cost(self, values: Mapping) -> float:
        r = self.evaluate(values, want_jac=False).value
        return float(r @ (self.weight * r))


# ---------------------------------------------------------------------------
# building blocks


def _rel_pose(Ta: Pose3, Tb: Pose3, meas: Pose3, want_jac: bool):
    """Residual ``[R_a^T (p_b - p_a) - t_m, Log(R_m^T R_a^T R_b)]`` with closed-form Jacobians."""
    Rat = Ta.R.T
    dp = Rat @ (Tb.t - Ta.t)
    Q = Rat @ Tb.R
    r_r = so3_log(meas.R.T @ Q)
    r = np.concatenate([dp - meas.t, r_r])
    if not want_jac:
        return r, None, None
    Jri = right_jacobian_inv(r_r)
    Ja = np.zeros((6, 6))
    Jb = np.zeros((6, 6))
    Ja[0:3, 0:3] = -Rat
    Ja[0:3, 3:6] = hat(dp)
    Ja[3:6, 3:6] = -Jri @ Q.T
    Jb[0:3, 0:3] = Rat
    Jb[3:6, 3:6] = Jri
    return r, Ja, Jb


def _gyro_delta(bg: np.ndarray, dtheta: np.ndarray, dts: np.ndarray, want_jac: bool):
    """``prod Exp(dtheta_k - bg dt_k)`` and its right-perturbation Jacobian w.r.t. ``bg``."""
    R = np.eye(3)
    J = np.zeros((3, 3))
    for k in range(len(dts)):
        xi = dtheta[k] - bg * dts[k]
        E = so3_exp(xi)
        if want_jac:
            J = E.T @ J - right_jacobian(xi) * dts[k]
        R = R @ E
    return R, J


def _iso(w, n) -> np.ndarray:
    return np.broadcast_to(np.asarray(w, dtype=float), (n,)).astype(float)


# ---------------------------------------------------------------------------
# factors


class OdometryFactor(Factor):
    """Relative pose, sensor-frame velocity of ``b``, gyro-integrated rotation and bias walk between frames ``a`` and ``b``."""

    name = "odometry"

    def __init__(self, a: int, b: int, meas_rel: Pose3, vel_meas, dtheta, dts, weights: FactorWeights):
        self.a, self.b = a, b
        self.meas = meas_rel
        self.vel_meas = np.asarray(vel_meas, dtype=float)
        self.dtheta = np.asarray(dtheta, dtype=float).reshape(-1, 3)
        self.dts = np.asarray(dts, dtype=float)
        self.keys = ((a, "pose"), (b, "pose"), (b, "vel"), (a, "bg"), (b, "bg"))
        span = float(np.sum(self.dts)) if len(self.dts) else 1e-3
        g_var = weights.gyro_sigma**2 * float(np.sum(self.dts**2)) if len(self.dts) else 1.0
        g_var = max(g_var, 1e-18)
        self.weight = np.concatenate(
            [
                _iso(1.0 / weights.rel_trans_sigma**2, 3),
                _iso(1.0 / weights.rel_rot_sigma**2, 3),
                _iso(1.0 / weights.vel_sigma**2, 3),
                _iso(1.0 / g_var, 3),
                _iso(1.0 / (weights.bias_rw_sigma**2 * span), 3),
            ]
        )

    def evaluate(self, values, want_jac=True):
        Ta, Tb = values[(self.a, "pose")], values[(self.b, "pose")]
        vb = np.asarray(values[(self.b, "vel")], dtype=float)
        bga = np.asarray(values[(self.a, "bg")], dtype=float)
        bgb = np.asarray(values[(self.b, "bg")], dtype=float)
        r_rel, Ja, Jb = _rel_pose(Ta, Tb, self.meas, want_jac)
        vb_i = Tb.R.T @ vb
        dR, Jbias = _gyro_delta(bga, self.dtheta, self.dts, want_jac)
        Q = Ta.R.T @ Tb.R
        E = dR.T @ Q
        r_gyr = so3_log(E)
        res = Residual(np.concatenate([r_rel, vb_i - self.vel_meas, r_gyr, bgb - bga]))
        if want_jac:
            Jri = right_jacobian_inv(r_gyr)
            JA = np.zeros((15, 6))
            JB = np.zeros((15, 6))
            JA[0:6] = Ja
            JB[0:6] = Jb
            JB[6:9, 3:6] = hat(vb_i)
            JA[9:12, 3:6] = -Jri @ Q.T
            JB[9:12, 3:6] = Jri
            Jv = np.zeros((15, 3))
            Jv[6:9] = Tb.R.T
            Jga = np.zeros((15, 3))
            Jga[9:12] = -Jri @ E.T @ Jbias
            Jga[12:15] = -np.eye(3)
            Jgb = np.zeros((15, 3))
            Jgb[12:15] = np.eye(3)
            res.jac = {
                (self.a, "pose"): JA,
                (self.b, "pose"): JB,
                (self.b, "vel"): Jv,
                (self.a, "bg"): Jga,
                (self.b, "bg"): Jgb,
            }
        return res


class RelativePoseFactor(Factor):
    """Measured relative pose between two frame poses (keyframe co-observation surrogate)."""

    name = "anchor"

    def __init__(self, a: int, b: int, meas_rel: Pose3, weights: FactorWeights):
        self.a, self.b = a, b
        self.meas = meas_rel
        self.keys = ((a, "pose"), (b, "pose"))
        self.weight = np.concatenate(
            [_iso(1.0 / weights.rel_trans_sigma**2, 3), _iso(1.0 / weights.rel_rot_sigma**2, 3)]
        )

    def evaluate(self, values, want_jac=True):
        r, Ja, Jb = _rel_pose(values[(self.a, "pose")], values[(self.b, "pose")], self.meas, want_jac)
        res = Residual(r)
        if want_jac:
            res.jac = {(self.a, "pose"): Ja, (self.b, "pose"): Jb}
        return res


class RelativePoseSetFactor(Factor):
    """All keyframe-to-frame relative poses of one new frame, evaluated in a batch."""

    name = "anchor_set"

    def __init__(self, b: int, meas: Mapping[int, Pose3], weights: FactorWeights):
        self.b = b
        self.anchors = list(meas)
        self.Rm_t = np.array([meas[k].R.T for k in self.anchors])
        self.tm = np.array([meas[k].t for k in self.anchors])
        self.keys = tuple((k, "pose") for k in self.anchors) + ((b, "pose"),)
        one = np.concatenate([_iso(1.0 / weights.rel_trans_sigma**2, 3), _iso(1.0 / weights.rel_rot_sigma**2, 3)])
        self.weight = np.tile(one, len(self.anchors))

    def evaluate(self, values, want_jac=True):
        n = len(self.anchors)
        Tb = values[(self.b, "pose")]
        Ra = np.array([values[(k, "pose")].R for k in self.anchors])
        pa = np.array([values[(k, "pose")].t for k in self.anchors])
        Rat = Ra.transpose(0, 2, 1)
        dp = np.einsum("nij,nj->ni", Rat, Tb.t - pa)
        Q = Rat @ Tb.R
        r_r = Rotation.from_matrix(self.Rm_t @ Q).as_rotvec()
        res = Residual(np.concatenate([dp - self.tm, r_r], axis=1).reshape(-1))
        if want_jac:
            Jri = right_jacobian_inv_batch(r_r)
            JB = np.zeros((n, 6, 6))
            JB[:, 0:3, 0:3] = Rat
            JB[:, 3:6, 3:6] = Jri
            res.jac[(self.b, "pose")] = JB.reshape(6 * n, 6)
            for i, k in enumerate(self.anchors):
                Ja = np.zeros((6 * n, 6))
                Ja[6 * i : 6 * i + 3, 0:3] = -Rat[i]
                Ja[6 * i : 6 * i + 3, 3:6] = hat(dp[i])
                Ja[6 * i + 3 : 6 * i + 6, 3:6] = -Jri[i] @ Q[i].T
                res.jac[(k, "pose")] = Ja
        return res


class VelocityFactor(Factor):
    """Sensor-frame velocity measurement of a single frame."""

    name = "velocity"

    def __init__(self, a: int, vel_meas, weights: FactorWeights):
        self.a = a
        self.vel_meas = np.asarray(vel_meas, dtype=float)
        self.keys = ((a, "pose"), (a, "vel"))
        self.weight = _iso(1.0 / weights.vel_sigma**2, 3)

    def evaluate(self, values, want_jac=True):
        sd = _Seeds(values, self.keys, want_jac)
        R, _ = sd.pose((self.a, "pose"))
        v = sd.vec((self.a, "vel"))
        return sd.split(R.T @ v - const_vec(self.vel_meas, sd.K))


class PriorFactor(Factor):
    """Unary prior ``x (-) x_ref`` on a pose or vector variable."""

    name = "prior"

    def __init__(self, key, ref, weight):
        self.key = key
        self.ref = ref
        self.keys = (key,)
        self.weight = _iso(weight, _dim(ref))

    def evaluate(self, values, want_jac=True):
        sd = _Seeds(values, self.keys, want_jac)
        if isinstance(self.ref, Pose3):
            R, p = sd.pose(self.key)
            out = jconcat([p - const_vec(self.ref.t, sd.K), jlog(const_rot(self.ref.R.T, sd.K) @ R)])
        else:
            out = sd.vec(self.key) - const_vec(self.ref, sd.K)
        return sd.split(out)


class GeometryFactor(Factor):
    """Plane constraint plus yaw and lever-arm priors on the extrinsics."""

    name = "geometry"

    def __init__(self, a: int, d: float, l_cam1: float, l_cam2: float, l_f: float, weight, forward_axis=E3):
        self.a = a
        self.d, self.l_cam1, self.l_cam2, self.l_f = d, l_cam1, l_cam2, l_f
        self.forward_axis = np.asarray(forward_axis, dtype=float)
        self.keys = ((a, "pose"), (a, "ext"))
        self.weight = _iso(weight, 6)

    def evaluate(self, values, want_jac=True):
        sd = _Seeds(values, self.keys, want_jac)
        Rwi, pwi = sd.pose((self.a, "pose"))
        Roi, toi = sd.pose((self.a, "ext"))
        out = geometry_residual_j(Rwi, pwi, Roi, toi, self.d, self.l_cam1, self.l_cam2, self.l_f, self.forward_axis)
        return sd.split(out)


class ExtrinsicsRandomWalkFactor(Factor):
    name = "ext_rw"

    def __init__(self, a: int, b: int, weight):
        self.a, self.b = a, b
        self.keys = ((a, "ext"), (b, "ext"))
        self.weight = _iso(weight, 6)

    def evaluate(self, values, want_jac=True):
        sd = _Seeds(values, self.keys, want_jac)
        Ra, ta = sd.pose((self.a, "ext"))
        Rb, tb = sd.pose((self.b, "ext"))
        return sd.split(jconcat([tb - ta, jlog(Ra.T @ Rb)]))


class ParamRelativeFactor(Factor):
    name = "param_rel"

    def __init__(self, a: int, b: int, weight):
        self.a, self.b = a, b
        self.keys = ((a, "param"), (b, "param"))
        self.weight = _iso(weight, N_PARAM)

    def evaluate(self, values, want_jac=True):
        pa = np.asarray(values[(self.a, "param")], dtype=float)
        pb = np.asarray(values[(self.b, "param")], dtype=float)
        res = Residual(pa - pb)
        if want_jac:
            res.jac[(self.a, "param")] = np.eye(N_PARAM)
            res.jac[(self.b, "param")] = -np.eye(N_PARAM)
        return res


class ParamAbsoluteFactor(Factor):
    """Weak pull towards the most recently marginalized parameters; dropped rather than marginalized."""

    name = "param_abs"
    absorb = False

    def __init__(self, a: int, ref, weight):
        self.a = a
        self.ref = np.asarray(ref, dtype=float).copy()
        self.keys = ((a, "param"),)
        self.weight = _iso(weight, N_PARAM)

    def evaluate(self, values, want_jac=True):
        res = Residual(np.asarray(values[(self.a, "param")], dtype=float) - self.ref)
        if want_jac:
            res.jac[(self.a, "param")] = np.eye(N_PARAM)
        return res


class DynamicsFactor(Factor):
    """Multistep single-track prediction from the first frame against the estimated trajectory.

    For every frame after the first, six residuals: predicted minus estimated
    planar pose relative to the first frame, and predicted minus estimated body
    velocity (yaw rate from the gyro sample nearest the frame).
    """

    name = "dynamics"

    def __init__(
        self,
        frames: list[int],
        times: list[float],
        ctrl: ControlTimeline,
        gyro: GyroStream,
        geom: VehicleGeometry,
        hyper,
        weight_pose=1e3,
        weight_vel=1e3,
        dt_max: float = DT_MAX,
    ):
        if len(frames) < 2:
            raise ValueError("dynamics factor needs at least two frames")
        self.frames = list(frames)
        self.times = np.asarray(times, dtype=float)
        self.ctrl = ctrl
        self.geom = geom
        self.hyper = np.asarray(hyper.as_array() if hasattr(hyper, "as_array") else hyper, dtype=float)
        self.dt_max = dt_max
        self.gyro_rates = [np.array(gyro.nearest(t)) for t in self.times]
        keys = []
        for f in self.frames:
            keys += [(f, "pose"), (f, "vel"), (f, "bg"), (f, "ext")]
        keys.append((self.frames[0], "param"))
        self.keys = tuple(keys)
        block = np.concatenate([_iso(weight_pose, 3), _iso(weight_vel, 3)])
        self.weight = np.tile(block, len(self.frames) - 1)

    def evaluate(self, values, want_jac=True):
        sd = _Seeds(values, self.keys, want_jac)
        f0 = self.frames[0]
        st = []
        for f in self.frames:
            Rwi, pwi = sd.pose((f, "pose"))
            Roi, toi = sd.pose((f, "ext"))
            st.append((Rwi, pwi, sd.vec((f, "vel")), sd.vec((f, "bg")), Roi, toi))
        p = sd.vec((f0, "param"))

        Rwi0, pwi0, vw0, bg0, Roi0, toi0 = st[0]
        v0 = body_velocity_j(Rwi0, vw0, self.gyro_rates[0], bg0, Roi0, toi0)
        try:
            ro = rollout(self.times, v0.v, self.ctrl, p.v, self.geom, self.hyper, with_sensitivities=want_jac, dt_max=self.dt_max)
        except (NonFiniteState, ControlError) as exc:
            raise FactorEvaluationFailure(str(exc)) from exc

        parts = []
        for n in range(1, len(self.frames)):
            Rwi, pwi, vw, bg, Roi, toi = st[n]
            R_rel, t_rel = relative_body_pose_j(Rwi0, pwi0, Roi0, toi0, Rwi, pwi, Roi, toi)
            meas_pose = project_planar_j(R_rel, t_rel)
            meas_vel = body_velocity_j(Rwi, vw, self.gyro_rates[n], bg, Roi, toi)
            pred = np.concatenate([ro.poses[n], ro.velocities[n]])
            if want_jac:
                S = ro.sensitivities[n]
                d_pred = v0.d @ S[:, 0:3].T + p.d @ S[:, 3:8].T
            else:
                d_pred = np.zeros((0, 6))
            meas = jconcat([meas_pose, meas_vel])
            r = pred - meas.v
            r[2] = math.remainder(r[2], 2.0 * math.pi)
            parts.append(JVec(r, d_pred - meas.d))
        return sd.split(jconcat(parts))


# ---------------------------------------------------------------------------
# functional forms over frame nodes


def _merge(*frames_with_index):
    values = {}
    for i, fr in frames_with_index:
        values.update(fr.values(i))
    return values


def dynamics_factor(window: list[FrameNode], ctrl, gyro, geom, hyper, weights: FactorWeights | None = None) -> Residual:
    """Dynamics residual over a list of active recent frames (parameters taken from the first)."""
    if len(window) < 2:
        raise ValueError("dynamics factor needs at least two frames")
    if window[0].params is None:
        raise ValueError("first frame carries no model parameters")
    w = weights or FactorWeights()
    idx = list(range(len(window)))
    fac = DynamicsFactor(idx, [fr.t for fr in window], ctrl, gyro, geom, hyper, w.dynamics_pose, w.dynamics_vel)
    values = _merge(*zip(idx, window))
    return fac.evaluate(values)


def extrinsics_random_walk_factor(frame_a: FrameNode, frame_b: FrameNode) -> Residual:
    return ExtrinsicsRandomWalkFactor(0, 1, 1.0).evaluate(_merge((0, frame_a), (1, frame_b)))


def param_relative_factor(p_t0, p_t1) -> Residual:
    return ParamRelativeFactor(0, 1, 1.0).evaluate({(0, "param"): np.asarray(p_t0), (1, "param"): np.asarray(p_t1)})


def param_absolute_factor(p_t0, p_marg) -> Residual:
    return ParamAbsoluteFactor(0, p_marg, 1.0).evaluate({(0, "param"): np.asarray(p_t0)})


def odometry_measurement_factor(frame_a: FrameNode, frame_b: FrameNode, meas_rel: Pose3, vel_meas, dtheta=(), dts=()) -> Residual:
    fac = OdometryFactor(0, 1, meas_rel, vel_meas, np.reshape(dtheta, (-1, 3)), dts, FactorWeights())
    return fac.evaluate(_merge((0, frame_a), (1, frame_b)))


def keyframe_anchor_factor(keyframe_pose: Pose3, newest_pose: Pose3, meas_rel: Pose3) -> Residual:
    fac = RelativePoseFactor(0, 1, meas_rel, FactorWeights())
    return fac.evaluate({(0, "pose"): keyframe_pose, (1, "pose"): newest_pose})
