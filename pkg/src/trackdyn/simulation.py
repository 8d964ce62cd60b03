"""Ground-truth vehicle simulation and synthetic odometry / gyro streams.

The world frame has its origin at the initial sensor position and its axes
aligned with the initial vehicle frame, so the vehicle moves in the plane
``z = -h`` where ``h`` is the sensor height above the body origin.  The true
model is integrated frame by frame with the same pose-reset composition the
estimator uses, which makes noise-free measurements exactly consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    DynamicsParams,
    LongitudinalHyperParams,
    VehicleGeometry,
    VehicleState2D,
    slip_angles,
)
from .errors import NonFiniteState
from .geometry import E3, Pose3, rot_z, so3_exp
from .integration import N_SENS, ControlTimeline, _integrate_span
from .measurements import GyroStream, OdomMeasurement

TRUTH_DT = 1e-3

# camera-style sensor axes: z forward, x right, y down
SENSOR_AXES = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])

TRUE_GEOMETRY = VehicleGeometry(m=3.5, i_z=0.07, l_f=0.17, l_r=0.17)
TRUE_PARAMS = DynamicsParams(gamma=0.35, c_thr1=10.0, c_thr2=2.5, c_res=6.0, c_tire=50.0)
L_CAM1 = 0.01
L_CAM2 = 0.03
CAM_HEIGHT = 0.1
DEFAULT_SATURATION = 0.15


def default_extrinsics(pitch: float = 0.0) -> Pose3:
    """Sensor pose in the vehicle frame (forward axis pitched down by ``pitch`` rad)."""
    R = so3_exp([0.0, pitch, 0.0]) @ SENSOR_AXES
    return Pose3(R, np.array([TRUE_GEOMETRY.l_f + L_CAM2, L_CAM1, CAM_HEIGHT]))


@dataclass
class NoiseConfig:
    rel_trans: float = 0.005
    rel_rot: float = math.radians(0.1)
    vel: float = 0.01
    gyro: float = 0.005
    bias_rw: float = 1e-4

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"noise level {k} must be finite and non-negative")

    @classmethod
    def zero(cls) -> NoiseConfig:
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class SimConfig:
    geometry: VehicleGeometry = TRUE_GEOMETRY
    params_schedule: list = field(default_factory=lambda: [(0.0, TRUE_PARAMS)])
    extrinsics: Pose3 = field(default_factory=default_extrinsics)
    hyper: LongitudinalHyperParams = field(default_factory=LongitudinalHyperParams)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    odom_rate: float = 30.0
    gyro_rate: float = 200.0
    control_rate: float = 20.0
    tire_saturation: float = 0.0  # > 0 enables the saturating truth tire (model mismatch)
    initial_bias: tuple = (0.01, -0.008, 0.005)
    odom_lag: int = 20  # relative poses to this many previous frames
    seed: int = 0

    def __post_init__(self):
        if min(self.odom_rate, self.gyro_rate, self.control_rate) <= 0:
            raise ValueError("sensor rates must be positive")
        ts = [t for t, _ in self.params_schedule]
        if not ts or ts[0] != 0.0 or np.any(np.diff(ts) <= 0):
            raise ValueError("parameter schedule must start at t=0 with increasing timestamps")
        if self.tire_saturation < 0:
            raise ValueError("tire saturation must be non-negative")
        if self.odom_lag < 1:
            raise ValueError("odom_lag must be at least 1")

    def params_at(self, t: float) -> DynamicsParams:
        cur = self.params_schedule[0][1]
        for ts, p in self.params_schedule:
            if ts <= t:
                cur = p
        return cur


@dataclass
class GroundTruth:
    """Per-frame true states."""

    t: np.ndarray
    poses: list  # sensor poses T_wi
    vel_world: np.ndarray  # sensor velocity in the world frame
    body: np.ndarray  # (v_x, v_y, omega_z) of the vehicle frame
    planar: np.ndarray  # (X, Y, Theta) of the vehicle frame in the world plane
    bias: np.ndarray  # gyro bias
    slips: np.ndarray  # (front, rear) slip angles

    def __len__(self):
        return len(self.t)


@dataclass
class SimOutput:
    config: SimConfig
    ctrl: ControlTimeline
    gt: GroundTruth
    gyro: GyroStream
    odom: list
    initial_pose: Pose3

    @property
    def frame_dt(self) -> float:
        return 1.0 / self.config.odom_rate

    @property
    def params_truth(self) -> list:
        return list(self.config.params_schedule)


def _grid(rate: float, t_end: float) -> np.ndarray:
    n = int(math.floor(t_end * rate + 1e-9))
    return np.arange(n + 1) / rate


def _noisy_pose(T: Pose3, rng, s_t: float, s_r: float) -> Pose3:
    dt = rng.normal(size=3) * s_t
    dr = rng.normal(size=3) * s_r
    return Pose3(T.R @ so3_exp(dr), T.t + dt)


def simulate(config: SimConfig, ctrl: ControlTimeline, duration: float) -> SimOutput:
    """Integrate the true model from rest and generate the sensor streams."""
    if not duration > 0:
        raise ValueError("duration must be positive")
    cfg = config
    geom = cfg.geometry.as_array()
    hyp = cfg.hyper.as_array()
    frames = _grid(cfg.odom_rate, duration)
    if len(frames) < 2:
        raise ValueError("duration shorter than one frame interval")
    t_end = frames[-1]
    gyro_t = np.union1d(_grid(cfg.gyro_rate, t_end), frames)
    gyro_t = gyro_t[gyro_t < t_end]
    sched_t = np.array([t for t, _ in cfg.params_schedule if t < t_end])
    events = np.union1d(np.union1d(np.union1d(frames, gyro_t), ctrl.t[(ctrl.t > 0) & (ctrl.t < t_end)]), sched_t)

    ext = cfg.extrinsics
    R_oi, t_oi = ext.R, ext.t
    axis_i = R_oi.T @ E3  # vehicle yaw axis in sensor coordinates
    rng = np.random.default_rng(cfg.seed)
    noise = cfg.noise

    s = np.zeros(6)
    S = np.zeros((6, N_SENS))
    P = np.zeros(3)  # vehicle planar pose in world at the last frame

    theta_at = {}
    omega_at = {}
    frame_states = []

    frame_set = set(frames.tolist())
    gyro_set = set(gyro_t.tolist())

    def record(t):
        if t in gyro_set or t == t_end:
            theta_at[t] = P[2] + s[2]
            omega_at[t] = s[5]

    record(0.0)
    frame_states.append((0.0, P.copy(), s[3:6].copy()))
    for a, b in zip(events[:-1], events[1:]):
        p = cfg.params_at(a).as_array()
        status = _integrate_span(s, S, a, b, ctrl.t, ctrl.u_thr, ctrl.u_str, p, hyp, geom, cfg.tire_saturation, TRUTH_DT, False)
        if status == -1:
            raise ValueError(f"control timeline does not cover t={a}")
        if status == 0:
            raise NonFiniteState(f"truth integration diverged near t={b}")
        if b in frame_set:
            c, sn = math.cos(P[2]), math.sin(P[2])
            P = np.array([c * s[0] - sn * s[1] + P[0], sn * s[0] + c * s[1] + P[1], P[2] + s[2]])
            s[0:3] = 0.0
            frame_states.append((b, P.copy(), s[3:6].copy()))
        record(b)

    # ground truth per frame
    n = len(frames)
    poses, vel_w, body, planar, slips = [], np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 2))
    for j, (t, Pj, v) in enumerate(frame_states):
        R_wo = rot_z(Pj[2])
        # world origin at the initial sensor position: p_wo(0) = -t_oi
        p_wo = np.array([Pj[0], Pj[1], 0.0]) - t_oi
        T_wo = Pose3(R_wo, p_wo)
        poses.append(T_wo @ ext)
        w_o = np.array([0.0, 0.0, v[2]])
        vel_w[j] = R_wo @ (np.array([v[0], v[1], 0.0]) + np.cross(w_o, t_oi))
        body[j] = v
        planar[j] = Pj
        alpha = cfg.params_at(t).gamma * ctrl.lookup(t).u_str
        slips[j] = slip_angles(VehicleState2D(0.0, 0.0, 0.0, v[0], v[1], v[2]), alpha, cfg.geometry)

    # gyro stream with random-walk bias
    m = len(gyro_t)
    dts = np.diff(np.append(gyro_t, t_end))
    bias = np.array(cfg.initial_bias, dtype=float)
    rates = np.zeros((m, 3))
    dtheta = np.zeros((m, 3))
    bias_at = {}
    for k, t in enumerate(gyro_t):
        bias_at[t] = bias.copy()
        nz = rng.normal(size=3) * noise.gyro
        t_next = gyro_t[k + 1] if k + 1 < m else t_end
        rates[k] = axis_i * omega_at[t] + bias + nz
        dtheta[k] = axis_i * (theta_at[t_next] - theta_at[t]) + (bias + nz) * dts[k]
        bias = bias + rng.normal(size=3) * noise.bias_rw * math.sqrt(dts[k])
    bias_at[t_end] = bias.copy()
    gyro = GyroStream(gyro_t, rates, dtheta, dts)
    bias_frames = np.array([bias_at[t] for t in frames])

    # odometry
    odom = []
    for j, t in enumerate(frames):
        T = poses[j]
        v_i = T.R.T @ vel_w[j] + rng.normal(size=3) * noise.vel
        rel = {}
        for k in range(max(0, j - cfg.odom_lag), j):
            rel[k] = _noisy_pose(poses[k].inverse() @ T, rng, noise.rel_trans, noise.rel_rot)
        odom.append(OdomMeasurement(j, float(t), v_i, rel))

    gt = GroundTruth(frames, poses, vel_w, body, planar, bias_frames, slips)
    return SimOutput(cfg, ctrl, gt, gyro, odom, poses[0])


# ---------------------------------------------------------------------------
# control scripts

SCRIPT_NAMES = ("full-throttle-slalom", "varying-throttle-slalom", "stop-and-go", "straight-accel")


def _timeline(t, thr, stre) -> ControlTimeline:
    return ControlTimeline(t, np.clip(thr, 0.0, 1.0), np.clip(stre, -1.0, 1.0))


def make_script(name: str, duration: float = 60.0, rate: float = 20.0, tail: float = 3.0) -> ControlTimeline:
    """Deterministic control script; the last ``tail`` seconds are zero input (standing still)."""
    n = int(math.floor(duration * rate + 1e-9))
    t = np.arange(n + 1) / rate
    drive = t < duration - tail
    if name == "full-throttle-slalom":
        thr = np.ones_like(t)
        stre = 0.6 * np.sin(2 * np.pi * t / 4.0)
    elif name == "varying-throttle-slalom":
        thr = 0.55 + 0.3 * np.sin(2 * np.pi * t / 7.3) + 0.15 * np.sin(2 * np.pi * t / 2.9)
        stre = 0.7 * np.sin(2 * np.pi * t / 3.7) + 0.25 * np.sin(2 * np.pi * t / 1.7)
    elif name == "stop-and-go":
        phase = np.mod(t, 6.0)
        cycle = np.floor(t / 6.0)
        thr = np.where(phase < 3.0, 0.6 + 0.3 * np.sin(np.pi * phase / 3.0), 0.0)
        stre = np.where(phase < 3.0, 0.6 * np.sin(2 * np.pi * phase / 3.0 + cycle), 0.0)
    elif name == "straight-accel":
        levels = np.array([0.3, 0.6, 1.0, 0.2, 0.8, 0.0, 0.5, 0.9, 0.1, 0.7])
        thr = levels[(np.floor(t / 2.5).astype(int)) % len(levels)]
        stre = np.zeros_like(t)
    else:
        raise KeyError(f"unknown script {name!r}; available: {', '.join(SCRIPT_NAMES)}")
    thr = np.where(drive, thr, 0.0)
    stre = np.where(drive, stre, 0.0)
    return _timeline(t, thr, stre)


def builtin_scripts(duration: float = 60.0, rate: float = 20.0) -> dict[str, ControlTimeline]:
    return {name: make_script(name, duration, rate) for name in SCRIPT_NAMES}
