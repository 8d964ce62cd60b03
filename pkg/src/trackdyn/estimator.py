"""Sliding-window estimator with online calibration of the dynamics parameters.

The window holds ``n_recent`` full-state recent frames and up to
``n_keyframes`` pose-only keyframes.  Model parameters live on the two oldest
recent frames, tied by a random-walk factor, so that marginalizing the oldest
frame hands its parameter information to the next one.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import (
    EPS_P,
    DynamicsParams,
    LongitudinalHyperParams,
    VehicleGeometry,
    clamp_params,
)
from .errors import (
    FactorEvaluationFailure,
    NearPiRotation,
    NonFiniteState,
    OutOfOrderFrame,
    SolverFailure,
)
from .factors import (
    DynamicsFactor,
    ExtrinsicsRandomWalkFactor,
    FactorWeights,
    GeometryFactor,
    OdometryFactor,
    ParamAbsoluteFactor,
    ParamRelativeFactor,
    PriorFactor,
    RelativePoseSetFactor,
    VelocityFactor,
)
from .geometry import Pose3, body_velocity, plane_offset, so3_angle, so3_exp
from .integration import DT_MAX, ControlTimeline, RolloutResult, predict, rollout
from .measurements import GyroStream, OdomMeasurement
from .window import MAX_ITER, REL_COST_TOL, STEP_TOL, OptimizeReport, WindowGraph


@dataclass
class EstimatorConfig:
    n_recent: int = 3
    n_keyframes: int = 7
    kf_translation: float = 0.3
    kf_rotation: float = math.radians(10.0)
    weights: FactorWeights = field(default_factory=FactorWeights)
    # "relative": parameter prior / random-walk weights are divided by the squared initial value
    param_weight_mode: str = "relative"
    gate_threshold: float = 4.5e-4
    gate_warmup: int = 15
    use_dynamics: bool = True
    use_geometry: bool = True
    max_iter: int = MAX_ITER
    step_tol: float = STEP_TOL
    rel_tol: float = REL_COST_TOL
    dt_max: float = DT_MAX
    frame_dt: float = 1.0 / 30.0
    l_cam1: float = 0.01
    l_cam2: float = 0.03

    def __post_init__(self):
        if self.n_recent < 2:
            raise ValueError("n_recent must be at least 2")
        if self.n_keyframes < 0:
            raise ValueError("n_keyframes must be non-negative")
        if self.param_weight_mode not in ("relative", "absolute"):
            raise ValueError("param_weight_mode must be 'relative' or 'absolute'")

    @classmethod
    def published(cls, **kw) -> EstimatorConfig:
        """Published weights applied to raw SI residuals."""
        w = FactorWeights(dynamics_pose=1e3, dynamics_vel=1e3, geometry=1e4, ext_prior=1.0, ext_rw=1e4, param_abs=20.0, param_rw=1e8)
        return cls(weights=w, param_weight_mode="absolute", **kw)


@dataclass
class GateState:
    enabled: bool = False
    bias_variance: float = math.inf


@dataclass
class FrameRecord:
    index: int
    t: float
    pose: Pose3
    vel: np.ndarray
    bg: np.ndarray
    ext: Pose3
    params: np.ndarray  # parameters at the first recent frame
    body_vel: np.ndarray  # (v_x, v_y, omega_z) of the newest frame
    gate: bool
    bias_variance: float
    iterations: int
    seconds: float


class SlidingWindowEstimator:
    def __init__(
        self,
        config: EstimatorConfig,
        ctrl: ControlTimeline,
        gyro: GyroStream,
        initial_pose: Pose3,
        initial_params,
        initial_extrinsics: Pose3,
        geometry: VehicleGeometry,
        hyper: LongitudinalHyperParams = LongitudinalHyperParams(),
        initial_bias=(0.0, 0.0, 0.0),
    ):
        self.cfg = config
        self.ctrl = ctrl
        self.gyro = gyro
        self.initial_pose = initial_pose
        p0 = initial_params.as_array() if isinstance(initial_params, DynamicsParams) else np.asarray(initial_params, float)
        self.initial_params = clamp_params(p0.copy())
        self.initial_extrinsics = initial_extrinsics
        self.geometry = geometry
        self.hyper = hyper
        self.initial_bias = np.asarray(initial_bias, dtype=float)
        self.graph = WindowGraph(projectors={"param": clamp_params})
        self.recent: list[int] = []
        self.keyframes: list[int] = []
        self.times: dict[int, float] = {}
        self.gate = GateState()
        self.frames_seen = 0
        self.plane_d: float | None = None
        self.last_marg_params = self.initial_params.copy()
        self.records: list[FrameRecord] = []
        self.diagnostics: list[str] = []
        self._dyn: DynamicsFactor | None = None
        self._abs: ParamAbsoluteFactor | None = None
        scale = np.maximum(np.abs(self.initial_params), EPS_P)
        w = config.weights
        if config.param_weight_mode == "relative":
            self._w_param_abs = np.asarray(w.param_abs, float) / scale**2
            self._w_param_rw = np.asarray(w.param_rw, float) / scale**2
        else:
            self._w_param_abs = np.asarray(w.param_abs, float) * np.ones(5)
            self._w_param_rw = np.asarray(w.param_rw, float) * np.ones(5)

    # -- accessors -----------------------------------------------------------

    def value(self, index: int, kind: str):
        return self.graph.values[(index, kind)]

    @property
    def newest(self) -> int | None:
        return self.recent[-1] if self.recent else None

    @property
    def params(self) -> np.ndarray:
        return np.array(self.value(self.recent[0], "param"))

    def body_velocity(self, index: int) -> np.ndarray:
        t = self.times[index]
        return body_velocity(
            self.value(index, "pose"), self.value(index, "vel"), self.gyro.nearest(t), self.value(index, "bg"), self.value(index, "ext")
        )

    # -- window operations -----------------------------------------------------

    def add_frame(self, meas: OdomMeasurement):
        """Insert a frame, initialize its variables and attach its factors."""
        if self.newest is not None and not meas.t > self.times[self.newest]:
            raise OutOfOrderFrame(f"frame at t={meas.t} is not after t={self.times[self.newest]}")
        g, w, cfg = self.graph, self.cfg.weights, self.cfg
        b = meas.index
        if b in self.times:
            raise OutOfOrderFrame(f"frame index {b} already used")
        self.times[b] = float(meas.t)
        if self.newest is None:
            pose = self.initial_pose
            ext = self.initial_extrinsics
            g.add_variable((b, "pose"), pose)
            g.add_variable((b, "vel"), pose.R @ np.asarray(meas.vel, float))
            g.add_variable((b, "bg"), self.initial_bias.copy())
            g.add_variable((b, "ext"), ext)
            g.add_factor(PriorFactor((b, "pose"), pose, 1.0 / w.initial_pose_sigma**2))
            g.add_factor(VelocityFactor(b, meas.vel, w)).huber = w.huber
            g.add_factor(PriorFactor((b, "bg"), self.initial_bias.copy(), 1.0 / w.initial_bias_sigma**2))
            g.add_factor(PriorFactor((b, "ext"), ext, w.ext_prior))
            self.plane_d = plane_offset(pose, ext)
            self.recent.append(b)
        else:
            a = self.newest
            if a not in meas.rel:
                raise ValueError(f"frame {b} carries no relative pose to frame {a}")
            pose, vel = self._initial_guess(a, b, meas)
            g.add_variable((b, "pose"), pose)
            g.add_variable((b, "vel"), vel)
            g.add_variable((b, "bg"), np.array(self.value(a, "bg")))
            g.add_variable((b, "ext"), self.value(a, "ext"))
            dth, dts = self.gyro.between(self.times[a], self.times[b])
            g.add_factor(OdometryFactor(a, b, meas.rel[a], meas.vel, dth, dts, w)).huber = w.huber
            anchors = {k: meas.rel[k] for k in self.keyframes if k in meas.rel and k != a}
            if anchors:
                g.add_factor(RelativePoseSetFactor(b, anchors, w)).huber = w.huber
            dt = self.times[b] - self.times[a]
            g.add_factor(ExtrinsicsRandomWalkFactor(a, b, w.ext_rw * 30.0 * dt))
            self.recent.append(b)
        if cfg.use_geometry:
            g.add_factor(GeometryFactor(b, self.plane_d, cfg.l_cam1, cfg.l_cam2, self.geometry.l_f, w.geometry))
        self._ensure_param_slots()
        self._refresh_dynamics()
        self.frames_seen += 1

    def _initial_guess(self, a: int, b: int, meas: OdomMeasurement):
        T_a = self.value(a, "pose")
        v_a = self.value(a, "vel")
        ext = self.value(a, "ext")
        t_a, t_b = self.times[a], self.times[b]
        if self.gate.enabled and self.cfg.use_dynamics:
            try:
                ro = rollout([t_a, t_b], self.body_velocity(a), self.ctrl, self.params, self.geometry, self.hyper, dt_max=self.cfg.dt_max)
                x, y, th = ro.poses[1]
                rel_o = Pose3.from_planar(x, y, th)
                T_b = T_a @ ext.inverse() @ rel_o @ ext
                vx, vy, wz = ro.velocities[1]
                v_o = np.array([vx, vy, 0.0]) + np.cross([0.0, 0.0, wz], ext.t)
                R_wo = T_b.R @ ext.R.T
                return T_b, R_wo @ v_o
            except (NonFiniteState, NearPiRotation, ValueError):
                pass
        dth, dts = self.gyro.between(t_a, t_b)
        R = T_a.R.copy()
        bg = self.value(a, "bg")
        for k in range(len(dts)):
            R = R @ so3_exp(dth[k] - bg * dts[k])
        T_b = Pose3(R, T_a.t + v_a * (t_b - t_a))
        return T_b, R @ np.asarray(meas.vel, float)

    def _ensure_param_slots(self):
        g = self.graph
        holders = self.recent[:2]
        for i, f in enumerate(holders):
            if (f, "param") in g.values:
                continue
            if i == 0:
                g.add_variable((f, "param"), self.last_marg_params.copy())
            else:
                prev = holders[i - 1]
                g.add_variable((f, "param"), np.array(self.value(prev, "param")))
                g.add_factor(ParamRelativeFactor(prev, f, self._w_param_rw * 30.0 * (self.times[f] - self.times[prev])))
        first = holders[0]
        if self._abs is None or self._abs.a != first or self._abs not in g.factors:
            if self._abs is not None:
                g.remove_factor(self._abs)
            self._abs = g.add_factor(ParamAbsoluteFactor(first, self.last_marg_params, self._w_param_abs))

    def _refresh_dynamics(self):
        g = self.graph
        if self._dyn is not None:
            g.remove_factor(self._dyn)
            self._dyn = None
        if not (self.cfg.use_dynamics and self.gate.enabled and len(self.recent) >= 2):
            return
        w = self.cfg.weights
        self._dyn = g.add_factor(
            DynamicsFactor(
                list(self.recent),
                [self.times[f] for f in self.recent],
                self.ctrl,
                self.gyro,
                self.geometry,
                self.hyper,
                w.dynamics_pose,
                w.dynamics_vel,
                self.cfg.dt_max,
            )
        )
        self._dyn.huber = w.huber

    def optimize(self) -> OptimizeReport:
        cfg = self.cfg
        try:
            return self.graph.optimize(cfg.max_iter, cfg.step_tol, cfg.rel_tol)
        except SolverFailure as exc:
            self.diagnostics.append(f"frame {self.newest}: {exc}")
            return OptimizeReport(reason="failure")
        except FactorEvaluationFailure as exc:
            # drop the dynamics coupling for this frame and retry with the rest
            self.diagnostics.append(f"frame {self.newest}: {exc}; dynamics factor skipped")
            if self._dyn is not None:
                self.graph.remove_factor(self._dyn)
                self._dyn = None
            return self.graph.optimize(cfg.max_iter, cfg.step_tol, cfg.rel_tol)

    def update_gate(self) -> GateState:
        """Latch the dynamics coupling once the first recent frame's gyro-bias variance is small."""
        if self.gate.enabled or not self.cfg.use_dynamics:
            return self.gate
        cov = self.graph.covariance((self.recent[0], "bg"))
        var = float(np.max(np.diag(cov)))
        self.gate = GateState(False, var)
        if self.frames_seen >= self.cfg.gate_warmup and var < self.cfg.gate_threshold:
            self.gate = GateState(True, var)
            self._refresh_dynamics()
        return self.gate

    def _is_keyframe(self, f: int) -> bool:
        if not self.keyframes:
            return True
        T = self.value(f, "pose")
        K = self.value(self.keyframes[-1], "pose")
        return bool(np.linalg.norm(T.t - K.t) > self.cfg.kf_translation or so3_angle(K.R.T @ T.R) > self.cfg.kf_rotation)

    def marginalize(self):
        """Remove the oldest recent frame, keeping its pose if it qualifies as a keyframe."""
        if len(self.recent) < 2:
            return
        g = self.graph
        f = self.recent[0]
        self.last_marg_params = np.array(self.value(f, "param"))
        keep_pose = self.cfg.n_keyframes > 0 and self._is_keyframe(f)
        kinds = ["vel", "bg", "ext", "param"] + ([] if keep_pose else ["pose"])
        g.marginalize([(f, k) for k in kinds])
        self._dyn = None if self._dyn is not None and self._dyn not in g.factors else self._dyn
        self._abs = None if self._abs is not None and self._abs not in g.factors else self._abs
        self.recent.pop(0)
        if keep_pose:
            self.keyframes.append(f)
            while len(self.keyframes) > self.cfg.n_keyframes:
                old = self.keyframes.pop(0)
                g.marginalize([(old, "pose")])
        self.diagnostics.extend(g.diagnostics)
        g.diagnostics.clear()
        for k in [k for k in self.times if (k, "pose") not in g.values]:
            del self.times[k]
        self._ensure_param_slots()

    def step(self, meas: OdomMeasurement) -> FrameRecord:
        """Full per-frame cycle: insert, solve, gate, record, slide."""
        t0 = time.perf_counter()
        self.add_frame(meas)
        rep = self.optimize()
        self.update_gate()
        b = self.newest
        rec = FrameRecord(
            index=b,
            t=self.times[b],
            pose=self.value(b, "pose"),
            vel=np.array(self.value(b, "vel")),
            bg=np.array(self.value(b, "bg")),
            ext=self.value(b, "ext"),
            params=self.params,
            body_vel=self.body_velocity(b),
            gate=self.gate.enabled,
            bias_variance=self.gate.bias_variance,
            iterations=rep.accepted,
            seconds=0.0,
        )
        if len(self.recent) >= self.cfg.n_recent:
            self.marginalize()
        rec.seconds = time.perf_counter() - t0
        self.records.append(rec)
        return rec

    def current_prediction(self, horizon: float, ctrl: ControlTimeline | None = None) -> RolloutResult:
        """Roll the model forward from the newest frame with the first recent frame's parameters."""
        b = self.newest
        return predict(
            horizon, self.body_velocity(b), ctrl or self.ctrl, self.params, self.geometry, self.hyper, self.cfg.frame_dt, self.times[b], self.cfg.dt_max
        )


@dataclass
class RunResult:
    records: list
    diagnostics: list
    config: EstimatorConfig

    @property
    def param_trace(self) -> np.ndarray:
        return np.array([r.params for r in self.records])

    @property
    def times(self) -> np.ndarray:
        return np.array([r.t for r in self.records])

    @property
    def mean_step_seconds(self) -> float:
        return float(np.mean([r.seconds for r in self.records]))


def run_estimator(
    sim,
    config: EstimatorConfig,
    initial_params,
    initial_extrinsics: Pose3 | None = None,
    geometry: VehicleGeometry | None = None,
    hyper: LongitudinalHyperParams | None = None,
) -> RunResult:
    """Process every odometry frame of a simulated (or loaded) sequence."""
    cfg = replace(config, frame_dt=sim.frame_dt)
    est = SlidingWindowEstimator(
        cfg,
        sim.ctrl,
        sim.gyro,
        sim.initial_pose,
        initial_params,
        initial_extrinsics if initial_extrinsics is not None else sim.config.extrinsics,
        geometry if geometry is not None else sim.config.geometry,
        hyper if hyper is not None else sim.config.hyper,
    )
    for meas in sim.odom:
        est.step(meas)
    return RunResult(est.records, est.diagnostics, cfg)
