"""Experiment configuration: a validated YAML/JSON schema mapped onto the runtime dataclasses.

Every section rejects unknown keys.  Defaults reproduce the built-in
simulator truth and the estimator defaults, so an empty file is valid.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from .dynamics import DynamicsParams, LongitudinalHyperParams, VehicleGeometry
from .errors import FileError, SchemaError
from .estimator import EstimatorConfig
from .evaluation import FRACTIONS, HORIZONS
from .factors import FactorWeights
from .geometry import Pose3, so3_exp
from .simulation import (
    SCRIPT_NAMES,
    TRUE_GEOMETRY,
    TRUE_PARAMS,
    NoiseConfig,
    SimConfig,
    default_extrinsics,
)

PARAM_NAMES = ("gamma", "c_thr1", "c_thr2", "c_res", "c_tire")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GeometrySpec(_Strict):
    m: float = Field(TRUE_GEOMETRY.m, gt=0)
    i_z: float = Field(TRUE_GEOMETRY.i_z, gt=0)
    l_f: float = Field(TRUE_GEOMETRY.l_f, gt=0)
    l_r: float = Field(TRUE_GEOMETRY.l_r, gt=0)

    def build(self) -> VehicleGeometry:
        return VehicleGeometry(self.m, self.i_z, self.l_f, self.l_r)


class ParamsSpec(_Strict):
    gamma: float = Field(TRUE_PARAMS.gamma, gt=0)
    c_thr1: float = Field(TRUE_PARAMS.c_thr1, gt=0)
    c_thr2: float = Field(TRUE_PARAMS.c_thr2, gt=0)
    c_res: float = Field(TRUE_PARAMS.c_res, gt=0)
    c_tire: float = Field(TRUE_PARAMS.c_tire, gt=0)

    def build(self) -> DynamicsParams:
        return DynamicsParams(self.gamma, self.c_thr1, self.c_thr2, self.c_res, self.c_tire)

    @classmethod
    def of(cls, p: DynamicsParams) -> ParamsSpec:
        return cls(**{k: float(v) for k, v in zip(PARAM_NAMES, p.as_array())})


class ScheduleEntry(_Strict):
    t: float = Field(ge=0)
    params: ParamsSpec


class HyperSpec(_Strict):
    psi: float = 0.202
    tau: float = Field(2.335, ge=1)
    sigma: float = Field(10.0, gt=0)

    def build(self) -> LongitudinalHyperParams:
        return LongitudinalHyperParams(self.psi, self.tau, self.sigma)


class ExtrinsicsSpec(_Strict):
    """Sensor pose in the vehicle frame: a rotation matrix (row-major) or a pitch angle, plus translation."""

    rotation: list[float] | None = None
    pitch_deg: float = 0.0
    translation: list[float] | None = None

    @field_validator("rotation")
    @classmethod
    def _rot(cls, v):
        if v is None:
            return v
        R = np.asarray(v, dtype=float)
        if R.size != 9 or not np.allclose(R.reshape(3, 3) @ R.reshape(3, 3).T, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be 9 row-major entries of an orthonormal matrix")
        return v

    @field_validator("translation")
    @classmethod
    def _trans(cls, v):
        if v is not None and len(v) != 3:
            raise ValueError("translation must have 3 entries")
        return v

    def build(self) -> Pose3:
        base = default_extrinsics(math.radians(self.pitch_deg))
        R = base.R if self.rotation is None else np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = base.t if self.translation is None else np.asarray(self.translation, dtype=float)
        return Pose3(R, t)


class NoiseSpec(_Strict):
    rel_trans: float = Field(NoiseConfig.rel_trans, ge=0)
    rel_rot_deg: float = Field(math.degrees(NoiseConfig.rel_rot), ge=0)
    vel: float = Field(NoiseConfig.vel, ge=0)
    gyro: float = Field(NoiseConfig.gyro, ge=0)
    bias_rw: float = Field(NoiseConfig.bias_rw, ge=0)

    def build(self) -> NoiseConfig:
        return NoiseConfig(self.rel_trans, math.radians(self.rel_rot_deg), self.vel, self.gyro, self.bias_rw)


class SimSection(_Strict):
    geometry: GeometrySpec = GeometrySpec()
    params: ParamsSpec = ParamsSpec()
    schedule: list[ScheduleEntry] = []  # later parameter changes (t > 0)
    extrinsics: ExtrinsicsSpec = ExtrinsicsSpec()
    hyper: HyperSpec = HyperSpec()
    noise: NoiseSpec = NoiseSpec()
    odom_rate: float = Field(30.0, gt=0)
    gyro_rate: float = Field(200.0, gt=0)
    control_rate: float = Field(20.0, gt=0)
    tire_saturation: float = Field(0.0, ge=0)
    initial_bias: list[float] = [0.01, -0.008, 0.005]
    odom_lag: int = Field(20, ge=1)
    duration: float = Field(60.0, gt=0)
    scripts: list[str] = ["full-throttle-slalom"]
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        ts = [e.t for e in self.schedule]
        if any(b <= a for a, b in zip(ts, ts[1:])) or (ts and ts[0] <= 0):
            raise ValueError("schedule times must be positive and strictly increasing")
        if len(self.initial_bias) != 3:
            raise ValueError("initial_bias must have 3 entries")
        unknown = [s for s in self.scripts if s not in SCRIPT_NAMES]
        if unknown:
            raise ValueError(f"unknown scripts {unknown}; available: {list(SCRIPT_NAMES)}")
        return self

    def build(self, seed: int | None = None) -> SimConfig:
        schedule = [(0.0, self.params.build())] + [(e.t, e.params.build()) for e in self.schedule]
        return SimConfig(
            geometry=self.geometry.build(),
            params_schedule=schedule,
            extrinsics=self.extrinsics.build(),
            hyper=self.hyper.build(),
            noise=self.noise.build(),
            odom_rate=self.odom_rate,
            gyro_rate=self.gyro_rate,
            control_rate=self.control_rate,
            tire_saturation=self.tire_saturation,
            initial_bias=tuple(self.initial_bias),
            odom_lag=self.odom_lag,
            seed=self.seed if seed is None else seed,
        )


_W = FactorWeights()


class WeightsSpec(_Strict):
    dynamics_pose: float = Field(_W.dynamics_pose, ge=0)
    dynamics_vel: float = Field(_W.dynamics_vel, ge=0)
    geometry: float = Field(_W.geometry, ge=0)
    ext_prior: float = Field(_W.ext_prior, ge=0)
    ext_rw: float = Field(_W.ext_rw, ge=0)
    param_abs: float = Field(_W.param_abs, ge=0)
    param_rw: float = Field(_W.param_rw, ge=0)
    rel_trans_sigma: float = Field(_W.rel_trans_sigma, gt=0)
    rel_rot_sigma_deg: float = Field(math.degrees(_W.rel_rot_sigma), gt=0)
    vel_sigma: float = Field(_W.vel_sigma, gt=0)
    gyro_sigma: float = Field(_W.gyro_sigma, gt=0)
    bias_rw_sigma: float = Field(_W.bias_rw_sigma, gt=0)
    initial_pose_sigma: float = Field(_W.initial_pose_sigma, gt=0)
    initial_bias_sigma: float = Field(_W.initial_bias_sigma, gt=0)
    huber: float | None = Field(None, gt=0)

    def build(self) -> FactorWeights:
        kw = self.model_dump()
        kw["rel_rot_sigma"] = math.radians(kw.pop("rel_rot_sigma_deg"))
        return FactorWeights(**kw)


class EstimatorSection(_Strict):
    preset: Literal["default", "published"] = "default"
    n_recent: int = Field(3, ge=2)
    n_keyframes: int = Field(7, ge=0)
    kf_translation: float = Field(0.3, gt=0)
    kf_rotation_deg: float = Field(10.0, gt=0)
    weights: WeightsSpec | None = None
    param_weight_mode: Literal["relative", "absolute"] | None = None
    gate_threshold: float = Field(4.5e-4, gt=0)
    gate_warmup: int = Field(15, ge=0)
    use_dynamics: bool = True
    use_geometry: bool = True
    max_iter: int = Field(10, ge=1)
    step_tol: float = Field(1e-8, gt=0)
    rel_tol: float = Field(1e-10, gt=0)
    dt_max: float = Field(0.005, gt=0)
    l_cam1: float = 0.01
    l_cam2: float = 0.03

    def build(self) -> EstimatorConfig:
        """The ``published`` preset uses the published weights in absolute mode; explicit fields override it."""
        base = EstimatorConfig.published() if self.preset == "published" else EstimatorConfig()
        return EstimatorConfig(
            n_recent=self.n_recent,
            n_keyframes=self.n_keyframes,
            kf_translation=self.kf_translation,
            kf_rotation=math.radians(self.kf_rotation_deg),
            weights=self.weights.build() if self.weights is not None else base.weights,
            param_weight_mode=self.param_weight_mode or base.param_weight_mode,
            gate_threshold=self.gate_threshold,
            gate_warmup=self.gate_warmup,
            use_dynamics=self.use_dynamics,
            use_geometry=self.use_geometry,
            max_iter=self.max_iter,
            step_tol=self.step_tol,
            rel_tol=self.rel_tol,
            dt_max=self.dt_max,
            l_cam1=self.l_cam1,
            l_cam2=self.l_cam2,
        )


class CalibrationSection(_Strict):
    segment: float = Field(2.0, gt=0)
    stride: float = Field(1.0, gt=0)
    sub: int = Field(3, ge=1)
    max_nfev_stage1: int = Field(100, ge=1)
    max_nfev_stage2: int = Field(50, ge=1)
    max_steer_angle_deg: float | None = Field(None, gt=0)
    hyper_init: HyperSpec = HyperSpec()
    ext_prior: float = Field(1e4, ge=0)
    ext_perturb_trans: float = Field(0.01, ge=0)  # m, CAD-style initial error per axis
    ext_perturb_rot_deg: float = Field(1.0, ge=0)


class EvaluationSection(_Strict):
    fractions: list[float] = list(FRACTIONS)
    horizons: list[float] = list(HORIZONS)
    still_speed: float = Field(0.02, gt=0)
    still_window: float = Field(0.5, ge=0)

    @field_validator("fractions")
    @classmethod
    def _fr(cls, v):
        if not v or any(not 0 < f <= 1 for f in v):
            raise ValueError("fractions must lie in (0, 1]")
        return v

    @field_validator("horizons")
    @classmethod
    def _hz(cls, v):
        if not v or any(h <= 0 for h in v):
            raise ValueError("horizons must be positive")
        return v


class PerturbationSpec(_Strict):
    """Multiplicative perturbation of the initial parameters: each factor is ``1 +/- relative``."""

    relative: float = Field(0.3, ge=0, lt=1)
    mode: Literal["sign", "uniform", "none"] = "sign"
    seed: int = 0

    def apply(self, p: DynamicsParams, seed: int | None = None) -> DynamicsParams:
        rng = np.random.default_rng(self.seed if seed is None else seed)
        if self.mode == "none":
            f = np.ones(5)
        elif self.mode == "sign":
            f = 1.0 + self.relative * rng.choice([-1.0, 1.0], size=5)
        else:
            f = 1.0 + rng.uniform(-self.relative, self.relative, size=5)
        return p.scaled(f)


class ExperimentConfig(_Strict):
    version: int = 1
    sim: SimSection = SimSection()
    estimator: EstimatorSection = EstimatorSection()
    calibration: CalibrationSection = CalibrationSection()
    evaluation: EvaluationSection = EvaluationSection()
    init: PerturbationSpec = PerturbationSpec()

    @field_validator("version")
    @classmethod
    def _ver(cls, v):
        if v != 1:
            raise ValueError(f"unsupported config version {v}")
        return v


def perturb_extrinsics(ext: Pose3, trans: float, rot_deg: float, seed: int) -> Pose3:
    """CAD-style initial extrinsics: random per-axis offsets of the given magnitudes."""
    rng = np.random.default_rng(seed)
    dt = trans * rng.choice([-1.0, 1.0], size=3)
    dr = math.radians(rot_deg) * rng.choice([-1.0, 1.0], size=3) / math.sqrt(3.0)
    return Pose3(ext.R @ so3_exp(dr), ext.t + dt)


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Parse a YAML or JSON experiment file; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SchemaError(f"config {path} is not valid YAML: {exc}") from exc
    return parse_config(data or {}, str(path))


def parse_config(data: dict, source: str = "<config>") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise SchemaError(f"{source}: top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise SchemaError(f"{source}: {exc}") from exc


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
