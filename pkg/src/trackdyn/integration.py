"""Fixed-step RK4 integration of the single-track model.

Controls are held constant between their timestamps; an interval is split at
every control change strictly inside it.  Multi-frame rollouts restart the pose
at zero each frame interval, carry the body velocity over, and chain the
per-interval planar poses.  Sensitivities with respect to the initial body
velocity and the model parameters are propagated through every RK4 stage, so
they are the exact derivatives of the discrete map.

Sensitivity columns are ordered ``(v_x0, v_y0, omega_z0, gamma, c_thr1,
c_thr2, c_res, c_tire, psi, tau, sigma)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .dynamics import (
    N_MODEL,
    ControlSample,
    DynamicsParams,
    LongitudinalHyperParams,
    VehicleGeometry,
    VehicleState2D,
    rhs,
)
from .errors import ControlError, NonFiniteState

DT_MAX = 0.005
N_SENS = 3 + N_MODEL


class ControlTimeline:
    """Zero-order-hold control log; ``lookup(t)`` returns the last sample at or before ``t``."""

    def __init__(self, t, u_thr, u_str):
        self.t = np.ascontiguousarray(t, dtype=float)
        self.u_thr = np.ascontiguousarray(u_thr, dtype=float)
        self.u_str = np.ascontiguousarray(u_str, dtype=float)
        if self.t.ndim != 1 or not (len(self.t) == len(self.u_thr) == len(self.u_str)):
            raise ControlError("control arrays must be 1-D and of equal length")
        if len(self.t) == 0:
            raise ControlError("empty control timeline")
        if not np.all(np.isfinite(self.t)) or np.any(np.diff(self.t) <= 0):
            raise ControlError("control timestamps must be finite and strictly increasing")
        if np.any((self.u_thr < 0) | (self.u_thr > 1)) or np.any(np.abs(self.u_str) > 1):
            raise ControlError("control inputs out of bounds")

    @classmethod
    def from_samples(cls, samples) -> ControlTimeline:
        samples = list(samples)
        return cls([s.t for s in samples], [s.u_thr for s in samples], [s.u_str for s in samples])

    @classmethod
    def constant(cls, u_thr: float = 0.0, u_str: float = 0.0, t0: float = 0.0) -> ControlTimeline:
        return cls([t0], [u_thr], [u_str])

    def __len__(self):
        return len(self.t)

    def index(self, t: float) -> int:
        i = int(np.searchsorted(self.t, t, side="right")) - 1
        if i < 0:
            raise ControlError(f"no control sample at or before t={t}")
        return i

    def lookup(self, t: float) -> ControlSample:
        i = self.index(t)
        return ControlSample(float(self.t[i]), float(self.u_thr[i]), float(self.u_str[i]))

    def samples(self):
        for i in range(len(self.t)):
            yield ControlSample(float(self.t[i]), float(self.u_thr[i]), float(self.u_str[i]))

    def window(self, t_a: float, t_b: float) -> ControlTimeline:
        """Sub-timeline covering ``[t_a, t_b]`` (keeps the sample active at ``t_a``)."""
        i = self.index(t_a)
        j = int(np.searchsorted(self.t, t_b, side="right"))
        return ControlTimeline(self.t[i:j], self.u_thr[i:j], self.u_str[i:j])


@dataclass
class RolloutResult:
    t: np.ndarray  # (N,)
    poses: np.ndarray  # (N, 3) planar pose relative to the first frame
    velocities: np.ndarray  # (N, 3) body velocity (v_x, v_y, omega_z)
    sensitivities: np.ndarray | None = None  # (N, 6, N_SENS), rows pose then velocity

    @property
    def d_initial_velocity(self):
        return None if self.sensitivities is None else self.sensitivities[:, :, 0:3]

    @property
    def d_params(self):
        return None if self.sensitivities is None else self.sensitivities[:, :, 3:8]

    @property
    def d_hyper(self):
        return None if self.sensitivities is None else self.sensitivities[:, :, 8:11]


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _n_steps(length, dt_max):
    n = int(math.ceil(length / dt_max - 1e-9))
    return max(n, 1)


@njit(cache=True)
def _rk4_segment(s, S, length, n, u_thr, u_str, p, hyp, geom, sat, with_sens):
    """Advance ``s`` (and sensitivity matrix ``S``) in place by ``n`` equal RK4 steps."""
    h = length / n
    k1 = np.empty(6)
    k2 = np.empty(6)
    k3 = np.empty(6)
    k4 = np.empty(6)
    tmp = np.empty(6)
    A = np.empty((6, 6))
    B = np.empty((6, 8))
    ns = S.shape[1]
    K1 = np.empty((6, ns))
    K2 = np.empty((6, ns))
    K3 = np.empty((6, ns))
    K4 = np.empty((6, ns))
    Stmp = np.empty((6, ns))
    for _ in range(n):
        # stage 1
        rhs(s, u_thr, u_str, p, hyp, geom, sat, k1, A, B, with_sens)
        if with_sens:
            _var(A, B, S, K1)
        for i in range(6):
            tmp[i] = s[i] + 0.5 * h * k1[i]
        if with_sens:
            for i in range(6):
                for j in range(ns):
                    Stmp[i, j] = S[i, j] + 0.5 * h * K1[i, j]
        # stage 2
        rhs(tmp, u_thr, u_str, p, hyp, geom, sat, k2, A, B, with_sens)
        if with_sens:
            _var(A, B, Stmp, K2)
        for i in range(6):
            tmp[i] = s[i] + 0.5 * h * k2[i]
        if with_sens:
            for i in range(6):
                for j in range(ns):
                    Stmp[i, j] = S[i, j] + 0.5 * h * K2[i, j]
        # stage 3
        rhs(tmp, u_thr, u_str, p, hyp, geom, sat, k3, A, B, with_sens)
        if with_sens:
            _var(A, B, Stmp, K3)
        for i in range(6):
            tmp[i] = s[i] + h * k3[i]
        if with_sens:
            for i in range(6):
                for j in range(ns):
                    Stmp[i, j] = S[i, j] + h * K3[i, j]
        # stage 4
        rhs(tmp, u_thr, u_str, p, hyp, geom, sat, k4, A, B, with_sens)
        if with_sens:
            _var(A, B, Stmp, K4)
        for i in range(6):
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        if with_sens:
            for i in range(6):
                for j in range(ns):
                    S[i, j] += h / 6.0 * (K1[i, j] + 2.0 * K2[i, j] + 2.0 * K3[i, j] + K4[i, j])
        for i in range(6):
            if not math.isfinite(s[i]):
                return False
    return True


@njit(cache=True)
def _var(A, B, S, out):
    """Variational right-hand side ``A S + [0 | B]`` (first three columns are initial velocity)."""
    ns = S.shape[1]
    for i in range(6):
        for j in range(ns):
            acc = 0.0
            for k in range(6):
                acc += A[i, k] * S[k, j]
            if j >= 3:
                acc += B[i, j - 3]
            out[i, j] = acc


@njit(cache=True)
def _integrate_span(s, S, t_a, t_b, ct, cthr, cstr, p, hyp, geom, sat, dt_max, with_sens):
    """Integrate over ``[t_a, t_b]`` splitting at control timestamps strictly inside."""
    i = np.searchsorted(ct, t_a, side="right") - 1
    if i < 0:
        return -1
    a = t_a
    while True:
        nxt = t_b
        if i + 1 < ct.shape[0] and ct[i + 1] < t_b:
            nxt = ct[i + 1]
        length = nxt - a
        if length > 0.0:
            ok = _rk4_segment(s, S, length, _n_steps(length, dt_max), cthr[i], cstr[i], p, hyp, geom, sat, with_sens)
            if not ok:
                return 0
        if nxt >= t_b:
            break
        a = nxt
        i += 1
    return 1


@njit(cache=True)
def _compose(P, dP, d, dd, with_sens):
    """In-place ``P <- P (+) d`` with derivative propagation (planar SE(2) chaining)."""
    c = math.cos(P[2])
    sn = math.sin(P[2])
    x = d[0]
    y = d[1]
    if with_sens:
        ns = dP.shape[1]
        for j in range(ns):
            dth = dP[2, j]
            nx = dP[0, j] - (sn * x + c * y) * dth + c * dd[0, j] - sn * dd[1, j]
            ny = dP[1, j] + (c * x - sn * y) * dth + sn * dd[0, j] + c * dd[1, j]
            dP[0, j] = nx
            dP[1, j] = ny
            dP[2, j] = dth + dd[2, j]
    P[0] = c * x - sn * y + P[0]
    P[1] = sn * x + c * y + P[1]
    P[2] = P[2] + d[2]


@njit(cache=True)
def _rollout(frames, v0, ct, cthr, cstr, p, hyp, geom, sat, dt_max, with_sens, poses, vels, sens):
    n = frames.shape[0]
    ns = N_SENS
    P = np.zeros(3)
    dP = np.zeros((3, ns))
    s = np.zeros(6)
    S = np.zeros((6, ns))
    vel = v0.copy()
    dvel = np.zeros((3, ns))
    for k in range(3):
        dvel[k, k] = 1.0
    for k in range(3):
        vels[0, k] = vel[k]
        if with_sens:
            for j in range(ns):
                sens[0, 3 + k, j] = dvel[k, j]
    for idx in range(n - 1):
        for k in range(3):
            s[k] = 0.0
            s[3 + k] = vel[k]
            if with_sens:
                for j in range(ns):
                    S[k, j] = 0.0
                    S[3 + k, j] = dvel[k, j]
        status = _integrate_span(s, S, frames[idx], frames[idx + 1], ct, cthr, cstr, p, hyp, geom, sat, dt_max, with_sens)
        if status != 1:
            return status
        _compose(P, dP, s[0:3], S[0:3, :], with_sens)
        for k in range(3):
            vel[k] = s[3 + k]
            poses[idx + 1, k] = P[k]
            vels[idx + 1, k] = vel[k]
            if with_sens:
                for j in range(ns):
                    dvel[k, j] = S[3 + k, j]
                    sens[idx + 1, k, j] = dP[k, j]
                    sens[idx + 1, 3 + k, j] = dvel[k, j]
    return 1


# ---------------------------------------------------------------------------
# public API


def _as_arrays(p, h, geom):
    p_arr = p.as_array() if isinstance(p, DynamicsParams) else np.asarray(p, dtype=float)
    h_arr = h.as_array() if isinstance(h, LongitudinalHyperParams) else np.asarray(h, dtype=float)
    g_arr = geom.as_array() if isinstance(geom, VehicleGeometry) else np.asarray(geom, dtype=float)
    return np.ascontiguousarray(p_arr), np.ascontiguousarray(h_arr), np.ascontiguousarray(g_arr)


def integrate_interval(
    s0: VehicleState2D,
    ctrl: ControlTimeline,
    p,
    geom,
    h,
    t_a: float,
    t_b: float,
    dt_max: float = DT_MAX,
    tire_saturation: float = 0.0,
) -> VehicleState2D:
    """Integrate the state from ``t_a`` to ``t_b`` under the zero-order-hold controls."""
    if not t_b > t_a:
        raise ValueError("integrate_interval requires t_b > t_a")
    p_arr, h_arr, g_arr = _as_arrays(p, h, geom)
    s = s0.as_array()
    S = np.zeros((6, N_SENS))
    status = _integrate_span(
        s, S, float(t_a), float(t_b), ctrl.t, ctrl.u_thr, ctrl.u_str, p_arr, h_arr, g_arr, tire_saturation, dt_max, False
    )
    if status == -1:
        raise ControlError(f"control timeline starts after t={t_a}")
    if status == 0:
        raise NonFiniteState(f"integration diverged on [{t_a}, {t_b}]")
    return VehicleState2D.from_array(s)


def compose_planar(prev, delta) -> tuple[float, float, float]:
    """Chain a planar relative pose ``delta`` onto ``prev``; yaw is added without wrapping."""
    x0, y0, th0 = prev
    x, y, th = delta
    c, s = math.cos(th0), math.sin(th0)
    return (c * x - s * y + x0, s * x + c * y + y0, th0 + th)


def rollout(
    frames,
    v0,
    ctrl: ControlTimeline,
    p,
    geom,
    h,
    with_sensitivities: bool = False,
    dt_max: float = DT_MAX,
    tire_saturation: float = 0.0,
) -> RolloutResult:
    """Multi-interval prediction from body velocity ``v0`` at ``frames[0]``."""
    frames = np.ascontiguousarray(frames, dtype=float)
    if frames.ndim != 1 or len(frames) < 2:
        raise ValueError("rollout needs at least two frame timestamps")
    if np.any(np.diff(frames) <= 0):
        raise ValueError("frame timestamps must be strictly increasing")
    p_arr, h_arr, g_arr = _as_arrays(p, h, geom)
    n = len(frames)
    poses = np.zeros((n, 3))
    vels = np.zeros((n, 3))
    sens = np.zeros((n, 6, N_SENS)) if with_sensitivities else np.zeros((1, 6, N_SENS))
    status = _rollout(
        frames,
        np.ascontiguousarray(v0, dtype=float),
        ctrl.t,
        ctrl.u_thr,
        ctrl.u_str,
        p_arr,
        h_arr,
        g_arr,
        tire_saturation,
        dt_max,
        with_sensitivities,
        poses,
        vels,
        sens,
    )
    if status == -1:
        raise ControlError(f"control timeline starts after t={frames[0]}")
    if status == 0:
        raise NonFiniteState("rollout diverged")
    return RolloutResult(frames, poses, vels, sens if with_sensitivities else None)


def predict(
    horizon: float,
    v0,
    ctrl: ControlTimeline,
    p,
    geom,
    h,
    frame_dt: float,
    t_start: float = 0.0,
    dt_max: float = DT_MAX,
) -> RolloutResult:
    """Roll the model forward ``horizon`` seconds, sampled every ``frame_dt``."""
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    n = int(round(horizon / frame_dt))
    frames = t_start + frame_dt * np.arange(n + 1)
    if n == 0:
        return RolloutResult(frames, np.zeros((1, 3)), np.asarray(v0, dtype=float).reshape(1, 3).copy())
    return rollout(frames, v0, ctrl, p, geom, h, dt_max=dt_max)
