"""Single-track vehicle model with a smooth slip-angle denominator.

State ``s = (x, y, theta, v_x, v_y, omega_z)`` lives in the body frame at the
start of an integration interval.  The longitudinal force uses a softplus
power-train map and a ``tanh`` resistance term; the slip angles pass their
longitudinal-speed denominators through ``g(x) = log(exp(2x) + 1) - x`` so the
model stays differentiable at standstill.

The numeric core is a set of ``numba`` kernels working on flat arrays.  The
dataclasses below are the public, immutable face of the same quantities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from numba import njit

from .errors import ControlError

EPS_P = 1e-6
LOG2 = math.log(2.0)

N_STATE = 6
N_PARAM = 5  # gamma, c_thr1, c_thr2, c_res, c_tire
N_HYPER = 3  # psi, tau, sigma
N_MODEL = N_PARAM + N_HYPER

PARAM_NAMES = ("gamma", "c_thr1", "c_thr2", "c_res", "c_tire")
HYPER_NAMES = ("psi", "tau", "sigma")


@dataclass(frozen=True)
class VehicleState2D:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    v_x: float = 0.0
    v_y: float = 0.0
    omega_z: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(getattr(self, f.name)) for f in fields(self)):
            raise ValueError(f"non-finite state {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v_x, self.v_y, self.omega_z])

    @classmethod
    def from_array(cls, a) -> VehicleState2D:
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class ControlSample:
    t: float
    u_thr: float
    u_str: float

    def __post_init__(self):
        if not (0.0 <= self.u_thr <= 1.0):
            raise ControlError(f"throttle {self.u_thr} outside [0, 1] at t={self.t}")
        if not (-1.0 <= self.u_str <= 1.0):
            raise ControlError(f"steering {self.u_str} outside [-1, 1] at t={self.t}")
        if not math.isfinite(self.t):
            raise ControlError("non-finite control timestamp")


@dataclass(frozen=True)
class DynamicsParams:
    """Online-calibrated model parameters (SI units)."""

    gamma: float  # rad per unit steering input
    c_thr1: float  # N
    c_thr2: float  # N s / m
    c_res: float  # N
    c_tire: float  # N / rad

    def as_array(self) -> np.ndarray:
        return np.array([self.gamma, self.c_thr1, self.c_thr2, self.c_res, self.c_tire])

    @classmethod
    def from_array(cls, a) -> DynamicsParams:
        return cls(*(float(v) for v in a))

    def clamped(self, eps: float = EPS_P) -> DynamicsParams:
        return DynamicsParams.from_array(clamp_params(self.as_array(), eps))

    def scaled(self, factors) -> DynamicsParams:
        return DynamicsParams.from_array(self.as_array() * np.asarray(factors, dtype=float))


def clamp_params(p: np.ndarray, eps: float = EPS_P) -> np.ndarray:
    """Clamp a raw parameter vector so every entry is at least ``eps``."""
    return np.maximum(np.asarray(p, dtype=float), eps)


@dataclass(frozen=True)
class VehicleGeometry:
    m: float
    i_z: float
    l_f: float
    l_r: float

    def __post_init__(self):
        if min(self.m, self.i_z, self.l_f, self.l_r) <= 0:
            raise ValueError("vehicle geometry entries must be strictly positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.m, self.i_z, self.l_f, self.l_r])


@dataclass(frozen=True)
class LongitudinalHyperParams:
    psi: float = 0.202
    tau: float = 2.335
    sigma: float = 10.0

    def __post_init__(self):
        if self.tau < 1.0 or self.sigma <= 0.0:
            raise ValueError("hyper-parameters require tau >= 1 and sigma > 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.psi, self.tau, self.sigma])

    @classmethod
    def from_array(cls, a) -> LongitudinalHyperParams:
        return cls(*(float(v) for v in a))


# ---------------------------------------------------------------------------
# scalar kernels


@njit(cache=True)
def soft_threshold(x):
    """Smooth even lower bound for ``|x|``; the derivative is ``tanh(x)``."""
    ax = abs(x)
    return ax + math.log1p(math.exp(-2.0 * ax))


@njit(cache=True)
def _softplus(x):
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


@njit(cache=True)
def _logistic(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def _powertrain(x, psi, tau):
    return psi * x + tau * _softplus(x) - LOG2


@njit(cache=True)
def _long_force(u_thr, vx, c1, c2, cres, psi, tau, sigma):
    return _powertrain(c1 * u_thr - c2 * vx, psi, tau) - math.tanh(sigma * vx) * cres


@njit(cache=True)
def _slips(vx, vy, wz, alpha, lf, lr):
    ca = math.cos(alpha)
    sa = math.sin(alpha)
    q = vy + lf * wz
    nf = vx * sa - q * ca
    df = vx * ca + q * sa
    s_f = math.atan2(nf, soft_threshold(df))
    s_r = math.atan2(lr * wz - vy, soft_threshold(vx))
    return s_f, s_r


@njit(cache=True)
def _tire(slip, c_tire, sat):
    """Lateral force and its partials (d/dslip, d/dc_tire); ``sat > 0`` saturates with tanh."""
    if sat > 0.0:
        th = math.tanh(slip / sat)
        return c_tire * sat * th, c_tire * (1.0 - th * th), sat * th
    return c_tire * slip, c_tire, slip


@njit(cache=True)
def rhs(s, u_thr, u_str, p, hyp, geom, sat, f, A, B, want_jac):
    """Evaluate the state derivative into ``f``.

    With ``want_jac`` also fills ``A = df/ds`` (6x6) and ``B = df/d(p, hyp)``
    (6x8, columns gamma, c_thr1, c_thr2, c_res, c_tire, psi, tau, sigma).
    """
    x = s[0]
    y = s[1]
    vx = s[3]
    vy = s[4]
    wz = s[5]
    gamma = p[0]
    c1 = p[1]
    c2 = p[2]
    cres = p[3]
    ctire = p[4]
    psi = hyp[0]
    tau = hyp[1]
    sigma = hyp[2]
    m = geom[0]
    iz = geom[1]
    lf = geom[2]
    lr = geom[3]

    alpha = gamma * u_str
    ca = math.cos(alpha)
    sa = math.sin(alpha)

    # front slip
    q = vy + lf * wz
    nf = vx * sa - q * ca
    df = vx * ca + q * sa
    gf = soft_threshold(df)
    s_f = math.atan2(nf, gf)
    # rear slip
    nr = lr * wz - vy
    gr = soft_threshold(vx)
    s_r = math.atan2(nr, gr)

    ff, dff_ds, dff_dc = _tire(s_f, ctire, sat)
    fr, dfr_ds, dfr_dc = _tire(s_r, ctire, sat)

    xarg = c1 * u_thr - c2 * vx
    th_s = math.tanh(sigma * vx)
    fx = _powertrain(xarg, psi, tau) - th_s * cres

    f[0] = vx - wz * y
    f[1] = vy + wz * x
    f[2] = wz
    f[3] = (fx - ff * sa) / m + vy * wz
    f[4] = (ff * ca + fr) / m - vx * wz
    f[5] = (lf * ff * ca - lr * fr) / iz

    if not want_jac:
        return

    # d s_f / d(vx, vy, wz, alpha) through atan2(n, g(d)); g' = tanh
    den_f = gf * gf + nf * nf
    tf = math.tanh(df)
    dnf_vx = sa
    dnf_vy = -ca
    dnf_wz = -lf * ca
    dnf_al = df
    ddf_vx = ca
    ddf_vy = sa
    ddf_wz = lf * sa
    ddf_al = -nf
    dsf_vx = (gf * dnf_vx - nf * tf * ddf_vx) / den_f
    dsf_vy = (gf * dnf_vy - nf * tf * ddf_vy) / den_f
    dsf_wz = (gf * dnf_wz - nf * tf * ddf_wz) / den_f
    dsf_al = (gf * dnf_al - nf * tf * ddf_al) / den_f

    den_r = gr * gr + nr * nr
    tr = math.tanh(vx)
    dsr_vx = (-nr * tr) / den_r
    dsr_vy = (-gr) / den_r
    dsr_wz = (gr * lr) / den_r

    dff_vx = dff_ds * dsf_vx
    dff_vy = dff_ds * dsf_vy
    dff_wz = dff_ds * dsf_wz
    dff_al = dff_ds * dsf_al
    dfr_vx = dfr_ds * dsr_vx
    dfr_vy = dfr_ds * dsr_vy
    dfr_wz = dfr_ds * dsr_wz

    fp = psi + tau * _logistic(xarg)
    sech2 = 1.0 - th_s * th_s
    dfx_vx = -fp * c2 - sigma * sech2 * cres

    for i in range(6):
        for j in range(6):
            A[i, j] = 0.0
        for j in range(8):
            B[i, j] = 0.0

    A[0, 1] = -wz
    A[0, 3] = 1.0
    A[0, 5] = -y
    A[1, 0] = wz
    A[1, 4] = 1.0
    A[1, 5] = x
    A[2, 5] = 1.0

    A[3, 3] = (dfx_vx - dff_vx * sa) / m
    A[3, 4] = (-dff_vy * sa) / m + wz
    A[3, 5] = (-dff_wz * sa) / m + vy

    A[4, 3] = (dff_vx * ca + dfr_vx) / m - wz
    A[4, 4] = (dff_vy * ca + dfr_vy) / m
    A[4, 5] = (dff_wz * ca + dfr_wz) / m - vx

    A[5, 3] = (lf * dff_vx * ca - lr * dfr_vx) / iz
    A[5, 4] = (lf * dff_vy * ca - lr * dfr_vy) / iz
    A[5, 5] = (lf * dff_wz * ca - lr * dfr_wz) / iz

    # gamma enters through alpha = gamma * u_str
    B[3, 0] = (-dff_al * sa - ff * ca) / m * u_str
    B[4, 0] = (dff_al * ca - ff * sa) / m * u_str
    B[5, 0] = lf * (dff_al * ca - ff * sa) / iz * u_str
    # longitudinal force parameters
    B[3, 1] = fp * u_thr / m
    B[3, 2] = -fp * vx / m
    B[3, 3] = -th_s / m
    # tire coefficient
    B[3, 4] = (-dff_dc * sa) / m
    B[4, 4] = (dff_dc * ca + dfr_dc) / m
    B[5, 4] = (lf * dff_dc * ca - lr * dfr_dc) / iz
    # hyper-parameters
    B[3, 5] = xarg / m
    B[3, 6] = _softplus(xarg) / m
    B[3, 7] = -vx * sech2 * cres / m


# ---------------------------------------------------------------------------
# public wrappers


def longitudinal_force(p: DynamicsParams, h: LongitudinalHyperParams, u_thr: float, v_x: float) -> float:
    """Power-train force minus speed-dependent resistance, in N."""
    if not (0.0 <= u_thr <= 1.0):
        raise ControlError(f"throttle {u_thr} outside [0, 1]")
    return float(_long_force(u_thr, v_x, p.c_thr1, p.c_thr2, p.c_res, h.psi, h.tau, h.sigma))


def powertrain_map(x: float, h: LongitudinalHyperParams) -> float:
    return float(_powertrain(x, h.psi, h.tau))


def slip_angles(s: VehicleState2D, alpha: float, geom: VehicleGeometry) -> tuple[float, float]:
    s_f, s_r = _slips(s.v_x, s.v_y, s.omega_z, alpha, geom.l_f, geom.l_r)
    return float(s_f), float(s_r)


def lateral_forces(s_f: float, s_r: float, c_tire: float) -> tuple[float, float]:
    return c_tire * s_f, c_tire * s_r


def state_derivative(
    s: VehicleState2D,
    u: ControlSample,
    p: DynamicsParams,
    geom: VehicleGeometry,
    h: LongitudinalHyperParams,
    tire_saturation: float = 0.0,
) -> np.ndarray:
    f = np.empty(N_STATE)
    A = np.empty((N_STATE, N_STATE))
    B = np.empty((N_STATE, N_MODEL))
    rhs(s.as_array(), u.u_thr, u.u_str, p.as_array(), h.as_array(), geom.as_array(), tire_saturation, f, A, B, False)
    return f


def state_derivative_jacobians(s, u, p, geom, h, tire_saturation: float = 0.0):
    """Return ``(f, df/ds, df/d(p, hyp))`` for the single-track model."""
    f = np.empty(N_STATE)
    A = np.empty((N_STATE, N_STATE))
    B = np.empty((N_STATE, N_MODEL))
    s_arr = s.as_array() if isinstance(s, VehicleState2D) else np.asarray(s, dtype=float)
    p_arr = p.as_array() if isinstance(p, DynamicsParams) else np.asarray(p, dtype=float)
    h_arr = h.as_array() if isinstance(h, LongitudinalHyperParams) else np.asarray(h, dtype=float)
    rhs(s_arr, u.u_thr, u.u_str, p_arr, h_arr, geom.as_array(), tire_saturation, f, A, B, True)
    return f, A, B
