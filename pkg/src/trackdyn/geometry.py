"""Rotation / rigid-transform algebra and the planar projection used by the dynamics factor.

Pose increments are right-multiplicative on the rotation and additive on the
translation: ``retract(T, [dp, dphi]) = (R Exp(dphi), t + dp)``.

Residual code is written once against :class:`JRot` / :class:`JVec`, which
carry a value together with its derivative along ``K`` stacked tangent
directions.  Seeding the inputs yields analytic Jacobians; with ``K = 0`` the
same code is the plain evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import NearPiRotation

NEAR_PI = math.pi - 1e-3
E3 = np.array([0.0, 0.0, 1.0])
_EYE3 = np.eye(3)


# ---------------------------------------------------------------------------
# SO(3)


def hat(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _hat_batch(w: np.ndarray) -> np.ndarray:
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee(M) -> np.ndarray:
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    th2 = float(phi @ phi)
    K = hat(phi)
    if th2 < 1e-12:
        return _EYE3 + K + 0.5 * K @ K
    th = math.sqrt(th2)
    return _EYE3 + (math.sin(th) / th) * K + ((1.0 - math.cos(th)) / th2) * K @ K


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    c = (R[0, 0] + R[1, 1] + R[2, 2] - 1.0) * 0.5
    c = min(1.0, max(-1.0, c))
    th = math.acos(c)
    w = vee(R - R.T) * 0.5
    if th < 1e-6:
        return w * (1.0 + th * th / 6.0)
    if th < math.pi - 1e-6:
        return w * (th / math.sin(th))
    # near pi: axis from the symmetric part
    B = (R + _EYE3) * 0.5
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / math.sqrt(max(B[k, k], 1e-300))
    if axis @ w < 0:
        axis = -axis
    return axis * th


def so3_angle(R) -> float:
    # atan2 keeps precision near both 0 and pi
    c = (np.trace(R) - 1.0) * 0.5
    s = 0.5 * math.sqrt((R[2, 1] - R[1, 2]) ** 2 + (R[0, 2] - R[2, 0]) ** 2 + (R[1, 0] - R[0, 1]) ** 2)
    return math.atan2(s, c)


def right_jacobian(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    th2 = float(phi @ phi)
    K = hat(phi)
    if th2 < 1e-10:
        return _EYE3 - 0.5 * K + K @ K / 6.0
    th = math.sqrt(th2)
    return _EYE3 - ((1.0 - math.cos(th)) / th2) * K + ((th - math.sin(th)) / (th2 * th)) * K @ K


def right_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    th2 = float(phi @ phi)
    K = hat(phi)
    if th2 < 1e-10:
        return _EYE3 + 0.5 * K + K @ K / 12.0
    th = math.sqrt(th2)
    coef = 1.0 / th2 - (1.0 + math.cos(th)) / (2.0 * th * math.sin(th))
    return _EYE3 + 0.5 * K + coef * K @ K


def right_jacobian_inv_batch(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float).reshape(-1, 3)
    th2 = np.einsum("ni,ni->n", phi, phi)
    th = np.sqrt(th2)
    small = th2 < 1e-10
    safe = np.where(small, 1.0, th)
    coef = np.where(small, 1.0 / 12.0, 1.0 / np.where(small, 1.0, th2) - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)))
    K = _hat_batch(phi)
    return _EYE3 + 0.5 * K + coef[:, None, None] * (K @ K)


def rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def orthonormalize(R) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


@dataclass(frozen=True, eq=False)
class Pose3:
    """Rigid transform ``x -> R x + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    def __eq__(self, other):
        if not isinstance(other, Pose3):
            return NotImplemented
        return bool(np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t))

    __hash__ = None

    @classmethod
    def identity(cls) -> Pose3:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_planar(cls, x: float, y: float, theta: float, z: float = 0.0) -> Pose3:
        return cls(rot_z(theta), np.array([x, y, z]))

    @classmethod
    def from_quaternion(cls, q_wxyz, t) -> Pose3:
        w, x, y, z = q_wxyz
        return cls(Rotation.from_quat([x, y, z, w]).as_matrix(), t)

    def quaternion(self) -> np.ndarray:
        x, y, z, w = Rotation.from_matrix(self.R).as_quat()
        q = np.array([w, x, y, z])
        return q if w >= 0 else -q

    def __matmul__(self, other: Pose3) -> Pose3:
        return Pose3(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> Pose3:
        Rt = self.R.T
        return Pose3(Rt, -Rt @ self.t)

    def act(self, p) -> np.ndarray:
        return self.R @ np.asarray(p, dtype=float) + self.t

    def retract(self, delta) -> Pose3:
        delta = np.asarray(delta, dtype=float)
        return Pose3(self.R @ so3_exp(delta[3:6]), self.t + delta[0:3])

    def local(self, other: Pose3) -> np.ndarray:
        """Tangent ``delta`` with ``self.retract(delta) == other``."""
        return np.concatenate([other.t - self.t, so3_log(self.R.T @ other.R)])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def __repr__(self):
        return f"Pose3(rotvec={np.round(so3_log(self.R), 6).tolist()}, t={np.round(self.t, 6).tolist()})"


# ---------------------------------------------------------------------------
# forward-mode carriers


class JVec:
    """Vector value ``v`` (n,) with derivative ``d`` (K, n)."""

    __slots__ = ("d", "v")

    def __init__(self, v, d):
        self.v = v
        self.d = d

    def __add__(self, o):
        return JVec(self.v + o.v, self.d + o.d)

    def __sub__(self, o):
        return JVec(self.v - o.v, self.d - o.d)

    def __neg__(self):
        return JVec(-self.v, -self.d)

    def scale(self, a: float):
        return JVec(a * self.v, a * self.d)

    def __getitem__(self, idx):
        return JVec(self.v[idx], self.d[:, idx])

    def shift(self, c):
        return JVec(self.v + c, self.d)


class JRot:
    """Rotation matrix ``R`` with derivative ``d`` (K, 3, 3)."""

    __slots__ = ("R", "d")

    def __init__(self, R, d):
        self.R = R
        self.d = d

    @property
    def T(self):
        return JRot(self.R.T, self.d.transpose(0, 2, 1))

    def __matmul__(self, o):
        if isinstance(o, JRot):
            return JRot(self.R @ o.R, self.d @ o.R + self.R @ o.d)
        return JVec(self.R @ o.v, self.d @ o.v + o.d @ self.R.T)


def jconcat(parts) -> JVec:
    return JVec(np.concatenate([p.v for p in parts]), np.concatenate([p.d for p in parts], axis=1))


def _cross(a, b):
    """Cross product along the last axis (cheaper than ``np.cross`` for small inputs)."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def jcross(a: JVec, b: JVec) -> JVec:
    return JVec(_cross(a.v, b.v), _cross(a.d, b.v) + _cross(a.v, b.d))


def jlog(r: JRot) -> JVec:
    phi = so3_log(r.R)
    M = r.R.T @ r.d
    w = np.stack([M[:, 2, 1] - M[:, 1, 2], M[:, 0, 2] - M[:, 2, 0], M[:, 1, 0] - M[:, 0, 1]], axis=1) * 0.5
    return JVec(phi, w @ right_jacobian_inv(phi).T)


def jexp(v: JVec) -> JRot:
    R = so3_exp(v.v)
    w = v.d @ right_jacobian(v.v).T
    return JRot(R, R @ _hat_batch(w))


def const_vec(v, K: int) -> JVec:
    v = np.asarray(v, dtype=float)
    return JVec(v, np.zeros((K, v.shape[0])))


def const_rot(R, K: int) -> JRot:
    return JRot(np.asarray(R, dtype=float), np.zeros((K, 3, 3)))


def seed_vec(v, K: int, offset: int | None) -> JVec:
    v = np.asarray(v, dtype=float)
    out = const_vec(v, K)
    if offset is not None:
        n = v.shape[0]
        out.d[offset : offset + n, :] = np.eye(n)
    return out


_GENERATORS = _hat_batch(np.eye(3))


def seed_rot(R, K: int, offset: int | None) -> JRot:
    out = const_rot(R, K)
    if offset is not None:
        out.d[offset : offset + 3] = out.R @ _GENERATORS
    return out


def seed_pose(T: Pose3, K: int, offset: int | None) -> tuple[JRot, JVec]:
    """Translation tangent at ``offset``, rotation tangent at ``offset + 3``."""
    if offset is None:
        return const_rot(T.R, K), const_vec(T.t, K)
    return seed_rot(T.R, K, offset + 3), seed_vec(T.t, K, offset)


# ---------------------------------------------------------------------------
# residual cores on forward-mode carriers


def body_velocity_j(Rwi: JRot, vw: JVec, gyro, bg: JVec, Roi: JRot, toi: JVec) -> JVec:
    w_i = JVec(np.asarray(gyro, dtype=float) - bg.v, -bg.d)
    w_o = Roi @ w_i
    v_o = Roi @ (Rwi.T @ vw) + jcross(toi, w_o)
    return JVec(np.array([v_o.v[0], v_o.v[1], w_o.v[2]]), np.stack([v_o.d[:, 0], v_o.d[:, 1], w_o.d[:, 2]], axis=1))


def relative_body_pose_j(Rwi0, pwi0, Roi0, toi0, Rwi1, pwi1, Roi1, toi1) -> tuple[JRot, JVec]:
    Rw1o = Rwi1 @ Roi1.T
    A = Roi0 @ Rwi0.T
    R = A @ Rw1o
    t = A @ (pwi1 - pwi0 - Rw1o @ toi1) + toi0
    return R, t


def project_planar_j(R: JRot, t: JVec, check: bool = True) -> JVec:
    if check and so3_angle(R.R) > NEAR_PI:
        raise NearPiRotation("relative rotation too close to pi for a stable logarithm")
    phi = jlog(R)
    return JVec(np.array([t.v[0], t.v[1], phi.v[2]]), np.stack([t.d[:, 0], t.d[:, 1], phi.d[:, 2]], axis=1))


def plane_residual_j(Rwi: JRot, pwi: JVec, Roi: JRot, toi: JVec, d: float) -> JVec:
    Rwo = Rwi @ Roi.T
    n = JVec(Rwo.R[:, 2], Rwo.d[:, :, 2])
    body = pwi - Rwo @ toi
    return JVec(np.array([n.v[0], n.v[1], d + body.v[2]]), np.stack([n.d[:, 0], n.d[:, 1], body.d[:, 2]], axis=1))


def geometry_residual_j(Rwi, pwi, Roi, toi, d, l_cam1, l_cam2, l_f, forward_axis=E3) -> JVec:
    plane = plane_residual_j(Rwi, pwi, Roi, toi, d)
    fwd = Roi @ const_vec(forward_axis, Roi.d.shape[0])
    v = np.array([fwd.v[1], toi.v[1] - l_cam1, toi.v[0] - l_f - l_cam2])
    dv = np.stack([fwd.d[:, 1], toi.d[:, 1], toi.d[:, 0]], axis=1)
    return jconcat([plane, JVec(v, dv)])


# ---------------------------------------------------------------------------
# plain evaluation


def body_velocity(T_wi: Pose3, v_w, gyro, b_g, ext: Pose3) -> np.ndarray:
    """Planar body velocity ``(v_x, v_y, omega_z)`` of the vehicle frame."""
    out = body_velocity_j(
        const_rot(T_wi.R, 0), const_vec(v_w, 0), gyro, const_vec(b_g, 0), const_rot(ext.R, 0), const_vec(ext.t, 0)
    )
    return out.v


def relative_body_pose(T_wi0: Pose3, ext0: Pose3, T_wi1: Pose3, ext1: Pose3) -> Pose3:
    """Vehicle-frame relative pose ``ext0 * T_wi0^-1 * T_wi1 * ext1^-1``."""
    R, t = relative_body_pose_j(
        const_rot(T_wi0.R, 0),
        const_vec(T_wi0.t, 0),
        const_rot(ext0.R, 0),
        const_vec(ext0.t, 0),
        const_rot(T_wi1.R, 0),
        const_vec(T_wi1.t, 0),
        const_rot(ext1.R, 0),
        const_vec(ext1.t, 0),
    )
    return Pose3(R.R, t.v)


def project_planar(rel: Pose3) -> np.ndarray:
    """(x, y, yaw) from the translation and the z component of the rotation log."""
    return project_planar_j(const_rot(rel.R, 0), const_vec(rel.t, 0)).v


def plane_residual(T_wi: Pose3, ext: Pose3, d: float) -> np.ndarray:
    return plane_residual_j(const_rot(T_wi.R, 0), const_vec(T_wi.t, 0), const_rot(ext.R, 0), const_vec(ext.t, 0), d).v


def geometry_residual(T_wi: Pose3, ext: Pose3, d, l_cam1, l_cam2, l_f, forward_axis=E3) -> np.ndarray:
    return geometry_residual_j(
        const_rot(T_wi.R, 0),
        const_vec(T_wi.t, 0),
        const_rot(ext.R, 0),
        const_vec(ext.t, 0),
        d,
        l_cam1,
        l_cam2,
        l_f,
        forward_axis,
    ).v


def plane_offset(T_wi0: Pose3, ext: Pose3) -> float:
    """Plane distance ``d`` that zeroes the height residual at the first frame."""
    return float((T_wi0.R @ ext.R.T @ ext.t)[2] - T_wi0.t[2])


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi
