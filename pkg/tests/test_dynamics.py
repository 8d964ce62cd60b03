import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trackdyn.dynamics import (
    ControlSample,
    DynamicsParams,
    LongitudinalHyperParams,
    VehicleGeometry,
    VehicleState2D,
    lateral_forces,
    longitudinal_force,
    powertrain_map,
    slip_angles,
    soft_threshold,
    state_derivative,
    state_derivative_jacobians,
)
from trackdyn.errors import ControlError

GEOM = VehicleGeometry(m=3.5, i_z=0.07, l_f=0.17, l_r=0.17)
PARAMS = DynamicsParams(0.35, 10.0, 2.5, 6.0, 50.0)
HYPER = LongitudinalHyperParams()
ZERO_FORCE = DynamicsParams(0.35, 0.0, 0.0, 0.0, 50.0)
FREE_HYPER = LongitudinalHyperParams(psi=0.0, tau=1.0, sigma=10.0)

mp.mp.dps = 40


# -- high precision reference model -------------------------------------------------


def mp_g(x):
    x = mp.mpf(x)
    return mp.log(mp.exp(2 * x) + 1) - x


def mp_slips(vx, vy, wz, alpha, lf, lr):
    vx, vy, wz, alpha = map(mp.mpf, (vx, vy, wz, alpha))
    q = vy + lf * wz
    s_f = mp.atan((vx * mp.sin(alpha) - q * mp.cos(alpha)) / mp_g(vx * mp.cos(alpha) + q * mp.sin(alpha)))
    s_r = mp.atan((lr * wz - vy) / mp_g(vx))
    return s_f, s_r


def mp_derivative(s, u_thr, u_str, p, h, geom):
    x, y, th, vx, vy, wz = map(mp.mpf, s)
    gamma, c1, c2, cres, ctire = map(mp.mpf, p)
    psi, tau, sigma = map(mp.mpf, h)
    m, iz, lf, lr = map(mp.mpf, geom)
    alpha = gamma * mp.mpf(u_str)
    s_f, s_r = mp_slips(vx, vy, wz, alpha, lf, lr)
    ff, fr = ctire * s_f, ctire * s_r
    arg = c1 * mp.mpf(u_thr) - c2 * vx
    fx = psi * arg + tau * mp.log(1 + mp.exp(arg)) - mp.log(2) - mp.tanh(sigma * vx) * cres
    return [
        vx - wz * y,
        vy + wz * x,
        wz,
        (fx - ff * mp.sin(alpha)) / m + vy * wz,
        (ff * mp.cos(alpha) + fr) / m - vx * wz,
        (lf * ff * mp.cos(alpha) - lr * fr) / iz,
    ]


# -- soft threshold -------------------------------------------------------------------


def test_soft_threshold_examples():
    assert soft_threshold(0.0) == pytest.approx(math.log(2.0), abs=1e-15)
    assert soft_threshold(5.0) == pytest.approx(float(mp_g(5)), abs=1e-14)
    assert soft_threshold(5.0) == pytest.approx(5.0000454, abs=1e-7)
    assert soft_threshold(-5.0) == soft_threshold(5.0)


def test_soft_threshold_large_arguments_are_finite():
    for x in (350.0, -350.0, 1e3, -1e3):
        assert soft_threshold(x) == pytest.approx(abs(x), rel=1e-15)


@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_soft_threshold_even_and_bounded(x):
    g = soft_threshold(x)
    assert abs(g - soft_threshold(-x)) < 1e-12
    assert g >= math.log(2.0) - 1e-15
    assert -1e-12 <= g - abs(x) <= math.log(2.0) + 1e-15


@given(st.floats(-30, 30, allow_nan=False))
def test_soft_threshold_matches_high_precision(x):
    assert soft_threshold(x) == pytest.approx(float(mp_g(x)), rel=1e-13, abs=1e-14)


# -- longitudinal force ---------------------------------------------------------------


def test_longitudinal_force_at_rest_is_powertrain_offset():
    assert longitudinal_force(PARAMS, HYPER, 0.0, 0.0) == pytest.approx((2.335 - 1) * math.log(2), abs=1e-12)
    assert longitudinal_force(PARAMS, HYPER, 0.0, 0.0) == pytest.approx(0.9254, abs=1e-4)


@given(st.floats(-5, 5), st.floats(0, 1))
def test_longitudinal_force_vanishes_without_forces(vx, u):
    p = DynamicsParams(0.35, 0.0, 0.0, 0.0, 50.0)
    assert longitudinal_force(p, LongitudinalHyperParams(0.0, 1.0, 10.0), u, vx) == pytest.approx(0.0, abs=1e-15)


def test_powertrain_asymptote():
    x = 50.0
    # softplus(50) differs from 50 by ~2e-22; only the constant offset separates f(x) from the slope line
    assert (powertrain_map(x, HYPER) + math.log(2)) / x == pytest.approx(HYPER.psi + HYPER.tau, abs=1e-6)


def test_longitudinal_force_rejects_bad_throttle():
    with pytest.raises(ControlError):
        longitudinal_force(PARAMS, HYPER, 1.5, 0.0)


@given(st.floats(0.05, 1.0), st.floats(0.2, 5.0), st.floats(-3, 3))
def test_throttle_gain_scaling_leaves_force_unchanged(u, k, vx):
    p1 = PARAMS
    p2 = DynamicsParams(PARAMS.gamma, PARAMS.c_thr1 * k, PARAMS.c_thr2, PARAMS.c_res, PARAMS.c_tire)
    u2 = u / k
    if u2 > 1.0:
        return
    assert longitudinal_force(p1, HYPER, u, vx) == pytest.approx(longitudinal_force(p2, HYPER, u2, vx), rel=1e-12, abs=1e-12)


# -- slips and tire forces ------------------------------------------------------------


def test_slip_examples():
    assert slip_angles(VehicleState2D(v_x=2.0), 0.0, GEOM) == (0.0, 0.0)
    s_f, s_r = slip_angles(VehicleState2D(), 0.2, GEOM)
    assert s_f == 0.0 and s_r == 0.0
    s = VehicleState2D(v_x=1.0, v_y=0.1, omega_z=0.5)
    ref = mp_slips(1.0, 0.1, 0.5, 0.1, mp.mpf("0.17"), mp.mpf("0.17"))
    got = slip_angles(s, 0.1, GEOM)
    assert got[0] == pytest.approx(float(ref[0]), abs=1e-14)
    assert got[1] == pytest.approx(float(ref[1]), abs=1e-14)


def test_lateral_force_examples():
    assert lateral_forces(0.0, 0.0, 42.0) == (0.0, 0.0)
    assert lateral_forces(0.1, -0.05, 30.0) == pytest.approx((3.0, -1.5))
    f1 = lateral_forces(0.12, -0.07, 30.0)
    f2 = lateral_forces(0.12, -0.07, 60.0)
    assert f2 == pytest.approx((2 * f1[0], 2 * f1[1]))


# -- state derivative -----------------------------------------------------------------


def test_pure_longitudinal_motion_has_no_lateral_acceleration():
    f = state_derivative(VehicleState2D(v_x=1.7), ControlSample(0.0, 0.6, 0.0), PARAMS, GEOM, HYPER)
    assert f[4] == 0.0 and f[5] == 0.0


def test_force_free_roll():
    f = state_derivative(VehicleState2D(v_x=1.0), ControlSample(0.0, 0.0, 0.0), ZERO_FORCE, GEOM, FREE_HYPER)
    np.testing.assert_allclose(f, [1, 0, 0, 0, 0, 0], atol=1e-15)


def _random_case(rng):
    s = rng.normal(size=6) * [1, 1, 1, 2, 0.3, 1]
    u = (rng.uniform(0, 1), rng.uniform(-1, 1))
    p = PARAMS.as_array() * rng.uniform(0.5, 1.5, 5)
    return s, u, p


def test_state_derivative_matches_high_precision_oracle(rng):
    for _ in range(50):
        s, (ut, us), p = _random_case(rng)
        got = state_derivative(VehicleState2D.from_array(s), ControlSample(0.0, ut, us), DynamicsParams.from_array(p), GEOM, HYPER)
        ref = np.array([float(v) for v in mp_derivative(s, ut, us, p, HYPER.as_array(), GEOM.as_array())])
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def _fd_check(s, ut, us, p, h, sat=0.0, step=1e-6):
    u = ControlSample(0.0, ut, us)
    f, A, B = state_derivative_jacobians(s, u, p, GEOM, h, sat)

    def fs(sv):
        return state_derivative_jacobians(sv, u, p, GEOM, h, sat)[0]

    def fm(m):
        return state_derivative_jacobians(s, u, m[:5], GEOM, m[5:], sat)[0]

    model = np.concatenate([p, h])
    num_A = np.stack([(fs(s + step * e) - fs(s - step * e)) / (2 * step) for e in np.eye(6)], axis=1)
    num_B = np.stack([(fm(model + step * e) - fm(model - step * e)) / (2 * step) for e in np.eye(8)], axis=1)
    err_A = np.max(np.abs(num_A - A)) / max(1.0, np.max(np.abs(num_A)))
    err_B = np.max(np.abs(num_B - B)) / max(1.0, np.max(np.abs(num_B)))
    return max(err_A, err_B)


def test_state_derivative_jacobians_match_finite_differences(rng):
    worst = 0.0
    for i in range(1000):
        s, (ut, us), p = _random_case(rng)
        if i % 3 == 0:
            s[3] = (0.0, 1e-6, -1e-6)[i % 9 // 3]
        worst = max(worst, _fd_check(s, ut, us, p, HYPER.as_array(), sat=0.15 if i % 2 else 0.0))
    assert worst < 1e-5


@given(
    st.floats(-3, 3),
    st.floats(-1, 1),
    st.floats(-2, 2),
    st.floats(-5, 5),
    st.floats(-5, 5),
    st.floats(-np.pi, np.pi),
)
def test_velocity_derivatives_independent_of_pose_at_origin(vx, vy, wz, x, y, th):
    u = ControlSample(0.0, 0.4, 0.3)
    a = state_derivative(VehicleState2D(0.0, 0.0, 0.0, vx, vy, wz), u, PARAMS, GEOM, HYPER)
    b = state_derivative(VehicleState2D(x, y, th, vx, vy, wz), u, PARAMS, GEOM, HYPER)
    np.testing.assert_array_equal(a[3:], b[3:])
    np.testing.assert_allclose(b[:2], [vx - wz * y, vy + wz * x], rtol=1e-15, atol=1e-15)


def test_control_bounds_enforced():
    with pytest.raises(ControlError):
        ControlSample(0.0, -0.1, 0.0)
    with pytest.raises(ControlError):
        ControlSample(0.0, 0.5, 1.1)


def test_hyper_validation():
    with pytest.raises(ValueError):
        LongitudinalHyperParams(0.2, 0.5, 10.0)
    with pytest.raises(ValueError):
        LongitudinalHyperParams(0.2, 2.0, 0.0)
