import math

import numpy as np
import pytest

from trackdyn.dynamics import (
    DynamicsParams,
    LongitudinalHyperParams,
    VehicleState2D,
    slip_angles,
)
from trackdyn.geometry import plane_offset, plane_residual
from trackdyn.integration import ControlTimeline, integrate_interval
from trackdyn.simulation import (
    SCRIPT_NAMES,
    TRUE_PARAMS,
    TRUTH_DT,
    NoiseConfig,
    SimConfig,
    builtin_scripts,
    make_script,
    simulate,
)


def test_zero_input_zero_force_stays_at_rest():
    cfg = SimConfig(
        params_schedule=[(0.0, DynamicsParams(0.35, 0.0, 0.0, 0.0, 50.0))],
        hyper=LongitudinalHyperParams(0.0, 1.0, 10.0),
        initial_bias=(0.0, 0.0, 0.0),
        noise=NoiseConfig(bias_rw=0.0),
        seed=3,
    )
    sim = simulate(cfg, ControlTimeline.constant(), 20.0)
    assert np.all(sim.gt.planar == 0.0) and np.all(sim.gt.body == 0.0)
    T0 = sim.gt.poses[0]
    for T in sim.gt.poses:
        np.testing.assert_array_equal(T.matrix(), T0.matrix())
    vel = np.array([m.vel for m in sim.odom])
    trans = np.array([m.rel[k].t for m in sim.odom for k in m.rel])
    # means are consistent with zero at ~5 standard errors
    assert np.all(np.abs(vel.mean(axis=0)) < 5 * 0.01 / math.sqrt(len(vel)))
    assert np.all(np.abs(trans.mean(axis=0)) < 5 * 0.005 / math.sqrt(len(sim.odom)))
    assert np.all(np.abs(sim.gyro.rate.mean(axis=0)) < 5 * 0.005 / math.sqrt(len(sim.gyro)))


def test_noise_free_measurements_equal_truth(quiet_sim):
    gt = quiet_sim.gt
    for m in quiet_sim.odom:
        T = gt.poses[m.index]
        np.testing.assert_allclose(m.vel, T.R.T @ gt.vel_world[m.index], atol=1e-15)
        for k, rel in m.rel.items():
            ref = gt.poses[k].inverse() @ T
            np.testing.assert_array_equal(rel.matrix(), ref.matrix())


def test_fixed_seed_is_bit_identical():
    ctrl = make_script("stop-and-go", 6.0)
    a = simulate(SimConfig(seed=11), ctrl, 6.0)
    b = simulate(SimConfig(seed=11), ctrl, 6.0)
    c = simulate(SimConfig(seed=12), ctrl, 6.0)
    assert np.array_equal(a.gyro.rate, b.gyro.rate)
    assert all(np.array_equal(x.vel, y.vel) for x, y in zip(a.odom, b.odom))
    assert all(np.array_equal(x.rel[k].matrix(), y.rel[k].matrix()) for x, y in zip(a.odom, b.odom) for k in x.rel)
    assert not np.array_equal(a.gyro.rate, c.gyro.rate)


def test_scripts_respect_bounds_and_shapes():
    scripts = builtin_scripts(30.0)
    assert set(scripts) == set(SCRIPT_NAMES)
    for ctrl in scripts.values():
        assert np.all((ctrl.u_thr >= 0) & (ctrl.u_thr <= 1)) and np.all(np.abs(ctrl.u_str) <= 1)
    assert np.all(scripts["straight-accel"].u_str == 0.0)
    assert np.all(scripts["full-throttle-slalom"].u_thr[scripts["full-throttle-slalom"].t < 27.0] == 1.0)
    with pytest.raises(KeyError):
        make_script("moonwalk")


def test_stop_and_go_comes_to_rest():
    sim = simulate(SimConfig(noise=NoiseConfig.zero()), make_script("stop-and-go", 24.0), 24.0)
    speed = np.linalg.norm(sim.gt.body[:, :2], axis=1)
    rest = speed < 0.02
    # longest run of rest frames before the standing tail
    driving = sim.gt.t < 21.0
    runs, cur = [], 0
    for r in rest[driving]:
        cur = cur + 1 if r else 0
        runs.append(cur)
    assert max(runs) * sim.frame_dt > 1.0
    assert np.any(sim.ctrl.u_thr[sim.ctrl.t < 21.0] == 0.0)


def test_truth_lies_on_the_plane(quiet_sim):
    ext = quiet_sim.config.extrinsics
    d = plane_offset(quiet_sim.gt.poses[0], ext)
    worst = max(np.abs(plane_residual(T, ext, d)).max() for T in quiet_sim.gt.poses)
    assert worst < 1e-12


def test_recorded_slips_match_model(quiet_sim):
    gt = quiet_sim.gt
    cfg = quiet_sim.config
    for j in range(len(gt)):
        alpha = cfg.params_at(gt.t[j]).gamma * quiet_sim.ctrl.lookup(gt.t[j]).u_str
        ref = slip_angles(VehicleState2D(0, 0, 0, *gt.body[j]), alpha, cfg.geometry)
        # independent closed form
        vx, vy, wz = gt.body[j]
        q = vy + 0.17 * wz
        den = vx * math.cos(alpha) + q * math.sin(alpha)
        s_f = math.atan((vx * math.sin(alpha) - q * math.cos(alpha)) / (abs(den) + math.log1p(math.exp(-2 * abs(den)))))
        s_r = math.atan((0.17 * wz - vy) / (abs(vx) + math.log1p(math.exp(-2 * abs(vx)))))
        np.testing.assert_allclose(gt.slips[j], ref, atol=1e-10)
        np.testing.assert_allclose(gt.slips[j], [s_f, s_r], atol=1e-10)


def test_parameter_step_takes_effect_at_its_timestamp():
    ts = 1.01  # between frames and off every sensor grid
    new = TRUE_PARAMS.scaled([1, 1.5, 1, 1, 0.6])
    ctrl = make_script("varying-throttle-slalom", 6.0)
    base = simulate(SimConfig(noise=NoiseConfig.zero()), ctrl, 3.0)
    step = simulate(SimConfig(noise=NoiseConfig.zero(), params_schedule=[(0.0, TRUE_PARAMS), (ts, new)]), ctrl, 3.0)
    assert step.config.params_at(ts) == new and step.config.params_at(math.nextafter(ts, 0)) == TRUE_PARAMS
    k = int(np.searchsorted(step.gt.t, ts))  # first frame after the step
    np.testing.assert_array_equal(step.gt.body[:k], base.gt.body[:k])
    assert not np.allclose(step.gt.body[k], base.gt.body[k], atol=1e-9)
    # switching models exactly at ts reproduces the frame after the step
    s0 = VehicleState2D(0, 0, 0, *step.gt.body[k - 1])
    geom, hyper = step.config.geometry, step.config.hyper
    mid = integrate_interval(s0, ctrl, TRUE_PARAMS, geom, hyper, step.gt.t[k - 1], ts, dt_max=TRUTH_DT)
    end = integrate_interval(mid, ctrl, new, geom, hyper, ts, step.gt.t[k], dt_max=TRUTH_DT)
    np.testing.assert_allclose(end.as_array()[3:], step.gt.body[k], atol=1e-9)
    # switching half a millisecond late does not
    late = integrate_interval(s0, ctrl, TRUE_PARAMS, geom, hyper, step.gt.t[k - 1], ts + 5e-4, dt_max=TRUTH_DT)
    late = integrate_interval(late, ctrl, new, geom, hyper, ts + 5e-4, step.gt.t[k], dt_max=TRUTH_DT)
    assert np.abs(late.as_array()[3:] - step.gt.body[k]).max() > 1e-6


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(params_schedule=[(1.0, TRUE_PARAMS)])
    with pytest.raises(ValueError):
        SimConfig(tire_saturation=-0.1)
    with pytest.raises(ValueError):
        NoiseConfig(vel=-1.0)
    with pytest.raises(ValueError):
        simulate(SimConfig(), make_script("stop-and-go", 5.0), 0.0)
