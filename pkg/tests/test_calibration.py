import math

import numpy as np
import pytest

from trackdyn.calibration import (
    CalibResult,
    calibrate_stage1,
    calibrate_stage2,
    initial_steering_gain,
)
from trackdyn.config import perturb_extrinsics
from trackdyn.dynamics import LongitudinalHyperParams
from trackdyn.errors import NotForwardMotion
from trackdyn.simulation import (
    TRUE_PARAMS,
    NoiseConfig,
    SimConfig,
    make_script,
    simulate,
)

TRUTH = TRUE_PARAMS.as_array()
QUIET = dict(noise=NoiseConfig.zero(), initial_bias=(0.0, 0.0, 0.0))


@pytest.fixture(scope="module")
def straight_sim():
    return simulate(SimConfig(seed=1), make_script("straight-accel", 30.0), 30.0)


@pytest.fixture(scope="module")
def stage1_result(straight_sim):
    return calibrate_stage1(straight_sim, LongitudinalHyperParams(), TRUE_PARAMS.scaled([1, 0.5, 0.5, 0.5, 1]))


def test_stage1_recovers_longitudinal_parameters(stage1_result):
    rel = stage1_result.params.as_array() / TRUTH - 1
    assert np.all(np.abs(rel[1:4]) <= 0.05)
    # steering gain and tire stiffness are frozen
    assert rel[0] == 0.0 and rel[4] == 0.0


def test_stage1_cost_is_non_increasing(stage1_result):
    hist = np.asarray(stage1_result.cost_history)
    assert len(hist) >= 2 and np.all(np.diff(hist) <= 0.0)


def test_stage1_is_reproducible(straight_sim, stage1_result):
    again = calibrate_stage1(straight_sim, LongitudinalHyperParams(), TRUE_PARAMS.scaled([1, 0.5, 0.5, 0.5, 1]))
    assert again == stage1_result


def test_stage1_at_truth_does_not_move():
    sim = simulate(SimConfig(**QUIET), make_script("straight-accel", 15.0), 15.0)
    r = calibrate_stage1(sim, LongitudinalHyperParams(), TRUE_PARAMS)
    assert r.iterations <= 1
    np.testing.assert_allclose(r.params.as_array(), TRUTH, rtol=1e-6)


def test_stage1_rejects_steering(quiet_sim):
    with pytest.raises(NotForwardMotion):
        calibrate_stage1(quiet_sim, LongitudinalHyperParams(), TRUE_PARAMS)


def test_initial_steering_gain(quiet_sim):
    u_max = np.max(np.abs(quiet_sim.ctrl.u_str))
    assert initial_steering_gain(quiet_sim, 0.35 * u_max) == pytest.approx(0.35)


def test_stage2_noise_free_at_truth():
    cfg = SimConfig(**QUIET)
    sim = simulate(cfg, make_script("stop-and-go", 20.0), 20.0)
    stage1 = CalibResult(TRUE_PARAMS, LongitudinalHyperParams(), cfg.extrinsics, 0.0, 0)
    r = calibrate_stage2(sim, stage1, init=TRUE_PARAMS)
    assert r.cost < 1e-8
    assert r.iterations <= 50


@pytest.fixture(scope="module")
def stage2_result():
    sim = simulate(SimConfig(seed=0), make_script("stop-and-go", 60.0), 60.0)
    ext0 = perturb_extrinsics(sim.config.extrinsics, 0.01, 1.0, seed=5)
    stage1 = CalibResult(TRUE_PARAMS, LongitudinalHyperParams(0.25, 2.0, 15.0), ext0, math.nan, 0)
    u_max = float(np.max(np.abs(sim.ctrl.u_str)))
    r = calibrate_stage2(sim, stage1, init=TRUE_PARAMS.scaled([1, 1, 1, 1, 1.3]), max_steer_angle=1.15 * TRUE_PARAMS.gamma * u_max)
    return sim, r


def test_stage2_recovers_steering_and_tire(stage2_result):
    sim, r = stage2_result
    assert r.params.gamma == pytest.approx(TRUE_PARAMS.gamma, rel=0.05)
    assert r.params.c_tire == pytest.approx(TRUE_PARAMS.c_tire, rel=0.05)
    assert r.hyper.sigma == pytest.approx(sim.config.hyper.sigma, rel=0.30)
    assert r.iterations <= 50


def test_stage2_refines_extrinsics(stage2_result):
    sim, r = stage2_result
    err = r.extrinsics.inverse() @ sim.config.extrinsics
    assert np.linalg.norm(err.t) < 0.02
    assert np.degrees(np.linalg.norm(sim.config.extrinsics.local(r.extrinsics)[3:])) < 0.5
