import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numdiff import random_pose
from scipy.stats import binomtest

from trackdyn.errors import AlignmentFailure, EmptyAfterTrim
from trackdyn.evaluation import (
    FRACTIONS,
    PredictionStart,
    Trajectory,
    prediction_rpe,
    tracking_rpe,
    trim_standing_tail,
)
from trackdyn.geometry import Pose3, so3_exp
from trackdyn.pipeline import gt_trajectory
from trackdyn.simulation import TRUE_PARAMS


def _line(n, dt=0.1, speed=1.0, rest_from=None):
    t = dt * np.arange(n)
    v = np.full(n, speed)
    if rest_from is not None:
        v[rest_from:] = 0.0
    x = np.concatenate([[0.0], np.cumsum(v[:-1] * dt)])
    poses = [Pose3(np.eye(3), np.array([xi, 0.0, 0.0])) for xi in x]
    return Trajectory(t, poses, np.stack([v, 0 * v, 0 * v], axis=1))


def _wiggle(rng, n=120):
    """Curvy random trajectory with smoothly varying attitude."""
    poses = [Pose3.identity()]
    for _ in range(n - 1):
        step = np.concatenate([[0.3, 0.0, 0.0] + rng.normal(scale=0.05, size=3), rng.normal(scale=0.05, size=3)])
        poses.append(poses[-1].retract(step))
    return Trajectory(0.1 * np.arange(n), poses)


def _noisy(traj, rng, sigma):
    return Trajectory(traj.t, [T.retract(sigma * rng.normal(size=6)) for T in traj.poses])


def test_trim_removes_standing_tail():
    traj = _line(150, rest_from=100)  # 5 s at rest
    out = trim_standing_tail(traj)
    assert len(out) == 100
    np.testing.assert_array_equal(out.t, traj.t[:100])


def test_trim_keeps_moving_trajectory():
    traj = _line(100)
    assert len(trim_standing_tail(traj)) == 100
    # a rest shorter than the window is kept
    assert len(trim_standing_tail(_line(100, rest_from=97))) == 100


def test_trim_all_rest_raises():
    with pytest.raises(EmptyAfterTrim):
        trim_standing_tail(_line(50, speed=0.0))


def test_identical_trajectories_have_zero_error(rng):
    traj = _wiggle(rng)
    rep = tracking_rpe(traj, traj)
    assert rep.trans_rmse == 0.0 and rep.rot_rmse == 0.0
    assert rep.count > 0 and set(rep.breakdown) == set(FRACTIONS)


def test_world_offset_has_zero_error(rng):
    gt = _wiggle(rng)
    est = Trajectory(gt.t, [Pose3(T.R, T.t + [3.0, -2.0, 0.5]) for T in gt.poses])
    rep = tracking_rpe(est, gt)
    assert rep.trans_rmse < 1e-12 and rep.rot_rmse < 1e-6


@given(st.integers(0, 2**32 - 1))
def test_tracking_rpe_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    gt = _wiggle(rng, 60)
    est = _noisy(gt, rng, 0.02)
    G = random_pose(rng, 3.0, 10.0)
    a = tracking_rpe(est, gt)
    b = tracking_rpe(est.transformed(G), gt.transformed(G))
    assert b.count == a.count
    assert b.trans_rmse == pytest.approx(a.trans_rmse, rel=1e-9, abs=1e-12)
    assert b.rot_rmse == pytest.approx(a.rot_rmse, rel=1e-7, abs=1e-9)


def _naive_rpe(est, gt, fractions):
    """Pairwise search with plain 4x4 matrices."""
    P = [p.t for p in gt.poses]
    arc = [0.0]
    for a, b in zip(P[:-1], P[1:]):
        arc.append(arc[-1] + math.dist(a, b))
    Gm = [p.matrix() for p in gt.poses]
    Em = [p.matrix() for p in est.poses]
    te, re = [], []
    for frac in fractions:
        L = frac * arc[-1]
        for i in range(len(arc)):
            j = next((k for k in range(i, len(arc)) if arc[k] >= arc[i] + L), None)
            if j is None:
                break
            err = np.linalg.inv(np.linalg.inv(Gm[i]) @ Gm[j]) @ (np.linalg.inv(Em[i]) @ Em[j])
            te.append(np.linalg.norm(err[:3, 3]))
            c = np.clip((np.trace(err[:3, :3]) - 1) / 2, -1, 1)
            re.append(math.degrees(math.acos(c)))
    return math.sqrt(np.mean(np.square(te))), math.sqrt(np.mean(np.square(re))), len(te)


def test_matches_brute_force_oracle(rng):
    gt = _wiggle(rng)
    est = _noisy(gt, rng, 0.05)
    rep = tracking_rpe(est, gt)
    t, r, n = _naive_rpe(est, gt, FRACTIONS)
    assert rep.count == n
    assert rep.trans_rmse == pytest.approx(t, rel=1e-10)
    assert rep.rot_rmse == pytest.approx(r, rel=1e-6)


def test_one_percent_drift(rng):
    gt = _wiggle(rng, 200)
    arc = gt.arc_length()
    up = np.array([0.0, 0.0, 1.0])
    est = Trajectory(gt.t, [Pose3(T.R, T.t + 0.01 * s * up) for T, s in zip(gt.poses, arc)])
    rep = tracking_rpe(est, gt)
    assert rep.rot_rmse == 0.0
    step = np.diff(arc).max()
    for frac, (trans, _, count) in rep.breakdown.items():
        L = frac * arc[-1]
        assert count > 0
        assert 0.01 * L <= trans <= 0.01 * (L + step)
    t, _, n = _naive_rpe(est, gt, FRACTIONS)
    assert rep.count == n and rep.trans_rmse == pytest.approx(t, rel=1e-10)


def test_alignment_failure(rng):
    gt = _wiggle(rng, 30)
    shifted = Trajectory(gt.t + 0.07, gt.poses)
    with pytest.raises(AlignmentFailure):
        tracking_rpe(shifted, gt)
    # a shift inside half a frame is tolerated
    assert tracking_rpe(Trajectory(gt.t + 0.04, gt.poses), gt).trans_rmse == 0.0
    with pytest.raises(AlignmentFailure):
        tracking_rpe(gt, Trajectory(gt.t[:1], gt.poses[:1]))


def test_noise_scaling_does_not_decrease_error(quiet_sim):
    gt = gt_trajectory(quiet_sim)
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        lo = tracking_rpe(_noisy(gt, rng, 0.01), gt).trans_rmse
        hi = tracking_rpe(_noisy(gt, rng, 0.02), gt).trans_rmse
        wins += hi >= lo
    assert binomtest(wins, 20, 0.5, alternative="greater").pvalue < 0.05


def _truth_starts(sim, every=10):
    gt = sim.gt
    ext = sim.config.extrinsics
    return [PredictionStart(gt.t[i], gt.body[i], TRUE_PARAMS.as_array(), ext) for i in range(0, len(gt), every)]


def test_zero_horizon_is_zero(quiet_sim):
    rep = prediction_rpe(_truth_starts(quiet_sim), gt_trajectory(quiet_sim), quiet_sim.ctrl, quiet_sim.config.geometry, quiet_sim.config.hyper, horizons=(0.0,))
    assert rep[0.0].count > 0 and rep[0.0].trans_rmse == 0.0 and rep[0.0].rot_rmse == 0.0


def test_truth_parameters_predict_noise_free_motion(quiet_sim):
    sim = quiet_sim
    rep = prediction_rpe(_truth_starts(sim), gt_trajectory(sim), sim.ctrl, sim.config.geometry, sim.config.hyper, horizons=(0.33, 1.66, 3.33))
    for h, r in rep.items():
        assert r.count > 0
        assert r.trans_rmse < 1e-5 and r.rot_rmse < 1e-4, h


def test_wrong_parameters_predict_worse(quiet_sim):
    sim = quiet_sim
    gt = gt_trajectory(sim)
    args = (sim.ctrl, sim.config.geometry, sim.config.hyper)
    good = prediction_rpe(_truth_starts(sim), gt, *args, horizons=(1.66,))
    bad = prediction_rpe(_truth_starts(sim), gt, *args, horizons=(1.66,), params=TRUE_PARAMS.scaled([1.3] * 5).as_array())
    assert bad[1.66].trans_rmse > 100 * good[1.66].trans_rmse


def test_rotation_of_world_frame(rng):
    # a pure yaw of the estimate's world frame leaves relative errors unchanged
    gt = _wiggle(rng, 40)
    est = gt.transformed(Pose3(so3_exp([0.0, 0.0, 1.0]), np.zeros(3)))
    rep = tracking_rpe(est, gt)
    assert rep.trans_rmse < 1e-12 and rep.rot_rmse < 1e-5
