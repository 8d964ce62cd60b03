"""Random three-frame windows carrying every factor type."""

import numpy as np
from numdiff import random_pose

from trackdyn.dynamics import LongitudinalHyperParams, VehicleGeometry
from trackdyn.factors import (
    DynamicsFactor,
    ExtrinsicsRandomWalkFactor,
    FactorWeights,
    GeometryFactor,
    OdometryFactor,
    ParamAbsoluteFactor,
    ParamRelativeFactor,
    PriorFactor,
    RelativePoseFactor,
    RelativePoseSetFactor,
    VelocityFactor,
)
from trackdyn.geometry import Pose3, so3_exp
from trackdyn.measurements import GyroStream
from trackdyn.simulation import default_extrinsics, make_script

GEOM = VehicleGeometry(3.5, 0.07, 0.17, 0.17)
HYPER = LongitudinalHyperParams()
TRUTH = np.array([0.35, 10.0, 2.5, 6.0, 50.0])
W = FactorWeights()


def random_window(rng, standstill: bool):
    """Three frames of a plausible planar-ish trajectory with random perturbations.

    Headings differ by at most 0.5 rad per frame, far from the half-turn where
    the planar logarithm is singular.
    """
    ext0 = default_extrinsics()
    values = {}
    yaw = rng.uniform(-np.pi, np.pi)
    for f in range(3):
        yaw += rng.uniform(-0.5, 0.5)
        T_wo = Pose3(so3_exp([0.0, 0.0, yaw]), rng.normal(size=3) * [2, 2, 0.01])
        ext = Pose3(ext0.R @ so3_exp(rng.normal(size=3) * 0.02), ext0.t + rng.normal(size=3) * 0.01)
        values[(f, "pose")] = T_wo @ ext
        vel = T_wo.R @ np.array([rng.uniform(-0.5, 3.0), rng.normal() * 0.2, 0.0])
        if standstill and f == 0:
            vel = np.zeros(3)
        values[(f, "vel")] = vel
        values[(f, "bg")] = rng.normal(size=3) * 0.01
        values[(f, "ext")] = ext
    values[(0, "param")] = TRUTH * rng.uniform(0.7, 1.3, 5)
    values[(1, "param")] = TRUTH * rng.uniform(0.7, 1.3, 5)
    return values


def window_factors(rng, values):
    t0 = rng.uniform(0.0, 5.0)
    times = t0 + np.array([0.0, 1 / 30, 2 / 30])
    ctrl = make_script("varying-throttle-slalom", 10.0)
    gt = np.arange(0.0, 10.0, 0.005)
    gyro = GyroStream(gt, rng.normal(size=(len(gt), 3)) * 0.3, np.zeros((len(gt), 3)), np.full(len(gt), 0.005))
    return [
        OdometryFactor(0, 1, random_pose(rng), rng.normal(size=3), rng.normal(size=(7, 3)) * 0.01, np.full(7, 0.005), W),
        RelativePoseFactor(0, 2, random_pose(rng), W),
        RelativePoseSetFactor(2, {0: random_pose(rng), 1: random_pose(rng)}, W),
        VelocityFactor(1, rng.normal(size=3), W),
        PriorFactor((0, "pose"), values[(0, "pose")] @ random_pose(rng, 0.1, 0.1), 1.0),
        PriorFactor((0, "bg"), rng.normal(size=3), 1.0),
        GeometryFactor(1, 0.05, 0.01, 0.03, 0.17, 1.0),
        ExtrinsicsRandomWalkFactor(0, 1, 1.0),
        ParamRelativeFactor(0, 1, 1.0),
        ParamAbsoluteFactor(0, TRUTH, 1.0),
        DynamicsFactor([0, 1, 2], times, ctrl, gyro, GEOM, HYPER),
    ]
