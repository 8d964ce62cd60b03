"""Sensor stream containers shared by the simulator, the estimator and the dataset I/O."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose3


class GyroStream:
    """Gyro samples: instantaneous rate at ``t`` plus the integrated angle over ``[t, t + dt)``.

    Rates and increments are in the sensor frame and include the (unknown) bias.
    """

    def __init__(self, t, rate, dtheta, dt):
        self.t = np.ascontiguousarray(t, dtype=float)
        self.rate = np.ascontiguousarray(rate, dtype=float).reshape(-1, 3)
        self.dtheta = np.ascontiguousarray(dtheta, dtype=float).reshape(-1, 3)
        self.dt = np.ascontiguousarray(dt, dtype=float)
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("gyro timestamps must be strictly increasing")

    def __len__(self):
        return len(self.t)

    def nearest(self, t: float) -> np.ndarray:
        i = int(np.searchsorted(self.t, t))
        if i == len(self.t) or (i > 0 and t - self.t[i - 1] <= self.t[i] - t):
            i -= 1
        return self.rate[max(i, 0)]

    def between(self, t_a: float, t_b: float) -> tuple[np.ndarray, np.ndarray]:
        """Increments of samples starting in ``[t_a, t_b)``."""
        i = int(np.searchsorted(self.t, t_a, side="left"))
        j = int(np.searchsorted(self.t, t_b, side="left"))
        return self.dtheta[i:j], self.dt[i:j]

    def slice(self, t_a: float, t_b: float) -> GyroStream:
        i = int(np.searchsorted(self.t, t_a, side="left"))
        j = int(np.searchsorted(self.t, t_b, side="right"))
        return GyroStream(self.t[i:j], self.rate[i:j], self.dtheta[i:j], self.dt[i:j])


@dataclass
class OdomMeasurement:
    """Per-frame visual-odometry surrogate.

    ``rel[k]`` is the measured pose of this frame's sensor relative to frame
    ``k``'s sensor (``T_wi(k)^-1 T_wi(self)``); ``vel`` is the sensor velocity
    expressed in the sensor frame.
    """

    index: int
    t: float
    vel: np.ndarray
    rel: dict[int, Pose3] = field(default_factory=dict)
