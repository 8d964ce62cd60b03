"""Central finite differences on manifold-valued factor inputs."""

import numpy as np

from trackdyn.geometry import Pose3, so3_exp

STEP = 1e-6


def retract(value, delta):
    return value.retract(delta) if isinstance(value, Pose3) else np.asarray(value, dtype=float) + delta


def dim(value) -> int:
    return 6 if isinstance(value, Pose3) else int(np.size(value))


def numeric_jacobian(fn, values: dict, key, step: float = STEP) -> np.ndarray:
    base = values[key]
    n = dim(base)
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        vp, vm = dict(values), dict(values)
        vp[key] = retract(base, e)
        vm[key] = retract(base, -e)
        cols.append((fn(vp) - fn(vm)) / (2 * step))
    return np.stack(cols, axis=1)


def factor_jacobian_error(factor, values: dict) -> float:
    """Largest relative deviation between the factor's Jacobian blocks and finite differences."""
    res = factor.evaluate(values)
    worst = 0.0
    for key in factor.keys:
        num = numeric_jacobian(lambda v: factor.evaluate(v, want_jac=False).value, values, key)
        ana = res.jac[key]
        worst = max(worst, float(np.max(np.abs(num - ana)) / max(1.0, np.max(np.abs(num)))))
    return worst


def random_pose(rng, rot=0.3, trans=1.0) -> Pose3:
    return Pose3(so3_exp(rng.normal(size=3) * rot), rng.normal(size=3) * trans)
