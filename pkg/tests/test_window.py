import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numdiff import random_pose

from trackdyn.factors import (
    FactorWeights,
    PriorFactor,
    RelativePoseFactor,
    VelocityFactor,
)
from trackdyn.window import LinearFactor, WindowGraph, robust_cost, robust_scale

D = 2


def _chain_specs(rng, n):
    specs = [({0: np.eye(D)}, rng.normal(size=D), 1.0)]
    for i in range(n - 1):
        specs.append(({i: -rng.normal(size=(D, D)) - np.eye(D), i + 1: np.eye(D)}, rng.normal(size=D), rng.uniform(1, 5)))
        specs.append(({i + 1: rng.normal(size=(3, D))}, rng.normal(size=3), 2.0))
    return specs


def _batch(specs, n):
    H = np.zeros((n * D, n * D))
    b = np.zeros(n * D)
    for blocks, rhs, w in specs:
        J = np.zeros((len(rhs), n * D))
        for k, A in blocks.items():
            J[:, k * D : (k + 1) * D] = A
        H += w * J.T @ J
        b += w * J.T @ rhs
    return np.linalg.solve(H, b)


def test_linear_problem_matches_normal_equations(rng):
    n = 8
    specs = _chain_specs(rng, n)
    G = WindowGraph()
    for i in range(n):
        G.add_variable((i, "x"), np.zeros(D))
    for blocks, rhs, w in specs:
        G.add_factor(LinearFactor({(k, "x"): A for k, A in blocks.items()}, rhs, w))
    G.optimize()
    x = _batch(specs, n)
    for i in range(n):
        np.testing.assert_allclose(G.values[(i, "x")], x[i * D : (i + 1) * D], atol=1e-9, rtol=0)


@pytest.mark.parametrize("seed", range(5))
def test_sliding_window_matches_full_batch(seed):
    rng = np.random.default_rng(seed)
    n, width = 12, 3
    specs = _chain_specs(rng, n)
    G = WindowGraph()
    for i in range(n):
        G.add_variable((i, "x"), np.zeros(D))
        for blocks, rhs, w in specs:
            if max(blocks) == i:
                G.add_factor(LinearFactor({(k, "x"): A for k, A in blocks.items()}, rhs, w))
        G.optimize()
        live = list(G.values)
        if len(live) > width:
            G.marginalize([live[0]])
    G.optimize()
    x = _batch(specs, n)
    for (i, _), v in G.values.items():
        np.testing.assert_allclose(v, x[i * D : (i + 1) * D], atol=1e-9, rtol=0)


def test_marginalizing_untouched_variable_keeps_prior(rng):
    G = WindowGraph()
    for i in range(3):
        G.add_variable((i, "x"), np.zeros(D))
    G.add_factor(LinearFactor({(0, "x"): np.eye(D)}, [1.0, 2.0], 1.0))
    G.add_factor(LinearFactor({(0, "x"): -np.eye(D), (1, "x"): np.eye(D)}, [0.5, 0.5], 1.0))
    G.optimize()
    G.marginalize([(0, "x")])
    prior = G.prior
    J, r0 = prior.J.copy(), prior.r0.copy()
    assert G.marginalize([(2, "x")]) is False
    assert G.prior is prior
    np.testing.assert_array_equal(G.prior.J, J)
    np.testing.assert_array_equal(G.prior.r0, r0)


def _pose_window(rng, n=4):
    G = WindowGraph()
    w = FactorWeights()
    truth = [random_pose(rng, 0.5, 2.0) for _ in range(n)]
    for i, T in enumerate(truth):
        G.add_variable((i, "pose"), T.retract(rng.normal(size=6) * 0.05))
        G.add_variable((i, "vel"), rng.normal(size=3))
        G.add_factor(VelocityFactor(i, rng.normal(size=3), w))
    G.add_factor(PriorFactor((0, "pose"), truth[0], 1e4))
    for i in range(n - 1):
        meas = (truth[i].inverse() @ truth[i + 1]).retract(rng.normal(size=6) * 0.01)
        G.add_factor(RelativePoseFactor(i, i + 1, meas, w))
    meas = (truth[0].inverse() @ truth[-1]).retract(rng.normal(size=6) * 0.01)
    G.add_factor(RelativePoseFactor(0, n - 1, meas, w))
    return G


def test_cost_non_increasing_on_random_windows(rng):
    for _ in range(100):
        G = _pose_window(rng)
        report = G.optimize()
        assert np.all(np.diff(report.costs) <= 0.0)
        assert report.final_cost <= report.initial_cost


def test_prior_is_consistent_after_marginalization(rng):
    for _ in range(10):
        G = _pose_window(rng)
        G.optimize(max_iter=50, rel_tol=0.0, step_tol=1e-14)
        G.marginalize([(0, "pose"), (0, "vel")])
        before = {k: v for k, v in G.values.items()}
        G.optimize()
        for k, v in G.values.items():
            delta = v.local(before[k]) if hasattr(v, "local") else v - before[k]
            assert np.abs(delta).max() < 1e-10


def test_covariance_of_linear_problem():
    G = WindowGraph()
    G.add_variable((0, "x"), np.zeros(2))
    G.add_factor(LinearFactor({(0, "x"): np.eye(2)}, [0.0, 0.0], [4.0, 25.0]))
    np.testing.assert_allclose(G.covariance((0, "x")), np.diag([0.25, 0.04]), atol=1e-14)


@given(st.floats(0, 100), st.floats(0.1, 10))
def test_huber_loss_properties(s, k):
    assert robust_cost(s, None) == s
    assert robust_scale(s, None) == 1.0
    c = robust_cost(s, k)
    assert c <= s + 1e-12
    assert 0.0 < robust_scale(s, k) <= 1.0
    if s <= k * k:
        assert c == s
    # continuous at the threshold
    assert robust_cost(k * k, k) == pytest.approx(k * k)


def test_huber_downweights_outlier():
    def solve(huber):
        G = WindowGraph()
        G.add_variable((0, "x"), np.zeros(1))
        for b in [1.0, 1.1, 0.9, 1.05, 25.0]:
            f = LinearFactor({(0, "x"): np.eye(1)}, [b], 1.0)
            f.huber = huber
            G.add_factor(f)
        G.optimize(max_iter=50)
        return float(G.values[(0, "x")][0])

    plain, robust = solve(None), solve(1.0)
    assert plain == pytest.approx(np.mean([1.0, 1.1, 0.9, 1.05, 25.0]), abs=1e-9)
    assert abs(robust - 1.0) < 0.5 < abs(plain - 1.0)
