"""Dense windowed nonlinear least squares with Schur-complement marginalization.

Variables are either :class:`Pose3` (6-dim tangent ``[dp, dphi]`` with
retraction ``(R Exp(dphi), t + dp)``) or flat numpy vectors.  The cost is
``0.5 * sum_i r_i^T W_i r_i + 0.5 * |r_prior|^2``.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Hashable, Mapping
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    FactorEvaluationFailure,
    NearPiRotation,
    NonFiniteState,
    SolverFailure,
)
from .factors import Factor, Residual
from .geometry import Pose3, right_jacobian_inv

STEP_TOL = 1e-8
REL_COST_TOL = 1e-10
MAX_ITER = 10
MAX_LAMBDA = 1e12
RANK_REG = 1e-12

_RECOVERABLE = (FactorEvaluationFailure, NearPiRotation, NonFiniteState, FloatingPointError)


def tangent_dim(value) -> int:
    return 6 if isinstance(value, Pose3) else int(np.size(value))


def retract(value, delta):
    if isinstance(value, Pose3):
        return value.retract(delta)
    return np.asarray(value, dtype=float) + delta


def local(ref, value) -> np.ndarray:
    if isinstance(ref, Pose3):
        return ref.local(value)
    return np.asarray(value, dtype=float) - np.asarray(ref, dtype=float)


def _local_jacobian(delta: np.ndarray, is_pose: bool) -> np.ndarray:
    """Derivative of ``local(ref, retract(x, e))`` at ``e = 0``."""
    n = len(delta)
    J = np.eye(n)
    if is_pose:
        J[3:6, 3:6] = right_jacobian_inv(delta[3:6])
    return J


@dataclass
class MarginalPrior:
    """Square-root quadratic ``0.5 |r0 + J local(lin, x)|^2`` over ``keys``."""

    keys: list
    lin: dict
    J: np.ndarray
    r0: np.ndarray

    def evaluate(self, values: Mapping, want_jac: bool = True) -> Residual:
        deltas = [local(self.lin[k], values[k]) for k in self.keys]
        r = self.r0 + self.J @ np.concatenate(deltas) if deltas else self.r0.copy()
        res = Residual(r)
        if want_jac:
            off = 0
            for k, d in zip(self.keys, deltas):
                n = len(d)
                res.jac[k] = self.J[:, off : off + n] @ _local_jacobian(d, isinstance(self.lin[k], Pose3))
                off += n
        return res


def robust_cost(s: float, k: float | None) -> float:
    """Huber loss of a squared whitened norm ``s`` (``2 * 0.5 * rho``)."""
    if k is None or s <= k * k:
        return s
    return 2.0 * k * math.sqrt(s) - k * k


def robust_scale(s: float, k: float | None) -> float:
    """Iteratively-reweighted least-squares weight for the Huber loss."""
    if k is None or s <= k * k:
        return 1.0
    return k / math.sqrt(s)


class LinearFactor(Factor):
    """``r = sum_k A_k x_k - b`` over vector variables."""

    name = "linear"

    def __init__(self, blocks: Mapping[Hashable, np.ndarray], b, weight):
        self.blocks = {k: np.atleast_2d(np.asarray(A, dtype=float)) for k, A in blocks.items()}
        self.keys = tuple(self.blocks)
        self.b = np.atleast_1d(np.asarray(b, dtype=float))
        self.weight = np.broadcast_to(np.asarray(weight, dtype=float), self.b.shape).astype(float)

    def evaluate(self, values, want_jac=True):
        r = -self.b.copy()
        for k, A in self.blocks.items():
            r = r + A @ np.asarray(values[k], dtype=float)
        res = Residual(r)
        if want_jac:
            res.jac = {k: A.copy() for k, A in self.blocks.items()}
        return res


@dataclass
class OptimizeReport:
    iterations: int = 0
    accepted: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    costs: list = field(default_factory=list)
    reason: str = "max_iterations"


class WindowGraph:
    """Variables, factors and a marginalization prior.

    ``projectors`` maps a variable kind (second element of a tuple key) to a
    function applied to that variable after every accepted step.
    """

    def __init__(self, projectors: Mapping[str, Callable] | None = None):
        self.values: dict = {}
        self.factors: list[Factor] = []
        self.prior: MarginalPrior | None = None
        self.projectors = dict(projectors or {})
        self.diagnostics: list[str] = []

    # -- bookkeeping -------------------------------------------------------

    def add_variable(self, key, value):
        if key in self.values:
            raise KeyError(f"variable {key!r} already present")
        self.values[key] = value

    def set_value(self, key, value):
        if key not in self.values:
            raise KeyError(key)
        self.values[key] = value

    def add_factor(self, factor: Factor) -> Factor:
        missing = [k for k in factor.keys if k not in self.values]
        if missing:
            raise KeyError(f"factor {factor.name} references unknown variables {missing}")
        self.factors.append(factor)
        return factor

    def remove_factor(self, factor: Factor):
        self.factors = [f for f in self.factors if f is not factor]

    def touching(self, keys) -> list[Factor]:
        ks = set(keys)
        return [f for f in self.factors if ks.intersection(f.keys)]

    def dimension(self) -> int:
        return sum(tangent_dim(v) for v in self.values.values())

    # -- evaluation ----------------------------------------------------------

    def _ordering(self, keys):
        offsets, n = {}, 0
        for k in keys:
            offsets[k] = n
            n += tangent_dim(self.values[k])
        return offsets, n

    def _residuals(self, values: Mapping) -> list:
        """Whitening weights, robust thresholds and residual vectors of every term."""
        out = [(f.weight, f.huber, f.evaluate(values, want_jac=False).value) for f in self.factors]
        if self.prior is not None:
            r = self.prior.evaluate(values, want_jac=False).value
            out.append((1.0, None, r))
        return out

    def cost(self, values: Mapping | None = None) -> float:
        values = self.values if values is None else values
        c = 0.5 * sum(robust_cost(float(r @ (w * r)), k) for w, k, r in self._residuals(values))
        if not math.isfinite(c):
            raise NonFiniteState("non-finite cost")
        return c

    @staticmethod
    def _decrease(old: list, new: list) -> float:
        """``cost(old) - cost(new)`` from residual differences, accurate even when tiny relative to the cost."""
        total = 0.0
        for (w, k, r0), (_, _, r1) in zip(old, new):
            ds = float((r0 - r1) @ (w * (r0 + r1)))
            s0, s1 = float(r0 @ (w * r0)), float(r1 @ (w * r1))
            if k is None or (s0 <= k * k and s1 <= k * k):
                total += ds
            elif s0 > k * k and s1 > k * k:
                total += 2.0 * k * ds / (math.sqrt(s0) + math.sqrt(s1))
            else:
                total += robust_cost(s0, k) - robust_cost(s1, k)
        d = 0.5 * total
        if not math.isfinite(d):
            raise NonFiniteState("non-finite cost")
        return d

    def linearize(self, keys=None, factors=None, include_prior=True):
        """Return ``(cost, H, g, offsets)`` with ``g = J^T W r`` over ``keys``."""
        return self._linearize(keys, factors, include_prior)[:4]

    def _linearize(self, keys=None, factors=None, include_prior=True):
        keys = list(self.values) if keys is None else list(keys)
        factors = self.factors if factors is None else factors
        offsets, n = self._ordering(keys)
        items, terms = [], []
        c = 0.0
        for f in factors:
            res = f.evaluate(self.values)
            s = float(res.value @ (f.weight * res.value))
            c += robust_cost(s, f.huber)
            items.append((res, f.weight * robust_scale(s, f.huber)))
            terms.append((f.weight, f.huber, res.value))
        if include_prior and self.prior is not None:
            res = self.prior.evaluate(self.values)
            c += float(res.value @ res.value)
            items.append((res, np.ones(len(res.value))))
            terms.append((1.0, None, res.value))
        m = sum(len(res.value) for res, _ in items)
        J = np.zeros((m, n))
        r = np.empty(m)
        w = np.empty(m)
        row = 0
        for res, wf in items:
            k = len(res.value)
            r[row : row + k] = res.value
            w[row : row + k] = wf
            for key, Jk in res.jac.items():
                o = offsets[key]
                J[row : row + k, o : o + Jk.shape[1]] = Jk
            row += k
        WJ = J * w[:, None]
        H = J.T @ WJ
        g = WJ.T @ r
        c *= 0.5
        if not (math.isfinite(c) and np.all(np.isfinite(H)) and np.all(np.isfinite(g))):
            raise NonFiniteState("non-finite linearization")
        return c, H, g, offsets, terms

    def _apply(self, keys, offsets, delta) -> dict:
        out = dict(self.values)
        for k in keys:
            o = offsets[k]
            v = retract(self.values[k], delta[o : o + tangent_dim(self.values[k])])
            proj = self.projectors.get(k[1]) if isinstance(k, tuple) and len(k) > 1 else None
            out[k] = proj(v) if proj is not None else v
        return out

    # -- solve -----------------------------------------------------------------

    def optimize(
        self,
        max_iter: int = MAX_ITER,
        step_tol: float = STEP_TOL,
        rel_tol: float = REL_COST_TOL,
        initial_lambda: float = 1e-8,
    ) -> OptimizeReport:
        """Levenberg-Marquardt with Marquardt (diagonal-scaled) damping."""
        report = OptimizeReport()
        if not self.factors and self.prior is None:
            report.reason = "empty"
            return report
        keys = list(self.values)
        cost, H, g, offsets, current = self._linearize(keys)
        report.initial_cost = report.final_cost = cost
        report.costs.append(cost)
        lam = initial_lambda
        n = len(g)
        for _ in range(max_iter):
            report.iterations += 1
            D = np.maximum(np.diag(H), 1e-9)
            while True:
                A = H + np.diag(lam * D)
                try:
                    cf = scipy.linalg.cho_factor(A, check_finite=False)
                    delta = -scipy.linalg.cho_solve(cf, g, check_finite=False)
                except np.linalg.LinAlgError:
                    delta = -np.linalg.lstsq(A + RANK_REG * np.eye(n), g, rcond=None)[0]
                if np.linalg.norm(delta) < step_tol:
                    report.reason = "step"
                    return report
                pred = -(g @ delta + 0.5 * delta @ H @ delta)
                try:
                    trial = self._apply(keys, offsets, delta)
                    trial_res = self._residuals(trial)
                    gain = self._decrease(current, trial_res)
                except _RECOVERABLE:
                    gain = -math.inf
                if gain > 0.0:
                    break
                lam *= 10.0
                if lam > MAX_LAMBDA:
                    if np.max(np.abs(g)) < 1e-9 * max(1.0, cost):
                        report.reason = "gradient"
                        return report
                    raise SolverFailure(f"cost did not decrease at maximum damping (cost={cost:.6g})")
            self.values = trial
            current = trial_res
            report.accepted += 1
            rho = gain / pred if pred > 0 else 0.0
            lam = max(lam * max(0.1, 1.0 - (2.0 * rho - 1.0) ** 3), 1e-15)
            rel = gain / max(cost, 1e-300)
            cost = max(cost - gain, 0.0)
            report.final_cost = cost
            report.costs.append(cost)
            if rel < rel_tol:
                report.reason = "cost"
                return report
            _, H, g, offsets, current = self._linearize(keys)
        return report

    # -- marginalization ----------------------------------------------------

    def marginalize(self, keys) -> bool:
        """Eliminate ``keys``; returns False when nothing touched them (prior unchanged).

        Non-absorbing factors touching the departing variables are dropped.
        """
        keys = [k for k in keys if k in self.values]
        if not keys:
            return False
        gone = set(keys)
        touching = self.touching(keys)
        absorb = [f for f in touching if f.absorb]
        prior_hit = self.prior is not None and bool(gone.intersection(self.prior.keys))
        if not absorb and not prior_hit:
            self.factors = [f for f in self.factors if f not in touching]
            for k in keys:
                del self.values[k]
            return False

        involved = []
        seen = set()
        use_prior = self.prior is not None
        sources = [f.keys for f in absorb] + ([self.prior.keys] if use_prior else [])
        for ks in sources:
            for k in ks:
                if k not in seen:
                    seen.add(k)
                    involved.append(k)
        kept = [k for k in involved if k not in gone]
        order = [k for k in keys if k in seen] + kept
        _, H, g, offsets = self.linearize(order, factors=absorb, include_prior=use_prior)
        m = sum(tangent_dim(self.values[k]) for k in order if k in gone)

        Hmm, Hmk, Hkk = H[:m, :m], H[:m, m:], H[m:, m:]
        gm, gk = g[:m], g[m:]
        try:
            cf = scipy.linalg.cho_factor(Hmm, check_finite=False)
        except np.linalg.LinAlgError:
            self.diagnostics.append(f"rank-deficient marginal block for {sorted(map(str, keys))}; regularized")
            cf = scipy.linalg.cho_factor(Hmm + RANK_REG * np.eye(m) * max(1.0, np.max(np.abs(np.diag(Hmm)))), check_finite=False)
        X = scipy.linalg.cho_solve(cf, np.column_stack([Hmk, gm]), check_finite=False)
        Hs = Hkk - Hmk.T @ X[:, :-1]
        gs = gk - Hmk.T @ X[:, -1]
        Hs = 0.5 * (Hs + Hs.T)

        self.factors = [f for f in self.factors if f not in touching]
        for k in keys:
            del self.values[k]
        if not kept:
            self.prior = None
            return True
        lam, V = np.linalg.eigh(Hs)
        tol = max(lam.max(), 0.0) * 1e-13 if lam.size else 0.0
        keep = lam > max(tol, 1e-300)
        s = np.sqrt(lam[keep])
        Vk = V[:, keep]
        J = s[:, None] * Vk.T
        r0 = (Vk.T @ gs) / s
        self.prior = MarginalPrior(kept, {k: self.values[k] for k in kept}, J, r0)
        return True

    def covariance(self, key) -> np.ndarray:
        """Marginal covariance block of ``key`` from the inverse of the full Hessian."""
        _, H, _, offsets = self.linearize()
        n = H.shape[0]
        o = offsets[key]
        d = tangent_dim(self.values[key])
        try:
            cf = scipy.linalg.cho_factor(H, check_finite=False)
            E = np.zeros((n, d))
            E[o : o + d] = np.eye(d)
            return scipy.linalg.cho_solve(cf, E, check_finite=False)[o : o + d]
        except np.linalg.LinAlgError:
            return np.full((d, d), np.inf)
