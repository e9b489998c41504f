"""Finite-horizon feedback rates and their maximization over input strategies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy.optimize import minimize_scalar

from .filtering import (
    InputStrategy,
    noise_entropy,
    noise_filter,
    output_filter,
    state_feedback_filter,
)
from .noise_models import PoSsRealization, invertibility_predicate

LOG_FLOOR = 1e-300


class Formulation(str, Enum):
    CASE1 = "case1"  # initial state distributed as N(mu_S1, K_S1)
    CASE1_FIXED_S = "case1_fixed_s"  # initial state known, input uses the noise-filter estimate
    CASE2 = "case2"  # initial state known, invertible realization, input uses the state itself


class InfeasibleError(ValueError):
    pass


@dataclass(frozen=True)
class StepTerm:
    t: int
    K_I: float
    K_Ihat: float
    power: float


@dataclass(frozen=True)
class CapacityResult:
    rate_nats_per_step: float
    power_used: float
    per_step_terms: Tuple[StepTerm, ...]
    strategy: InputStrategy
    formulation: Formulation
    diagnostics: dict = field(default_factory=dict)

    def recomputed_rate(self) -> float:
        n = len(self.per_step_terms)
        return sum(math.log(max(s.K_I, LOG_FLOOR) / s.K_Ihat) for s in self.per_step_terms) / (2 * n)

    def to_dict(self, bits: bool = False) -> dict:
        scale = 1.0 / math.log(2.0) if bits else 1.0
        return {
            "rate": self.rate_nats_per_step * scale,
            "rate_unit": "bits/step" if bits else "nats/step",
            "power_used": self.power_used,
            "formulation": self.formulation.value,
            "strategy": self.strategy.to_dict(),
            "per_step_terms": [
                {"t": s.t, "K_I": s.K_I, "K_Ihat": s.K_Ihat, "power": s.power} for s in self.per_step_terms
            ],
            "diagnostics": self.diagnostics,
        }


def _filters(r: PoSsRealization, strat: InputStrategy, formulation: Formulation):
    """(output innovation variances, rate denominators, per-step power)."""
    n = strat.n
    if formulation is Formulation.CASE2:
        if not invertibility_predicate(r):
            raise InfeasibleError("the fixed-state formulation requires an invertible realization")
        out = state_feedback_filter(r, strat)
        denom = np.array([r.noise_variance(t) for t in range(1, n + 1)])
    else:
        sigma1 = np.zeros((r.n_s, r.n_s)) if formulation is Formulation.CASE1_FIXED_S else None
        noise = noise_filter(r, n, sigma1=sigma1)
        out = output_filter(r, strat, noise)
        denom = noise.K_Ihat
    return out.K_I, denom, out.power


def evaluate_rate(r: PoSsRealization, strat: InputStrategy, formulation=Formulation.CASE1) -> CapacityResult:
    """Rate (nats per step) and average power of a fixed strategy."""
    formulation = Formulation(formulation)
    K_I, denom, power = _filters(r, strat, formulation)
    rate = float(np.sum(np.log(np.maximum(K_I, LOG_FLOOR) / denom))) / (2 * strat.n)
    terms = tuple(StepTerm(t + 1, float(K_I[t]), float(denom[t]), float(power[t])) for t in range(strat.n))
    return CapacityResult(rate, float(np.mean(power)), terms, strat, formulation)


class _Objective:
    """Fast evaluation of (sum log K_I/d, sum power) over a strategy.

    Both formulations share the recursion
    K' = A K A^T + Q_t - (A K (L+C)^T + g_t)(.)^T / ((L+C) K (L+C)^T + d_t + K_Z),
    differing only in (Q_t, g_t, d_t).
    """

    def __init__(self, r: PoSsRealization, n: int, formulation: Formulation):
        self.n, self.ns = n, r.n_s
        self.A = [r.step(t)[0] for t in range(1, n + 1)]
        self.C = [r.step(t)[2][0] for t in range(1, n + 1)]
        if formulation is Formulation.CASE2:
            if not invertibility_predicate(r):
                raise InfeasibleError("the fixed-state formulation requires an invertible realization")
            self.Q, self.g, self.d = [], [], []
            for t in range(1, n + 1):
                _, B, _, N, K_W = r.step(t)
                self.Q.append(B @ K_W @ B.T)
                self.g.append((B @ K_W @ N.T)[:, 0])
                self.d.append((N @ K_W @ N.T).item())
        else:
            sigma1 = np.zeros((r.n_s, r.n_s)) if formulation is Formulation.CASE1_FIXED_S else None
            nf = noise_filter(r, n, sigma1=sigma1)
            self.Q = [nf.K_Ihat[t] * np.outer(nf.M[t], nf.M[t]) for t in range(n)]
            self.g = [nf.K_Ihat[t] * nf.M[t] for t in range(n)]
            self.d = [float(k) for k in nf.K_Ihat]
        self.scalar = self.ns == 1
        if self.scalar:
            self.sA = [float(a[0, 0]) for a in self.A]
            self.sC = [float(c[0]) for c in self.C]
            self.sQ = [float(q[0, 0]) for q in self.Q]
            self.sg = [float(g[0]) for g in self.g]

    def suffix(self, t0: int, K0, Lam: np.ndarray, KZ: np.ndarray):
        """Sums over steps t0..n-1 (0-based) starting from error covariance K0."""
        rs = ps = 0.0
        if self.scalar:
            K = float(K0)
            sA, sC, sQ, sg, d = self.sA, self.sC, self.sQ, self.sg, self.d
            for t in range(t0, self.n):
                lam = float(Lam[t, 0])
                lc = lam + sC[t]
                ki = lc * lc * K + d[t] + KZ[t]
                rs += math.log(max(ki, LOG_FLOOR) / d[t])
                ps += lam * lam * K + KZ[t]
                cr = sA[t] * K * lc + sg[t]
                K = sA[t] * sA[t] * K + sQ[t] - cr * cr / ki
                if K < 0.0:
                    K = 0.0
            return rs, ps
        K = np.asarray(K0, dtype=float)
        for t in range(t0, self.n):
            L = Lam[t]
            lc = L + self.C[t]
            ki = float(lc @ K @ lc) + self.d[t] + KZ[t]
            rs += math.log(max(ki, LOG_FLOOR) / self.d[t])
            ps += float(L @ K @ L) + KZ[t]
            cr = self.A[t] @ K @ lc + self.g[t]
            K = self.A[t] @ K @ self.A[t].T + self.Q[t] - np.outer(cr, cr) / ki
            K = 0.5 * (K + K.T)
        return rs, ps

    def step(self, t: int, K, Lam: np.ndarray, KZ: np.ndarray):
        """(log K_I/d, power, next K) for the 0-based step t."""
        if self.scalar:
            lam = float(Lam[t, 0])
            lc = lam + self.sC[t]
            ki = lc * lc * K + self.d[t] + KZ[t]
            cr = self.sA[t] * K * lc + self.sg[t]
            nxt = max(self.sA[t] ** 2 * K + self.sQ[t] - cr * cr / ki, 0.0)
            return math.log(max(ki, LOG_FLOOR) / self.d[t]), lam * lam * K + KZ[t], nxt
        L = Lam[t]
        lc = L + self.C[t]
        ki = float(lc @ K @ lc) + self.d[t] + KZ[t]
        cr = self.A[t] @ K @ lc + self.g[t]
        nxt = self.A[t] @ K @ self.A[t].T + self.Q[t] - np.outer(cr, cr) / ki
        return math.log(max(ki, LOG_FLOOR) / self.d[t]), float(L @ K @ L) + KZ[t], 0.5 * (nxt + nxt.T)

    def prefix_states(self, Lam: np.ndarray, KZ: np.ndarray):
        """Error covariances before each step, running sums before each step, totals."""
        states, sums = [], []
        K = 0.0 if self.scalar else np.zeros((self.ns, self.ns))
        rs = ps = 0.0
        for t in range(self.n):
            states.append(K)
            sums.append((rs, ps))
            r1, p1, K = self.step(t, K, Lam, KZ)
            rs, ps = rs + r1, ps + p1
        return states, sums, (rs, ps)


@dataclass(frozen=True)
class FiniteOptions:
    restarts: int = 8
    seed: int = 0
    tol: float = 1e-10
    max_sweeps: int = 200
    bisection_iters: int = 40
    bisection_power_tol: float = 1e-4  # relative; the polish closes the remaining gap
    lagrangian_tol: float = 1e-8
    lambda_bound: Optional[float] = None
    scan_points: int = 16
    max_horizon: int = 512


def _line_search(f, x0: float, lo: float, hi: float, scan: int, xtol: float):
    """Maximize f on [lo, hi]: coarse scan then bounded Brent refinement."""
    best_x, best_v = x0, f(x0)
    if hi <= lo:
        return best_x, best_v
    grid = np.linspace(lo, hi, scan) if scan > 1 else np.array([])
    vals = [f(x) for x in grid]
    if scan > 1:
        i = int(np.argmax(vals))
        if vals[i] > best_v:
            best_x, best_v = float(grid[i]), vals[i]
        step = (hi - lo) / (scan - 1)
    else:
        step = (hi - lo) * 0.05
    a, b = max(lo, best_x - step), min(hi, best_x + step)
    if b - a > xtol:
        res = minimize_scalar(lambda x: -f(x), bounds=(a, b), method="bounded", options={"xatol": xtol})
        if -res.fun > best_v:
            best_x, best_v = float(res.x), float(-res.fun)
    return best_x, best_v


class _Search:
    def __init__(self, obj: _Objective, kappa: float, opts: FiniteOptions, lam_bound: float):
        self.obj, self.kappa, self.opts, self.lam_bound = obj, kappa, opts, lam_bound
        self.n = obj.n
        self.kz_max = self.n * kappa
        self.evals = 0

    def _coord_update(self, Lam, KZ, which, t, j, value):
        if which == "L":
            Lam[t, j] = value
        else:
            KZ[t] = value

    def lagrangian_ascent(self, Lam, KZ, mu, scan: bool):
        """Coordinate ascent on rate - mu * power (per-step units)."""
        n, obj = self.n, self.obj
        xtol = 1e-6 * max(1.0, self.lam_bound)
        prev = None
        for sweep in range(self.opts.max_sweeps):
            for t in range(n):
                for which, j in [("L", j) for j in range(obj.ns)] + [("Z", 0)]:
                    states, sums, _ = obj.prefix_states(Lam, KZ)
                    K0, (r0, p0) = states[t], sums[t]

                    def f(x, which=which, j=j, t=t):
                        old = Lam[t, j] if which == "L" else KZ[t]
                        self._coord_update(Lam, KZ, which, t, j, x)
                        rs, ps = obj.suffix(t, K0, Lam, KZ)
                        self._coord_update(Lam, KZ, which, t, j, old)
                        self.evals += 1
                        return (r0 + rs) / (2 * n) - mu * (p0 + ps) / n

                    lo, hi = (-self.lam_bound, self.lam_bound) if which == "L" else (0.0, self.kz_max)
                    cur = Lam[t, j] if which == "L" else KZ[t]
                    x, _ = _line_search(f, float(cur), lo, hi, self.opts.scan_points if scan and sweep == 0 else 0, xtol)
                    self._coord_update(Lam, KZ, which, t, j, x)
            _, _, (rs, ps) = obj.prefix_states(Lam, KZ)
            val = rs / (2 * n) - mu * ps / n
            if prev is not None and abs(val - prev) < self.opts.lagrangian_tol:
                break
            prev = val
        _, _, (rs, ps) = obj.prefix_states(Lam, KZ)
        return rs / (2 * n), ps / n

    def budget_polish(self, Lam, KZ):
        """Coordinate ascent on the rate with the last K_Z absorbing the slack."""
        n, obj, kappa = self.n, self.obj, self.kappa
        xtol = 1e-10 * max(1.0, self.lam_bound)

        def fill(Lam, KZ):
            KZ[n - 1] = 0.0
            _, _, (_, ps) = obj.prefix_states(Lam, KZ)
            return n * kappa - ps

        def value(Lam, KZ):
            slack = fill(Lam, KZ)
            KZ[n - 1] = max(slack, 0.0)
            _, _, (rs, _) = obj.prefix_states(Lam, KZ)
            self.evals += 1
            return rs / (2 * n) - 1e3 * max(-slack, 0.0) / n

        best = value(Lam, KZ)
        for sweep in range(self.opts.max_sweeps):
            start = best
            for t in range(n):
                coords = [("L", j) for j in range(obj.ns)] + ([("Z", 0)] if t < n - 1 else [])
                for which, j in coords:

                    def f(x, which=which, j=j, t=t):
                        old = Lam[t, j] if which == "L" else KZ[t]
                        self._coord_update(Lam, KZ, which, t, j, x)
                        v = value(Lam, KZ)
                        self._coord_update(Lam, KZ, which, t, j, old)
                        return v

                    lo, hi = (-self.lam_bound, self.lam_bound) if which == "L" else (0.0, self.kz_max)
                    cur = float(Lam[t, j] if which == "L" else KZ[t])
                    x, v = _line_search(f, cur, lo, hi, self.opts.scan_points if sweep == 0 else 0, xtol)
                    if v >= best:
                        self._coord_update(Lam, KZ, which, t, j, x)
                        best = v
            if best - start < self.opts.tol:
                break
        value(Lam, KZ)
        return best

    def run_start(self, Lam, KZ):
        """Lagrangian bisection followed by the budget polish."""
        d_min = min(self.obj.d)
        mu_lo, mu_hi = 0.0, 1.0 / (2.0 * d_min)
        feasible = None
        for _ in range(60):
            L2, Z2 = Lam.copy(), KZ.copy()
            rate, power = self.lagrangian_ascent(L2, Z2, mu_hi, scan=True)
            if power <= self.kappa:
                feasible = (L2, Z2, rate)
                break
            mu_lo, mu_hi = mu_hi, 2.0 * mu_hi
        if feasible is None:
            L2, Z2 = np.zeros_like(Lam), np.zeros_like(KZ)
            feasible = (L2, Z2, 0.0)
        cur_L, cur_Z = feasible[0].copy(), feasible[1].copy()
        mu_final = mu_hi
        for _ in range(self.opts.bisection_iters):
            mu = 0.5 * (mu_lo + mu_hi)
            L2, Z2 = cur_L.copy(), cur_Z.copy()
            rate, power = self.lagrangian_ascent(L2, Z2, mu, scan=False)
            if power <= self.kappa:
                mu_hi, mu_final = mu, mu
                if rate >= feasible[2]:
                    feasible = (L2.copy(), Z2.copy(), rate)
            else:
                mu_lo = mu
            cur_L, cur_Z = L2, Z2
            if mu_hi - mu_lo < 1e-9 * mu_hi or abs(power - self.kappa) < self.opts.bisection_power_tol * self.kappa:
                break
        L_best, Z_best = feasible[0].copy(), feasible[1].copy()
        value = self.budget_polish(L_best, Z_best)
        return L_best, Z_best, value, mu_final


def optimize_finite(
    r: PoSsRealization,
    kappa: float,
    n: int,
    formulation=Formulation.CASE1,
    opts: Optional[FiniteOptions] = None,
) -> CapacityResult:
    """Maximize the n-step rate subject to average power at most ``kappa``.

    Multi-start search: deterministic starts Lambda = 0 and Lambda = -C plus
    ``opts.restarts`` seeded random starts. Each start runs a bisection on the
    power multiplier with coordinate ascent inside, then a polish that keeps
    the budget active. The best start is returned; all values are recorded.
    """
    opts = opts or FiniteOptions()
    formulation = Formulation(formulation)
    if kappa < 0:
        raise InfeasibleError("the power budget must be nonnegative")
    if n > opts.max_horizon:
        raise ValueError(f"horizon {n} exceeds the configured maximum {opts.max_horizon}")
    r.check_horizon(n)
    ns = r.n_s
    if kappa == 0:
        res = evaluate_rate(r, InputStrategy(np.zeros((n, ns)), np.zeros(n)), formulation)
        return CapacityResult(res.rate_nats_per_step, res.power_used, res.per_step_terms, res.strategy, formulation,
                              {"restarts": [], "note": "zero budget"})
    obj = _Objective(r, n, formulation)
    cmax = max(float(np.max(np.abs(r.step(t)[2]))) for t in range(1, n + 1))
    lam_bound = opts.lambda_bound if opts.lambda_bound is not None else 10.0 * (1.0 + cmax)
    search = _Search(obj, kappa, opts, lam_bound)
    rng = np.random.default_rng(opts.seed)
    C_rows = np.array([r.step(t)[2][0] for t in range(1, n + 1)])
    starts = [np.zeros((n, ns)), np.clip(-C_rows, -lam_bound, lam_bound)]
    for _ in range(opts.restarts):
        width = 2.0 * np.abs(C_rows) + 1.0
        starts.append(rng.uniform(-width, width))
    kz_starts = [np.full(n, kappa), np.full(n, kappa)] + [rng.uniform(0.0, 2.0 * kappa, n) for _ in range(opts.restarts)]
    values, best = [], None
    for i, (L0, Z0) in enumerate(zip(starts, kz_starts)):
        L, Z, val, mu = search.run_start(L0.copy(), Z0.copy())
        values.append(val)
        if best is None or val > best[2] + 1e-15:
            best = (L, Z, val, mu, i)
    L, Z, _, mu, idx = best
    res = evaluate_rate(r, InputStrategy(L, Z), formulation)
    excess = res.power_used - kappa
    if excess > 0:
        Z = Z.copy()
        Z[-1] = max(Z[-1] - n * excess, 0.0)
        res = evaluate_rate(r, InputStrategy(L, Z), formulation)
    diag = {
        "restart_values": values,
        "best_restart": idx,
        "multiplier": mu,
        "lambda_bound": lam_bound,
        "evaluations": search.evals,
    }
    return CapacityResult(res.rate_nats_per_step, res.power_used, res.per_step_terms, res.strategy, formulation, diag)


def case_equivalence_check(r: PoSsRealization, strat: InputStrategy) -> dict:
    """Compare the two formulations for a known zero-variance initial state.

    Per-step terms of Case I with K_S1 = 0 are compared against the fixed
    state formulation; the noise-entropy gap for the given K_S1 is reported.
    """
    n = strat.n
    zero = r.with_initial(K_S1=np.zeros((r.n_s, r.n_s)), initial_state="distributional")
    a = evaluate_rate(zero, strat, Formulation.CASE1)
    b = evaluate_rate(zero, strat, Formulation.CASE2)
    diffs = [
        max(abs(x.K_I - y.K_I), abs(x.K_Ihat - y.K_Ihat), abs(x.power - y.power))
        for x, y in zip(a.per_step_terms, b.per_step_terms)
    ]
    dr = r.with_initial(initial_state="distributional")
    h_given = noise_entropy(noise_filter(dr, n))
    h_known = 0.5 * sum(math.log(2 * math.pi * math.e * r.noise_variance(t)) for t in range(1, n + 1))
    return {
        "identical": max(diffs) <= 1e-12,
        "max_abs_diff": max(diffs),
        "rate_case1": a.rate_nats_per_step,
        "rate_case2": b.rate_nats_per_step,
        "noise_entropy": h_given,
        "noise_entropy_known_state": h_known,
        "entropy_gap": h_given - h_known,
    }
