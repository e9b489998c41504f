"""Asymptotic feedback rate of time-invariant strategies.

A time-invariant pair (Lambda, K_Z) is admissible when the noise-side and
input-side Riccati equations both have stabilizing solutions reached from
any initial condition. The rate then has the closed form

    0.5 log(((Lambda + C) K (Lambda + C)^T + C Sigma C^T + N K_W N^T + K_Z)
            / (C Sigma C^T + N K_W N^T)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.optimize import minimize

from .noise_models import PoSsRealization
from .riccati import (
    BOUNDARY_TOL,
    AreSolution,
    RiccatiProblem,
    StructuralReport,
    classify,
    stabilizing_solution,
)


class EmptyFeasibleSet(ValueError):
    pass


def _require_time_invariant(r: PoSsRealization) -> None:
    if not r.time_invariant:
        raise ValueError("asymptotic analysis needs a time-invariant realization")


def noise_problem(r: PoSsRealization) -> RiccatiProblem:
    A, B, C, N, K_W = r.step(1)
    return RiccatiProblem(A, B, K_W, K_W @ N.T, N @ K_W @ N.T, C)


@dataclass(frozen=True)
class NoiseAreResult:
    solution: AreSolution
    report: StructuralReport
    Sigma: Optional[np.ndarray]
    M: Optional[np.ndarray]  # filter gain at the limit, shape (n_s,)
    K_Ihat: Optional[float]
    entropy_rate: Optional[float]
    status: str

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "Sigma": None if self.Sigma is None else self.Sigma.tolist(),
            "M": None if self.M is None else self.M.tolist(),
            "K_Ihat": self.K_Ihat,
            "entropy_rate": self.entropy_rate,
            "report": self.report.to_dict(),
            "solution": self.solution.to_dict(),
        }


def noise_are(r: PoSsRealization) -> NoiseAreResult:
    """Limit of the noise filter and the entropy rate of V."""
    _require_time_invariant(r)
    prob = noise_problem(r)
    report = classify(prob)
    sol = stabilizing_solution(prob)
    if not (report.detectable and report.stabilizable and sol.stabilizing) or report.indeterminate:
        return NoiseAreResult(sol, report, None, None, None, None, "no_entropy_rate")
    A, B, C, N, K_W = r.step(1)
    Sigma = sol.P
    k = (C @ Sigma @ C.T + N @ K_W @ N.T).item()
    M = ((A @ Sigma @ C.T + B @ K_W @ N.T) / k)[:, 0]
    return NoiseAreResult(sol, report, Sigma, M, k, 0.5 * math.log(2 * math.pi * math.e * k), "ok")


def input_problem(r: PoSsRealization, Lambda, K_Z: float, noise: NoiseAreResult) -> RiccatiProblem:
    A, _, C, _, _ = r.step(1)
    L = np.asarray(Lambda, dtype=float).reshape(1, -1)
    G = noise.M.reshape(-1, 1)
    k = noise.K_Ihat
    return RiccatiProblem(A, G, [[k]], [[k]], [[k + K_Z]], L + C)


def input_are(r: PoSsRealization, Lambda, K_Z: float, noise: Optional[NoiseAreResult] = None) -> AreSolution:
    """Stabilizing solution of the input-side equation for constant (Lambda, K_Z)."""
    _require_time_invariant(r)
    noise = noise or noise_are(r)
    if noise.status != "ok":
        raise EmptyFeasibleSet("the noise-side equation has no stabilizing solution")
    return stabilizing_solution(input_problem(r, Lambda, K_Z, noise))


@dataclass(frozen=True)
class AsymptoticPoint:
    Lambda_inf: np.ndarray
    K_Z_inf: float
    Sigma_inf: Optional[np.ndarray]
    K_inf: Optional[np.ndarray]
    feasible: bool
    noise_report: Optional[StructuralReport]
    input_report: Optional[StructuralReport]
    rate: float
    power: float
    reasons: tuple = field(default=())

    def to_dict(self, bits: bool = False) -> dict:
        scale = 1.0 / math.log(2.0) if bits else 1.0
        return {
            "Lambda_inf": self.Lambda_inf.tolist(),
            "K_Z_inf": self.K_Z_inf,
            "Sigma_inf": None if self.Sigma_inf is None else self.Sigma_inf.tolist(),
            "K_inf": None if self.K_inf is None else self.K_inf.tolist(),
            "feasible": self.feasible,
            "rate": self.rate * scale if self.feasible else None,
            "rate_unit": "bits/step" if bits else "nats/step",
            "power": self.power if self.feasible else None,
            "reasons": list(self.reasons),
            "noise_report": None if self.noise_report is None else self.noise_report.to_dict(),
            "input_report": None if self.input_report is None else self.input_report.to_dict(),
        }


def evaluate_point(
    r: PoSsRealization,
    Lambda,
    K_Z: float,
    kappa: Optional[float] = None,
    noise: Optional[NoiseAreResult] = None,
) -> AsymptoticPoint:
    """Feasibility, rate and power of a constant strategy."""
    _require_time_invariant(r)
    L = np.asarray(Lambda, dtype=float).reshape(-1)
    noise = noise or noise_are(r)
    if noise.status != "ok":
        return AsymptoticPoint(L, K_Z, None, None, False, noise.report, None, math.nan, math.nan,
                               ("noise-side equation has no stabilizing solution",))
    prob = input_problem(r, L, K_Z, noise)
    rep = classify(prob)
    sol = stabilizing_solution(prob)
    reasons = []
    if not rep.detectable:
        reasons.append("{A, Lambda + C} not detectable")
    if not rep.stabilizable:
        reasons.append("input pair not stabilizable")
    if rep.indeterminate:
        reasons.append("eigenvalue on the unit circle boundary: " + ", ".join(rep.indeterminate))
    if not sol.stabilizing:
        reasons.append("no stabilizing input-side solution")
    A, _, C, N, K_W = r.step(1)
    K = sol.P
    LC = L.reshape(1, -1) + C
    power = float(L @ K @ L) + K_Z
    num = (LC @ K @ LC.T).item() + noise.K_Ihat + K_Z
    rate = 0.5 * math.log(num / noise.K_Ihat)
    if kappa is not None and power > kappa:
        reasons.append("power exceeds the budget")
    feasible = not reasons
    return AsymptoticPoint(L, float(K_Z), noise.Sigma, K, feasible, noise.report, rep, rate, power, tuple(reasons))


def asymptotic_rate(pt: AsymptoticPoint) -> float:
    if not pt.feasible:
        raise EmptyFeasibleSet("rate is only defined for feasible points: " + "; ".join(pt.reasons))
    return pt.rate


def _scalar_grid(r: PoSsRealization, noise: NoiseAreResult, lam: np.ndarray, kz: np.ndarray, kappa: float):
    """Vectorized feasibility, rate and power for a scalar state."""
    A = float(r.A[0, 0, 0])
    C = float(r.C[0, 0, 0])
    m, k = float(noise.M[0]), float(noise.K_Ihat)
    L, KZ = np.meshgrid(lam, kz, indexing="ij")
    c = L + C
    R = k + KZ
    a_star = A - m * k / R * c
    b_star = k - k * k / R
    h = np.abs(m) * np.sqrt(np.clip(b_star, 0.0, None))
    tiny = 1e-12
    detectable = ~((abs(A) >= 1.0 - BOUNDARY_TOL) & (np.abs(c) <= tiny))
    stabilizable = ~((np.abs(a_star) >= 1.0 - BOUNDARY_TOL) & (h <= tiny))
    boundary = (np.abs(np.abs(a_star) - 1.0) < BOUNDARY_TOL) & (h <= tiny)
    boundary |= (abs(abs(A) - 1.0) < BOUNDARY_TOL) & (np.abs(c) <= tiny)
    # quadratic c^2 P^2 + c1 P + c0 = 0 with q0 = m^2 k, s0 = m k
    q0, s0 = m * m * k, m * k
    c2 = c * c
    c1 = R * (1.0 - A * A) - q0 * c2 + 2.0 * A * c * s0
    c0 = s0 * s0 - q0 * R
    lin = c2 == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = c1 * c1 - 4.0 * c2 * c0
        real = disc >= -1e-12 * np.maximum(1.0, c1 * c1)
        qq = -0.5 * (c1 + np.copysign(np.sqrt(np.clip(disc, 0.0, None)), c1))
        r1 = np.where(lin, -c0 / c1, qq / c2)
        r2 = np.where(lin | (qq == 0), np.nan, c0 / qq)
        cand = np.where(real | lin, np.stack([r1, r2]), np.nan)
        inner = R + c2 * cand
        f = A - (A * cand * c + s0) * c / inner
        ok = (inner > 1e-14) & (np.abs(f) < 1.0 - BOUNDARY_TOL) & (cand >= -1e-12)
    K = np.where(ok, cand, np.inf).min(axis=0)
    has = np.isfinite(K)
    K = np.where(has, np.clip(K, 0.0, None), np.nan)
    power = L * L * K + KZ
    rate = 0.5 * np.log((c2 * K + k + KZ) / k)
    feasible = detectable & stabilizable & ~boundary & has & (power <= kappa)
    return L, KZ, feasible, rate, power


@dataclass(frozen=True)
class AsymptoticOptions:
    grid: int = 201
    top_m: int = 5
    lambda_max: Optional[float] = None
    kz_floor: float = 0.0
    interior_floor: float = 1e-8


@dataclass(frozen=True)
class AsymptoticOptimum:
    best: Optional[AsymptoticPoint]
    status: str  # ok | empty
    grid_rows: List[tuple]
    lambda_bounds: tuple
    kz_bounds: tuple
    refinements: List[dict]

    @property
    def rate(self) -> float:
        if self.best is None:
            raise EmptyFeasibleSet("no feasible time-invariant strategy within the search box")
        return self.best.rate


def _point_scorer(r, noise, kappa):
    """(feasible, rate, power) of one point; vectorized closed form for scalar states."""
    if r.n_s == 1:
        def score(lam, z):
            _, _, f, x, p = _scalar_grid(r, noise, np.asarray(lam, dtype=float).reshape(1), np.array([z]), kappa)
            return bool(f[0, 0]), float(x[0, 0]), float(p[0, 0])
    else:
        def score(lam, z):
            pt = evaluate_point(r, lam, z, kappa, noise)
            return pt.feasible, pt.rate, pt.power
    return score


def _max_feasible_kz(point, L, kappa, lo: float) -> Optional[float]:
    """Largest K_Z in [lo, kappa] keeping the point feasible (bisection)."""
    def ok(z):
        return point(L, z)[0]

    if ok(kappa):
        return kappa
    if not ok(lo):
        return None
    a, b = lo, kappa
    for _ in range(200):
        mid = 0.5 * (a + b)
        if ok(mid):
            a = mid
        else:
            b = mid
        if b - a <= 1e-15 * max(1.0, kappa):
            break
    return a


def optimize_asymptotic(r: PoSsRealization, kappa: float, opts: Optional[AsymptoticOptions] = None) -> AsymptoticOptimum:
    """Grid scan over (Lambda, K_Z) followed by local refinement.

    The refinement runs Nelder-Mead over Lambda from the best grid points,
    with K_Z set to the largest feasible value under the budget; infeasible
    moves score minus infinity. Exact ties prefer the smallest |Lambda|.
    """
    _require_time_invariant(r)
    opts = opts or AsymptoticOptions()
    if kappa < 0:
        raise EmptyFeasibleSet("the power budget must be nonnegative")
    noise = noise_are(r)
    cmax = float(np.max(np.abs(r.C)))
    lmax = opts.lambda_max if opts.lambda_max is not None else 10.0 * (1.0 + cmax)
    lam_axis = np.linspace(-lmax, lmax, opts.grid)
    kz_axis = np.linspace(opts.kz_floor, kappa, opts.grid)
    if noise.status != "ok":
        return AsymptoticOptimum(None, "empty", [], (-lmax, lmax), (opts.kz_floor, kappa), [])
    ns = r.n_s
    rows = []
    if ns == 1:
        L, KZ, feas, rate, power = _scalar_grid(r, noise, lam_axis, kz_axis, kappa)
        for l, z, f, x, p in zip(L.ravel(), KZ.ravel(), feas.ravel(), rate.ravel(), power.ravel()):
            rows.append(((float(l),), float(z), bool(f), float(x) if f else math.nan, float(p) if f else math.nan))
    else:
        axes = np.meshgrid(*([lam_axis] * ns), indexing="ij")
        lams = np.stack([a.ravel() for a in axes], axis=1)
        for lam in lams:
            for z in kz_axis:
                pt = evaluate_point(r, lam, z, kappa, noise)
                rows.append((tuple(float(v) for v in lam), float(z), pt.feasible,
                             pt.rate if pt.feasible else math.nan, pt.power if pt.feasible else math.nan))
    feasible_rows = [row for row in rows if row[2]]
    if not feasible_rows:
        return AsymptoticOptimum(None, "empty", rows, (-lmax, lmax), (opts.kz_floor, kappa), [])

    def rank_key(rate, lam, z):
        return (-rate, float(np.sum(np.square(lam))), tuple(lam), z)

    ranked = sorted(feasible_rows, key=lambda row: rank_key(row[3], row[0], row[1]))
    seeds, seen = [], set()
    for row in ranked:
        if row[0] not in seen:
            seen.add(row[0])
            seeds.append(row)
        if len(seeds) == opts.top_m:
            break
    lo = max(opts.interior_floor, opts.kz_floor)
    point = _point_scorer(r, noise, kappa)

    def score(lam):
        if np.any(np.abs(lam) > lmax):
            return -math.inf, None
        z = _max_feasible_kz(point, lam, kappa, lo)
        if z is None:
            return -math.inf, None
        ok, rate, _ = point(lam, z)
        return (rate, z) if ok else (-math.inf, None)

    best = (ranked[0][3], np.array(ranked[0][0]), ranked[0][1])
    refinements = []
    step = 2.0 * lmax / max(opts.grid - 1, 1)
    for row in seeds:
        x0 = np.array(row[0], dtype=float)
        simplex = np.vstack([x0] + [x0 + step * e for e in np.eye(ns)])
        res = minimize(lambda x: min(-score(x)[0], 1e300), x0, method="Nelder-Mead",
                       options={"initial_simplex": simplex, "xatol": 1e-10, "fatol": 1e-14, "maxiter": 2000})
        val, z = score(res.x)
        refinements.append({"start": list(row[0]), "start_rate": row[3], "rate": val, "Lambda": res.x.tolist(), "K_Z": z})
        if z is not None and rank_key(val, res.x, z) < rank_key(best[0], best[1], best[2]):
            best = (val, res.x, z)
    best_pt = evaluate_point(r, best[1], best[2], kappa, noise)
    if not best_pt.feasible:
        # the general classification disagrees with the closed form; fall back to the grid winner
        best_pt = evaluate_point(r, np.array(ranked[0][0]), ranked[0][1], kappa, noise)
    return AsymptoticOptimum(best_pt, "ok", rows, (-lmax, lmax), (opts.kz_floor, kappa), refinements)
