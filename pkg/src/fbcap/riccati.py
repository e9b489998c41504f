"""Generalized discrete Riccati equations and their structural tests.

The difference equation is

    P' = A P A^T + G Q G^T - (A P C^T + G S)(R + C P C^T)^{-1}(A P C^T + G S)^T

and its fixed points solve the algebraic equation. Convergence of the
iterates to the stabilizing fixed point is governed by detectability of
{A, C} and stabilizability of {A*, G B*^{1/2}} where A* = A - G S R^{-1} C and
B* = Q - S R^{-1} S^T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

BOUNDARY_TOL = 1e-9
RANK_TOL = 1e-9
INNER_GUARD = 1e-14


class RiccatiError(ArithmeticError):
    pass


def _mat(x) -> np.ndarray:
    m = np.asarray(x, dtype=float)
    if m.ndim == 0:
        return m.reshape(1, 1)
    if m.ndim == 1:
        return m.reshape(1, -1)
    return m


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def psd_sqrt(M: np.ndarray, clamp: float = 1e-12) -> np.ndarray:
    """Symmetric square root via eigendecomposition; clamps tiny negatives."""
    w, U = np.linalg.eigh(_sym(M))
    if w.size and w.min() < -clamp * max(1.0, abs(w).max()):
        raise RiccatiError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    return (U * np.sqrt(np.clip(w, 0.0, None))) @ U.T


@dataclass(frozen=True)
class RiccatiProblem:
    A: np.ndarray
    G: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray
    C: np.ndarray

    def __post_init__(self) -> None:
        for name in ("A", "G", "Q", "S", "R", "C"):
            object.__setattr__(self, name, _mat(getattr(self, name)))
        q, k, p = self.A.shape[0], self.G.shape[1], self.R.shape[0]
        shapes = {"A": (q, q), "G": (q, k), "Q": (k, k), "S": (k, p), "R": (p, p), "C": (p, q)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {getattr(self, name).shape}")
        if not np.allclose(self.Q, self.Q.T, atol=1e-12):
            raise ValueError("Q must be symmetric")
        if not np.allclose(self.R, self.R.T, atol=1e-12) or np.linalg.eigvalsh(_sym(self.R)).min() <= 0:
            raise ValueError("R must be symmetric positive definite")

    @property
    def q(self) -> int:
        return self.A.shape[0]

    @property
    def A_star(self) -> np.ndarray:
        return self.A - self.G @ self.S @ np.linalg.solve(self.R, self.C)

    @property
    def B_star(self) -> np.ndarray:
        return _sym(self.Q - self.S @ np.linalg.solve(self.R, self.S.T))


def _inner(prob: RiccatiProblem, P: np.ndarray) -> np.ndarray:
    inner = prob.R + prob.C @ P @ prob.C.T
    if np.linalg.eigvalsh(_sym(inner)).min() <= INNER_GUARD:
        raise RiccatiError("R + C P C^T is not positive definite")
    return inner


def dre_step(prob: RiccatiProblem, P) -> np.ndarray:
    """One step of the difference equation, symmetrized."""
    P = _mat(P)
    A, G, C = prob.A, prob.G, prob.C
    cross = A @ P @ C.T + G @ prob.S
    nxt = A @ P @ A.T + G @ prob.Q @ G.T - cross @ np.linalg.solve(_inner(prob, P), cross.T)
    return _sym(nxt)


def gare_residual(prob: RiccatiProblem, P) -> float:
    P = _mat(P)
    return float(np.max(np.abs(dre_step(prob, P) - P)))


def closed_loop(prob: RiccatiProblem, P) -> np.ndarray:
    """F^CL(P) = A - (A P C^T + G S)(R + C P C^T)^{-1} C."""
    P = _mat(P)
    cross = prob.A @ P @ prob.C.T + prob.G @ prob.S
    return prob.A - cross @ np.linalg.solve(_inner(prob, P), prob.C)


def _spectrum(F: np.ndarray) -> List[complex]:
    return [complex(z) for z in np.linalg.eigvals(F)]


@dataclass(frozen=True)
class StructuralReport:
    A_star: np.ndarray
    B_star: np.ndarray
    detectable: bool
    unit_circle_controllable: bool
    stabilizable: bool
    indeterminate: Tuple[str, ...] = ()
    witnesses: Tuple[dict, ...] = ()

    def to_dict(self) -> dict:
        return {
            "A_star": self.A_star.tolist(),
            "B_star": self.B_star.tolist(),
            "detectable": self.detectable,
            "unit_circle_controllable": self.unit_circle_controllable,
            "stabilizable": self.stabilizable,
            "indeterminate": list(self.indeterminate),
            "witnesses": list(self.witnesses),
        }


def _complex_pair(z: complex) -> list:
    return [float(z.real), float(z.imag)]


def _unobservable(M: np.ndarray, H: np.ndarray, lam: complex, left: bool):
    """Return a null vector if the PBH rank test fails at ``lam``, else None.

    right test: [M - lam I; H] x = 0.  left test: x^T [M - lam I, H] = 0.
    """
    q = M.shape[0]
    shifted = M - lam * np.eye(q)
    stack = np.hstack([shifted, H]) if left else np.vstack([shifted, H])
    if left:
        stack = stack.conj().T
    _, s, Vh = np.linalg.svd(stack)
    smin = s[-1] if s.size >= q else 0.0
    if smin <= RANK_TOL * max(1.0, s[0] if s.size else 0.0):
        return Vh[-1].conj()
    return None


def _pbh(M: np.ndarray, H: np.ndarray, left: bool, unit_circle_only: bool):
    """Run the PBH test over eigenvalues of M in the relevant region.

    Returns (passes, boundary_hit, witnesses).
    """
    passes, boundary, wits = True, False, []
    for lam in np.linalg.eigvals(M):
        mag = abs(lam)
        on_circle = abs(mag - 1.0) < BOUNDARY_TOL
        if unit_circle_only and not on_circle:
            continue
        if not unit_circle_only and mag < 1.0 - BOUNDARY_TOL:
            continue
        vec = _unobservable(M, H, complex(lam), left)
        if vec is not None:
            passes = False
            boundary = boundary or on_circle
            wits.append({"eigenvalue": _complex_pair(complex(lam)), "vector": [_complex_pair(complex(v)) for v in vec]})
    return passes, boundary, wits


def classify(prob: RiccatiProblem) -> StructuralReport:
    """PBH classification of {A, C} and {A*, G B*^{1/2}}."""
    A_star, B_star = prob.A_star, prob.B_star
    H = prob.G @ psd_sqrt(B_star)
    det, det_b, det_w = _pbh(prob.A, prob.C, left=False, unit_circle_only=False)
    ucc, ucc_b, ucc_w = _pbh(A_star, H, left=True, unit_circle_only=True)
    stab, stab_b, stab_w = _pbh(A_star, H, left=True, unit_circle_only=False)
    indeterminate = tuple(
        name
        for name, hit in (("detectable", det_b), ("unit_circle_controllable", ucc_b), ("stabilizable", stab_b))
        if hit
    )
    witnesses = tuple(
        [dict(w, test="detectable") for w in det_w]
        + [dict(w, test="unit_circle_controllable") for w in ucc_w]
        + [dict(w, test="stabilizable") for w in stab_w]
    )
    return StructuralReport(A_star, B_star, det, ucc, stab, indeterminate, witnesses)


@dataclass(frozen=True)
class ScalarRoot:
    value: float
    admissible: bool  # R + C P C^T > 0
    stabilizing: bool
    closed_loop: Optional[float]


def scalar_are_roots(prob: RiccatiProblem) -> List[ScalarRoot]:
    """All real roots of the scalar algebraic equation (q = p = 1)."""
    if prob.q != 1 or prob.R.shape != (1, 1):
        raise ValueError("closed-form roots need a scalar state and output")
    a, c = float(prob.A[0, 0]), float(prob.C[0, 0])
    r = float(prob.R[0, 0])
    q0 = float((prob.G @ prob.Q @ prob.G.T)[0, 0])
    s0 = float((prob.G @ prob.S)[0, 0])
    c2 = c * c
    c1 = r * (1.0 - a * a) - q0 * c2 + 2.0 * a * c * s0
    c0 = s0 * s0 - q0 * r
    if c2 == 0.0:
        roots = [] if c1 == 0.0 else [-c0 / c1]
    else:
        disc = c1 * c1 - 4.0 * c2 * c0
        if disc < 0.0:
            if disc > -1e-12 * max(1.0, c1 * c1):
                disc = 0.0
            else:
                return []
        qq = -0.5 * (c1 + math.copysign(math.sqrt(disc), c1))
        roots = [qq / c2] if qq == 0.0 else [qq / c2, c0 / qq]
        if disc == 0.0:
            roots = [roots[0]]
    out = []
    for P in sorted(roots):
        inner = r + c2 * P
        if inner > INNER_GUARD:
            f = a - (a * P * c + s0) * c / inner
            out.append(ScalarRoot(P, True, abs(f) < 1.0 - BOUNDARY_TOL, f))
        else:
            out.append(ScalarRoot(P, False, False, None))
    return out


@dataclass(frozen=True)
class AreSolution:
    P: np.ndarray
    residual: float
    closed_loop_spectrum: Tuple[complex, ...]
    stabilizing: bool
    status: str  # converged | diverged | max_iters | closed_form
    iterations: int = 0
    scalar_roots: Tuple[ScalarRoot, ...] = ()
    report: Optional[StructuralReport] = None
    ambiguous: bool = False
    notes: Tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "P": self.P.tolist(),
            "residual": self.residual,
            "closed_loop_spectrum": [_complex_pair(z) for z in self.closed_loop_spectrum],
            "stabilizing": self.stabilizing,
            "status": self.status,
            "iterations": self.iterations,
            "scalar_roots": [
                {"value": r.value, "admissible": r.admissible, "stabilizing": r.stabilizing, "closed_loop": r.closed_loop}
                for r in self.scalar_roots
            ],
            "report": None if self.report is None else self.report.to_dict(),
            "ambiguous": self.ambiguous,
            "notes": list(self.notes),
        }


def _is_stabilizing(prob: RiccatiProblem, P: np.ndarray):
    try:
        spec = _spectrum(closed_loop(prob, P))
    except (RiccatiError, np.linalg.LinAlgError):
        return (), False
    return tuple(spec), all(abs(z) < 1.0 - BOUNDARY_TOL for z in spec)


def _failure_notes(report: StructuralReport) -> Tuple[str, ...]:
    notes = []
    if not report.detectable:
        notes.append("{A, C} is not detectable")
    if not report.stabilizable:
        notes.append("{A*, G B*^(1/2)} is not stabilizable")
    if not report.unit_circle_controllable:
        notes.append("{A*, G B*^(1/2)} has an uncontrollable mode on the unit circle")
    for name in report.indeterminate:
        notes.append(f"{name}: eigenvalue within {BOUNDARY_TOL:g} of the unit circle")
    return tuple(notes)


def are_solve(
    prob: RiccatiProblem,
    P1=None,
    tol: float = 1e-12,
    max_iters: int = 100_000,
    growth_limit: float = 1e12,
) -> AreSolution:
    """Iterate the difference equation from ``P1`` (default zero)."""
    P = np.zeros((prob.q, prob.q)) if P1 is None else _sym(_mat(P1))
    start_norm = float(np.max(np.abs(P))) if P.size else 0.0
    status, it = "max_iters", 0
    for it in range(1, max_iters + 1):
        try:
            nxt = dre_step(prob, P)
        except RiccatiError:
            status = "diverged"
            break
        step = float(np.max(np.abs(nxt - P)))
        P = nxt
        if not np.isfinite(P).all() or np.max(np.abs(P)) > growth_limit * (1.0 + start_norm):
            status = "diverged"
            break
        if step < tol:
            status = "converged"
            break
    report = classify(prob)
    spec, stab = _is_stabilizing(prob, P) if np.isfinite(P).all() else ((), False)
    try:
        resid = gare_residual(prob, P)
    except (RiccatiError, np.linalg.LinAlgError):
        resid = math.inf
    roots: Tuple[ScalarRoot, ...] = ()
    if prob.q == 1 and prob.R.shape == (1, 1):
        roots = tuple(scalar_are_roots(prob))
    notes = () if status == "converged" else _failure_notes(report)
    if status == "diverged":
        notes = notes + (f"iterate grew beyond {growth_limit:g} after {it} steps",)
    return AreSolution(P, resid, spec, stab and status == "converged", status, it, roots, report, False, notes)


def stabilizing_solution(prob: RiccatiProblem, tol: float = 1e-12, max_iters: int = 100_000) -> AreSolution:
    """Stabilizing fixed point: closed form for scalars, iteration otherwise.

    When several candidates qualify the smallest trace wins and the result is
    flagged ambiguous.
    """
    if prob.q == 1 and prob.R.shape == (1, 1):
        roots = scalar_are_roots(prob)
        good = [r for r in roots if r.stabilizing and r.value >= -1e-12]
        report = classify(prob)
        if not good:
            P = np.zeros((1, 1))
            return AreSolution(P, math.inf, (), False, "no_stabilizing_root", 0, tuple(roots), report, False, _failure_notes(report))
        best = min(good, key=lambda r: r.value)
        P = np.array([[max(best.value, 0.0)]])
        spec, stab = _is_stabilizing(prob, P)
        return AreSolution(P, gare_residual(prob, P), spec, stab, "closed_form", 0, tuple(roots), report, len(good) > 1)
    return are_solve(prob, None, tol, max_iters)


def predict_convergence(prob: RiccatiProblem, P1=None) -> Tuple[str, Optional[int]]:
    """Prediction for the iterates from ``P1`` and the hypothesis case used.

    Returns ("converges_to_stabilizing", case) or ("no_prediction", None).
    """
    report = classify(prob)
    if report.indeterminate:
        return "no_prediction", None
    zero_start = P1 is None or not np.any(_mat(P1))
    if report.detectable and report.stabilizable:
        if zero_start and report.unit_circle_controllable:
            return "converges_to_stabilizing", 1
        return "converges_to_stabilizing", 3
    return "no_prediction", None
