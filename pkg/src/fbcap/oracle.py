"""Brute-force covariance oracles for small horizons.

Every random variable is represented as a row of coefficients over the
primitive Gaussian coordinates (S_1 - mu_S1, W_1..W_n, Z_1..Z_n). Conditional
means are computed by explicit least-squares projection, never through the
filter recursions, so these results serve as an independent check of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .filtering import InputStrategy
from .noise_models import PoSsRealization

LOGDET_FLOOR = 1e-300


def logdet(K: np.ndarray) -> float:
    """Log-determinant of a positive definite matrix via Cholesky."""
    L = np.linalg.cholesky(0.5 * (K + K.T))
    return 2.0 * float(np.sum(np.log(np.maximum(np.diag(L), LOGDET_FLOOR))))


def _initial_cov(r: PoSsRealization, formulation: str) -> np.ndarray:
    if formulation in ("case1_fixed_s", "case2"):
        return np.zeros((r.n_s, r.n_s))
    return r.initial_covariance()


def assemble_noise_covariance(r: PoSsRealization, n: int, K_S1=None) -> np.ndarray:
    """Covariance matrix of (V_1, ..., V_n) from the state covariance recursion."""
    if n > 64:
        raise ValueError("assemble_noise_covariance supports n <= 64")
    r.check_horizon(n)
    ns = r.n_s
    KS = [np.asarray(r.initial_covariance() if K_S1 is None else K_S1, dtype=float).reshape(ns, ns)]
    for t in range(1, n):
        A, B, _, _, K_W = r.step(t)
        KS.append(A @ KS[-1] @ A.T + B @ K_W @ B.T)
    K = np.empty((n, n))
    for tau in range(1, n + 1):
        A, B, C, N, K_W = r.step(tau)
        K[tau - 1, tau - 1] = (C @ KS[tau - 1] @ C.T + N @ K_W @ N.T).item()
        # cov(S_t, S_tau) and cov(S_t, W_tau) for t > tau, propagated forward
        cs = A @ KS[tau - 1]
        cw = B @ K_W
        for t in range(tau + 1, n + 1):
            Ct = r.step(t)[2]
            K[t - 1, tau - 1] = K[tau - 1, t - 1] = (Ct @ cs @ C.T + Ct @ cw @ N.T).item()
            At = r.step(t)[0]
            cs, cw = At @ cs, At @ cw
    return K


@dataclass(frozen=True)
class CoverPombraForm:
    """X^n = B V^n + Zbar^n with Zbar independent of V^n."""

    B: np.ndarray
    K_Zbar: np.ndarray
    K_V: np.ndarray
    residual: float = 0.0


class _Coordinates:
    def __init__(self, r: PoSsRealization, strat: InputStrategy, K_S1: np.ndarray):
        n, ns, nw = strat.n, r.n_s, r.n_w
        self.n, self.ns, self.nw = n, ns, nw
        blocks = [K_S1] + [r.step(t)[4] for t in range(1, n + 1)] + [np.array([[k]]) for k in strat.K_Z]
        self.omega = la.block_diag(*blocks)
        self.dim = self.omega.shape[0]

    def unit(self, start: int, size: int) -> np.ndarray:
        e = np.zeros((size, self.dim))
        e[:, start : start + size] = np.eye(size)
        return e

    def W(self, t: int) -> np.ndarray:
        return self.unit(self.ns + (t - 1) * self.nw, self.nw)

    def Z(self, t: int) -> np.ndarray:
        return self.unit(self.ns + self.n * self.nw + t - 1, 1)

    def cov(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        return X @ self.omega @ Y.T

    def project(self, target: np.ndarray, basis: np.ndarray) -> np.ndarray:
        """Rows of E[target | basis] (zero-mean linear projection)."""
        if basis.shape[0] == 0:
            return np.zeros_like(target)
        coeff = np.linalg.solve(self.cov(basis, basis), self.cov(basis, target)).T
        return coeff @ basis


def _expand(r: PoSsRealization, strat: InputStrategy, formulation: str):
    n = strat.n
    r.check_horizon(n)
    crd = _Coordinates(r, strat, _initial_cov(r, formulation))
    S = crd.unit(0, r.n_s)
    V_rows, X_rows, Y_rows = [], [], []
    for t in range(1, n + 1):
        A, B, C, N, _ = r.step(t)
        Vp = np.array(V_rows).reshape(-1, crd.dim)
        Yp = np.array(Y_rows).reshape(-1, crd.dim)
        if formulation == "case2":
            est = S
        else:
            est = crd.project(S, Vp)
        est_out = crd.project(est, Yp)
        X = strat.Lambda[t - 1 : t] @ (est - est_out) + crd.Z(t)
        V = C @ S + N @ crd.W(t)
        V_rows.append(V[0])
        X_rows.append(X[0])
        Y_rows.append((X + V)[0])
        S = A @ S + B @ crd.W(t)
    return crd, np.array(V_rows), np.array(X_rows), np.array(Y_rows)


def joint_covariances(r: PoSsRealization, strat: InputStrategy, formulation: str = "case1"):
    """(K_V^n, K_Y^n, K_X^n) for the closed-loop system."""
    crd, V, X, Y = _expand(r, strat, formulation)
    return crd.cov(V, V), crd.cov(Y, Y), crd.cov(X, X)


def oracle_rate(r: PoSsRealization, strat: InputStrategy, formulation: str = "case1") -> float:
    """(1/2n)(log|K_Y^n| - log|K_V^n|) in nats per step."""
    K_V, K_Y, _ = joint_covariances(r, strat, formulation)
    return 0.5 * (logdet(K_Y) - logdet(K_V)) / strat.n


def strategy_to_cover_pombra(r: PoSsRealization, strat: InputStrategy, formulation: str = "case1") -> CoverPombraForm:
    """Rewrite the sufficient-statistic input as X = B V + Zbar.

    Each X_t is regressed on V_1..V_{t-1} in the metric of the primitive
    coordinates; the remainder must be independent of V^n.
    """
    if strat.n > 32:
        raise ValueError("strategy_to_cover_pombra supports n <= 32")
    crd, V, X, _ = _expand(r, strat, formulation)
    n = strat.n
    w, U = np.linalg.eigh(crd.omega)
    root = U * np.sqrt(np.clip(w, 0.0, None))  # omega = root root^T
    noise_part = X.copy()
    noise_part[:, crd.ns + n * crd.nw :] = 0.0  # drop the Z coordinates
    target, Vw = noise_part @ root, V @ root
    Bmat = np.zeros((n, n))
    resid = float(np.linalg.norm(target[0]))
    for t in range(2, n + 1):
        coef, *_ = np.linalg.lstsq(Vw[: t - 1].T, target[t - 1], rcond=None)
        Bmat[t - 1, : t - 1] = coef
        resid = max(resid, float(np.linalg.norm(target[t - 1] - coef @ Vw[: t - 1])))
    if resid > 1e-8 * max(1.0, float(np.abs(target).max(initial=0.0))):
        raise ValueError(f"input is not a causal function of past noise samples (residual {resid:.3e})")
    Zbar = X - Bmat @ V
    return CoverPombraForm(Bmat, crd.cov(Zbar, Zbar), crd.cov(V, V), resid)


def cover_pombra_objective(form: CoverPombraForm) -> float:
    """0.5 log |(B + I) K_V (B + I)^T + K_Zbar| / |K_V|, total nats."""
    n = form.K_V.shape[0]
    BI = form.B + np.eye(n)
    return 0.5 * (logdet(BI @ form.K_V @ BI.T + form.K_Zbar) - logdet(form.K_V))


def cover_pombra_power(form: CoverPombraForm) -> float:
    """(1/n) tr(B K_V B^T + K_Zbar)."""
    n = form.K_V.shape[0]
    return float(np.trace(form.B @ form.K_V @ form.B.T + form.K_Zbar)) / n
