"""Kalman recursions of the noise process and of the channel output.

The noise filter estimates the noise state from past noise samples. The
output filter estimates the noise-filter state from past channel outputs
when the input is ``X_t = Lambda_t (Shat_t - Shathat_t) + Z_t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .noise_models import PoSsRealization

SCALAR_GUARD = 1e-14
SIM_CHUNK = 8192


class FilterError(ArithmeticError):
    pass


def _sym(P):
    return 0.5 * (P + P.T)


def _guard(value: float, what: str, t: int) -> float:
    if not value > SCALAR_GUARD:
        raise FilterError(f"{what} is not positive at step {t} ({value:.3e})")
    return value


@dataclass(frozen=True)
class NoiseFilterTrajectory:
    Sigma: np.ndarray  # (n, n_s, n_s)
    M: np.ndarray  # (n, n_s)
    K_Ihat: np.ndarray  # (n,)

    @property
    def n(self) -> int:
        return len(self.K_Ihat)


@dataclass(frozen=True)
class InputStrategy:
    """Per-step feedback gains Lambda_t (rows) and innovation variances K_Z_t."""

    Lambda: np.ndarray  # (n, n_s)
    K_Z: np.ndarray  # (n,)

    def __post_init__(self) -> None:
        K_Z = np.array(self.K_Z, dtype=float).reshape(-1)
        L = np.array(self.Lambda, dtype=float)
        if L.ndim == 1:
            # a flat list holds one scalar gain per step
            L = L.reshape(-1, 1) if L.size == len(K_Z) else L.reshape(len(K_Z), -1)
        if L.ndim != 2 or L.shape[0] != len(K_Z):
            raise ValueError("Lambda must have one row per step")
        if np.any(K_Z < 0):
            raise ValueError("K_Z must be nonnegative")
        L.setflags(write=False)
        K_Z.setflags(write=False)
        object.__setattr__(self, "Lambda", L)
        object.__setattr__(self, "K_Z", K_Z)

    @classmethod
    def constant(cls, Lambda, K_Z: float, n: int) -> "InputStrategy":
        row = np.asarray(Lambda, dtype=float).reshape(1, -1)
        return cls(np.repeat(row, n, axis=0), np.full(n, float(K_Z)))

    @property
    def n(self) -> int:
        return len(self.K_Z)

    def to_dict(self) -> dict:
        return {"Lambda": self.Lambda.tolist(), "K_Z": self.K_Z.tolist()}


@dataclass(frozen=True)
class OutputFilterTrajectory:
    K: np.ndarray  # (n, n_s, n_s)
    F: np.ndarray  # (n, n_s)
    K_I: np.ndarray  # (n,)
    power: np.ndarray  # (n,) per-step input power

    @property
    def n(self) -> int:
        return len(self.K_I)


def noise_filter(r: PoSsRealization, n: int, sigma1=None) -> NoiseFilterTrajectory:
    """Error covariances, gains and innovation variances of the noise filter.

    ``sigma1`` overrides the initial error covariance (default: zero for a
    known initial state, K_S1 otherwise).
    """
    r.check_horizon(n)
    ns = r.n_s
    Sigma = r.initial_covariance() if sigma1 is None else np.asarray(sigma1, dtype=float).reshape(ns, ns)
    Sig = np.empty((n, ns, ns))
    M = np.empty((n, ns))
    KI = np.empty(n)
    for t in range(1, n + 1):
        A, B, C, N, K_W = r.step(t)
        k = _guard((C @ Sigma @ C.T + N @ K_W @ N.T).item(), "C Sigma C^T + N K_W N^T", t)
        cross = A @ Sigma @ C.T + B @ K_W @ N.T
        Sig[t - 1], M[t - 1], KI[t - 1] = Sigma, cross[:, 0] / k, k
        Sigma = _sym(A @ Sigma @ A.T + B @ K_W @ B.T - (cross @ cross.T) / k)
    return NoiseFilterTrajectory(Sig, M, KI)


def noise_entropy(traj: NoiseFilterTrajectory) -> float:
    """Differential entropy of V^n in nats, as the sum of innovation entropies."""
    if np.any(traj.K_Ihat <= 0):
        raise FilterError("innovation variance must be positive")
    return 0.5 * float(np.sum(np.log(2.0 * math.pi * math.e * traj.K_Ihat)))


def _check_strategy(r: PoSsRealization, strat: InputStrategy, n: int) -> None:
    if strat.Lambda.shape != (n, r.n_s):
        raise ValueError(f"strategy must have shape ({n}, {r.n_s}) for Lambda, got {strat.Lambda.shape}")


def output_filter(r: PoSsRealization, strat: InputStrategy, noise: NoiseFilterTrajectory) -> OutputFilterTrajectory:
    """Error covariance of the output-side estimate of the noise-filter state."""
    n = strat.n
    if noise.n != n:
        raise ValueError(f"noise trajectory has {noise.n} steps, strategy has {n}")
    _check_strategy(r, strat, n)
    ns = r.n_s
    K = np.zeros((ns, ns))
    Ks, Fs, KI, power = np.empty((n, ns, ns)), np.empty((n, ns)), np.empty(n), np.empty(n)
    for t in range(1, n + 1):
        A, _, C, _, _ = r.step(t)
        L = strat.Lambda[t - 1 : t]
        LC = L + C
        Kd, Mt = noise.K_Ihat[t - 1], noise.M[t - 1].reshape(ns, 1)
        k = _guard((LC @ K @ LC.T).item() + Kd + strat.K_Z[t - 1], "output innovation variance", t)
        cross = A @ K @ LC.T + Mt * Kd
        Ks[t - 1], Fs[t - 1], KI[t - 1] = K, cross[:, 0] / k, k
        power[t - 1] = (L @ K @ L.T).item() + strat.K_Z[t - 1]
        K = _sym(A @ K @ A.T + Kd * (Mt @ Mt.T) - (cross @ cross.T) / k)
    return OutputFilterTrajectory(Ks, Fs, KI, power)


def state_feedback_filter(r: PoSsRealization, strat: InputStrategy) -> OutputFilterTrajectory:
    """Output-side recursion when the input uses the true state S_t.

    Applies when the initial state is known and the realization is
    invertible, so the noise filter error is identically zero.
    """
    n = strat.n
    r.check_horizon(n)
    _check_strategy(r, strat, n)
    ns = r.n_s
    K = np.zeros((ns, ns))
    Ks, Fs, KI, power = np.empty((n, ns, ns)), np.empty((n, ns)), np.empty(n), np.empty(n)
    for t in range(1, n + 1):
        A, B, C, N, K_W = r.step(t)
        L = strat.Lambda[t - 1 : t]
        LC = L + C
        R = (N @ K_W @ N.T).item()
        k = _guard((LC @ K @ LC.T).item() + R + strat.K_Z[t - 1], "output innovation variance", t)
        cross = A @ K @ LC.T + B @ K_W @ N.T
        Ks[t - 1], Fs[t - 1], KI[t - 1] = K, cross[:, 0] / k, k
        power[t - 1] = (L @ K @ L.T).item() + strat.K_Z[t - 1]
        K = _sym(A @ K @ A.T + B @ K_W @ B.T - (cross @ cross.T) / k)
    return OutputFilterTrajectory(Ks, Fs, KI, power)


def trajectory_table(noise: NoiseFilterTrajectory, out: Optional[OutputFilterTrajectory] = None):
    """Header and rows for a CSV dump of the filter trajectories."""
    ns = noise.Sigma.shape[1]
    cells = [f"{i}{j}" for i in range(1, ns + 1) for j in range(1, ns + 1)]
    header = ["t"] + [f"Sigma_{c}" for c in cells] + [f"M_{i}" for i in range(1, ns + 1)] + ["K_Ihat"]
    if out is not None:
        header += [f"K_{c}" for c in cells] + [f"F_{i}" for i in range(1, ns + 1)] + ["K_I", "power"]
    rows = []
    for t in range(noise.n):
        row = [t + 1] + noise.Sigma[t].ravel().tolist() + noise.M[t].tolist() + [float(noise.K_Ihat[t])]
        if out is not None:
            row += out.K[t].ravel().tolist() + out.F[t].tolist() + [float(out.K_I[t]), float(out.power[t])]
        rows.append(row)
    return header, rows


@dataclass(frozen=True)
class SimulatedPaths:
    """Sampled closed-loop trajectories, arrays indexed (path, t[, component])."""

    S: np.ndarray
    S_hat: np.ndarray
    S_hathat: np.ndarray
    V: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    I_hat: np.ndarray
    I: np.ndarray
    Z: np.ndarray


def _psd_factor(K: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(_sym(np.atleast_2d(K)))
    return U * np.sqrt(np.clip(w, 0.0, None))


def simulate_paths(
    r: PoSsRealization,
    strat: InputStrategy,
    seed: int,
    n_paths: int,
    formulation: str = "case1",
    n: Optional[int] = None,
) -> SimulatedPaths:
    """Monte-Carlo sample of the closed-loop system.

    Paths are generated in fixed-size chunks, each from its own child seed,
    so the sample depends only on ``seed`` and ``n_paths``.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    n = strat.n if n is None else n
    if n != strat.n:
        raise ValueError("strategy horizon does not match n")
    r.check_horizon(n)
    _check_strategy(r, strat, n)
    if formulation == "case2":
        gains = state_feedback_filter(r, strat).F
        noise = noise_filter(r, n, sigma1=np.zeros((r.n_s, r.n_s)))
    else:
        if formulation == "case1_fixed_s":
            noise = noise_filter(r, n, sigma1=np.zeros((r.n_s, r.n_s)))
        else:
            noise = noise_filter(r, n)
        gains = output_filter(r, strat, noise).F
    known_state = formulation in ("case1_fixed_s", "case2") or r.initial_state == "fixed"
    init_factor = _psd_factor(r.K_S1)
    children = np.random.SeedSequence(seed).spawn((n_paths + SIM_CHUNK - 1) // SIM_CHUNK)
    parts = []
    for i, child in enumerate(children):
        m = min(SIM_CHUNK, n_paths - i * SIM_CHUNK)
        parts.append(_simulate_chunk(r, strat, noise, gains, np.random.default_rng(child), m, n, known_state,
                                     formulation == "case2", init_factor))
    return SimulatedPaths(*[np.concatenate([p[k] for p in parts]) for k in range(9)])


def _simulate_chunk(r, strat, noise, gains, rng, m, n, known_state, true_state, init_factor):
    ns, nw = r.n_s, r.n_w
    mu = np.asarray(r.mu_S1)
    S = np.broadcast_to(mu, (m, ns)).copy()
    if not known_state:
        S += rng.standard_normal((m, ns)) @ init_factor.T
    S_hat = np.broadcast_to(mu, (m, ns)).copy()
    S_hh = S_hat.copy()
    rec = {k: np.empty((m, n, ns)) for k in ("S", "S_hat", "S_hh")}
    scal = {k: np.empty((m, n)) for k in ("V", "X", "Y", "I_hat", "I", "Z")}
    for t in range(1, n + 1):
        A, B, C, N, K_W = r.step(t)
        W = rng.standard_normal((m, nw)) @ _psd_factor(K_W).T
        Z = math.sqrt(strat.K_Z[t - 1]) * rng.standard_normal(m)
        V = S @ C[0] + W @ N[0]
        I_hat = V - S_hat @ C[0]
        est = S if true_state else S_hat
        X = (est - S_hh) @ strat.Lambda[t - 1] + Z
        Y = X + V
        I = Y - S_hh @ C[0]
        rec["S"][:, t - 1], rec["S_hat"][:, t - 1], rec["S_hh"][:, t - 1] = S, S_hat, S_hh
        for k, v in (("V", V), ("X", X), ("Y", Y), ("I_hat", I_hat), ("I", I), ("Z", Z)):
            scal[k][:, t - 1] = v
        S = S @ A.T + W @ B.T
        S_hat = S_hat @ A.T + np.outer(I_hat, noise.M[t - 1])
        S_hh = S_hh @ A.T + np.outer(I, gains[t - 1])
    return (rec["S"], rec["S_hat"], rec["S_hh"], scal["V"], scal["X"], scal["Y"], scal["I_hat"], scal["I"], scal["Z"])


def path_statistics(paths: SimulatedPaths, K_Ihat: np.ndarray, K_I: np.ndarray, power: np.ndarray, max_lag: int = 5):
    """Sample moments of simulated paths against their analytic values.

    Each entry carries the estimate, the analytic value and the standard error
    of the estimator, so callers can test |estimate - value| <= k * se.
    """
    m, n = paths.I.shape
    out = {"variance_I": [], "variance_I_hat": [], "power": [], "correlation_I": [], "correlation_I_hat": []}
    for t in range(n):
        for key, sample, value in (("variance_I", paths.I[:, t], K_I[t]), ("variance_I_hat", paths.I_hat[:, t], K_Ihat[t])):
            est = float(np.mean(sample * sample))
            out[key].append({"t": t + 1, "estimate": est, "value": float(value), "se": float(value) * math.sqrt(2.0 / m)})
        x2 = paths.X[:, t] ** 2
        out["power"].append({"t": t + 1, "estimate": float(np.mean(x2)), "value": float(power[t]),
                             "se": float(np.std(x2, ddof=1)) / math.sqrt(m)})
    for key, series in (("correlation_I", paths.I), ("correlation_I_hat", paths.I_hat)):
        for lag in range(1, max_lag + 1):
            for t in range(lag, n):
                a, b = series[:, t], series[:, t - lag]
                rho = float(np.mean(a * b) / math.sqrt(np.mean(a * a) * np.mean(b * b)))
                out[key].append({"t": t + 1, "lag": lag, "estimate": rho, "value": 0.0, "se": 1.0 / math.sqrt(m)})
    return out
