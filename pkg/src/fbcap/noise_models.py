"""Noise realizations for additive Gaussian noise channels.

A partially-observable state-space (PO-SS) realization generates the noise as

    S_{t+1} = A_t S_t + B_t W_t,    V_t = C_t S_t + N_t W_t,

with W_t white Gaussian of covariance K_W_t and S_1 ~ N(mu_S1, K_S1).
The scalar-output ARMA(a, c) family and a two-input PO-SS family are provided
as constructors on top of the general realization.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

PSD_TOL = 1e-12
ARMA_GAP_TOL = 1e-10

MatrixLike = Union[float, Sequence, np.ndarray]


class RealizationError(ValueError):
    """Raised when a realization violates its structural invariants."""


def validate_psd(M: np.ndarray, name: str, tol: float = PSD_TOL) -> np.ndarray:
    """Symmetrize ``M``, reject eigenvalues below ``-tol`` and clamp the rest."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise RealizationError(f"{name} must be square, got shape {M.shape}")
    M = 0.5 * (M + M.T)
    if M.size == 0:
        return M
    w, U = np.linalg.eigh(M)
    if w.min() < -tol:
        raise RealizationError(f"{name} is not positive semidefinite (min eigenvalue {w.min():.3e})")
    if w.min() < 0.0:
        M = (U * np.clip(w, 0.0, None)) @ U.T
        M = 0.5 * (M + M.T)
    return M


def _as_matrix(x: MatrixLike) -> np.ndarray:
    m = np.asarray(x, dtype=float)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise RealizationError(f"expected a matrix, got array of shape {m.shape}")
    return m


def _stack(x, steps: int, name: str) -> np.ndarray:
    """Per-step values are 3-D arrays; anything of lower rank is broadcast."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 3:
        if arr.shape[0] != steps:
            raise RealizationError(f"{name} has {arr.shape[0]} steps, expected {steps}")
        return arr.copy()
    m = _as_matrix(x)
    return np.broadcast_to(m, (steps,) + m.shape).copy()


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PoSsRealization:
    """A PO-SS noise realization with scalar output.

    Per-step matrices are stored as arrays with a leading step axis. A
    time-invariant realization (``horizon is None``) stores a single step
    that is reused for every t.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    N: np.ndarray
    K_W: np.ndarray
    mu_S1: np.ndarray
    K_S1: np.ndarray
    horizon: Optional[int] = None
    initial_state: str = "distributional"

    def __post_init__(self) -> None:
        steps = 1 if self.horizon is None else int(self.horizon)
        if steps < 1:
            raise RealizationError("horizon must be a positive integer")
        A = _stack(self.A, steps, "A")
        B = _stack(self.B, steps, "B")
        C = _stack(self.C, steps, "C")
        N = _stack(self.N, steps, "N")
        K_W = _stack(self.K_W, steps, "K_W")
        ns = A.shape[1]
        nw = K_W.shape[1]
        if A.shape[1:] != (ns, ns):
            raise RealizationError(f"A must be square, got {A.shape[1:]}")
        if B.shape[1:] == (nw, ns) and nw == 1:
            B = np.swapaxes(B, 1, 2)  # a flat list given for a single noise input
        if B.shape[1:] != (ns, nw):
            raise RealizationError(f"B must be {ns}x{nw}, got {B.shape[1:]}")
        if C.shape[1:] != (1, ns):
            raise RealizationError(f"C must be 1x{ns}, got {C.shape[1:]}")
        if N.shape[1:] != (1, nw):
            raise RealizationError(f"N must be 1x{nw}, got {N.shape[1:]}")
        for t in range(steps):
            K_W[t] = validate_psd(K_W[t], f"K_W[{t + 1}]")
            R = (N[t] @ K_W[t] @ N[t].T).item()
            if not R > 0.0:
                raise RealizationError(f"N K_W N^T must be positive at step {t + 1}, got {R:.3e}")
        mu = np.zeros(ns) if self.mu_S1 is None else np.asarray(self.mu_S1, dtype=float).reshape(-1)
        if mu.shape != (ns,):
            raise RealizationError(f"mu_S1 must have length {ns}")
        K_S1 = np.zeros((ns, ns)) if self.K_S1 is None else _as_matrix(self.K_S1)
        if K_S1.shape != (ns, ns):
            raise RealizationError(f"K_S1 must be {ns}x{ns}")
        K_S1 = validate_psd(K_S1, "K_S1")
        if self.initial_state not in ("distributional", "fixed"):
            raise RealizationError("initial_state must be 'distributional' or 'fixed'")
        for name, val in (("A", A), ("B", B), ("C", C), ("N", N), ("K_W", K_W), ("mu_S1", mu), ("K_S1", K_S1)):
            object.__setattr__(self, name, _readonly(val))
        if self.horizon is not None:
            object.__setattr__(self, "horizon", steps)

    @classmethod
    def build(
        cls,
        A: MatrixLike,
        B: MatrixLike,
        C: MatrixLike,
        N: MatrixLike,
        K_W: MatrixLike,
        mu_S1: Optional[MatrixLike] = None,
        K_S1: Optional[MatrixLike] = None,
        horizon: Optional[int] = None,
        initial_state: str = "distributional",
    ) -> "PoSsRealization":
        return cls(A, B, C, N, K_W, mu_S1, K_S1, horizon, initial_state)

    @property
    def n_s(self) -> int:
        return self.A.shape[1]

    @property
    def n_w(self) -> int:
        return self.K_W.shape[1]

    @property
    def time_invariant(self) -> bool:
        return self.horizon is None

    def check_horizon(self, n: int) -> None:
        if n < 1:
            raise RealizationError("horizon must be at least 1")
        if self.horizon is not None and n > self.horizon:
            raise RealizationError(f"realization defined for {self.horizon} steps, requested {n}")

    def step(self, t: int):
        """Matrices (A_t, B_t, C_t, N_t, K_W_t) for the 1-based time index t."""
        i = 0 if self.horizon is None else min(t, self.horizon) - 1
        return self.A[i], self.B[i], self.C[i], self.N[i], self.K_W[i]

    def noise_variance(self, t: int) -> float:
        _, _, _, N, K_W = self.step(t)
        return (N @ K_W @ N.T).item()

    def initial_covariance(self) -> np.ndarray:
        """Initial filter error covariance: zero when the initial state is known."""
        if self.initial_state == "fixed":
            return np.zeros((self.n_s, self.n_s))
        return np.array(self.K_S1)

    def with_initial(self, mu_S1=None, K_S1=None, initial_state: Optional[str] = None) -> "PoSsRealization":
        return replace(
            self,
            mu_S1=self.mu_S1 if mu_S1 is None else mu_S1,
            K_S1=self.K_S1 if K_S1 is None else K_S1,
            initial_state=self.initial_state if initial_state is None else initial_state,
        )

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": self.C.tolist(),
            "N": self.N.tolist(),
            "K_W": self.K_W.tolist(),
            "mu_S1": self.mu_S1.tolist(),
            "K_S1": self.K_S1.tolist(),
            "horizon": self.horizon,
            "initial_state": self.initial_state,
        }


@dataclass(frozen=True)
class ArmaParams:
    """One-sided ARMA(a, c) noise V_t = c V_{t-1} + W_t - a W_{t-1}."""

    a: float
    c: float
    K_W: float
    K_V0: float = 0.0
    K_W0: float = 0.0

    def __post_init__(self) -> None:
        if not self.K_W > 0:
            raise RealizationError("K_W must be positive")
        if self.K_V0 < 0 or self.K_W0 < 0:
            raise RealizationError("K_V0 and K_W0 must be nonnegative")

    def check_distinct(self) -> None:
        if abs(self.c - self.a) < ARMA_GAP_TOL:
            raise RealizationError(f"ARMA requires c != a (|c - a| = {abs(self.c - self.a):.3e})")

    @property
    def initial_state_variance(self) -> float:
        self.check_distinct()
        return (self.c**2 * self.K_V0 + self.a**2 * self.K_W0) / (self.c - self.a) ** 2


def arma_to_poss(
    p: ArmaParams,
    horizon: Optional[int] = None,
    initial_state: str = "distributional",
    s: float = 0.0,
) -> PoSsRealization:
    """Realization with state S_t = (c V_{t-1} - a W_{t-1}) / (c - a).

    ``A = c, B = 1, C = c - a, N = 1``. With ``initial_state="fixed"`` the
    state value ``s`` is treated as known to encoder and decoder.
    """
    p.check_distinct()
    return PoSsRealization.build(
        A=p.c,
        B=1.0,
        C=p.c - p.a,
        N=1.0,
        K_W=p.K_W,
        mu_S1=[s],
        K_S1=p.initial_state_variance,
        horizon=horizon,
        initial_state=initial_state,
    )


def memoryless_realization(K_W: float, horizon: Optional[int] = None) -> PoSsRealization:
    """White noise of variance K_W written as a PO-SS realization with A = 0."""
    return PoSsRealization.build(A=0.0, B=0.0, C=0.0, N=1.0, K_W=K_W, horizon=horizon)


@dataclass(frozen=True)
class PossExampleParams:
    """PO-SS(a, c, b, d) driven by two independent noises W = (W1, W2)."""

    a: float
    c: float
    b1: float
    b2: float
    d1: float
    d2: float
    K_W1: float
    K_W2: float

    def __post_init__(self) -> None:
        if self.K_W1 < 0 or self.K_W2 < 0:
            raise RealizationError("K_W1 and K_W2 must be nonnegative")
        if not self.d_dot_d > 0:
            raise RealizationError("d1^2 K_W1 + d2^2 K_W2 must be positive")

    @property
    def b_dot_b(self) -> float:
        return self.b1**2 * self.K_W1 + self.b2**2 * self.K_W2

    @property
    def b_dot_d(self) -> float:
        return self.b1 * self.K_W1 * self.d1 + self.b2 * self.K_W2 * self.d2

    @property
    def d_dot_d(self) -> float:
        return self.d1**2 * self.K_W1 + self.d2**2 * self.K_W2


def poss_example_to_realization(
    p: PossExampleParams,
    horizon: Optional[int] = None,
    K_S1: float = 0.0,
    initial_state: str = "distributional",
) -> PoSsRealization:
    return PoSsRealization.build(
        A=p.a,
        B=[[p.b1, p.b2]],
        C=p.c,
        N=[[p.d1, p.d2]],
        K_W=np.diag([p.K_W1, p.K_W2]),
        K_S1=K_S1,
        horizon=horizon,
        initial_state=initial_state,
    )


@dataclass(frozen=True)
class StationaryInit:
    """Stationary second moments of (S_t, V_t) and filter data given V_0."""

    d11: float
    d12: float
    d22: float
    s_hat1_coeff: float
    sigma1: float
    sigma1_without_v0: float = field(default=0.0)


def stationary_init(p: ArmaParams) -> StationaryInit:
    """Stationary covariances for ARMA(a, c) with |c| < 1.

    ``s_hat1_coeff`` multiplies V_0 in E[S_1 | V_0] and ``sigma1`` is the
    matching conditional variance. Without V_0 the filter starts from
    ``sigma1_without_v0 = d11``.
    """
    p.check_distinct()
    if not abs(p.c) < 1.0:
        raise RealizationError("stationary initialization requires |c| < 1")
    if abs(p.a) > 1.0:
        raise RealizationError("stationary initialization requires |a| <= 1")
    d11 = p.K_W / (1.0 - p.c**2)
    d12 = (p.c - p.a) * d11
    d22 = (p.c - p.a) ** 2 * d11 + p.K_W
    cross = p.c * d12 + p.K_W  # cov(S_1, V_0)
    sigma1 = max(d11 - cross**2 / d22, 0.0)
    return StationaryInit(d11, d12, d22, cross / d22, sigma1, d11)


def psd_eval(p: ArmaParams, theta):
    """Power spectral density K_W |1 - a e^{-i theta}|^2 / |1 - c e^{-i theta}|^2."""
    if not abs(p.c) < 1.0:
        raise RealizationError("the spectral density requires |c| < 1")
    th = np.asarray(theta, dtype=float)
    cos = np.cos(th)
    out = p.K_W * (1.0 - 2.0 * p.a * cos + p.a**2) / (1.0 - 2.0 * p.c * cos + p.c**2)
    return float(out) if out.ndim == 0 else out


def invertibility_predicate(r: PoSsRealization, tol: float = 1e-9) -> bool:
    """True iff C_{t+1} B_t = L_t N_t is solvable for every t (least squares)."""
    steps = 1 if r.horizon is None else max(r.horizon - 1, 1)
    for t in range(1, steps + 1):
        _, B, _, N, _ = r.step(t)
        C_next = r.step(t + 1)[2]
        target = C_next @ B
        L, *_ = np.linalg.lstsq(N.T, target.T, rcond=None)
        resid = np.linalg.norm(target - L.T @ N)
        if resid > tol * max(1.0, np.linalg.norm(target)):
            return False
    return True
