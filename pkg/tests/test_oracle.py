import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbcap.capacity_finite import evaluate_rate
from fbcap.filtering import InputStrategy, simulate_paths
from fbcap.noise_models import ArmaParams, PossExampleParams, arma_to_poss, poss_example_to_realization
from fbcap.oracle import (
    CoverPombraForm,
    assemble_noise_covariance,
    cover_pombra_objective,
    cover_pombra_power,
    logdet,
    strategy_to_cover_pombra,
)


def arma(a, c, K_W=1.0, K_S1=0.0):
    return arma_to_poss(ArmaParams(a, c, K_W)).with_initial(K_S1=K_S1)


def test_one_step_covariance():
    r = arma(0.25, 0.5, 2.0, K_S1=3.0)
    assert assemble_noise_covariance(r, 1).item() == pytest.approx(0.0625 * 3.0 + 2.0)


def test_horizon_limit():
    with pytest.raises(ValueError):
        assemble_noise_covariance(arma(0.2, 0.5), 65)


def test_zero_lambda_form():
    r = arma(0.25, 0.5, K_S1=1.5)
    kz = np.array([0.3, 0.6, 0.9, 1.2])
    form = strategy_to_cover_pombra(r, InputStrategy(np.zeros((4, 1)), kz))
    assert np.allclose(form.B, 0.0, atol=1e-12)
    assert np.allclose(form.K_Zbar, np.diag(kz), atol=1e-12)


def test_objective_closed_forms():
    n, K_W, kappa = 5, 2.0, 1.5
    K_V = K_W * np.eye(n)
    assert cover_pombra_objective(CoverPombraForm(np.zeros((n, n)), np.zeros((n, n)), K_V)) == pytest.approx(0.0)
    form = CoverPombraForm(np.zeros((n, n)), kappa * np.eye(n), K_V)
    assert cover_pombra_objective(form) == pytest.approx(0.5 * n * math.log(1 + kappa / K_W))
    assert cover_pombra_power(form) == pytest.approx(kappa)


def _b21(a, c, K_W, K_S1, lam, kz1):
    # X_2 = lam (S_hat_2 - S_hathat_2) + Z_2 with S_hat_1 = S_hathat_1 = 0
    v = (c - a) ** 2 * K_S1 + K_W
    g = (c * (c - a) * K_S1 + K_W) / v
    return lam * g * kz1 / (v + kz1)


@pytest.mark.parametrize("a,c,K_S1,lam", [(0.25, 0.5, 0.0, 0.8), (0.5, 0.9, 5.0, -0.6), (-0.3, 0.4, 1.0, 1.2)])
def test_two_step_coefficient(a, c, K_S1, lam):
    r = arma(a, c, K_S1=K_S1)
    strat = InputStrategy(np.array([[lam], [lam]]), np.array([0.7, 0.4]))
    form = strategy_to_cover_pombra(r, strat)
    expect = _b21(a, c, 1.0, K_S1, lam, 0.7)
    assert form.B[1, 0] == pytest.approx(expect, abs=1e-12)
    paths = simulate_paths(r, strat, seed=99, n_paths=200_000)
    V1, X2 = paths.V[:, 0], paths.X[:, 1]
    slope = float(np.mean(V1 * X2) / np.mean(V1 * V1))
    resid = X2 - slope * V1
    se = float(np.std(resid) / (np.std(V1) * math.sqrt(V1.size)))
    assert abs(slope - expect) <= 4 * se


def test_poss_round_trip():
    r = poss_example_to_realization(PossExampleParams(0.7, 0.5, 1.0, 0.3, 0.2, 1.0, 1.0, 0.5), K_S1=2.0)
    strat = InputStrategy(np.array([[0.3], [-0.5], [0.9], [0.1]]), np.array([0.2, 0.5, 0.0, 1.0]))
    form = strategy_to_cover_pombra(r, strat)
    res = evaluate_rate(r, strat)
    assert cover_pombra_objective(form) == pytest.approx(4 * res.rate_nats_per_step, abs=1e-8)
    assert cover_pombra_power(form) == pytest.approx(res.power_used, abs=1e-8)
    assert np.allclose(np.triu(form.B), 0.0, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(
    a=st.floats(-1.2, 1.2),
    c=st.floats(-1.5, 1.5),
    K_S1=st.floats(0, 5),
    n=st.integers(1, 6),
    seed=st.integers(0, 2**32 - 1),
)
def test_objective_matches_sequential_rate(a, c, K_S1, n, seed):
    if abs(c - a) < 0.05:
        return
    rng = np.random.default_rng(seed)
    strat = InputStrategy(rng.uniform(-2, 2, (n, 1)), rng.uniform(0, 2, n))
    r = arma(a, c, K_S1=K_S1)
    form = strategy_to_cover_pombra(r, strat)
    res = evaluate_rate(r, strat)
    assert cover_pombra_objective(form) == pytest.approx(n * res.rate_nats_per_step, abs=1e-8)
    assert cover_pombra_power(form) == pytest.approx(res.power_used, abs=1e-8)
    # causality: X_t depends on strictly past noise only
    assert np.allclose(np.triu(form.B), 0.0, atol=1e-10)


def test_logdet_matches_numpy():
    M = np.array([[2.0, 0.5, 0.1], [0.5, 1.0, 0.2], [0.1, 0.2, 3.0]])
    assert logdet(M) == pytest.approx(np.linalg.slogdet(M)[1], abs=1e-13)
