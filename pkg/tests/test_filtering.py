import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbcap.filtering import (
    InputStrategy,
    noise_entropy,
    noise_filter,
    output_filter,
    path_statistics,
    simulate_paths,
    state_feedback_filter,
    trajectory_table,
)
from fbcap.noise_models import ArmaParams, PossExampleParams, arma_to_poss, poss_example_to_realization
from fbcap.oracle import assemble_noise_covariance, joint_covariances, logdet


def arma(a, c, K_W=1.0, K_S1=0.0):
    return arma_to_poss(ArmaParams(a, c, K_W)).with_initial(K_S1=K_S1)


def test_zero_initial_covariance_stays_zero():
    nf = noise_filter(arma(0.25, 0.5, 2.0), 20)
    assert np.all(nf.Sigma == 0.0)
    assert np.allclose(nf.M, 1.0)
    assert np.allclose(nf.K_Ihat, 2.0)


def test_sigma_decreases_to_zero():
    nf = noise_filter(arma(0.5, 0.9, K_S1=5.0), 200)
    s = nf.Sigma.ravel()
    assert np.all(np.diff(s) <= 1e-15)
    assert s[-1] < 1e-12


def test_poss_recursion():
    a, c, b, d = 0.8, 0.6, 1.2, 0.7
    p = PossExampleParams(a, c, b, 0.0, 0.0, d, 1.5, 2.0)
    r = poss_example_to_realization(p, K_S1=3.0)
    nf = noise_filter(r, 10)
    s = 3.0
    for t in range(10):
        assert nf.Sigma[t].item() == pytest.approx(s, rel=1e-12)
        s = a * a * s + b * b * 1.5 - (a * s * c) ** 2 / (d * d * 2.0 + c * c * s)


def test_entropy_examples():
    n = 7
    assert noise_entropy(noise_filter(arma(0.25, 0.5, 3.0), n)) == pytest.approx(0.5 * n * math.log(2 * math.pi * math.e * 3.0))
    assert noise_entropy(noise_filter(arma(0.25, 0.5, 3.0, K_S1=4.0), 1)) == pytest.approx(
        0.5 * math.log(2 * math.pi * math.e * (0.0625 * 4.0 + 3.0))
    )
    r = arma(0.5, 0.9, K_S1=5.0)
    oracle = 0.5 * (3 * math.log(2 * math.pi * math.e) + logdet(assemble_noise_covariance(r, 3)))
    assert noise_entropy(noise_filter(r, 3)) == pytest.approx(oracle, abs=1e-10)


def test_output_filter_first_step():
    r = arma(0.25, 0.5, K_S1=2.0)
    nf = noise_filter(r, 4)
    out = output_filter(r, InputStrategy.constant([0.7], 0.3, 4), nf)
    assert out.K[0].item() == 0.0
    assert out.K_I[0] == pytest.approx(nf.K_Ihat[0] + 0.3)
    assert out.power[0] == pytest.approx(0.3)


def test_zero_lambda_uses_noise_gain():
    r = arma(0.25, 0.5)
    nf = noise_filter(r, 6)
    out = output_filter(r, InputStrategy.constant([0.0], 0.4, 6), nf)
    for t in range(6):
        assert out.K_I[t] == pytest.approx(0.0625 * out.K[t].item() + 1.0 + 0.4, rel=1e-12)


def test_state_feedback_scalar_recursion():
    a, c, lam, kz = 0.3, 0.8, 0.5, 0.2
    r = arma(a, c)
    out = state_feedback_filter(r, InputStrategy.constant([lam], kz, 8))
    K = 0.0
    g = lam + c - a
    for t in range(8):
        assert out.K[t].item() == pytest.approx(K, abs=1e-13)
        K = c * c * K + 1.0 - (c * K * g + 1.0) ** 2 / (g * g * K + 1.0 + kz)


@settings(max_examples=30, deadline=None)
@given(
    a=st.floats(-1.2, 1.2),
    c=st.floats(-1.5, 1.5),
    K_S1=st.floats(0, 5),
    lam=st.lists(st.floats(-2, 2), min_size=5, max_size=5),
    kz=st.lists(st.floats(0, 2), min_size=5, max_size=5),
)
def test_chain_rule_for_outputs(a, c, K_S1, lam, kz):
    if abs(c - a) < 0.05:
        return
    r = arma(a, c, K_S1=K_S1)
    strat = InputStrategy(np.array(lam)[:, None], np.array(kz))
    nf = noise_filter(r, 5)
    out = output_filter(r, strat, nf)
    assert np.all(out.K.ravel() >= -1e-12)
    _, K_Y, K_X = joint_covariances(r, strat)
    assert float(np.sum(np.log(out.K_I))) == pytest.approx(logdet(K_Y), abs=1e-8)
    assert out.power == pytest.approx(np.diag(K_X), abs=1e-8)


def test_trajectory_table_shape():
    r = arma(0.25, 0.5, K_S1=1.0)
    nf = noise_filter(r, 3)
    header, rows = trajectory_table(nf, output_filter(r, InputStrategy.constant([0.2], 0.5, 3), nf))
    assert len(rows) == 3 and all(len(row) == len(header) for row in rows)
    assert header[0] == "t"


def test_simulation_is_deterministic():
    r = arma(0.25, 0.5, K_S1=1.0)
    strat = InputStrategy.constant([0.4], 0.5, 4)
    a = simulate_paths(r, strat, seed=11, n_paths=500)
    b = simulate_paths(r, strat, seed=11, n_paths=500)
    assert np.array_equal(a.Y, b.Y)
    assert not np.array_equal(a.Y, simulate_paths(r, strat, seed=12, n_paths=500).Y)


def test_zero_lambda_input_is_innovation():
    r = arma(0.25, 0.5, K_S1=1.0)
    strat = InputStrategy.constant([0.0], 0.7, 4)
    m = 40_000
    paths = simulate_paths(r, strat, seed=3, n_paths=m)
    var = np.mean(paths.X ** 2, axis=0)
    assert np.all(np.abs(var - 0.7) <= 3 * 0.7 * math.sqrt(2 / m))


def test_simulated_innovations_match_filters():
    r = poss_example_to_realization(PossExampleParams(0.7, 0.5, 1.0, 0.3, 0.2, 1.0, 1.0, 0.5), K_S1=2.0)
    strat = InputStrategy.constant([0.6], 0.4, 5)
    nf = noise_filter(r, 5)
    out = output_filter(r, strat, nf)
    stats = path_statistics(simulate_paths(r, strat, seed=2024, n_paths=50_000), nf.K_Ihat, out.K_I, out.power)
    worst = max(abs(e["estimate"] - e["value"]) / e["se"] for g in stats.values() for e in g)
    # 4 sigma over roughly forty statistics for a single fixed seed
    assert worst < 4.0
