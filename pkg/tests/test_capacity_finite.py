import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbcap.capacity_finite import (
    FiniteOptions,
    Formulation,
    InfeasibleError,
    case_equivalence_check,
    evaluate_rate,
    optimize_finite,
)
from fbcap.filtering import InputStrategy
from fbcap.noise_models import ArmaParams, arma_to_poss, memoryless_realization
from fbcap.oracle import oracle_rate

# n = 2 optima for ARMA(a, c, K_W = 1, K_S1 = 0) at kappa = 1, from an
# independent SLSQP solve of the two-step closed form
# (K_2 = K_Z1 / (1 + K_Z1), power = (K_Z1 + K_Z2 + Lambda_2^2 K_2) / 2).
TWO_STEP_OPTIMA = {
    (0.25, 0.5): 0.39110768743857327,
    (0.5, 0.9): 0.4179437778137636,
    (-0.5, 0.3): 0.48866167182925,
}


def arma(a, c, K_W=1.0, K_S1=0.0):
    return arma_to_poss(ArmaParams(a, c, K_W)).with_initial(K_S1=K_S1)


def test_white_noise_rate():
    r = memoryless_realization(2.0)
    res = evaluate_rate(r, InputStrategy.constant([0.0], 3.0, 5))
    assert res.rate_nats_per_step == pytest.approx(0.5 * math.log(1 + 3.0 / 2.0), abs=1e-14)
    assert res.power_used == pytest.approx(3.0)


def test_three_step_rate_matches_oracle():
    r = arma(0.5, 0.9, K_S1=5.0)
    strat = InputStrategy.constant([0.2], 1.0, 3)
    assert evaluate_rate(r, strat).rate_nats_per_step == pytest.approx(oracle_rate(r, strat), abs=1e-8)


def test_recomputed_rate_consistent():
    res = evaluate_rate(arma(0.3, 0.8, K_S1=2.0), InputStrategy.constant([0.5], 0.5, 6))
    assert res.recomputed_rate() == pytest.approx(res.rate_nats_per_step, abs=1e-14)
    d = res.to_dict(bits=True)
    assert d["rate"] == pytest.approx(res.rate_nats_per_step / math.log(2))


def test_zero_input_rate_zero():
    strat = InputStrategy(np.zeros((4, 1)), np.zeros(4))
    r = arma(0.25, 0.5, K_S1=3.0)
    for form in Formulation:
        assert evaluate_rate(r, strat, form).rate_nats_per_step == pytest.approx(0.0, abs=1e-15)


def test_case_equivalence():
    r = arma(0.25, 0.5, K_S1=5.0)
    chk = case_equivalence_check(r, InputStrategy.constant([0.7], 0.5, 8))
    assert chk["identical"] and chk["max_abs_diff"] <= 1e-12
    assert chk["entropy_gap"] > 0


def test_case2_zero_kz_collapses():
    a, c, lam = 0.3, 0.8, 0.4
    res = evaluate_rate(arma(a, c), InputStrategy.constant([lam], 0.0, 300), Formulation.CASE2)
    assert res.per_step_terms[-1].K_I == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("kappa", [0.5, 2.0])
def test_white_noise_optimum(kappa):
    res = optimize_finite(memoryless_realization(1.0), kappa, 3, opts=FiniteOptions(restarts=2))
    assert res.rate_nats_per_step == pytest.approx(0.5 * math.log(1 + kappa), abs=1e-6)
    assert np.allclose(res.strategy.K_Z, kappa, atol=1e-4)


def test_single_step_optimum():
    r = arma(0.25, 0.5, K_S1=2.0)
    res = optimize_finite(r, 1.5, 1, opts=FiniteOptions(restarts=2))
    kihat = 0.0625 * 2.0 + 1.0
    assert res.rate_nats_per_step == pytest.approx(0.5 * math.log(1 + 1.5 / kihat), abs=1e-9)


@pytest.mark.parametrize("ac", sorted(TWO_STEP_OPTIMA))
def test_two_step_optimum(ac):
    res = optimize_finite(arma(*ac), 1.0, 2)
    assert res.power_used <= 1.0 + 1e-9
    assert res.rate_nats_per_step == pytest.approx(TWO_STEP_OPTIMA[ac], abs=1e-6)
    assert res.diagnostics["restart_values"]


def test_deterministic_for_seed():
    r = arma(0.25, 0.5, K_S1=1.0)
    a = optimize_finite(r, 1.0, 3, opts=FiniteOptions(restarts=3, seed=5))
    b = optimize_finite(r, 1.0, 3, opts=FiniteOptions(restarts=3, seed=5))
    assert a.rate_nats_per_step == b.rate_nats_per_step
    assert np.array_equal(a.strategy.Lambda, b.strategy.Lambda)


def test_errors():
    with pytest.raises(InfeasibleError):
        optimize_finite(arma(0.2, 0.5), -1.0, 2)
    with pytest.raises(ValueError):
        optimize_finite(arma(0.2, 0.5), 1.0, 20, opts=FiniteOptions(max_horizon=10))


def test_zero_budget():
    res = optimize_finite(arma(0.2, 0.5), 0.0, 3)
    assert res.rate_nats_per_step == 0.0 and res.power_used == 0.0


@settings(max_examples=6, deadline=None)
@given(a=st.floats(-0.8, 0.8), c=st.floats(-1.2, 1.2), k1=st.floats(0.2, 2.0), dk=st.floats(0.1, 2.0))
def test_monotone_in_budget(a, c, k1, dk):
    if abs(c - a) < 0.1:
        return
    r = arma(a, c)
    opts = FiniteOptions(restarts=2)
    lo = optimize_finite(r, k1, 2, opts=opts)
    hi = optimize_finite(r, k1 + dk, 2, opts=opts)
    assert lo.power_used <= k1 + 1e-9 and hi.power_used <= k1 + dk + 1e-9
    assert hi.rate_nats_per_step >= lo.rate_nats_per_step - 1e-7
