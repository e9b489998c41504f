import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbcap.riccati import (
    RiccatiProblem,
    are_solve,
    classify,
    closed_loop,
    dre_step,
    gare_residual,
    predict_convergence,
    scalar_are_roots,
    stabilizing_solution,
)


def arma_problem(a, c, K_W=1.0):
    return RiccatiProblem(c, 1.0, K_W, K_W, K_W, c - a)


def test_arma_zero_is_fixed_point():
    prob = arma_problem(0.25, 0.5)
    assert dre_step(prob, 0.0).item() == pytest.approx(0.0, abs=1e-15)
    assert gare_residual(prob, 0.0) < 1e-12


def test_white_noise_step():
    # A = 0: P' = G Q G^T - G S R^{-1} (G S)^T regardless of P
    prob = RiccatiProblem(0.0, 2.0, 1.5, 0.5, 3.0, 0.7)
    expect = 4 * 1.5 - (2 * 0.5) ** 2 / 3.0
    assert dre_step(prob, 0.0).item() == pytest.approx(expect)


def test_invalid_problem_rejected():
    with pytest.raises(ValueError):
        RiccatiProblem(0.5, 1.0, 1.0, 1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        RiccatiProblem(np.eye(2), np.eye(2), np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros((2, 1)), 1.0, np.ones((1, 2)))


def test_arma_structure():
    rep = classify(arma_problem(0.25, 0.5))
    assert rep.detectable and rep.stabilizable and rep.unit_circle_controllable
    assert rep.A_star.item() == pytest.approx(0.25)
    assert rep.B_star.item() == pytest.approx(0.0, abs=1e-15)


def test_arma_unstable_a():
    rep = classify(arma_problem(1.5, 0.5))
    assert rep.detectable and rep.unit_circle_controllable and not rep.stabilizable
    rep = classify(arma_problem(1.0, 0.5))
    assert not rep.unit_circle_controllable
    assert "unit_circle_controllable" in rep.indeterminate


def test_ar_pairs():
    rep = classify(arma_problem(0.0, 0.7))
    assert rep.A_star.item() == 0.0 and rep.B_star.item() == 0.0
    assert rep.detectable


def test_stable_A_with_zero_C_detectable():
    assert classify(RiccatiProblem(0.5, 1.0, 1.0, 0.0, 1.0, 0.0)).detectable
    assert not classify(RiccatiProblem(1.5, 1.0, 1.0, 0.0, 1.0, 0.0)).detectable


@pytest.mark.parametrize("a,c", [(0.25, 0.5), (0.5, 0.9), (-0.5, 0.3), (0.0, 1.7)])
def test_arma_roots(a, c):
    roots = sorted(scalar_are_roots(arma_problem(a, c, 2.0)), key=lambda r: r.value)
    assert len(roots) == 2
    assert roots[0].value == pytest.approx(2.0 * (a * a - 1) / (c - a) ** 2, abs=1e-10)
    assert roots[1].value == pytest.approx(0.0, abs=1e-12)
    assert roots[1].stabilizing and not roots[0].stabilizing


def test_input_side_roots_zero_kz():
    a, c, lam = 0.25, 0.5, 0.6
    # noise side at its limit: Sigma = 0, M = 1, K_Ihat = K_W
    prob = RiccatiProblem(c, 1.0, 1.0, 1.0, 1.0, lam + c - a)
    vals = sorted(r.value for r in scalar_are_roots(prob))
    assert vals[0] == pytest.approx(((lam - a) ** 2 - 1) / (lam + c - a) ** 2, abs=1e-10)
    assert vals[1] == pytest.approx(0.0, abs=1e-12)


def test_iteration_matches_closed_form():
    prob = RiccatiProblem(0.5, 1.0, 1.0, 1.0, 1.5, 0.8)
    it = are_solve(prob, 3.0)
    cf = stabilizing_solution(prob)
    assert it.status == "converged"
    assert it.P.item() == pytest.approx(cf.P.item(), abs=1e-10)
    assert abs(closed_loop(prob, it.P).item()) < 1


def test_matrix_are_against_scipy():
    import scipy.linalg as la

    A = np.array([[0.9, 0.2], [0.0, 0.5]])
    C = np.array([[1.0, 0.3]])
    Q = np.eye(2)
    R = np.array([[0.5]])
    prob = RiccatiProblem(A, np.eye(2), Q, np.zeros((2, 1)), R, C)
    sol = stabilizing_solution(prob)
    ref = la.solve_discrete_are(A.T, C.T, Q, R)
    assert np.allclose(sol.P, ref, atol=1e-9)
    assert sol.stabilizing


def test_predict_convergence():
    # arbitrary P1 needs the stabilizable branch; P1 = 0 also admits the first
    assert predict_convergence(arma_problem(0.5, 0.9), 5.0) == ("converges_to_stabilizing", 3)
    assert predict_convergence(RiccatiProblem(0.5, 1.0, 1.0, 0.0, 1.0, 1.0), 0.0) == ("converges_to_stabilizing", 1)
    assert predict_convergence(arma_problem(1.0, 0.5), 5.0)[0] == "no_prediction"
    # detectable, unit-circle controllable, not stabilizable; P1 = 0
    assert predict_convergence(arma_problem(2.0, 0.5), 0.0)[0] == "no_prediction"


@settings(max_examples=40, deadline=None)
@given(
    a=st.floats(-1.5, 1.5),
    c=st.floats(-1.5, 1.5),
    q=st.floats(0.1, 3.0),
    r=st.floats(0.1, 3.0),
    P=st.floats(0.0, 10.0),
)
def test_dre_preserves_psd(a, c, q, r, P):
    prob = RiccatiProblem(a, 1.0, q, 0.0, r, c)
    assert dre_step(prob, P).item() >= -1e-12


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-0.95, 0.95), c=st.floats(-2, 2), P1=st.floats(0, 10))
def test_arma_noise_limit_is_zero(a, c, P1):
    if abs(c - a) < 0.05:
        return
    sol = are_solve(arma_problem(a, c), P1)
    assert sol.P.item() == pytest.approx(0.0, abs=1e-9)
    assert sol.stabilizing
