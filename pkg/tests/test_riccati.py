import numpy as np
import pytest
import scipy.linalg as sla
from mpmath import mp, mpf, sqrt

from mjlspo import (MarkovChain, MatTuple, MjlsProblem, cost, evaluate, gain_residual,
                    gradient, is_mss, optimal_gain, solve_care)
from mjlspo.bench import GenSpec, random_instance
from mjlspo.errors import NotConvergedError
from mjlspo.riccati import care_residual, riccati_map

from conftest import random_stabilizing, scalar_tuple

mp.dps = 40
P_F1 = (mpf("0.81") + sqrt(mpf("0.81") ** 2 + 4)) / 2
K_F1 = mpf("0.9") * P_F1 / (1 + P_F1)


def test_f1_closed_form(f1):
    care = solve_care(f1)
    assert care.P_star.blocks.item() == pytest.approx(float(P_F1), abs=1e-12)
    assert care.gain.blocks.item() == pytest.approx(float(K_F1), abs=1e-12)
    assert care.residual <= 1e-12
    assert gradient(f1, care.K_star).norm2() <= 1e-8
    assert abs(gain_residual(f1, care.K_star).blocks.item()) <= 1e-8


def test_optimal_gain_examples(f1):
    assert optimal_gain(f1, scalar_tuple(float(P_F1))).K.blocks.item() == pytest.approx(
        float(K_F1), abs=1e-12)
    zero_a = MjlsProblem(scalar_tuple(0.0, 0.0), scalar_tuple(1.0, 2.0), scalar_tuple(1.0, 3.0),
                         scalar_tuple(1.0, 1.0), MarkovChain([[0.3, 0.7], [0.6, 0.4]], [0.4, 0.6]),
                         np.eye(1))
    assert np.all(optimal_gain(zero_a, scalar_tuple(5.0, 9.0)).K.blocks == 0)


def test_zero_dynamics_gives_q():
    rng = np.random.default_rng(3)
    n, d, k = 3, 3, 2
    F = rng.standard_normal((n, d, d))
    Q = MatTuple(F @ F.transpose(0, 2, 1) + np.eye(d))
    prob = MjlsProblem(MatTuple.zeros(n, d), MatTuple(rng.standard_normal((n, d, k))), Q,
                       MatTuple.identity(n, k), MarkovChain(rng.dirichlet(np.ones(n), n),
                                                            np.full(n, 1 / n)), np.eye(d))
    care = solve_care(prob)
    assert care.P_star.allclose(Q, rtol=0, atol=1e-14)
    assert np.all(care.gain.blocks == 0)


@pytest.mark.parametrize("seed", range(6))
def test_single_mode_matches_dare(seed):
    prob, _ = random_instance(GenSpec(4, 2, 1, seed=seed))
    care = solve_care(prob)
    A, B, Q, R = (m.blocks[0] for m in (prob.A, prob.B, prob.Q, prob.R))
    P_ref = sla.solve_discrete_are(A, B, Q, R)
    rel = np.max(np.abs(care.P_star.blocks[0] - P_ref)) / np.max(np.abs(P_ref))
    assert rel <= 1e-9
    K_ref = np.linalg.solve(R + B.T @ P_ref @ B, B.T @ P_ref @ A)
    assert np.max(np.abs(care.gain.blocks[0] - K_ref)) <= 1e-9 * (1 + np.max(np.abs(K_ref)))


def test_f2_residual_and_optimality(f2):
    care = solve_care(f2)
    assert care_residual(f2, care.P_star) <= 1e-10
    assert is_mss(f2, care.K_star)[0]
    c_star = cost(f2, care.K_star)
    rng = np.random.default_rng(7)
    for _ in range(100):
        K = random_stabilizing(f2, rng, center=care.K_star, scale=rng.uniform(0.01, 2.0))
        assert cost(f2, K) >= c_star - 1e-12 * c_star


@pytest.mark.parametrize("seed", range(4))
def test_value_iteration_eventually_geometric(seed):
    prob, _ = random_instance(GenSpec(3, 2, 3, seed=seed))
    P = prob.Q
    steps = []
    for _ in range(400):
        P_next = riccati_map(prob, P)
        steps.append((P_next - P).norm_max())
        P = P_next
        if steps[-1] < 1e-13:
            break
    tail = [s for s in steps if s > 1e-11][-20:]
    ratios = np.array(tail[1:]) / np.array(tail[:-1])
    assert np.all(ratios < 1.0)


@pytest.mark.parametrize("seed", range(6))
def test_care_solution_invariants(seed):
    prob, _ = random_instance(GenSpec(3, 2, 3, seed=seed))
    care = solve_care(prob)
    assert care.residual <= 1e-12
    assert is_mss(prob, care.K_star)[0]
    ev = evaluate(prob, care.K_star)
    assert ev.L.norm_max() <= 1e-8 * (1 + ev.P.norm_max())
    # the Lyapunov value of K* coincides with the Riccati solution
    assert ev.P.allclose(care.P_star, rtol=1e-9, atol=1e-10)


def test_unstabilizable_reports_failure():
    prob = MjlsProblem(scalar_tuple(2.0), scalar_tuple(0.0), scalar_tuple(1.0),
                       scalar_tuple(1.0), MarkovChain([[1.0]], [1.0]), np.eye(1))
    with pytest.raises(NotConvergedError):
        solve_care(prob, max_iter=5000)
