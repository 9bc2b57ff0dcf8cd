"""Reference solution of the coupled algebraic Riccati equations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .core import MatTuple, MjlsProblem, Policy, is_mss, mode_expectation
from .errors import NotConvergedError, SingularSystem, StabilityError

CARE_TOL = 1e-12
CARE_MAX_ITER = 100_000


@dataclass(frozen=True, eq=False)
class CareSolution:
    P_star: MatTuple
    K_star: Policy
    iterations: int
    residual: float

    @property
    def gain(self) -> MatTuple:
        return self.K_star.K


def _spd_solve(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return sla.cho_solve(sla.cho_factor(M), rhs)
    except sla.LinAlgError as exc:
        raise SingularSystem("R + B^T E(P) B is not positive definite") from exc


def _greedy(problem: MjlsProblem, EP: MatTuple) -> np.ndarray:
    A, B, R = problem.A.blocks, problem.B.blocks, problem.R.blocks
    Bt = B.transpose(0, 2, 1)
    return np.stack([
        _spd_solve(R[i] + Bt[i] @ EP[i] @ B[i], Bt[i] @ EP[i] @ A[i])
        for i in range(problem.num_modes)
    ])


def riccati_map(problem: MjlsProblem, P: MatTuple) -> MatTuple:
    """Right-hand side of the coupled AREs evaluated at ``P``."""
    EP = mode_expectation(problem.chain, P)
    A, Q = problem.A.blocks, problem.Q.blocks
    At = A.transpose(0, 2, 1)
    K = _greedy(problem, EP)
    out = Q + At @ EP.blocks @ A - At @ EP.blocks @ problem.B.blocks @ K
    return MatTuple(out).sym()


def care_residual(problem: MjlsProblem, P: MatTuple) -> float:
    """``||RHS(P) - P||_max / (1 + ||P||_max)``."""
    P = MatTuple(P)
    return (riccati_map(problem, P) - P).norm_max() / (1.0 + P.norm_max())


def optimal_gain(problem: MjlsProblem, P_star: MatTuple) -> Policy:
    """``K = (R + B^T E(P) B)^{-1} B^T E(P) A``, solved blockwise by Cholesky."""
    EP = mode_expectation(problem.chain, MatTuple(P_star))
    return Policy(MatTuple(_greedy(problem, EP)))


def solve_care(problem: MjlsProblem, tol: float = CARE_TOL,
               max_iter: int = CARE_MAX_ITER) -> CareSolution:
    """Solve the coupled AREs by value iteration started at ``P = Q``.

    Iterates ``P <- RHS(P)`` until ``||P_next - P||_max <= tol (1 + ||P||_max)``.

    Raises
    ------
    NotConvergedError
        If the stopping rule is not met within ``max_iter`` sweeps, which
        happens when the problem is not mean-square stabilizable or ``tol``
        is below round-off.
    """
    P = problem.Q
    for it in range(1, max_iter + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            P_next = riccati_map(problem, P)
        step = (P_next - P).norm_max()
        if not np.isfinite(step):
            raise NotConvergedError("Riccati recursion diverged")
        if step <= tol * (1.0 + P.norm_max()):
            P = P_next
            break
        P = P_next
    else:
        raise NotConvergedError(f"Riccati recursion not converged after {max_iter} iterations")
    K = optimal_gain(problem, P)
    stable, rho = is_mss(problem, K)
    if not stable:
        raise StabilityError("Riccati solution yields a non-stabilizing gain", rho=rho)
    return CareSolution(P, K, it, care_residual(problem, P))
