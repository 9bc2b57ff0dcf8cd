"""Exact derivatives of the MJLS LQR cost and the three policy optimizers."""

from __future__ import annotations

import enum
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .core import Evaluation, MatTuple, MjlsProblem, Policy, evaluate, mode_expectation
from .errors import DomainError, SingularSystem, StabilityError, StepRejected
from .riccati import CareSolution


class MethodKind(str, enum.Enum):
    GD = "gd"
    GN = "gn"
    NPG = "npg"

    @classmethod
    def parse(cls, value) -> MethodKind:
        if isinstance(value, cls):
            return value
        aliases = {"gradientdescent": cls.GD, "gaussnewton": cls.GN, "naturalpg": cls.NPG}
        key = str(value).lower().replace("_", "").replace("-", "")
        try:
            return aliases.get(key) or cls(key)
        except ValueError:
            raise ValueError(f"unknown method {value!r}; expected gd, gn or npg") from None


class Status(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    ANOMALOUS_STATIONARY = "anomalous_stationary"


@dataclass(frozen=True)
class ConstantBundle:
    mu: float
    alpha: float
    xi: float
    smoothness_L: float
    x_star_maxnorm: float | None = None


@dataclass(frozen=True)
class OptRecord:
    iter: int
    cost: float
    rel_err: float | None
    grad_norm2: float
    eta: float
    rate_bound: float | None
    rho_lifted: float


@dataclass
class OptTrace:
    method: MethodKind
    eta: float
    records: list[OptRecord] = field(default_factory=list)
    status: Status = Status.MAX_ITER
    policy: Policy | None = None

    @property
    def iterations(self) -> int:
        return len(self.records) - 1

    @property
    def costs(self) -> np.ndarray:
        return np.array([r.cost for r in self.records])

    @property
    def rel_errs(self) -> np.ndarray:
        return np.array([np.nan if r.rel_err is None else r.rel_err for r in self.records])

    def iterations_to(self, level: float) -> int | None:
        """First iterate index with relative error at or below ``level``."""
        for r in self.records:
            if r.rel_err is not None and r.rel_err <= level:
                return r.iter
        return None


def _psi_solve(ev: Evaluation, rhs: MatTuple) -> MatTuple:
    """Blockwise ``Psi^{-1} rhs`` through Cholesky factors of ``Psi``."""
    out = []
    for psi, b in zip(ev.Psi.blocks, rhs.blocks):
        try:
            out.append(sla.cho_solve(sla.cho_factor(psi), b))
        except sla.LinAlgError as exc:
            raise SingularSystem("R + B^T E(P^K) B is not positive definite") from exc
    return MatTuple(np.stack(out))


def gain_residual(problem: MjlsProblem, policy) -> MatTuple:
    """``L^K = (R + B^T E(P^K) B) K - B^T E(P^K) A``."""
    return evaluate(problem, policy).L


def gradient(problem: MjlsProblem, policy) -> MatTuple:
    """Policy gradient ``2 L^K X^K``."""
    return evaluate(problem, policy).gradient


def value_derivative(problem: MjlsProblem, policy, E: MatTuple) -> MatTuple:
    """Directional derivative of ``K -> P^K`` along ``E``."""
    ev = evaluate(problem, policy)
    E = MatTuple(E)
    LE = E.T @ ev.L
    return ev.solve_L(LE + LE.T)


def hessian_form(problem: MjlsProblem, policy, E: MatTuple) -> float:
    """Second derivative of ``t -> C(K + tE)`` at ``t = 0``."""
    ev = evaluate(problem, policy)
    E = MatTuple(E)
    dP = value_derivative(problem, ev, E)
    first = (ev.Psi @ E @ ev.X).inner(E)
    EdP = mode_expectation(problem.chain, dP)
    second = (problem.B.T @ EdP @ ev.gamma @ ev.X).inner(E)
    return 2.0 * first - 4.0 * second


def mu_constant(problem: MjlsProblem) -> float:
    """``min_i pi_i * sigma_min(E[x0 x0^T])``."""
    smin = np.linalg.svd(problem.sigma0, compute_uv=False)[-1]
    return float(problem.chain.initial_dist.min() * smin)


def smoothness_constants(problem: MjlsProblem, alpha: float,
                         care: CareSolution | None = None) -> ConstantBundle:
    """Smoothness constant ``L`` and auxiliary ``xi`` on the sublevel set ``{C <= alpha}``.

    When a Riccati solution is supplied, ``alpha`` is checked against the
    optimal cost and ``||X^{K*}||_max`` is filled in.
    """
    mu = mu_constant(problem)
    b = problem.B.norm_max()
    r = problem.R.norm_max()
    qmin = problem.Q.lambda_min()
    xs = None
    if care is not None:
        ev = evaluate(problem, care.K_star)
        if alpha < ev.cost * (1.0 - 1e-12):
            raise DomainError(f"alpha={alpha} is below the optimal cost {ev.cost}")
        xs = ev.X.norm_max()
    xi = ((1.0 + b**2) / mu * alpha + r) / qmin - 1.0
    L = 2.0 * (r + b**2 * (1.0 + 2.0 * xi / b) * alpha / mu) * alpha / qmin
    return ConstantBundle(mu=mu, alpha=float(alpha), xi=float(xi), smoothness_L=float(L),
                          x_star_maxnorm=xs)


def _max_step(ev: Evaluation, method: MethodKind) -> float:
    pb = ev.problem
    if method is MethodKind.GN:
        return 0.5
    if method is MethodKind.NPG:
        mu = mu_constant(pb)
        return 0.5 / (pb.R.norm_max() + pb.B.norm_max() ** 2 * ev.cost / mu)
    return 1.0 / smoothness_constants(pb, ev.cost).smoothness_L


def max_step(problem: MjlsProblem, method, K0) -> float:
    """Largest step size covered by the convergence guarantee of ``method`` from ``K0``.

    Gradient descent admits ``1/L`` with ``L`` taken at ``alpha = C(K0)``. Steps
    up to ``2 / (1.1 L)`` are also safe but only ``1/L`` is returned.
    """
    return _max_step(evaluate(problem, K0), MethodKind.parse(method))


def _direction(ev: Evaluation, method: MethodKind) -> MatTuple:
    if method is MethodKind.GD:
        return ev.gradient
    if method is MethodKind.GN:
        return 2.0 * _psi_solve(ev, ev.L)
    return 2.0 * ev.L


def step(problem: MjlsProblem, policy, method, eta: float) -> Policy:
    """One update ``K - eta * direction``.

    Raises :class:`StepRejected` when a step no larger than :func:`max_step`
    leaves the stabilizing set, and :class:`StabilityError` when a larger one does.
    """
    method = MethodKind.parse(method)
    if not eta > 0:
        raise DomainError("step size must be positive")
    ev = evaluate(problem, policy)
    new = Policy(ev.K - eta * _direction(ev, method))
    try:
        Evaluation(problem, new)
    except StabilityError as exc:
        if eta <= _max_step(ev, method):
            raise StepRejected(f"admissible {method.value} step left the stabilizing set") from exc
        raise
    return new


def theoretical_rate(problem: MjlsProblem, method, eta: float, x_star_maxnorm: float) -> float:
    """Per-iteration contraction factor of ``C(K) - C(K*)`` guaranteed for ``method``."""
    method = MethodKind.parse(method)
    mu = mu_constant(problem)
    rmin = problem.R.lambda_min()
    if method is MethodKind.GD:
        slope = 2.0 * mu**2 * rmin / x_star_maxnorm
    elif method is MethodKind.GN:
        slope = 2.0 * mu / x_star_maxnorm
    else:
        slope = 2.0 * mu * rmin / x_star_maxnorm
    rate = 1.0 - slope * eta
    if not 0.0 < rate < 1.0:
        raise DomainError(f"rate {rate} outside (0, 1); step size too large for the bound")
    return rate


def _resolve_eta(ev: Evaluation, method: MethodKind, eta) -> tuple[float, bool]:
    limit = _max_step(ev, method)
    if eta is None or (isinstance(eta, str) and eta.lower() == "auto"):
        return limit, True
    eta = float(eta)
    if not eta > 0:
        raise DomainError("step size must be positive")
    return eta, eta <= limit


def optimize(problem: MjlsProblem, K0, method, eta="auto", tol: float = 1e-10,
             max_iter: int = 1000, care: CareSolution | None = None,
             callback: Callable[[int, Evaluation], None] | None = None) -> OptTrace:
    """Run one of the three methods from ``K0`` and record every iterate.

    The run stops once the relative cost error against ``care`` is at most
    ``tol``; without a Riccati solution it stops when
    ``||grad C||_2 <= tol * (1 + C)``.  A vanishing gradient at a cost that is
    still away from the optimum ends the run with
    :attr:`Status.ANOMALOUS_STATIONARY`.  ``tol=inf`` disables the stopping
    rule so the full ``max_iter`` budget is spent.  ``callback(n, evaluation)``
    is invoked for every recorded iterate.
    """
    method = MethodKind.parse(method)
    if not tol > 0:
        raise DomainError("tol must be positive")
    ev = evaluate(problem, K0)
    eta, admissible = _resolve_eta(ev, method, eta)

    c_star = xs = rate = None
    if care is not None:
        ev_star = evaluate(problem, care.K_star)
        c_star = ev_star.cost
        xs = ev_star.X.norm_max()
        try:
            rate = theoretical_rate(problem, method, eta, xs)
        except DomainError:
            rate = None

    stop_rule = math.isfinite(tol)
    trace = OptTrace(method=method, eta=eta)
    for n in range(max_iter + 1):
        grad_norm = ev.gradient.norm2()
        rel = abs(ev.cost - c_star) / c_star if c_star is not None else None
        trace.records.append(OptRecord(n, ev.cost, rel, grad_norm, eta, rate, ev.rho))
        trace.policy = ev.policy
        if callback is not None:
            callback(n, ev)
        if stop_rule and rel is not None:
            if rel <= tol:
                trace.status = Status.CONVERGED
                break
            if grad_norm <= 1e-13 * (1.0 + ev.cost):
                trace.status = Status.ANOMALOUS_STATIONARY
                break
        elif stop_rule and grad_norm <= tol * (1.0 + ev.cost):
            trace.status = Status.CONVERGED
            break
        if n == max_iter:
            trace.status = Status.MAX_ITER
            break
        K_new = ev.K - eta * _direction(ev, method)
        try:
            ev_new = Evaluation(problem, K_new, warm=ev)
        except StabilityError as exc:
            if admissible:
                raise StepRejected(
                    f"iterate {n + 1} of {method.value} left the stabilizing set"
                ) from exc
            raise
        if admissible and ev_new.cost > ev.cost + 1e-10 * (1.0 + ev.cost):
            raise StepRejected(f"iterate {n + 1} of {method.value} increased the cost")
        ev = ev_new
    return trace


def step_ratios(trace: OptTrace) -> list[float]:
    """Observed ratios ``(C_{n+1} - C*) / (C_n - C*)`` along a trace with ground truth."""
    out = []
    recs = trace.records
    for a, b in zip(recs, recs[1:]):
        if a.rel_err is None or a.rel_err == 0:
            continue
        out.append(b.rel_err / a.rel_err if math.isfinite(b.rel_err) else math.inf)
    return out
