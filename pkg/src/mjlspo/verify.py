"""Independent oracles and checkers for the cost identities and bounds.

Nothing here reuses the closed-form derivative code paths: finite
differences only call :func:`cost`, the Monte-Carlo estimator simulates the
jump system directly and the series evaluator iterates the operators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (MatTuple, MjlsProblem, Policy, apply_L, closed_loop, cost, evaluate,
                   is_mss)
from .errors import DomainError, StabilityError
from .policy_opt import (MethodKind, _psi_solve, mu_constant, smoothness_constants,
                         value_derivative, hessian_form)
from .riccati import CareSolution

FD_STEP = 1e-5
FD2_STEP = 1e-4
ROLLOUT_CHUNK = 1000


@dataclass(frozen=True)
class RolloutEstimate:
    mean: float
    stderr: float
    horizon: int
    rollouts: int
    seed: int


@dataclass
class FlowTrace:
    method: MethodKind
    times: np.ndarray
    gaps: np.ndarray
    costs: np.ndarray
    gains: list[MatTuple]


def _cost_or_raise(problem, K: MatTuple) -> float:
    try:
        return cost(problem, Policy(K))
    except StabilityError as exc:
        raise StabilityError("finite-difference probe left the stabilizing set") from exc


def fd_gradient(problem: MjlsProblem, policy, h: float = FD_STEP,
                richardson: bool = False) -> MatTuple:
    """Central differences of the cost over every gain entry.

    With ``richardson`` the ``h`` and ``h/2`` estimates are combined to cancel
    the leading truncation term.
    """
    K = evaluate(problem, policy).K
    base = K.blocks

    def central(step):
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            e = np.zeros_like(base)
            e[idx] = step
            g[idx] = (_cost_or_raise(problem, MatTuple(base + e))
                      - _cost_or_raise(problem, MatTuple(base - e))) / (2 * step)
        return g

    g = central(h)
    if richardson:
        g = (4 * central(h / 2) - g) / 3
    return MatTuple(g)


def fd_hessian_form(problem: MjlsProblem, policy, E: MatTuple, h: float = FD2_STEP,
                    richardson: bool = False) -> float:
    """Second central difference of ``t -> C(K + tE)`` at zero."""
    K = evaluate(problem, policy).K
    E = MatTuple(E)
    c0 = _cost_or_raise(problem, K)

    def second(step):
        cp = _cost_or_raise(problem, K + step * E)
        cm = _cost_or_raise(problem, K - step * E)
        return (cp - 2 * c0 + cm) / step**2

    val = second(h)
    if richardson:
        val = (4 * second(h / 2) - val) / 3
    return float(val)


def lyap_series(problem: MjlsProblem, policy, S: MatTuple, terms: int) -> MatTuple:
    """Truncated sum ``sum_{t < terms} L^t(S)``."""
    total = MatTuple(S)
    term = MatTuple(S)
    for _ in range(terms - 1):
        term = apply_L(problem, policy, term)
        total = total + term
    return total


def mc_cost(problem: MjlsProblem, policy, horizon: int, rollouts: int,
            seed: int) -> RolloutEstimate:
    """Monte-Carlo estimate of the truncated quadratic cost.

    ``x0`` is Gaussian with covariance ``sigma0``, ``w(0) ~ pi`` and modes
    follow the chain.  Rollouts are drawn in fixed chunks and chunk ``c``
    uses a Philox stream keyed by ``(seed, c)``, so the estimate does not
    depend on how chunks are scheduled.
    """
    K = evaluate(problem, policy).K
    stable, rho = is_mss(problem, Policy(K))
    if not stable:
        raise StabilityError(rho=rho)
    if horizon < 1 or (rho > 0 and horizon * math.log(rho) > math.log(1e-12)):
        raise DomainError(f"horizon {horizon} too short for spectral radius {rho:.4f}")

    G = closed_loop(problem, Policy(K)).blocks
    W = (problem.Q + K.T @ problem.R @ K).blocks
    cum = np.cumsum(problem.chain.transition, axis=1)
    cum[:, -1] = 1.0
    pi_cum = np.cumsum(problem.chain.initial_dist)
    pi_cum[-1] = 1.0
    chol = np.linalg.cholesky(problem.sigma0)
    d = problem.state_dim

    samples = np.empty(rollouts)
    for c, start in enumerate(range(0, rollouts, ROLLOUT_CHUNK)):
        m = min(ROLLOUT_CHUNK, rollouts - start)
        rng = np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), c]))
        x = rng.standard_normal((m, d)) @ chol.T
        mode = np.searchsorted(pi_cum, rng.random(m), side="right")
        acc = np.zeros(m)
        for _ in range(horizon):
            acc += np.einsum("mi,mij,mj->m", x, W[mode], x)
            x = np.einsum("mij,mj->mi", G[mode], x)
            u = rng.random(m)
            mode = (u[:, None] >= cum[mode]).sum(axis=1)
        samples[start:start + m] = acc
    mean = float(samples.mean())
    stderr = float(samples.std(ddof=1) / math.sqrt(rollouts)) if rollouts > 1 else 0.0
    return RolloutEstimate(mean, stderr, horizon, rollouts, seed)


def almost_smoothness_gap(problem: MjlsProblem, K, K_prime) -> float:
    """``|C(K') - C(K) - (-2<dK^T L^K, X^K'> + <dK^T Psi dK, X^K'>)|``."""
    ev = evaluate(problem, K)
    ev2 = evaluate(problem, K_prime)
    dK = ev.K - ev2.K
    predicted = -2.0 * (dK.T @ ev.L).inner(ev2.X) + (dK.T @ ev.Psi @ dK).inner(ev2.X)
    return abs(ev2.cost - ev.cost - predicted)


def gradient_dominance_slack(problem: MjlsProblem, K, care: CareSolution) -> float:
    """Right side minus left side of the gradient dominance inequality."""
    ev = evaluate(problem, K)
    ev_star = evaluate(problem, care.K_star)
    mu = mu_constant(problem)
    coef = ev_star.X.norm_max() / (4.0 * mu**2 * problem.R.lambda_min())
    return coef * ev.gradient.norm2() ** 2 - (ev.cost - ev_star.cost)


def gradient_dominance_chain(problem: MjlsProblem, K, care: CareSolution) -> list[float]:
    """All four terms of the gradient dominance chain, which must be nondecreasing."""
    ev = evaluate(problem, K)
    ev_star = evaluate(problem, care.K_star)
    xs = ev_star.X.norm_max()
    mu = mu_constant(problem)
    rmin = problem.R.lambda_min()
    return [
        ev.cost - ev_star.cost,
        xs * _psi_solve(ev, ev.L).inner(ev.L),
        xs / rmin * ev.L.norm2() ** 2,
        xs / (4 * mu**2 * rmin) * ev.gradient.norm2() ** 2,
    ]


@dataclass(frozen=True)
class SublevelBounds:
    """Left and right sides of the value, correlation, derivative and Hessian bounds."""

    p_max: float
    p_bound: float
    x_trace: float
    x_bound: float
    dp_max: float
    dp_bound: float
    hess: float
    hess_bound: float

    def holds(self, rtol: float = 1e-9) -> bool:
        pairs = [(self.p_max, self.p_bound), (self.x_trace, self.x_bound),
                 (self.dp_max, self.dp_bound), (abs(self.hess), self.hess_bound)]
        return all(lhs <= rhs * (1 + rtol) + 1e-12 for lhs, rhs in pairs)


def sublevel_bounds(problem: MjlsProblem, policy, E: MatTuple) -> SublevelBounds:
    """Evaluate the four bounds at ``K`` for the direction ``E`` normalized to unit norm."""
    ev = evaluate(problem, policy)
    E = MatTuple(E)
    E = E / E.norm2()
    mu = mu_constant(problem)
    consts = smoothness_constants(problem, ev.cost)
    dP = value_derivative(problem, ev, E)
    return SublevelBounds(
        p_max=ev.P.norm_max(), p_bound=ev.cost / mu,
        x_trace=ev.X.trace_sum(), x_bound=ev.cost / problem.Q.lambda_min(),
        dp_max=dP.norm_max(), dp_bound=consts.xi * ev.P.norm_max(),
        hess=hessian_form(problem, ev, E), hess_bound=consts.smoothness_L,
    )


def _flow_field(problem, K: MatTuple, method: MethodKind) -> MatTuple:
    ev = evaluate(problem, Policy(K))
    if method is MethodKind.GD:
        return -ev.gradient
    if method is MethodKind.GN:
        return -2.0 * _psi_solve(ev, ev.L)
    return -2.0 * ev.L


def ode_flow(problem: MjlsProblem, K0, flow_kind, dt: float, t_end: float,
             care: CareSolution) -> FlowTrace:
    """Integrate the continuous-time limit of a method with classical RK4.

    The natural-gradient field ``-grad C (X^K)^{-1}`` is evaluated as the
    equivalent ``-2 L^K``.
    """
    method = MethodKind.parse(flow_kind)
    c_star = cost(problem, care.K_star)
    K = evaluate(problem, K0).K
    steps = int(round(t_end / dt))
    times = np.arange(steps + 1) * dt
    costs = [cost(problem, Policy(K))]
    gains = [K]
    try:
        for _ in range(steps):
            k1 = _flow_field(problem, K, method)
            k2 = _flow_field(problem, K + (dt / 2) * k1, method)
            k3 = _flow_field(problem, K + (dt / 2) * k2, method)
            k4 = _flow_field(problem, K + dt * k3, method)
            K = K + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            costs.append(cost(problem, Policy(K)))
            gains.append(K)
    except StabilityError as exc:
        raise StabilityError(f"integrator stage left the stabilizing set; reduce dt={dt}") from exc
    costs = np.array(costs)
    return FlowTrace(method, times, costs - c_star, costs, gains)


def gradient_flow_decay_rate(problem: MjlsProblem, care: CareSolution) -> float:
    """Certified exponential decay rate ``4 mu^2 Lambda_min(R) / ||X^{K*}||_max``."""
    xs = evaluate(problem, care.K_star).X.norm_max()
    return 4.0 * mu_constant(problem) ** 2 * problem.R.lambda_min() / xs


def coercivity_probe(problem: MjlsProblem, K_star, direction: MatTuple,
                     iters: int = 200) -> tuple[float, float, float]:
    """Walk ``K* + s D`` towards the boundary of the stabilizing set.

    Returns ``(cost_low, cost_edge, rho_edge)`` where ``cost_low`` is taken at
    the largest sampled ``s`` with radius at most 0.5 and ``cost_edge`` at a
    bisection point just inside the boundary with radius at least 0.9999.
    """
    K = evaluate(problem, K_star).K
    D = MatTuple(direction)

    def rho(s):
        return is_mss(problem, Policy(K + s * D))[1]

    lo, hi = 0.0, 1.0
    while rho(hi) < 1.0:
        lo, hi = hi, 2 * hi
        if hi > 1e8:
            raise DomainError("direction never leaves the stabilizing set")
    s_low = 0.0
    for s in np.linspace(0.0, hi, 41):
        if rho(s) <= 0.5:
            s_low = s
        else:
            break
    if rho(s_low) > 0.5:
        raise DomainError("no sample along the ray has spectral radius <= 0.5")
    r_edge = rho(lo)
    for _ in range(iters):
        if r_edge >= 0.9999:
            break
        mid = 0.5 * (lo + hi)
        r_mid = rho(mid)
        if r_mid < 1.0 - 1e-6:
            lo, r_edge = mid, r_mid
        else:
            hi = mid
    return cost(problem, Policy(K + s_low * D)), cost(problem, Policy(K + lo * D)), r_edge
