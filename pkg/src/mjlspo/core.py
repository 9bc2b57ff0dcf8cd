"""Matrix tuples, the mode-coupled operators and coupled Lyapunov solvers.

Conventions
-----------
A tuple ``V = (V_1, ..., V_N)`` is stored as a read-only array of shape
``(N, r, c)``.  Vectorization is column-major per block with the blocks
stacked in mode order, and the lifted matrix ``A_lift`` is defined by the
identity ``vec(L(V)) = A_lift @ vec(V)``.  With that convention the
covariance operator ``T`` is represented by ``A_lift.T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .errors import DimensionError, SingularSystem, StabilityError

MSS_MARGIN = 1e-9
LYAP_TOL = 1e-10

# Lifted sizes (N * d**2) above which matrix-free methods replace dense ones.
DENSE_SOLVE_LIMIT = 1500
DENSE_EIG_LIMIT = 400


class MatTuple:
    """An N-tuple of equally shaped real matrices.

    Arithmetic is blockwise: ``+``, ``-`` and scalar ``*`` act entrywise,
    ``@`` multiplies matching blocks and ``.T`` transposes every block.
    Instances are immutable.
    """

    __slots__ = ("_blocks",)
    __array_priority__ = 100

    def __init__(self, blocks):
        if isinstance(blocks, MatTuple):
            arr = blocks._blocks
        elif isinstance(blocks, np.ndarray) and blocks.ndim == 3:
            arr = np.array(blocks, dtype=float)
        else:
            mats = [np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks]
            if not mats:
                raise DimensionError("a MatTuple needs at least one block")
            shape = mats[0].shape
            if any(m.ndim != 2 or m.shape != shape for m in mats):
                raise DimensionError("all blocks must be 2-D with one common shape")
            arr = np.stack(mats)
        if arr.ndim != 3 or arr.shape[0] < 1:
            raise DimensionError(f"expected an (N, r, c) array, got shape {arr.shape}")
        arr = np.array(arr, dtype=float, copy=True)
        arr.flags.writeable = False
        self._blocks = arr

    @classmethod
    def zeros(cls, n, rows, cols=None):
        return cls(np.zeros((n, rows, rows if cols is None else cols)))

    @classmethod
    def identity(cls, n, d):
        return cls(np.broadcast_to(np.eye(d), (n, d, d)))

    @classmethod
    def from_vec(cls, v, n, rows, cols=None):
        """Inverse of :meth:`vec`."""
        cols = rows if cols is None else cols
        v = np.asarray(v, dtype=float)
        if v.size != n * rows * cols:
            raise DimensionError("vector length does not match the tuple shape")
        return cls(v.reshape(n, cols, rows).transpose(0, 2, 1))

    @property
    def blocks(self) -> np.ndarray:
        return self._blocks

    @property
    def n(self) -> int:
        return self._blocks.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        """Shape ``(r, c)`` shared by every block."""
        return self._blocks.shape[1:]

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        return self._blocks[i]

    def __iter__(self):
        return iter(self._blocks)

    def __repr__(self):
        return f"MatTuple(n={self.n}, shape={self.shape})"

    def _check(self, other: MatTuple) -> None:
        if self._blocks.shape != other._blocks.shape:
            raise DimensionError(
                f"tuple shapes differ: {self._blocks.shape} vs {other._blocks.shape}"
            )

    def __add__(self, other):
        if not isinstance(other, MatTuple):
            return NotImplemented
        self._check(other)
        return MatTuple(self._blocks + other._blocks)

    def __sub__(self, other):
        if not isinstance(other, MatTuple):
            return NotImplemented
        self._check(other)
        return MatTuple(self._blocks - other._blocks)

    def __neg__(self):
        return MatTuple(-self._blocks)

    def __mul__(self, scalar):
        if isinstance(scalar, MatTuple):
            return NotImplemented
        return MatTuple(self._blocks * float(scalar))

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return MatTuple(self._blocks / float(scalar))

    def __matmul__(self, other):
        if not isinstance(other, MatTuple):
            return NotImplemented
        if other.n != self.n or self.shape[1] != other.shape[0]:
            raise DimensionError(
                f"cannot multiply tuples {self._blocks.shape} and {other._blocks.shape}"
            )
        return MatTuple(self._blocks @ other._blocks)

    @property
    def T(self) -> MatTuple:
        return MatTuple(self._blocks.transpose(0, 2, 1))

    def sym(self) -> MatTuple:
        return MatTuple(0.5 * (self._blocks + self._blocks.transpose(0, 2, 1)))

    def vec(self) -> np.ndarray:
        """Column-major vectorization of each block, stacked in mode order."""
        return self._blocks.transpose(0, 2, 1).reshape(-1).copy()

    def inner(self, other: MatTuple) -> float:
        """``<V, S> = sum_i tr(V_i^T S_i)``."""
        self._check(other)
        return float(np.sum(self._blocks * other._blocks))

    def norm1(self) -> float:
        return float(sum(np.linalg.norm(b, 2) for b in self._blocks))

    def norm2(self) -> float:
        return float(np.linalg.norm(self._blocks.ravel()))

    def norm_max(self) -> float:
        return float(max(np.linalg.norm(b, 2) for b in self._blocks))

    def lambda_min(self) -> float:
        """Smallest singular value over all blocks."""
        return float(min(np.linalg.svd(b, compute_uv=False)[-1] for b in self._blocks))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self._blocks)))

    def trace_sum(self) -> float:
        return float(np.trace(self._blocks, axis1=1, axis2=2).sum())

    def min_eig(self) -> float:
        """Smallest eigenvalue over all (symmetrized) blocks."""
        s = 0.5 * (self._blocks + self._blocks.transpose(0, 2, 1))
        return float(np.linalg.eigvalsh(s).min())

    def is_symmetric(self, rtol=1e-10) -> bool:
        asym = np.max(np.abs(self._blocks - self._blocks.transpose(0, 2, 1)))
        return bool(asym <= rtol * max(1.0, self.max_abs()))

    def inv(self) -> MatTuple:
        return MatTuple(np.linalg.inv(self._blocks))

    def allclose(self, other, rtol=1e-9, atol=1e-12) -> bool:
        other = other if isinstance(other, MatTuple) else MatTuple(other)
        return self._blocks.shape == other._blocks.shape and bool(
            np.allclose(self._blocks, other._blocks, rtol=rtol, atol=atol)
        )

    def tolist(self) -> list:
        return self._blocks.tolist()


def _positive_definite(m: np.ndarray) -> bool:
    if not np.allclose(m, m.T, rtol=1e-10, atol=1e-12):
        return False
    return bool(np.linalg.eigvalsh(0.5 * (m + m.T)).min() > 0)


@dataclass(frozen=True, eq=False)
class MarkovChain:
    """Mode transition matrix ``p_ij = Pr(w(t+1)=j | w(t)=i)`` and initial law."""

    transition: np.ndarray
    initial_dist: np.ndarray

    def __post_init__(self):
        p = np.array(np.atleast_2d(self.transition), dtype=float)
        pi = np.array(np.atleast_1d(self.initial_dist), dtype=float)
        n = p.shape[0]
        if p.ndim != 2 or p.shape != (n, n):
            raise DimensionError("transition matrix must be square")
        if pi.shape != (n,):
            raise DimensionError("initial distribution length must match the chain")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("transition matrix must be row-stochastic")
        if np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-12:
            raise ValueError("initial mode probabilities must be positive and sum to 1")
        p.flags.writeable = False
        pi.flags.writeable = False
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "initial_dist", pi)

    @property
    def n(self) -> int:
        return self.transition.shape[0]


@dataclass(frozen=True, eq=False)
class MjlsProblem:
    """Dynamics ``x+ = A_w x + B_w u``, stage costs ``Q_w, R_w``, chain and ``E[x0 x0^T]``."""

    A: MatTuple
    B: MatTuple
    Q: MatTuple
    R: MatTuple
    chain: MarkovChain
    sigma0: np.ndarray

    def __post_init__(self):
        A, B, Q, R = (MatTuple(m) for m in (self.A, self.B, self.Q, self.R))
        n = self.chain.n
        d = A.shape[0]
        k = B.shape[1]
        if any(t.n != n for t in (A, B, Q, R)):
            raise DimensionError("every tuple must have one block per mode")
        if A.shape != (d, d) or B.shape != (d, k) or Q.shape != (d, d) or R.shape != (k, k):
            raise DimensionError("inconsistent state/input dimensions")
        for name, t in (("Q", Q), ("R", R)):
            if not all(_positive_definite(b) for b in t):
                raise ValueError(f"{name} must be symmetric positive definite in every mode")
        s0 = np.array(np.atleast_2d(self.sigma0), dtype=float)
        if s0.shape != (d, d) or not _positive_definite(s0):
            raise ValueError("sigma0 must be a symmetric positive definite d x d matrix")
        s0.flags.writeable = False
        for name, val in (("A", A), ("B", B), ("Q", Q), ("R", R), ("sigma0", s0)):
            object.__setattr__(self, name, val)

    @property
    def num_modes(self) -> int:
        return self.chain.n

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    @cached_property
    def x0_corr(self) -> MatTuple:
        """``X(0)`` with blocks ``pi_i * E[x0 x0^T]``."""
        return MatTuple(self.chain.initial_dist[:, None, None] * self.sigma0[None])


@dataclass(frozen=True, eq=False)
class Policy:
    """Mode-dependent state feedback ``u_t = -K_w x_t``."""

    K: MatTuple

    def __post_init__(self):
        object.__setattr__(self, "K", MatTuple(self.K))

    @classmethod
    def zeros(cls, problem: MjlsProblem) -> Policy:
        return cls(MatTuple.zeros(problem.num_modes, problem.input_dim, problem.state_dim))


@dataclass(frozen=True, eq=False)
class ValueCertificate:
    """Value matrices ``P^K``, the cost and the relative Lyapunov residual."""

    P: MatTuple
    cost: float
    lyap_residual: float


def _gains(problem: MjlsProblem, policy) -> MatTuple:
    K = policy.K if isinstance(policy, Policy) else MatTuple(policy)
    if K.n != problem.num_modes or K.shape != (problem.input_dim, problem.state_dim):
        raise DimensionError(
            f"policy shape {K.blocks.shape} incompatible with problem "
            f"({problem.num_modes}, {problem.input_dim}, {problem.state_dim})"
        )
    return K


def _check_square_tuple(problem: MjlsProblem, V: MatTuple) -> MatTuple:
    V = MatTuple(V)
    d = problem.state_dim
    if V.n != problem.num_modes or V.shape != (d, d):
        raise DimensionError(f"expected a ({problem.num_modes}, {d}, {d}) tuple")
    return V


def mode_expectation(chain: MarkovChain, V: MatTuple) -> MatTuple:
    """``E_i(V) = sum_j p_ij V_j``."""
    V = MatTuple(V)
    if V.n != chain.n:
        raise DimensionError("tuple length differs from the number of modes")
    return MatTuple(np.einsum("ij,jrc->irc", chain.transition, V.blocks))


def closed_loop(problem: MjlsProblem, policy) -> MatTuple:
    """Closed-loop matrices ``A_i - B_i K_i``."""
    K = _gains(problem, policy)
    return problem.A - problem.B @ K


def _apply_T(P: np.ndarray, G: np.ndarray, V: np.ndarray) -> np.ndarray:
    return np.einsum("ij,irc->jrc", P, G @ V @ G.transpose(0, 2, 1))


def _apply_L(P: np.ndarray, G: np.ndarray, V: np.ndarray) -> np.ndarray:
    return G.transpose(0, 2, 1) @ np.einsum("ij,jrc->irc", P, V) @ G


def apply_T(problem: MjlsProblem, policy, V: MatTuple) -> MatTuple:
    """Covariance propagation ``T_j(V) = sum_i p_ij G_i V_i G_i^T``."""
    V = _check_square_tuple(problem, V)
    G = closed_loop(problem, policy).blocks
    return MatTuple(_apply_T(problem.chain.transition, G, V.blocks))


def apply_L(problem: MjlsProblem, policy, V: MatTuple) -> MatTuple:
    """Value propagation ``L_i(V) = G_i^T E_i(V) G_i``, the adjoint of :func:`apply_T`."""
    V = _check_square_tuple(problem, V)
    G = closed_loop(problem, policy).blocks
    return MatTuple(_apply_L(problem.chain.transition, G, V.blocks))


def _lifted(P: np.ndarray, G: np.ndarray) -> np.ndarray:
    n, d, _ = G.shape
    kron = np.stack([np.kron(g.T, g.T) for g in G])
    return np.einsum("ij,iab->iajb", P, kron).reshape(n * d * d, n * d * d)


def lifted_matrix(problem: MjlsProblem, policy) -> np.ndarray:
    """Matrix of ``L`` under column-major vectorization (side ``N d^2``).

    Block ``(i, j)`` equals ``p_ij * kron(G_i^T, G_i^T)``.
    """
    G = closed_loop(problem, policy).blocks
    return _lifted(problem.chain.transition, G)


def _operator(P: np.ndarray, G: np.ndarray, transpose: bool = False) -> spla.LinearOperator:
    n, d, _ = G.shape
    size = n * d * d
    fwd, adj = (_apply_T, _apply_L) if transpose else (_apply_L, _apply_T)

    def unvec(v):
        return v.reshape(n, d, d).transpose(0, 2, 1)

    def revec(m):
        return m.transpose(0, 2, 1).reshape(-1)

    return spla.LinearOperator(
        (size, size),
        matvec=lambda v: revec(fwd(P, G, unvec(np.ravel(v)))),
        rmatvec=lambda v: revec(adj(P, G, unvec(np.ravel(v)))),
        dtype=float,
    )


def _spectral_radius(P: np.ndarray, G: np.ndarray, v0: np.ndarray | None = None
                     ) -> tuple[float, np.ndarray | None]:
    """Return ``(rho, v)`` where ``v`` is a dominant eigenvector for warm starts."""
    n, d, _ = G.shape
    size = n * d * d
    if size <= DENSE_EIG_LIMIT:
        return float(np.max(np.abs(np.linalg.eigvals(_lifted(P, G))))), None
    op = _operator(P, G)
    if v0 is None or v0.shape != (size,) or not np.any(v0):
        v0 = np.ones(size)
    k = min(4, size - 2)
    try:
        vals, vecs = spla.eigs(op, k=k, which="LM", tol=1e-12, ncv=min(size - 1, 40),
                               maxiter=20 * size, v0=v0)
    except spla.ArpackNoConvergence as exc:
        vals, vecs = exc.eigenvalues, exc.eigenvectors
        if len(vals) == 0:
            raise SingularSystem("spectral radius iteration did not converge") from exc
    top = int(np.argmax(np.abs(vals)))
    vec = np.real(vecs[:, top]) if np.any(np.real(vecs[:, top])) else np.abs(vecs[:, top])
    return float(np.abs(vals[top])), vec


def spectral_radius(problem: MjlsProblem, policy) -> float:
    """Spectral radius of the lifted matrix."""
    G = closed_loop(problem, policy).blocks
    return _spectral_radius(problem.chain.transition, G)[0]


def is_mss(problem: MjlsProblem, policy) -> tuple[bool, float]:
    """Mean-square stability test; returns ``(stable, rho)``.

    Radii within ``MSS_MARGIN`` of one are reported as unstable.
    """
    rho = spectral_radius(problem, policy)
    return rho < 1.0 - MSS_MARGIN, rho


class CoupledLyapunov:
    """Solver for ``V - L(V) = S`` and ``V - T(V) = S`` at a fixed closed loop.

    Small lifted systems are factorized once and the factorization is shared
    by both equations; larger ones use restarted GMRES on the matrix-free
    operator.  Every solution is certified by its residual.
    """

    def __init__(self, transition: np.ndarray, gamma: np.ndarray, tol: float = LYAP_TOL):
        self.transition = transition
        self.gamma = gamma
        self.tol = tol
        n, d, _ = gamma.shape
        self.size = n * d * d
        self.dense = self.size <= DENSE_SOLVE_LIMIT
        self._lu = None

    def _factor(self):
        if self._lu is None:
            m = np.eye(self.size) - _lifted(self.transition, self.gamma)
            try:
                self._lu = sla.lu_factor(m, check_finite=True)
            except (ValueError, sla.LinAlgError) as exc:
                raise SingularSystem("lifted Lyapunov system is singular") from exc
            if np.min(np.abs(np.diag(self._lu[0]))) == 0.0:
                raise SingularSystem("lifted Lyapunov system is singular")
        return self._lu

    def _apply(self, V: np.ndarray, adjoint: bool) -> np.ndarray:
        f = _apply_T if adjoint else _apply_L
        return f(self.transition, self.gamma, V)

    def _raw_solve(self, s: np.ndarray, adjoint: bool) -> np.ndarray:
        if not s.any():
            return np.zeros_like(s)
        if self.dense:
            return sla.lu_solve(self._factor(), s, trans=1 if adjoint else 0)
        op = _operator(self.transition, self.gamma, transpose=adjoint)
        sys_op = spla.LinearOperator(op.shape, matvec=lambda v: v - op.matvec(v), dtype=float)
        x, info = spla.gmres(sys_op, s, rtol=1e-14, atol=0.0, restart=80, maxiter=200)
        if info < 0 or not np.all(np.isfinite(x)):
            raise SingularSystem("GMRES breakdown on the coupled Lyapunov system")
        return x

    def solve(self, S: MatTuple, adjoint: bool = False,
              guess: MatTuple | None = None) -> tuple[MatTuple, float]:
        """Return ``(V, relative_residual)``; ``adjoint`` selects the ``T`` equation.

        ``guess`` only seeds the iteration and never changes the certified result.
        """
        S = MatTuple(S)
        n, d, _ = self.gamma.shape
        sym = S.is_symmetric()
        s_vec = S.vec()
        v = np.zeros_like(s_vec)
        if guess is not None and not self.dense and guess.blocks.shape == S.blocks.shape:
            v = guess.vec()
        rel = np.inf
        # a couple of refinement passes recover accuracy lost to conditioning
        for _ in range(4):
            V = MatTuple.from_vec(v, n, d)
            r = S.blocks - (V.blocks - self._apply(V.blocks, adjoint))
            scale = max(S.max_abs(), V.max_abs(), np.finfo(float).tiny)
            rel = float(np.max(np.abs(r)) / scale) if v.any() else np.inf
            if rel <= 0.01 * self.tol:
                break
            v = v + self._raw_solve(MatTuple(r).vec(), adjoint)
        V = MatTuple.from_vec(v, n, d)
        if sym:
            V = V.sym()
        r = S.blocks - (V.blocks - self._apply(V.blocks, adjoint))
        scale = max(S.max_abs(), V.max_abs(), np.finfo(float).tiny)
        rel = float(np.max(np.abs(r)) / scale)
        if not np.isfinite(rel) or rel > self.tol:
            raise SingularSystem(f"coupled Lyapunov residual {rel:.3e} exceeds {self.tol:.1e}")
        return V, rel


class Evaluation:
    """Cached policy evaluation: closed loop, radius, ``P^K``, ``X^K`` and cost.

    Constructing one raises :class:`StabilityError` when the policy is not
    mean-square stabilizing.  All derived quantities are computed lazily and
    share one Lyapunov factorization.  ``warm`` (a nearby evaluation) seeds
    the iterative solvers used for large lifted systems.
    """

    def __init__(self, problem: MjlsProblem, policy, warm: Evaluation | None = None):
        self.problem = problem
        self.K = _gains(problem, policy)
        self.gamma = problem.A - problem.B @ self.K
        # keep only arrays from the warm start, not the evaluation itself
        self._guess_P = None if warm is None else warm.__dict__.get("_value", (None,))[0]
        self._guess_X = None if warm is None else warm.__dict__.get("X")
        self.rho, self.rho_vector = _spectral_radius(
            problem.chain.transition, self.gamma.blocks,
            None if warm is None else warm.rho_vector)
        if not self.rho < 1.0 - MSS_MARGIN:
            raise StabilityError(f"spectral radius {self.rho:.12g} is not below one", rho=self.rho)
        self.lyap = CoupledLyapunov(problem.chain.transition, self.gamma.blocks)

    @property
    def policy(self) -> Policy:
        return Policy(self.K)

    def solve_L(self, S: MatTuple) -> MatTuple:
        return self.lyap.solve(S)[0]

    def solve_T(self, S: MatTuple) -> MatTuple:
        return self.lyap.solve(S, adjoint=True)[0]

    @cached_property
    def _value(self) -> tuple[MatTuple, float]:
        pb = self.problem
        guess, self._guess_P = self._guess_P, None
        return self.lyap.solve(pb.Q + self.K.T @ pb.R @ self.K, guess=guess)

    @property
    def P(self) -> MatTuple:
        return self._value[0]

    @property
    def lyap_residual(self) -> float:
        return self._value[1]

    @cached_property
    def X(self) -> MatTuple:
        guess, self._guess_X = self._guess_X, None
        return self.lyap.solve(self.problem.x0_corr, adjoint=True, guess=guess)[0]

    @cached_property
    def cost(self) -> float:
        pb = self.problem
        return float(np.einsum("i,irc,rc->", pb.chain.initial_dist, self.P.blocks, pb.sigma0))

    @cached_property
    def EP(self) -> MatTuple:
        return mode_expectation(self.problem.chain, self.P)

    @cached_property
    def Psi(self) -> MatTuple:
        """``R + B^T E(P^K) B``."""
        pb = self.problem
        return pb.R + pb.B.T @ self.EP @ pb.B

    @cached_property
    def L(self) -> MatTuple:
        """Gain residual ``Psi K - B^T E(P^K) A``."""
        pb = self.problem
        return self.Psi @ self.K - pb.B.T @ self.EP @ pb.A

    @cached_property
    def gradient(self) -> MatTuple:
        return 2.0 * (self.L @ self.X)

    def certificate(self) -> ValueCertificate:
        return ValueCertificate(self.P, self.cost, self.lyap_residual)


def evaluate(problem: MjlsProblem, policy) -> Evaluation:
    """Evaluate a policy once and reuse the result for every derived quantity."""
    if isinstance(policy, Evaluation):
        return policy
    return Evaluation(problem, policy)


def solve_lyap_L(problem: MjlsProblem, policy, S: MatTuple) -> MatTuple:
    """Unique ``V`` with ``V - L(V) = S``."""
    S = _check_square_tuple(problem, S)
    return evaluate(problem, policy).solve_L(S)


def solve_lyap_T(problem: MjlsProblem, policy, S: MatTuple) -> MatTuple:
    """Unique ``V`` with ``V - T(V) = S``."""
    S = _check_square_tuple(problem, S)
    return evaluate(problem, policy).solve_T(S)


def value_matrices(problem: MjlsProblem, policy) -> ValueCertificate:
    """``P^K`` from the coupled Lyapunov equations together with ``C(K)``."""
    return evaluate(problem, policy).certificate()


def state_correlation(problem: MjlsProblem, policy) -> MatTuple:
    """``X^K = sum_t T^t(X(0))`` with ``X_i(0) = pi_i E[x0 x0^T]``."""
    return evaluate(problem, policy).X


def cost(problem: MjlsProblem, policy) -> float:
    """``C(K) = sum_i pi_i tr(P_i^K E[x0 x0^T])``."""
    return evaluate(problem, policy).cost
