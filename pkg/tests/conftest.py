import numpy as np
import pytest

from mjlspo import MarkovChain, MatTuple, MjlsProblem, Policy, is_mss
from mjlspo.bench import GenSpec, random_instance


def scalar_tuple(*vals):
    return MatTuple([[[v]] for v in vals])


def make_f1():
    return MjlsProblem(scalar_tuple(0.9), scalar_tuple(1.0), scalar_tuple(1.0), scalar_tuple(1.0),
                       MarkovChain([[1.0]], [1.0]), np.eye(1))


def make_f2(a=(1.2, 0.5)):
    return MjlsProblem(scalar_tuple(*a), scalar_tuple(1.0, 1.0), scalar_tuple(1.0, 1.0),
                       scalar_tuple(1.0, 1.0), MarkovChain([[0.5, 0.5], [0.5, 0.5]], [0.5, 0.5]),
                       np.eye(1))


def gain(*vals):
    return Policy(scalar_tuple(*vals))


def small_instance(seed):
    """Random problem with d <= 4, k <= 2, N <= 4 keyed by ``seed``."""
    rng = np.random.default_rng(1000 + seed)
    d = int(rng.integers(1, 5))
    k = int(rng.integers(1, 3))
    n = int(rng.integers(1, 5))
    radius = float(rng.uniform(0.5, 0.95))
    return random_instance(GenSpec(d, k, n, seed=seed, target_radius=radius))[0]


def random_stabilizing(problem, rng, center=None, scale=1.0, min_margin=1e-3):
    """Random gain near ``center`` (default zero), shrunk until it is stabilizing."""
    base = np.zeros((problem.num_modes, problem.input_dim, problem.state_dim)) \
        if center is None else center.K.blocks
    D = rng.standard_normal(base.shape)
    t = scale
    for _ in range(60):
        pol = Policy(MatTuple(base + t * D))
        stable, rho = is_mss(problem, pol)
        if stable and rho < 1 - min_margin:
            return pol
        t *= 0.5
    return Policy(MatTuple(base))


@pytest.fixture
def f1():
    return make_f1()


@pytest.fixture
def f2():
    return make_f2()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[num])
