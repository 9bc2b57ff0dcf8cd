"""Random instances, problem files, experiment runs and trace output.

Problem files are single JSON documents::

    {"version": 1, "generator": "...", "num_modes": N, "state_dim": d,
     "input_dim": k, "A": [...], "B": [...], "Q": [...], "R": [...],
     "transition": [[...]], "initial_dist": [...], "initial_covariance": [[...]]}

Tuple-valued fields are lists of N row-major matrices.  Floats are written
with Python's shortest round-trip repr, so a file reloads bit-exactly.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import MarkovChain, MatTuple, MjlsProblem, Policy, spectral_radius
from .errors import GenerationFailed
from .policy_opt import MethodKind, OptTrace, optimize
from .riccati import CareSolution, solve_care

FORMAT_VERSION = 1
GENERATOR_ID = "mjlspo-gen-1"
CSV_COLUMNS = ["iter", "cost", "rel_err", "grad_norm2", "eta", "rate_bound", "rho_lifted"]


@dataclass(frozen=True)
class GenSpec:
    state_dim: int
    input_dim: int
    num_modes: int
    seed: int = 0
    dirichlet_kappa: float | None = None
    target_radius: float = 0.9

    def __post_init__(self):
        if min(self.state_dim, self.input_dim, self.num_modes) < 1:
            raise ValueError("dimensions must be at least 1")
        if not 0.0 < self.target_radius < 1.0:
            raise ValueError("target_radius must lie in (0, 1)")
        if self.dirichlet_kappa is not None and not self.dirichlet_kappa > 0:
            raise ValueError("dirichlet_kappa must be positive")

    @property
    def kappa(self) -> float:
        if self.dirichlet_kappa is not None:
            return float(self.dirichlet_kappa)
        return float(max(self.num_modes - 1, 1))


def random_instance(spec: GenSpec, max_retries: int = 10) -> tuple[MjlsProblem, Policy]:
    """Draw a problem for which ``K = 0`` has lifted spectral radius ``target_radius``.

    Transition rows are Dirichlet with concentration ``kappa * e_i + 1``, the
    initial mode is uniform, ``Q_i = R_i = I`` and ``E[x0 x0^T] = I / 12``.
    ``A`` has Gaussian entries rescaled by one common factor; ``B`` is Gaussian.
    """
    n, d, k = spec.num_modes, spec.state_dim, spec.input_dim
    rng = np.random.default_rng(spec.seed)
    for _ in range(max_retries):
        P = np.stack([rng.dirichlet(spec.kappa * np.eye(n)[i] + 1.0) for i in range(n)])
        P /= P.sum(axis=1, keepdims=True)
        A = rng.standard_normal((n, d, d))
        B = rng.standard_normal((n, d, k))
        chain = MarkovChain(P, np.full(n, 1.0 / n))
        eye = MatTuple.identity(n, d)
        probe = MjlsProblem(MatTuple(A), MatTuple(B), eye, MatTuple.identity(n, k), chain,
                            np.eye(d) / 12.0)
        zero = Policy.zeros(probe)
        rho = spectral_radius(probe, zero)
        if rho > 1e-12 and np.isfinite(rho):
            # the lifted matrix is quadratic in A
            A = A * math.sqrt(spec.target_radius / rho)
            problem = MjlsProblem(MatTuple(A), MatTuple(B), eye, MatTuple.identity(n, k), chain,
                                  np.eye(d) / 12.0)
            return problem, zero
    raise GenerationFailed("could not draw an A tuple with nonzero spectral radius")


def problem_to_dict(problem: MjlsProblem) -> dict:
    return {
        "version": FORMAT_VERSION,
        "generator": GENERATOR_ID,
        "num_modes": problem.num_modes,
        "state_dim": problem.state_dim,
        "input_dim": problem.input_dim,
        "A": problem.A.tolist(),
        "B": problem.B.tolist(),
        "Q": problem.Q.tolist(),
        "R": problem.R.tolist(),
        "transition": problem.chain.transition.tolist(),
        "initial_dist": problem.chain.initial_dist.tolist(),
        "initial_covariance": problem.sigma0.tolist(),
    }


def problem_from_dict(doc: dict) -> MjlsProblem:
    """Build a problem from a parsed file; raises ``ValueError`` on malformed content."""
    try:
        if int(doc.get("version", FORMAT_VERSION)) != FORMAT_VERSION:
            raise ValueError(f"unsupported problem file version {doc['version']}")
        problem = MjlsProblem(
            MatTuple(np.array(doc["A"], dtype=float)),
            MatTuple(np.array(doc["B"], dtype=float)),
            MatTuple(np.array(doc["Q"], dtype=float)),
            MatTuple(np.array(doc["R"], dtype=float)),
            MarkovChain(np.array(doc["transition"], dtype=float),
                        np.array(doc["initial_dist"], dtype=float)),
            np.array(doc["initial_covariance"], dtype=float),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed problem document: {exc}") from exc
    for key, val in (("num_modes", problem.num_modes), ("state_dim", problem.state_dim),
                     ("input_dim", problem.input_dim)):
        if key in doc and int(doc[key]) != val:
            raise ValueError(f"{key}={doc[key]} disagrees with the matrices ({val})")
    return problem


def dumps_problem(problem: MjlsProblem) -> str:
    return json.dumps(problem_to_dict(problem), indent=1) + "\n"


def load_problem(path) -> MjlsProblem:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc})") from exc
    return problem_from_dict(doc)


def save_problem(problem: MjlsProblem, path) -> None:
    Path(path).write_text(dumps_problem(problem), encoding="utf-8")


def load_policy(path, problem: MjlsProblem) -> Policy:
    """Read ``{"K": [...]}`` (or a bare list of gain matrices)."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    gains = doc["K"] if isinstance(doc, dict) else doc
    K = MatTuple(np.array(gains, dtype=float))
    if K.n != problem.num_modes or K.shape != (problem.input_dim, problem.state_dim):
        raise ValueError("policy shape does not match the problem")
    return Policy(K)


def care_to_dict(problem: MjlsProblem, care: CareSolution) -> dict:
    from .core import cost

    return {
        "P_star": care.P_star.tolist(),
        "K_star": care.gain.tolist(),
        "cost": cost(problem, care.K_star),
        "iterations": care.iterations,
        "residual": care.residual,
    }


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def trace_csv(trace: OptTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in trace.records:
        w.writerow([r.iter, _fmt(r.cost), _fmt(r.rel_err), _fmt(r.grad_norm2), _fmt(r.eta),
                    _fmt(r.rate_bound), _fmt(r.rho_lifted)])
    return buf.getvalue()


_COLORS = {"gd": "#1f77b4", "gn": "#d62728", "npg": "#2ca02c"}
_LABELS = {"gd": "Gradient descent", "gn": "Gauss-Newton", "npg": "Natural policy gradient"}


def render_svg(traces: dict[str, OptTrace], title: str = "Relative error vs. iteration") -> str:
    """Log-scale relative error against iteration, one polyline per method."""
    width, height = 800, 500
    left, right, top, bottom = 80, 30, 40, 60
    pw, ph = width - left - right, height - top - bottom
    series = {}
    for name, tr in traces.items():
        pts = [(r.iter, r.rel_err) for r in tr.records
               if r.rel_err is not None and r.rel_err > 0 and math.isfinite(r.rel_err)]
        if pts:
            series[name] = pts
    all_pts = [p for pts in series.values() for p in pts]
    xmax = max((p[0] for p in all_pts), default=1) or 1
    ymin = math.floor(math.log10(min((p[1] for p in all_pts), default=1e-1)))
    ymax = math.ceil(math.log10(max((p[1] for p in all_pts), default=1.0)))
    if ymax <= ymin:
        ymax = ymin + 1

    def sx(x):
        return left + pw * x / xmax

    def sy(y):
        return top + ph * (ymax - math.log10(y)) / (ymax - ymin)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}" '
        f'width="{width}" height="{height}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="22" text-anchor="middle" font-size="15">{title}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for e in range(ymin, ymax + 1):
        y = top + ph * (ymax - e) / (ymax - ymin)
        out.append(f'<line x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" '
                   f'stroke="#dddddd"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end">1e{e}</text>')
    for i in range(6):
        xv = xmax * i / 5
        out.append(f'<text x="{sx(xv):.2f}" y="{top + ph + 18}" text-anchor="middle">'
                   f'{xv:.0f}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 15}" text-anchor="middle">iteration</text>')
    out.append(f'<text x="20" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 20 {top + ph / 2})">relative error</text>')
    for idx, (name, pts) in enumerate(series.items()):
        color = _COLORS.get(name, "#444444")
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{coords}"/>')
        ly = top + 18 + 18 * idx
        lx = left + pw - 190
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 24}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{lx + 30}" y="{ly + 4}">{_LABELS.get(name, name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


@dataclass
class ExperimentConfig:
    problem: MjlsProblem | None = None
    problem_path: str | None = None
    gen: GenSpec | None = None
    methods: list[str] = field(default_factory=lambda: ["gd", "gn", "npg"])
    eta: dict[str, object] = field(default_factory=dict)
    tol: float = 1e-10
    max_iter: int = 1000
    out_dir: str | None = None
    svg_path: str | None = None
    K0: Policy | None = None
    # observer called as callback(method, iterate, evaluation)
    callback: Callable[[str, int, object], None] | None = None

    def resolve_problem(self) -> tuple[MjlsProblem, Policy]:
        if self.problem is not None:
            pb = self.problem
        elif self.problem_path is not None:
            pb = load_problem(self.problem_path)
        elif self.gen is not None:
            pb = random_instance(self.gen)[0]
        else:
            raise ValueError("experiment needs a problem, a problem file or a GenSpec")
        return pb, self.K0 if self.K0 is not None else Policy.zeros(pb)


@dataclass
class ExperimentResult:
    problem: MjlsProblem
    care: CareSolution
    traces: dict[str, OptTrace]
    csv_paths: dict[str, Path] = field(default_factory=dict)
    svg_path: Path | None = None


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Solve the Riccati equations once, run each method and write CSV/SVG outputs."""
    if not config.methods:
        raise ValueError("at least one method is required")
    if not config.tol > 0:
        raise ValueError("tol must be positive")
    problem, K0 = config.resolve_problem()
    care = solve_care(problem)
    traces = {}
    for name in config.methods:
        m = MethodKind.parse(name)
        hook = None
        if config.callback is not None:
            hook = functools.partial(config.callback, m.value)
        traces[m.value] = optimize(problem, K0, m, eta=config.eta.get(m.value, "auto"),
                                   tol=config.tol, max_iter=config.max_iter, care=care,
                                   callback=hook)
    result = ExperimentResult(problem, care, traces)
    if config.out_dir is not None:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, tr in traces.items():
            path = out / f"trace_{name}.csv"
            path.write_text(trace_csv(tr), encoding="utf-8")
            result.csv_paths[name] = path
    if config.svg_path is not None:
        svg = Path(config.svg_path)
        svg.parent.mkdir(parents=True, exist_ok=True)
        svg.write_text(render_svg(traces), encoding="utf-8")
        result.svg_path = svg
    return result
