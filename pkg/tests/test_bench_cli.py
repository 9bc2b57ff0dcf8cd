import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from mjlspo import Status, is_mss, optimize, solve_care
from mjlspo.bench import (CSV_COLUMNS, ExperimentConfig, GenSpec, dumps_problem, load_policy,
                          load_problem, problem_from_dict, problem_to_dict, random_instance,
                          render_svg, run_experiment, save_problem, trace_csv)
from mjlspo.cli import main
from mjlspo.errors import GenerationFailed

from conftest import gain, make_f1, make_f2


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_random_instance_radius():
    prob, K0 = random_instance(GenSpec(4, 2, 3, seed=7, target_radius=0.9))
    stable, rho = is_mss(prob, K0)
    assert stable and abs(rho - 0.9) <= 1e-9
    assert np.allclose(prob.chain.initial_dist, 1 / 3)
    assert np.allclose(prob.sigma0, np.eye(4) / 12)
    assert np.all(prob.Q.blocks == np.eye(4)) and np.all(prob.R.blocks == np.eye(2))


def test_random_instance_single_mode():
    prob, _ = random_instance(GenSpec(3, 1, 1, seed=2))
    assert prob.chain.transition.tolist() == [[1.0]]


def test_random_instance_deterministic():
    a = dumps_problem(random_instance(GenSpec(4, 2, 3, seed=99))[0])
    b = dumps_problem(random_instance(GenSpec(4, 2, 3, seed=99))[0])
    assert a == b
    assert a != dumps_problem(random_instance(GenSpec(4, 2, 3, seed=98))[0])


def test_dirichlet_concentration_favours_self_transitions():
    prob, _ = random_instance(GenSpec(2, 1, 30, seed=0))
    P = prob.chain.transition
    assert np.mean(np.diag(P)) > 5 * np.mean(P[~np.eye(30, dtype=bool)])


def test_genspec_validation():
    for bad in (dict(state_dim=0, input_dim=1, num_modes=1),
                dict(state_dim=1, input_dim=1, num_modes=1, target_radius=1.0),
                dict(state_dim=1, input_dim=1, num_modes=1, dirichlet_kappa=-1.0)):
        with pytest.raises(ValueError):
            GenSpec(**bad)


def test_generation_failure_on_degenerate_draw(monkeypatch):
    import mjlspo.bench as bench
    monkeypatch.setattr(bench, "spectral_radius", lambda *a: 0.0)
    with pytest.raises(GenerationFailed):
        random_instance(GenSpec(2, 1, 2, seed=0))


def test_problem_roundtrip(tmp_path):
    prob, _ = random_instance(GenSpec(3, 2, 2, seed=5))
    path = tmp_path / "p.json"
    save_problem(prob, path)
    back = load_problem(path)
    for name in ("A", "B", "Q", "R"):
        assert np.array_equal(getattr(back, name).blocks, getattr(prob, name).blocks)
    assert np.array_equal(back.chain.transition, prob.chain.transition)
    assert np.array_equal(back.sigma0, prob.sigma0)
    doc = json.loads(path.read_text())
    assert {"version", "num_modes", "state_dim", "input_dim", "A", "B", "Q", "R", "transition",
            "initial_dist", "initial_covariance"} <= set(doc)


def test_problem_from_dict_rejects_malformed():
    doc = problem_to_dict(make_f2())
    with pytest.raises(ValueError):
        problem_from_dict({k: v for k, v in doc.items() if k != "A"})
    with pytest.raises(ValueError):
        problem_from_dict({**doc, "version": 99})
    with pytest.raises(ValueError):
        problem_from_dict({**doc, "num_modes": 3})


def test_load_policy_forms(tmp_path):
    prob = make_f2()
    (tmp_path / "a.json").write_text(json.dumps({"K": [[[0.1]], [[0.2]]]}))
    (tmp_path / "b.json").write_text(json.dumps([[[0.1]], [[0.2]]]))
    for name in ("a.json", "b.json"):
        assert load_policy(tmp_path / name, prob).K.blocks.ravel().tolist() == [0.1, 0.2]


def test_trace_csv_layout(f1):
    tr = optimize(f1, gain(0.4), "gn", care=solve_care(f1))
    text = trace_csv(tr)
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    recs = rows(text)
    assert len(recs) == tr.iterations + 1
    assert [int(r["iter"]) for r in recs] == list(range(tr.iterations + 1))
    assert float(recs[0]["cost"]) == tr.records[0].cost


def test_trace_csv_without_ground_truth_leaves_blank_fields(f2):
    tr = optimize(f2, gain(0.0, 0.0), "gn", tol=1e-8)
    recs = rows(trace_csv(tr))
    assert all(r["rel_err"] == "" and r["rate_bound"] == "" for r in recs)


def test_svg_render(f1):
    care = solve_care(f1)
    traces = {m: optimize(f1, gain(0.4), m, care=care) for m in ("gd", "gn", "npg")}
    svg = render_svg(traces)
    assert svg.startswith("<svg") and 'viewBox="0 0 800 500"' in svg
    for label in ("Gradient descent", "Gauss-Newton", "Natural policy gradient"):
        assert label in svg
    assert svg.count("<polyline") == 3


def test_run_experiment_f1_ordering(tmp_path):
    res = run_experiment(ExperimentConfig(problem=make_f1(), K0=gain(0.4), tol=1e-10,
                                          max_iter=5000, out_dir=str(tmp_path),
                                          svg_path=str(tmp_path / "fig.svg")))
    its = {m: tr.iterations_to(1e-10) for m, tr in res.traces.items()}
    # the auto NPG step on this scalar instance is close to a Newton step, so NPG can tie GN
    assert its["gn"] <= its["npg"] < its["gd"]
    gn, npg = res.traces["gn"].rel_errs, res.traces["npg"].rel_errs
    n = min(len(gn), len(npg))
    assert np.all(gn[:n] <= npg[:n])
    for m in ("gd", "gn", "npg"):
        assert (tmp_path / f"trace_{m}.csv").exists()
    assert (tmp_path / "fig.svg").exists()


def test_run_experiment_gd_certificate():
    res = run_experiment(ExperimentConfig(gen=GenSpec(4, 2, 3, seed=0), methods=["gd"],
                                          max_iter=300))
    tr = res.traces["gd"]
    recs = tr.records
    for a, b in zip(recs, recs[1:]):
        assert b.rel_err <= a.rate_bound * a.rel_err + 1e-12


def test_run_experiment_trace_invariants():
    res = run_experiment(ExperimentConfig(gen=GenSpec(3, 2, 2, seed=4), max_iter=200))
    for tr in res.traces.values():
        assert np.all(np.diff(tr.costs) <= 1e-12 * (1 + tr.costs[0]))
        assert all(r.rho_lifted < 1 for r in tr.records)


def test_infinite_tol_runs_full_budget():
    res = run_experiment(ExperimentConfig(problem=make_f1(), K0=gain(0.4), methods=["gd"],
                                          tol=math.inf, max_iter=25))
    tr = res.traces["gd"]
    assert tr.status is Status.MAX_ITER
    assert len(rows(trace_csv(tr))) == 25 + 1


@pytest.mark.xfail(strict=True, reason="row count is iterations + 1 with iterate 0 included, "
                   "so a full budget gives max_iter + 1 rows, not max_iter")
def test_infinite_tol_emits_exactly_max_iter_rows():
    res = run_experiment(ExperimentConfig(problem=make_f1(), K0=gain(0.4), methods=["gd"],
                                          tol=math.inf, max_iter=25))
    assert len(rows(trace_csv(res.traces["gd"]))) == 25


def test_experiment_config_validation():
    with pytest.raises(ValueError):
        run_experiment(ExperimentConfig(problem=make_f1(), methods=[]))
    with pytest.raises(ValueError):
        run_experiment(ExperimentConfig(problem=make_f1(), tol=0.0))
    with pytest.raises(ValueError):
        run_experiment(ExperimentConfig())


# command line

def run_cli(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_gen_and_care(tmp_path, capsys):
    path = tmp_path / "p.json"
    code, _, _ = run_cli(["gen", "-d", 3, "-k", 2, "-n", 2, "--seed", 4, "--out", path], capsys)
    assert code == 0
    code, out, _ = run_cli(["care", path], capsys)
    assert code == 0
    doc = json.loads(out)
    care = solve_care(load_problem(path))
    assert np.allclose(doc["P_star"], care.P_star.tolist(), rtol=0, atol=0)
    assert np.allclose(doc["K_star"], care.gain.tolist(), rtol=0, atol=0)


def test_cli_gen_stdout_deterministic(capsys):
    argv = ["gen", "-d", 4, "-k", 2, "-n", 3, "--seed", 123]
    a = run_cli(argv, capsys)[1]
    b = run_cli(argv, capsys)[1]
    assert a == b and json.loads(a)["num_modes"] == 3


def test_cli_opt_outputs(tmp_path, capsys):
    prob = tmp_path / "p.json"
    save_problem(make_f1(), prob)
    pol = tmp_path / "k.json"
    pol.write_text(json.dumps({"K": [[[0.4]]]}))
    out_dir = tmp_path / "out"
    code, _, err = run_cli(["opt", prob, "--policy", pol, "--method", "all", "--out", out_dir,
                            "--svg", tmp_path / "fig.svg", "--max-iter", 3000], capsys)
    assert code == 0, err
    for m in ("gd", "gn", "npg"):
        recs = rows((out_dir / f"trace_{m}.csv").read_text())
        assert float(recs[-1]["rel_err"]) <= 1e-10
    assert (tmp_path / "fig.svg").read_text().startswith("<svg")


def test_cli_opt_eta_overrides(tmp_path, capsys):
    prob = tmp_path / "p.json"
    save_problem(make_f2(), prob)
    code, out, _ = run_cli(["opt", prob, "--method", "gn,npg", "--eta-for", "npg=0.05",
                            "--max-iter", 50], capsys)
    assert code == 0
    sections = out.split("# ")[1:]
    etas = {s.split("\n", 1)[0]: float(rows(s.split("\n", 1)[1])[0]["eta"]) for s in sections}
    assert etas == {"gn": 0.5, "npg": 0.05}


def test_cli_exit_codes(tmp_path, capsys):
    prob = tmp_path / "p.json"
    save_problem(make_f2(), prob)
    unstable = tmp_path / "bad.json"
    unstable.write_text(json.dumps({"K": [[[-3.0]], [[0.0]]]}))
    assert run_cli(["opt", prob, "--policy", unstable], capsys)[0] == 1
    assert run_cli(["check", prob, "--policy", unstable], capsys)[0] == 1
    assert run_cli(["opt", tmp_path / "missing.json"], capsys)[0] == 2
    (tmp_path / "junk.json").write_text("{not json")
    assert run_cli(["care", tmp_path / "junk.json"], capsys)[0] == 2
    assert run_cli(["opt", prob, "--eta", "-1"], capsys)[0] == 2
    assert run_cli(["opt", prob, "--method", "newton"], capsys)[0] == 2
    assert run_cli(["frobnicate"], capsys)[0] == 2
    # a tolerance below round-off cannot be met by the Riccati recursion
    assert run_cli(["care", prob, "--tol", "1e-30", "--max-iter", 3], capsys)[0] == 3
    # an inadmissible explicit step that leaves the stabilizing set
    assert run_cli(["opt", prob, "--method", "npg", "--eta", "50"], capsys)[0] == 3


def test_cli_check_report(tmp_path, capsys):
    prob = tmp_path / "p.json"
    save_problem(random_instance(GenSpec(3, 2, 2, seed=1))[0], prob)
    code, out, _ = run_cli(["check", prob], capsys)
    assert code == 0
    report = json.loads(out)
    assert report["all_passed"] is True
    assert set(report["checks"]) == {"gradient_vs_fd", "hessian_vs_fd", "gradient_dominance",
                                     "almost_smoothness", "sublevel_bounds"}


def test_cli_flow(tmp_path, capsys):
    prob = tmp_path / "p.json"
    save_problem(make_f1(), prob)
    pol = tmp_path / "k.json"
    pol.write_text(json.dumps([[[0.4]]]))
    code, out, _ = run_cli(["flow", prob, "--policy", pol, "--dt", 0.01, "--t-end", 1], capsys)
    assert code == 0
    recs = rows(out)
    assert len(recs) == 101 and float(recs[-1]["gap"]) < float(recs[0]["gap"])
    code, _, _ = run_cli(["flow", prob, "--policy", pol, "--method", "npg", "--dt", 2,
                          "--t-end", 4], capsys)
    assert code == 3


def test_cli_generates_inline_problem(capsys):
    code, out, _ = run_cli(["opt", "-d", 2, "-k", 1, "-n", 2, "--seed", 3, "--method", "gn"],
                           capsys)
    assert code == 0
    assert rows(out)[-1]["rel_err"] and float(rows(out)[-1]["rel_err"]) <= 1e-10


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mjlspo", "gen", "-d", "2", "-k", "1", "-n",
                           "2", "--seed", "1"], capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["state_dim"] == 2
