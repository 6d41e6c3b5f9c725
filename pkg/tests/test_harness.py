import json

import numpy as np
import pytest
from scipy.optimize import minimize

from ovcgp.harness import ConfigError, load_config, read_jsonl, write_jsonl
from ovcgp.harness.cli import main
from ovcgp.harness.config import dump_config, parse_pairs
from ovcgp.harness.datasets import (CSVSchema, Dataset, export_csv, generate_spatial_prevalence,
                                    ingest_csv, sine_data)
from ovcgp.harness.experiments import run, run_bo, run_stream_regress
from ovcgp.harness.objectives import (BRANIN_MIN, HARTMANN6_ARGMAX, branin, hartmann6,
                                      objective_hartmann6_constrained,
                                      objective_poisson_hartmann6)
from ovcgp.harness.records import ResultRecord, write_plot_table
from ovcgp.kernels import KernelHyperparams
from ovcgp.likelihoods import LikelihoodSpec
from ovcgp.ovc import load_snapshot
from ovcgp.sparse import canonical_from_data, canonical_to_variational, sgpr_predict, train_sparse


# ---------------------------------------------------------------- objectives

def test_hartmann6_optimum_by_local_refinement():
    res = minimize(lambda x: -hartmann6(x), HARTMANN6_ARGMAX, method="L-BFGS-B",
                   bounds=[(0, 1)] * 6, options={"ftol": 1e-14, "gtol": 1e-10})
    np.testing.assert_allclose(-res.fun, 3.32237, atol=1e-4)
    np.testing.assert_allclose(hartmann6(HARTMANN6_ARGMAX), 3.32237, atol=1e-4)


def test_constraint_boundary_is_feasible():
    assert objective_hartmann6_constrained(np.full(6, 0.5))[1]
    assert not objective_hartmann6_constrained(np.ones(6))[1]
    with pytest.raises(ValueError):
        objective_hartmann6_constrained(np.full(6, 1.5))


def test_branin_minimum():
    pts = np.array([[-np.pi, 12.275], [np.pi, 2.275], [9.42478, 2.475]])
    u = (pts - np.array([-5.0, 0.0])) / 15.0
    np.testing.assert_allclose(branin(u), BRANIN_MIN, atol=1e-5)


def test_poisson_rate():
    # hartmann6 is ~0 at the unit corner, so the rate is ~1
    x = np.ones(6)
    rate = np.exp(hartmann6(x))
    draws = objective_poisson_hartmann6(np.tile(x, (100_000, 1)), np.random.default_rng(0))
    assert abs(draws.mean() - rate) < 0.02
    a = objective_poisson_hartmann6(x, np.random.default_rng(3))
    b = objective_poisson_hartmann6(x, np.random.default_rng(3))
    assert a == b


# ---------------------------------------------------------------- spatial data

def test_spatial_binomial_concentration():
    d = generate_spatial_prevalence(20, seed=0)
    emp = d.y / d.trials
    r = d.prevalence
    ok = np.abs(emp - r) <= 3 * np.sqrt(r * (1 - r) / d.trials)
    assert ok.mean() >= 0.99
    assert d.trials.min() >= 50 and d.trials.max() <= 5000


def test_spatial_determinism_and_threshold():
    a, b = generate_spatial_prevalence(20, seed=4), generate_spatial_prevalence(20, seed=4)
    np.testing.assert_array_equal(a.y, b.y)
    assert generate_spatial_prevalence(20, seed=4, tau=0.0).hotspot.all()
    with pytest.raises(ValueError):
        generate_spatial_prevalence(10)


# ---------------------------------------------------------------- CSV

def test_ingest_small_file_preserves_order(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x,y\n3,1\n1,2\n2,3\n")
    d = ingest_csv(p, CSVSchema(("x",), "y"))
    np.testing.assert_array_equal(d.X[:, 0], [3, 1, 2])
    np.testing.assert_array_equal(d.y, [1, 2, 3])


def test_ingest_drops_non_finite(tmp_path, caplog):
    p = tmp_path / "d.csv"
    p.write_text("x,y\n0,1\n1,inf\n2,nan\n3,4\n")
    d = ingest_csv(p, CSVSchema(("x",), "y"))
    assert len(d) == 2 and d.dropped == 2
    assert "dropped 2" in caplog.text


@pytest.mark.parametrize("text", ["x,z\n1,2\n", "x,y\n1,2,3\n", "x,y\n1,abc\n", ""])
def test_ingest_rejects_malformed(tmp_path, text):
    p = tmp_path / "d.csv"
    p.write_text(text)
    with pytest.raises(ValueError):
        ingest_csv(p, CSVSchema(("x",), "y"))


def test_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    d = Dataset(rng.standard_normal((20, 2)) * 1e3, rng.standard_normal(20) / 7,
                rng.integers(1, 100, 20).astype(float))
    schema = CSVSchema(("a", "b"), "t", "n")
    export_csv(tmp_path / "r.csv", d, schema)
    back = ingest_csv(tmp_path / "r.csv", schema)
    np.testing.assert_array_equal(back.X, d.X)
    np.testing.assert_array_equal(back.y, d.y)
    np.testing.assert_array_equal(back.trials, d.trials)


# ---------------------------------------------------------------- config

def test_config_parsing_and_precedence(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# stream run\nkind = stream\np = 8  # inducing\nlr = 0.2\n")
    cfg = load_config(p, ["p=12"], seed=3)
    assert (cfg.p, cfg.lr, cfg.seed, cfg.objective) == (12, 0.2, 3, "sine")
    again = load_config(None, [f"{line}" for line in dump_config(cfg).splitlines()])
    assert again == cfg


@pytest.mark.parametrize("lines", [["nonsense = 1"], ["p = two"], ["p 3"], ["p = 0"],
                                   ["kind = bo", "objective = sine"], ["acquisition = ucb"],
                                   ["kind = bo", "p = 40"], ["objective = csv"]])
def test_config_errors(lines):
    with pytest.raises(ConfigError):
        load_config(None, lines)


def test_parse_pairs_reports_line():
    with pytest.raises(ConfigError, match=":2:"):
        parse_pairs(["p = 3", "garbage"])


# ---------------------------------------------------------------- records

def test_jsonl_round_trip_and_non_finite(tmp_path):
    recs = [ResultRecord(0, 0.1, 1.5, None, [[0.0]], {"a": np.float64(2.0), "b": np.inf}),
            ResultRecord(1, 0.2, np.float64(1.0), 3.0, np.zeros((1, 2)), {"v": np.arange(2)})]
    write_jsonl(tmp_path / "r.jsonl", recs)
    back = read_jsonl(tmp_path / "r.jsonl")
    assert back[0]["diagnostics"] == {"a": 2.0, "b": None}
    assert back[1]["queries"] == [[0.0, 0.0]] and back[1]["diagnostics"]["v"] == [0, 1]


def test_plot_table_columns(tmp_path):
    recs = [ResultRecord(i, 0.0, float(i), seed=s, arm=a) for s in (0, 1) for a in ("main", "random")
            for i in range(3)]
    write_plot_table(tmp_path / "p.csv", recs)
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "iteration,seed0,seed0_random,seed1,seed1_random"
    assert rows[3].startswith("2,2,2")


# ---------------------------------------------------------------- experiment loops

def test_stream_single_batch_matches_one_shot_fit():
    cfg = load_config(None, ["n_points = 120", "n_init = 20", "batch_size = 100",
                             "selection = fixed", "train_steps = 10", "p = 10"])
    recs = run_stream_regress(cfg, 0)
    assert len(recs) == 2
    data = sine_data(120, 0, 0.1)
    prm0 = KernelHyperparams.default(1, noise_variance=0.01)
    Z, prm, _ = train_sparse(data.X[:20], data.y[:20], LikelihoodSpec.gaussian(0.01), None,
                             prm0, steps=10, lr=cfg.lr, p=10, optimize_inducing=False)
    st = canonical_to_variational(canonical_from_data(data.X, data.y, None, Z, prm))
    test = sine_data(cfg.n_test, 10 ** 6, 0.1)
    rmse = np.sqrt(np.mean((sgpr_predict(st, test.X, full_cov=False).mean - test.f) ** 2))
    np.testing.assert_allclose(recs[-1].metric, rmse, atol=1e-6)


def test_stream_does_not_forget_early_data():
    cfg = load_config(None, ["n_points = 400", "n_init = 80", "batch_size = 20", "p = 16",
                             "train_steps = 30", "objective = timeseries"])
    recs = run_stream_regress(cfg, 1)
    assert recs[-1].diagnostics["early_rmse"] <= 2 * recs[0].diagnostics["early_rmse"]
    assert all(b.wall_time >= a.wall_time for a, b in zip(recs, recs[1:]))


def test_bo_zero_budget_returns_init_best():
    cfg = load_config(None, ["kind = bo", "objective = branin", "iterations = 0", "n_init = 7"])
    recs = run_bo(cfg, 0)
    assert len(recs) == 1
    X = np.array(recs[0].queries)
    np.testing.assert_allclose(recs[0].best_value, np.max(-branin(X)))


def test_bo_best_value_is_monotone_and_deterministic():
    cfg = load_config(None, ["kind = bo", "objective = hartmann6_constrained", "q = 2",
                             "iterations = 2", "n_init = 10", "acquisition = qnei",
                             "mc_samples = 16", "restarts = 1", "raw_samples = 16",
                             "maxiter = 5", "train_steps = 5"])
    a, b = run_bo(cfg, 2), run_bo(cfg, 2)
    best = [r.best_value for r in a]
    assert all(y >= x for x, y in zip(best, best[1:]))
    strip = lambda rs: [{**r.to_dict(), "wall_time": 0} for r in rs]
    assert strip(a) == strip(b)


@pytest.mark.slow
def test_branin_exact_ei_regret():
    cfg = load_config(None, ["kind = bo", "objective = branin", "model = exact",
                             "acquisition = ei", "n_init = 20", "iterations = 30",
                             "restarts = 4", "raw_samples = 128", "maxiter = 50"])
    regrets = [run_bo(cfg, s)[-1].metric for s in range(10)]
    assert np.median(regrets) < 0.5


def test_active_learn_records_both_arms():
    cfg = load_config(None, ["kind = active", "acquisition = nipv", "iterations = 2",
                             "n_init = 10", "train_steps = 5"])
    recs = run(cfg, write=False)
    arms = {r.arm for r in recs}
    assert arms == {"nipv", "random"}
    assert all(r.diagnostics["n_observed"] == 10 + r.iteration for r in recs)


# ---------------------------------------------------------------- CLI

def test_cli_runs_and_is_deterministic(tmp_path, capsys):
    args = ["--override", "n_points=60", "--override", "n_init=20", "--override",
            "batch_size=20", "--override", "train_steps=5", "--seed", "5"]
    assert main(["stream-regress", "--out", str(tmp_path / "a")] + args) == 0
    assert main(["stream-regress", "--out", str(tmp_path / "b")] + args) == 0
    ra = read_jsonl(tmp_path / "a" / "stream_records.jsonl")
    rb = read_jsonl(tmp_path / "b" / "stream_records.jsonl")
    for r in ra + rb:
        r.pop("wall_time")
    assert ra == rb and ra[0]["seed"] == 5
    assert (tmp_path / "a" / "stream_plot.csv").exists()
    assert "records written" in capsys.readouterr().out


def test_cli_export_state(tmp_path):
    out = tmp_path / "snap"
    assert main(["export-state", "--out", str(out), "--override", "n_points=50",
                 "--override", "train_steps=3", "--override", "p=6"]) == 0
    assert (out / "state_seed0.txt").read_text().startswith("ovcgp-state v1")
    assert load_snapshot(out / "state_seed0.txt")[0].Z_prev.shape == (6, 1)
    rec = json.loads((out / "export_records.jsonl").read_text().splitlines()[0])
    assert rec["diagnostics"]["p"] == 6


def test_cli_config_errors(tmp_path, capsys):
    assert main(["bo-run", "--override", "objective=sine"]) == 2
    assert main(["stream-regress", "--config", str(tmp_path / "missing.cfg")]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("x,q\n1,2\n")
    assert main(["stream-regress", "--out", str(tmp_path), "--override", "objective=csv",
                 "--override", f"data_path={bad}"]) == 2
    assert "config error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["no-such-command"])
