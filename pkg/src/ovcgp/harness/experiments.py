"""Experiment loops driven by :class:`ExperimentConfig`."""

from __future__ import annotations

import logging
import os
import time

import numpy as np
from scipy.special import expit

from ..acquisitions import (Feasibility, LTSConfig, MCSettings, QKnowledgeGradient,
                            expected_improvement, hotspot_acquisition, hotspot_entropy, lts, nipv,
                            optimize_acquisition, optimize_qkg, prune_baseline, qnei,
                            sobol_points, thompson_top_q)
from ..errors import NumericalError, StateError
from ..exact import fit_exact, train_hypers_exact
from ..kernels import KernelHyperparams
from ..likelihoods import LikelihoodSpec, laplace_surrogate_batch
from ..models import posterior
from ..ovc import (osgpr_step, resample_inducing, save_snapshot, stream_step, stream_update)
from ..sparse import (canonical_from_data, canonical_to_variational, osgpr_trace_terms,
                      select_inducing, sgpr_predict, train_sparse, variational_to_canonical)
from . import objectives as obj
from .config import ConfigError, ExperimentConfig
from .datasets import (CSVSchema, banana_data, friedman_data, generate_spatial_prevalence,
                       ingest_csv, sine_data, sine_function)
from .records import ResultRecord, write_jsonl, write_plot_table

log = logging.getLogger(__name__)

_FAILURES = (NumericalError, StateError, np.linalg.LinAlgError)


def _rmse(a, b):
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


class _Clock:
    """Monotonic wall-clock seconds since construction."""

    def __init__(self):
        self.t0 = time.monotonic()

    def __call__(self):
        return time.monotonic() - self.t0


# ---------------------------------------------------------------- streaming regression

def _stream_data(cfg: ExperimentConfig, seed: int):
    if cfg.objective == "csv":
        schema = CSVSchema(tuple(cfg.features.split(",")), cfg.target)
        data = ingest_csv(cfg.data_path, schema)
        n_test = min(cfg.n_test, len(data) // 5)
        rng = np.random.default_rng(seed)
        test = rng.choice(len(data), n_test, replace=False)
        mask = np.ones(len(data), bool)
        mask[test] = False
        return data.X[mask], data.y[mask], data.X[test], data.y[test], None
    if cfg.objective == "friedman":
        tr = friedman_data(cfg.n_points, seed, cfg.noise_std)
        te = friedman_data(cfg.n_test, seed + 10 ** 6, cfg.noise_std)
        return tr.X, tr.y, te.X, te.f, tr.f
    ordered = cfg.objective == "timeseries"
    tr = sine_data(cfg.n_points, seed, cfg.noise_std, ordered=ordered)
    te = sine_data(cfg.n_test, seed + 10 ** 6, cfg.noise_std)
    return tr.X, tr.y, te.X, te.f, tr.f


def run_stream_regress(cfg: ExperimentConfig, seed: int):
    """Stream batches through online updates, logging held-out RMSE and diagnostics."""
    X, y, Xt, ft, f_train = _stream_data(cfg, seed)
    n = X.shape[0]
    n0 = min(max(cfg.n_init, cfg.p), n)
    clock = _Clock()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    lik = LikelihoodSpec.gaussian(cfg.noise_std ** 2)
    prm0 = KernelHyperparams.default(X.shape[1], noise_variance=cfg.noise_std ** 2)
    Z, params, state = train_sparse(X[:n0], y[:n0], lik, None, prm0, steps=cfg.train_steps,
                                    lr=cfg.lr, p=min(cfg.p, n0), optimize_inducing=False)
    early = slice(0, max(1, int(0.2 * n)))
    early_target = f_train[early] if f_train is not None else y[early]

    def metrics(st):
        out = {"rmse": _rmse(sgpr_predict(st, Xt, full_cov=False).mean, ft)}
        out["early_rmse"] = _rmse(sgpr_predict(st, X[early], full_cov=False).mean, early_target)
        return out

    m = metrics(state)
    records = [ResultRecord(0, clock(), m["rmse"], None, [], {"n_seen": n0, **m}, seed=seed)]
    it = 0
    T = n0
    while T < n:
        it += 1
        Xb, yb = X[T:T + cfg.batch_size], y[T:T + cfg.batch_size]
        T += Xb.shape[0]
        if cfg.selection == "pivoted":
            state, diag = stream_step(state, Xb, yb, None, cfg.p)
        elif cfg.selection == "fixed":
            state, diag = stream_step(state, Xb, yb, None, keep_Z=True)
        elif cfg.selection == "osgpr":
            state, diag = osgpr_step(state, Xb, yb, None, steps=cfg.osgpr_steps)
        else:
            Z_new = resample_inducing(state.Z, Xb, rng)
            can = stream_update(variational_to_canonical(state, clip=True), Xb, yb, None,
                                Z_new, params)
            t1, t2 = osgpr_trace_terms(state, Z_new, params, Xb, params.noise_variance)
            state = canonical_to_variational(can)
            diag = {"trace1": t1, "trace2": t2, "residual_trace": None}
        m = metrics(state)
        diag = {**diag, **m, "n_seen": T}
        records.append(ResultRecord(it, clock(), m["rmse"], None, [], diag, seed=seed))
    return records


# ---------------------------------------------------------------- Bayesian optimisation

class _BOProblem:
    def __init__(self, cfg, seed):
        self.cfg = cfg
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 21]))
        name = cfg.objective
        self.name = name
        self.d = 2 if name == "branin" else 6
        self.bounds = np.array([np.zeros(self.d), np.ones(self.d)])
        self.constrained = name != "branin"
        self.poisson = name == "poisson_hartmann6"

    def truth(self, X):
        return -obj.branin(X) if self.name == "branin" else obj.hartmann6(X)

    def evaluate(self, X):
        f = self.truth(X)
        if self.poisson:
            y = self.rng.poisson(np.exp(f)).astype(float)
        else:
            y = f + self.cfg.noise_std * self.rng.standard_normal(f.shape)
        feas = obj.l1_constraint(X) <= obj.CONSTRAINT_LIMIT if self.constrained \
            else np.ones(f.shape, bool)
        return y, f, feas


def _fit_bo_model(cfg, prob, X, y, prev):
    """Refit the surrogate; returns ``(model, params, transform)``."""
    n, d = X.shape
    if prob.poisson:
        lik = LikelihoodSpec.poisson()
        init = prev or KernelHyperparams.create(np.full(d, 0.5), 1.0, float(np.log(np.mean(y) + 0.5)))
        p = min(n, cfg.p_cap)
        Z = select_inducing(X, np.full(n, 1.0), init, p).Z
        _, prm, state = train_sparse(X, y, lik, Z, init, steps=cfg.train_steps, lr=cfg.lr,
                                     optimize_inducing=True)
        return state, prm, (0.0, 1.0)
    mu, sd = float(np.mean(y)), float(np.std(y)) or 1.0
    ys = (y - mu) / sd
    init = prev or KernelHyperparams.create(np.full(d, 0.5), 1.0, 0.0, 0.05)
    if cfg.model == "exact":
        prm = train_hypers_exact(X, ys, init, steps=cfg.train_steps, lr=cfg.lr)
        return fit_exact(X, ys, None, prm), prm, (mu, sd)
    p = min(n, cfg.p_cap)
    Z = select_inducing(X, None, init, p).Z
    lik = LikelihoodSpec.gaussian(init.noise_variance)
    _, prm, state = train_sparse(X, ys, lik, Z, init, steps=cfg.train_steps, lr=cfg.lr,
                                 optimize_inducing=True)
    return state, prm, (mu, sd)


def _fit_constraint(cfg, X, prev):
    c = obj.l1_constraint(X)
    mu, sd = float(np.mean(c)), float(np.std(c)) or 1.0
    init = prev or KernelHyperparams.create(np.ones(X.shape[1]), 1.0, 0.0, 1e-4)
    prm = train_hypers_exact(X, (c - mu) / sd, init, steps=cfg.train_steps, lr=cfg.lr,
                             fixed_noise=True)
    model = fit_exact(X, (c - mu) / sd, None, prm)
    return model, prm, (obj.CONSTRAINT_LIMIT - mu) / sd


def _propose(cfg, prob, model, X, y_model, feas_obj, it_seed):
    q = cfg.q
    bounds = prob.bounds
    acq = cfg.acquisition
    if acq == "random":
        return sobol_points(q, bounds, it_seed)
    if acq == "ts":
        return thompson_top_q(model, bounds, cfg.candidates, q, it_seed)
    if acq == "lts":
        return lts(model, bounds, LTSConfig(cfg.horizon, max(cfg.paths, q), cfg.candidates,
                                            q, it_seed))
    if acq == "ei":
        if q != 1:
            raise ConfigError("analytic EI supports q = 1 only")
        best = float(np.max(posterior(model, X, full_cov=False).mean))
        x, _ = optimize_acquisition(lambda Xb: expected_improvement(model, Xb, best), bounds,
                                    1, cfg.restarts, cfg.raw_samples, it_seed, cfg.maxiter)
        return x
    fantasy_noise = None
    if prob.poisson:
        def fantasy_noise(mean):
            return 1.0 / np.clip(np.exp(mean), 1e-6, 1e6)
    if acq == "qnei":
        mc = MCSettings(max(cfg.mc_samples, 1), True, it_seed)
        X_base = prune_baseline(model, X, mc, feas_obj)
        x, _ = optimize_acquisition(lambda Xb: qnei(model, Xb, X_base, mc, feas_obj), bounds, q,
                                    cfg.restarts, cfg.raw_samples, it_seed, cfg.maxiter)
        return x
    if acq == "qkg":
        X_ref = np.concatenate([X, sobol_points(128, bounds, it_seed + 1)])
        kg = QKnowledgeGradient(model, X_ref, MCSettings(cfg.mc_samples, True, it_seed),
                                fantasy_noise, feas_obj)
        x, _ = optimize_qkg(kg, bounds, q, cfg.restarts, cfg.raw_samples, it_seed, cfg.maxiter)
        return x
    raise ConfigError(f"acquisition {acq!r} is not available for BO")


def run_bo(cfg: ExperimentConfig, seed: int):
    """Initial Sobol design, then refit / optimise acquisition / evaluate."""
    prob = _BOProblem(cfg, seed)
    clock = _Clock()
    X = sobol_points(cfg.n_init, prob.bounds, np.random.SeedSequence([seed, 1]))
    y, f, feas = prob.evaluate(X)
    records = []

    def record(it, Xnew, diag):
        vals = np.where(feas, f, -np.inf)
        best = float(np.max(vals)) if np.any(feas) else None
        diag = dict(diag)
        if prob.name == "branin" and best is not None:
            diag["regret"] = -best - obj.BRANIN_MIN
        records.append(ResultRecord(it, clock(), diag.get("regret", best), best,
                                    np.asarray(Xnew).tolist(), diag, seed=seed))

    record(0, X, {"n_evals": len(y)})
    prev = prev_c = None
    for it in range(1, cfg.iterations + 1):
        it_seed = int(np.random.SeedSequence([seed, 100 + it]).generate_state(1)[0])
        diag = {}
        try:
            model, prev, (mu, sd) = _fit_bo_model(cfg, prob, X, y, prev)
            feas_obj = None
            if prob.constrained:
                cmodel, prev_c, thr = _fit_constraint(cfg, X, prev_c)
                floor = float(np.min(posterior(model, X, full_cov=False).mean))
                feas_obj = Feasibility(cmodel, thr, floor)
            Xnew = _propose(cfg, prob, model, X, y, feas_obj, it_seed)
        except _FAILURES as exc:
            log.warning("iteration %d: acquisition failed (%s); using a random batch", it, exc)
            diag["fallback"] = str(exc)
            Xnew = sobol_points(cfg.q, prob.bounds, it_seed)
        Xnew = np.clip(np.asarray(Xnew, dtype=float).reshape(cfg.q, prob.d), 0.0, 1.0)
        yn, fn, feasn = prob.evaluate(Xnew)
        X = np.concatenate([X, Xnew])
        y, f, feas = np.concatenate([y, yn]), np.concatenate([f, fn]), np.concatenate([feas, feasn])
        diag["n_evals"] = len(y)
        record(it, Xnew, diag)
    return records


# ---------------------------------------------------------------- active learning

def _fit_spatial(cfg, X, obs, trials, prev, binomial):
    n = X.shape[0]
    p = min(n, cfg.p_cap)
    if binomial:
        lik = LikelihoodSpec.binomial(trials)
        init = prev or KernelHyperparams.create([0.2, 0.2], 1.0, -1.5)
    else:
        lik = LikelihoodSpec.gaussian(np.full(n, cfg.noise_std ** 2))
        init = prev or KernelHyperparams.create([0.2, 0.2], 1.0, float(np.mean(obs)),
                                                cfg.noise_std ** 2)
    Z = select_inducing(X, None if binomial else np.full(n, cfg.noise_std ** 2), init, p).Z
    _, prm, state = train_sparse(X, obs, lik, Z, init, steps=cfg.train_steps, lr=cfg.lr,
                                 optimize_inducing=False, learn_noise=False)
    return state, prm


def _spatial_metrics(state, data, binomial):
    mean = sgpr_predict(state, data.X, full_cov=False).mean
    if binomial:
        prev = expit(mean)
        return {"prevalence_rmse": _rmse(prev, data.prevalence),
                "hotspot_accuracy": float(np.mean((prev > data.tau) == data.hotspot))}
    return {"grid_rmse": _rmse(mean, data.latent)}


def run_active_learn(cfg: ExperimentConfig, seed: int):
    """Acquisition-driven site selection against a random-selection arm."""
    data = generate_spatial_prevalence(cfg.grid_size, seed, cfg.tau)
    mode = cfg.acquisition if cfg.acquisition in ("nipv", "hotspot") else "nipv"
    binomial = mode == "hotspot" or cfg.likelihood == "binomial"
    rng_obs = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    obs_all = data.y if binomial else data.latent + cfg.noise_std * rng_obs.standard_normal(
        data.latent.shape)
    N = data.X.shape[0]
    init = np.random.default_rng(np.random.SeedSequence([seed, 32])).choice(
        N, min(cfg.n_init, N), replace=False)
    key = "prevalence_rmse" if binomial else "grid_rmse"
    records = []
    for arm in (mode, "random"):
        clock = _Clock()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 33]))
        chosen = list(init)
        prev = None
        for it in range(cfg.iterations + 1):
            idx = np.array(chosen)
            state, prev = _fit_spatial(cfg, data.X[idx], obs_all[idx], data.trials[idx],
                                       prev, binomial)
            m = _spatial_metrics(state, data, binomial)
            q_loc = data.X[chosen[-1]].tolist() if it else []
            records.append(ResultRecord(it, clock(), m[key], None, q_loc,
                                        {**m, "n_observed": len(chosen)}, arm=arm, seed=seed))
            if it == cfg.iterations:
                break
            pool = np.setdiff1d(np.arange(N), idx)
            if pool.size == 0:
                break
            if arm == "random":
                nxt = int(rng.choice(pool))
            elif mode == "nipv":
                noise = cfg.noise_std ** 2
                if binomial:
                    mu = sgpr_predict(state, data.X[pool], full_cov=False).mean
                    r = expit(mu)
                    noise = (1.0 / (data.trials[pool] * r * (1 - r)))[:, None]
                vals = nipv(state, data.X[pool][:, None, :], data.X, noise)
                nxt = int(pool[np.argmax(vals)])
            else:
                h0 = hotspot_entropy(state, data.X, data.tau, cfg.k_inner, seed + it)
                vals = [hotspot_acquisition(state, data.X[j][None], data.X, data.tau,
                                            data.trials[j], cfg.k_inner, cfg.k_outer,
                                            seed=seed + it, before=h0)
                        for j in pool]
                nxt = int(pool[np.argmin(vals)])
            chosen.append(nxt)
    return records


# ---------------------------------------------------------------- streaming classification

def run_classify_stream(cfg: ExperimentConfig, seed: int):
    """Stream Bernoulli batches through Laplace surrogates and online updates."""
    if cfg.objective == "csv":
        data = ingest_csv(cfg.data_path, CSVSchema(tuple(cfg.features.split(",")), cfg.target))
        n_test = min(cfg.n_test, len(data) // 5)
        Xtr, ytr = data.X[:-n_test], data.y[:-n_test]
        Xte, yte = data.X[-n_test:], data.y[-n_test:]
    else:
        tr = banana_data(cfg.n_points, seed)
        te = banana_data(cfg.n_test, seed + 10 ** 6)
        Xtr, ytr, Xte, yte = tr.X, tr.y, te.X, te.y
    lik = LikelihoodSpec.bernoulli()
    b = cfg.batch_size
    clock = _Clock()

    def acc(st):
        return float(np.mean((sgpr_predict(st, Xte, full_cov=False).mean > 0) == (yte > 0.5)))

    init = KernelHyperparams.create(np.full(Xtr.shape[1], 0.3), 1.0, 0.0)
    _, prm, state = train_sparse(Xtr[:b], ytr[:b], lik, None, init, steps=cfg.train_steps,
                                 lr=cfg.lr, p=min(cfg.p, b), optimize_inducing=False)
    records = [ResultRecord(0, clock(), acc(state), None, [], {"n_seen": b}, seed=seed)]
    T, it = b, 0
    while T < len(ytr):
        it += 1
        Xb, yb = Xtr[T:T + b], ytr[T:T + b]
        T += len(yb)
        targets, noise = laplace_surrogate_batch(state, Xb, yb, lik)
        state, diag = stream_step(state, Xb, targets, noise, cfg.p)
        records.append(ResultRecord(it, clock(), acc(state), None, [],
                                    {"n_seen": T, "residual_trace": diag["residual_trace"]},
                                    seed=seed))
    _, _, full = train_sparse(Xtr, ytr, lik, None, init, steps=cfg.train_steps, lr=cfg.lr,
                              p=cfg.p, optimize_inducing=False)
    full_acc = acc(full)
    for r in records:
        r.diagnostics["full_refit_accuracy"] = full_acc
    return records


# ---------------------------------------------------------------- look-ahead TS demo

def run_lts_demo(cfg: ExperimentConfig, seed: int):
    """Look-ahead Thompson sampling on a 1-d two-peaked function."""
    bounds = np.array([[0.0], [1.0]])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 41]))
    X = sobol_points(cfg.n_init, bounds, np.random.SeedSequence([seed, 1]))
    f = obj.bimodal_1d(X)
    y = f + cfg.noise_std * rng.standard_normal(f.shape)
    clock = _Clock()
    records = [ResultRecord(0, clock(), float(np.max(f)), float(np.max(f)), X.tolist(), {},
                            seed=seed)]
    prev = None
    for it in range(1, cfg.iterations + 1):
        mu, sd = float(np.mean(y)), float(np.std(y)) or 1.0
        init = prev or KernelHyperparams.create([0.1], 1.0, 0.0, 0.05)
        p = min(len(y), cfg.p_cap)
        _, prev, state = train_sparse(X, (y - mu) / sd, LikelihoodSpec.gaussian(0.05), None,
                                      init, steps=cfg.train_steps, lr=cfg.lr, p=p,
                                      optimize_inducing=False)
        lcfg = LTSConfig(cfg.horizon, max(cfg.paths, cfg.q), cfg.candidates, cfg.q,
                         int(np.random.SeedSequence([seed, 200 + it]).generate_state(1)[0]))
        Xn, info = lts(state, bounds, lcfg, return_paths=True)
        conds = []
        if cfg.horizon:
            conds = np.atleast_1d(info["model"].condition_number()).tolist()
        fn = obj.bimodal_1d(Xn)
        X = np.concatenate([X, Xn])
        f = np.concatenate([f, fn])
        y = np.concatenate([y, fn + cfg.noise_std * rng.standard_normal(fn.shape)])
        records.append(ResultRecord(it, clock(), float(np.max(f)), float(np.max(f)),
                                    Xn.tolist(), {"condition_numbers": conds}, seed=seed))
    return records


# ---------------------------------------------------------------- state export

def run_export_state(cfg: ExperimentConfig, seed: int):
    """Fit a sparse model and write its pseudo-data snapshot."""
    if cfg.objective == "csv":
        data = ingest_csv(cfg.data_path, CSVSchema(tuple(cfg.features.split(",")), cfg.target))
        X, y = data.X, data.y
    else:
        data = sine_data(cfg.n_points, seed, cfg.noise_std)
        X, y = data.X, data.y
    clock = _Clock()
    init = KernelHyperparams.default(X.shape[1], noise_variance=cfg.noise_std ** 2)
    _, prm, state = train_sparse(X, y, LikelihoodSpec.gaussian(cfg.noise_std ** 2), None,
                                 init, steps=cfg.train_steps, lr=cfg.lr, p=min(cfg.p, len(y)),
                                 optimize_inducing=False)
    os.makedirs(cfg.out, exist_ok=True)
    binary = cfg.snapshot_format == "binary"
    path = os.path.join(cfg.out, f"state_seed{seed}." + ("npz" if binary else "txt"))
    save_snapshot(path, state, binary=binary)
    return [ResultRecord(0, clock(), None, None, [], {"snapshot": path, "p": state.p},
                         seed=seed)]


RUNNERS = {
    "stream": run_stream_regress,
    "bo": run_bo,
    "active": run_active_learn,
    "classify": run_classify_stream,
    "lts": run_lts_demo,
    "export": run_export_state,
}


def run(cfg: ExperimentConfig, write: bool = True):
    """Run every seed of ``cfg``; writes ``records.jsonl`` and ``plot.csv`` under ``cfg.out``."""
    records = []
    for s in range(cfg.seed, cfg.seed + cfg.n_seeds):
        records.extend(RUNNERS[cfg.kind](cfg, s))
    if write:
        os.makedirs(cfg.out, exist_ok=True)
        path = os.path.join(cfg.out, f"{cfg.kind}_records.jsonl")
        if os.path.exists(path):
            os.remove(path)
        write_jsonl(path, records)
        write_plot_table(os.path.join(cfg.out, f"{cfg.kind}_plot.csv"), records)
    return records
