"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""
import time
from functools import lru_cache

import numpy as np
import yaml
from scipy.spatial.distance import pdist, squareform

from opehf import pipeline as P
from opehf.core import HMDPSpec, Trajectory
from opehf.diff import ParameterSet
from opehf.diff import tensor as F
from opehf.envs import (constant_ihr_env, exact_policy_human_value, make_benchmark_suite,
                        mc_policy_human_value, sample_dataset, sample_mixture_dataset)
from opehf.estimators import (ESTIMATORS, EstimationData, bootstrap_se, estimate_behavior_policy,
                              fqe_regression_loss, quadratic_features, run_estimator, variance_study)
from opehf.metrics import mae, rank_correlation, regret_at_1
from opehf.rilr import (RILRConfig, ReconstructorModel, fusion_reconstruct, oracle_reconstruct,
                        reconstruct, rescale_reconstruct, rilr_loss, train_rilr)
from opehf.vlmh import VLMHConfig, VLMHModel, elbo_batch, encode_dataset, predict_human_return, train_vlmh

from conftest import ACCEPTANCE_LINES, fd_max_rel_error

# pinned tolerances
FD_TOL = 1e-3
FD_INSTANCES = 10
GRAD_BUDGET_S = 60
UNBIASED_N = 50_000
UNBIASED_SE = 3.0
UNBIASED_BUDGET_S = 300
VAR_M, VAR_N, VAR_TV, VAR_RATIO = 500, 200, 0.2, 1.05
VAR_BUDGET_S = 300
RESIDUAL_RILR = 0.05
RESIDUAL_BASELINE = 1e-9
CONSTANT_REL_MAE = 0.15
MAIN_BUDGET_S = 30 * 60
SEEDS = (0, 1, 2)
N_TRAJ = 2000
FIXTURE_COUNT = 1000


def report(number, name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


@lru_cache(maxsize=None)
def benchmark(name, seed):
    return next(b for b in make_benchmark_suite(seed) if b.name == name)


@lru_cache(maxsize=None)
def trained(name, seed):
    """Dataset, latent model and RILR reconstruction for one benchmark and seed."""
    bench = benchmark(name, seed)
    ds = sample_mixture_dataset(bench, N_TRAJ, seed)
    t0 = time.perf_counter()
    model = VLMHModel(ds.spec, VLMHConfig(), seed=seed)
    model, _ = train_vlmh(model, ds, rng=seed)
    _, recon, _ = train_rilr(ds, model, RILRConfig(seed=seed), rng=seed)
    return ds, model, recon, time.perf_counter() - t0


# 1 -------------------------------------------------------------------------


def _elbo_instance(rng, seed):
    spec = HMDPSpec(state_dim=3, discount=0.9, horizon=3, num_actions=2)
    cfg = VLMHConfig(latent_dim=2, hidden_size=3, mlp_sizes=(4,))
    m = VLMHModel(spec, cfg, seed=seed)
    m.return_mean, m.return_scale = 0.3, 1.7
    batch = [Trajectory(rng.standard_normal((4, 3)), rng.integers(0, 2, 3), rng.uniform(0, 1, 3),
                        float(rng.uniform(0, 2))) for _ in range(2)]
    noise = rng.standard_normal((2, 4, 2))
    return (lambda: F.tsum(elbo_batch(m, batch, noise=noise))), m.params


def _rilr_instance(rng, seed):
    spec = HMDPSpec(state_dim=2, discount=0.9, horizon=4, num_actions=2)
    cfg = RILRConfig(hidden_size=3, cell_type="lstm" if seed % 2 == 0 else "gru",
                     sigma_sum=float(rng.uniform(0.1, 1)), sigma_reg=float(rng.uniform(0.5, 2)))
    model = ReconstructorModel(spec, cfg, seed=seed)
    model.return_mean, model.return_scale = 1.0, 2.0
    tr = Trajectory(rng.standard_normal((5, 2)), rng.integers(0, 2, 4), rng.standard_normal(4),
                    float(rng.uniform(0, 3)))
    targets = rng.uniform(0, 0.5, (4, 3))
    return (lambda: rilr_loss(model, tr, targets)), model.params


def _fqe_instance(rng, seed):
    params = ParameterSet()
    w = params.add("w", rng.standard_normal((6, 1)))
    X = quadratic_features(rng.standard_normal((25, 2)))
    y = rng.standard_normal((25, 1))
    return (lambda: fqe_regression_loss(w, X, y, ridge=1e-3)), params


def test_gradient_correctness():
    t0 = time.perf_counter()
    worst = {}
    for name, build in (("elbo", _elbo_instance), ("rilr", _rilr_instance), ("fqe", _fqe_instance)):
        errs = []
        for i in range(FD_INSTANCES):
            rng = np.random.default_rng(1000 + i)
            loss, params = build(rng, i)
            errs.append(fd_max_rel_error(loss, params))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = all(v < FD_TOL for v in worst.values()) and elapsed < GRAD_BUDGET_S
    detail = ", ".join(f"{k} max rel err {v:.2e}" for k, v in worst.items())
    assert report(1, "gradient correctness", ok, f"{detail}; {elapsed:.1f}s")


# 2 -------------------------------------------------------------------------


def test_unbiasedness_oracle():
    t0 = time.perf_counter()
    lines, ok = [], True
    for name in ("tabular-small", "tabular-medium"):
        bench = benchmark(name, 0)
        ds = sample_dataset(bench.env, bench.behavior, UNBIASED_N, 0)
        data = EstimationData.from_reconstruction(oracle_reconstruct(ds))
        truth = exact_policy_human_value(bench.env, bench.behavior)
        for est in ESTIMATORS:
            fn = lambda d, est=est: run_estimator(est, d, bench.behavior, "logged").estimate
            value = fn(data)
            se = bootstrap_se(fn, data, 100, rng=1)
            z = abs(value - truth) / se
            ok &= z <= UNBIASED_SE
            lines.append(f"{name}/{est} |err|/se={z:.2f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < UNBIASED_BUDGET_S
    assert report(2, "unbiasedness oracle", ok, f"{', '.join(lines)}; {elapsed:.1f}s")


# 3 -------------------------------------------------------------------------


def test_variance_study():
    t0 = time.perf_counter()
    bench = benchmark("tabular-small", 0)
    target = P.near_behavior_target(bench, VAR_TV)
    s_probs = np.eye(bench.env.num_states)
    tv = 0.5 * np.abs(target.action_probs(s_probs) - bench.behavior.action_probs(s_probs)).sum(1).max()
    assert tv <= VAR_TV + 1e-12 and np.all(bench.env.ihr_mean >= 0)
    study = variance_study(bench.env, target, bench.behavior, VAR_M, VAR_N, seed=0)
    audit = study.audit()
    elapsed = time.perf_counter() - t0
    ok = (study.var_pdis <= VAR_RATIO * study.var_is and audit["all_positive"]
          and elapsed < VAR_BUDGET_S)
    assert report(3, "variance study", ok,
                  f"var_pdis={study.var_pdis:.4g} var_is={study.var_is:.4g} "
                  f"min corr={audit['min_correlation']:.3f} over {audit['pairs']} pairs; "
                  f"{elapsed:.1f}s")


# 4 -------------------------------------------------------------------------


def test_sum_residuals():
    ok, parts = True, []
    for bench in make_benchmark_suite(0):
        ds, _, recon, _ = trained(bench.name, 0)
        med = float(np.median(recon.normalized_residuals()))
        base = max(float(np.max(rescale_reconstruct(ds).normalized_residuals())),
                   float(np.max(fusion_reconstruct(ds).normalized_residuals())))
        ok &= med <= RESIDUAL_RILR and base <= RESIDUAL_BASELINE
        parts.append(f"{bench.name} rilr median {med:.4f} baselines max {base:.1e}")
    assert report(4, "sum residuals", ok, "; ".join(parts))


# 5 -------------------------------------------------------------------------


def test_constant_reward_recovery():
    c = 1.0
    ok, parts = True, []
    for seed in SEEDS:
        env = constant_ihr_env(c, seed=seed)
        train = sample_dataset(env, P.Policy("uniform-random", env.num_actions), N_TRAJ // 2, seed)
        held = sample_dataset(env, P.Policy("uniform-random", env.num_actions), 500, 100 + seed)
        model = VLMHModel(train.spec, VLMHConfig(), seed=seed)
        model, _ = train_vlmh(model, train, rng=seed)
        recon_model, _, _ = train_rilr(train, model, RILRConfig(seed=seed), rng=seed)
        err = float(np.mean(np.abs(reconstruct(recon_model, held).ihrs - c)))
        ok &= err <= CONSTANT_REL_MAE * c
        parts.append(f"seed {seed} MAE {err:.4f}")
    assert report(5, "constant-reward recovery", ok, ", ".join(parts))


# 6 -------------------------------------------------------------------------


def test_main_claim():
    t0 = time.perf_counter()
    maes = {}
    ranks = {}
    for seed in SEEDS:
        bench = benchmark("confounder-weak", seed)
        ds, model, recon, _ = trained("confounder-weak", seed)
        truths = [mc_policy_human_value(bench.env, p, 20_000, seed)[0] for p in bench.targets]
        beh = estimate_behavior_policy(ds, rng=seed)
        for est in ("pdis", "fqe"):
            for meth, rd in (("rescale", rescale_reconstruct(ds)), ("rilr", recon)):
                vals = [run_estimator(est, rd, p, beh).estimate for p in bench.targets]
                maes.setdefault((est, meth), []).append(mae(vals, truths))
                ranks.setdefault((est, meth), []).append(rank_correlation(vals, truths))
        s0 = ds.states[:, 0]
        abl = [predict_human_return(model, p, np.random.default_rng([seed, k]), 512, s0)
               for k, p in enumerate(bench.targets)]
        maes.setdefault(("vlmh-ablation", "vlmh"), []).append(mae(abl, truths))
    elapsed = time.perf_counter() - t0 + sum(trained("confounder-weak", s)[3] for s in SEEDS)
    mean = {k: float(np.mean(v)) for k, v in maes.items()}
    rmean = {k: float(np.mean(v)) for k, v in ranks.items()}
    abl = mean[("vlmh-ablation", "vlmh")]
    checks = {}
    for est in ("pdis", "fqe"):
        checks[f"{est} mae"] = mean[(est, "rilr")] < mean[(est, "rescale")]
        checks[f"{est} rank"] = rmean[(est, "rilr")] > rmean[(est, "rescale")]
        checks[f"{est} vs ablation"] = mean[(est, "rilr")] < abl
    ok = all(checks.values()) and elapsed < MAIN_BUDGET_S
    detail = "; ".join(
        f"{est} MAE rilr {mean[(est, 'rilr')]:.3f} rescale {mean[(est, 'rescale')]:.3f} "
        f"rank rilr {rmean[(est, 'rilr')]:+.3f} rescale {rmean[(est, 'rescale')]:+.3f}"
        for est in ("pdis", "fqe"))
    failed = [k for k, v in checks.items() if not v]
    assert report(6, "main claim", ok, f"{detail}; ablation MAE {abl:.3f}; "
                  f"failed {failed or 'none'}; {elapsed:.0f}s")


# 7 -------------------------------------------------------------------------


def test_fusion_ordering():
    ok, parts = True, []
    for seed in SEEDS:
        bench = benchmark("confounder-strong", seed)
        truths = [mc_policy_human_value(bench.env, p, 20_000, seed)[0] for p in bench.targets]
        ds = sample_mixture_dataset(bench, N_TRAJ, seed)
        beh = estimate_behavior_policy(ds, rng=seed)
        for est in ESTIMATORS:
            m = {meth: mae([run_estimator(est, fn(ds), p, beh).estimate for p in bench.targets],
                           truths)
                 for meth, fn in (("rescale", rescale_reconstruct), ("fusion", fusion_reconstruct))}
            ok &= m["fusion"] <= m["rescale"]
            parts.append(f"s{seed}/{est} {m['fusion']:.2f}<={m['rescale']:.2f}")
    assert report(7, "fusion ordering", ok, ", ".join(parts))


# 8 -------------------------------------------------------------------------


def test_metric_correctness():
    truth = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    est = [1.5, 1.0, 3.5, 6.0, 4.0, 5.0]
    ok = abs(mae(est, truth) - 1.0) <= 1e-15
    ok &= abs(rank_correlation(est, truth) - (1 - 6 * 8 / 210)) <= 1e-12
    ok &= abs(regret_at_1(est, truth) - 2 / 6) <= 1e-15
    ok &= abs(rank_correlation([1.0, 1.0, 2.0, 3.0], [1.0, 2.0, 3.0, 4.0])
              - 0.9486832980505138) <= 1e-12
    rng = np.random.default_rng(0)
    for _ in range(FIXTURE_COUNT):
        k = int(rng.integers(2, 12))
        t, e = rng.uniform(0.1, 10.0, k), rng.standard_normal(k)
        ok &= regret_at_1(rng.uniform(0.1, 5.0) * e + rng.uniform(-5, 5), t) == regret_at_1(e, t)
    assert report(8, "metric correctness", ok,
                  f"6-policy fixture, ties, {FIXTURE_COUNT} affine fixtures")


# 9 -------------------------------------------------------------------------


def test_latent_clustering():
    ok, parts = True, []
    for seed in SEEDS:
        ds, model, _, _ = trained("confounder-weak", seed)
        z = encode_dataset(model, ds)[:, -1]
        g = ds.human_returns
        q = np.digitize(g, np.quantile(g, [0.25, 0.5, 0.75]))
        D = squareform(pdist(z))
        same = q[:, None] == q[None]
        off = ~np.eye(len(g), dtype=bool)
        within, between = D[same & off].mean(), D[~same].mean()
        ok &= within < between
        parts.append(f"seed {seed} within {within:.3f} between {between:.3f}")
    assert report(9, "latent clustering", ok, ", ".join(parts))


# 10 ------------------------------------------------------------------------


def test_determinism(tmp_path):
    doc = {"benchmark": "tabular-small", "n_trajectories": 200, "seeds": [0, 1],
           "methods": ["rilr", "rescale", "fusion"], "estimators": list(ESTIMATORS),
           "ablation_rollouts": 32,
           "vlmh": {"latent_dim": 4, "hidden_size": 16, "mlp_sizes": [32], "epochs": 3},
           "rilr": {"epochs": 3}}
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(doc))
    for run in ("a", "b"):
        P.cmd_run_pipeline(P.config_from_dict({**doc, "output_dir": str(tmp_path / run)}))
    names = ("report.csv", "report.json", "estimates.jsonl", "manifest.json")
    same = {n: (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names}
    assert report(10, "determinism", all(same.values()),
                  ", ".join(f"{n} {'identical' if v else 'differs'}" for n, v in same.items()))
