"""End-to-end experiments: data generation, latent model, reconstruction, estimation, report."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from .core import OfflineDataset, Policy, load_dataset, load_policy, mix_policies, save_dataset, save_policy
from .envs import (BenchmarkConfig, TabularHMDP, exact_policy_human_value, load_env,
                   make_benchmark_suite, mc_policy_human_value, sample_dataset, save_env)
from .estimators import (ESTIMATORS, DICEConfig, EstimationData, FQEConfig, estimate_behavior_policy,
                         run_estimator, variance_study)
from .metrics import EvaluationReport
from .rilr import (RILRConfig, fusion_reconstruct, oracle_reconstruct, rescale_reconstruct,
                   save_reconstruction, train_rilr)
from .seeding import rng_for
from .vlmh import (TrainingDivergedError, VLMHConfig, VLMHModel, encode_dataset,
                   predict_human_return, train_vlmh)

log = logging.getLogger(__name__)

METHOD_NAMES = ("rilr", "rescale", "fusion", "oracle-ihr")
BENCHMARKS = ("tabular-small", "tabular-medium", "confounder-weak", "confounder-strong")


class ConfigError(ValueError):
    pass


@dataclass
class VarianceStudyConfig:
    benchmark: str = "tabular-small"
    num_datasets: int = 500
    n_per_dataset: int = 200
    target_mix: float = 0.2


@dataclass
class ExperimentConfig:
    """One experiment; field names match the YAML keys."""

    benchmark: str = "confounder-weak"
    env_file: Optional[str] = None
    behavior_policy: Optional[str] = None
    target_policies: List[str] = field(default_factory=list)
    env_seed: Optional[int] = None
    latent_horizon: int = 10
    n_trajectories: int = 2000
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    estimators: List[str] = field(default_factory=lambda: ["pdis", "fqe"])
    methods: List[str] = field(default_factory=lambda: ["rilr", "rescale"])
    behavior: str = "estimated"
    truth_episodes: int = 20000
    ablation: bool = True
    ablation_rollouts: int = 512
    clip: Optional[float] = None
    standard_dr: bool = True
    vlmh: VLMHConfig = field(default_factory=VLMHConfig)
    rilr: RILRConfig = field(default_factory=RILRConfig)
    fqe: FQEConfig = field(default_factory=FQEConfig)
    dice: DICEConfig = field(default_factory=DICEConfig)
    variance_study: Optional[VarianceStudyConfig] = None
    output_dir: str = "out"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if any(int(s) < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")
        if not self.estimators or not self.methods:
            raise ConfigError("at least one estimator and one method are required")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad:
            raise ConfigError(f"unknown estimators {sorted(bad)}")
        bad = set(self.methods) - set(METHOD_NAMES)
        if bad:
            raise ConfigError(f"unknown methods {sorted(bad)}")
        if self.env_file is None and self.benchmark not in BENCHMARKS:
            raise ConfigError(f"unknown benchmark {self.benchmark!r}")
        if self.env_file is not None and (self.behavior_policy is None or not self.target_policies):
            raise ConfigError("env_file needs behavior_policy and target_policies")
        if self.behavior not in ("estimated", "logged"):
            raise ConfigError("behavior must be 'estimated' or 'logged'")
        if self.n_trajectories < 1:
            raise ConfigError("n_trajectories must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


_NESTED = {"vlmh": VLMHConfig, "rilr": RILRConfig, "fqe": FQEConfig, "dice": DICEConfig,
           "variance_study": VarianceStudyConfig}


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    kwargs = {}
    for k, v in doc.items():
        if k in _NESTED and v is not None:
            if not isinstance(v, dict):
                raise ConfigError(f"{k} must be a mapping")
            sub = {f.name for f in fields(_NESTED[k])}
            bad = set(v) - sub
            if bad:
                raise ConfigError(f"unknown keys in {k}: {sorted(bad)}")
            try:
                v = _NESTED[k](**v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {k} section: {exc}") from exc
        kwargs[k] = v
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(doc or {})


# ---------------------------------------------------------------------------
# Environments, datasets and truths


def benchmark_for_seed(config: ExperimentConfig, seed: int) -> BenchmarkConfig:
    if config.env_file is not None:
        env = load_env(config.env_file)
        behavior = load_policy(config.behavior_policy)
        targets = tuple(load_policy(p) for p in config.target_policies)
        return BenchmarkConfig(Path(config.env_file).stem, env, behavior, targets)
    env_seed = seed if config.env_seed is None else config.env_seed
    suite = make_benchmark_suite(env_seed, latent_horizon=config.latent_horizon)
    return next(b for b in suite if b.name == config.benchmark)


def policy_id(policy: Policy, k: int) -> str:
    return f"{k}-{policy.name or policy.kind}"


def true_values(bench: BenchmarkConfig, seed: int, episodes: int):
    """(values, standard errors, kind) per target policy."""
    if isinstance(bench.env, TabularHMDP):
        return [exact_policy_human_value(bench.env, p) for p in bench.targets], \
            [0.0] * len(bench.targets), "exact"
    vals, ses = zip(*(mc_policy_human_value(bench.env, p, episodes, seed) for p in bench.targets))
    return list(vals), list(ses), "monte-carlo"


def generate_dataset(config: ExperimentConfig, bench: BenchmarkConfig, seed: int) -> OfflineDataset:
    return sample_dataset(bench.env, bench.behavior, config.n_trajectories, seed,
                          provenance=bench.behavior.name or bench.behavior.kind)


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {path} is not writable: {exc}") from exc
    return path


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def cmd_gen_data(config: ExperimentConfig, out_dir=None) -> dict:
    """Write per-seed env, policies and dataset files plus a manifest of true values."""
    out = _ensure_dir(Path(out_dir or config.output_dir))
    # the output directory is where the manifest lives, so it is left out
    cfg = {k: v for k, v in config.to_dict().items() if k != "output_dir"}
    manifest = {"config": cfg, "seeds": {}}
    for seed in config.seeds:
        bench = benchmark_for_seed(config, seed)
        sdir = _ensure_dir(out / f"seed-{seed}")
        ds = generate_dataset(config, bench, seed)
        save_dataset(ds, sdir / "dataset.jsonl")
        save_env(bench.env, sdir / "env.json")
        save_policy(bench.behavior, sdir / "behavior.json")
        truths, ses, kind = true_values(bench, seed, config.truth_episodes)
        targets = []
        for k, (p, v, se) in enumerate(zip(bench.targets, truths, ses)):
            fname = f"target-{k}.json"
            save_policy(p, sdir / fname)
            targets.append({"policy_id": policy_id(p, k), "file": f"seed-{seed}/{fname}",
                            "truth": v, "truth_se": se})
        manifest["seeds"][str(seed)] = {
            "benchmark": bench.name, "env_file": f"seed-{seed}/env.json",
            "dataset_file": f"seed-{seed}/dataset.jsonl", "behavior_file": f"seed-{seed}/behavior.json",
            "truth_kind": kind, "targets": targets}
    (out / "manifest.json").write_text(_dump(manifest))
    return manifest


# ---------------------------------------------------------------------------
# Pipeline


def _reconstruct(method: str, ds: OfflineDataset, model, config: ExperimentConfig, seed: int):
    if method == "rescale":
        return rescale_reconstruct(ds)
    if method == "fusion":
        return fusion_reconstruct(ds)
    if method == "oracle-ihr":
        return oracle_reconstruct(ds)
    if model is None:
        raise RuntimeError("latent model unavailable for reconstruction")
    cfg = RILRConfig(**{**asdict(config.rilr), "seed": seed})
    _, recon, _ = train_rilr(ds, model, cfg, rng=rng_for(seed, "rilr"))
    return recon


def run_seed(config: ExperimentConfig, seed: int, report: EvaluationReport, out: Path,
             records: list, extras: dict) -> None:
    bench = benchmark_for_seed(config, seed)
    ds = generate_dataset(config, bench, seed)
    truths, _, _ = true_values(bench, seed, config.truth_episodes)
    ids = [policy_id(p, k) for k, p in enumerate(bench.targets)]
    sdir = _ensure_dir(out / f"seed-{seed}")
    seed_extra = {"benchmark": bench.name}

    model = None
    if "rilr" in config.methods:
        try:
            model = VLMHModel(ds.spec, config.vlmh, seed=int(rng_for(seed, "vlmh-init").integers(2**31)))
            model, tlog = train_vlmh(model, ds, config.vlmh, rng_for(seed, "vlmh-train"))
            model.save(sdir / "vlmh.json", {"training_log": {
                "epochs": tlog.epochs, "best_epoch": tlog.best_epoch,
                "top_checkpoints": tlog.top_checkpoints}})
        except (TrainingDivergedError, FloatingPointError, ValueError) as exc:
            log.error("seed %d: latent model failed: %s", seed, exc)
            seed_extra["vlmh_error"] = str(exc)
            model = None

    if config.behavior == "logged":
        behavior = "logged"
    else:
        behavior = estimate_behavior_policy(ds, rng=rng_for(seed, "behavior"))
        seed_extra["behavior_heldout_loglik"] = behavior.heldout_loglik

    for method in config.methods:
        try:
            recon = _reconstruct(method, ds, model, config, seed)
        except Exception as exc:  # noqa: BLE001 - isolate the failing cell
            for est in config.estimators:
                report.add_error(seed, method, est, f"reconstruction failed: {exc}")
            continue
        save_reconstruction(recon, sdir / "dataset.jsonl", sdir / f"reconstruction-{method}.jsonl")
        seed_extra[f"median_normalized_residual/{method}"] = float(
            np.median(recon.normalized_residuals()))
        data = EstimationData.from_reconstruction(recon)
        for est in config.estimators:
            try:
                rows = []
                for k, p in enumerate(bench.targets):
                    res = run_estimator(est, data, p, behavior, ids[k], clip=config.clip,
                                        standard_dr=config.standard_dr, fqe_config=config.fqe,
                                        dice_config=config.dice)
                    if not np.isfinite(res.estimate):
                        raise FloatingPointError(f"non-finite estimate for {ids[k]}")
                    rows.append(res)
            except Exception as exc:  # noqa: BLE001 - isolate the failing cell
                report.add_error(seed, method, est, str(exc))
                continue
            for k, res in enumerate(rows):
                report.add(est, method, ids[k], res.estimate, truths[k], seed)
                records.append({**res.to_record(), "seed": seed})

    if config.ablation and model is not None:
        s0 = ds.states[:, 0]
        for k, p in enumerate(bench.targets):
            v = predict_human_return(model, p, rng_for(seed, "ablation", k),
                                     config.ablation_rollouts, s0)
            report.add("vlmh-ablation", "vlmh", ids[k], v, truths[k], seed)
    extras[str(seed)] = seed_extra


def cmd_run_pipeline(config: ExperimentConfig, out_dir=None) -> EvaluationReport:
    """Run every seed and write report.csv, report.json and estimates.jsonl."""
    out = _ensure_dir(Path(out_dir or config.output_dir))
    cmd_gen_data(config, out)
    report = EvaluationReport()
    records: list = []
    extras: dict = {}
    for seed in config.seeds:
        run_seed(config, seed, report, out, records, extras)
    extra = {"seeds": extras}
    if config.variance_study is not None:
        extra["variance_study"] = cmd_variance_study(config, out, write=False)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.json").write_text(report.to_json(extra))
    (out / "estimates.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n"
                                                 for r in records))
    return report


# ---------------------------------------------------------------------------
# Other commands


def export_encodings(model: VLMHModel, dataset: OfflineDataset, path) -> np.ndarray:
    """CSV rows (trajectory_id, step, z_mean_0..z_mean_{L-1}, human_return)."""
    if not model.trained:
        raise RuntimeError("cannot export encodings from an untrained model")
    z = encode_dataset(model, dataset)
    N, T1, L = z.shape
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trajectory_id", "step"] + [f"z_mean_{j}" for j in range(L)] + ["human_return"])
    g = dataset.human_returns
    for i in range(N):
        for t in range(T1):
            w.writerow([i, t] + [repr(float(v)) for v in z[i, t]] + [repr(float(g[i]))])
    Path(path).write_text(buf.getvalue())
    return z


def read_encodings(path):
    """Parse an encodings CSV into (trajectory ids, steps, z, human returns)."""
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    body = np.array(rows[1:], dtype=object)
    return (body[:, 0].astype(int), body[:, 1].astype(int), body[:, 2:-1].astype(float),
            body[:, -1].astype(float))


def cmd_export_encodings(config: ExperimentConfig, out_dir=None, model_path=None,
                         dataset_path=None, output=None) -> List[Path]:
    out = Path(out_dir or config.output_dir)
    written = []
    if model_path is not None:
        model = VLMHModel.load(model_path)
        ds = load_dataset(dataset_path)
        target = Path(output or out / "encodings.csv")
        export_encodings(model, ds, target)
        return [target]
    for seed in config.seeds:
        sdir = out / f"seed-{seed}"
        model = VLMHModel.load(sdir / "vlmh.json")
        ds = load_dataset(sdir / "dataset.jsonl")
        export_encodings(model, ds, sdir / "encodings.csv")
        written.append(sdir / "encodings.csv")
    return written


def near_behavior_target(bench: BenchmarkConfig, mix: float) -> Policy:
    """Per-state mixture of the behaviour policy and the best target (total variation <= mix)."""
    best = max(bench.targets, key=lambda p: exact_policy_human_value(bench.env, p))
    return mix_policies([bench.behavior, best], [1.0 - mix, mix], name=f"near-behavior({mix:g})")


def cmd_variance_study(config: ExperimentConfig, out_dir=None, write: bool = True) -> dict:
    vs = config.variance_study or VarianceStudyConfig()
    results = {}
    for seed in config.seeds:
        env_seed = seed if config.env_seed is None else config.env_seed
        bench = next(b for b in make_benchmark_suite(env_seed, config.latent_horizon)
                     if b.name == vs.benchmark)
        if not isinstance(bench.env, TabularHMDP):
            raise ConfigError("the variance study needs a tabular benchmark")
        target = near_behavior_target(bench, vs.target_mix)
        study = variance_study(bench.env, target, bench.behavior, vs.num_datasets, vs.n_per_dataset,
                               seed)
        results[str(seed)] = study.to_dict()
    if write:
        out = _ensure_dir(Path(out_dir or config.output_dir))
        (out / "variance_study.json").write_text(_dump(results))
    return results


def format_report(report: EvaluationReport) -> str:
    lines = [f"{'estimator':<14}{'method':<12}{'MAE':>16}{'rank corr':>18}{'regret@1':>18}"]
    for key, entry in report.aggregate().items():
        est, meth = key.split("/")
        cells = []
        for name in ("mae", "rank_correlation", "regret_at_1"):
            m, se = entry[name]["mean"], entry[name]["se"]
            cells.append("n/a".rjust(16 if name == "mae" else 18) if m is None else
                         f"{m:.3f} ± {se:.3f}".rjust(16 if name == "mae" else 18))
        lines.append(f"{est:<14}{meth:<12}" + "".join(cells))
    for e in report.errors:
        lines.append(f"error seed={e['seed']} method={e['method']} estimator={e['estimator']}: "
                     f"{e['error']}")
    return "\n".join(lines)


def cmd_report(out_dir) -> str:
    out = Path(out_dir)
    report = EvaluationReport.from_csv((out / "report.csv").read_text())
    if (out / "report.json").exists():
        report.errors = json.loads((out / "report.json").read_text()).get("errors", [])
    return format_report(report)
