"""Per-step human reward reconstruction.

The learned reconstructor is a bidirectional recurrent network that reads a
whole trajectory plus its human return and emits one reward per step. It is
trained so that the discounted sum of its outputs matches the observed return
while each output is pulled toward ``(1 - gamma) * G`` of the trajectories
whose latent encodings sit nearest to that step. Two closed-form baselines
(rescale and fusion) and an oracle that exposes the simulator's true rewards
share the same output type.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import diff as D
from .core import OfflineDataset, Trajectory, discount_weights, load_dataset, save_dataset
from .diff import tensor as F
from .diff.nn import Linear, bidirectional_forward, make_cell
from .diff.tensor import _LOG_2PI
from .seeding import as_rng
from .vlmh import LatentPool, VLMHModel, encode_dataset, knn_indices

METHODS = ("rilr", "rescale", "fusion", "oracle-ihr")
UNDERFLOW_FLOOR = 1e-12


@dataclass
class RILRConfig:
    """Reconstructor and objective settings.

    ``sigma_sum`` and ``sigma_reg`` default (``None``) to data-dependent
    scales: ``0.1 * std(G)`` and ``std(G)`` respectively.
    """

    regularizer_weight: float = 1.0
    num_neighbors: int = 5
    sigma_sum: Optional[float] = None
    sigma_reg: Optional[float] = None
    hidden_size: int = 32
    cell_type: str = "lstm"
    learning_rate: float = 3e-3
    lr_decay: float = 0.999
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    finite_horizon_target: bool = False

    def __post_init__(self):
        if self.regularizer_weight < 0:
            raise ValueError("regularizer_weight must be >= 0")
        if self.num_neighbors < 1:
            raise ValueError("num_neighbors must be >= 1")
        for name in ("sigma_sum", "sigma_reg"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hidden_size < 1 or self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("hidden_size, epochs, batch_size and learning_rate must be positive")
        if self.cell_type not in ("gru", "gru-style", "lstm", "lstm-style"):
            raise ValueError(f"unknown cell type {self.cell_type!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def return_scale(returns: np.ndarray) -> float:
    """Spread of the human returns, falling back to ``max(|mean|, 1)`` when constant."""
    g = np.asarray(returns, dtype=float)
    sd = float(np.std(g))
    return sd if sd > 1e-8 * (1.0 + abs(float(np.mean(g)))) else max(abs(float(np.mean(g))), 1.0)


def resolve_sigmas(config: RILRConfig, returns: np.ndarray):
    s = return_scale(returns)
    sigma_sum = config.sigma_sum if config.sigma_sum is not None else 0.1 * s
    sigma_reg = config.sigma_reg if config.sigma_reg is not None else s
    return sigma_sum, sigma_reg


# ---------------------------------------------------------------------------
# Reconstructed datasets


@dataclass(frozen=True)
class ReconstructedDataset:
    base: OfflineDataset
    ihrs: np.ndarray
    method: str
    sum_residuals: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown reconstruction method {self.method!r}")
        ihrs = np.array(self.ihrs, dtype=float)
        if ihrs.shape != (self.base.n, self.base.spec.horizon):
            raise ValueError(f"ihrs must have shape {(self.base.n, self.base.spec.horizon)}")
        ihrs.setflags(write=False)
        object.__setattr__(self, "ihrs", ihrs)
        res = self.sum_residuals
        if res is None:
            res = np.abs(ihrs @ discount_weights(self.base.spec.horizon, self.base.spec.discount)
                         - self.base.human_returns)
        res = np.array(res, dtype=float)
        res.setflags(write=False)
        object.__setattr__(self, "sum_residuals", res)

    @property
    def discount(self) -> float:
        return self.base.spec.discount

    @property
    def horizon(self) -> int:
        return self.base.spec.horizon

    def normalized_residuals(self) -> np.ndarray:
        return self.sum_residuals / (1.0 + np.abs(self.base.human_returns))

    def returns(self) -> np.ndarray:
        """Discounted sums of the reconstructed rewards."""
        return self.ihrs @ discount_weights(self.horizon, self.discount)


def _last_step_factor(dataset: OfflineDataset) -> float:
    f = dataset.spec.discount ** (dataset.spec.horizon - 1)
    if f < UNDERFLOW_FLOOR:
        raise FloatingPointError(
            f"discount^(T-1) = {f:.3g} underflows; rescale/fusion are ill-conditioned")
    return f


def rescale_reconstruct(dataset: OfflineDataset) -> ReconstructedDataset:
    """Whole human return at the last step, divided by discount^(T-1)."""
    f = _last_step_factor(dataset)
    ihrs = np.zeros((dataset.n, dataset.spec.horizon))
    ihrs[:, -1] = dataset.human_returns / f
    return ReconstructedDataset(dataset, ihrs, "rescale")


def fusion_reconstruct(dataset: OfflineDataset) -> ReconstructedDataset:
    """Environmental rewards, with the last step absorbing the return gap."""
    f = _last_step_factor(dataset)
    w = discount_weights(dataset.spec.horizon, dataset.spec.discount)
    ihrs = dataset.env_rewards.copy()
    gap = dataset.human_returns - dataset.env_rewards @ w
    ihrs[:, -1] += gap / f
    return ReconstructedDataset(dataset, ihrs, "fusion")


def oracle_reconstruct(dataset: OfflineDataset) -> ReconstructedDataset:
    """The simulator's true per-step human rewards (simulation only)."""
    ihrs = dataset.true_ihrs
    if ihrs is None:
        raise ValueError("dataset carries no oracle rewards")
    return ReconstructedDataset(dataset, ihrs, "oracle-ihr")


# ---------------------------------------------------------------------------
# Reconstructor network


class ReconstructorModel:
    """Bidirectional recurrent map from a trajectory and its return to per-step rewards.

    Per-step inputs are the state, the one-hot action, the standardized
    environmental reward and the standardized human return. The linear readout
    is mapped through ``mean(G)/c + std(G)/c * raw`` with ``c = sum_t gamma^t``,
    so an untrained network already emits rewards on the right scale.
    """

    def __init__(self, spec, config: Optional[RILRConfig] = None, seed: Optional[int] = None):
        if not spec.discrete:
            raise ValueError("the reconstructor supports discrete action spaces only")
        self.spec = spec
        self.config = config or RILRConfig()
        c = self.config
        rng = np.random.default_rng(c.seed if seed is None else seed)
        n_in = spec.state_dim + spec.num_actions + 2
        self.params = P = D.ParameterSet()
        self.fwd = make_cell(c.cell_type, P, "rec.fwd", n_in, c.hidden_size, rng)
        self.bwd = make_cell(c.cell_type, P, "rec.bwd", n_in, c.hidden_size, rng)
        self.readout = Linear(P, "rec.out", 2 * c.hidden_size, 1, rng)
        self.reward_mean, self.reward_scale = 0.0, 1.0
        self.return_mean, self.return_scale = 0.0, 1.0
        self.sigma_sum: Optional[float] = None
        self.sigma_reg: Optional[float] = None
        self.trained = False

    def fit_normalizers(self, dataset: OfflineDataset) -> None:
        r = dataset.env_rewards
        self.reward_mean = float(r.mean())
        sd = float(r.std())
        self.reward_scale = sd if sd > 1e-8 else 1.0
        g = dataset.human_returns
        self.return_mean = float(g.mean())
        self.return_scale = return_scale(g)

    @property
    def output_shift(self) -> float:
        return self.return_mean / discount_weights(self.spec.horizon, self.spec.discount).sum()

    @property
    def output_gain(self) -> float:
        return self.return_scale / discount_weights(self.spec.horizon, self.spec.discount).sum()

    def forward(self, states, actions, env_rewards, human_returns) -> D.Tensor:
        """Per-step outputs, shape (B, T)."""
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=int)
        B, T = actions.shape
        if states.shape[1] != T + 1 or states.shape[2] != self.spec.state_dim:
            raise ValueError("states do not match the reconstructor's spec")
        a1h = np.eye(self.spec.num_actions)[actions]
        r = (np.asarray(env_rewards, dtype=float) - self.reward_mean) / self.reward_scale
        g = (np.asarray(human_returns, dtype=float) - self.return_mean) / self.return_scale
        gb = np.broadcast_to(g[:, None], (B, T))
        x = np.concatenate([states[:, :T], a1h, r[..., None], gb[..., None]], axis=-1)
        hs = bidirectional_forward(self.fwd, self.bwd, [x[:, t] for t in range(T)])
        raw = F.concat([self.readout(h) for h in hs], axis=-1)
        return self.output_shift + self.output_gain * raw

    def predict(self, dataset: OfflineDataset, batch_size: int = 1024) -> np.ndarray:
        out = []
        for s in range(0, dataset.n, batch_size):
            sl = slice(s, s + batch_size)
            out.append(self.forward(dataset.states[sl], dataset.actions[sl],
                                    dataset.env_rewards[sl], dataset.human_returns[sl]).value)
        return np.concatenate(out)

    def metadata(self) -> dict:
        return {"config": self.config.to_dict(), "spec": self.spec.to_dict(),
                "normalizers": {"reward_mean": self.reward_mean, "reward_scale": self.reward_scale,
                                "return_mean": self.return_mean, "return_scale": self.return_scale}}


# ---------------------------------------------------------------------------
# Objective


def rilr_objective(outputs, human_returns, neighbor_targets, discount: float,
                   regularizer_weight: float, sigma_sum: float, sigma_reg: float) -> D.Tensor:
    """Negative log-objective per trajectory, shape (B,).

    ``outputs`` (B, T) are reconstructed rewards, ``neighbor_targets`` (B, T, K)
    the per-step regression targets from latent neighbours. The first term is
    a Gaussian likelihood of the return given the discounted sum of outputs;
    the second sums Gaussian negative log-likelihoods of each output under
    each of its neighbour targets.
    """
    outputs = F.as_tensor(outputs)
    B, T = outputs.shape
    w = discount_weights(T, discount)
    g = np.asarray(human_returns, dtype=float)
    total = F.tsum(outputs * w, axis=-1)
    loss = 0.5 * np.log(2 * np.pi * sigma_sum ** 2) + F.square(total - g) / (2 * sigma_sum ** 2)
    if regularizer_weight > 0:
        if neighbor_targets is None:
            raise ValueError("regularizer_weight > 0 needs neighbour targets")
        y = np.asarray(neighbor_targets, dtype=float)
        if y.shape[:2] != (B, T):
            raise ValueError(f"neighbour targets must have shape (B, T, K), got {y.shape}")
        K = y.shape[2]
        diff = F.reshape(outputs, (B, T, 1)) - y
        reg = K * T * 0.5 * (_LOG_2PI + np.log(sigma_reg ** 2)) \
            + F.tsum(F.reshape(F.square(diff), (B, T * K)), axis=-1) / (2 * sigma_reg ** 2)
        loss = loss + regularizer_weight * reg
    return loss


def rilr_loss(model: ReconstructorModel, trajectory: Trajectory, neighbor_targets,
              config: Optional[RILRConfig] = None, sigma_sum: Optional[float] = None,
              sigma_reg: Optional[float] = None) -> D.Tensor:
    """Scalar loss for one trajectory; ``neighbor_targets`` has shape (T, K)."""
    config = config or model.config
    if config.regularizer_weight > 0 and neighbor_targets is None:
        raise ValueError("missing neighbour targets")
    s_sum, s_reg = resolve_sigmas(config, [trajectory.human_return])
    sigma_sum = sigma_sum or model.sigma_sum or s_sum
    sigma_reg = sigma_reg or model.sigma_reg or s_reg
    out = model.forward(trajectory.states[None], trajectory.actions[None],
                        trajectory.env_rewards[None], np.array([trajectory.human_return]))
    y = None if neighbor_targets is None else np.asarray(neighbor_targets, dtype=float)[None]
    return rilr_objective(out, [trajectory.human_return], y, model.spec.discount,
                          config.regularizer_weight, sigma_sum, sigma_reg)[0]


# ---------------------------------------------------------------------------
# Neighbour targets and training


def neighbor_targets(encodings: np.ndarray, human_returns: np.ndarray, discount: float, K: int,
                     finite_horizon: bool = False) -> np.ndarray:
    """Regression targets (N, T, K) from the K nearest latent neighbours of every (i, t).

    ``encodings`` has shape (N, T+1, L). The reward at step t is decoded from
    ``z_{t+1}`` by the latent model, so steps 1..T form both the pool and the
    queries; a query never matches its own trajectory.
    """
    N, T1, L = encodings.shape
    T = T1 - 1
    pool = LatentPool.from_array(encodings, human_returns, steps=np.arange(1, T1))
    queries = encodings[:, 1:].reshape(-1, L)
    idx = knn_indices(pool, queries, np.repeat(np.arange(N), T), K)
    factor = (1.0 - discount) / (1.0 - discount ** T) if finite_horizon else 1.0 - discount
    return factor * pool.human_return[idx].reshape(N, T, K)


@dataclass
class RILRLog:
    epoch_losses: list = field(default_factory=list)
    initial_loss: float = float("nan")
    sigma_sum: float = float("nan")
    sigma_reg: float = float("nan")


def _mean_loss(model, dataset, targets, cfg, sigma_sum, sigma_reg, batch_size=512) -> float:
    vals = []
    for s in range(0, dataset.n, batch_size):
        sl = slice(s, s + batch_size)
        out = model.forward(dataset.states[sl], dataset.actions[sl], dataset.env_rewards[sl],
                            dataset.human_returns[sl])
        vals.append(rilr_objective(out, dataset.human_returns[sl],
                                   None if targets is None else targets[sl], dataset.spec.discount,
                                   cfg.regularizer_weight, sigma_sum, sigma_reg).value)
    return float(np.concatenate(vals).mean())


def train_reconstructor(model: ReconstructorModel, dataset: OfflineDataset, targets,
                        config: Optional[RILRConfig] = None, rng=None) -> RILRLog:
    """Minibatch Adam on the reconstruction objective with fixed neighbour targets."""
    cfg = config or model.config
    rng = as_rng(cfg.seed if rng is None else rng)
    model.fit_normalizers(dataset)
    sigma_sum, sigma_reg = resolve_sigmas(cfg, dataset.human_returns)
    model.sigma_sum, model.sigma_reg = sigma_sum, sigma_reg
    log = RILRLog(sigma_sum=sigma_sum, sigma_reg=sigma_reg)
    log.initial_loss = _mean_loss(model, dataset, targets, cfg, sigma_sum, sigma_reg)
    opt = D.Adam(model.params, lr=cfg.learning_rate, lr_decay=cfg.lr_decay)
    model.params.reset_optimizer()
    S, A, R, G = dataset.states, dataset.actions, dataset.env_rewards, dataset.human_returns
    for _ in range(cfg.epochs):
        order = rng.permutation(dataset.n)
        total, count = 0.0, 0
        for s in range(0, dataset.n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            out = model.forward(S[idx], A[idx], R[idx], G[idx])
            per = rilr_objective(out, G[idx], None if targets is None else targets[idx],
                                 dataset.spec.discount, cfg.regularizer_weight, sigma_sum, sigma_reg)
            loss = F.tmean(per)
            if not np.isfinite(loss.value):
                raise FloatingPointError("reconstruction loss became non-finite")
            model.params.zero_grad()
            D.backward(loss)
            opt.step()
            total += float(per.value.sum())
            count += len(idx)
        log.epoch_losses.append(total / count)
    model.trained = True
    return log


def reconstruct(model: ReconstructorModel, dataset: OfflineDataset) -> ReconstructedDataset:
    """Apply a trained reconstructor to any dataset with the same spec."""
    return ReconstructedDataset(dataset, model.predict(dataset), "rilr")


def train_rilr(dataset: OfflineDataset, vlmh_model: VLMHModel, config: Optional[RILRConfig] = None,
               rng=None):
    """Encode, find neighbours, fit the reconstructor and reconstruct ``dataset``.

    Returns ``(model, reconstructed, log)``.
    """
    cfg = config or RILRConfig()
    targets = None
    if cfg.regularizer_weight > 0:
        z = encode_dataset(vlmh_model, dataset)
        targets = neighbor_targets(z, dataset.human_returns, dataset.spec.discount,
                                   cfg.num_neighbors, cfg.finite_horizon_target)
    model = ReconstructorModel(dataset.spec, cfg)
    log = train_reconstructor(model, dataset, targets, cfg, rng)
    return model, reconstruct(model, dataset), log


# ---------------------------------------------------------------------------
# Files


def save_reconstruction(recon: ReconstructedDataset, dataset_path, reconstruction_path) -> None:
    """Dataset file plus a parallel JSON-lines file of reconstructed rewards."""
    save_dataset(recon.base, dataset_path)
    lines = [json.dumps({"ihrs": row.tolist(), "sum_residual": float(res), "method": recon.method})
             for row, res in zip(recon.ihrs, recon.sum_residuals)]
    Path(reconstruction_path).write_text("\n".join(lines) + "\n")


def load_reconstruction(dataset_path, reconstruction_path) -> ReconstructedDataset:
    base = load_dataset(dataset_path)
    rows = [json.loads(line) for line in Path(reconstruction_path).read_text().splitlines() if line]
    if len(rows) != base.n:
        raise ValueError(f"reconstruction file has {len(rows)} rows, dataset has {base.n}")
    methods = {r["method"] for r in rows}
    if len(methods) != 1:
        raise ValueError(f"mixed reconstruction methods {sorted(methods)}")
    return ReconstructedDataset(base, np.array([r["ihrs"] for r in rows]), methods.pop(),
                                np.array([r["sum_residual"] for r in rows]))
