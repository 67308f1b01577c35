"""Variational latent model with human returns (VLM-H).

A sequential VAE over offline trajectories. The encoder infers latent states
``z_0 .. z_T`` from states and actions; the decoder carries a latent
transition prior, per-step state and environmental-reward heads, and a
terminal head that reconstructs the episode's human return from ``z_T``.
All conditionals are diagonal Gaussians.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from . import diff as D
from .core import HMDPSpec, OfflineDataset, Policy, Trajectory
from .diff import tensor as F
from .diff.nn import MLP, DiagGaussianHead, GRUCell
from .seeding import as_rng


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite objective; ``model`` holds the last good parameters."""

    def __init__(self, message, model=None, log=None):
        super().__init__(message)
        self.model = model
        self.log = log


class UntrainedModelError(RuntimeError):
    pass


@dataclass
class VLMHConfig:
    latent_dim: int = 8
    hidden_size: int = 64
    mlp_sizes: tuple = (128, 64)
    learning_rate: float = 1e-3
    lr_decay: float = 0.997
    epochs: int = 20
    batch_size: int = 64
    weight_decay: float = 1e-3
    kl_weight: float = 1.0
    standardize_returns: bool = True
    validation_fraction: float = 0.1

    def __post_init__(self):
        self.mlp_sizes = tuple(int(x) for x in self.mlp_sizes)
        if not 1 <= self.latent_dim <= 64:
            raise ValueError("latent_dim must lie in [1, 64]")
        for name in ("hidden_size", "learning_rate", "epochs", "batch_size", "kl_weight"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("weight_decay must be >= 0 and lr_decay in (0, 1]")
        if any(s <= 0 for s in self.mlp_sizes):
            raise ValueError("MLP sizes must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_sizes"] = list(self.mlp_sizes)
        return d


@dataclass(frozen=True)
class LatentEncoding:
    trajectory_index: int
    step: int
    mean: np.ndarray
    human_return: float


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    initial_train_elbo: float = float("nan")
    initial_val_elbo: float = float("nan")
    final_train_elbo: float = float("nan")
    best_epoch: int = 0
    best_val_elbo: float = float("-inf")
    top_checkpoints: list = field(default_factory=list)


class VLMHModel:
    """Encoder (psi) and decoder (phi) networks plus a return scaler."""

    def __init__(self, spec: HMDPSpec, config: Optional[VLMHConfig] = None, seed: int = 0,
                 zero_heads: bool = False):
        if not spec.discrete:
            raise ValueError("VLM-H supports discrete action spaces only")
        self.spec = spec
        self.config = config or VLMHConfig()
        c = self.config
        rng = np.random.default_rng(seed)
        d, A, L, H = spec.state_dim, spec.num_actions, c.latent_dim, c.hidden_size
        self.params = P = D.ParameterSet()
        # encoder
        self.enc0_mlp = MLP(P, "enc0.mlp", d, c.mlp_sizes, rng)
        self.enc0_head = DiagGaussianHead(P, "enc0.head", self.enc0_mlp.n_out, L, rng, zero_heads)
        self.enc_cell = GRUCell(P, "enc.cell", L + A + d, H, rng)
        self.enc_mlp = MLP(P, "enc.mlp", H, c.mlp_sizes, rng)
        self.enc_head = DiagGaussianHead(P, "enc.head", self.enc_mlp.n_out, L, rng, zero_heads)
        # decoder
        self.prior_cell = GRUCell(P, "prior.cell", L + A, H, rng)
        self.prior_mlp = MLP(P, "prior.mlp", H, c.mlp_sizes, rng)
        self.prior_head = DiagGaussianHead(P, "prior.head", self.prior_mlp.n_out, L, rng, zero_heads)
        self.state_mlp = MLP(P, "state.mlp", L, c.mlp_sizes, rng)
        self.state_head = DiagGaussianHead(P, "state.head", self.state_mlp.n_out, d, rng)
        self.reward_mlp = MLP(P, "reward.mlp", L, c.mlp_sizes, rng)
        self.reward_head = DiagGaussianHead(P, "reward.head", self.reward_mlp.n_out, 1, rng)
        self.return_mlp = MLP(P, "return.mlp", L, c.mlp_sizes, rng)
        self.return_head = DiagGaussianHead(P, "return.head", self.return_mlp.n_out, 1, rng)
        self.return_mean = 0.0
        self.return_scale = 1.0
        self.trained = False

    # -- building blocks -------------------------------------------------
    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def _onehot(self, actions: np.ndarray) -> np.ndarray:
        return np.eye(self.spec.num_actions)[np.asarray(actions, dtype=int)]

    def posterior0(self, s0):
        return self.enc0_head(self.enc0_mlp(s0))

    def posterior_step(self, z_prev, a_prev_onehot, s_t, h):
        h = self.enc_cell(F.concat([z_prev, a_prev_onehot, s_t], axis=-1), h)
        mu, sig = self.enc_head(self.enc_mlp(h))
        return mu, sig, h

    def prior_step(self, z_prev, a_prev_onehot, h):
        h = self.prior_cell(F.concat([z_prev, a_prev_onehot], axis=-1), h)
        mu, sig = self.prior_head(self.prior_mlp(h))
        return mu, sig, h

    def decode_state(self, z):
        return self.state_head(self.state_mlp(z))

    def decode_reward(self, z):
        return self.reward_head(self.reward_mlp(z))

    def decode_return(self, z):
        return self.return_head(self.return_mlp(z))

    def standardize(self, g):
        return (np.asarray(g, dtype=float) - self.return_mean) / self.return_scale

    def unstandardize(self, g):
        return np.asarray(g, dtype=float) * self.return_scale + self.return_mean

    def metadata(self) -> dict:
        return {"config": self.config.to_dict(), "spec": self.spec.to_dict(),
                "return_scaler": {"mean": self.return_mean, "scale": self.return_scale},
                "trained": self.trained}

    def save(self, path, extra: Optional[dict] = None) -> None:
        meta = self.metadata()
        if extra:
            meta.update(extra)
        D.save_checkpoint(self.params, path, meta)

    @classmethod
    def load(cls, path) -> "VLMHModel":
        values, meta = D.read_checkpoint(path)
        model = cls(HMDPSpec.from_dict(meta["spec"]), VLMHConfig(**meta["config"]))
        model.params.load(values)
        model.return_mean = float(meta["return_scaler"]["mean"])
        model.return_scale = float(meta["return_scaler"]["scale"])
        model.trained = bool(meta.get("trained", True))
        return model


# ---------------------------------------------------------------------------
# ELBO


def _batch_arrays(model: VLMHModel, batch):
    if isinstance(batch, Trajectory):
        batch = [batch]
    if isinstance(batch, OfflineDataset):
        return batch.states, batch.actions, batch.env_rewards, batch.human_returns
    states = np.stack([tr.states for tr in batch])
    actions = np.stack([tr.actions for tr in batch])
    rewards = np.stack([tr.env_rewards for tr in batch])
    returns = np.array([tr.human_return for tr in batch])
    return states, actions, rewards, returns


def _check_dims(model: VLMHModel, states, actions):
    if states.shape[-1] != model.spec.state_dim:
        raise ValueError(f"states have dimension {states.shape[-1]}, model expects "
                         f"{model.spec.state_dim}")
    if states.shape[1] != actions.shape[1] + 1:
        raise ValueError("states must have one more step than actions")


def elbo_terms(model: VLMHModel, states, actions, rewards, returns, noise):
    """Per-trajectory ELBO pieces as tensors of shape (B,).

    ``noise`` has shape (B, T+1, L) and drives the reparameterised samples.
    """
    states = np.asarray(states, dtype=float)
    _check_dims(model, states, actions)
    B, T1, _ = states.shape
    T = T1 - 1
    a1h = model._onehot(actions)
    g = model.standardize(returns)[:, None]

    mu, sig = model.posterior0(states[:, 0])
    kl0 = D.kl_diag_gauss(mu, sig, np.zeros_like(mu.value), np.ones_like(sig.value))
    z = D.gauss_sample_reparam(mu, sig, noise[:, 0])
    smu, ssig = model.decode_state(z)
    ll_state = D.gauss_log_prob(smu, ssig, states[:, 0])
    ll_reward = None
    kl_steps = None
    hq = model.enc_cell.initial_state(B)
    hp = model.prior_cell.initial_state(B)
    for t in range(1, T + 1):
        qmu, qsig, hq = model.posterior_step(z, a1h[:, t - 1], states[:, t], hq)
        pmu, psig, hp = model.prior_step(z, a1h[:, t - 1], hp)
        kl = D.kl_diag_gauss(qmu, qsig, pmu, psig)
        kl_steps = kl if kl_steps is None else kl_steps + kl
        z = D.gauss_sample_reparam(qmu, qsig, noise[:, t])
        smu, ssig = model.decode_state(z)
        ll_state = ll_state + D.gauss_log_prob(smu, ssig, states[:, t])
        rmu, rsig = model.decode_reward(z)
        lr = D.gauss_log_prob(rmu, rsig, rewards[:, t - 1:t])
        ll_reward = lr if ll_reward is None else ll_reward + lr
    gmu, gsig = model.decode_return(z)
    ll_return = D.gauss_log_prob(gmu, gsig, g)
    return {"return_loglik": ll_return, "state_loglik": ll_state, "reward_loglik": ll_reward,
            "kl_initial": kl0, "kl_transition": kl_steps}


def elbo_from_terms(model: VLMHModel, terms) -> D.Tensor:
    for name, t in terms.items():
        if not np.all(np.isfinite(t.value)):
            raise FloatingPointError(f"non-finite ELBO term: {name}")
    w = model.config.kl_weight
    return (terms["return_loglik"] + terms["state_loglik"] + terms["reward_loglik"]
            - w * (terms["kl_initial"] + terms["kl_transition"]))


def elbo_batch(model: VLMHModel, batch, rng=None, noise=None) -> D.Tensor:
    """ELBO per trajectory, shape (B,). ``noise`` overrides sampling from ``rng``."""
    states, actions, rewards, returns = _batch_arrays(model, batch)
    B, T1 = states.shape[:2]
    if noise is None:
        noise = as_rng(rng).standard_normal((B, T1, model.latent_dim))
    return elbo_from_terms(model, elbo_terms(model, states, actions, rewards, returns, noise))


def elbo(model: VLMHModel, trajectory: Trajectory, rng=None, noise=None) -> D.Tensor:
    """Scalar ELBO of a single trajectory."""
    if noise is not None:
        noise = np.asarray(noise, dtype=float).reshape(1, trajectory.horizon + 1, model.latent_dim)
    return elbo_batch(model, [trajectory], rng, noise)[0]


# ---------------------------------------------------------------------------
# Training


def _split(n: int, fraction: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_val = int(round(fraction * n))
    if n >= 2:
        n_val = min(max(n_val, 1), n - 1)
    else:
        return perm, perm
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit_return_scaler(model: VLMHModel, returns: np.ndarray) -> None:
    if model.config.standardize_returns:
        model.return_mean = float(np.mean(returns))
        sd = float(np.std(returns))
        model.return_scale = sd if sd > 1e-8 else 1.0
    else:
        model.return_mean, model.return_scale = 0.0, 1.0


def mean_elbo(model: VLMHModel, dataset: OfflineDataset, indices, noise) -> float:
    states, actions, rewards, returns = _batch_arrays(model, dataset)
    vals = []
    bs = 512
    for start in range(0, len(indices), bs):
        idx = indices[start:start + bs]
        terms = elbo_terms(model, states[idx], actions[idx], rewards[idx], returns[idx], noise[idx])
        vals.append(elbo_from_terms(model, terms).value)
    return float(np.concatenate(vals).mean())


def train_vlmh(model: VLMHModel, dataset: OfflineDataset, config: Optional[VLMHConfig] = None,
               rng=None):
    """Maximise the mean ELBO; returns ``(model, log)`` with the best held-out checkpoint loaded."""
    config = config or model.config
    rng = as_rng(rng)
    n = dataset.n
    if n < 1:
        raise ValueError("dataset is empty")
    train_idx, val_idx = _split(n, config.validation_fraction, rng)
    fit_return_scaler(model, dataset.human_returns[train_idx])
    states, actions, rewards, returns = _batch_arrays(model, dataset)
    T1 = states.shape[1]
    L = model.latent_dim
    eval_noise = rng.standard_normal((n, T1, L))
    opt = D.Adam(model.params, lr=config.learning_rate, weight_decay=config.weight_decay,
                 lr_decay=config.lr_decay)
    model.params.reset_optimizer()
    log = TrainingLog()
    log.initial_train_elbo = mean_elbo(model, dataset, train_idx, eval_noise)
    log.initial_val_elbo = mean_elbo(model, dataset, val_idx, eval_noise)
    best = model.params.snapshot()
    log.best_val_elbo = log.initial_val_elbo
    ranking = [(log.initial_val_elbo, 0)]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train_idx)
        batch_vals = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            noise = rng.standard_normal((len(idx), T1, L))
            try:
                terms = elbo_terms(model, states[idx], actions[idx], rewards[idx], returns[idx],
                                   noise)
                value = elbo_from_terms(model, terms)
                loss = -F.tmean(value)
                model.params.zero_grad()
                D.backward(loss)
                opt.step()
            except (FloatingPointError, D.NonFiniteGradientError) as exc:
                model.params.load(best)
                raise TrainingDivergedError(f"VLM-H training diverged in epoch {epoch}: {exc}",
                                            model, log) from exc
            batch_vals.append(float(value.value.mean()))
        train_elbo = float(np.mean(batch_vals))
        val_elbo = mean_elbo(model, dataset, val_idx, eval_noise)
        if not np.isfinite(val_elbo):
            model.params.load(best)
            raise TrainingDivergedError(f"non-finite validation ELBO in epoch {epoch}", model, log)
        log.epochs.append({"epoch": epoch, "train_elbo": train_elbo, "val_elbo": val_elbo,
                           "lr": opt.current_lr})
        ranking.append((val_elbo, epoch))
        if val_elbo > log.best_val_elbo:
            log.best_val_elbo = val_elbo
            log.best_epoch = epoch
            best = model.params.snapshot()
    ranking.sort(key=lambda x: (-x[0], x[1]))
    log.top_checkpoints = [{"epoch": e, "val_elbo": v} for v, e in ranking[:10]]
    model.params.load(best)
    log.final_train_elbo = mean_elbo(model, dataset, train_idx, eval_noise)
    model.trained = True
    return model, log


# ---------------------------------------------------------------------------
# Encodings


def encode_batch(model: VLMHModel, states, actions, mode: str = "mean", rng=None,
                 noise=None) -> np.ndarray:
    """Posterior means (or samples) of z_0..z_T, shape (B, T+1, L)."""
    if mode not in ("mean", "sample"):
        raise ValueError("mode must be 'mean' or 'sample'")
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions)
    _check_dims(model, states, actions)
    B, T1, _ = states.shape
    L = model.latent_dim
    if mode == "sample" and noise is None:
        noise = as_rng(rng).standard_normal((B, T1, L))
    a1h = model._onehot(actions)
    out = np.empty((B, T1, L))
    mu, sig = model.posterior0(states[:, 0])
    z = mu.value if mode == "mean" else mu.value + sig.value * noise[:, 0]
    out[:, 0] = z
    h = model.enc_cell.initial_state(B)
    for t in range(1, T1):
        mu, sig, h = model.posterior_step(D.Tensor(z), a1h[:, t - 1], states[:, t], h)
        z = mu.value if mode == "mean" else mu.value + sig.value * noise[:, t]
        out[:, t] = z
    return out


def encode_trajectory(model: VLMHModel, trajectory: Trajectory, mode: str = "mean", rng=None,
                      noise=None, trajectory_index: int = 0) -> List[LatentEncoding]:
    if noise is not None:
        noise = np.asarray(noise, dtype=float).reshape(1, trajectory.horizon + 1, model.latent_dim)
    z = encode_batch(model, trajectory.states[None], trajectory.actions[None], mode, rng, noise)[0]
    return [LatentEncoding(trajectory_index, t, z[t].copy(), trajectory.human_return)
            for t in range(len(z))]


def encode_dataset(model: VLMHModel, dataset: OfflineDataset, batch_size: int = 1024) -> np.ndarray:
    """Posterior means for every trajectory, shape (N, T+1, L)."""
    out = []
    for start in range(0, dataset.n, batch_size):
        sl = slice(start, start + batch_size)
        out.append(encode_batch(model, dataset.states[sl], dataset.actions[sl], "mean"))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# Ablation estimator: latent rollouts under the target policy


def predict_human_return(model: VLMHModel, policy: Policy, rng=None, num_rollouts: int = 256,
                         initial_states: Optional[np.ndarray] = None) -> float:
    """Average terminal-head human return over latent rollouts of ``policy``.

    Rollouts start from posterior means of the given initial states (sampled
    uniformly) or from the standard-normal prior when none are given.
    """
    if not model.trained:
        raise UntrainedModelError("predict_human_return needs a trained VLM-H")
    rng = as_rng(rng)
    n = int(num_rollouts)
    L = model.latent_dim
    if initial_states is not None:
        s0 = np.asarray(initial_states, dtype=float)
        pick = s0[rng.integers(len(s0), size=n)]
        z = model.posterior0(pick)[0].value
        s = pick
    else:
        z = rng.standard_normal((n, L))
        s = model.decode_state(z)[0].value
    h = model.prior_cell.initial_state(n)
    for _ in range(model.spec.horizon):
        probs = policy.action_probs(s)
        u = rng.random(n)
        a = (u[:, None] > np.cumsum(probs, axis=1)[:, :-1]).sum(axis=1)
        mu, sig, h = model.prior_step(D.Tensor(z), model._onehot(a), h)
        z = mu.value + sig.value * rng.standard_normal((n, L))
        s = model.decode_state(z)[0].value
    g = model.decode_return(z)[0].value[:, 0]
    return float(model.unstandardize(g).mean())


# ---------------------------------------------------------------------------
# Neighbour search in latent space


@dataclass(frozen=True)
class LatentPool:
    """Flat table of encodings: one row per (trajectory, step)."""

    trajectory: np.ndarray
    step: np.ndarray
    z: np.ndarray
    human_return: np.ndarray

    @classmethod
    def from_encodings(cls, encodings: Sequence[LatentEncoding]) -> "LatentPool":
        return cls(np.array([e.trajectory_index for e in encodings], dtype=int),
                   np.array([e.step for e in encodings], dtype=int),
                   np.stack([e.mean for e in encodings]),
                   np.array([e.human_return for e in encodings], dtype=float))

    @classmethod
    def from_array(cls, z: np.ndarray, returns: np.ndarray, steps: Optional[Sequence[int]] = None):
        """Pool from (N, T+1, L) encodings, keeping only ``steps`` (default all)."""
        N, T1, L = z.shape
        steps = np.arange(T1) if steps is None else np.asarray(steps, dtype=int)
        traj = np.repeat(np.arange(N), len(steps))
        st = np.tile(steps, N)
        return cls(traj, st, z[:, steps].reshape(-1, L), np.asarray(returns, float)[traj])

    def __len__(self):
        return len(self.trajectory)


def median_bandwidth(z: np.ndarray, rng=None, max_points: int = 2048) -> float:
    """Median pairwise distance over a random subsample (1.0 if degenerate)."""
    rng = as_rng(rng)
    pts = z if len(z) <= max_points else z[rng.choice(len(z), max_points, replace=False)]
    if len(pts) < 2:
        return 1.0
    med = float(np.median(pdist(pts)))
    return med if med > 1e-12 else 1.0


def sne_similarity(zq: np.ndarray, zs: np.ndarray, bandwidth: float) -> np.ndarray:
    d2 = np.sum((np.asarray(zs) - np.asarray(zq)) ** 2, axis=-1)
    return np.exp(-d2 / (2.0 * bandwidth ** 2))


def _rank_row(d2: np.ndarray, q: np.ndarray, pool: LatentPool, K: int) -> np.ndarray:
    # d2 comes from the expanded BLAS form; candidates near the K-th distance are
    # re-scored exactly so ties are broken on true distances
    kth = np.partition(d2, K - 1)[K - 1]
    cand = np.flatnonzero(d2 <= kth + 1e-9 * (1.0 + kth))
    exact = np.sum((pool.z[cand] - q) ** 2, axis=1)
    order = np.lexsort((pool.step[cand], pool.trajectory[cand], exact))
    return cand[order[:K]]


def knn_indices(pool: LatentPool, queries: np.ndarray, query_traj: np.ndarray, K: int,
                chunk: int = 256) -> np.ndarray:
    """K most SNE-similar pool rows per query, excluding the query's own trajectory.

    The SNE kernel is monotone in Euclidean distance, so ranking uses squared
    distance directly (no underflow ties). Ties go to the lower trajectory
    index, then the lower step.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    query_traj = np.asarray(query_traj, dtype=int)
    counts = np.bincount(pool.trajectory, minlength=int(query_traj.max()) + 1)
    own = counts[query_traj]
    if np.any(len(pool) - own < K):
        raise ValueError(f"pool too small for K={K} after excluding the query trajectory")
    sq_pool = np.sum(pool.z ** 2, axis=1)
    out = np.empty((len(queries), K), dtype=int)
    for start in range(0, len(queries), chunk):
        q = queries[start:start + chunk]
        d2 = np.sum(q ** 2, axis=1)[:, None] + sq_pool[None] - 2.0 * q @ pool.z.T
        np.maximum(d2, 0.0, out=d2)
        d2[pool.trajectory[None, :] == query_traj[start:start + chunk, None]] = np.inf
        for r in range(len(q)):
            out[start + r] = _rank_row(d2[r], q[r], pool, K)
    return out


def latent_neighbors(pool, query: LatentEncoding, K: int, bandwidth: Optional[float] = None):
    """Indices of the K pool encodings most similar to ``query`` (own trajectory excluded)."""
    if not isinstance(pool, LatentPool):
        pool = LatentPool.from_encodings(pool)
    if K < 1:
        raise ValueError("K must be positive")
    return knn_indices(pool, query.mean[None], np.array([query.trajectory_index]), K)[0]
