"""Synthetic human-feedback MDPs with hidden immediate human rewards and exact oracles.

Two families are provided. :class:`TabularHMDP` admits exact dynamic
programming for policy values and occupancies. :class:`LatentConfounderEnv`
has continuous states and a per-episode hidden factor that shifts both the
dynamics and the human reward without ever being emitted; its ground truth is
obtained by Monte Carlo.

Immediate human rewards are drawn from a Gaussian truncated below at zero, so
every sampled IHR is non-negative.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import special

from .core import (HMDPSpec, OfflineDataset, Policy, Trajectory, discount_weights,
                   mix_policies)
from .seeding import as_rng, rng_for


def _arr(x) -> np.ndarray:
    a = np.array(x, dtype=float, copy=True)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Truncated Gaussian IHR family


def truncated_normal_sample(mean, std, rng: np.random.Generator, lower=0.0, upper=None) -> np.ndarray:
    """Inverse-CDF sampling of N(mean, std) restricted to [lower, upper].

    ``lower`` and ``upper`` broadcast against ``mean``. Zero std returns the mean
    clipped into the interval.
    """
    mean = np.asarray(mean, dtype=float)
    std = np.broadcast_to(np.asarray(std, dtype=float), mean.shape)
    lo = np.broadcast_to(np.asarray(lower, dtype=float), mean.shape)
    hi = np.full(mean.shape, np.inf) if upper is None else np.broadcast_to(
        np.asarray(upper, dtype=float), mean.shape)
    u = rng.random(mean.shape)
    out = np.clip(mean, lo, hi)
    pos = std > 0
    if np.any(pos):
        m, s = mean[pos], std[pos]
        a = special.ndtr((lo[pos] - m) / s)
        b = special.ndtr((hi[pos] - m) / s)
        q = a + u[pos] * (b - a)
        x = m + s * special.ndtri(np.clip(q, 1e-300, 1.0 - 1e-16))
        out[pos] = np.clip(x, lo[pos], hi[pos])
    return out


def truncated_normal_mean(mean, std, lower=0.0, upper=None) -> np.ndarray:
    """Mean of N(mean, std) restricted to [lower, upper]."""
    mean = np.asarray(mean, dtype=float)
    std = np.broadcast_to(np.asarray(std, dtype=float), mean.shape)
    lo = np.broadcast_to(np.asarray(lower, dtype=float), mean.shape)
    hi = np.full(mean.shape, np.inf) if upper is None else np.broadcast_to(
        np.asarray(upper, dtype=float), mean.shape)
    out = np.clip(mean, lo, hi).astype(float)
    pos = std > 0
    if np.any(pos):
        m, s = mean[pos], std[pos]
        alpha, beta = (lo[pos] - m) / s, (hi[pos] - m) / s
        z = special.ndtr(beta) - special.ndtr(alpha)
        pdf = lambda x: np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)
        out[pos] = m + s * (pdf(alpha) - np.where(np.isfinite(beta), pdf(beta), 0.0)) / z
    return out


# ---------------------------------------------------------------------------
# Tabular environments


@dataclass(frozen=True)
class TabularHMDP:
    transition: np.ndarray      # (S, A, S)
    env_reward: np.ndarray      # (S, A)
    ihr_mean: np.ndarray        # (S, A)
    ihr_std: np.ndarray         # (S, A)
    initial_dist: np.ndarray    # (S,)
    discount: float
    horizon: int
    env_id: str = "tabular"

    def __post_init__(self):
        for name in ("transition", "env_reward", "ihr_mean", "ihr_std", "initial_dist"):
            object.__setattr__(self, name, _arr(getattr(self, name)))
        S, A = self.env_reward.shape
        if self.transition.shape != (S, A, S):
            raise ValueError("transition must have shape (S, A, S)")
        if self.ihr_mean.shape != (S, A) or self.ihr_std.shape != (S, A):
            raise ValueError("IHR tables must have shape (S, A)")
        if self.initial_dist.shape != (S,):
            raise ValueError("initial_dist must have shape (S,)")
        if np.any(self.transition < 0) or not np.allclose(self.transition.sum(-1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("transition rows must be probability vectors")
        if np.any(self.initial_dist < 0) or abs(self.initial_dist.sum() - 1.0) > 1e-9:
            raise ValueError("initial_dist must be a probability vector")
        if np.any(self.ihr_mean < 0):
            raise ValueError("IHR means must be non-negative")
        if np.any(self.ihr_std < 0):
            raise ValueError("IHR standard deviations must be non-negative")
        # validates discount / horizon
        HMDPSpec(S, self.discount, self.horizon, self.env_id, num_actions=A, num_states=S)

    @property
    def num_states(self) -> int:
        return self.env_reward.shape[0]

    @property
    def num_actions(self) -> int:
        return self.env_reward.shape[1]

    @property
    def spec(self) -> HMDPSpec:
        return HMDPSpec(self.num_states, self.discount, self.horizon, self.env_id,
                        num_actions=self.num_actions, num_states=self.num_states)

    @property
    def expected_ihr(self) -> np.ndarray:
        """E[r^H | s, a] under the truncated family (equals ihr_mean when std is 0)."""
        return truncated_normal_mean(self.ihr_mean, self.ihr_std)

    def to_dict(self) -> dict:
        return {"type": "tabular", "env_id": self.env_id, "num_states": self.num_states,
                "num_actions": self.num_actions, "transition": self.transition.tolist(),
                "env_reward": self.env_reward.tolist(), "ihr_mean": self.ihr_mean.tolist(),
                "ihr_std": self.ihr_std.tolist(), "initial_dist": self.initial_dist.tolist(),
                "discount": self.discount, "horizon": self.horizon}


# ---------------------------------------------------------------------------
# Latent-confounder environment


@dataclass(frozen=True)
class LatentConfounderEnv:
    """Continuous-state HMDP with a hidden per-episode factor ``h``.

    States live in (-1, 1)^d and are split in two blocks. The environmental
    reward reads the first block (and its interaction with the action); the
    human reward reads the second block, its action interaction and ``h``.
    ``correlation_knob`` blends the two: at 1 the human mean equals the
    environmental reward, at 0 only the disjoint human block is used.

    Dynamics: ``s' = tanh(M s + E[a] + H h + noise)``.
    """

    transition_matrix: np.ndarray    # (d, d)
    action_effects: np.ndarray       # (A, d)
    hidden_effects: np.ndarray       # (k, d)
    initial_effects: np.ndarray      # (k, d)
    env_state_weights: np.ndarray    # (d,)
    env_action_weights: np.ndarray   # (A, d) interaction with the env block
    env_action_bonus: np.ndarray     # (A,)
    human_state_weights: np.ndarray  # (d,)
    human_action_weights: np.ndarray  # (A, d)
    human_action_bonus: np.ndarray   # (A,)
    human_hidden_weights: np.ndarray  # (k,)
    correlation_knob: float
    discount: float
    horizon: int
    reward_center: float = 1.0
    human_noise: float = 0.1
    state_noise: float = 0.1
    initial_noise: float = 0.5
    env_id: str = "latent-confounder"

    def __post_init__(self):
        for name in ("transition_matrix", "action_effects", "hidden_effects", "initial_effects",
                     "env_state_weights", "env_action_weights", "env_action_bonus",
                     "human_state_weights", "human_action_weights", "human_action_bonus",
                     "human_hidden_weights"):
            object.__setattr__(self, name, _arr(getattr(self, name)))
        if not -1.0 <= self.correlation_knob <= 1.0:
            raise ValueError("correlation_knob must lie in [-1, 1]")
        if self.human_noise < 0 or self.state_noise < 0:
            raise ValueError("noise scales must be non-negative")
        HMDPSpec(self.state_dim, self.discount, self.horizon, self.env_id,
                 num_actions=self.num_actions)

    @property
    def state_dim(self) -> int:
        return self.transition_matrix.shape[0]

    @property
    def num_actions(self) -> int:
        return self.action_effects.shape[0]

    @property
    def hidden_factor_dim(self) -> int:
        return self.hidden_effects.shape[0]

    @property
    def spec(self) -> HMDPSpec:
        return HMDPSpec(self.state_dim, self.discount, self.horizon, self.env_id,
                        num_actions=self.num_actions)

    def env_reward(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        inter = np.einsum("nd,nd->n", self.env_action_weights[actions], states)
        return (self.reward_center + states @ self.env_state_weights + inter
                + self.env_action_bonus[actions])

    def human_own_reward(self, states, actions, hidden) -> np.ndarray:
        inter = np.einsum("nd,nd->n", self.human_action_weights[actions], states)
        return (states @ self.human_state_weights + inter + self.human_action_bonus[actions]
                + hidden @ self.human_hidden_weights)

    def ihr_mean(self, states, actions, hidden) -> np.ndarray:
        knob = self.correlation_knob
        env_part = self.env_reward(states, actions) - self.reward_center
        own = self.human_own_reward(states, actions, hidden)
        return np.maximum(self.reward_center + knob * env_part + (1.0 - abs(knob)) * own, 0.0)

    def expected_ihr_score(self, states) -> np.ndarray:
        """Per-action human reward mean with the hidden factor at its mean, shape (n, A)."""
        n = states.shape[0]
        A = self.num_actions
        s = np.repeat(states, A, axis=0)
        a = np.tile(np.arange(A), n)
        return self.ihr_mean(s, a, np.zeros((n * A, self.hidden_factor_dim))).reshape(n, A)

    def greedy_weights(self) -> np.ndarray:
        """Linear (A, d+1) scores whose argmax is the myopic human-greedy action."""
        knob = self.correlation_knob
        W = np.zeros((self.num_actions, self.state_dim + 1))
        W[:, :-1] = knob * self.env_action_weights + (1 - abs(knob)) * self.human_action_weights
        W[:, -1] = knob * self.env_action_bonus + (1 - abs(knob)) * self.human_action_bonus
        return W

    def to_dict(self) -> dict:
        out = {"type": "latent-confounder", "env_id": self.env_id,
               "correlation_knob": self.correlation_knob, "discount": self.discount,
               "horizon": self.horizon, "reward_center": self.reward_center,
               "human_noise": self.human_noise, "state_noise": self.state_noise,
               "initial_noise": self.initial_noise}
        for name in ("transition_matrix", "action_effects", "hidden_effects", "initial_effects",
                     "env_state_weights", "env_action_weights", "env_action_bonus",
                     "human_state_weights", "human_action_weights", "human_action_bonus",
                     "human_hidden_weights"):
            out[name] = getattr(self, name).tolist()
        return out


def env_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type")
    if kind == "tabular":
        d.pop("num_states", None)
        d.pop("num_actions", None)
        return TabularHMDP(**d)
    if kind == "latent-confounder":
        return LatentConfounderEnv(**d)
    raise ValueError(f"unknown environment type {kind!r}")


def save_env(env, path) -> None:
    Path(path).write_text(json.dumps(env.to_dict()))


def load_env(path):
    return env_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Sampling


def _categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[:, None] > cdf[:, :-1]).sum(axis=-1)
    return idx


def _check_policy(env, policy: Policy) -> None:
    if policy.num_actions != env.num_actions:
        raise ValueError(f"policy has {policy.num_actions} actions, env has {env.num_actions}")
    if isinstance(env, TabularHMDP) and policy.kind != "uniform-random":
        if policy.parameters.ndim == 2 and policy.kind != "tabular-softmax":
            raise ValueError("tabular environments need tabular policies")
        if policy.parameters.shape[0] != env.num_states:
            raise ValueError("policy table does not match the number of states")
    if isinstance(env, LatentConfounderEnv) and policy.is_tabular:
        raise ValueError("latent-confounder environments need featurized policies")


def sample_batch(env, policy: Policy, n: int, rng) -> dict:
    """Simulate ``n`` episodes at once; returns stacked arrays."""
    _check_policy(env, policy)
    rng = as_rng(rng)
    T = env.horizon
    if isinstance(env, TabularHMDP):
        S = env.num_states
        eye = np.eye(S)
        s = _categorical(np.broadcast_to(env.initial_dist, (n, S)), rng.random(n))
        idx = np.empty((n, T + 1), dtype=int)
        actions = np.empty((n, T), dtype=int)
        bprobs = np.empty((n, T))
        rewards = np.empty((n, T))
        ihrs = np.empty((n, T))
        table = policy.prob_table() if policy.kind != "uniform-random" else np.full(
            (S, env.num_actions), 1.0 / env.num_actions)
        for t in range(T):
            idx[:, t] = s
            p = table[s]
            a = _categorical(p, rng.random(n))
            actions[:, t] = a
            bprobs[:, t] = p[np.arange(n), a]
            rewards[:, t] = env.env_reward[s, a]
            ihrs[:, t] = truncated_normal_sample(env.ihr_mean[s, a], env.ihr_std[s, a], rng)
            s = _categorical(env.transition[s, a], rng.random(n))
        idx[:, T] = s
        states = eye[idx]
    else:
        d, k = env.state_dim, env.hidden_factor_dim
        hidden = rng.uniform(-1.0, 1.0, size=(n, k))
        states = np.empty((n, T + 1, d))
        s = np.tanh(env.initial_noise * rng.standard_normal((n, d)) + hidden @ env.initial_effects)
        actions = np.empty((n, T), dtype=int)
        bprobs = np.empty((n, T))
        rewards = np.empty((n, T))
        ihrs = np.empty((n, T))
        for t in range(T):
            states[:, t] = s
            p = policy.action_probs(s)
            a = _categorical(p, rng.random(n))
            actions[:, t] = a
            bprobs[:, t] = p[np.arange(n), a]
            rewards[:, t] = env.env_reward(s, a)
            mu = env.ihr_mean(s, a, hidden)
            sig = env.human_noise
            ihrs[:, t] = truncated_normal_sample(mu, sig, rng, lower=np.maximum(0.0, mu - 3 * sig),
                                                 upper=mu + 3 * sig)
            drift = s @ env.transition_matrix.T + env.action_effects[a] + hidden @ env.hidden_effects
            s = np.tanh(drift + env.state_noise * rng.standard_normal((n, d)))
        states[:, T] = s
    w = discount_weights(T, env.discount)
    returns = ihrs @ w
    return {"states": states, "actions": actions, "env_rewards": rewards, "human_returns": returns,
            "behavior_probs": bprobs, "true_ihrs": ihrs}


def sample_episode(env, policy: Policy, seed) -> Trajectory:
    """One episode with oracle IHRs attached."""
    b = sample_batch(env, policy, 1, as_rng(seed))
    return Trajectory(b["states"][0], b["actions"][0], b["env_rewards"][0], b["human_returns"][0],
                      b["behavior_probs"][0], b["true_ihrs"][0])


def sample_dataset(env, policy: Policy, n: int, seed: int, provenance: str = "",
                   keep_oracle: bool = True) -> OfflineDataset:
    """``n`` episodes from ``policy``. Oracle IHRs stay attached in memory only."""
    if n < 1:
        raise ValueError("n must be positive")
    b = sample_batch(env, policy, n, rng_for(seed, "dataset"))
    trajs = tuple(
        Trajectory(b["states"][i], b["actions"][i], b["env_rewards"][i], b["human_returns"][i],
                   b["behavior_probs"][i], b["true_ihrs"][i] if keep_oracle else None)
        for i in range(n))
    return OfflineDataset(env.spec, trajs, provenance or (policy.name or policy.kind), seed)


# ---------------------------------------------------------------------------
# Exact oracles (tabular)


def _require_tabular(env) -> None:
    if not isinstance(env, TabularHMDP):
        raise TypeError("exact oracles are only available for tabular environments")


def _policy_table(env: TabularHMDP, policy: Policy) -> np.ndarray:
    _check_policy(env, policy)
    if policy.kind == "uniform-random":
        return np.full((env.num_states, env.num_actions), 1.0 / env.num_actions)
    return policy.prob_table()


def state_occupancies(env: TabularHMDP, policy: Policy) -> np.ndarray:
    """Undiscounted state distributions d_t for t = 0..T, shape (T+1, S)."""
    _require_tabular(env)
    pi = _policy_table(env, policy)
    d = np.empty((env.horizon + 1, env.num_states))
    d[0] = env.initial_dist
    P_pi = np.einsum("sa,sak->sk", pi, env.transition)
    for t in range(env.horizon):
        d[t + 1] = d[t] @ P_pi
    return d


def exact_policy_human_value(env, policy: Policy) -> float:
    """E[sum_t gamma^t r^H_t] under ``policy`` by finite-horizon DP."""
    _require_tabular(env)
    pi = _policy_table(env, policy)
    d = state_occupancies(env, policy)[:-1]
    r_pi = (pi * env.expected_ihr).sum(axis=1)
    return float(discount_weights(env.horizon, env.discount) @ (d @ r_pi))


def exact_policy_env_value(env, policy: Policy) -> float:
    _require_tabular(env)
    pi = _policy_table(env, policy)
    d = state_occupancies(env, policy)[:-1]
    return float(discount_weights(env.horizon, env.discount) @ (d @ (pi * env.env_reward).sum(1)))


def exact_visitation(env, policy: Policy) -> np.ndarray:
    """Discount-weighted, normalised finite-horizon (s, a) occupancy, shape (S, A)."""
    _require_tabular(env)
    pi = _policy_table(env, policy)
    d = state_occupancies(env, policy)[:-1]
    w = discount_weights(env.horizon, env.discount)
    occ = np.einsum("t,ts,sa->sa", w, d, pi)
    return occ / w.sum()


def exact_q_values(env, policy: Policy, rewards: Optional[np.ndarray] = None) -> np.ndarray:
    """Time-indexed Q^pi_t(s, a) for t = 0..T-1, shape (T, S, A).

    ``rewards`` defaults to the expected IHR table.
    """
    _require_tabular(env)
    pi = _policy_table(env, policy)
    r = env.expected_ihr if rewards is None else np.asarray(rewards, dtype=float)
    T = env.horizon
    Q = np.zeros((T, env.num_states, env.num_actions))
    v_next = np.zeros(env.num_states)
    for t in range(T - 1, -1, -1):
        Q[t] = r + env.discount * env.transition @ v_next
        v_next = (pi * Q[t]).sum(axis=1)
    return Q


def optimal_stationary_policy(env: TabularHMDP, rewards: Optional[np.ndarray] = None,
                              minimize: bool = False, iterations: int = 500) -> np.ndarray:
    """Greedy action table from discounted value iteration on the human reward means."""
    r = env.expected_ihr if rewards is None else rewards
    sign = -1.0 if minimize else 1.0
    v = np.zeros(env.num_states)
    for _ in range(iterations):
        q = sign * r + env.discount * env.transition @ v
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) < 1e-12:
            v = v_new
            break
        v = v_new
    q = sign * r + env.discount * env.transition @ v
    return np.argmax(q, axis=1)


def mc_policy_human_value(env, policy: Policy, n: int, seed: int, chunk: int = 20000):
    """Monte Carlo mean and standard error of the human return."""
    rng = rng_for(seed, "mc-value")
    returns = []
    left = n
    while left > 0:
        m = min(chunk, left)
        returns.append(sample_batch(env, policy, m, rng)["human_returns"])
        left -= m
    g = np.concatenate(returns)
    return float(g.mean()), float(g.std(ddof=1) / np.sqrt(len(g)))


def policy_human_value(env, policy: Policy, mc_episodes: int = 20000, seed: int = 0) -> float:
    """Exact value on tabular envs, Monte Carlo mean otherwise."""
    if isinstance(env, TabularHMDP):
        return exact_policy_human_value(env, policy)
    return mc_policy_human_value(env, policy, mc_episodes, seed)[0]


# ---------------------------------------------------------------------------
# Environment and benchmark construction


def random_tabular_env(num_states: int, num_actions: int, horizon: int, discount: float,
                       seed: int, ihr_noise: float = 0.25, dirichlet: float = 0.5,
                       env_id: str = "tabular") -> TabularHMDP:
    rng = rng_for(seed, "tabular-env:" + env_id)
    P = rng.dirichlet(np.full(num_states, dirichlet), size=(num_states, num_actions))
    R = rng.uniform(0.0, 1.0, size=(num_states, num_actions))
    # one clearly good action per state keeps policy values well separated
    mu = rng.uniform(0.05, 0.5, size=(num_states, num_actions))
    good = rng.integers(num_actions, size=num_states)
    mu[np.arange(num_states), good] += rng.uniform(1.0, 2.0, size=num_states)
    sd = ihr_noise * rng.uniform(0.5, 1.0, size=(num_states, num_actions))
    init = rng.dirichlet(np.ones(num_states))
    return TabularHMDP(P, R, mu, sd, init, discount, horizon, env_id)


def constant_ihr_env(value: float = 1.0, num_states: int = 3, num_actions: int = 2,
                     horizon: int = 10, discount: float = 0.8, seed: int = 0) -> TabularHMDP:
    """Every IHR equals ``value`` exactly (zero noise) while dynamics stay random."""
    rng = rng_for(seed, "constant-env")
    P = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    R = rng.uniform(0.0, 1.0, size=(num_states, num_actions))
    mu = np.full((num_states, num_actions), float(value))
    return TabularHMDP(P, R, mu, np.zeros_like(mu), np.full(num_states, 1.0 / num_states),
                       discount, horizon, "constant-ihr")


def make_latent_confounder_env(correlation_knob: float, seed: int, state_dim: int = 4,
                               num_actions: int = 3, hidden_factor_dim: int = 1,
                               horizon: int = 10, discount: float = 0.9,
                               human_noise: float = 0.1, env_id: str = "",
                               env_action_scale: Optional[float] = None) -> LatentConfounderEnv:
    """Random latent-confounder env.

    ``env_action_scale`` shrinks how much actions move the environmental reward;
    it defaults to ``max(|knob|, 0.25)`` so the weak-correlation regime is not
    dominated by shared action effects.
    """
    if state_dim < 2 or state_dim % 2:
        raise ValueError("state_dim must be an even number >= 2")
    rng = rng_for(seed, f"latent-env:{correlation_knob}")
    d, A, k = state_dim, num_actions, hidden_factor_dim
    half = d // 2
    env_block = np.zeros(d)
    env_block[:half] = 1.0
    hum_block = 1.0 - env_block
    M = 0.5 * np.eye(d) + 0.1 * rng.standard_normal((d, d))
    M[:half, half:] = 0.0  # blocks evolve separately
    M[half:, :half] = 0.0
    E = rng.uniform(-0.8, 0.8, size=(A, d))
    scale = max(abs(correlation_knob), 0.25) if env_action_scale is None else env_action_scale
    E[:, :half] *= 0.3 * scale
    H = np.zeros((k, d))
    H[:, half:] = rng.uniform(0.3, 0.6, size=(k, half)) * rng.choice([-1.0, 1.0], size=(k, half))
    H0 = np.zeros((k, d))
    H0[:, half:] = 0.5 * np.sign(H[:, half:])
    we = env_block * rng.uniform(-0.4, 0.4, size=d)
    We = scale * env_block * rng.uniform(-0.25, 0.25, size=(A, d))
    bh = np.linspace(-0.4, 0.4, A)[rng.permutation(A)]
    # env action bonus orthogonal to the human one (and to the constant)
    be = rng.standard_normal(A)
    basis = np.stack([np.ones(A), bh])
    be -= basis.T @ np.linalg.lstsq(basis.T, be, rcond=None)[0]
    be *= 0.2 * scale / max(np.max(np.abs(be)), 1e-12)
    wh = hum_block * rng.uniform(-0.2, 0.2, size=d)
    Wh = hum_block * rng.uniform(-0.3, 0.3, size=(A, d))
    hh = rng.uniform(0.2, 0.35, size=k) * rng.choice([-1.0, 1.0], size=k)
    return LatentConfounderEnv(M, E, H, H0, we, We, be, wh, Wh, bh, hh, float(correlation_knob),
                               discount, horizon, human_noise=human_noise,
                               env_id=env_id or f"latent-confounder-knob{correlation_knob:g}")


EPSILONS = (0.0, 0.1, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class BenchmarkConfig:
    """One benchmark environment with its behaviour mixture and target policies."""

    name: str
    env: object
    behavior: Policy
    targets: tuple
    behavior_components: tuple = field(default_factory=tuple)
    mixture_weights: tuple = field(default_factory=tuple)


def _tabular_targets(env: TabularHMDP):
    A = env.num_actions
    best = optimal_stationary_policy(env)
    worst = optimal_stationary_policy(env, minimize=True)
    targets = []
    for eps in EPSILONS:
        if eps == 0.0:
            targets.append(Policy("deterministic-map", A, best, name="greedy-eps0"))
        elif eps == 1.0:
            targets.append(Policy("uniform-random", A, name="uniform"))
        else:
            probs = (1 - eps) * np.eye(A)[best] + eps / A
            targets.append(Policy("tabular-softmax", A, np.log(probs), name=f"greedy-eps{eps:g}"))
    worst_pol = Policy("deterministic-map", A, worst, name="worst")
    targets.append(worst_pol)
    return tuple(targets), worst_pol


def _tabular_benchmark(name: str, env: TabularHMDP) -> BenchmarkConfig:
    targets, worst = _tabular_targets(env)
    uniform = Policy("tabular-softmax", env.num_actions, np.zeros((env.num_states, env.num_actions)),
                     name="uniform")
    best_value = max(exact_policy_human_value(env, p) for p in targets)
    for w_worst in (0.5, 0.6, 0.7, 0.8, 0.9):
        behavior = mix_policies([worst, uniform], [w_worst, 1 - w_worst],
                                name=f"mixture(worst:{w_worst:g},uniform:{1 - w_worst:g})")
        if exact_policy_human_value(env, behavior) <= 0.6 * best_value:
            break
    return BenchmarkConfig(name, env, behavior, targets, (worst, uniform), (w_worst, 1 - w_worst))


def _latent_targets(env: LatentConfounderEnv):
    A = env.num_actions
    W = env.greedy_weights()
    targets = []
    for eps in EPSILONS:
        if eps == 1.0:
            targets.append(Policy("uniform-random", A, name="uniform"))
        else:
            targets.append(Policy("deterministic-map", A, W, epsilon=eps, name=f"greedy-eps{eps:g}"))
    targets.append(Policy("deterministic-map", A, -W, name="worst"))
    return tuple(targets)


def _latent_benchmark(name: str, env: LatentConfounderEnv, value_episodes: int = 4000,
                      seed: int = 0) -> BenchmarkConfig:
    targets = _latent_targets(env)
    W = env.greedy_weights()
    best_value = max(mc_policy_human_value(env, p, value_episodes, seed)[0] for p in targets)
    for scale in (2.0, 4.0, 8.0, 16.0):
        behavior = Policy("featurized-softmax", env.num_actions, -scale * W,
                          name=f"softmax(-{scale:g}*greedy)")
        if mc_policy_human_value(env, behavior, value_episodes, seed)[0] <= 0.6 * best_value:
            break
    return BenchmarkConfig(name, env, behavior, targets)


def make_benchmark_suite(seed: int = 0, latent_horizon: int = 10) -> list:
    """Two tabular and two latent-confounder benchmarks (weak and strong correlation)."""
    tab_small = random_tabular_env(3, 2, horizon=5, discount=0.9, seed=seed, env_id="tabular-small")
    tab_medium = random_tabular_env(6, 3, horizon=10, discount=0.9, seed=seed, env_id="tabular-medium")
    weak = make_latent_confounder_env(0.0, seed, horizon=latent_horizon, env_id="confounder-weak")
    strong = make_latent_confounder_env(1.0, seed, horizon=latent_horizon, env_id="confounder-strong")
    return [
        _tabular_benchmark("tabular-small", tab_small),
        _tabular_benchmark("tabular-medium", tab_medium),
        _latent_benchmark("confounder-weak", weak, seed=seed),
        _latent_benchmark("confounder-strong", strong, seed=seed),
    ]


def sample_mixture_dataset(bench: BenchmarkConfig, n: int, seed: int,
                           keep_oracle: bool = True) -> OfflineDataset:
    return sample_dataset(bench.env, bench.behavior, n, seed, provenance=bench.behavior.name,
                          keep_oracle=keep_oracle)
