"""Domain data model: HMDP specs, trajectories, offline datasets and policies."""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

PathLike = Union[str, Path]

POLICY_KINDS = ("tabular-softmax", "featurized-softmax", "deterministic-map", "uniform-random")


class DatasetFormatError(ValueError):
    """Raised when a dataset file does not match the JSON-lines schema."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _frozen(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class HMDPSpec:
    """Static description of a human-feedback MDP.

    Tabular environments set ``num_states`` and use one-hot state vectors of
    that length; ``state_dim`` then equals ``num_states``.
    """

    state_dim: int
    discount: float
    horizon: int
    env_id: str = ""
    num_actions: Optional[int] = None
    action_dim: Optional[int] = None
    action_low: Optional[float] = None
    action_high: Optional[float] = None
    num_states: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.state_dim < 1:
            raise ValueError("state_dim must be positive")
        discrete = self.num_actions is not None
        continuous = self.action_dim is not None
        if discrete == continuous:
            raise ValueError("exactly one of num_actions or action_dim must be given")
        if discrete and self.num_actions < 1:
            raise ValueError("num_actions must be positive")
        if continuous and (self.action_low is None or self.action_high is None):
            raise ValueError("continuous action spaces need low and high bounds")
        if self.num_states is not None and self.num_states != self.state_dim:
            raise ValueError("tabular specs use one-hot states: state_dim must equal num_states")

    @property
    def discrete(self) -> bool:
        return self.num_actions is not None

    @property
    def tabular(self) -> bool:
        return self.num_states is not None

    def to_dict(self) -> dict:
        out = {"state_dim": self.state_dim, "discount": self.discount, "horizon": self.horizon,
               "env_id": self.env_id}
        if self.discrete:
            out["action_space"] = {"num_actions": self.num_actions}
        else:
            out["action_space"] = {"action_dim": self.action_dim, "low": self.action_low,
                                   "high": self.action_high}
        if self.num_states is not None:
            out["num_states"] = self.num_states
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "HMDPSpec":
        space = d["action_space"]
        return cls(
            state_dim=int(d["state_dim"]),
            discount=float(d["discount"]),
            horizon=int(d["horizon"]),
            env_id=str(d.get("env_id", "")),
            num_actions=space.get("num_actions"),
            action_dim=space.get("action_dim"),
            action_low=space.get("low"),
            action_high=space.get("high"),
            num_states=d.get("num_states"),
        )


@dataclass(frozen=True)
class Trajectory:
    """One fixed-horizon episode.

    ``true_ihrs`` is only ever populated by simulators; datasets refuse to
    serialize it.
    """

    states: np.ndarray
    actions: np.ndarray
    env_rewards: np.ndarray
    human_return: float
    behavior_probs: Optional[np.ndarray] = None
    true_ihrs: Optional[np.ndarray] = None

    def __post_init__(self):
        states = _frozen(self.states)
        if states.ndim == 1:
            states = _frozen(states[:, None])
        object.__setattr__(self, "states", states)
        actions = np.asarray(self.actions)
        actions = _frozen(actions, int if actions.dtype.kind in "iub" else float)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "env_rewards", _frozen(self.env_rewards))
        object.__setattr__(self, "human_return", float(self.human_return))
        T = len(self.env_rewards)
        if T < 1:
            raise ValueError("trajectory must contain at least one step")
        if len(states) != T + 1 or len(actions) != T:
            raise ValueError(
                f"inconsistent lengths: {len(states)} states, {len(actions)} actions, {T} rewards")
        if self.behavior_probs is not None:
            bp = _frozen(self.behavior_probs)
            if bp.shape != (T,):
                raise ValueError("behavior_probs must have one entry per step")
            if np.any(bp <= 0.0) or np.any(bp > 1.0):
                raise ValueError("behavior_probs must lie in (0, 1]")
            object.__setattr__(self, "behavior_probs", bp)
        if self.true_ihrs is not None:
            ihr = _frozen(self.true_ihrs)
            if ihr.shape != (T,):
                raise ValueError("true_ihrs must have one entry per step")
            object.__setattr__(self, "true_ihrs", ihr)

    @property
    def horizon(self) -> int:
        return len(self.env_rewards)

    def without_oracle(self) -> "Trajectory":
        return Trajectory(self.states, self.actions, self.env_rewards, self.human_return,
                          self.behavior_probs)

    def check_oracle_consistency(self, discount: float, atol: float = 1e-9) -> None:
        if self.true_ihrs is None:
            return
        total = discounted_return(self.true_ihrs, discount)
        if abs(total - self.human_return) > atol:
            raise ValueError(
                f"human_return {self.human_return} differs from discounted IHR sum {total}")


@dataclass(frozen=True)
class OfflineDataset:
    """N trajectories logged under one (mixture) behaviour policy."""

    spec: HMDPSpec
    trajectories: tuple
    provenance: str = ""
    seed: int = 0

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        object.__setattr__(self, "trajectories", trajs)
        if not trajs:
            raise ValueError("dataset must contain at least one trajectory")
        for i, tr in enumerate(trajs):
            if tr.horizon != self.spec.horizon:
                raise ValueError(f"trajectory {i} has horizon {tr.horizon}, "
                                 f"expected {self.spec.horizon}")
            if tr.states.shape[1] != self.spec.state_dim:
                raise ValueError(f"trajectory {i} has state dimension {tr.states.shape[1]}")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def n(self) -> int:
        return len(self.trajectories)

    @cached_property
    def states(self) -> np.ndarray:
        """Stacked states, shape (N, T+1, state_dim)."""
        return _frozen(np.stack([tr.states for tr in self.trajectories]))

    @cached_property
    def actions(self) -> np.ndarray:
        return _frozen(np.stack([tr.actions for tr in self.trajectories]),
                       self.trajectories[0].actions.dtype)

    @cached_property
    def env_rewards(self) -> np.ndarray:
        return _frozen(np.stack([tr.env_rewards for tr in self.trajectories]))

    @cached_property
    def human_returns(self) -> np.ndarray:
        return _frozen([tr.human_return for tr in self.trajectories])

    @cached_property
    def behavior_probs(self) -> Optional[np.ndarray]:
        if any(tr.behavior_probs is None for tr in self.trajectories):
            return None
        return _frozen(np.stack([tr.behavior_probs for tr in self.trajectories]))

    @cached_property
    def true_ihrs(self) -> Optional[np.ndarray]:
        if any(tr.true_ihrs is None for tr in self.trajectories):
            return None
        return _frozen(np.stack([tr.true_ihrs for tr in self.trajectories]))

    @cached_property
    def state_indices(self) -> np.ndarray:
        """Integer state ids for tabular datasets (argmax of the one-hot vectors)."""
        if not self.spec.tabular:
            raise ValueError("state indices are only defined for tabular datasets")
        return _frozen(np.argmax(self.states, axis=-1), int)

    def subset(self, indices: Iterable[int]) -> "OfflineDataset":
        return OfflineDataset(self.spec, tuple(self.trajectories[i] for i in indices),
                              self.provenance, self.seed)

    def without_oracle(self) -> "OfflineDataset":
        return OfflineDataset(self.spec, tuple(tr.without_oracle() for tr in self.trajectories),
                              self.provenance, self.seed)


def discounted_return(rewards: Sequence[float], discount: float) -> float:
    """Sum of ``discount**t * rewards[t]``."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("rewards must be a non-empty 1-D sequence")
    if not 0.0 <= discount < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {discount}")
    return float(np.dot(discount ** np.arange(r.size), r))


def discount_weights(horizon: int, discount: float) -> np.ndarray:
    return discount ** np.arange(horizon, dtype=float)


# ---------------------------------------------------------------------------
# Policies


@dataclass(frozen=True)
class Policy:
    """A stationary policy over a discrete action set.

    ``parameters`` layout by kind:

    * tabular-softmax: logits, shape (num_states, num_actions)
    * featurized-softmax: weights, shape (num_actions, state_dim + 1) applied to [s, 1]
    * deterministic-map: int table (num_states,) or weights like featurized-softmax,
      in which case the argmax action is taken
    * uniform-random: unused

    ``epsilon`` mixes the base distribution with the uniform one, which is how
    epsilon-greedy targets are expressed.
    """

    kind: str
    num_actions: int
    parameters: Optional[np.ndarray] = None
    temperature: float = 1.0
    epsilon: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.num_actions < 1:
            raise ValueError("num_actions must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.kind != "uniform-random":
            if self.parameters is None:
                raise ValueError(f"{self.kind} policies need parameters")
            p = np.asarray(self.parameters)
            dtype = int if (self.kind == "deterministic-map" and p.ndim == 1) else float
            p = _frozen(p, dtype)
            object.__setattr__(self, "parameters", p)
            if self.kind == "tabular-softmax" and (p.ndim != 2 or p.shape[1] != self.num_actions):
                raise ValueError("tabular-softmax logits must have shape (num_states, num_actions)")
            if self.kind == "featurized-softmax" and (p.ndim != 2 or p.shape[0] != self.num_actions):
                raise ValueError("featurized-softmax weights must have shape (num_actions, d+1)")
            if self.kind == "deterministic-map":
                if p.ndim == 1 and (p.min() < 0 or p.max() >= self.num_actions):
                    raise ValueError("deterministic-map table holds out-of-range actions")
                if p.ndim == 2 and p.shape[0] != self.num_actions:
                    raise ValueError("deterministic-map weights must have shape (num_actions, d+1)")

    @property
    def is_tabular(self) -> bool:
        return self.kind == "tabular-softmax" or (
            self.kind == "deterministic-map" and self.parameters.ndim == 1)

    def action_probs(self, states) -> np.ndarray:
        """Action distribution for a batch of state vectors, shape (..., num_actions)."""
        s = np.asarray(states, dtype=float)
        lead = s.shape[:-1]
        A = self.num_actions
        if self.kind == "uniform-random":
            base = np.full(lead + (A,), 1.0 / A)
        elif self.is_tabular:
            n_states = self.parameters.shape[0]
            if s.shape[-1] != n_states:
                raise ValueError(f"policy expects one-hot states of length {n_states}, "
                                 f"got {s.shape[-1]}")
            idx = np.argmax(s, axis=-1)
            if self.kind == "tabular-softmax":
                base = _softmax(self.parameters[idx] / self.temperature)
            else:
                base = np.eye(A)[self.parameters[idx]]
        else:
            W = self.parameters
            if s.shape[-1] + 1 != W.shape[1]:
                raise ValueError(f"policy expects states of dimension {W.shape[1] - 1}, "
                                 f"got {s.shape[-1]}")
            logits = s @ W[:, :-1].T + W[:, -1]
            if self.kind == "featurized-softmax":
                base = _softmax(logits / self.temperature)
            else:
                base = np.eye(A)[np.argmax(logits, axis=-1)]
        if self.epsilon > 0.0:
            base = (1.0 - self.epsilon) * base + self.epsilon / A
        return base

    def prob_table(self) -> np.ndarray:
        """Full (num_states, num_actions) table for tabular policies."""
        if not self.is_tabular:
            raise ValueError("prob_table needs a tabular policy")
        n = self.parameters.shape[0]
        return self.action_probs(np.eye(n))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "num_actions": self.num_actions,
                "parameters": None if self.parameters is None else self.parameters.tolist(),
                "temperature": self.temperature, "epsilon": self.epsilon, "name": self.name}

    @classmethod
    def from_dict(cls, d: dict) -> "Policy":
        return cls(kind=d["kind"], num_actions=int(d["num_actions"]),
                   parameters=None if d.get("parameters") is None else np.asarray(d["parameters"]),
                   temperature=float(d.get("temperature", 1.0)),
                   epsilon=float(d.get("epsilon", 0.0)), name=d.get("name", ""))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mix_policies(policies: Sequence[Policy], weights: Sequence[float], name: str = "") -> Policy:
    """Per-step mixture of tabular policies, expressed as a tabular-softmax."""
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(policies),) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
        raise ValueError("mixture weights must be non-negative and sum to one")
    probs = sum(wi * p.prob_table() for wi, p in zip(w, policies))
    with np.errstate(divide="ignore"):  # zero-probability actions get -inf logits
        logits = np.log(probs)
    return Policy("tabular-softmax", policies[0].num_actions, logits, name=name)


def policy_action_prob(policy: Policy, state, action) -> float:
    """Probability that ``policy`` takes ``action`` in ``state``."""
    if not np.issubdtype(np.asarray(action).dtype, np.integer):
        raise ValueError(f"{policy.kind} policies are defined over discrete actions only")
    a = int(action)
    if not 0 <= a < policy.num_actions:
        raise ValueError(f"action {a} outside [0, {policy.num_actions})")
    return float(policy.action_probs(np.asarray(state, dtype=float)[None])[0, a])


def save_policy(policy: Policy, path: PathLike) -> None:
    Path(path).write_text(json.dumps(policy.to_dict()))


def load_policy(path: PathLike) -> Policy:
    return Policy.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Dataset serialization (JSON lines: header, then one trajectory per line)

_TRAJ_KEYS = {"states", "actions", "env_rewards", "human_return", "behavior_probs"}


def dataset_to_lines(dataset: OfflineDataset) -> list:
    header = {"spec": dataset.spec.to_dict(), "provenance": dataset.provenance,
              "seed": dataset.seed, "n": dataset.n}
    lines = [json.dumps(header)]
    for tr in dataset.trajectories:
        lines.append(json.dumps({
            "states": tr.states.tolist(),
            "actions": tr.actions.tolist(),
            "env_rewards": tr.env_rewards.tolist(),
            "human_return": tr.human_return,
            "behavior_probs": None if tr.behavior_probs is None else tr.behavior_probs.tolist(),
        }))
    return lines


def save_dataset(dataset: OfflineDataset, path: PathLike) -> None:
    """Write ``dataset`` as JSON lines. Oracle IHRs are never written."""
    Path(path).write_text("\n".join(dataset_to_lines(dataset)) + "\n")


def load_dataset(path: PathLike) -> OfflineDataset:
    with open(path) as fh:
        raw = [ln for ln in fh.read().split("\n") if ln.strip()]
    if not raw:
        raise DatasetFormatError(0, "empty file")
    try:
        header = json.loads(raw[0])
        spec = HMDPSpec.from_dict(header["spec"])
        n = int(header["n"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(0, f"bad header: {exc}") from exc
    if len(raw) - 1 != n:
        raise DatasetFormatError(0, f"header declares n={n} but file holds {len(raw) - 1} trajectories")
    trajs = []
    for lineno, line in enumerate(raw[1:], start=1):
        try:
            obj = json.loads(line)
        except ValueError as exc:
            raise DatasetFormatError(lineno, f"invalid JSON: {exc}") from exc
        if "true_ihrs" in obj:
            raise DatasetFormatError(lineno, "oracle field true_ihrs must not be serialized")
        missing = _TRAJ_KEYS - {"behavior_probs"} - set(obj)
        if missing:
            raise DatasetFormatError(lineno, f"missing field(s) {sorted(missing)}")
        unknown = set(obj) - _TRAJ_KEYS
        if unknown:
            raise DatasetFormatError(lineno, f"unknown field(s) {sorted(unknown)}")
        if obj["human_return"] is None:
            raise DatasetFormatError(lineno, "human_return is null")
        if len(obj["env_rewards"]) != spec.horizon:
            raise DatasetFormatError(
                lineno, f"horizon mismatch: {len(obj['env_rewards'])} steps, spec says {spec.horizon}")
        try:
            trajs.append(Trajectory(
                states=np.asarray(obj["states"], dtype=float),
                actions=np.asarray(obj["actions"]),
                env_rewards=np.asarray(obj["env_rewards"], dtype=float),
                human_return=obj["human_return"],
                behavior_probs=None if obj.get("behavior_probs") is None
                else np.asarray(obj["behavior_probs"], dtype=float),
            ))
        except ValueError as exc:
            raise DatasetFormatError(lineno, str(exc)) from exc
        if trajs[-1].states.shape[1] != spec.state_dim:
            raise DatasetFormatError(lineno, "state dimension does not match spec")
    return OfflineDataset(spec, tuple(trajs), str(header.get("provenance", "")),
                          int(header.get("seed", 0)))


def datasets_equal(a: OfflineDataset, b: OfflineDataset) -> bool:
    """Exact equality of all serialized fields."""
    if a.spec != b.spec or a.provenance != b.provenance or a.seed != b.seed or a.n != b.n:
        return False
    for x, y in zip(a.trajectories, b.trajectories):
        if not (np.array_equal(x.states, y.states) and np.array_equal(x.actions, y.actions)
                and np.array_equal(x.env_rewards, y.env_rewards)
                and x.human_return == y.human_return):
            return False
        if (x.behavior_probs is None) != (y.behavior_probs is None):
            return False
        if x.behavior_probs is not None and not np.array_equal(x.behavior_probs, y.behavior_probs):
            return False
    return True


def dataset_from_arrays(spec: HMDPSpec, states, actions, env_rewards, human_returns,
                        behavior_probs=None, true_ihrs=None, provenance: str = "",
                        seed: int = 0) -> OfflineDataset:
    n = len(human_returns)
    trajs = tuple(
        Trajectory(states[i], actions[i], env_rewards[i], human_returns[i],
                   None if behavior_probs is None else behavior_probs[i],
                   None if true_ihrs is None else true_ihrs[i])
        for i in range(n))
    return OfflineDataset(spec, trajs, provenance, seed)
