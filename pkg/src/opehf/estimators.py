"""Off-policy estimators of the expected discounted human return.

Every estimator consumes per-step rewards (reconstructed, or the simulator's
true ones) through :class:`EstimationData`, a flat array view that can be
resampled cheaply for bootstrap standard errors.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .core import HMDPSpec, OfflineDataset, Policy, discount_weights
from .diff import tensor as F
from .envs import TabularHMDP, exact_policy_human_value, mc_policy_human_value, sample_batch
from .rilr import ReconstructedDataset, rescale_reconstruct
from .seeding import as_rng, rng_for

log = logging.getLogger(__name__)

ESTIMATORS = ("is", "pdis", "dr", "fqe", "dice")


# ---------------------------------------------------------------------------
# Data view


@dataclass(frozen=True)
class EstimationData:
    """Arrays an estimator needs; ``rewards`` are the per-step rewards to evaluate."""

    spec: HMDPSpec
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    returns: np.ndarray
    behavior_probs: Optional[np.ndarray] = None
    method: str = ""

    @classmethod
    def from_reconstruction(cls, recon: ReconstructedDataset) -> "EstimationData":
        b = recon.base
        return cls(b.spec, b.states, b.actions, np.asarray(recon.ihrs), b.human_returns,
                   b.behavior_probs, recon.method)

    @property
    def n(self) -> int:
        return len(self.actions)

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def discount(self) -> float:
        return self.spec.discount

    @property
    def state_indices(self) -> np.ndarray:
        return np.argmax(self.states, axis=-1)

    def take(self, idx) -> "EstimationData":
        bp = None if self.behavior_probs is None else self.behavior_probs[idx]
        return EstimationData(self.spec, self.states[idx], self.actions[idx], self.rewards[idx],
                              self.returns[idx], bp, self.method)


def as_estimation_data(data) -> EstimationData:
    if isinstance(data, EstimationData):
        return data
    if isinstance(data, ReconstructedDataset):
        return EstimationData.from_reconstruction(data)
    if isinstance(data, OfflineDataset):
        return EstimationData.from_reconstruction(rescale_reconstruct(data))
    raise TypeError(f"cannot estimate from {type(data).__name__}")


@dataclass
class EstimatorResult:
    estimator: str
    estimate: float
    method: str = ""
    policy_id: str = ""
    diagnostics: dict = field(default_factory=dict)
    per_trajectory: Optional[np.ndarray] = None

    def __float__(self) -> float:
        return float(self.estimate)

    def to_record(self) -> dict:
        diag = {k: self.diagnostics.get(k) for k in
                ("ess", "max_weight", "bellman_residual", "coverage_violations")}
        diag = {k: (None if v is None else (int(v) if k == "coverage_violations" else float(v)))
                for k, v in diag.items()}
        return {"estimator": self.estimator, "method_tag": self.method,
                "target_policy_id": self.policy_id, "estimate": float(self.estimate),
                "diagnostics": diag}


# ---------------------------------------------------------------------------
# Behaviour policy estimation


@dataclass(frozen=True)
class BehaviorPolicyEstimate:
    """Fitted behaviour policy.

    ``parameters`` is a probability table (S, A) for tabular-counts or a
    weight matrix (A, d+1) for featurized-softmax.
    """

    kind: str
    alpha: float
    parameters: np.ndarray
    num_actions: int
    heldout_loglik: float = float("nan")
    unvisited_states: tuple = ()

    def as_policy(self) -> Policy:
        if self.kind == "tabular-counts":
            return Policy("tabular-softmax", self.num_actions, np.log(self.parameters),
                          name="behavior-estimate")
        return Policy("featurized-softmax", self.num_actions, self.parameters,
                      name="behavior-estimate")

    def action_probs(self, states) -> np.ndarray:
        return self.as_policy().action_probs(states)

    def prob(self, state, action) -> float:
        return float(self.action_probs(np.asarray(state, dtype=float)[None])[0, int(action)])


def _count_table(idx: np.ndarray, actions: np.ndarray, S: int, A: int, alpha: float):
    counts = np.bincount(idx * A + actions, minlength=S * A).reshape(S, A).astype(float)
    return (counts + alpha) / (counts.sum(axis=1, keepdims=True) + A * alpha), counts.sum(axis=1)


def _fit_logistic(X: np.ndarray, a: np.ndarray, A: int, l2: float) -> np.ndarray:
    Xb = np.hstack([X, np.ones((len(X), 1))])
    Y = np.eye(A)[a]
    n = len(X)

    def nll(w):
        W = w.reshape(A, -1)
        logits = Xb @ W.T
        lse = logsumexp(logits, axis=1)
        f = (lse - logits[np.arange(n), a]).sum() / n + 0.5 * l2 * np.sum(W[:, :-1] ** 2)
        P = np.exp(logits - lse[:, None])
        g = (P - Y).T @ Xb / n
        g[:, :-1] += l2 * W[:, :-1]
        return f, g.ravel()

    res = minimize(nll, np.zeros(A * Xb.shape[1]), jac=True, method="L-BFGS-B",
                   options={"maxiter": 500})
    return res.x.reshape(A, -1)


def _loglik(policy: Policy, states: np.ndarray, actions: np.ndarray) -> float:
    p = policy.action_probs(states)[np.arange(len(actions)), actions]
    return float(np.mean(np.log(p)))


def estimate_behavior_policy(dataset, alpha: float = 1.0, l2: float = 1e-4,
                             holdout_fraction: float = 0.1, rng=0) -> BehaviorPolicyEstimate:
    """Laplace-smoothed counts (tabular) or multinomial logistic regression (features).

    The held-out log-likelihood comes from a fit on the remaining trajectories;
    the returned parameters are fitted on all of them.
    """
    data = dataset if isinstance(dataset, EstimationData) else (
        EstimationData(dataset.spec, dataset.states, dataset.actions, dataset.env_rewards,
                       dataset.human_returns, dataset.behavior_probs))
    if data.n < 1:
        raise ValueError("dataset is empty")
    A = data.spec.num_actions
    T = data.horizon
    rng = as_rng(rng)
    perm = rng.permutation(data.n)
    n_hold = int(round(holdout_fraction * data.n)) if data.n >= 10 else 0
    hold, fit = perm[:n_hold], perm[n_hold:]

    def fit_on(rows):
        s = data.states[rows, :T].reshape(-1, data.spec.state_dim)
        a = data.actions[rows].reshape(-1)
        if data.spec.tabular:
            table, visits = _count_table(np.argmax(s, axis=1), a, data.spec.num_states, A, alpha)
            return BehaviorPolicyEstimate("tabular-counts", alpha, table, A,
                                          unvisited_states=tuple(np.flatnonzero(visits == 0).tolist()))
        return BehaviorPolicyEstimate("featurized-softmax", 0.0, _fit_logistic(s, a, A, l2), A)

    heldout = float("nan")
    if n_hold:
        part = fit_on(fit)
        heldout = _loglik(part.as_policy(), data.states[hold, :T].reshape(-1, data.spec.state_dim),
                          data.actions[hold].reshape(-1))
    est = fit_on(np.arange(data.n))
    if est.unvisited_states:
        log.info("behaviour estimate: uniform fallback for unvisited states %s",
                 list(est.unvisited_states))
    return BehaviorPolicyEstimate(est.kind, est.alpha, est.parameters, A, heldout,
                                  est.unvisited_states)


# ---------------------------------------------------------------------------
# Importance weights


@dataclass(frozen=True)
class ImportanceWeights:
    """Per-step ratios and their running products ``omega_{0:t}`` (optionally clipped)."""

    ratios: np.ndarray
    cumulative: np.ndarray
    clip: float = np.inf

    @property
    def final(self) -> np.ndarray:
        return self.cumulative[:, -1]

    def previous(self) -> np.ndarray:
        """``omega_{0:t-1}`` with ``omega_{0:-1} = 1``."""
        return np.hstack([np.ones((len(self.cumulative), 1)), self.cumulative[:, :-1]])

    def ess(self) -> float:
        w = self.final
        s2 = float(np.sum(w ** 2))
        return float(np.sum(w) ** 2 / s2) if s2 > 0 else 0.0


def _behavior_step_probs(data: EstimationData, behavior) -> np.ndarray:
    T = data.horizon
    if behavior is None or (isinstance(behavior, str) and behavior == "logged"):
        if data.behavior_probs is not None:
            return data.behavior_probs
        if isinstance(behavior, str):
            raise ValueError("dataset has no logged behaviour probabilities")
        behavior = estimate_behavior_policy(data)
    elif isinstance(behavior, str) and behavior == "estimated":
        behavior = estimate_behavior_policy(data)
    if isinstance(behavior, BehaviorPolicyEstimate):
        behavior = behavior.as_policy()
    p = behavior.action_probs(data.states[:, :T])
    return np.take_along_axis(p, data.actions[..., None], axis=-1)[..., 0]


def target_step_probs(data: EstimationData, policy: Policy) -> np.ndarray:
    p = policy.action_probs(data.states[:, :data.horizon])
    return np.take_along_axis(p, data.actions[..., None], axis=-1)[..., 0]


def importance_weights(data, policy: Policy, behavior=None, clip: Optional[float] = None
                       ) -> ImportanceWeights:
    """``behavior`` is a Policy, a BehaviorPolicyEstimate, ``"logged"``, ``"estimated"``
    or ``None`` (logged probabilities when present, else an estimate)."""
    data = as_estimation_data(data)
    b = _behavior_step_probs(data, behavior)
    if np.any(b <= 0):
        raise ZeroDivisionError("behaviour probability is zero for a logged action")
    ratios = target_step_probs(data, policy) / b
    cum = np.cumprod(ratios, axis=1)
    clip = np.inf if clip is None else float(clip)
    if np.isfinite(clip):
        cum = np.minimum(cum, clip)
    return ImportanceWeights(ratios, cum, clip)


def _weight_diagnostics(w: ImportanceWeights) -> dict:
    return {"ess": w.ess(), "max_weight": float(np.max(w.cumulative)) if w.cumulative.size else 0.0}


def is_vanilla(data, policy: Policy, behavior=None, clip=None, policy_id: str = "") -> EstimatorResult:
    """Trajectory-wise importance sampling on discounted reconstructed returns."""
    data = as_estimation_data(data)
    w = importance_weights(data, policy, behavior, clip)
    g = data.rewards @ discount_weights(data.horizon, data.discount)
    per = w.final * g
    return EstimatorResult("is", float(per.mean()), data.method, policy_id,
                           _weight_diagnostics(w), per)


def pdis(data, policy: Policy, behavior=None, clip=None, policy_id: str = "") -> EstimatorResult:
    """Per-decision importance sampling."""
    data = as_estimation_data(data)
    w = importance_weights(data, policy, behavior, clip)
    per = (w.cumulative * data.rewards) @ discount_weights(data.horizon, data.discount)
    return EstimatorResult("pdis", float(per.mean()), data.method, policy_id,
                           _weight_diagnostics(w), per)


# ---------------------------------------------------------------------------
# Fitted Q evaluation


def quadratic_features(states: np.ndarray) -> np.ndarray:
    """[1, s, s_i * s_j for i <= j] along the last axis."""
    s = np.asarray(states, dtype=float)
    d = s.shape[-1]
    pairs = list(combinations_with_replacement(range(d), 2))
    quad = np.stack([s[..., i] * s[..., j] for i, j in pairs], axis=-1) if pairs else s[..., :0]
    return np.concatenate([np.ones(s.shape[:-1] + (1,)), s, quad], axis=-1)


@dataclass(frozen=True)
class QApprox:
    """Time-indexed action values; ``Q_T = 0``.

    ``table`` has shape (T, S, A) for tabular envs; ``weights`` has shape
    (T, A, F) over :func:`quadratic_features` otherwise.
    """

    kind: str
    horizon: int
    num_actions: int
    table: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    def q(self, t: int, states: np.ndarray) -> np.ndarray:
        s = np.asarray(states, dtype=float)
        if t >= self.horizon:
            return np.zeros(s.shape[:-1] + (self.num_actions,))
        if self.kind == "tabular":
            return self.table[t][np.argmax(s, axis=-1)]
        return quadratic_features(s) @ self.weights[t].T

    def v(self, t: int, states: np.ndarray, policy: Policy) -> np.ndarray:
        return np.sum(policy.action_probs(states) * self.q(t, states), axis=-1)


@dataclass
class FQEConfig:
    max_iterations: int = 200
    tol: float = 1e-10
    ridge: float = 1e-3


def fqe_regression_loss(weights, features: np.ndarray, targets: np.ndarray, ridge: float = 0.0):
    """Mean squared Bellman-target regression loss of a linear Q (differentiable in weights)."""
    w = F.as_tensor(weights)
    pred = F.matmul(F.as_tensor(features), w)
    loss = F.tmean(F.square(pred - np.asarray(targets, dtype=float)))
    if ridge:
        loss = loss + ridge * F.tsum(F.square(w))
    return loss


def _fit_fqe(data: EstimationData, policy: Policy, config: FQEConfig):
    T, gamma = data.horizon, data.discount
    N = data.n
    A = data.spec.num_actions
    history = []
    tol = config.tol
    if data.spec.tabular:
        S = data.spec.num_states
        idx = data.state_indices
        cells = (np.arange(T)[None, :] * S + idx[:, :T]) * A + data.actions
        counts = np.bincount(cells.ravel(), minlength=T * S * A).reshape(T, S, A)
        visited = counts > 0
        pi = policy.action_probs(np.eye(S))
        Q = np.zeros((T + 1, S, A))
        for k in range(config.max_iterations):
            V = np.sum(Q * pi, axis=-1)
            y = data.rewards + gamma * V[np.arange(1, T + 1)[None, :], idx[:, 1:]]
            sums = np.bincount(cells.ravel(), weights=y.ravel(), minlength=T * S * A).reshape(T, S, A)
            new = np.where(visited, sums / np.maximum(counts, 1), 0.0)
            residual = float(np.max(np.abs(new - Q[:T])[visited])) if visited.any() else 0.0
            Q[:T] = new
            history.append(residual)
            if residual <= tol:
                break
        qa = QApprox("tabular", T, A, table=Q[:T].copy())
        diag = {"unvisited_cells": int((~visited).sum())}
    else:
        phi = quadratic_features(data.states)
        Fdim = phi.shape[-1]
        a1h = np.eye(A)[data.actions]
        X = (a1h[..., :, None] * phi[:, :T, None, :]).reshape(N, T, A * Fdim)
        solvers = []
        for t in range(T):
            G = X[:, t].T @ X[:, t] + config.ridge * N * np.eye(A * Fdim)
            solvers.append(np.linalg.cholesky(G))
        pi_next = policy.action_probs(data.states[:, 1:])
        W = np.zeros((T + 1, A, Fdim))
        fitted = np.zeros((N, T))
        for k in range(config.max_iterations):
            qn = np.einsum("ntf,tAf->ntA", phi[:, 1:], W[1:])
            y = data.rewards + gamma * np.sum(pi_next * qn, axis=-1)
            newW = np.zeros_like(W)
            for t in range(T):
                L = solvers[t]
                rhs = X[:, t].T @ y[:, t]
                newW[t] = np.linalg.solve(L.T, np.linalg.solve(L, rhs)).reshape(A, Fdim)
            new_fit = np.einsum("ntf,tf->nt", X, newW[:T].reshape(T, A * Fdim))
            residual = float(np.max(np.abs(new_fit - fitted)))
            W, fitted = newW, new_fit
            history.append(residual)
            tol = config.tol * (1.0 + float(np.max(np.abs(fitted))))
            if residual <= tol:
                break
        qa = QApprox("linear", T, A, weights=W[:T].copy())
        diag = {}
    converged = not history or history[-1] <= tol
    if not converged:
        log.warning("FQE did not converge in %d iterations (residual %.3g)",
                    config.max_iterations, history[-1])
    diag.update({"bellman_residual": history[-1] if history else 0.0,
                 "residual_history": history, "converged": bool(converged),
                 "iterations": len(history)})
    return qa, diag


def fqe(data, policy: Policy, config: Optional[FQEConfig] = None, policy_id: str = ""):
    """Fitted Q evaluation; returns ``(result, QApprox)``."""
    data = as_estimation_data(data)
    if not data.spec.discrete:
        raise ValueError("FQE needs a discrete action space")
    qa, diag = _fit_fqe(data, policy, config or FQEConfig())
    per = qa.v(0, data.states[:, 0], policy)
    return EstimatorResult("fqe", float(per.mean()), data.method, policy_id, diag, per), qa


# ---------------------------------------------------------------------------
# Doubly robust


def dr(data, policy: Policy, behavior=None, q: Optional[QApprox] = None, standard_dr: bool = True,
       clip=None, fqe_config: Optional[FQEConfig] = None, policy_id: str = "") -> EstimatorResult:
    """Doubly robust estimate with ``q`` as control variate (fitted by FQE when absent).

    ``standard_dr`` selects ``sum_t g^t [w_{0:t} (r_t - Q) + w_{0:t-1} V]``;
    otherwise the reward-times-Q variant is evaluated as written in the
    estimator's original formulation.
    """
    data = as_estimation_data(data)
    diag = {}
    if q is None:
        res, q = fqe(data, policy, fqe_config)
        diag["bellman_residual"] = res.diagnostics["bellman_residual"]
    w = importance_weights(data, policy, behavior, clip)
    T = data.horizon
    disc = discount_weights(T, data.discount)
    Qsa = np.empty((data.n, T))
    Vs = np.empty((data.n, T))
    for t in range(T):
        qt = q.q(t, data.states[:, t])
        Qsa[:, t] = qt[np.arange(data.n), data.actions[:, t]]
        Vs[:, t] = np.sum(policy.action_probs(data.states[:, t]) * qt, axis=-1)
    prev = w.previous()
    if standard_dr:
        per = ((w.cumulative * (data.rewards - Qsa) + prev * Vs) * disc).sum(axis=1)
    else:
        first = (w.cumulative * data.rewards * disc).sum(axis=1)
        per = first - (disc * w.cumulative * data.rewards * Qsa - prev * Vs).sum(axis=1)
    diag.update(_weight_diagnostics(w))
    return EstimatorResult("dr", float(per.mean()), data.method, policy_id, diag, per)


# ---------------------------------------------------------------------------
# DICE via an empirical model


@dataclass(frozen=True)
class RatioEstimate:
    """Occupancy ratios over discrete (state, action) cells."""

    ratio: np.ndarray
    support: np.ndarray
    target_occupancy: np.ndarray
    behavior_occupancy: np.ndarray
    coverage_violations: int

    def normalization(self) -> float:
        """Behaviour-weighted mean ratio; 1 when the target is fully covered."""
        return float(np.sum(self.behavior_occupancy * self.ratio))


@dataclass
class DICEConfig:
    max_ratio: float = 100.0
    bins_per_dim: int = 2


def discretize_states(states: np.ndarray, edges: list) -> np.ndarray:
    """Cell index from per-dimension bin edges."""
    s = np.asarray(states, dtype=float)
    idx = np.zeros(s.shape[:-1], dtype=int)
    for j, e in enumerate(edges):
        idx = idx * (len(e) + 1) + np.searchsorted(e, s[..., j], side="right")
    return idx


def _dice_cells(data: EstimationData, policy: Policy, config: DICEConfig):
    """Cell indices (N, T+1), number of cells and target action table per cell."""
    A = data.spec.num_actions
    if data.spec.tabular:
        S = data.spec.num_states
        return data.state_indices, S, policy.action_probs(np.eye(S))
    d = data.spec.state_dim
    flat = data.states.reshape(-1, d)
    qs = np.linspace(0, 1, config.bins_per_dim + 1)[1:-1]
    edges = [np.quantile(flat[:, j], qs) for j in range(d)]
    cells = discretize_states(data.states, edges)
    S = (config.bins_per_dim) ** d
    probs = policy.action_probs(data.states).reshape(-1, A)
    sums = np.zeros((S, A))
    np.add.at(sums, cells.ravel(), probs)
    cnt = np.bincount(cells.ravel(), minlength=S)
    table = np.where(cnt[:, None] > 0, sums / np.maximum(cnt, 1)[:, None], 1.0 / A)
    return cells, S, table


def dice_ratios(data, policy: Policy, config: Optional[DICEConfig] = None):
    """Empirical-model occupancy ratios; returns ``(RatioEstimate, cells)``."""
    data = as_estimation_data(data)
    config = config or DICEConfig()
    A, T, gamma, N = data.spec.num_actions, data.horizon, data.discount, data.n
    cells, S, pi = _dice_cells(data, policy, config)
    sa = cells[:, :T] * A + data.actions
    trans = np.zeros((S * A, S))
    np.add.at(trans, (sa.ravel(), cells[:, 1:].ravel()), 1.0)
    n_sa = trans.sum(axis=1)
    trans = np.where(n_sa[:, None] > 0, trans / np.maximum(n_sa, 1)[:, None], 1.0 / S)
    trans = trans.reshape(S, A, S)
    init = np.bincount(cells[:, 0], minlength=S) / N
    disc = discount_weights(T, gamma)
    d_pi = np.zeros((S, A))
    ds = init
    for t in range(T):
        dsa = ds[:, None] * pi
        d_pi += disc[t] * dsa
        ds = np.einsum("sa,sap->p", dsa, trans)
    d_pi /= disc.sum()
    d_b = np.zeros(S * A)
    np.add.at(d_b, sa.ravel(), np.broadcast_to(disc, sa.shape).ravel())
    d_b = (d_b / (N * disc.sum())).reshape(S, A)
    support = d_b > 0
    ratio = np.where(support, d_pi / np.where(support, d_b, 1.0), 0.0)
    violations = int(np.sum(~support & (d_pi > 1e-12)))
    capped = int(np.sum(ratio > config.max_ratio))
    ratio = np.minimum(ratio, config.max_ratio)
    if violations or capped:
        log.info("DICE coverage: %d uncovered cells, %d capped ratios", violations, capped)
    return RatioEstimate(ratio, support, d_pi, d_b, violations + capped), cells


def dice(data, policy: Policy, behavior=None, config: Optional[DICEConfig] = None,
         policy_id: str = "") -> EstimatorResult:
    """Occupancy-ratio weighted rewards, scaled to a discounted return.

    ``behavior`` is accepted for interface symmetry; the behaviour occupancy
    comes from the data itself.
    """
    data = as_estimation_data(data)
    ratios, cells = dice_ratios(data, policy, config)
    A, T = data.spec.num_actions, data.horizon
    r = ratios.ratio.reshape(-1)[cells[:, :T] * A + data.actions]
    per = (r * data.rewards) @ discount_weights(T, data.discount)
    diag = {"coverage_violations": ratios.coverage_violations,
            "normalization": ratios.normalization(), "max_weight": float(ratios.ratio.max())}
    return EstimatorResult("dice", float(per.mean()), data.method, policy_id, diag, per)


# ---------------------------------------------------------------------------
# Dispatch and bootstrap


def run_estimator(name: str, data, policy: Policy, behavior=None, policy_id: str = "",
                  **kwargs) -> EstimatorResult:
    data = as_estimation_data(data)
    if name == "is":
        return is_vanilla(data, policy, behavior, kwargs.get("clip"), policy_id)
    if name == "pdis":
        return pdis(data, policy, behavior, kwargs.get("clip"), policy_id)
    if name == "dr":
        return dr(data, policy, behavior, standard_dr=kwargs.get("standard_dr", True),
                  clip=kwargs.get("clip"), fqe_config=kwargs.get("fqe_config"), policy_id=policy_id)
    if name == "fqe":
        return fqe(data, policy, kwargs.get("fqe_config"), policy_id)[0]
    if name == "dice":
        return dice(data, policy, behavior, kwargs.get("dice_config"), policy_id)
    raise ValueError(f"unknown estimator {name!r}")


def bootstrap_se(estimate_fn: Callable[[EstimationData], float], data, num_resamples: int = 200,
                 rng=0) -> float:
    """Standard deviation of ``estimate_fn`` over trajectory-level resamples."""
    data = as_estimation_data(data)
    rng = as_rng(rng)
    vals = np.empty(num_resamples)
    for b in range(num_resamples):
        vals[b] = float(estimate_fn(data.take(rng.integers(data.n, size=data.n))))
    return float(np.std(vals, ddof=1))


# ---------------------------------------------------------------------------
# Variance study


@dataclass
class VarianceStudy:
    pdis_estimates: np.ndarray
    is_estimates: np.ndarray
    true_value: float
    correlations: np.ndarray

    @property
    def var_pdis(self) -> float:
        return float(np.var(self.pdis_estimates, ddof=1))

    @property
    def var_is(self) -> float:
        return float(np.var(self.is_estimates, ddof=1))

    @property
    def mean_pdis(self) -> float:
        return float(np.mean(self.pdis_estimates))

    @property
    def mean_is(self) -> float:
        return float(np.mean(self.is_estimates))

    @property
    def se_pdis(self) -> float:
        return float(np.std(self.pdis_estimates, ddof=1) / np.sqrt(len(self.pdis_estimates)))

    @property
    def se_is(self) -> float:
        return float(np.std(self.is_estimates, ddof=1) / np.sqrt(len(self.is_estimates)))

    def audit(self) -> dict:
        c = self.correlations
        finite = c[np.isfinite(c)]
        return {"pairs": int(c.size), "defined_pairs": int(finite.size),
                "min_correlation": float(finite.min()) if finite.size else float("nan"),
                "mean_correlation": float(finite.mean()) if finite.size else float("nan"),
                "all_positive": bool(finite.size == c.size and np.all(finite > 0))}

    def to_dict(self) -> dict:
        return {"var_pdis": self.var_pdis, "var_is": self.var_is, "mean_pdis": self.mean_pdis,
                "mean_is": self.mean_is, "se_pdis": self.se_pdis, "se_is": self.se_is,
                "true_value": self.true_value, "assumption_audit": self.audit()}


def weight_reward_correlations(ratios: np.ndarray, rewards: np.ndarray) -> np.ndarray:
    """corr(w_{0:k}, r_t * w_{0:k}) for every 0 <= t < k <= T-1 (k = T-1 when t = T-1).

    Undefined pairs (constant weights) are NaN.
    """
    cum = np.cumprod(ratios, axis=1)
    T = ratios.shape[1]
    out = []
    for t in range(T):
        for k in (range(t + 1, T) if t < T - 1 else [T - 1]):
            w = cum[:, k]
            y = rewards[:, t] * w
            if np.std(w) < 1e-15 or np.std(y) < 1e-15:
                out.append(np.nan)
            else:
                out.append(float(np.corrcoef(w, y)[0, 1]))
    return np.array(out)


def variance_study(env, target: Policy, behavior: Policy, num_datasets: int = 500,
                   n_per_dataset: int = 200, seed: int = 0) -> VarianceStudy:
    """PDIS on true per-step rewards vs trajectory IS on returns over independent datasets.

    Both use the known behaviour probabilities so the comparison isolates the
    estimators themselves.
    """
    T, gamma = env.horizon, env.discount
    disc = discount_weights(T, gamma)
    pd, iv = np.empty(num_datasets), np.empty(num_datasets)
    all_ratios, all_rewards = [], []
    for m in range(num_datasets):
        b = sample_batch(env, behavior, n_per_dataset, rng_for(seed, "variance-study", m))
        p = target.action_probs(b["states"][:, :T])
        tp = np.take_along_axis(p, b["actions"][..., None], axis=-1)[..., 0]
        ratios = tp / b["behavior_probs"]
        cum = np.cumprod(ratios, axis=1)
        pd[m] = np.mean((cum * b["true_ihrs"]) @ disc)
        iv[m] = np.mean(cum[:, -1] * b["human_returns"])
        all_ratios.append(ratios)
        all_rewards.append(b["true_ihrs"])
    corr = weight_reward_correlations(np.concatenate(all_ratios), np.concatenate(all_rewards))
    if isinstance(env, TabularHMDP):
        truth = exact_policy_human_value(env, target)
    else:
        truth = mc_policy_human_value(env, target, 50000, seed)[0]
    return VarianceStudy(pd, iv, truth, corr)
