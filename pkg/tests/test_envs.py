import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from opehf.core import Policy, discount_weights
from opehf.envs import (LatentConfounderEnv, TabularHMDP, constant_ihr_env, exact_policy_human_value,
                        exact_q_values, exact_visitation, load_env, make_benchmark_suite,
                        make_latent_confounder_env, mc_policy_human_value, random_tabular_env,
                        sample_batch, sample_dataset, sample_episode, save_env,
                        truncated_normal_mean, truncated_normal_sample)
from opehf.metrics import return_correlations

from conftest import asymmetric_env, one_state_env


def enumerate_paths(env: TabularHMDP, pi: np.ndarray):
    """Yield (probability, [(s_t, a_t)]) for every length-T state-action path."""
    S, A, T = env.num_states, env.num_actions, env.horizon
    for states in itertools.product(range(S), repeat=T):
        p_s = env.initial_dist[states[0]]
        if p_s == 0:
            continue
        for actions in itertools.product(range(A), repeat=T):
            p = p_s
            for t in range(T):
                p *= pi[states[t], actions[t]]
                if t + 1 < T:
                    p *= env.transition[states[t], actions[t], states[t + 1]]
                if p == 0:
                    break
            if p > 0:
                yield p, list(zip(states, actions))


def path_value(env, pi):
    mean = truncated_normal_mean(env.ihr_mean, env.ihr_std)
    w = discount_weights(env.horizon, env.discount)
    return sum(p * sum(w[t] * mean[s, a] for t, (s, a) in enumerate(path))
               for p, path in enumerate_paths(env, pi))


def path_visitation(env, pi):
    w = discount_weights(env.horizon, env.discount)
    occ = np.zeros((env.num_states, env.num_actions))
    for p, path in enumerate_paths(env, pi):
        for t, (s, a) in enumerate(path):
            occ[s, a] += p * w[t]
    return occ / w.sum()


def test_one_state_episode_examples():
    env = one_state_env(mu=2.0, sd=0.0, reward=1.0, discount=0.5, horizon=2)
    tr = sample_episode(env, Policy("uniform-random", 1), 0)
    assert tr.human_return == 3.0
    assert tr.env_rewards @ discount_weights(2, 0.5) == 1.5
    np.testing.assert_array_equal(tr.true_ihrs, [2.0, 2.0])
    assert tr.behavior_probs.tolist() == [1.0, 1.0]


def test_sample_episode_is_deterministic():
    env = asymmetric_env()
    a = sample_episode(env, Policy("uniform-random", 2), 11)
    b = sample_episode(env, Policy("uniform-random", 2), 11)
    for f in ("states", "actions", "env_rewards", "true_ihrs", "behavior_probs"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_sample_episode_rejects_mismatched_policy():
    with pytest.raises(ValueError):
        sample_episode(asymmetric_env(), Policy("uniform-random", 3), 0)
    with pytest.raises(ValueError):
        sample_episode(asymmetric_env(), Policy("tabular-softmax", 2, np.zeros((4, 2))), 0)


def test_exact_value_examples():
    assert exact_policy_human_value(one_state_env(), Policy("uniform-random", 1)) == 3.0
    c, g, T = 1.7, 0.8, 6
    P = np.full((2, 2, 2), 0.5)
    env = TabularHMDP(P, np.zeros((2, 2)), np.full((2, 2), c), np.zeros((2, 2)), [0.5, 0.5], g, T)
    pol = Policy("tabular-softmax", 2, np.array([[3.0, 0.0], [0.0, -1.0]]))
    assert exact_policy_human_value(env, pol) == pytest.approx(c * (1 - g ** T) / (1 - g), abs=1e-12)


@pytest.mark.parametrize("horizon", [1, 3, 5])
def test_exact_value_matches_path_enumeration(horizon):
    env = asymmetric_env(horizon)
    for pol in [Policy("uniform-random", 2),
                Policy("tabular-softmax", 2, np.array([[1.0, -1.0], [0.3, 0.0], [-2.0, 0.5]]))]:
        pi = np.full((3, 2), 0.5) if pol.kind == "uniform-random" else pol.prob_table()
        assert exact_policy_human_value(env, pol) == pytest.approx(path_value(env, pi), abs=1e-12)


def test_exact_visitation_examples():
    occ = exact_visitation(one_state_env(), Policy("uniform-random", 1))
    np.testing.assert_allclose(occ, [[1.0]], atol=1e-12)
    P = np.full((2, 2, 2), 0.5)
    env = TabularHMDP(P, np.zeros((2, 2)), np.ones((2, 2)), np.zeros((2, 2)), [0.5, 0.5], 0.9, 4)
    np.testing.assert_allclose(exact_visitation(env, Policy("uniform-random", 2)),
                               np.full((2, 2), 0.25), atol=1e-12)


@pytest.mark.parametrize("horizon", [2, 4, 6])
def test_exact_visitation_matches_path_enumeration(horizon):
    env = asymmetric_env(horizon)
    pol = Policy("tabular-softmax", 2, np.array([[0.0, 1.0], [2.0, 0.0], [0.5, 0.5]]))
    occ = exact_visitation(env, pol)
    assert occ.sum() == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(occ, path_visitation(env, pol.prob_table()), atol=1e-9)


def test_oracles_reject_latent_env():
    env = make_latent_confounder_env(0.0, 0)
    with pytest.raises(TypeError):
        exact_policy_human_value(env, Policy("uniform-random", 3))
    with pytest.raises(TypeError):
        exact_visitation(env, Policy("uniform-random", 3))


def test_exact_q_values_consistent_with_value():
    env = asymmetric_env(5)
    pol = Policy("tabular-softmax", 2, np.array([[0.0, 1.0], [2.0, 0.0], [0.5, 0.5]]))
    Q = exact_q_values(env, pol)
    v0 = env.initial_dist @ (pol.prob_table() * Q[0]).sum(1)
    assert v0 == pytest.approx(exact_policy_human_value(env, pol), abs=1e-12)


def test_truncated_mean_matches_scipy():
    mu = np.array([-1.0, 0.0, 0.3, 2.0])
    sd = np.array([0.5, 1.0, 0.2, 0.7])
    ref = stats.truncnorm.mean((0 - mu) / sd, np.inf, loc=mu, scale=sd)
    np.testing.assert_allclose(truncated_normal_mean(mu, sd), ref, rtol=1e-10)


@given(st.floats(-3, 3), st.floats(0, 2), st.integers(0, 2 ** 31))
def test_truncation_keeps_ihrs_nonnegative(mu, sd, seed):
    x = truncated_normal_sample(np.full(200, mu), sd, np.random.default_rng(seed))
    assert np.all(x >= 0)


def _mc_cases():
    env = asymmetric_env(5)
    yield env, Policy("uniform-random", 2)
    yield env, Policy("tabular-softmax", 2, np.array([[0.0, 2.0], [1.0, 0.0], [0.0, 0.0]]))
    bench = make_benchmark_suite(0)[0]
    yield bench.env, bench.behavior
    yield bench.env, bench.targets[0]


@pytest.mark.parametrize("case", range(4))
def test_monte_carlo_matches_exact_value(case):
    env, pol = list(_mc_cases())[case]
    mean, se = mc_policy_human_value(env, pol, 50_000, seed=case)
    assert abs(mean - exact_policy_human_value(env, pol)) <= 3 * se


def test_oracle_return_equals_discounted_ihrs():
    for env in (asymmetric_env(6), make_latent_confounder_env(0.0, 1)):
        ds = sample_dataset(env, Policy("uniform-random", env.num_actions), 200, 3)
        for tr in ds.trajectories:
            tr.check_oracle_consistency(env.discount, atol=1e-9)
            assert np.all(tr.true_ihrs >= 0)


def test_weak_confounder_returns_are_weakly_correlated():
    for seed in range(3):
        bench = make_benchmark_suite(seed)[2]
        assert bench.env.correlation_knob == 0.0
        ds = sample_dataset(bench.env, bench.behavior, 1000, seed)
        r = return_correlations(ds)["pearson"]
        assert -0.3 < r < 0.3, (seed, r)


def test_strong_knob_makes_human_reward_track_env_reward():
    env = make_latent_confounder_env(1.0, 0)
    b = sample_batch(env, Policy("uniform-random", 3), 500, np.random.default_rng(0))
    gap = np.abs(b["true_ihrs"] - b["env_rewards"])
    assert gap.max() <= 3 * env.human_noise + 1e-12


def test_hidden_factor_never_emitted():
    env = make_latent_confounder_env(0.0, 0, state_dim=4, hidden_factor_dim=1)
    ds = sample_dataset(env, Policy("uniform-random", 3), 5, 0)
    assert ds.states.shape[-1] == env.state_dim == 4


def test_knob_zero_uses_disjoint_weight_supports():
    env = make_latent_confounder_env(0.0, 2)
    env_support = (env.env_state_weights != 0) | np.any(env.env_action_weights != 0, axis=0)
    hum_support = (env.human_state_weights != 0) | np.any(env.human_action_weights != 0, axis=0)
    assert not np.any(env_support & hum_support)


def test_constant_env_has_constant_ihrs():
    env = constant_ihr_env(2.5)
    ds = sample_dataset(env, Policy("uniform-random", 2), 50, 0)
    assert np.all(ds.true_ihrs == 2.5)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_benchmark_suite_properties(seed):
    suite = make_benchmark_suite(seed)
    assert sum(isinstance(b.env, TabularHMDP) for b in suite) >= 2
    assert sum(isinstance(b.env, LatentConfounderEnv) for b in suite) >= 1
    for bench in suite:
        assert any(p.name == "worst" for p in bench.targets)
        if isinstance(bench.env, TabularHMDP):
            vals = np.array([exact_policy_human_value(bench.env, p) for p in bench.targets])
            assert exact_policy_human_value(bench.env, bench.behavior) <= 0.6 * vals.max()
        else:
            vals = np.array([mc_policy_human_value(bench.env, p, 4000, seed)[0]
                             for p in bench.targets])
        span = vals.max() - vals.min()
        gaps = np.abs(vals[:, None] - vals[None, :])
        assert span > 0 and gaps.max() >= 0.1 * span


def test_benchmark_suite_is_deterministic():
    a, b = make_benchmark_suite(4), make_benchmark_suite(4)
    for x, y in zip(a, b):
        assert x.env.to_dict() == y.env.to_dict()
        assert x.behavior.to_dict() == y.behavior.to_dict()


def test_env_round_trip(tmp_path):
    for env in (random_tabular_env(3, 2, 4, 0.9, seed=1), make_latent_confounder_env(0.5, 1)):
        save_env(env, tmp_path / "e.json")
        assert load_env(tmp_path / "e.json").to_dict() == env.to_dict()
