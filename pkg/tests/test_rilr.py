import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from opehf.core import HMDPSpec, Policy, Trajectory, dataset_from_arrays, discount_weights
from opehf.envs import constant_ihr_env, make_benchmark_suite, sample_dataset, sample_mixture_dataset
from opehf.rilr import (RILRConfig, ReconstructedDataset, ReconstructorModel, fusion_reconstruct,
                        load_reconstruction, neighbor_targets, oracle_reconstruct,
                        rescale_reconstruct, resolve_sigmas, return_scale, rilr_loss,
                        rilr_objective, save_reconstruction, train_reconstructor, train_rilr)
from opehf.vlmh import VLMHConfig, VLMHModel, train_vlmh

from conftest import asymmetric_env, fd_max_rel_error


def make_ds(env_rewards, human_returns, discount, A=2, seed=0):
    r = np.atleast_2d(np.asarray(env_rewards, dtype=float))
    N, T = r.shape
    spec = HMDPSpec(state_dim=1, discount=discount, horizon=T, num_actions=A)
    rng = np.random.default_rng(seed)
    return dataset_from_arrays(spec, rng.standard_normal((N, T + 1, 1)), rng.integers(A, size=(N, T)),
                               r, np.asarray(human_returns, dtype=float))


def test_rescale_examples():
    rec = rescale_reconstruct(make_ds([[0.0, 0.0, 0.0]], [1.75], 0.5))
    np.testing.assert_array_equal(rec.ihrs, [[0.0, 0.0, 7.0]])
    rec = rescale_reconstruct(make_ds([[0.0]], [5.0], 0.99))
    np.testing.assert_array_equal(rec.ihrs, [[5.0]])
    assert rec.method == "rescale"


def test_fusion_examples():
    rec = fusion_reconstruct(make_ds([[1.0, 0.0, 1.0]], [5.0], 0.99))
    g_env = 1 + 0.99 ** 2
    np.testing.assert_allclose(rec.ihrs, [[1.0, 0.0, 1.0 + (5.0 - g_env) / 0.9801]], rtol=1e-14)
    assert round(rec.ihrs[0, 2], 3) == 4.081
    r = np.array([[0.3, 1.2, -0.4, 2.0]])
    same = fusion_reconstruct(make_ds(r, [r[0] @ discount_weights(4, 0.8)], 0.8))
    np.testing.assert_allclose(same.ihrs, r, atol=1e-12)


def test_baselines_guard_against_underflow():
    ds = make_ds(np.zeros((1, 10)), [1.0], 0.01)
    with pytest.raises(FloatingPointError):
        rescale_reconstruct(ds)
    with pytest.raises(FloatingPointError):
        fusion_reconstruct(ds)


@given(st.integers(1, 8), st.integers(1, 12), st.floats(0.05, 0.99), st.integers(0, 2 ** 31))
def test_baselines_preserve_discounted_sum(n, T, gamma, seed):
    assume(gamma ** (T - 1) >= 1e-12)
    rng = np.random.default_rng(seed)
    ds = make_ds(rng.normal(0, 3, (n, T)), rng.normal(0, 10, n), gamma, seed=seed)
    for rec in (rescale_reconstruct(ds), fusion_reconstruct(ds)):
        np.testing.assert_allclose(rec.returns(), ds.human_returns, atol=1e-9, rtol=0)
        assert np.all(rec.sum_residuals <= 1e-9)


def test_oracle_reconstruction():
    ds = sample_dataset(asymmetric_env(), Policy("uniform-random", 2), 10, 0)
    rec = oracle_reconstruct(ds)
    np.testing.assert_array_equal(rec.ihrs, ds.true_ihrs)
    assert np.all(rec.sum_residuals <= 1e-9)
    with pytest.raises(ValueError):
        oracle_reconstruct(ds.without_oracle())


def test_reconstructed_dataset_validation():
    ds = make_ds(np.zeros((2, 3)), [1.0, 2.0], 0.9)
    with pytest.raises(ValueError):
        ReconstructedDataset(ds, np.zeros((2, 4)), "rescale")
    with pytest.raises(ValueError):
        ReconstructedDataset(ds, np.zeros((2, 3)), "magic")


def test_sigma_defaults():
    g = np.array([1.0, 3.0])
    assert resolve_sigmas(RILRConfig(), g) == pytest.approx((0.1, 1.0))
    assert resolve_sigmas(RILRConfig(sigma_sum=0.5, sigma_reg=2.0), g) == (0.5, 2.0)
    assert return_scale([4.0, 4.0]) == 4.0 and return_scale([0.0]) == 1.0


def test_config_validation():
    for bad in ({"regularizer_weight": -1}, {"num_neighbors": 0}, {"sigma_sum": 0.0},
                {"cell_type": "rnn"}):
        with pytest.raises(ValueError):
            RILRConfig(**bad)


def test_objective_zero_and_quadratic_residual():
    sigma = 0.3
    out = np.array([[1.0, 2.0, 0.5]])
    g = out[0] @ discount_weights(3, 0.9)
    base = rilr_objective(out, [g], None, 0.9, 0.0, sigma, 1.0).item()
    assert base == pytest.approx(0.5 * np.log(2 * np.pi * sigma ** 2), abs=1e-14)
    for d in (0.1, -2.0, 5.0):
        val = rilr_objective(out, [g + d], None, 0.9, 0.0, sigma, 1.0).item()
        assert val - base == pytest.approx(d ** 2 / (2 * sigma ** 2), rel=1e-12)


def test_rilr_loss_with_model_and_no_regulariser():
    rng = np.random.default_rng(0)
    spec = HMDPSpec(state_dim=2, discount=0.8, horizon=4, num_actions=3)
    cfg = RILRConfig(regularizer_weight=0.0, hidden_size=4, sigma_sum=0.5)
    model = ReconstructorModel(spec, cfg, seed=1)
    tr = Trajectory(rng.standard_normal((5, 2)), [0, 2, 1, 1], rng.standard_normal(4), 2.0)
    out = model.forward(tr.states[None], tr.actions[None], tr.env_rewards[None], [2.0]).value[0]
    d = out @ discount_weights(4, 0.8) - 2.0
    loss = rilr_loss(model, tr, None).item()
    assert loss - 0.5 * np.log(2 * np.pi * 0.25) == pytest.approx(d * d / (2 * 0.25), rel=1e-10)
    with pytest.raises(ValueError):
        rilr_loss(model, tr, None, RILRConfig(regularizer_weight=1.0))


@pytest.mark.parametrize("cell", ["lstm", "gru"])
def test_rilr_loss_gradient(cell):
    rng = np.random.default_rng(3)
    spec = HMDPSpec(state_dim=2, discount=0.9, horizon=4, num_actions=2)
    cfg = RILRConfig(hidden_size=3, cell_type=cell, sigma_sum=0.4, sigma_reg=1.1)
    model = ReconstructorModel(spec, cfg, seed=2)
    model.return_mean, model.return_scale = 1.0, 2.0
    tr = Trajectory(rng.standard_normal((5, 2)), [0, 1, 1, 0], rng.standard_normal(4), 1.5)
    targets = rng.uniform(0, 0.5, (4, 3))
    assert fd_max_rel_error(lambda: rilr_loss(model, tr, targets), model.params) < 1e-4


@given(st.integers(0, 2 ** 31), st.integers(0, 3), st.floats(0.01, 5.0))
def test_regulariser_grows_away_from_targets(seed, t, step):
    rng = np.random.default_rng(seed)
    out = rng.normal(0, 1, (1, 4))
    y = rng.normal(0, 1, (1, 4, 3))

    def c_term(o):
        full = rilr_objective(o, [0.0], y, 0.9, 1.0, 1.0, 0.7).item()
        return full - rilr_objective(o, [0.0], None, 0.9, 0.0, 1.0, 0.7).item()

    above, below = out.copy(), out.copy()
    above[0, t] = y[0, t].max() + 0.01
    below[0, t] = y[0, t].min() - 0.01
    further_up, further_down = above.copy(), below.copy()
    further_up[0, t] += step
    further_down[0, t] -= step
    assert c_term(further_up) > c_term(above)
    assert c_term(further_down) > c_term(below)


def test_neighbor_targets_exclude_own_trajectory():
    # 3 trajectories, T = 2, 1-D latents; step 0 is never pooled
    z = np.array([[[100.0], [0.0], [1.0]],
                  [[-100.0], [0.1], [1.1]],
                  [[0.0], [5.0], [0.95]]])
    g = np.array([10.0, 20.0, 30.0])
    y = neighbor_targets(z, g, 0.5, K=1)
    assert y.shape == (3, 2, 1)
    # traj 0 step 0 queries z=0.0 -> nearest other entry is traj 1 step 1 (0.1)
    assert y[0, 0, 0] == 0.5 * 20.0
    # traj 0 step 1 (z=1.0) -> traj 2 step 2 (0.95)
    assert y[0, 1, 0] == 0.5 * 30.0
    assert y[2, 0, 0] == 0.5 * 20.0
    y_fin = neighbor_targets(z, g, 0.5, K=1, finite_horizon=True)
    np.testing.assert_allclose(y_fin, y / (1 - 0.25))


def _trained_vlmh(ds, seed=0, epochs=3):
    cfg = VLMHConfig(latent_dim=4, hidden_size=16, mlp_sizes=(32,), epochs=epochs)
    m, _ = train_vlmh(VLMHModel(ds.spec, cfg, seed=seed), ds, rng=seed)
    return m


def test_train_rilr_is_deterministic_and_loss_decreases():
    bench = make_benchmark_suite(0)[0]
    ds = sample_mixture_dataset(bench, 200, 0)
    vm = _trained_vlmh(ds)
    cfg = RILRConfig(hidden_size=8, epochs=8, seed=3)
    _, rec_a, log = train_rilr(ds, vm, cfg, rng=3)
    _, rec_b, _ = train_rilr(ds, vm, cfg, rng=3)
    np.testing.assert_array_equal(rec_a.ihrs, rec_b.ihrs)
    losses = [log.initial_loss] + log.epoch_losses
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert rec_a.method == "rilr" and rec_a.ihrs.shape == (200, ds.spec.horizon)


def test_regularizer_free_training_matches_sums():
    ds = sample_dataset(constant_ihr_env(1.0, horizon=5), Policy("uniform-random", 2), 200, 1)
    model = ReconstructorModel(ds.spec, RILRConfig(regularizer_weight=0.0, hidden_size=8, epochs=20))
    train_reconstructor(model, ds, None, rng=0)
    rec = ReconstructedDataset(ds, model.predict(ds), "rilr")
    assert np.median(rec.normalized_residuals()) <= 0.05


def test_reconstruction_file_round_trip(tmp_path):
    ds = sample_dataset(asymmetric_env(), Policy("uniform-random", 2), 6, 0, keep_oracle=False)
    rec = fusion_reconstruct(ds)
    save_reconstruction(rec, tmp_path / "d.jsonl", tmp_path / "r.jsonl")
    back = load_reconstruction(tmp_path / "d.jsonl", tmp_path / "r.jsonl")
    assert back.method == "fusion"
    np.testing.assert_array_equal(back.ihrs, rec.ihrs)
    np.testing.assert_array_equal(back.sum_residuals, rec.sum_residuals)
