import numpy as np
import pytest
from hypothesis import settings

from opehf.core import HMDPSpec, Policy
from opehf.envs import TabularHMDP

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def fd_max_rel_error(loss_fn, params, h=1e-5, coords=None, rng=None, floor=1e-8):
    """Worst per-coordinate relative error between backprop and central differences.

    ``loss_fn`` rebuilds the graph from ``params`` and returns a scalar Tensor.
    ``coords`` limits the check to that many random coordinates per tensor.
    """
    from opehf.diff import backward
    loss = loss_fn()
    params.zero_grad()
    backward(loss)
    analytic = params.grads()
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for name, t in params.items():
        idxs = list(np.ndindex(t.value.shape))
        if coords is not None and len(idxs) > coords:
            idxs = [idxs[i] for i in rng.choice(len(idxs), coords, replace=False)]
        for idx in idxs:
            base = t.value.copy()
            bumped = base.copy()
            bumped[idx] += h
            t.value = bumped
            up = loss_fn().item()
            bumped = base.copy()
            bumped[idx] -= h
            t.value = bumped
            down = loss_fn().item()
            t.value = base
            fd = (up - down) / (2 * h)
            a = float(analytic[name][idx])
            err = abs(fd - a) / max(abs(fd), abs(a), floor)
            worst = max(worst, err)
    return worst


def one_state_env(mu=2.0, sd=0.0, reward=1.0, discount=0.5, horizon=2):
    return TabularHMDP(np.ones((1, 1, 1)), [[reward]], [[mu]], [[sd]], [1.0], discount, horizon,
                       "one-state")


def asymmetric_env(horizon=4):
    """3 states, 2 actions, asymmetric IHR means; small enough for path enumeration."""
    P = np.array([
        [[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]],
        [[0.3, 0.3, 0.4], [0.5, 0.0, 0.5]],
        [[0.0, 0.9, 0.1], [0.25, 0.25, 0.5]],
    ])
    R = np.array([[0.1, 0.9], [0.5, 0.2], [0.0, 1.0]])
    mu = np.array([[0.2, 1.5], [0.8, 0.1], [2.0, 0.4]])
    sd = np.array([[0.1, 0.3], [0.2, 0.0], [0.5, 0.1]])
    return TabularHMDP(P, R, mu, sd, [0.5, 0.3, 0.2], 0.8, horizon, "asym")


@pytest.fixture
def tiny_spec():
    return HMDPSpec(state_dim=3, discount=0.9, horizon=4, env_id="t", num_actions=2, num_states=3)


@pytest.fixture
def uniform2():
    return Policy("uniform-random", 2)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
