"""Feed-forward and gated recurrent blocks registered into a :class:`ParameterSet`."""
from __future__ import annotations

from typing import List, Sequence

import numpy as np

from . import tensor as F
from .params import ParameterSet
from .tensor import Tensor

STD_FLOOR = 1e-3


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Linear:
    def __init__(self, params: ParameterSet, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator, decay: bool = False, zero: bool = False):
        w = np.zeros((n_in, n_out)) if zero else glorot(rng, n_in, n_out)
        self.W = params.add(f"{name}.W", w, decay=decay)
        self.b = params.add(f"{name}.b", np.zeros(n_out))
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x) -> Tensor:
        return F.matmul(x, self.W) + self.b


class MLP:
    """Stack of tanh hidden layers; output is the last hidden activation."""

    def __init__(self, params: ParameterSet, name: str, n_in: int, hidden: Sequence[int],
                 rng: np.random.Generator):
        self.layers = []
        prev = n_in
        for i, h in enumerate(hidden):
            self.layers.append(Linear(params, f"{name}.{i}", prev, h, rng, decay=True))
            prev = h
        self.n_out = prev

    def __call__(self, x) -> Tensor:
        for layer in self.layers:
            x = F.tanh(layer(x))
        return x


class DiagGaussianHead:
    """Mean and std outputs; std = softplus(raw) + STD_FLOOR."""

    def __init__(self, params: ParameterSet, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator, zero: bool = False):
        self.mean = Linear(params, f"{name}.mean", n_in, n_out, rng, zero=zero)
        self.raw_std = Linear(params, f"{name}.std", n_in, n_out, rng, zero=zero)

    def __call__(self, x):
        return self.mean(x), F.softplus(self.raw_std(x)) + STD_FLOOR


class GRUCell:
    """Gated recurrent unit (update / reset gates, candidate state)."""

    def __init__(self, params: ParameterSet, name: str, n_in: int, n_hidden: int,
                 rng: np.random.Generator):
        H = n_hidden
        self.Wx = params.add(f"{name}.Wx", glorot(rng, n_in, 3 * H))
        self.Wh = params.add(f"{name}.Wh", glorot(rng, H, 3 * H))
        self.b = params.add(f"{name}.b", np.zeros(3 * H))
        self.n_in, self.n_hidden = n_in, H

    def initial_state(self, batch: int):
        return Tensor(np.zeros((batch, self.n_hidden)))

    def __call__(self, x, h):
        H = self.n_hidden
        gx = F.matmul(x, self.Wx) + self.b
        gh = F.matmul(h, self.Wh)
        z = F.sigmoid(gx[:, :H] + gh[:, :H])
        r = F.sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
        n = F.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
        return (1.0 - z) * n + z * h

    @staticmethod
    def output(state):
        return state


class LSTMCell:
    """Long short-term memory cell; forget-gate bias starts at +1."""

    def __init__(self, params: ParameterSet, name: str, n_in: int, n_hidden: int,
                 rng: np.random.Generator):
        H = n_hidden
        self.Wx = params.add(f"{name}.Wx", glorot(rng, n_in, 4 * H))
        self.Wh = params.add(f"{name}.Wh", glorot(rng, H, 4 * H))
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0
        self.b = params.add(f"{name}.b", b)
        self.n_in, self.n_hidden = n_in, H

    def initial_state(self, batch: int):
        z = np.zeros((batch, self.n_hidden))
        return (Tensor(z), Tensor(z))

    def __call__(self, x, state):
        h, c = state
        H = self.n_hidden
        g = F.matmul(x, self.Wx) + F.matmul(h, self.Wh) + self.b
        i = F.sigmoid(g[:, :H])
        f = F.sigmoid(g[:, H:2 * H])
        o = F.sigmoid(g[:, 2 * H:3 * H])
        u = F.tanh(g[:, 3 * H:])
        c_new = f * c + i * u
        return (o * F.tanh(c_new), c_new)

    @staticmethod
    def output(state):
        return state[0]


def make_cell(kind: str, params: ParameterSet, name: str, n_in: int, n_hidden: int,
              rng: np.random.Generator):
    if kind in ("gru", "gru-style"):
        return GRUCell(params, name, n_in, n_hidden, rng)
    if kind in ("lstm", "lstm-style"):
        return LSTMCell(params, name, n_in, n_hidden, rng)
    raise ValueError(f"unknown cell type {kind!r}")


def _check_inputs(cell, inputs):
    for t, x in enumerate(inputs):
        if x.shape[-1] != cell.n_in:
            raise ValueError(f"input at step {t} has width {x.shape[-1]}, cell expects {cell.n_in}")


def recurrent_forward(cell, inputs: Sequence, initial=None) -> List[Tensor]:
    """Unroll ``cell`` over a list of (batch, n_in) inputs; returns hidden outputs."""
    inputs = [F.as_tensor(x) for x in inputs]
    _check_inputs(cell, inputs)
    state = cell.initial_state(inputs[0].shape[0]) if initial is None else initial
    outs = []
    for x in inputs:
        state = cell(x, state)
        outs.append(cell.output(state))
    return outs


def bidirectional_forward(forward_cell, backward_cell, inputs: Sequence) -> List[Tensor]:
    """Concatenate forward and time-reversed hidden states at every step."""
    inputs = [F.as_tensor(x) for x in inputs]
    fwd = recurrent_forward(forward_cell, inputs)
    bwd = recurrent_forward(backward_cell, inputs[::-1])[::-1]
    return [F.concat([f, b], axis=-1) for f, b in zip(fwd, bwd)]
