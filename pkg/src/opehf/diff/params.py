"""Named parameter storage, the Adam update and checkpoint files."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .tensor import Tensor, parameter

CHECKPOINT_FORMAT_VERSION = 1


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or inf; the optimizer step was not applied."""


class ParameterSet:
    """Ordered collection of named trainable tensors plus Adam state.

    ``decay`` marks the tensors that receive L2 weight decay (hidden-layer
    weights).
    """

    def __init__(self):
        self.tensors: Dict[str, Tensor] = {}
        self.decay: Dict[str, bool] = {}
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value, decay: bool = False) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = parameter(value, name)
        self.tensors[name] = t
        self.decay[name] = decay
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def num_values(self) -> int:
        return sum(t.value.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        return {k: (np.zeros_like(t.value) if t.grad is None else t.grad)
                for k, t in self.tensors.items()}

    def snapshot(self) -> Dict[str, np.ndarray]:
        """Immutable copy of the current values."""
        out = {}
        for k, t in self.tensors.items():
            a = t.value.copy()
            a.setflags(write=False)
            out[k] = a
        return out

    def load(self, values: Dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(values)
        if missing:
            raise KeyError(f"snapshot lacks parameters {sorted(missing)}")
        for k, t in self.tensors.items():
            v = np.asarray(values[k], dtype=float)
            if v.shape != t.value.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {t.value.shape}")
            t.value = v.copy()

    def reset_optimizer(self) -> None:
        self.m.clear()
        self.v.clear()
        self.step_count = 0

    def flat(self) -> np.ndarray:
        return np.concatenate([t.value.ravel() for t in self.tensors.values()])


def adam_step(params: ParameterSet, grads: Dict[str, np.ndarray], lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> ParameterSet:
    """One bias-corrected Adam update, in place.

    ``weight_decay`` adds ``weight_decay * w`` to the gradient of every tensor
    flagged for decay. Any non-finite gradient rejects the whole step.
    """
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient for {bad}")
    b1, b2 = betas
    params.step_count += 1
    t = params.step_count
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params.tensors[name]
        if weight_decay and params.decay.get(name, False):
            g = g + weight_decay * p.value
        m = params.m.get(name)
        v = params.v.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        params.m[name], params.v[name] = m, v
        p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


class Adam:
    """Adam with exponential learning-rate decay applied every iteration."""

    def __init__(self, params: ParameterSet, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, lr_decay: float = 1.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_decay = lr_decay

    @property
    def current_lr(self) -> float:
        return self.lr * self.lr_decay ** self.params.step_count

    def step(self) -> None:
        adam_step(self.params, self.params.grads(), self.current_lr, self.betas, self.eps,
                  self.weight_decay)


def save_checkpoint(params: ParameterSet, path, metadata: Optional[dict] = None) -> None:
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "tensors": {k: {"shape": list(t.value.shape), "data": t.value.ravel().tolist()}
                    for k, t in params.items()},
        "metadata": metadata or {},
    }
    Path(path).write_text(json.dumps(doc))


def read_checkpoint(path):
    """Return (name -> array, metadata)."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    values = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"])
              for k, v in doc["tensors"].items()}
    return values, doc.get("metadata", {})


def load_checkpoint(params: ParameterSet, path) -> dict:
    values, meta = read_checkpoint(path)
    params.load(values)
    return meta
