"""Adaptive-moment optimiser over named parameters."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Parameter, Tensor


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam. A parameter whose gradient is exactly zero is skipped
    (moments and value untouched), so a zero-gradient step is a no-op."""

    def __init__(self, params: Mapping[str, Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.state = OptimizerState(lr, beta1, beta2, eps)

    def step(self, grads: Mapping[str, Tensor | np.ndarray]) -> None:
        s = self.state
        s.step += 1
        for name, p in self.params.items():
            if not p.trainable or name not in grads:
                continue
            g = grads[name]
            g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)
            if not np.any(g):
                continue
            m = s.m.get(name, np.zeros(p.shape))
            v = s.v.get(name, np.zeros(p.shape))
            k = s.counts.get(name, 0) + 1
            m = s.beta1 * m + (1 - s.beta1) * g
            v = s.beta2 * v + (1 - s.beta2) * g * g
            s.m[name], s.v[name], s.counts[name] = m, v, k
            mhat = m / (1 - s.beta1 ** k)
            vhat = v / (1 - s.beta2 ** k)
            p.data = (p.data - s.lr * mhat / (np.sqrt(vhat) + s.eps)).astype(p.dtype)

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        s = self.state
        out = {f"{prefix}step": np.array([s.step], dtype=np.float64)}
        for name in s.m:
            out[f"{prefix}m.{name}"] = s.m[name]
            out[f"{prefix}v.{name}"] = s.v[name]
            out[f"{prefix}n.{name}"] = np.array([s.counts[name]], dtype=np.float64)
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray], prefix: str = "") -> None:
        s = self.state
        s.step = int(state[f"{prefix}step"][0])
        s.m, s.v, s.counts = {}, {}, {}
        for key, value in state.items():
            if not key.startswith(prefix):
                continue
            rest = key[len(prefix):]
            kind, _, name = rest.partition(".")
            if kind == "m":
                s.m[name] = np.asarray(value, dtype=np.float64)
            elif kind == "v":
                s.v[name] = np.asarray(value, dtype=np.float64)
            elif kind == "n":
                s.counts[name] = int(value[0])
