"""Feature decoding and discrete volume rendering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .nn import Linear, Module
from .tensor import Tensor, as_tensor, cumsum_exclusive, exp, relu, sigmoid, softplus


class PointDecoder(Module):
    """Two-layer perceptron: tri-plane feature -> (rgb in [0,1], density >= 0)."""

    def __init__(self, in_dim: int, rng: np.random.Generator, hidden: int = 64):
        self.in_dim = in_dim
        self.l1 = Linear(in_dim, hidden, rng)
        self.l2 = Linear(hidden, 4, rng, gain=1.0)

    def __call__(self, feature: Tensor, extra: Tensor | None = None) -> tuple[Tensor, Tensor]:
        feature = as_tensor(feature)
        if feature.shape[-1] != self.in_dim:
            raise DimensionError(f"decoder expects {self.in_dim} features, got {feature.shape[-1]}")
        h = self.l1(feature)
        if extra is not None:
            h = h + extra
        o = self.l2(relu(h))
        return sigmoid(o[:, 1:4]), softplus(o[:, 0])


@dataclass
class RadianceSample:
    t: float
    color: tuple[float, float, float]
    sigma: float


@dataclass
class Composite:
    rgb: Tensor          # [R,3]
    weights: Tensor      # [R,S]
    opacity: Tensor      # [R]
    transmittance: Tensor  # [R,S]


def sample_spacing(t: np.ndarray, far: np.ndarray) -> np.ndarray:
    """Interval lengths: next depth minus this one, and ``far - t_last`` for the last."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(np.diff(t, axis=-1) <= 0):
        raise ContractError("sample depths must be strictly increasing")
    far = np.asarray(far, dtype=np.float64).reshape(t.shape[:-1] + (1,))
    return np.concatenate([np.diff(t, axis=-1), far - t[..., -1:]], axis=-1)


def composite(t: np.ndarray, far: np.ndarray, sigma: Tensor, color: Tensor,
              background: float | None = None) -> Composite:
    """Alpha compositing along rays: ``sigma`` [R,S], ``color`` [R,S,3]."""
    delta = sample_spacing(t, far).astype(sigma.dtype)
    tau = sigma * delta
    trans = exp(-cumsum_exclusive(tau, axis=1))
    alpha = 1.0 - exp(-tau)
    weights = trans * alpha
    rgb = (weights.reshape(weights.shape + (1,)) * color).sum(axis=1)
    opacity = weights.sum(axis=1)
    if background is not None:
        rgb = rgb + (1.0 - opacity).reshape(-1, 1) * background
    return Composite(rgb, weights, opacity, trans)


def integrate_ray(samples: list[RadianceSample], t_far: float) -> tuple[np.ndarray, np.ndarray]:
    """Composite a single ray given as a list of samples; returns (rgb, weights)."""
    t = np.array([[s.t for s in samples]])
    sigma = Tensor(np.array([[s.sigma for s in samples]], dtype=np.float64))
    color = Tensor(np.array([[s.color for s in samples]], dtype=np.float64))
    out = composite(t, np.array([t_far]), sigma, color)
    return out.rgb.data[0], out.weights.data[0]
