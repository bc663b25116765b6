"""Audio-conditioned deformation of ray sample points.

The fused appearance levels are resized to a common ``G x G`` grid and
summarised with slot attention into one embedding per grid site. Audio
tokens from a small 1-D conv net act as keys/values for a multi-head cross
attention whose output (one row per site) is both a diagnostic heatmap and
a spatial prior for the per-point deformation network.
"""
from __future__ import annotations

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .geometry import Intrinsics, Pose, project
from .nn import Conv1d, Linear, Module
from .tensor import Parameter, Tensor, as_tensor, concat, get_default_dtype, relu, sigmoid, softmax, sqrt


def resize_to_grid(level: Tensor, grid: int) -> Tensor:
    size = level.shape[-1]
    if size > grid:
        return F.avg_pool2d(level, size // grid)
    if size < grid:
        return F.upsample_nearest(level, grid // size)
    return level


class SlotAggregator(Module):
    """Slot attention over the flattened multi-scale grid.

    Each site's output mixes the final slots by its assignment weights and
    adds a linear projection of the site's own input features.
    """

    def __init__(self, in_dim: int, rng: np.random.Generator, n_slots: int = 8,
                 slot_dim: int = 32, iters: int = 3, grid: int = 16):
        self.grid = grid
        self.iters = iters
        self.slot_dim = slot_dim
        self.to_k = Linear(in_dim, slot_dim, rng, bias=False, gain=1.0)
        self.to_v = Linear(in_dim, slot_dim, rng, bias=False, gain=1.0)
        self.to_q = Linear(slot_dim, slot_dim, rng, bias=False, gain=1.0)
        self.to_site = Linear(in_dim, slot_dim, rng, gain=1.0)
        self.update = Linear(slot_dim, slot_dim, rng, gain=1.0)
        self.mlp_in = Linear(slot_dim, 2 * slot_dim, rng)
        self.mlp_out = Linear(2 * slot_dim, slot_dim, rng, gain=1.0)
        # learned initial slots; named as a bias so zero_biases() clears it
        self.slot_bias = Parameter(rng.normal(0, slot_dim ** -0.5, (n_slots, slot_dim)).astype(get_default_dtype()))

    def flatten_levels(self, levels: list[Tensor]) -> Tensor:
        grid = concat([resize_to_grid(f, self.grid) for f in levels], axis=0)
        c = grid.shape[0]
        return grid.reshape(c, self.grid * self.grid).T

    def _assign(self, k: Tensor, slots: Tensor) -> Tensor:
        logits = (k @ self.to_q(slots).T) * (self.slot_dim ** -0.5)
        return softmax(logits, axis=1)

    def __call__(self, levels: list[Tensor]) -> Tensor:
        x = self.flatten_levels(levels)
        k, v = self.to_k(x), self.to_v(x)
        slots = self.slot_bias
        for _ in range(self.iters):
            attn = self._assign(k, slots)
            weights = attn / (attn.sum(axis=0, keepdims=True) + 1e-8)
            slots = slots + self.update(weights.T @ v)
            slots = slots + self.mlp_out(relu(self.mlp_in(slots)))
        return self._assign(k, slots) @ slots + self.to_site(x)


class AudioEncoder(Module):
    """Two stride-2 1-D convolutions: window of ``w`` samples -> ``w/4`` tokens."""

    def __init__(self, rng: np.random.Generator, window: int = 64, dim: int = 32, hidden: int = 16):
        self.window = window
        self.conv1 = Conv1d(1, hidden, 5, rng, stride=2, pad=2)
        self.conv2 = Conv1d(hidden, dim, 5, rng, stride=2, pad=2, gain=1.0)

    @property
    def n_tokens(self) -> int:
        return self.window // 4

    def __call__(self, window) -> Tensor:
        window = as_tensor(window)
        if window.ndim != 1 or window.shape[0] != self.window:
            raise DimensionError(f"audio window must have {self.window} samples, got {window.shape}")
        h = relu(self.conv1(window.reshape(1, self.window)))
        return self.conv2(h).T


class CrossAttention(Module):
    """Multi-head attention with face sites as queries and audio tokens as keys/values."""

    def __init__(self, query_dim: int, audio_dim: int, rng: np.random.Generator,
                 dim: int = 32, heads: int = 4):
        if dim % heads:
            raise ConfigError(f"attention dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.wq = Parameter(rng.normal(0, query_dim ** -0.5, (query_dim, dim)).astype(get_default_dtype()))
        self.wk = Parameter(rng.normal(0, audio_dim ** -0.5, (audio_dim, dim)).astype(get_default_dtype()))
        self.wv = Parameter(rng.normal(0, audio_dim ** -0.5, (audio_dim, dim)).astype(get_default_dtype()))

    def attention(self, faces: Tensor, audio: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (output [N,dim], weights [heads,N,L])."""
        h, dh = self.heads, self.dim // self.heads
        n, length = faces.shape[0], audio.shape[0]
        q = (faces @ self.wq).reshape(n, h, dh).transpose(1, 0, 2)
        k = (audio @ self.wk).reshape(length, h, dh).transpose(1, 2, 0)
        v = (audio @ self.wv).reshape(length, h, dh).transpose(1, 0, 2)
        weights = softmax((q @ k) * (dh ** -0.5), axis=-1)
        out = (weights @ v).transpose(1, 0, 2).reshape(n, self.dim)
        return out, weights

    def __call__(self, faces: Tensor, audio: Tensor) -> Tensor:
        return self.attention(faces, audio)[0]


def attention_heatmap(f_cm, grid: int | None = None) -> np.ndarray:
    """Channel mean per site, min-max normalised to [0,1], as a ``grid x grid`` image.

    A constant input maps to a uniform 0.5 image.
    """
    data = np.asarray(f_cm.data if isinstance(f_cm, Tensor) else f_cm, dtype=np.float64)
    grid = grid or int(round(np.sqrt(data.shape[0])))
    if grid * grid != data.shape[0]:
        raise DimensionError(f"{data.shape[0]} rows do not form a square grid")
    m = data.mean(axis=1)
    lo, hi = m.min(), m.max()
    if not hi - lo > 1e-12 * max(1.0, abs(hi)):
        return np.full((grid, grid), 0.5)
    return ((m - lo) / (hi - lo)).reshape(grid, grid)


def positional_encoding(x: np.ndarray, octaves: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for k in range(octaves):
        w = (2.0 ** k) * np.pi
        parts += [np.sin(w * x), np.cos(w * x)]
    return np.concatenate(parts, axis=-1)


def grid_coordinates(points: np.ndarray, target_pose: Pose, k: Intrinsics, grid: int) -> np.ndarray:
    """(row, col) on the ``grid x grid`` site lattice where ``points`` project in the target view."""
    uv = project(target_pose, k, points)
    col = uv[..., 0] / k.width * grid - 0.5
    row = uv[..., 1] / k.height * grid - 0.5
    return np.stack([row, col], axis=-1)


class DeformationField(Module):
    """Per-point displacement from positional code, audio tokens and the sampled prior.

    The MLP only picks a direction; the length is ``delta_max`` times an
    importance gate, the sigmoid of the channel mean of the attention output
    at the point's site. The attention map therefore reads directly as how
    far each site moves, and regions it marks as unrelated to speech stay
    still.
    """

    direction_eps = 0.01

    def __init__(self, rng: np.random.Generator, n_tokens: int, audio_dim: int, prior_dim: int,
                 hidden: int = 64, octaves: int = 4, delta_max: float = 0.15):
        self.octaves = octaves
        self.delta_max = delta_max
        pe_dim = 3 * (1 + 2 * octaves)
        self.point_in = Linear(pe_dim, hidden, rng)
        self.audio_in = Linear(n_tokens * audio_dim, hidden, rng, bias=False, gain=1.0)
        self.prior_in = Linear(prior_dim, hidden, rng, bias=False, gain=1.0)
        self.hidden = Linear(hidden, hidden, rng)
        self.out = Linear(hidden, 3, rng, gain=0.1)

    def __call__(self, points: np.ndarray, grid_rc: np.ndarray, audio: Tensor, prior: Tensor,
                 grid: int) -> Tensor:
        dtype = get_default_dtype()
        pe = Tensor(positional_encoding(points, self.octaves).astype(dtype))
        site = F.grid_sample_bilinear(prior.T.reshape(prior.shape[1], grid, grid),
                                      Tensor(grid_rc.astype(dtype)))
        h = self.point_in(pe) + self.prior_in(site) + self.audio_in(audio.reshape(1, -1))
        h = relu(self.hidden(relu(h)))
        gate = sigmoid(site.mean(axis=1, keepdims=True))
        v = self.out(h)
        # soft unit vector: zero at v = 0, length below 1, Lipschitz 1/eps
        unit = v / sqrt((v * v).sum(axis=1, keepdims=True) + self.direction_eps ** 2)
        return unit * gate * self.delta_max
