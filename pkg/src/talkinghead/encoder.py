"""Hierarchical appearance encoder and multi-scale tri-plane lookup.

A source image goes through four stride-2 conv blocks (pyramid levels
D0..D3). Levels are fused top-down; the coarsest level passes through and
every finer level is a 1x1 reduction of ``[up(F_{i+1}), D_i]``. Each fused
level is split channel-wise into three planes (xy, yz, xz).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .geometry import Pose
from .nn import Conv2d, Module
from .tensor import Tensor, as_tensor, concat, relu

N_LEVELS = 4

# plane name -> (row axis, row sign, col axis); rows grow with -y so the xy
# plane lines up with the image the features were computed from
PLANE_AXES = {"xy": (1, -1.0, 0), "yz": (1, -1.0, 2), "xz": (2, 1.0, 0)}
PLANE_ORDER = ("xy", "yz", "xz")


class AppearanceEncoder(Module):
    def __init__(self, rng: np.random.Generator, plane_channels: int = 12, pyramid_channels: int = 36):
        top = 3 * plane_channels
        widths = [pyramid_channels] * (N_LEVELS - 1) + [top]
        self.plane_channels = plane_channels
        self.down = []
        c_in = 3
        for c_out in widths:
            self.down.append(Conv2d(c_in, c_out, 3, rng, stride=2, pad=1))
            c_in = c_out
        self.up = [Conv2d(top, top, 3, rng) for _ in range(N_LEVELS - 1)]
        self.reduce = [Conv2d(top + widths[i], top, 1, rng, gain=1.0) for i in range(N_LEVELS - 1)]

    def encode_pyramid(self, image) -> list[Tensor]:
        image = as_tensor(image)
        if image.ndim != 3 or image.shape[0] != 3:
            raise DimensionError(f"source image must be [3,H,W], got {image.shape}")
        h, w = image.shape[1:]
        if h % 16 or w % 16:
            raise DimensionError(f"source extents {h}x{w} must be divisible by 16")
        levels, x = [], image
        for block in self.down:
            x = relu(block(x))
            levels.append(x)
        return levels

    def fuse_fpn(self, pyramid: list[Tensor]) -> list[Tensor]:
        fused = [None] * N_LEVELS
        fused[-1] = pyramid[-1]
        for i in range(N_LEVELS - 2, -1, -1):
            up = self.up[i](F.upsample_nearest(fused[i + 1], 2))
            fused[i] = self.reduce[i](concat([up, pyramid[i]], axis=0))
        for i, level in enumerate(fused):
            if level.shape[0] % 3:
                raise ConfigError(f"fused level {i} has {level.shape[0]} channels, not divisible by 3")
        return fused

    def __call__(self, image) -> list[Tensor]:
        return self.fuse_fpn(self.encode_pyramid(image))


encode_pyramid = AppearanceEncoder.encode_pyramid
fuse_fpn = AppearanceEncoder.fuse_fpn


@dataclass
class TriPlaneSet:
    """Per level, the (xy, yz, xz) planes; ``center``/``bound`` place the unit cube."""

    levels: list[tuple[Tensor, Tensor, Tensor]]
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bound: float = 1.0

    @property
    def feature_dim(self) -> int:
        return sum(level[0].shape[0] for level in self.levels)


def split_triplane(fused: list[Tensor], center=(0.0, 0.0, 0.0), bound: float = 1.0) -> TriPlaneSet:
    levels = []
    for i, f in enumerate(fused):
        c = f.shape[0]
        if c % 3:
            raise ConfigError(f"level {i}: {c} channels cannot be split into three planes")
        k = c // 3
        levels.append((f[0:k], f[k:2 * k], f[2 * k:3 * k]))
    return TriPlaneSet(levels, np.asarray(center, dtype=np.float64), float(bound))


def plane_coords_map(plane: str, height: int, width: int):
    """Affine map (A [3,2], b [2]) from cube coordinates in [-1,1]^3 to (row, col)."""
    row_axis, row_sign, col_axis = PLANE_AXES[plane]
    a = np.zeros((3, 2))
    a[row_axis, 0] = row_sign * (height - 1) / 2.0
    a[col_axis, 1] = (width - 1) / 2.0
    b = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
    return a, b


def to_source_frame(x: Tensor, source_pose: Pose) -> Tensor:
    """Inv(P_src) . x for row-stacked points; differentiable in ``x``."""
    r = source_pose.rotation
    t = source_pose.translation
    # R^T (x - T) in row form is (x - T) R
    return (x - t.astype(x.dtype)) @ r.astype(x.dtype)


def sample_triplane(tp: TriPlaneSet, source_pose: Pose, x) -> Tensor:
    """Multi-scale tri-plane feature [N, sum C_i'] for points ``x`` [N,3]."""
    x = as_tensor(x)
    q = to_source_frame(x, source_pose)
    s = (q - tp.center.astype(q.dtype)) * (1.0 / tp.bound)
    per_level = []
    for planes in tp.levels:
        total = None
        for name, plane in zip(PLANE_ORDER, planes):
            a, b = plane_coords_map(name, plane.shape[1], plane.shape[2])
            coords = s @ a.astype(s.dtype) + b.astype(s.dtype)
            feat = F.grid_sample_bilinear(plane, coords)
            total = feat if total is None else total + feat
        per_level.append(total)
    return concat(per_level, axis=1)
