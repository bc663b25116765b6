"""Inner-face masking and the coarse-to-fine super-resolution module."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .errors import ContractError, DimensionError
from .geometry import Intrinsics, Pose, project
from .nn import Conv2d, Module
from .tensor import Tensor, as_tensor, concat, log, relu, sigmoid


def projected_sphere_mask(center, radius: float, pose: Pose, k: Intrinsics) -> np.ndarray:
    """Binary [H,W] disk covering the projection of a sphere (pixel centers inside)."""
    center = np.asarray(center, dtype=np.float64)
    d = np.linalg.norm(center - pose.translation)
    if d <= radius:
        raise ContractError("camera is inside the head sphere")
    cu, cv = project(pose, k, center)
    rho = k.focal * radius / np.sqrt(d * d - radius * radius)
    v, u = np.mgrid[0:k.height, 0:k.width]
    mask = (u + 0.5 - cu) ** 2 + (v + 0.5 - cv) ** 2 <= rho * rho
    if not mask.any():
        raise ContractError("head projects entirely outside the frame; mask is empty")
    return mask


def face_mask(identity, pose: Pose, k: Intrinsics) -> np.ndarray:
    """Inner-face mask for a synthetic identity (head sphere at the origin)."""
    return projected_sphere_mask(np.zeros(3), identity.radius, pose, k)


class SuperResolver(Module):
    """x2 refinement of the coarse face, completed with the full source frame.

    The base image is the duplicated coarse face inside the mask and the
    source frame outside it. A residual conv branch (zero-initialised output
    layer) corrects it in logit space, so a fresh module returns the base.
    """

    EPS = 1e-6

    def __init__(self, rng: np.random.Generator, channels: int = 16):
        self.conv_in = Conv2d(6, channels, 3, rng)
        self.src_in = Conv2d(3, channels, 3, rng)
        self.blocks = [(Conv2d(2 * channels, 2 * channels, 3, rng), Conv2d(2 * channels, 2 * channels, 3, rng, gain=0.5))
                       for _ in range(2)]
        self.conv_out = Conv2d(2 * channels, 3, 3, rng)
        self.conv_out.weight.data[...] = 0

    def base(self, coarse: Tensor, source_full, mask: np.ndarray) -> Tensor:
        coarse = as_tensor(coarse)
        source_full = as_tensor(source_full)
        c, h, w = coarse.shape
        if source_full.shape != (3, 2 * h, 2 * w) or np.shape(mask) != (2 * h, 2 * w) or c != 3:
            raise DimensionError(f"super_resolve: coarse {coarse.shape}, source {source_full.shape}, "
                                 f"mask {np.shape(mask)} are inconsistent")
        m = np.asarray(mask, dtype=coarse.dtype)
        return F.upsample_nearest(coarse, 2) * m + source_full * (1.0 - m)

    def __call__(self, coarse: Tensor, source_full, mask: np.ndarray) -> Tensor:
        coarse, source_full = as_tensor(coarse), as_tensor(source_full)
        base = self.base(coarse, source_full, mask)
        up = F.upsample_nearest(coarse, 2)
        x = concat([relu(self.conv_in(concat([up, source_full], axis=0))),
                    relu(self.src_in(source_full))], axis=0)
        for conv_a, conv_b in self.blocks:
            x = x + conv_b(relu(conv_a(x)))
        residual = self.conv_out(relu(x))
        b = base * (1.0 - 2 * self.EPS) + self.EPS
        return sigmoid(log(b) - log(1.0 - b) + residual)


def super_resolve(module: SuperResolver, coarse, source_full, mask) -> Tensor:
    return module(coarse, source_full, mask)
