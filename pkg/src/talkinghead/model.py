"""The full generator: source image + driving audio + target pose -> frame."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .config import Config
from .deformation import (AudioEncoder, CrossAttention, DeformationField, SlotAggregator,
                          attention_heatmap, grid_coordinates)
from .encoder import AppearanceEncoder, TriPlaneSet, sample_triplane, split_triplane
from .geometry import Intrinsics, Pose, Rays, cube_bounds, generate_rays, pixel_centers, stratified_sample
from .nn import Linear, Module
from .refiner import SuperResolver
from .renderer import Composite, PointDecoder, composite
from .tensor import Tensor, as_tensor, get_default_dtype, no_grad


@dataclass
class SourceContext:
    """Everything derived from the single source frame for one forward pass."""

    triplanes: TriPlaneSet
    f_agg: Tensor
    source_full: Tensor
    source_pose: Pose


@dataclass
class FrameContext:
    audio_tokens: Tensor
    f_cm: Tensor


@dataclass
class RayRender:
    composite: Composite
    delta: Tensor | None   # [R*S,3] or None when deformation is disabled
    points: np.ndarray     # [R,S,3] undeformed sample points


class TalkingHeadModel(Module):
    def __init__(self, cfg: Config, seed: int | None = None):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed if seed is None else seed, 1])
        self.encoder = AppearanceEncoder(rng, cfg.plane_channels, cfg.pyramid_channels)
        fused_channels = 4 * 3 * cfg.plane_channels
        self.slots = SlotAggregator(fused_channels, rng, cfg.n_slots, cfg.slot_dim, cfg.slot_iters, cfg.grid_size)
        self.audio = AudioEncoder(rng, cfg.audio_window, cfg.audio_dim)
        self.attention = CrossAttention(cfg.slot_dim, cfg.audio_dim, rng, cfg.attn_dim, cfg.heads)
        self.deform = DeformationField(rng, self.audio.n_tokens, cfg.audio_dim, cfg.attn_dim,
                                       cfg.deform_hidden, cfg.pe_octaves, cfg.delta_max)
        self.decoder = PointDecoder(4 * cfg.plane_channels, rng, cfg.decoder_hidden)
        self.decoder_audio = (Linear(self.audio.n_tokens * cfg.audio_dim, cfg.decoder_hidden, rng, bias=False, gain=1.0)
                              if cfg.decoder_audio else None)
        self.refiner = SuperResolver(rng, cfg.sr_channels)

    # -- intrinsics ---------------------------------------------------------
    @property
    def coarse_k(self) -> Intrinsics:
        return Intrinsics.default(self.cfg.coarse_size)

    @property
    def fine_k(self) -> Intrinsics:
        return Intrinsics.default(2 * self.cfg.coarse_size)

    # -- conditioning -------------------------------------------------------
    def prepare(self, source_full, source_pose: Pose) -> SourceContext:
        """Encode the full-resolution source frame (downsampled to the encoder size)."""
        src = as_tensor(np.asarray(source_full, dtype=get_default_dtype()))
        factor = src.shape[-1] // self.cfg.source_size
        small = F.avg_pool2d(src, factor) if factor > 1 else src
        fused = self.encoder(small)
        center = source_pose.inverse().apply(np.zeros(3))
        tp = split_triplane(fused, center=center, bound=self.cfg.scene_bound)
        return SourceContext(tp, self.slots(fused), src, source_pose)

    def frame(self, ctx: SourceContext, audio_window) -> FrameContext:
        window = np.asarray(audio_window, dtype=get_default_dtype())
        tokens = self.audio(window)
        return FrameContext(tokens, self.attention(ctx.f_agg, tokens))

    # -- rendering ----------------------------------------------------------
    def rays(self, target_pose: Pose, pixels, k: Intrinsics | None = None) -> Rays:
        k = k or self.coarse_k
        r = generate_rays(target_pose, k, pixels)
        r.near, r.far = cube_bounds(r.origins, r.directions, self.cfg.scene_bound)
        return r

    def render_rays(self, ctx: SourceContext, fctx: FrameContext, rays: Rays, target_pose: Pose,
                    rng: np.random.Generator | int | None = None) -> RayRender:
        cfg = self.cfg
        dtype = get_default_dtype()
        t, pts = stratified_sample(rays, cfg.n_samples, jitter=rng is not None, seed=0 if rng is None else rng)
        n_rays, n_s = t.shape
        flat = pts.reshape(-1, 3)
        x = Tensor(flat.astype(dtype))
        delta = None
        if cfg.deform_enabled:
            grid_rc = grid_coordinates(flat, target_pose, self.coarse_k, cfg.grid_size)
            delta = self.deform(flat, grid_rc, fctx.audio_tokens, fctx.f_cm, cfg.grid_size)
            x = x + delta
        feat = sample_triplane(ctx.triplanes, ctx.source_pose, x)
        extra = None
        if self.decoder_audio is not None:
            extra = self.decoder_audio(fctx.audio_tokens.reshape(1, -1))
        rgb, sigma = self.decoder(feat, extra)
        comp = composite(t, rays.far, sigma.reshape(n_rays, n_s), rgb.reshape(n_rays, n_s, 3),
                         background=cfg.background)
        return RayRender(comp, delta, pts)

    def render_pixels(self, ctx, fctx, target_pose: Pose, pixels, rng=None, k: Intrinsics | None = None) -> RayRender:
        return self.render_rays(ctx, fctx, self.rays(target_pose, pixels, k), target_pose, rng)

    def render_coarse(self, ctx: SourceContext, fctx: FrameContext, target_pose: Pose,
                      seed: int | None = None) -> tuple[Tensor, Tensor]:
        """Whole coarse frame [3,Hc,Wc] and its opacity map [Hc,Wc]."""
        k = self.coarse_k
        rng = None if seed is None else np.random.default_rng(seed)
        out = self.render_pixels(ctx, fctx, target_pose, pixel_centers(k), rng)
        img = out.composite.rgb.T.reshape(3, k.height, k.width)
        return img, out.composite.opacity.reshape(k.height, k.width)

    def render_fine(self, ctx: SourceContext, fctx: FrameContext, target_pose: Pose, mask_fine,
                    seed: int | None = None) -> tuple[Tensor, Tensor]:
        """(fine frame [3,2Hc,2Wc], coarse frame)."""
        coarse, _ = self.render_coarse(ctx, fctx, target_pose, seed)
        return self.refiner(coarse, ctx.source_full, mask_fine), coarse

    def heatmap(self, fctx: FrameContext) -> np.ndarray:
        return attention_heatmap(fctx.f_cm, self.cfg.grid_size)


def render_frame(model: TalkingHeadModel, source_full, source_pose: Pose, audio_window,
                 target_pose: Pose, mask_fine) -> np.ndarray:
    """Inference helper: fine frame as a float64 [3,H,W] array."""
    with no_grad():
        ctx = model.prepare(source_full, source_pose)
        fctx = model.frame(ctx, audio_window)
        fine, _ = model.render_fine(ctx, fctx, target_pose, mask_fine)
    return fine.data.astype(np.float64)
