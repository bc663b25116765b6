"""End-to-end generator training on one synthetic sequence."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import functional as F
from . import io
from .config import Config, parse_config
from .errors import ConfigError
from .geometry import Intrinsics, pixel_centers
from .losses import (PatchDiscriminator, PerceptualNet, deform_reg, discriminator_adv_loss,
                     generator_adv_loss, perceptual_loss, pixel_loss, total_loss, weights_from_config)
from .model import TalkingHeadModel, render_frame
from .optim import Adam
from .refiner import face_mask
from .sync import SyncDiscriminator, generator_sync_loss
from .synth import SyntheticSequence, lip_sample_points
from .tensor import Tensor, backward, concat, get_default_dtype, no_grad, sigmoid, stack


class TrainingError(RuntimeError):
    """Raised when a step produces a non-finite loss or gradient."""


def choose_source(seq: SyntheticSequence, source_frame: int) -> int:
    if source_frame >= 0:
        if source_frame >= seq.n_frames:
            raise ConfigError(f"source_frame {source_frame} is beyond the {seq.n_frames} frames")
        return source_frame
    return int(np.argmax(seq.envelope))


@dataclass
class FrameTargets:
    coarse: np.ndarray        # [N,3,Hc,Wc] ground truth at the rendering resolution
    coarse_masks: np.ndarray  # [N,Hc,Wc]
    fine_masks: np.ndarray    # [N,H,W]
    windows: np.ndarray       # [N,audio_window]


def frame_targets(seq: SyntheticSequence, cfg: Config) -> FrameTargets:
    size = seq.frames.shape[-1]
    if size != 2 * cfg.coarse_size:
        raise ConfigError(f"frames are {size}px but coarse_size={cfg.coarse_size} implies {2 * cfg.coarse_size}px")
    n = seq.n_frames
    frames = seq.frames.reshape(n, 3, cfg.coarse_size, 2, cfg.coarse_size, 2)
    coarse = frames.mean(axis=(3, 5))
    kc = Intrinsics.default(cfg.coarse_size)
    cmasks = np.stack([face_mask(seq.identity, seq.pose(i), kc) for i in range(n)])
    windows = np.stack([seq.audio_window(i, cfg.audio_window) for i in range(n)])
    return FrameTargets(coarse, cmasks, seq.masks.astype(bool), windows)


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g.data, dtype=np.float64))) for g in grads.values())))


def gate_activity(fctxs) -> Tensor:
    """Mean deformation gate over sites and frames."""
    gates = [sigmoid(f.f_cm.mean(axis=1)).mean() for f in fctxs]
    return sum(gates[1:], gates[0]) * (1.0 / len(gates))


def learning_rate(cfg: Config, step: int) -> float:
    """Cosine decay from ``lr`` at step 0 to ``lr_final`` at the last step."""
    frac = min(1.0, step / max(cfg.steps - 1, 1))
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + np.cos(np.pi * frac))


def aux_cap(cfg: Config, step: int) -> float:
    """Auxiliary-to-reconstruction gradient norm cap at ``step``: 0 before
    ``aux_start``, then a linear ramp to ``aux_ratio`` over ``aux_ramp`` steps."""
    ramp = (step - cfg.aux_start + 1) / max(cfg.aux_ramp, 1)
    return cfg.aux_ratio * min(1.0, max(0.0, ramp))


def combine_gradients(rec: dict, aux: list[dict], ratio: float) -> dict:
    """``rec`` plus each auxiliary gradient, scaled down so its global norm is
    at most ``ratio`` times the norm of ``rec``."""
    ref = global_norm(rec)
    out = {k: g.data.copy() for k, g in rec.items()}
    for grads in aux:
        norm = global_norm(grads)
        if norm == 0.0:
            continue
        scale = min(1.0, ratio * ref / norm)
        for k, g in grads.items():
            out[k] += (scale * g.data).astype(out[k].dtype)
    return {k: Tensor(v) for k, v in out.items()}


def config_to_tensor(cfg: Config) -> np.ndarray:
    return np.frombuffer(cfg.to_text().encode("utf-8"), dtype=np.uint8).astype(np.float32)


def config_from_tensor(arr: np.ndarray) -> Config:
    return parse_config(np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8"))


class Trainer:
    """Alternating generator / patch-discriminator updates with a frozen sync discriminator."""

    def __init__(self, cfg: Config, seq: SyntheticSequence, sync_disc: SyncDiscriminator | None,
                 log: Callable[[str], None] | None = None):
        if cfg.lambda_sync > 0 and sync_disc is None:
            raise ConfigError("a trained sync discriminator is required (lambda_sync > 0)")
        if seq.n_frames < cfg.sync_frames:
            raise ConfigError(f"need at least {cfg.sync_frames} frames, dataset has {seq.n_frames}")
        self.cfg = cfg
        self.seq = seq
        self.log = log
        self.model = TalkingHeadModel(cfg)
        rng = np.random.default_rng([cfg.seed, 2])
        self.disc_coarse = PatchDiscriminator(rng)
        self.disc_fine = PatchDiscriminator(rng)
        self.perceptual = PerceptualNet(cfg.seed)
        self.sync = sync_disc
        if sync_disc is not None:
            sync_disc.freeze()
        self.params = self.model.trainable()
        self.disc_params = {**{f"coarse.{k}": p for k, p in self.disc_coarse.trainable().items()},
                            **{f"fine.{k}": p for k, p in self.disc_fine.trainable().items()}}
        self.opt = Adam(self.params, cfg.lr, cfg.beta1, cfg.beta2)
        self.disc_opt = Adam(self.disc_params, cfg.disc_lr, 0.5, cfg.beta2)
        self.weights = weights_from_config(cfg)
        self.step = 0
        self.source_index = choose_source(seq, cfg.source_frame)
        self.targets = frame_targets(seq, cfg)
        self.coarse_centers = pixel_centers(Intrinsics.default(cfg.coarse_size))

    # -- single step ----------------------------------------------------------
    def _patch(self, rng, mask: np.ndarray):
        p = self.cfg.patch_size
        size = mask.shape[0]
        rows, cols = np.nonzero(mask)
        i = int(rng.integers(len(rows)))
        r0 = int(np.clip(rows[i] - p // 2, 0, size - p))
        c0 = int(np.clip(cols[i] - p // 2, 0, size - p))
        return r0, c0

    def _lip_window(self, ctx, fctxs, start: int, rng) -> Tensor:
        cfg = self.cfg
        crops = []
        h, w = cfg.lip_h // 2, cfg.lip_w // 2
        for j, fctx in enumerate(fctxs):
            i = start + j
            uv = lip_sample_points(self.seq.lipboxes[i], h, w) / 2.0
            uv = np.clip(uv, 0.0, float(cfg.coarse_size))
            rr = self.model.render_pixels(ctx, fctx, self.seq.pose(i), uv, rng)
            crop = rr.composite.rgb.T.reshape(3, h, w)
            crops.append(F.upsample_nearest(crop, 2))
        return stack(crops, axis=0)

    def train_step(self):
        cfg, seq, tg = self.cfg, self.seq, self.targets
        model = self.model
        t_frames = cfg.sync_frames
        rng = np.random.default_rng([cfg.seed, self.step])
        start = int(rng.integers(0, seq.n_frames - t_frames + 1))
        src = self.source_index
        dtype = get_default_dtype()

        ctx = model.prepare(seq.frames[src], seq.pose(src))
        fctxs = [model.frame(ctx, tg.windows[start + j]) for j in range(t_frames)]
        deltas, pix_terms = [], []
        for j in range(t_frames):
            i = start + j
            pool = np.flatnonzero(tg.coarse_masks[i].ravel())
            idx = rng.choice(pool, cfg.rays_per_frame, replace=len(pool) < cfg.rays_per_frame)
            rr = model.render_pixels(ctx, fctxs[j], seq.pose(i), self.coarse_centers[idx], rng)
            gt = tg.coarse[i].reshape(3, -1)[:, idx].T.astype(dtype)
            pix_terms.append(pixel_loss(rr.composite.rgb, gt))
            if rr.delta is not None:
                deltas.append(rr.delta)

        # one coarse patch, refined to the fine resolution
        j = int(rng.integers(t_frames))
        i = start + j
        p = cfg.patch_size
        r0, c0 = self._patch(rng, tg.coarse_masks[i])
        vv, uu = np.mgrid[r0:r0 + p, c0:c0 + p]
        pixels = np.stack([uu.ravel() + 0.5, vv.ravel() + 0.5], axis=1)
        rr = model.render_pixels(ctx, fctxs[j], seq.pose(i), pixels, rng)
        if rr.delta is not None:
            deltas.append(rr.delta)
        coarse = rr.composite.rgb.T.reshape(3, p, p)
        m = tg.coarse_masks[i, r0:r0 + p, c0:c0 + p].astype(dtype)
        comp = coarse * m + cfg.background * (1.0 - m)
        gt_c = (tg.coarse[i, :, r0:r0 + p, c0:c0 + p] * m + cfg.background * (1.0 - m)).astype(dtype)
        fr, fc = 2 * r0, 2 * c0
        src_patch = ctx.source_full[:, fr:fr + 2 * p, fc:fc + 2 * p]
        fine = model.refiner(coarse, src_patch, tg.fine_masks[i, fr:fr + 2 * p, fc:fc + 2 * p])
        gt_f = seq.frames[i, :, fr:fr + 2 * p, fc:fc + 2 * p].astype(dtype)

        terms = {
            "pix": sum(pix_terms[1:], pix_terms[0]) * (1.0 / t_frames) + pixel_loss(fine, gt_f),
            "per": perceptual_loss(self.perceptual, comp, gt_c) + perceptual_loss(self.perceptual, fine, gt_f),
        }
        if deltas:
            terms["deform"] = deform_reg(concat(deltas, axis=0))
        aux_on = self.step >= cfg.aux_start
        if aux_on:
            terms["adv"] = generator_adv_loss(self.disc_coarse(comp)) + generator_adv_loss(self.disc_fine(fine))
        if aux_on and self.sync is not None and cfg.lambda_sync > 0 and self.step % cfg.sync_every == 0:
            lips = self._lip_window(ctx, fctxs, start, rng)
            e_l = self.sync.embed_lips(lips)
            e_a = self.sync.embed_audio(seq.audio_clip(start, t_frames).astype(dtype))
            terms["sync"] = generator_sync_loss(e_l, e_a, cfg.literal_sync_loss)

        _, report = total_loss(terms, self.weights, self.step)
        w = self.weights
        rec_terms = [terms[k] * w[k] for k in ("pix", "per", "deform") if k in terms]
        if cfg.lambda_gate > 0:
            rec_terms.append(gate_activity(fctxs) * cfg.lambda_gate)
        rec = backward(sum(rec_terms[1:], rec_terms[0]), self.params)
        aux = [backward(terms[k] * w[k], self.params) for k in ("adv", "sync") if k in terms and w[k] > 0]
        grads = combine_gradients(rec, aux, aux_cap(cfg, self.step))
        self.opt.state.lr = learning_rate(cfg, self.step)
        self._guard(report, grads)
        self.opt.step(grads)

        d_loss = (discriminator_adv_loss(self.disc_coarse(gt_c), self.disc_coarse(comp.detach()))
                  + discriminator_adv_loss(self.disc_fine(gt_f), self.disc_fine(fine.detach())))
        d_grads = backward(d_loss, self.disc_params)
        if np.isfinite(d_loss.item()):
            self.disc_opt.step(d_grads)
        self.step += 1
        return report

    def _guard(self, report, grads) -> None:
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g.data))]
        if np.isfinite(report.total) and not bad:
            return
        lines = [f"non-finite training state at step {report.step}", report.line()]
        lines += [f"non-finite gradient: {k}" for k in bad]
        self.diagnostic = "\n".join(lines)
        if getattr(self, "out_dir", None) is not None:
            Path(self.out_dir, f"nan_step_{report.step}.txt").write_text(self.diagnostic + "\n", encoding="utf-8")
        raise TrainingError(self.diagnostic)

    # -- loop ---------------------------------------------------------------
    def run(self, steps: int | None = None, out_dir=None, log_path=None) -> list:
        steps = self.cfg.steps if steps is None else steps
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_path = log_path or self.out_dir / "loss.log"
        handle = open(log_path, "a", encoding="ascii") if log_path is not None else None
        reports = []
        try:
            while self.step < steps:
                report = self.train_step()
                reports.append(report)
                if handle is not None:
                    handle.write(report.line() + "\n")
                if self.log is not None and (report.step % 100 == 0 or self.step == steps):
                    self.log(report.line())
                if (self.out_dir is not None and self.cfg.checkpoint_every > 0
                        and self.step % self.cfg.checkpoint_every == 0):
                    self.save(self.out_dir / "model.ckpt")
        finally:
            if handle is not None:
                handle.close()
        if self.out_dir is not None:
            self.save(self.out_dir / "model.ckpt")
        return reports

    # -- persistence ----------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        state.update({f"disc.{k}": p.data.copy() for k, p in self.disc_params.items()})
        state.update(self.opt.state_dict("opt_g."))
        state.update(self.disc_opt.state_dict("opt_d."))
        state["meta.step"] = np.array([self.step], dtype=np.float64)
        state["meta.source_frame"] = np.array([self.source_index], dtype=np.float64)
        state["meta.config"] = config_to_tensor(self.cfg)
        return state

    def save(self, path) -> None:
        io.save_checkpoint(path, self.state_dict())

    def load(self, path) -> None:
        state = io.load_checkpoint(path)
        self.model.load_state_dict(strip(state, "model."))
        disc = strip(state, "disc.")
        for k, p in self.disc_params.items():
            p.data = disc[k].astype(p.dtype).copy()
        self.opt.load_state_dict(state, "opt_g.")
        self.disc_opt.load_state_dict(state, "opt_d.")
        self.step = int(state["meta.step"][0])


def strip(state: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}


def load_model(path) -> tuple[TalkingHeadModel, int]:
    """Generator weights and the source frame index stored in a training checkpoint."""
    state = io.load_checkpoint(path)
    if "meta.config" not in state:
        raise ConfigError(f"{path}: not a generator checkpoint")
    cfg = config_from_tensor(state["meta.config"])
    model = TalkingHeadModel(cfg)
    model.load_state_dict(strip(state, "model."))
    return model, int(state["meta.source_frame"][0])


def load_sync(path, cfg: Config) -> SyncDiscriminator:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"sync discriminator checkpoint not found: {p}")
    disc = SyncDiscriminator.from_config(cfg)
    disc.load_state_dict(io.load_checkpoint(p))
    return disc


def render_sequence(model: TalkingHeadModel, seq: SyntheticSequence, source_index: int,
                    frames=None) -> np.ndarray:
    """Fine frames [n,3,H,W] for the given indices (all by default)."""
    frames = range(seq.n_frames) if frames is None else frames
    cfg = model.cfg
    out = []
    with no_grad():
        ctx = model.prepare(seq.frames[source_index], seq.pose(source_index))
        for i in frames:
            fctx = model.frame(ctx, seq.audio_window(i, cfg.audio_window))
            fine, _ = model.render_fine(ctx, fctx, seq.pose(i), seq.masks[i])
            out.append(fine.data.astype(np.float64))
    return np.stack(out)


__all__ = ["Trainer", "TrainingError", "load_model", "load_sync", "render_sequence", "render_frame",
           "choose_source", "frame_targets"]
