"""Lip-sync discriminator: lip and audio embeddings scored by cosine similarity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import Conv1d, Conv2d, Linear, Module, lrelu
from .optim import Adam
from .synth import SyntheticSequence, crop_lips
from .tensor import Tensor, as_tensor, backward, maximum_scalar, no_grad, sqrt


class LipEncoder(Module):
    """T stacked RGB lip crops -> embedding."""

    def __init__(self, rng: np.random.Generator, frames: int = 5, height: int = 16, width: int = 32,
                 dim: int = 64):
        self.frames, self.height, self.width = frames, height, width
        self.conv1 = Conv2d(3 * frames, 32, 3, rng, stride=2, pad=1)
        self.conv2 = Conv2d(32, 64, 3, rng, stride=2, pad=1)
        self.conv3 = Conv2d(64, 64, 3, rng, stride=2, pad=1)
        flat = 64 * (height // 8) * (width // 8)
        self.fc = Linear(flat, dim, rng, gain=1.0)

    def __call__(self, window) -> Tensor:
        x = as_tensor(window)
        single = x.ndim == 4
        if single:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 5 or x.shape[1:] != (self.frames, 3, self.height, self.width):
            raise DimensionError(f"lip window must be [T={self.frames},3,{self.height},{self.width}] "
                                 f"(optionally batched), got {tuple(np.shape(window))}")
        b = x.shape[0]
        h = x.reshape(b, 3 * self.frames, self.height, self.width)
        h = lrelu(self.conv3(lrelu(self.conv2(lrelu(self.conv1(h))))))
        e = self.fc(h.reshape(b, -1))
        return e.reshape(-1) if single else e


class SyncAudioEncoder(Module):
    """Envelope clip covering T frames -> embedding."""

    def __init__(self, rng: np.random.Generator, length: int = 80, dim: int = 64):
        if length % 8:
            raise ConfigError(f"sync audio clip length {length} must be divisible by 8")
        self.length = length
        self.conv1 = Conv1d(1, 16, 5, rng, stride=2, pad=2)
        self.conv2 = Conv1d(16, 32, 5, rng, stride=2, pad=2)
        self.conv3 = Conv1d(32, 64, 5, rng, stride=2, pad=2)
        self.fc = Linear(64 * (length // 8), dim, rng, gain=1.0)

    def __call__(self, clip) -> Tensor:
        x = as_tensor(clip)
        single = x.ndim == 1
        if single:
            x = x.reshape(1, -1)
        if x.ndim != 2 or x.shape[1] != self.length:
            raise DimensionError(f"audio clip must have {self.length} samples, got {tuple(np.shape(clip))}")
        b = x.shape[0]
        h = x.reshape(b, 1, self.length)
        h = lrelu(self.conv3(lrelu(self.conv2(lrelu(self.conv1(h))))))
        e = self.fc(h.reshape(b, -1))
        return e.reshape(-1) if single else e


class SyncDiscriminator(Module):
    def __init__(self, rng: np.random.Generator, frames: int = 5, lip_h: int = 16, lip_w: int = 32,
                 samples_per_frame: int = 16, dim: int = 64):
        self.frames = frames
        self.samples_per_frame = samples_per_frame
        self.lip = LipEncoder(rng, frames, lip_h, lip_w, dim)
        self.audio = SyncAudioEncoder(rng, frames * samples_per_frame, dim)

    @classmethod
    def from_config(cls, cfg, rng: np.random.Generator | None = None) -> "SyncDiscriminator":
        rng = rng if rng is not None else np.random.default_rng([cfg.seed, 5])
        return cls(rng, cfg.sync_frames, cfg.lip_h, cfg.lip_w, cfg.samples_per_frame, cfg.sync_dim)

    def embed_lips(self, window) -> Tensor:
        return self.lip(window)

    def embed_audio(self, clip) -> Tensor:
        return self.audio(clip)

    def score(self, window, clip) -> Tensor:
        return cosine_sim(self.embed_lips(window), self.embed_audio(clip))


NORM_FLOOR = 1e-12


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity along the last axis; 0 where either norm is below 1e-12."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine_sim: embedding dims differ, {a.shape} vs {b.shape}")
    dot = (a * b).sum(axis=-1)
    na2 = (a * a).sum(axis=-1)
    nb2 = (b * b).sum(axis=-1)
    valid = (np.sqrt(na2.data) >= NORM_FLOOR) & (np.sqrt(nb2.data) >= NORM_FLOOR)
    tiny = float(np.finfo(dot.dtype).tiny)
    denom = sqrt(maximum_scalar(na2 * nb2, tiny))
    cos = dot / denom * valid.astype(dot.dtype)
    return cos


def _hinge(x: Tensor) -> Tensor:
    return maximum_scalar(x, 0.0)


def triplet_loss(e_l, e_a_pos, e_a_neg, e_l_pos, e_l_neg, e_a, eta: float = 0.5,
                 literal: bool = False) -> Tensor:
    """Two hinge terms, lip-anchored and audio-anchored, averaged over any batch axis.

    Standard orientation: ``max(0, eta + cos(anchor, neg) - cos(anchor, pos))``.
    ``literal=True`` swaps pos and neg inside the hinge.
    """
    pos1, neg1 = cosine_sim(e_l, e_a_pos), cosine_sim(e_l, e_a_neg)
    pos2, neg2 = cosine_sim(e_a, e_l_pos), cosine_sim(e_a, e_l_neg)
    if literal:
        pos1, neg1, pos2, neg2 = neg1, pos1, neg2, pos2
    loss = _hinge(eta + neg1 - pos1) + _hinge(eta + neg2 - pos2)
    return loss.mean() if loss.ndim else loss


def generator_sync_loss(e_l_gen, e_gt_audio, literal: bool = False) -> Tensor:
    """``1 - cos`` (in [0,2]); ``literal=True`` returns the bare cosine."""
    cos = cosine_sim(e_l_gen, e_gt_audio)
    out = cos if literal else 1.0 - cos
    return out.mean() if out.ndim else out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class SyncData:
    """Per-sequence lip crops [N,3,h,w] and envelope signal, with a train/held-out split."""

    crops: list[np.ndarray]
    sequences: list[SyntheticSequence]
    frames: int
    split: int  # windows starting before ``split`` are training windows

    def lip_window(self, s: int, start: int) -> np.ndarray:
        return self.crops[s][start:start + self.frames]

    def audio_clip(self, s: int, start: int) -> np.ndarray:
        return self.sequences[s].audio_clip(start, self.frames)


def prepare_sync_data(sequences: list[SyntheticSequence], frames: int = 5, lip_h: int = 16,
                      lip_w: int = 32, holdout_frac: float = 0.2) -> SyncData:
    if len(sequences) < 2:
        raise ConfigError("sync training needs at least 2 sequences for negative mining")
    n = min(seq.n_frames for seq in sequences)
    split = int(round(n * (1.0 - holdout_frac)))
    if split - frames < 2 * frames:
        raise ConfigError(f"sequences of {n} frames are too short for offset negatives with T={frames}")
    if n - split - frames < 2 * frames:
        raise ConfigError(f"held-out tail of {n - split} frames is too short for offset pairs with T={frames}")
    crops = []
    for seq in sequences:
        crops.append(np.stack([crop_lips(seq.frames[i], seq.lipboxes[i], lip_h, lip_w)
                               for i in range(seq.n_frames)]).astype(np.float32))
    return SyncData(crops, sequences, frames, split)


def _offset_start(rng: np.random.Generator, start: int, lo: int, hi: int, min_gap: int) -> int:
    """A window start in [lo, hi] at least ``min_gap`` frames from ``start``."""
    choices = [s for s in range(lo, hi + 1) if abs(s - start) >= min_gap]
    return int(rng.choice(choices))


def sample_triplets(data: SyncData, batch: int, rng: np.random.Generator, held_out: bool = False):
    """(lips, audio, neg_audio, neg_lips) batches; positives are synchronised pairs."""
    t = data.frames
    n_seq = len(data.crops)
    if held_out:
        lo, hi = data.split, min(len(c) for c in data.crops) - t
    else:
        lo, hi = 0, data.split - t
    lips, audio, neg_audio, neg_lips = [], [], [], []
    for _ in range(batch):
        s = int(rng.integers(n_seq))
        start = int(rng.integers(lo, hi + 1))
        lips.append(data.lip_window(s, start))
        audio.append(data.audio_clip(s, start))
        for out, get in ((neg_audio, data.audio_clip), (neg_lips, data.lip_window)):
            if rng.random() < 0.5:
                out.append(get(s, _offset_start(rng, start, lo, hi, t)))
            else:
                other = (s + 1 + int(rng.integers(n_seq - 1))) % n_seq
                out.append(get(other, int(rng.integers(lo, hi + 1))))
    as32 = lambda xs: np.stack(xs).astype(np.float32)  # noqa: E731
    return as32(lips), as32(audio), as32(neg_audio), as32(neg_lips)


def train_sync(sequences: list[SyntheticSequence], cfg, seed: int | None = None,
               log=None) -> tuple[SyncDiscriminator, list[float]]:
    """Contrastive triplet training; returns the discriminator and per-step losses."""
    seed = cfg.seed if seed is None else seed
    data = prepare_sync_data(sequences, cfg.sync_frames, cfg.lip_h, cfg.lip_w)
    disc = SyncDiscriminator.from_config(cfg, np.random.default_rng([seed, 5]))
    params = disc.trainable()
    opt = Adam(params, lr=cfg.sync_lr)
    history = []
    for step in range(cfg.sync_steps):
        rng = np.random.default_rng([seed, 11, step])
        lips, audio, neg_audio, neg_lips = sample_triplets(data, cfg.sync_batch, rng)
        e_l, e_a = disc.embed_lips(lips), disc.embed_audio(audio)
        loss = triplet_loss(e_l, e_a, disc.embed_audio(neg_audio), e_l, disc.embed_lips(neg_lips), e_a,
                            eta=cfg.eta, literal=cfg.literal_sync_loss)
        opt.step(backward(loss, params))
        history.append(loss.item())
        if log is not None and (step % 100 == 0 or step == cfg.sync_steps - 1):
            log(f"sync step={step} loss={np.mean(history[-100:]):.4f}")
    return disc, history


def sync_margin(disc: SyncDiscriminator, data: SyncData, n_pairs: int = 200, seed: int = 0,
                held_out: bool = True) -> tuple[float, float]:
    """(mean cos of synchronised pairs, mean cos of same-sequence offset >= T pairs)."""
    t = data.frames
    rng = np.random.default_rng([seed, 17])
    lo, hi = (data.split, min(len(c) for c in data.crops) - t) if held_out else (0, data.split - t)
    lips, sync_audio, off_audio = [], [], []
    for _ in range(n_pairs):
        s = int(rng.integers(len(data.crops)))
        start = int(rng.integers(lo, hi + 1))
        lips.append(data.lip_window(s, start))
        sync_audio.append(data.audio_clip(s, start))
        off_audio.append(data.audio_clip(s, _offset_start(rng, start, lo, hi, t)))
    with no_grad():
        e_l = disc.embed_lips(np.stack(lips).astype(np.float32))
        pos = cosine_sim(e_l, disc.embed_audio(np.stack(sync_audio).astype(np.float32))).data
        neg = cosine_sim(e_l, disc.embed_audio(np.stack(off_audio).astype(np.float32))).data
    return float(pos.mean()), float(neg.mean())
