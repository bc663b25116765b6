"""Generator and discriminator objectives and their weighted combination."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .nn import Conv2d, Linear, Module, lrelu
from .tensor import Tensor, as_tensor, relu, softplus

WEIGHTS = {"pix": 1.0, "per": 0.01, "adv": 1.0, "sync": 0.5, "deform": 0.001}


def pixel_loss(gen, gt, mask=None) -> Tensor:
    """Mean squared error over all pixels, or over pixels where ``mask`` is set.

    Images are [C,H,W] (or [N,C]); ``mask`` has the trailing spatial dims.
    """
    gen, gt = as_tensor(gen), as_tensor(gt)
    if gen.shape != gt.shape:
        raise DimensionError(f"pixel_loss: extents differ, {gen.shape} vs {gt.shape}")
    diff = gen - gt
    sq = diff * diff
    if mask is None:
        return sq.mean()
    m = np.broadcast_to(np.asarray(mask, dtype=gen.dtype), gen.shape)
    count = m.sum()
    if count == 0:
        raise DimensionError("pixel_loss: mask selects no pixels")
    return (sq * m).sum() * (1.0 / count)


class PerceptualNet(Module):
    """Frozen, seeded random conv features standing in for a pretrained backbone."""

    def __init__(self, seed: int = 1234, widths=(16, 32, 32)):
        rng = np.random.default_rng([seed, 31])
        self.convs = []
        c_in = 3
        for i, c_out in enumerate(widths):
            self.convs.append(Conv2d(c_in, c_out, 3, rng, stride=1 if i == 0 else 2))
            c_in = c_out
        self.freeze()

    def __call__(self, image) -> list[Tensor]:
        x = as_tensor(image)
        feats = []
        for conv in self.convs:
            x = relu(conv(x))
            feats.append(x)
        return feats


def perceptual_loss(net: PerceptualNet, gen, gt) -> Tensor:
    gen, gt = as_tensor(gen), as_tensor(gt)
    if gen.shape != gt.shape:
        raise DimensionError(f"perceptual_loss: extents differ, {gen.shape} vs {gt.shape}")
    total = None
    for fa, fb in zip(net(gen), net(Tensor(gt.data))):
        d = fa - fb
        term = (d * d).mean()
        total = term if total is None else total + term
    return total


class PatchDiscriminator(Module):
    """Four stride-2 convs with leaky ReLU, global average, linear logit."""

    def __init__(self, rng: np.random.Generator, width: int = 16):
        chans = [3, width, 2 * width, 2 * width, 2 * width]
        self.convs = [Conv2d(chans[i], chans[i + 1], 3, rng, stride=2, pad=1) for i in range(4)]
        self.head = Linear(chans[-1], 1, rng, gain=1.0)

    def __call__(self, image) -> Tensor:
        x = as_tensor(image)
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        for conv in self.convs:
            x = lrelu(conv(x))
        logit = self.head(x.mean(axis=(2, 3))).reshape(-1)
        return logit


def generator_adv_loss(fake_logits: Tensor) -> Tensor:
    return softplus(-as_tensor(fake_logits)).mean()


def discriminator_adv_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    return softplus(-as_tensor(real_logits)).mean() + softplus(as_tensor(fake_logits)).mean()


def adversarial_losses(disc: PatchDiscriminator, gen, real) -> tuple[Tensor, Tensor]:
    """(generator loss, discriminator loss); the latter sees ``gen`` detached."""
    gen = as_tensor(gen)
    l_g = generator_adv_loss(disc(gen))
    l_d = discriminator_adv_loss(disc(real), disc(gen.detach()))
    return l_g, l_d


def deform_reg(delta) -> Tensor:
    """Squared norm of each displacement, averaged over points."""
    delta = as_tensor(delta)
    if delta.size == 0:
        return Tensor(np.zeros((), dtype=delta.dtype))
    return (delta * delta).sum(axis=-1).mean()


@dataclass
class LossReport:
    step: int
    pix: float
    per: float
    adv: float
    sync: float
    deform: float
    total: float

    def recomputed_total(self, weights=WEIGHTS) -> float:
        return sum(weights[k] * getattr(self, k) for k in ("pix", "per", "adv", "sync", "deform"))

    def line(self) -> str:
        return (f"step={self.step} pix={self.pix:.6g} per={self.per:.6g} adv={self.adv:.6g} "
                f"sync={self.sync:.6g} deform={self.deform:.6g} total={self.total:.6g}")


def total_loss(terms: dict, weights: dict | None = None, step: int = 0) -> tuple[Tensor, LossReport]:
    """Weighted sum of the five terms (Tensors or floats; missing terms count as 0)."""
    weights = dict(WEIGHTS if weights is None else weights)
    total = None
    values = {}
    for key in ("pix", "per", "adv", "sync", "deform"):
        term = terms.get(key)
        if term is None:
            values[key] = 0.0
            continue
        term = as_tensor(term)
        values[key] = float(term.data)
        weighted = term * weights[key]
        total = weighted if total is None else total + weighted
    if total is None:
        total = Tensor(np.zeros(()))
    report = LossReport(step, total=float(total.data), **values)
    return total, report


def weights_from_config(cfg) -> dict:
    return {"pix": 1.0, "per": cfg.lambda_per, "adv": cfg.lambda_adv,
            "sync": cfg.lambda_sync, "deform": cfg.lambda_deform}
