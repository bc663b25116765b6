"""Finite-difference verification of every differentiable operation.

Each case builds a scalar from float64 inputs in [-1, 1] (projected onto a
fixed random weight tensor) and compares reverse-mode gradients with central
differences, h = 1e-5. An entry passes when ``|a - n| <= tol * max(|a|, |n|)``
or ``|a - n| <= 1e-7``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from . import tensor as T
from .config import Config
from .deformation import CrossAttention, DeformationField, SlotAggregator
from .encoder import AppearanceEncoder, sample_triplane, split_triplane
from .geometry import Pose, orbit_pose
from .losses import PatchDiscriminator, PerceptualNet, deform_reg, perceptual_loss, pixel_loss
from .refiner import SuperResolver
from .renderer import PointDecoder, composite
from .sync import cosine_sim, generator_sync_loss, triplet_loss
from .tensor import Tensor, default_dtype

H = 1e-5
ABS_FLOOR = 1e-7


@dataclass
class CheckResult:
    name: str
    max_rel: float
    checked: int
    passed: bool

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:<28} max_rel_err={self.max_rel:.3e} entries={self.checked:<5} {status}"


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(-1, 1, shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _entry_error(a: float, n: float, tol: float) -> tuple[float, bool]:
    """(relative error for reporting, pass flag). Tiny gradients report 0."""
    diff = abs(a - n)
    scale = max(abs(a), abs(n))
    rel = diff / scale if scale > 1e-5 else 0.0
    return rel, diff <= tol * scale or diff <= ABS_FLOOR


def check_function(name: str, fn: Callable[..., Tensor], inputs: list[np.ndarray], tol: float,
                   rng: np.random.Generator, max_entries: int = 60) -> CheckResult:
    """``fn`` maps float64 Tensors to any Tensor; it is reduced against a fixed random weight."""
    tensors = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    probe = fn(*tensors)
    weight = rng.uniform(-1, 1, probe.shape)

    def scalar(*ts):
        out = fn(*ts)
        return (out * weight).sum() if out.ndim else out * float(weight)

    analytic = T.grad(scalar(*tensors), tensors)
    worst, count, failed = 0.0, 0, False
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        picks = np.arange(flat.size)
        if flat.size > max_entries:
            picks = rng.choice(flat.size, max_entries, replace=False)
        for j in picks:
            old = flat[j]
            flat[j] = old + H
            with T.no_grad():
                fp = scalar(*tensors).item()
            flat[j] = old - H
            with T.no_grad():
                fm = scalar(*tensors).item()
            flat[j] = old
            rel, ok = _entry_error(g.reshape(-1)[j], (fp - fm) / (2 * H), tol)
            worst, failed, count = max(worst, rel), failed or not ok, count + 1
    return CheckResult(name, worst, count, not failed)


def check_parameters(name: str, loss_fn: Callable[[], Tensor], params: dict, tol: float,
                     rng: np.random.Generator, per_param: int = 3) -> CheckResult:
    """Finite differences on a random subset of entries of every parameter."""
    analytic = T.backward(loss_fn(), params)
    worst, count, failed = 0.0, 0, False
    for key, p in params.items():
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, min(per_param, flat.size), replace=False)
        g = analytic[key].data.reshape(-1)
        for j in picks:
            old = flat[j]
            flat[j] = old + H
            with T.no_grad():
                fp = loss_fn().item()
            flat[j] = old - H
            with T.no_grad():
                fm = loss_fn().item()
            flat[j] = old
            rel, ok = _entry_error(g[j], (fp - fm) / (2 * H), tol)
            worst, failed, count = max(worst, rel), failed or not ok, count + 1
    return CheckResult(name, worst, count, not failed)


# ---------------------------------------------------------------------------
# the suite
# ---------------------------------------------------------------------------

def _op_cases(rng):
    u = lambda *s: rng.uniform(-1, 1, s)  # noqa: E731
    nz = lambda *s: _away_from_zero(rng, s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.2, 1.0, s)  # noqa: E731
    cases = [
        ("add", lambda a, b: a + b, [u(3, 4), u(4)]),
        ("sub", lambda a, b: a - b, [u(3, 4), u(3, 1)]),
        ("mul", lambda a, b: a * b, [u(3, 4), u(3, 4)]),
        ("div", lambda a, b: a / b, [u(3, 4), nz(3, 4)]),
        ("neg", lambda a: -a, [u(5)]),
        ("power", lambda a: a ** 3, [u(5)]),
        ("exp", T.exp, [u(2, 3)]),
        ("log", T.log, [pos(2, 3)]),
        ("sqrt", T.sqrt, [pos(2, 3)]),
        ("sin", T.sin, [u(4)]),
        ("cos", T.cos, [u(4)]),
        ("tanh", T.tanh, [u(4)]),
        ("sigmoid", T.sigmoid, [u(2, 3)]),
        ("softplus", T.softplus, [u(2, 3)]),
        ("relu", T.relu, [nz(3, 4)]),
        ("leaky_relu", T.leaky_relu, [nz(3, 4)]),
        ("maximum_scalar", lambda a: T.maximum_scalar(a, 0.0), [nz(3, 4)]),
        ("reshape", lambda a: a.reshape(4, 3), [u(3, 4)]),
        ("transpose", lambda a: a.transpose(2, 0, 1), [u(2, 3, 4)]),
        ("getitem", lambda a: a[1:, ::2], [u(3, 4)]),
        ("getitem_fancy", lambda a: a[np.array([0, 2, 0])], [u(3, 4)]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [u(2, 3), u(2, 2)]),
        ("stack", lambda a, b: T.stack([a, b], axis=0), [u(2, 3), u(2, 3)]),
        ("sum", lambda a: a.sum(axis=1), [u(3, 4)]),
        ("mean", lambda a: a.mean(axis=(0, 2)), [u(2, 3, 4)]),
        ("cumsum_exclusive", lambda a: T.cumsum_exclusive(a, axis=1), [u(3, 5)]),
        ("matmul", lambda a, b: a @ b, [u(3, 4), u(4, 2)]),
        ("matmul_batched", lambda a, b: a @ b, [u(2, 3, 4), u(2, 4, 2)]),
        ("softmax", lambda a: T.softmax(a, axis=-1), [u(3, 5)]),
        ("softmax_matmul", lambda a, b: T.softmax(a @ b, axis=0), [u(3, 4), u(4, 2)]),
        ("conv2d", lambda x, k, b: F.conv2d(x, k, b, stride=1, pad=1), [u(2, 5, 5), u(3, 2, 3, 3), u(3)]),
        ("conv2d_stride2", lambda x, k: F.conv2d(x, k, None, stride=2, pad=1), [u(2, 2, 6, 6), u(3, 2, 3, 3)]),
        ("conv1d", lambda x, k, b: F.conv1d(x, k, b, stride=2, pad=2), [u(2, 9), u(3, 2, 5), u(3)]),
        ("upsample_nearest", lambda x: F.upsample_nearest(x, 2), [u(2, 3, 3)]),
        ("avg_pool2d", lambda x: F.avg_pool2d(x, 2), [u(2, 4, 4)]),
    ]
    # grid sampling away from cell borders, including clamped points
    n = 12
    rc = rng.integers(0, 4, (n, 2)) + rng.uniform(0.1, 0.9, (n, 2))
    rc[0] = (-1.5, 2.3)
    rc[1] = (2.4, 7.2)
    cases.append(("grid_sample_bilinear", lambda p, c: F.grid_sample_bilinear(p, c), [u(3, 5, 6), rc]))
    return cases


def _module_cases(rng):
    cases = []
    t = np.sort(rng.uniform(0.0, 1.0, (4, 6)), axis=1) + np.arange(6) * 0.2
    far = t[:, -1] + 0.3
    cases.append(("volume_composite",
                  lambda s, c: composite(t, far, T.softplus(s), T.sigmoid(c), background=0.5).rgb,
                  [rng.uniform(-1, 1, (4, 6)), rng.uniform(-1, 1, (4, 6, 3))]))
    pose = Pose(*_random_rotation_translation(rng))
    planes = rng.uniform(-1, 1, (1, 6, 6, 6))
    pts = rng.uniform(-0.6, 0.6, (5, 3))
    cases.append(("sample_triplane",
                  lambda f, x: sample_triplane(split_triplane([f[0]], pose.apply(np.zeros(3)), 1.0), pose, x),
                  [planes, pose.apply(pts)]))
    cases.append(("cosine_sim", cosine_sim, [rng.uniform(-1, 1, (3, 5)), rng.uniform(-1, 1, (3, 5))]))
    six = [rng.uniform(-1, 1, (4, 6)) for _ in range(6)]
    cases.append(("triplet_loss", lambda *e: triplet_loss(*e, eta=0.5), six))
    cases.append(("generator_sync_loss", generator_sync_loss, [rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6)]))
    cases.append(("pixel_loss", lambda a, b: pixel_loss(a, b, np.array([[1, 0], [1, 1]])),
                  [rng.uniform(0, 1, (3, 2, 2)), rng.uniform(0, 1, (3, 2, 2))]))
    cases.append(("deform_reg", deform_reg, [rng.uniform(-0.2, 0.2, (7, 3))]))
    return cases


def _random_rotation_translation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q, rng.uniform(-1, 1, 3)


def _network_checks(rng, tol) -> list[CheckResult]:
    out = []
    mrng = np.random.default_rng(3)

    dec = PointDecoder(6, mrng, hidden=5)
    feats = rng.uniform(-1, 1, (4, 6))
    out.append(check_parameters("decode_point", lambda: _proj(dec(Tensor(feats))[0], rng_fixed=1)
                                + dec(Tensor(feats))[1].sum(), dec.parameters(), tol, rng))

    attn = CrossAttention(6, 4, mrng, dim=4, heads=2)
    faces, audio = rng.uniform(-1, 1, (5, 6)), rng.uniform(-1, 1, (3, 4))
    out.append(check_parameters("cross_attention", lambda: _proj(attn(Tensor(faces), Tensor(audio))),
                                attn.parameters(), tol, rng))

    slots = SlotAggregator(6, mrng, n_slots=3, slot_dim=4, iters=2, grid=2)
    levels = [Tensor(rng.uniform(-1, 1, (3, 4, 4))), Tensor(rng.uniform(-1, 1, (3, 2, 2)))]
    out.append(check_parameters("slot_attention", lambda: _proj(slots(levels)), slots.parameters(), tol, rng))

    field = DeformationField(mrng, n_tokens=2, audio_dim=3, prior_dim=4, hidden=6, octaves=2, delta_max=0.15)
    field.out.weight.data *= 10.0
    pts = rng.uniform(-0.5, 0.5, (6, 3))
    grid_rc = rng.uniform(0.1, 2.9, (6, 2))
    aud, prior = Tensor(rng.uniform(-1, 1, (2, 3))), Tensor(rng.uniform(-1, 1, (16, 4)))
    out.append(check_parameters("predict_deformation",
                                lambda: deform_reg(field(pts, grid_rc, aud, prior, 4)),
                                field.parameters(), tol, rng))

    enc = AppearanceEncoder(mrng, plane_channels=2, pyramid_channels=4)
    img = Tensor(rng.uniform(0, 1, (3, 16, 16)))
    out.append(check_parameters("appearance_encoder", lambda: sum((_proj(f) for f in enc(img)), Tensor(0.0)),
                                enc.parameters(), tol, rng, per_param=2))

    sr = SuperResolver(mrng, channels=3)
    sr.conv_out.weight.data[...] = mrng.uniform(-0.3, 0.3, sr.conv_out.weight.shape)
    coarse, src = rng.uniform(0.1, 0.9, (3, 4, 4)), rng.uniform(0.1, 0.9, (3, 8, 8))
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:6, 1:7] = True
    out.append(check_parameters("super_resolve", lambda: _proj(sr(Tensor(coarse), Tensor(src), mask)),
                                sr.parameters(), tol, rng, per_param=2))
    out.append(check_function("super_resolve_inputs", lambda c, s: sr(c, s, mask), [coarse, src], tol, rng))

    disc = PatchDiscriminator(mrng, width=4)
    patch = rng.uniform(0, 1, (3, 16, 16))
    out.append(check_parameters("patch_discriminator", lambda: _proj(disc(Tensor(patch))),
                                disc.parameters(), tol, rng, per_param=2))
    net = PerceptualNet(seed=5, widths=(3, 4, 4))
    other = rng.uniform(0, 1, (3, 8, 8))
    out.append(check_function("perceptual_loss", lambda a: perceptual_loss(net, a, other),
                              [rng.uniform(0, 1, (3, 8, 8))], tol, rng))
    return out


_PROJ_CACHE: dict = {}


def _proj(t: Tensor, rng_fixed: int = 0) -> Tensor:
    """Reduce to a scalar against a fixed pseudo-random weight of matching shape."""
    key = (t.shape, rng_fixed)
    if key not in _PROJ_CACHE:
        _PROJ_CACHE[key] = np.random.default_rng([len(t.shape), rng_fixed, *t.shape]).uniform(-1, 1, t.shape)
    return (t * _PROJ_CACHE[key]).sum()


def micro_config() -> Config:
    return Config(image_size=32, coarse_size=16, source_size=16, plane_channels=2, pyramid_channels=4,
                  grid_size=4, n_slots=2, slot_dim=4, slot_iters=2, heads=2, attn_dim=4, audio_window=16,
                  audio_dim=3, pe_octaves=2, deform_hidden=6, decoder_hidden=6, n_samples=8, sr_channels=3)


def micro_pipeline_check(rng, tol) -> CheckResult:
    """2-ray end-to-end scene: source image -> tri-planes -> deformation -> rendering -> pixel loss."""
    from .model import TalkingHeadModel

    cfg = micro_config()
    model = TalkingHeadModel(cfg, seed=7)
    model.deform.out.weight.data *= 10.0
    source = rng.uniform(0, 1, (3, 16, 16))
    src_pose = orbit_pose(0.1, 0.05, 2.0)
    tgt_pose = orbit_pose(-0.15, 0.1, 2.1)
    window = rng.uniform(0, 1, cfg.audio_window)
    pixels = np.array([[7.3, 8.6], [9.1, 6.8]])
    target = rng.uniform(0, 1, (2, 3))

    def loss():
        ctx = model.prepare(source, src_pose)
        fctx = model.frame(ctx, window)
        out = model.render_pixels(ctx, fctx, tgt_pose, pixels)
        return pixel_loss(out.composite.rgb, target)

    params = {k: p for k, p in model.parameters().items() if not k.startswith("refiner.")}
    return check_parameters("micro_pipeline", loss, params, tol, rng, per_param=2)


def run_gradcheck(tol: float = 1e-4, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    with default_dtype(np.float64):
        for name, fn, inputs in _op_cases(rng) + _module_cases(rng):
            results.append(check_function(name, fn, inputs, tol, rng))
        results += _network_checks(rng, tol)
        results.append(micro_pipeline_check(rng, tol))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [r.line() for r in results]
    worst = max(r.max_rel for r in results)
    failed = sum(not r.passed for r in results)
    lines.append(f"checked {len(results)} operations, max_rel_err={worst:.3e}, failures={failed}")
    return "\n".join(lines)
