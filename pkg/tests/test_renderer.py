import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from talkinghead.config import Config
from talkinghead.errors import ContractError, DimensionError
from talkinghead.geometry import orbit_pose
from talkinghead.gradcheck import check_function, check_parameters
from talkinghead.model import TalkingHeadModel
from talkinghead.renderer import PointDecoder, RadianceSample, composite, integrate_ray
from talkinghead.tensor import Tensor, default_dtype, no_grad


class TestDecoder:
    def test_zero_feature(self):
        dec = PointDecoder(48, np.random.default_rng(0))
        dec.zero_biases()
        c, sigma = dec(Tensor(np.zeros((3, 48), np.float32)))
        np.testing.assert_allclose(c.data, 0.5)
        np.testing.assert_allclose(sigma.data, np.log(2.0), rtol=1e-6)

    def test_ranges(self):
        dec = PointDecoder(48, np.random.default_rng(1))
        c, sigma = dec(Tensor(np.random.default_rng(2).normal(0, 5, (100, 48))))
        assert (sigma.data >= 0).all()
        assert ((c.data >= 0) & (c.data <= 1)).all()

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            PointDecoder(48, np.random.default_rng(0))(Tensor(np.zeros((2, 47))))

    def test_gradient(self):
        with default_dtype(np.float64):
            dec = PointDecoder(8, np.random.default_rng(3), hidden=6)
        feats = np.random.default_rng(4).uniform(-1, 1, (5, 8))

        def loss():
            c, s = dec(Tensor(feats))
            return (c * c).sum() + s.sum()

        res = check_parameters("decoder", loss, dec.parameters(), 1e-4, np.random.default_rng(0))
        assert res.passed, res.line()


class TestIntegrate:
    def test_zero_density(self):
        rgb, w = integrate_ray([RadianceSample(t, (1.0, 1.0, 1.0), 0.0) for t in (1.0, 2.0, 3.0)], 4.0)
        np.testing.assert_array_equal(rgb, 0)
        assert w.sum() == 0

    def test_half_alpha(self):
        ln2 = np.log(2.0)
        rgb, w = integrate_ray([RadianceSample(0.0, (1, 0, 0), ln2), RadianceSample(1.0, (0, 1, 0), ln2)], 2.0)
        np.testing.assert_allclose(rgb, [0.5, 0.25, 0.0], atol=1e-12)
        np.testing.assert_allclose(w, [0.5, 0.25], atol=1e-12)

    def test_non_monotone_depths(self):
        with pytest.raises(ContractError):
            integrate_ray([RadianceSample(1.0, (0, 0, 0), 1.0), RadianceSample(1.0, (0, 0, 0), 1.0)], 2.0)
        with pytest.raises(ContractError):
            integrate_ray([RadianceSample(2.0, (0, 0, 0), 1.0), RadianceSample(1.0, (0, 0, 0), 1.0)], 3.0)

    def test_piecewise_constant_closed_form(self):
        # density s_k and color c_k on [t_k, t_{k+1}); the continuous integral is
        # sum_k exp(-sum_{j<k} s_j d_j) (1 - exp(-s_k d_k)) c_k
        rng = np.random.default_rng(0)
        edges = np.sort(rng.uniform(0, 4, 7))
        sig = rng.uniform(0, 3, 6)
        col = rng.uniform(0, 1, (6, 3))
        d = np.diff(edges)
        want = np.zeros(3)
        for k in range(6):
            want += np.exp(-np.dot(sig[:k], d[:k])) * (1 - np.exp(-sig[k] * d[k])) * col[k]
        rgb, _ = integrate_ray([RadianceSample(edges[k], tuple(col[k]), sig[k]) for k in range(6)], edges[-1])
        np.testing.assert_allclose(rgb, want, rtol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 24))
    def test_weights_and_transmittance(self, seed, n):
        rng = np.random.default_rng(seed)
        t = np.cumsum(rng.uniform(0.01, 0.5, (3, n)), axis=1)
        sigma = rng.exponential(2.0, (3, n))
        color = rng.uniform(0, 1, (3, n, 3))
        with default_dtype(np.float64):
            out = composite(t, t[:, -1] + 0.3, Tensor(sigma), Tensor(color))
        w, trans = out.weights.data, out.transmittance.data
        assert (w.sum(axis=1) <= 1 + 1e-12).all() and (w >= 0).all()
        np.testing.assert_array_equal(trans[:, 0], 1.0)
        assert (np.diff(trans, axis=1) <= 1e-15).all()
        assert (out.rgb.data <= color.max(axis=1) + 1e-12).all()

    def test_background(self):
        t = np.array([[1.0, 2.0]])
        with default_dtype(np.float64):
            out = composite(t, np.array([3.0]), Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2, 3))), background=0.5)
        np.testing.assert_allclose(out.rgb.data, 0.5)

    def test_gradient_wrt_samples(self):
        rng = np.random.default_rng(5)
        t = np.cumsum(rng.uniform(0.1, 0.4, (2, 5)), axis=1)
        far = t[:, -1] + 0.2
        res = check_function("composite", lambda s, c: composite(t, far, s, c).rgb,
                             [rng.uniform(0.1, 2, (2, 5)), rng.uniform(0, 1, (2, 5, 3))], 1e-5, rng)
        assert res.passed, res.line()


def tiny_config(**kw):
    base = dict(coarse_size=16, image_size=32, source_size=16, grid_size=4, n_samples=8,
                plane_channels=3, pyramid_channels=6, slot_dim=8, attn_dim=8, audio_dim=8,
                deform_hidden=8, decoder_hidden=8, sr_channels=4)
    return Config(**{**base, **kw})


def contexts(model, seed=0):
    rng = np.random.default_rng(seed)
    src = rng.uniform(0, 1, (3, 32, 32))
    ctx = model.prepare(src, orbit_pose(0.0, 0.0, 2.0))
    return ctx, model.frame(ctx, rng.uniform(0, 1, 64))


class TestRenderCoarse:
    def test_constant_field(self):
        # constant color equal to the background: opacity differences cannot show
        model = TalkingHeadModel(tiny_config(background=0.6))
        model.decoder.l2.weight.data[...] = 0
        model.decoder.l2.bias.data[...] = [1.5, *[np.log(0.6 / 0.4)] * 3]
        with no_grad():
            ctx, fctx = contexts(model)
            img, _ = model.render_coarse(ctx, fctx, orbit_pose(0.2, 0.1, 2.0))
        np.testing.assert_allclose(img.data, 0.6, atol=1e-6)

    def test_seed_determinism(self):
        model = TalkingHeadModel(tiny_config())
        with no_grad():
            ctx, fctx = contexts(model)
            a, _ = model.render_coarse(ctx, fctx, orbit_pose(0.1, 0.0, 2.0), seed=3)
            b, _ = model.render_coarse(ctx, fctx, orbit_pose(0.1, 0.0, 2.0), seed=3)
        assert np.array_equal(a.data, b.data)

    def test_ranges(self):
        model = TalkingHeadModel(tiny_config())
        with no_grad():
            ctx, fctx = contexts(model, 1)
            img, opacity = model.render_coarse(ctx, fctx, orbit_pose(-0.1, 0.05, 2.0))
        assert img.shape == (3, 16, 16)
        assert ((img.data >= 0) & (img.data <= 1)).all()
        assert ((opacity.data >= 0) & (opacity.data <= 1 + 1e-6)).all()

    def test_quadrature_convergence(self):
        diffs = []
        prev = None
        for n in (8, 16, 32, 64, 128):
            model = TalkingHeadModel(tiny_config(n_samples=n, deform_enabled=False))
            with no_grad(), default_dtype(np.float64):
                ctx, fctx = contexts(model, 2)
                img, _ = model.render_coarse(ctx, fctx, orbit_pose(0.0, 0.0, 2.0))
            if prev is not None:
                diffs.append(np.abs(img.data - prev).mean())
            prev = img.data
        assert diffs[-1] < 0.02 * np.abs(prev).mean()
        assert all(b <= a + 1e-3 for a, b in zip(diffs, diffs[1:]))

    def test_pixel_gradient_to_plane_entries(self):
        with default_dtype(np.float64):
            model = TalkingHeadModel(tiny_config(n_samples=4))
            ctx, fctx = contexts(model, 3)
            pose = orbit_pose(0.1, 0.05, 2.0)
            plane = ctx.triplanes.levels[1][0]
            plane.requires_grad = True

            def loss(p):
                ctx.triplanes.levels[1] = (p,) + ctx.triplanes.levels[1][1:]
                out = model.render_pixels(ctx, fctx, pose, np.array([[8.5, 7.5]]))
                return (out.composite.rgb - 0.3).sum()

            res = check_function("pixel_plane", loss, [plane.data.copy()], 1e-5, np.random.default_rng(0))
        assert res.passed, res.line()
