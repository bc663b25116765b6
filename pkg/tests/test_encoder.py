import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from talkinghead import functional as F
from talkinghead.encoder import (AppearanceEncoder, TriPlaneSet, plane_coords_map, sample_triplane,
                                 split_triplane, to_source_frame)
from talkinghead.errors import ConfigError, DimensionError
from talkinghead.geometry import Pose, orbit_pose, pose_apply, pose_invert
from talkinghead.tensor import Tensor, concat, default_dtype


@pytest.fixture(scope="module")
def encoder():
    return AppearanceEncoder(np.random.default_rng(0))


def image(seed=0, size=64):
    return np.random.default_rng(seed).uniform(0, 1, (3, size, size)).astype(np.float32)


def random_planes(rng, levels=((2, 8), (2, 4)), dtype=np.float64):
    out = []
    for c, s in levels:
        out.append(tuple(Tensor(rng.normal(size=(c, s, s)).astype(dtype)) for _ in range(3)))
    return out


class TestPyramid:
    def test_extents_halve(self, encoder):
        levels = encoder.encode_pyramid(image())
        assert [lv.shape[1] for lv in levels] == [32, 16, 8, 4]
        assert [lv.shape[2] for lv in levels] == [32, 16, 8, 4]

    def test_indivisible_extent(self, encoder):
        with pytest.raises(DimensionError):
            encoder.encode_pyramid(np.zeros((3, 40, 40), np.float32))
        with pytest.raises(DimensionError):
            encoder.encode_pyramid(np.zeros((1, 64, 64), np.float32))

    def test_zero_image_zero_bias(self):
        enc = AppearanceEncoder(np.random.default_rng(3))
        enc.zero_biases()
        x = np.zeros((3, 64, 64), np.float32)
        assert all(not lv.data.any() for lv in enc.encode_pyramid(x))
        assert all(not lv.data.any() for lv in enc(x))

    def test_deterministic(self, encoder):
        a = [lv.data for lv in encoder(image(1))]
        b = [lv.data for lv in AppearanceEncoder(np.random.default_rng(0))(image(1))]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


class TestFusion:
    def test_top_level_passes_through(self, encoder):
        pyr = encoder.encode_pyramid(image(2))
        fused = encoder.fuse_fpn(pyr)
        assert fused[-1] is pyr[-1]

    def test_concat_width(self, encoder):
        pyr = encoder.encode_pyramid(image(2))
        for i, red in enumerate(encoder.reduce):
            assert red.weight.shape[1] == encoder.up[i].weight.shape[0] + pyr[i].shape[0]

    def test_fused_channels_divisible_by_three(self, encoder):
        fused = encoder(image(4))
        assert all(f.shape[0] == 36 for f in fused)

    def test_indivisible_reduction_is_config_error(self):
        enc = AppearanceEncoder(np.random.default_rng(0), plane_channels=4)
        pyr = enc.encode_pyramid(image())
        pyr[-1] = pyr[-1][0:11]
        enc.up = [type(u)(11, 11, 3, np.random.default_rng(1)) for u in enc.up]
        enc.reduce = [type(r)(11 + pyr[i].shape[0], 11, 1, np.random.default_rng(1)) for i, r in enumerate(enc.reduce)]
        with pytest.raises(ConfigError):
            enc.fuse_fpn(pyr)


class TestSplit:
    def test_shapes_and_order(self):
        level = Tensor(np.arange(6 * 8 * 8, dtype=np.float64).reshape(6, 8, 8))
        tp = split_triplane([level])
        xy, yz, xz = tp.levels[0]
        assert xy.shape == yz.shape == xz.shape == (2, 8, 8)
        np.testing.assert_array_equal(xy.data, level.data[:2])
        np.testing.assert_array_equal(xz.data, level.data[4:])

    def test_round_trip(self):
        level = Tensor(np.random.default_rng(0).normal(size=(36, 4, 4)))
        planes = split_triplane([level]).levels[0]
        assert np.array_equal(concat(list(planes), axis=0).data, level.data)

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            split_triplane([Tensor(np.zeros((5, 4, 4)))])

    def test_feature_dim(self):
        tp = split_triplane([Tensor(np.zeros((6, 8, 8))), Tensor(np.zeros((9, 4, 4)))])
        assert tp.feature_dim == 5


def naive_lookup(tp: TriPlaneSet, pose: Pose, x: np.ndarray) -> np.ndarray:
    """Step-by-step oracle: explicit inverse pose, cube normalisation, one bilinear lookup per plane."""
    q = pose_apply(pose_invert(pose), x)
    s = (q - tp.center) / tp.bound
    out = []
    for planes in tp.levels:
        total = 0.0
        for plane, (a_idx, b_idx, flip) in zip(planes, [(1, 0, True), (1, 2, True), (2, 0, False)]):
            _, h, w = plane.shape
            row = (-s[a_idx] if flip else s[a_idx]) * (h - 1) / 2 + (h - 1) / 2
            col = s[b_idx] * (w - 1) / 2 + (w - 1) / 2
            total = total + bilinear_point(plane.data, row, col)
        out.append(total)
    return np.concatenate(out)


def bilinear_point(p, r, c):
    _, h, w = p.shape
    r, c = np.clip(r, 0, h - 1), np.clip(c, 0, w - 1)
    r0, c0 = min(int(np.floor(r)), h - 2), min(int(np.floor(c)), w - 2)
    fr, fc = r - r0, c - c0
    return ((1 - fr) * (1 - fc) * p[:, r0, c0] + (1 - fr) * fc * p[:, r0, c0 + 1]
            + fr * (1 - fc) * p[:, r0 + 1, c0] + fr * fc * p[:, r0 + 1, c0 + 1])


class TestSampling:
    def test_constant_planes(self):
        levels = [tuple(Tensor(np.full((2, 8, 8), v)) for v in (1.0, 2.0, 3.0)),
                  tuple(Tensor(np.full((2, 4, 4), 0.5)) for _ in range(3))]
        tp = TriPlaneSet(levels)
        pts = np.random.default_rng(0).uniform(-2, 2, (7, 3))
        with default_dtype(np.float64):
            out = sample_triplane(tp, orbit_pose(0.3, 0.1, 2.0), pts).data
        np.testing.assert_allclose(out, np.tile([6.0, 6.0, 1.5, 1.5], (7, 1)))

    def test_grid_node_exact(self):
        rng = np.random.default_rng(1)
        tp = TriPlaneSet(random_planes(rng, levels=((2, 5),)))
        # (x, y, z) = (0.5, -0.5, 0) lands on node (row 3, col 3) of xy, (3, 2) of yz, (2, 3) of xz
        x = np.array([[0.5, -0.5, 0.0]])
        with default_dtype(np.float64):
            out = sample_triplane(tp, Pose.identity(), x).data[0]
        xy, yz, xz = (p.data for p in tp.levels[0])
        np.testing.assert_allclose(out, xy[:, 3, 3] + yz[:, 3, 2] + xz[:, 2, 3], rtol=1e-12)

    def test_compositional_oracle(self):
        rng = np.random.default_rng(2)
        tp = TriPlaneSet(random_planes(rng), center=np.array([0.1, -0.2, 0.05]), bound=0.8)
        pose = orbit_pose(0.4, -0.2, 2.3)
        pts = pose_apply(pose, rng.uniform(-1, 1, (20, 3)))
        with default_dtype(np.float64):
            out = sample_triplane(tp, pose, pts).data
        want = np.stack([naive_lookup(tp, pose, p) for p in pts])
        np.testing.assert_allclose(out, want, rtol=1e-10, atol=1e-12)

    def test_feature_length_constant(self):
        tp = TriPlaneSet(random_planes(np.random.default_rng(3)))
        out = sample_triplane(tp, Pose.identity(), np.random.default_rng(4).uniform(-5, 5, (11, 3)))
        assert out.shape == (11, tp.feature_dim)
        assert np.isfinite(out.data).all()

    def test_to_source_frame_matches_inverse(self):
        pose = orbit_pose(-0.3, 0.2, 1.7)
        x = np.random.default_rng(5).normal(size=(4, 3))
        with default_dtype(np.float64):
            q = to_source_frame(Tensor(x), pose).data
        np.testing.assert_allclose(q, pose_apply(pose_invert(pose), x), atol=1e-12)

    def test_plane_map_corners(self):
        a, b = plane_coords_map("xy", 5, 9)
        np.testing.assert_allclose(np.array([-1.0, 1.0, 0.0]) @ a + b, [0, 0])
        np.testing.assert_allclose(np.array([1.0, -1.0, 0.0]) @ a + b, [4, 8])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-0.6, 0.6), st.floats(-0.3, 0.3))
    def test_pose_consistency(self, seed, yaw, pitch):
        rng = np.random.default_rng(seed)
        tp = TriPlaneSet(random_planes(rng, levels=((3, 8),)))
        pose = orbit_pose(yaw, pitch, 2.0)
        x = rng.uniform(-1.2, 1.2, (5, 3))
        a = sample_triplane(tp, pose, pose_apply(pose, x)).data
        b = sample_triplane(tp, Pose.identity(), x).data
        np.testing.assert_allclose(a, b, atol=1e-5)


def test_grid_sample_is_the_lookup_primitive():
    plane = Tensor(np.arange(16.0).reshape(1, 4, 4))
    np.testing.assert_allclose(F.grid_sample_bilinear(plane, np.array([[1.5, 2.0]])).data, [[8.0]])
