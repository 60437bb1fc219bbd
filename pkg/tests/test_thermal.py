import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thermoslam.geometry import PinholeIntrinsics, Pose, quat_from_rotvec
from thermoslam.thermal import (
    FusionPipeline,
    TemporalSmoother,
    ThermalImage,
    ThermalStats,
    adaptive_threshold,
    apply_colormap,
    bilinear_sample,
    frame_stats,
    fuse,
    homography_from_pose,
    iron_colormap,
    normalize,
    register_thermal,
    segment_hot,
    temporal_smooth,
)


def make_thermal(values, t_min=20.0, t_max=40.0, valid=None):
    return ThermalImage(values=np.asarray(values, dtype=float), timestamp_ns=0, t_min=t_min, t_max=t_max, valid=valid)


def flood_fill_components(mask):
    """Brute-force 8-connected labeling oracle (BFS)."""
    mask = np.asarray(mask, dtype=bool)
    labels = np.zeros(mask.shape, dtype=int)
    next_label = 0
    for r0 in range(mask.shape[0]):
        for c0 in range(mask.shape[1]):
            if not mask[r0, c0] or labels[r0, c0]:
                continue
            next_label += 1
            stack = [(r0, c0)]
            labels[r0, c0] = next_label
            while stack:
                r, c = stack.pop()
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < mask.shape[0] and 0 <= cc < mask.shape[1]:
                            if mask[rr, cc] and not labels[rr, cc]:
                                labels[rr, cc] = next_label
                                stack.append((rr, cc))
    return labels, next_label


class TestNormalize:
    def test_bounds(self):
        t = make_thermal([[20.0, 40.0]])
        np.testing.assert_allclose(normalize(t), [[0.0, 1.0]])

    def test_hand_value(self):
        t = make_thermal([[35.0]])
        np.testing.assert_allclose(normalize(t), [[0.75]])

    def test_clipping(self):
        t = make_thermal([[10.0, 55.0]])
        np.testing.assert_allclose(normalize(t), [[0.0, 1.0]])

    def test_rejects_inverted_bounds(self):
        with pytest.raises(ValueError):
            make_thermal([[25.0]], t_min=40.0, t_max=20.0)


class TestAdaptiveThreshold:
    def test_hand_value(self):
        # (30 + 2*2 - 20) / (40 - 20) = 0.7
        stats = ThermalStats(mu=30.0, sigma=2.0, k_sigma=2.0)
        assert adaptive_threshold(stats, 20.0, 40.0) == pytest.approx(0.7, abs=1e-12)

    def test_lower_clip(self):
        stats = ThermalStats(mu=18.0, sigma=0.5, k_sigma=2.0)
        assert adaptive_threshold(stats, 20.0, 40.0) == 0.0

    def test_upper_clip(self):
        stats = ThermalStats(mu=39.0, sigma=3.0, k_sigma=2.0)
        assert adaptive_threshold(stats, 20.0, 40.0) == 1.0

    def test_monotone_in_k(self):
        prev = -1.0
        for k in np.arange(0.0, 4.01, 0.5):
            th = adaptive_threshold(ThermalStats(mu=28.0, sigma=2.5, k_sigma=float(k)), 20.0, 40.0)
            assert th >= prev
            prev = th

    def test_frame_stats_excludes_invalid(self):
        vals = np.array([[30.0, 30.0], [900.0, 30.0]])
        valid = np.array([[True, True], [False, True]])
        stats = frame_stats(make_thermal(vals, valid=valid), k_sigma=2.0)
        assert stats.mu == pytest.approx(30.0)
        assert stats.sigma == pytest.approx(0.0)


class TestSegmentHot:
    def test_uniform_below_threshold(self):
        hot = segment_hot(np.full((16, 16), 0.2), 0.5)
        assert hot.components == []
        assert not hot.weights.any()

    def test_single_square_centroid(self):
        norm = np.zeros((64, 64))
        norm[20:30, 40:50] = 0.9
        cel = norm * 20 + 20
        hot = segment_hot(norm, 0.5, celsius=cel)
        assert len(hot.components) == 1
        comp = hot.components[0]
        assert comp.pixel_count == 100
        assert comp.centroid[0] == pytest.approx(44.5, abs=0.5)
        assert comp.centroid[1] == pytest.approx(24.5, abs=0.5)
        assert comp.peak_celsius == pytest.approx(38.0)

    def test_two_disjoint_squares(self):
        norm = np.zeros((64, 64))
        norm[5:10, 5:10] = 1.0
        norm[40:50, 40:45] = 1.0
        hot = segment_hot(norm, 0.5)
        counts = sorted(c.pixel_count for c in hot.components)
        assert counts == [25, 50]

    def test_matches_flood_fill_oracle_on_random_masks(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            mask = rng.random((64, 64)) < 0.35
            hot = segment_hot(mask.astype(float), 0.5)
            oracle_labels, oracle_count = flood_fill_components(mask)
            assert len(hot.components) == oracle_count
            # same partition: each library component maps to exactly one oracle label
            for comp in hot.components:
                sel = hot.labels == comp.label
                assert len(np.unique(oracle_labels[sel])) == 1
                assert comp.pixel_count == int(np.sum(sel))


class TestTemporalSmooth:
    def test_alpha_one_returns_current(self):
        cur, prev = np.full((4, 4), 0.8), np.full((4, 4), 0.3)
        np.testing.assert_array_equal(temporal_smooth(cur, prev, 1.0), cur)

    def test_alpha_zero_returns_previous(self):
        cur, prev = np.full((4, 4), 0.8), np.full((4, 4), 0.3)
        np.testing.assert_array_equal(temporal_smooth(cur, prev, 0.0), prev)

    def test_hand_value(self):
        cur, prev = np.full((2, 2), 0.8), np.full((2, 2), 0.4)
        np.testing.assert_allclose(temporal_smooth(cur, prev, 0.7), 0.68)

    def test_first_frame_pass_through(self):
        cur = np.full((2, 2), 0.8)
        np.testing.assert_array_equal(temporal_smooth(cur, None, 0.3), cur)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            temporal_smooth(np.zeros((2, 2)), np.zeros((3, 3)), 0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(min_value=0.0, max_value=1.0), st.integers(0, 1000))
    def test_fixed_point_and_convexity(self, alpha, seed):
        rng = np.random.default_rng(seed)
        cur = rng.random((8, 8))
        np.testing.assert_allclose(temporal_smooth(cur, cur, alpha), cur, atol=1e-15)
        prev = rng.random((8, 8))
        sm = temporal_smooth(cur, prev, alpha)
        assert np.all(sm >= np.minimum(cur, prev) - 1e-12)
        assert np.all(sm <= np.maximum(cur, prev) + 1e-12)

    def test_steady_state_noise_attenuation(self):
        # EMA of iid noise (std s) has steady-state std s*sqrt(alpha/(2-alpha))
        rng = np.random.default_rng(42)
        alpha, s = 0.7, 0.05
        smoother = TemporalSmoother(alpha)
        out = []
        for _ in range(1000):
            frame = 0.5 + rng.normal(scale=s, size=(32, 32))
            out.append(smoother.update(frame))
        steady = np.array(out[50:])
        measured = np.mean(np.std(steady, axis=0))
        expected = s * np.sqrt(alpha / (2.0 - alpha))
        assert abs(measured - expected) / expected < 0.10


class TestFuse:
    def test_weight_zero_returns_visible_bit_exact(self):
        rng = np.random.default_rng(1)
        vis = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
        th = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
        out = fuse(th, vis, np.zeros((8, 8)))
        assert out.dtype == np.uint8
        np.testing.assert_array_equal(out, vis)

    def test_weight_one_returns_thermal_bit_exact(self):
        rng = np.random.default_rng(2)
        vis = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
        th = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
        np.testing.assert_array_equal(fuse(th, vis, np.ones((8, 8))), th)

    def test_hand_value(self):
        th = np.full((1, 1, 3), (200.0, 0.0, 0.0))
        vis = np.full((1, 1, 3), (0.0, 100.0, 0.0))
        np.testing.assert_allclose(fuse(th, vis, np.full((1, 1), 0.5)), [[[100.0, 50.0, 0.0]]])

    def test_convexity_per_channel(self):
        rng = np.random.default_rng(3)
        th = rng.random((16, 16, 3)) * 255
        vis = rng.random((16, 16, 3)) * 255
        w = rng.random((16, 16))
        out = fuse(th, vis, w)
        lo = np.minimum(th, vis)
        hi = np.maximum(th, vis)
        assert np.all(out >= lo - 1e-9) and np.all(out <= hi + 1e-9)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            fuse(np.zeros((2, 2, 3)), np.zeros((3, 3, 3)), np.zeros((2, 2)))


class TestRegisterThermal:
    def test_identity_is_exact_on_grid(self):
        rng = np.random.default_rng(4)
        t = make_thermal(20 + 20 * rng.random((32, 48)))
        out = register_thermal(t, np.eye(3))
        inner = out.valid
        np.testing.assert_allclose(out.values[inner], t.values[inner], atol=1e-12)

    def test_pure_translation_shift_and_invalid_band(self):
        vals = np.tile(np.arange(48, dtype=float), (32, 1)) + 20
        t = make_thermal(vals)
        H = np.eye(3)
        H[0, 2] = 10.0  # thermal -> visible shifts +10 px in u
        out = register_thermal(t, H)
        assert not out.valid[:, :10].any()
        assert out.valid[:, 10:-1].all()
        np.testing.assert_allclose(out.values[:, 10:-1], vals[:, :-11], atol=1e-9)

    def test_singular_homography_rejected(self):
        t = make_thermal(np.full((4, 4), 25.0))
        with pytest.raises(ValueError):
            register_thermal(t, np.zeros((3, 3)))

    def test_homography_from_co_located_pair(self):
        intr_t = PinholeIntrinsics(400, 400, 160, 120, 320, 240)
        intr_v = PinholeIntrinsics(500, 500, 320, 240, 640, 480)
        H = homography_from_pose(Pose.identity(), intr_t, intr_v)
        np.testing.assert_allclose(H, intr_v.K @ np.linalg.inv(intr_t.K))
        with pytest.raises(ValueError):
            homography_from_pose(Pose(quat_from_rotvec([0, 0, 0]), [0.1, 0, 0]), intr_t, intr_v)


class TestColormapAndPipeline:
    def test_lut_shape_and_endpoints(self):
        lut = iron_colormap()
        assert lut.shape == (256, 3)
        np.testing.assert_array_equal(lut[0], [0, 0, 0])
        np.testing.assert_array_equal(lut[255], [255, 255, 255])

    def test_apply_colormap_indexing(self):
        lut = iron_colormap()
        out = apply_colormap(np.array([[0.0, 1.0]]), lut)
        np.testing.assert_array_equal(out[0, 0], lut[0])
        np.testing.assert_array_equal(out[0, 1], lut[255])

    def test_pipeline_highlights_hotspot(self):
        pipe = FusionPipeline(k_sigma=2.0, alpha=1.0)
        vals = np.full((32, 32), 22.0)
        vals[10:16, 10:16] = 38.0
        thermal = make_thermal(vals)
        visible = np.full((32, 32, 3), 90.0)
        fused, hot, threshold = pipe.process(thermal, visible)
        assert 0.0 < threshold < 1.0
        assert len(hot.components) == 1
        assert fused.weight[12, 12] == 1.0
        assert fused.weight[0, 0] == 0.0
        np.testing.assert_allclose(fused.rgb[0, 0], [90.0, 90.0, 90.0])


class TestBilinearSample:
    def test_exact_on_integer_grid(self):
        rng = np.random.default_rng(5)
        img = rng.random((10, 12))
        uv = np.array([[3.0, 4.0], [0.0, 0.0], [10.0, 8.0]])
        vals, ok = bilinear_sample(img, uv)
        assert ok.all()
        np.testing.assert_allclose(vals, img[uv[:, 1].astype(int), uv[:, 0].astype(int)])

    def test_out_of_bounds_flagged(self):
        img = np.zeros((4, 4))
        _, ok = bilinear_sample(img, np.array([[-1.0, 0.0], [3.5, 3.5], [2.0, 2.0]]))
        assert list(ok) == [False, False, True]

    def test_midpoint_average(self):
        img = np.array([[0.0, 1.0], [2.0, 3.0]])
        vals, ok = bilinear_sample(img, np.array([[0.5, 0.5]]))
        assert ok[0]
        assert vals[0] == pytest.approx(1.5)
