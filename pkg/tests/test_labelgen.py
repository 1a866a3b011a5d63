import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vartext.labelgen import (
    CharScene,
    WarpStats,
    affinity_quad,
    build_pyramid,
    gaussian_template,
    generate_targets,
    quad_center,
    render_score_maps,
    warp_to_quad,
    word_affinity_quads,
)
from vartext.postprocess import ccl
from vartext.synthdata import SceneSpec, flip_scene, generate_scene
from vartext.tensor import Tensor, resize_area


def square(x, y, s):
    return np.array([[x, y], [x + s, y], [x + s, y + s], [x, y + s]], dtype=np.float64)


class TestTemplate:
    def test_center_is_one(self):
        t = gaussian_template(65, 0.25)
        assert t[32, 32] == 1.0
        assert t.max() == 1.0

    def test_two_sigma(self):
        t = gaussian_template(9, 2 / 9)  # sigma = 2, center at 4
        assert t[4, 8] == pytest.approx(math.exp(-2), rel=1e-12)
        assert t[4, 8] == pytest.approx(0.13534, abs=1e-5)

    def test_symmetries(self):
        t = gaussian_template()
        np.testing.assert_array_equal(t, np.rot90(t))
        np.testing.assert_array_equal(t, t[::-1])
        np.testing.assert_array_equal(t, t[:, ::-1])

    def test_default_peak_near_one(self):
        t = gaussian_template()
        assert t.shape == (64, 64) and t.max() > 0.99

    def test_too_small(self):
        with pytest.raises(ValueError):
            gaussian_template(4)


class TestWarp:
    def test_identity_warp(self):
        t = gaussian_template()
        canvas = warp_to_quad(t, square(0, 0, 64), np.zeros((64, 64)))
        np.testing.assert_allclose(canvas, t, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(4, 40), st.floats(4, 40), st.floats(6, 20), st.floats(6, 20),
           st.floats(-0.3, 0.3), st.floats(-0.3, 0.3))
    def test_peak_at_diagonal_intersection(self, x, y, w, h, skew, tilt):
        quad = np.array([[x, y], [x + w, y + tilt * w], [x + w + skew * h, y + h + tilt * w],
                         [x + skew * h, y + h]])
        # place the diagonal intersection on a pixel center
        c = quad_center(quad)
        quad = quad + (np.floor(c) + 0.5 - c)
        canvas = warp_to_quad(gaussian_template(), quad, np.zeros((80, 80)))
        cx, cy = quad_center(quad)
        assert canvas[int(cy), int(cx)] >= 0.99

    def test_disjoint_union(self):
        t = gaussian_template()
        a, b = square(2, 2, 10), square(20, 20, 12)
        both = warp_to_quad(t, b, warp_to_quad(t, a, np.zeros((40, 40))))
        sa = warp_to_quad(t, a, np.zeros((40, 40)))
        sb = warp_to_quad(t, b, np.zeros((40, 40)))
        np.testing.assert_array_equal(both, sa + sb)

    def test_max_compositing(self):
        t = gaussian_template()
        canvas = np.full((20, 20), 0.5)
        warp_to_quad(t, square(2, 2, 10), canvas)
        assert canvas.min() == 0.5 and canvas.max() > 0.9

    def test_degenerate_skipped(self):
        stats = WarpStats()
        canvas = np.zeros((10, 10))
        warp_to_quad(gaussian_template(), np.array([[1, 1], [5, 5], [5, 5], [1, 1.0]]), canvas, stats)
        assert stats.skipped == 1 and not canvas.any()

    def test_values_in_unit_interval(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            canvas = np.zeros((32, 32))
            for _ in range(3):
                warp_to_quad(gaussian_template(), square(*rng.uniform(-5, 25, 2), rng.uniform(3, 12)),
                             canvas)
            assert canvas.min() >= 0.0 and canvas.max() <= 1.0


class TestAffinity:
    def test_unit_squares(self):
        q = affinity_quad(square(0, 0, 1), square(2, 0, 1))
        expected = [(0.5, 1 / 6), (2.5, 1 / 6), (2.5, 5 / 6), (0.5, 5 / 6)]
        np.testing.assert_allclose(q, expected, atol=1e-12)

    def test_tiny_result_skipped(self):
        assert affinity_quad(square(0, 0, 1), square(1, 0, 1)) is None

    @pytest.mark.parametrize("n", [1, 2, 3, 6])
    def test_count(self, n):
        word = [square(10 * k, 0, 8) for k in range(n)]
        assert len(word_affinity_quads(word)) == n - 1

    def test_mirror(self):
        W = 40.0
        a, b = square(4, 3, 8), square(15, 3, 8)

        def mirror(q):
            m = q.copy()
            m[:, 0] = W - m[:, 0]
            return m[[1, 0, 3, 2]]

        q = affinity_quad(a, b)
        qm = affinity_quad(mirror(b), mirror(a))
        np.testing.assert_allclose(qm, mirror(q), atol=1e-12)


class TestTargets:
    def test_empty_scene(self):
        tp = generate_targets(CharScene(np.zeros((3, 64, 64), np.float32), []))
        assert tp.full.shape == (2, 32, 32) and not tp.full.any()
        assert all(not lv.any() for lv in tp.levels)

    def test_single_char(self):
        scene = CharScene(np.zeros((3, 64, 64), np.float32), [[square(20, 10, 14)]])
        tp = generate_targets(scene)
        assert not tp.affinity.any()
        assert tp.region[(10 + 7) // 2, (20 + 7) // 2] >= 0.99

    def test_level_shapes_and_means(self):
        tp = generate_targets(generate_scene(SceneSpec(seed=0), 3))
        assert [lv.shape for lv in tp.levels] == [(2, 64 // 2 ** k, 64 // 2 ** k) for k in range(5)]
        assert tp.levels[4].shape == (2, 4, 4)
        np.testing.assert_allclose(tp.levels[4].mean(axis=(1, 2)), tp.levels[0].mean(axis=(1, 2)),
                                   rtol=1e-12, atol=1e-15)

    def test_level_one_is_full(self):
        tp = generate_targets(generate_scene(SceneSpec(seed=0), 4))
        assert tp.levels[0] is tp.full

    def test_pyramid_exact(self):
        for i in range(10):
            tp = generate_targets(generate_scene(SceneSpec(seed=1), i))
            for a, b in zip(tp.levels[:-1], tp.levels[1:]):
                h, w = b.shape[1:]
                ref = resize_area(Tensor(a[None], dtype=np.float64), h, w).data[0]
                np.testing.assert_array_equal(b, ref)

    def test_region_peaks_at_char_centers(self):
        spec = SceneSpec(seed=0)
        for i in range(50):
            scene = generate_scene(spec, i)
            region = generate_targets(scene).region
            for q in scene.char_quads:
                cx, cy = quad_center(q) / 2
                assert region[int(cy), int(cx)] >= 0.99

    def test_affinity_blob_count(self):
        spec = SceneSpec(seed=0)
        for i in range(100):
            scene = generate_scene(spec, i)
            _, count = ccl(generate_targets(scene).affinity > 0.5)
            assert count == sum(len(w) - 1 for w in scene.words)

    def test_flip_commutes(self):
        spec = SceneSpec(seed=2)
        for i in range(20):
            scene = generate_scene(spec, i)
            a = generate_targets(flip_scene(scene)).full
            b = generate_targets(scene).full[:, :, ::-1]
            np.testing.assert_allclose(a, b, atol=1e-6)

    def test_render_scale(self):
        # pixel k covers [k, k+1): the peak is exact when the scaled centre is k + 0.5
        full = render_score_maps([[square(8.5, 8.5, 16)]], (32, 32), scale=1.0)
        half = render_score_maps([[square(9, 9, 16)]], (16, 16), scale=0.5)
        assert full[0, 16, 16] > 0.99 and half[0, 8, 8] > 0.99
        assert full[0].argmax() == 16 * 32 + 16 and half[0].argmax() == 8 * 16 + 8

    def test_build_pyramid_length(self):
        assert len(build_pyramid(np.zeros((2, 64, 64)))) == 5
