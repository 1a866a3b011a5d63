import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import Polygon

from vartext.labelgen import CharScene, WarpStats, generate_targets
from vartext.synthdata import (
    SceneSpec,
    augment,
    flip_scene,
    generate_scene,
    load_corpus,
    resize_keep_aspect,
    rotate_points,
    rotate_scene,
    swap_channels,
    word_quad,
    write_corpus,
)


def signed_area(q):
    x, y = q[:, 0], q[:, 1]
    return 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def is_convex_clockwise(q):
    crosses = []
    for i in range(4):
        a, b, c = q[i], q[(i + 1) % 4], q[(i + 2) % 4]
        crosses.append((b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]))
    return all(c > 0 for c in crosses)


class TestSpec:
    @pytest.mark.parametrize("kwargs", [
        {"num_words": (3, 1)}, {"chars_per_word": (0, 2)}, {"char_size": (2, 8)},
        {"backgrounds": ("noise",)}, {"glyphs": ("font",)},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SceneSpec(**kwargs)


class TestGenerate:
    def test_deterministic(self):
        a, b = generate_scene(SceneSpec(seed=3), 7), generate_scene(SceneSpec(seed=3), 7)
        np.testing.assert_array_equal(a.image, b.image)
        assert len(a.words) == len(b.words)
        for wa, wb in zip(a.words, b.words):
            for qa, qb in zip(wa, wb):
                np.testing.assert_array_equal(qa, qb)

    def test_index_changes_scene(self):
        a, b = generate_scene(SceneSpec(), 0), generate_scene(SceneSpec(), 1)
        assert not np.array_equal(a.image, b.image)

    def test_background_only(self):
        scene = generate_scene(SceneSpec(num_words=(0, 0)), 0)
        assert scene.words == []
        assert scene.image.shape == (3, 128, 128)

    def test_image_range_and_dtype(self):
        scene = generate_scene(SceneSpec(), 2)
        assert scene.image.dtype == np.float32
        assert scene.image.min() >= 0 and scene.image.max() <= 1

    def test_layout_invariants(self):
        spec = SceneSpec(seed=0)
        H, W = spec.canvas
        overlaps = 0
        for i in range(1000):
            scene = generate_scene(spec, i)
            polys = [[Polygon(q) for q in word] for word in scene.words]
            for a in range(len(polys)):
                for b in range(a + 1, len(polys)):
                    for pa in polys[a]:
                        for pb in polys[b]:
                            if pa.intersection(pb).area > 0:
                                overlaps += 1
            for word in scene.words:
                for q in word:
                    assert q[:, 0].min() >= 2 and q[:, 0].max() <= W - 2
                    assert q[:, 1].min() >= 2 and q[:, 1].max() <= H - 2
                    assert signed_area(q) > 1 and is_convex_clockwise(q)
                for a, b in zip(word[:-1], word[1:]):
                    gap = b[0, 0] - a[1, 0]
                    width = a[1, 0] - a[0, 0]
                    assert 0.1 * width <= gap <= 0.4 * width
                    assert a[0, 0] < b[0, 0]
        assert overlaps == 0

    def test_word_quad_encloses_chars(self):
        scene = generate_scene(SceneSpec(num_words=(1, 1)), 0)
        wq = Polygon(word_quad(scene.words[0]))
        for q in scene.words[0]:
            assert wq.buffer(1e-9).contains(Polygon(q))


class TestAugment:
    def scene(self):
        return generate_scene(SceneSpec(seed=5, num_words=(2, 3)), 1)

    def test_identity(self):
        s = self.scene()
        out = augment(s, np.random.default_rng(0), angle=0.0, flip=False, swap=False)
        np.testing.assert_array_equal(out.image, s.image)
        for q, r in zip(out.char_quads, s.char_quads):
            np.testing.assert_array_equal(q, r)

    def test_flip_involution(self):
        s = self.scene()
        back = flip_scene(flip_scene(s))
        np.testing.assert_array_equal(back.image, s.image)
        for q, r in zip(back.char_quads, s.char_quads):
            np.testing.assert_array_equal(q, r)

    def test_flip_keeps_order_and_winding(self):
        for word in flip_scene(self.scene()).words:
            for q in word:
                assert is_convex_clockwise(q)
            xs = [q[0, 0] for q in word]
            assert xs == sorted(xs)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-10, 10))
    def test_rotation_roundtrip(self, angle):
        c = np.array([64.0, 64.0])
        pts = np.random.default_rng(0).uniform(20, 108, size=(12, 2))
        back = rotate_points(rotate_points(pts, angle, c), -angle, c)
        np.testing.assert_allclose(back, pts, atol=0.5)

    def test_rotated_quads_convex_clockwise(self):
        rng = np.random.default_rng(1)
        spec = SceneSpec(seed=0)
        stats = WarpStats()
        for i in range(50):
            out = augment(generate_scene(spec, i), rng)
            for q in out.char_quads:
                assert is_convex_clockwise(q)
            generate_targets(out, stats)
        assert stats.skipped == 0

    def test_rotation_fills_corners_with_border_color(self):
        s = CharScene(np.full((3, 32, 32), 0.25, np.float32), [])
        out = rotate_scene(s, 10.0)
        np.testing.assert_allclose(out.image, 0.25, atol=1e-6)

    def test_swap_leaves_annotations(self):
        s = self.scene()
        out = swap_channels(s, [2, 0, 1])
        np.testing.assert_array_equal(out.image, s.image[[2, 0, 1]])
        for q, r in zip(out.char_quads, s.char_quads):
            np.testing.assert_array_equal(q, r)


class TestResize:
    def test_unchanged_geometry(self):
        s = CharScene(np.zeros((3, 480, 640), np.float32), [[np.array([[1, 2], [5, 2], [5, 7], [1, 7.0]])]])
        out, scale = resize_keep_aspect(s, 640)
        assert scale == 1.0 and out.image.shape == (3, 480, 640)
        np.testing.assert_array_equal(out.char_quads[0], s.char_quads[0])

    def test_halving(self):
        s = CharScene(np.zeros((3, 960, 1280), np.float32), [[np.array([[10, 20], [50, 20], [50, 70], [10, 70.0]])]])
        out, scale = resize_keep_aspect(s, 640)
        assert scale == 0.5 and out.image.shape == (3, 480, 640)
        np.testing.assert_array_equal(out.char_quads[0], s.char_quads[0] / 2)

    def test_square_and_padding(self):
        s = CharScene(np.random.default_rng(0).uniform(size=(3, 100, 70)).astype(np.float32), [])
        out, scale = resize_keep_aspect(s, 128)
        assert scale == pytest.approx(1.28)
        assert out.image.shape == (3, 128, 96)

    def test_rejects_bad_long_side(self):
        with pytest.raises(ValueError):
            resize_keep_aspect(generate_scene(SceneSpec(), 0), 100)


class TestCorpusFiles:
    def test_roundtrip(self, tmp_path):
        spec = SceneSpec(seed=4)
        manifest = write_corpus(tmp_path, spec, 3)
        assert len(manifest["files"]) == 3
        assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 4
        scenes = load_corpus(tmp_path)
        for i, s in enumerate(scenes):
            ref = generate_scene(spec, i)
            np.testing.assert_allclose(s.image, ref.image, atol=0.5 / 255 + 1e-6)
            for q, r in zip(s.char_quads, ref.char_quads):
                np.testing.assert_array_equal(q, r)
        ann = json.loads((tmp_path / "scene_00000.json").read_text())
        assert set(ann) == {"image", "words"} and ann["image"] == "scene_00000.png"

    def test_regeneration_is_byte_identical(self, tmp_path):
        write_corpus(tmp_path / "a", SceneSpec(seed=1), 2)
        write_corpus(tmp_path / "b", SceneSpec(seed=1), 2)
        for name in ("scene_00000.png", "scene_00001.json", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_corpus(tmp_path)
