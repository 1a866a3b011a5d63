"""Deterministic synthetic text scenes and training augmentations."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .labelgen import CharScene
from .postprocess import min_area_rect, order_clockwise
from .tensor.nn import bilinear_matrix

BACKGROUNDS = ("flat", "gradient", "clutter")
GLYPHS = ("rect", "ellipse", "bars")
MAX_ATTEMPTS = 100


@dataclass
class SceneSpec:
    seed: int = 0
    canvas: tuple = (128, 128)
    num_words: tuple = (1, 3)
    chars_per_word: tuple = (2, 5)
    char_size: tuple = (12, 20)
    margin: int = 2
    word_gap: int = 8
    backgrounds: tuple = BACKGROUNDS
    glyphs: tuple = GLYPHS

    def __post_init__(self):
        self.canvas = tuple(int(v) for v in self.canvas)
        self.num_words = tuple(int(v) for v in self.num_words)
        self.chars_per_word = tuple(int(v) for v in self.chars_per_word)
        self.char_size = tuple(int(v) for v in self.char_size)
        self.backgrounds = tuple(self.backgrounds)
        self.glyphs = tuple(self.glyphs)
        if self.num_words[0] < 0 or self.num_words[0] > self.num_words[1]:
            raise ValueError("num_words must be a non-negative (lo, hi) range")
        if self.chars_per_word[0] < 1 or self.chars_per_word[0] > self.chars_per_word[1]:
            raise ValueError("chars_per_word must be a positive (lo, hi) range")
        if self.char_size[0] < 4 or self.char_size[0] > self.char_size[1]:
            raise ValueError("char_size must be a (lo, hi) range with lo >= 4")
        if any(b not in BACKGROUNDS for b in self.backgrounds):
            raise ValueError(f"backgrounds must be drawn from {BACKGROUNDS}")
        if any(g not in GLYPHS for g in self.glyphs):
            raise ValueError(f"glyphs must be drawn from {GLYPHS}")

    def to_dict(self) -> dict:
        return asdict(self)


# -- drawing ----------------------------------------------------------------------

def _random_color(rng, avoid=None, min_dist: float = 0.45) -> np.ndarray:
    for _ in range(50):
        c = rng.uniform(0, 1, 3)
        if avoid is None or abs(c.mean() - avoid.mean()) >= min_dist:
            return c
    return 1.0 - avoid if avoid is not None else c


def _background(rng, kind: str, hw) -> np.ndarray:
    H, W = hw
    base = rng.uniform(0, 1, 3)
    img = np.empty((3, H, W))
    img[:] = base[:, None, None]
    if kind == "gradient":
        other = rng.uniform(0, 1, 3)
        ang = rng.uniform(0, 2 * math.pi)
        ys, xs = np.mgrid[0:H, 0:W]
        t = (xs * math.cos(ang) + ys * math.sin(ang))
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        img = base[:, None, None] * (1 - t) + other[:, None, None] * t
    elif kind == "clutter":
        for _ in range(rng.integers(2, 6)):
            h = rng.integers(H // 5, H // 2)
            w = rng.integers(W // 5, W // 2)
            y = rng.integers(0, H - h)
            x = rng.integers(0, W - w)
            shade = np.clip(base + rng.uniform(-0.2, 0.2, 3), 0, 1)
            img[:, y:y + h, x:x + w] = shade[:, None, None]
    return img


def _draw_glyph(img: np.ndarray, kind: str, x0: int, y0: int, w: int, h: int, color, rng) -> None:
    ys, xs = np.mgrid[y0:y0 + h, x0:x0 + w]
    if kind == "rect":
        mask = np.ones((h, w), dtype=bool)
    elif kind == "ellipse":
        cy, cx = y0 + h / 2.0, x0 + w / 2.0
        mask = ((xs + 0.5 - cx) / (w / 2.0)) ** 2 + ((ys + 0.5 - cy) / (h / 2.0)) ** 2 <= 1.0
    else:
        # two or three vertical strokes joined by a top or bottom bar
        n = int(rng.integers(2, 4))
        stroke = max(1, w // (2 * n))
        mask = np.zeros((h, w), dtype=bool)
        for k in range(n):
            left = int(round(k * (w - stroke) / (n - 1)))
            mask[:, left:left + stroke] = True
        bar = max(1, h // 6)
        if rng.random() < 0.5:
            mask[:bar] = True
        else:
            mask[-bar:] = True
    region = img[:, y0:y0 + h, x0:x0 + w]
    region[:, mask] = np.asarray(color)[:, None]


def _boxes_overlap(a, b, pad: int) -> bool:
    return not (a[2] + pad <= b[0] or b[2] + pad <= a[0]
                or a[3] + pad <= b[1] or b[3] + pad <= a[1])


def _odd_center_origin(rng, lo: int, hi: int, half: int) -> int | None:
    """Origin in [lo, hi] whose box center (origin + half) is an odd integer."""
    candidates = [v for v in range(lo, hi + 1) if (v + half) % 2 == 1]
    if not candidates:
        return None
    return int(rng.choice(candidates))


def _word_layout(rng, spec: SceneSpec):
    n = int(rng.integers(spec.chars_per_word[0], spec.chars_per_word[1] + 1))
    h = 2 * int(rng.integers((spec.char_size[0] + 1) // 2, spec.char_size[1] // 2 + 1))
    w = max(4, 2 * int(round(h * rng.uniform(0.6, 0.9) / 2)))
    # even gaps keep consecutive char centers an even distance apart
    gaps = [g for g in range(2, w + 1, 2) if 0.1 * w <= g <= 0.4 * w]
    gap = int(rng.choice(gaps)) if gaps else max(1, int(round(0.25 * w)))
    return n, w, h, gap


def generate_scene(spec: SceneSpec, index: int) -> CharScene:
    """Scene ``index`` of the corpus defined by ``spec`` (pure function of both).

    Character centers land on odd integer coordinates, i.e. on pixel centers of
    the half-resolution score maps.
    """
    rng = np.random.default_rng([int(spec.seed), int(index)])
    H, W = spec.canvas
    bg_kind = spec.backgrounds[int(rng.integers(len(spec.backgrounds)))]
    img = _background(rng, bg_kind, (H, W))
    n_words = int(rng.integers(spec.num_words[0], spec.num_words[1] + 1))
    placed: list = []
    words: list = []
    for _ in range(n_words):
        for _attempt in range(MAX_ATTEMPTS):
            n, w, h, gap = _word_layout(rng, spec)
            total_w = n * w + (n - 1) * gap
            if total_w + 2 * spec.margin > W or h + 2 * spec.margin > H:
                continue
            x0 = _odd_center_origin(rng, spec.margin, W - spec.margin - total_w, w // 2)
            y0 = _odd_center_origin(rng, spec.margin, H - spec.margin - h, h // 2)
            if x0 is None or y0 is None:
                continue
            box = (x0, y0, x0 + total_w, y0 + h)
            if any(_boxes_overlap(box, other, spec.word_gap) for other in placed):
                continue
            placed.append(box)
            local_bg = img[:, y0:y0 + h, x0:x0 + total_w].reshape(3, -1).mean(axis=1)
            color = _random_color(rng, avoid=local_bg)
            glyph = spec.glyphs[int(rng.integers(len(spec.glyphs)))]
            quads = []
            for k in range(n):
                cx0 = x0 + k * (w + gap)
                _draw_glyph(img, glyph, cx0, y0, w, h, color, rng)
                quads.append(np.array([[cx0, y0], [cx0 + w, y0], [cx0 + w, y0 + h], [cx0, y0 + h]],
                                      dtype=np.float64))
            words.append(quads)
            break
    return CharScene(np.clip(img, 0, 1).astype(np.float32), words)


def word_quad(word) -> np.ndarray:
    """Minimum-area rectangle around all character vertices of a word."""
    pts = np.concatenate([np.asarray(q, dtype=np.float64) for q in word])
    rect, _, _ = min_area_rect(pts)
    return order_clockwise(rect)


def word_quads(scene: CharScene) -> list[np.ndarray]:
    return [word_quad(w) for w in scene.words if len(w)]


# -- augmentation -----------------------------------------------------------------

def _border_color(img: np.ndarray) -> np.ndarray:
    border = np.concatenate([img[:, 0, :], img[:, -1, :], img[:, :, 0], img[:, :, -1]], axis=1)
    return border.mean(axis=1)


def _sample_bilinear(img: np.ndarray, sx: np.ndarray, sy: np.ndarray, fill) -> np.ndarray:
    C, H, W = img.shape
    inside = (sx >= -0.5) & (sx <= W - 0.5) & (sy >= -0.5) & (sy <= H - 0.5)
    x = np.clip(sx, 0, W - 1)
    y = np.clip(sy, 0, H - 1)
    x0 = np.minimum(np.floor(x).astype(int), W - 2)
    y0 = np.minimum(np.floor(y).astype(int), H - 2)
    fx, fy = x - x0, y - y0
    out = (img[:, y0, x0] * (1 - fx) * (1 - fy) + img[:, y0, x0 + 1] * fx * (1 - fy)
           + img[:, y0 + 1, x0] * (1 - fx) * fy + img[:, y0 + 1, x0 + 1] * fx * fy)
    return np.where(inside[None], out, np.asarray(fill)[:, None])


def rotate_points(pts, angle_deg: float, center) -> np.ndarray:
    """Rotate (N, 2) points by ``angle_deg`` (clockwise on screen) about ``center``."""
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    p = np.asarray(pts, dtype=np.float64) - center
    return np.stack([c * p[:, 0] - s * p[:, 1], s * p[:, 0] + c * p[:, 1]], axis=1) + center


def rotate_scene(scene: CharScene, angle_deg: float) -> CharScene:
    if angle_deg == 0:
        return scene.copy()
    C, H, W = scene.image.shape
    center = np.array([W / 2.0, H / 2.0])
    ys, xs = np.mgrid[0:H, 0:W]
    dst = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    src = rotate_points(dst, -angle_deg, center)
    img = _sample_bilinear(scene.image.astype(np.float64), src[:, 0] - 0.5, src[:, 1] - 0.5,
                           _border_color(scene.image))
    img = img.reshape(C, H, W)
    words = []
    for word in scene.words:
        quads = []
        for q in word:
            r = rotate_points(q, angle_deg, center)
            r[:, 0] = np.clip(r[:, 0], 0, W)
            r[:, 1] = np.clip(r[:, 1], 0, H)
            quads.append(r)
        words.append(quads)
    return CharScene(img.astype(scene.image.dtype), words)


def flip_scene(scene: CharScene) -> CharScene:
    """Horizontal mirror; quads re-ordered clockwise and chars re-ordered left to right."""
    W = scene.image.shape[2]
    words = []
    for word in scene.words:
        flipped = []
        for q in word:
            m = np.asarray(q, dtype=np.float64).copy()
            m[:, 0] = W - m[:, 0]
            flipped.append(m[[1, 0, 3, 2]])
        words.append(flipped[::-1])
    return CharScene(np.ascontiguousarray(scene.image[:, :, ::-1]), words)


def swap_channels(scene: CharScene, perm) -> CharScene:
    out = scene.copy()
    out.image = np.ascontiguousarray(scene.image[list(perm)])
    return out


def augment(scene: CharScene, rng: np.random.Generator, angle: float | None = None,
            flip: bool | None = None, swap: bool | None = None,
            max_angle: float = 10.0) -> CharScene:
    """Random rotation, horizontal flip (p=0.5) and channel permutation (p=0.5).

    Passing ``angle``/``flip``/``swap`` forces that component.
    """
    if angle is None:
        angle = float(rng.uniform(-max_angle, max_angle))
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if swap is None:
        swap = bool(rng.random() < 0.5)
    out = rotate_scene(scene, angle)
    if flip:
        out = flip_scene(out)
    if swap:
        out = swap_channels(out, rng.permutation(3))
    return out


def resize_keep_aspect(scene: CharScene, long_side: int) -> tuple[CharScene, float]:
    """Scale so the longer side equals ``long_side``, then pad bottom/right to
    multiples of 32. Returns the new scene and the applied scale."""
    if long_side % 32:
        raise ValueError("long_side must be divisible by 32")
    C, H, W = scene.image.shape
    scale = long_side / max(H, W)
    nh, nw = max(1, int(round(H * scale))), max(1, int(round(W * scale)))
    img = scene.image.astype(np.float64)
    if (nh, nw) != (H, W):
        img = bilinear_matrix(H, nh) @ img @ bilinear_matrix(W, nw).T
    ph, pw = -(-nh // 32) * 32, -(-nw // 32) * 32
    if (ph, pw) != (nh, nw):
        fill = _border_color(img)
        padded = np.empty((C, ph, pw))
        padded[:] = fill[:, None, None]
        padded[:, :nh, :nw] = img
        img = padded
    words = [[np.asarray(q, dtype=np.float64) * scale for q in w] for w in scene.words]
    return CharScene(img.astype(scene.image.dtype), words), scale


# -- files ------------------------------------------------------------------------

def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def annotation_json(image_name: str, scene: CharScene) -> dict:
    return {"image": image_name,
            "words": [[np.asarray(q).tolist() for q in word] for word in scene.words]}


def load_annotation(path) -> tuple[str, list]:
    obj = json.loads(Path(path).read_text())
    words = [[np.asarray(q, dtype=np.float64) for q in w] for w in obj["words"]]
    return obj["image"], words


def write_corpus(out_dir, spec: SceneSpec, count: int, start: int = 0) -> dict:
    """Write ``count`` scenes as PNG + annotation JSON plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(start, start + count):
        scene = generate_scene(spec, i)
        img_name = f"scene_{i:05d}.png"
        ann_name = f"scene_{i:05d}.json"
        save_image(out / img_name, scene.image)
        (out / ann_name).write_text(json.dumps(annotation_json(img_name, scene)))
        files.append({"image": img_name, "annotation": ann_name})
    manifest = {"spec": spec.to_dict(), "seed": spec.seed, "start": start,
                "count": count, "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_corpus(corpus_dir) -> list[CharScene]:
    """Read every scene listed in a corpus manifest."""
    root = Path(corpus_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    scenes = []
    for entry in manifest["files"]:
        image_name, words = load_annotation(root / entry["annotation"])
        scenes.append(CharScene(load_image(root / image_name), words))
    return scenes
