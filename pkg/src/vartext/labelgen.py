"""Region/affinity ground-truth maps from character quadrilaterals.

Coordinates are continuous pixel coordinates, x to the right and y down, with
pixel ``(x, y)`` covering ``[x, x+1) x [y, y+1)``. Quads are (4, 2) arrays,
clockwise from the top-left vertex.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .tensor import area_downsample

logger = logging.getLogger(__name__)

TEMPLATE_SIZE = 64
SIGMA_RATIO = 0.25
NUM_LEVELS = 5


@dataclass
class CharScene:
    """An image (3, H, W) in [0, 1] plus words of character quads."""

    image: np.ndarray
    words: list = field(default_factory=list)

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    @property
    def char_quads(self) -> list[np.ndarray]:
        return [np.asarray(q, dtype=np.float64) for word in self.words for q in word]

    def copy(self) -> "CharScene":
        return CharScene(self.image.copy(),
                         [[np.array(q, dtype=np.float64) for q in w] for w in self.words])


@dataclass
class TargetPyramid:
    full: np.ndarray
    levels: list

    @property
    def region(self) -> np.ndarray:
        return self.full[0]

    @property
    def affinity(self) -> np.ndarray:
        return self.full[1]


@lru_cache(maxsize=8)
def _cached_template(size: int, sigma_ratio: float) -> np.ndarray:
    sigma = sigma_ratio * size
    c = (size - 1) / 2.0
    idx = np.arange(size) - c
    d2 = idx[:, None] ** 2 + idx[None, :] ** 2
    t = np.exp(-d2 / (2 * sigma * sigma))
    t.setflags(write=False)
    return t


def gaussian_template(size: int = TEMPLATE_SIZE, sigma_ratio: float = SIGMA_RATIO) -> np.ndarray:
    """Isotropic Gaussian on a ``size x size`` grid centered at ``(size-1)/2``."""
    if size < 8:
        raise ValueError("template size must be >= 8")
    return _cached_template(int(size), float(sigma_ratio)).copy()


def perspective_transform(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 homography mapping four ``src`` points onto ``dst``."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i], b[2 * i + 1] = u, v
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


def quad_area(quad) -> float:
    q = np.asarray(quad, dtype=np.float64)
    x, y = q[:, 0], q[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _bilinear_sample(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample ``img`` at index coordinates (u=col, v=row); zero outside."""
    h, w = img.shape
    # Quad edges often pass exactly through pixel centres; the tolerance keeps
    # such pixels from flipping in or out on last-bit rounding of the warp.
    tol = 1e-9
    inside = (u >= -0.5 - tol) & (u <= w - 0.5 + tol) & (v >= -0.5 - tol) & (v <= h - 0.5 + tol)
    u = np.clip(u, 0, w - 1)
    v = np.clip(v, 0, h - 1)
    u0 = np.minimum(np.floor(u).astype(int), w - 2)
    v0 = np.minimum(np.floor(v).astype(int), h - 2)
    fu, fv = u - u0, v - v0
    val = (img[v0, u0] * (1 - fu) * (1 - fv) + img[v0, u0 + 1] * fu * (1 - fv)
           + img[v0 + 1, u0] * (1 - fu) * fv + img[v0 + 1, u0 + 1] * fu * fv)
    return np.where(inside, val, 0.0)


class WarpStats:
    """Counts quads skipped because their transform was singular."""

    def __init__(self):
        self.skipped = 0


def warp_to_quad(template: np.ndarray, quad, canvas: np.ndarray,
                 stats: WarpStats | None = None) -> np.ndarray:
    """Max-composite ``template`` projectively warped onto ``quad`` into ``canvas``."""
    quad = np.asarray(quad, dtype=np.float64)
    size = template.shape[0]
    corners = np.array([[0, 0], [size, 0], [size, size], [0, size]], dtype=np.float64)
    if abs(quad_area(quad)) < 1e-9:
        _skip(stats, "degenerate quad")
        return canvas
    try:
        inv = perspective_transform(quad, corners)
    except np.linalg.LinAlgError:
        _skip(stats, "singular transform")
        return canvas
    if not np.all(np.isfinite(inv)):
        _skip(stats, "non-finite transform")
        return canvas

    h, w = canvas.shape
    x0 = max(int(np.floor(quad[:, 0].min())), 0)
    x1 = min(int(np.ceil(quad[:, 0].max())), w)
    y0 = max(int(np.floor(quad[:, 1].min())), 0)
    y1 = min(int(np.ceil(quad[:, 1].max())), h)
    if x0 >= x1 or y0 >= y1:
        return canvas
    ys, xs = np.mgrid[y0:y1, x0:x1]
    px = xs + 0.5
    py = ys + 0.5
    den = inv[2, 0] * px + inv[2, 1] * py + inv[2, 2]
    tu = (inv[0, 0] * px + inv[0, 1] * py + inv[0, 2]) / den
    tv = (inv[1, 0] * px + inv[1, 1] * py + inv[1, 2]) / den
    vals = _bilinear_sample(template, tu - 0.5, tv - 0.5)
    region = canvas[y0:y1, x0:x1]
    np.maximum(region, vals.astype(canvas.dtype), out=region)
    return canvas


def _skip(stats: WarpStats | None, why: str) -> None:
    if stats is not None:
        stats.skipped += 1
    logger.warning("warp_to_quad: skipping %s", why)


def _triangle_centroid(a, b, c) -> np.ndarray:
    return (np.asarray(a) + np.asarray(b) + np.asarray(c)) / 3.0


def _diagonal_intersection(quad: np.ndarray) -> np.ndarray:
    p0, p1, p2, p3 = quad
    d1 = p2 - p0
    d2 = p3 - p1
    m = np.array([d1, -d2]).T
    try:
        t = np.linalg.solve(m, p1 - p0)[0]
    except np.linalg.LinAlgError:
        return quad.mean(axis=0)
    return p0 + t * d1


def quad_center(quad) -> np.ndarray:
    """Intersection of the quad's diagonals."""
    return _diagonal_intersection(np.asarray(quad, dtype=np.float64))


def affinity_quad(char_a, char_b) -> np.ndarray | None:
    """Quad joining the top/bottom triangle centroids of two adjacent chars."""
    qa = np.asarray(char_a, dtype=np.float64)
    qb = np.asarray(char_b, dtype=np.float64)
    ca, cb = _diagonal_intersection(qa), _diagonal_intersection(qb)
    top_a = _triangle_centroid(qa[0], qa[1], ca)
    bot_a = _triangle_centroid(qa[2], qa[3], ca)
    top_b = _triangle_centroid(qb[0], qb[1], cb)
    bot_b = _triangle_centroid(qb[2], qb[3], cb)
    quad = np.array([top_a, top_b, bot_b, bot_a])
    if abs(quad_area(quad)) < 1.0:
        return None
    return quad


def word_affinity_quads(word) -> list[np.ndarray]:
    quads = []
    for a, b in zip(word[:-1], word[1:]):
        q = affinity_quad(a, b)
        if q is not None:
            quads.append(q)
    return quads


def render_score_maps(words, out_hw, scale: float = 0.5,
                      template: np.ndarray | None = None,
                      stats: WarpStats | None = None) -> np.ndarray:
    """(2, h, w) region/affinity maps for ``words`` with coordinates scaled by ``scale``."""
    if template is None:
        template = gaussian_template()
    h, w = out_hw
    maps = np.zeros((2, h, w), dtype=np.float64)
    for word in words:
        quads = [np.asarray(q, dtype=np.float64) for q in word]
        for q in quads:
            warp_to_quad(template, q * scale, maps[0], stats)
        for q in word_affinity_quads(quads):
            warp_to_quad(template, q * scale, maps[1], stats)
    return np.clip(maps, 0.0, 1.0)


def build_pyramid(full: np.ndarray, num_levels: int = NUM_LEVELS) -> list[np.ndarray]:
    levels = [full]
    for _ in range(num_levels - 1):
        prev = levels[-1]
        h, w = prev.shape[-2:]
        levels.append(area_downsample(prev, max(h // 2, 1), max(w // 2, 1)))
    return levels


def generate_targets(scene: CharScene, stats: WarpStats | None = None) -> TargetPyramid:
    H, W = scene.hw
    full = render_score_maps(scene.words, (H // 2, W // 2), 0.5, stats=stats)
    return TargetPyramid(full=full, levels=build_pyramid(full))
