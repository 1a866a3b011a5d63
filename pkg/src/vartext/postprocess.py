"""Score maps -> text quadrilaterals: threshold, OR, label, min-area boxes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

TAU_REGION = 0.4
TAU_AFFINITY = 0.4
MIN_AREA = 10.0


@dataclass
class Detection:
    quad: np.ndarray
    score: float

    def to_json(self) -> dict:
        return {"quad": [[float(x), float(y)] for x, y in self.quad], "score": float(self.score)}


@dataclass
class DetectionSet:
    detections: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)

    @property
    def quads(self) -> list[np.ndarray]:
        return [d.quad for d in self.detections]

    def to_json(self, image: str = "") -> dict:
        return {"image": image, "detections": [d.to_json() for d in self.detections]}

    @classmethod
    def from_json(cls, obj: dict) -> "DetectionSet":
        return cls([Detection(np.asarray(d["quad"], dtype=np.float64), float(d.get("score", 1.0)))
                    for d in obj.get("detections", [])])


def binarize(score_map, tau: float) -> np.ndarray:
    """Strict threshold: True where score > tau."""
    return np.asarray(score_map) > tau


def combine(region_bin: np.ndarray, affinity_bin: np.ndarray) -> np.ndarray:
    if region_bin.shape != affinity_bin.shape:
        raise ValueError(f"combine: shapes differ {region_bin.shape} vs {affinity_bin.shape}")
    return np.logical_or(region_bin, affinity_bin)


def _find(parent: list[int], i: int) -> int:
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        parent[i], i = root, parent[i]
    return root


def ccl(binary: np.ndarray) -> tuple[np.ndarray, int]:
    """Two-pass 4-connected labelling with union-find.

    Labels run 1..n in order of each component's first pixel (row-major);
    background is 0.
    """
    grid = np.asarray(binary, dtype=bool)
    h, w = grid.shape
    provisional = np.zeros((h, w), dtype=np.int64)
    parent = [0]
    next_label = 1
    rows = grid.tolist()
    for y in range(h):
        row = rows[y]
        prow = provisional[y]
        above = provisional[y - 1] if y else None
        for x in range(w):
            if not row[x]:
                continue
            left = prow[x - 1] if x and row[x - 1] else 0
            up = above[x] if y and rows[y - 1][x] else 0
            if left and up:
                prow[x] = left
                ra, rb = _find(parent, left), _find(parent, up)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
            elif left or up:
                prow[x] = left or up
            else:
                parent.append(next_label)
                prow[x] = next_label
                next_label += 1
    # roots are the smallest provisional label in each set, and provisional labels
    # are issued in row-major order, so ranking roots preserves first-pixel order
    final = np.zeros(next_label, dtype=np.int64)
    count = 0
    for lab in range(1, next_label):
        root = _find(parent, lab)
        if root == lab:
            count += 1
            final[lab] = count
        else:
            final[lab] = final[root]
    return final[provisional], count


# -- geometry -----------------------------------------------------------------------

def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; counter-clockwise in math orientation, no repeats."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) <= 2:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def polygon_area(poly) -> float:
    p = np.asarray(poly, dtype=np.float64)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def order_clockwise(quad) -> np.ndarray:
    """Order 4 vertices clockwise on screen (y down), starting top-left."""
    q = np.asarray(quad, dtype=np.float64)
    c = q.mean(axis=0)
    ang = np.arctan2(q[:, 1] - c[1], q[:, 0] - c[0])
    q = q[np.argsort(ang, kind="stable")]
    s = q[:, 0] + q[:, 1]
    start = int(np.argmin(np.round(s, 9)))
    return np.roll(q, -start, axis=0)


def _rect_at_angle(hull: np.ndarray, theta: float):
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, s], [-s, c]])
    p = hull @ rot.T
    lo, hi = p.min(axis=0), p.max(axis=0)
    area = float((hi[0] - lo[0]) * (hi[1] - lo[1]))
    corners_r = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    return area, corners_r @ rot


def min_area_rect(points) -> tuple[np.ndarray, float, float]:
    """Rotating calipers over the hull: (corners, area, angle in [0, pi/2))."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("min_area_rect: empty point set")
    hull = convex_hull(pts)
    if len(hull) < 3:
        lo, hi = hull.min(axis=0), hull.max(axis=0)
        corners = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
        return corners, 0.0, 0.0
    best = None
    edges = np.roll(hull, -1, axis=0) - hull
    angles = sorted({round(math.atan2(e[1], e[0]) % (math.pi / 2), 12) for e in edges})
    for theta in angles:
        area, corners = _rect_at_angle(hull, theta)
        # ties keep the earlier (smaller) angle
        if best is None or area < best[1] * (1 - 1e-12) - 1e-12:
            best = (corners, area, theta)
    return best


def min_area_quad(pixels) -> np.ndarray:
    """Minimum-area rectangle enclosing the unit-square footprints of ``pixels``.

    ``pixels`` is an (N, 2) array of (row, col) grid coordinates; the result is
    a (4, 2) array of (x, y) vertices clockwise from the top-left.
    """
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if len(pix) == 0:
        raise ValueError("min_area_quad: empty pixel set")
    xy = pix[:, ::-1]
    offsets = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=np.float64)
    corners = (xy[:, None, :] + offsets[None]).reshape(-1, 2)
    rect, _, _ = min_area_rect(corners)
    return order_clockwise(rect)


def detect(pred, tau_r: float = TAU_REGION, tau_a: float = TAU_AFFINITY,
           min_area: float = MIN_AREA, scale: float = 2.0) -> DetectionSet:
    """Detections from (2, h, w) region/affinity maps at half input resolution."""
    maps = np.asarray(pred.data if isinstance(pred, Tensor) else pred)
    if maps.ndim == 4:
        if maps.shape[0] != 1:
            raise ValueError("detect expects a single image; iterate over the batch")
        maps = maps[0]
    region, affinity = maps[0], maps[1]
    merged = combine(binarize(region, tau_r), binarize(affinity, tau_a))
    labels, n = ccl(merged)
    dets = []
    for lab in range(1, n + 1):
        pix = np.argwhere(labels == lab)
        quad = min_area_quad(pix)
        if polygon_area(quad) < min_area:
            continue
        score = float(region[labels == lab].mean())
        dets.append(Detection(quad * scale, score))
    return DetectionSet(dets)
