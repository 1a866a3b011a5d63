"""IoU-matched recall / precision / H-mean for quadrilateral detections."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .postprocess import polygon_area


@dataclass
class EvalReport:
    recall: float
    precision: float
    hmean: float
    num_gt: int
    num_det: int
    num_matched: int
    iou_threshold: float = 0.5
    matches: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "recall": self.recall,
            "precision": self.precision,
            "hmean": self.hmean,
            "num_gt": self.num_gt,
            "num_det": self.num_det,
            "num_matched": self.num_matched,
            "iou_threshold": self.iou_threshold,
            "matches": self.matches,
        }


def hmean(recall: float, precision: float) -> float:
    return 2 * recall * precision / (recall + precision) if recall + precision > 0 else 0.0


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _ccw(poly) -> np.ndarray:
    p = np.asarray(poly, dtype=np.float64)
    return p[::-1] if _signed_area(p) < 0 else p


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by convex ``clipper`` (both CCW)."""
    out = list(subject)
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        edge = b - a

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        inp, out = out, []
        for j in range(len(inp)):
            cur, nxt = inp[j], inp[(j + 1) % len(inp)]
            sc, sn = side(cur), side(nxt)
            if sc >= 0:
                out.append(cur)
            if (sc >= 0) != (sn >= 0):
                t = sc / (sc - sn)
                out.append(cur + t * (nxt - cur))
    return np.array(out) if out else np.zeros((0, 2))


def quad_iou(a, b) -> float:
    pa, pb = _ccw(a), _ccw(b)
    area_a, area_b = abs(_signed_area(pa)), abs(_signed_area(pb))
    if area_a <= 1e-12 or area_b <= 1e-12:
        return 0.0
    inter = polygon_area(clip_convex(pa, pb))
    union = area_a + area_b - inter
    return float(inter / union) if union > 0 else 0.0


def match_image(dets, gts, iou_threshold: float = 0.5) -> list[tuple[int, int, float]]:
    """Greedy one-to-one matching in descending IoU; ties go to the lower det index."""
    pairs = []
    for di, d in enumerate(dets):
        for gi, g in enumerate(gts):
            iou = quad_iou(d, g)
            if iou >= iou_threshold:
                pairs.append((-iou, di, gi))
    pairs.sort()
    used_d, used_g, matches = set(), set(), []
    for neg_iou, di, gi in pairs:
        if di in used_d or gi in used_g:
            continue
        used_d.add(di)
        used_g.add(gi)
        matches.append((di, gi, -neg_iou))
    return matches


def evaluate(dets_per_image, gts_per_image, iou_threshold: float = 0.5) -> EvalReport:
    """Aggregate recall/precision/H-mean over images.

    With no ground truth and no detections at all, every score is 1.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths cover different image counts")
    n_gt = n_det = n_match = 0
    all_matches = []
    for img, (dets, gts) in enumerate(zip(dets_per_image, gts_per_image)):
        dets = [np.asarray(q, dtype=np.float64) for q in dets]
        gts = [np.asarray(q, dtype=np.float64) for q in gts]
        m = match_image(dets, gts, iou_threshold)
        n_gt += len(gts)
        n_det += len(dets)
        n_match += len(m)
        all_matches.append([[di, gi, iou] for di, gi, iou in m])
    if n_gt == 0 and n_det == 0:
        r = p = h = 1.0
    else:
        r = n_match / n_gt if n_gt else 0.0
        p = n_match / n_det if n_det else 0.0
        h = hmean(r, p)
    return EvalReport(r, p, h, n_gt, n_det, n_match, iou_threshold, all_matches)
