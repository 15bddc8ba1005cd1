"""Detection metrics: box overlaps, NMS, precision/recall and KITTI-style AP."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .kitti_io import DONT_CARE, Difficulty, KittiObjectLabel, counts_at
from .tensor import ContractError

CATEGORIES = {"car": "Car", "pedestrian": "Pedestrian", "cyclist": "Cyclist"}
DEFAULT_IOU = {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}
# ground truth of these classes is neither a hit nor a miss for the key class
NEIGHBOUR_CLASSES = {"Car": ("Van",), "Pedestrian": ("Person_sitting",), "Cyclist": ()}


@dataclass(frozen=True)
class RotatedBevBox:
    cx: float
    cz: float
    length: float
    width: float
    yaw: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError(f"box extents must be positive, got {self.length} x {self.width}")

    @property
    def area(self) -> float:
        return self.length * self.width

    def corners(self) -> np.ndarray:
        """Counter-clockwise (in x-z) corners, rotated as KITTI rotation_y."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        x = c * local[:, 0] + s * local[:, 1] + self.cx
        z = -s * local[:, 0] + c * local[:, 1] + self.cz
        pts = np.stack([x, z], axis=1)
        return pts if _signed_area(pts) > 0 else pts[::-1].copy()


@dataclass(frozen=True)
class Box3D:
    bev: RotatedBevBox
    y_bottom: float
    height: float

    def __post_init__(self):
        if not self.height > 0:
            raise ValueError("box height must be positive")

    @property
    def volume(self) -> float:
        return self.bev.area * self.height

    @classmethod
    def from_label(cls, lb: KittiObjectLabel) -> "Box3D":
        h, w, l = lb.dims
        x, y, z = lb.location
        return cls(RotatedBevBox(x, z, l, w, lb.rotation_y), y, h)


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a simple polygon."""
    return abs(_signed_area(poly)) if len(poly) >= 3 else 0.0


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Intersect a convex polygon with a counter-clockwise convex polygon (Sutherland-Hodgman)."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, out = out, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    out.append(_cross_point(prev, cur, s_prev, s_cur))
                out.append(cur)
            elif s_prev >= 0:
                out.append(_cross_point(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection(a: RotatedBevBox, b: RotatedBevBox) -> float:
    if a.yaw == b.yaw == 0.0:
        return _axis_overlap(a.cx, a.length, b.cx, b.length) * _axis_overlap(a.cz, a.width, b.cz, b.width)
    return polygon_area(clip_polygon(a.corners(), b.corners()))


def _axis_overlap(c1, e1, c2, e2):
    return max(0.0, min(c1 + e1 / 2, c2 + e2 / 2) - max(c1 - e1 / 2, c2 - e2 / 2))


def rotated_bev_iou(a: RotatedBevBox, b: RotatedBevBox) -> float:
    """IoU of two rotated rectangles in the ground plane; symmetric in its arguments."""
    inter = 0.5 * (bev_intersection(a, b) + bev_intersection(b, a))
    union = a.area + b.area - inter
    return 0.0 if union <= 0 else min(1.0, max(0.0, inter / union))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU; boxes extend upward from ``y_bottom`` (camera y points down)."""
    top_a, top_b = a.y_bottom - a.height, b.y_bottom - b.height
    dy = max(0.0, min(a.y_bottom, b.y_bottom) - max(top_a, top_b))
    bev_inter = 0.5 * (bev_intersection(a.bev, b.bev) + bev_intersection(b.bev, a.bev))
    inter = bev_inter * dy
    union = a.volume + b.volume - inter
    return 0.0 if union <= 0 else min(1.0, max(0.0, inter / union))


def iou_2d(a: Sequence[float], b: Sequence[float]) -> float:
    """Axis-aligned IoU of (u, v, u', v') boxes."""
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return 0.0 if union <= 0 else inter / union


def nms_2d(boxes: Sequence[Sequence[float]], scores: Sequence[float], iou_thresh: float = 0.4,
           score_thresh: float = 0.75) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices in descending score order.

    Boxes scoring below ``score_thresh`` are dropped first. A box is suppressed
    when its IoU with an already kept box exceeds ``iou_thresh``. Equal scores
    are visited in original index order.
    """
    if len(boxes) != len(scores):
        raise ContractError("boxes and scores differ in length")
    order = sorted((i for i, s in enumerate(scores) if s >= score_thresh), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if all(iou_2d(boxes[i], boxes[k]) <= iou_thresh for k in kept):
            kept.append(i)
    return kept


# ---------------------------------------------------------------------------
# precision / recall


@dataclass
class PrCurve:
    recall: list[float] = field(default_factory=list)
    precision: list[float] = field(default_factory=list)
    n_gt: int = 0

    @classmethod
    def from_matches(cls, matches: Sequence[tuple[float, bool]], n_gt: int) -> "PrCurve":
        """Build the sweep from ``(score, is_true_positive)`` pairs."""
        ordered = sorted(matches, key=lambda m: -m[0])
        tp = fp = 0
        curve = cls(n_gt=n_gt)
        for _, hit in ordered:
            tp, fp = tp + bool(hit), fp + (not hit)
            curve.recall.append(tp / n_gt if n_gt else 0.0)
            curve.precision.append(tp / (tp + fp))
        return curve


R11 = tuple(i / 10 for i in range(11))
R40 = tuple(i / 40 for i in range(1, 41))


def average_precision(curve: PrCurve, mode: str = "R40") -> float:
    """Mean interpolated precision ``max{p(r') : r' >= r}`` over the recall grid."""
    if curve.n_gt <= 0:
        raise ContractError("average precision is undefined without ground truth")
    mode = mode.upper()
    if mode not in ("R11", "R40"):
        raise ValueError(f"unknown AP mode {mode!r}")
    points = R11 if mode == "R11" else R40
    rec = np.asarray(curve.recall, dtype=np.float64)
    prec = np.asarray(curve.precision, dtype=np.float64)
    # suffix maximum gives the interpolated precision at each sweep position
    envelope = np.maximum.accumulate(prec[::-1])[::-1] if prec.size else prec
    total = 0.0
    for r in points:
        idx = np.flatnonzero(rec >= r)
        total += float(envelope[idx[0]]) if idx.size else 0.0
    return total / len(points)


# ---------------------------------------------------------------------------
# matching


def _overlap(metric: str, det: KittiObjectLabel, gt: KittiObjectLabel) -> float:
    if metric == "3d":
        return iou_3d(Box3D.from_label(det), Box3D.from_label(gt))
    if metric == "bev":
        return rotated_bev_iou(Box3D.from_label(det).bev, Box3D.from_label(gt).bev)
    if metric == "2d":
        return iou_2d(det.box2d, gt.box2d)
    raise ValueError(f"unknown metric {metric!r}")


def match_frame(gt: Sequence[KittiObjectLabel], det: Sequence[KittiObjectLabel], category: str,
                difficulty: Difficulty | None, iou_thresh: float, metric: str) -> tuple[list[tuple[float, bool]], int]:
    """Greedy score-ordered matching for one frame.

    Returns the scored hits/misses of the category's detections and the number
    of ground truths that count at ``difficulty``. Detections matched to an
    ignorable ground truth (wrong difficulty, neighbour class) are dropped.
    """
    key = category.lower()
    neighbours = {c.lower() for c in NEIGHBOUR_CLASSES.get(CATEGORIES.get(key, category), ())}
    candidates, care = [], []
    for g in gt:
        name = g.category.lower()
        if g.category == DONT_CARE:
            continue
        if name == key:
            candidates.append(g)
            care.append(counts_at(g, difficulty))
        elif name in neighbours:
            candidates.append(g)
            care.append(False)
    dets = sorted((d for d in det if d.category.lower() == key), key=lambda d: -(d.score or 0.0))
    used = [False] * len(candidates)
    out: list[tuple[float, bool]] = []
    for d in dets:
        best, best_iou = -1, iou_thresh
        for j, g in enumerate(candidates):
            if used[j]:
                continue
            o = _overlap(metric, d, g)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = j, o
        if best < 0:
            out.append((d.score or 0.0, False))
        else:
            used[best] = True
            if care[best]:
                out.append((d.score or 0.0, True))
    return out, sum(care)


def evaluate_category(gt: Mapping[str, Sequence[KittiObjectLabel]], det: Mapping[str, Sequence[KittiObjectLabel]],
                      category: str, difficulty: Difficulty | None, iou_thresh: float | None = None,
                      metric: str = "3d", mode: str = "R40") -> float:
    """Pooled AP over all frames of ``gt``; missing detection frames count as empty.

    ``difficulty=None`` evaluates every ground truth of the category.
    """
    name = CATEGORIES.get(category.lower())
    if name is None:
        raise ContractError(f"unknown category {category!r}; expected one of {sorted(CATEGORIES)}")
    thresh = DEFAULT_IOU[name] if iou_thresh is None else iou_thresh
    matches: list[tuple[float, bool]] = []
    n_gt = 0
    for frame in sorted(gt):
        m, n = match_frame(gt[frame], det.get(frame, ()), name, difficulty, thresh, metric)
        matches.extend(m)
        n_gt += n
    return average_precision(PrCurve.from_matches(matches, n_gt), mode)


# ---------------------------------------------------------------------------
# reports

REPORT_METRICS = (("3d", "AP_3D"), ("bev", "AP_BEV"))
REPORT_LEVELS = (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD)


def evaluation_summary(gt: Mapping[str, Sequence[KittiObjectLabel]], det: Mapping[str, Sequence[KittiObjectLabel]],
                       category: str, iou_thresh: float | None = None, mode: str = "R40") -> list[dict]:
    """One record per (metric, difficulty); ``ap`` is None where the split has no ground truth."""
    name = CATEGORIES.get(category.lower())
    if name is None:
        raise ContractError(f"unknown category {category!r}; expected one of {sorted(CATEGORIES)}")
    records = []
    for metric, metric_name in REPORT_METRICS:
        for level in REPORT_LEVELS:
            try:
                ap = evaluate_category(gt, det, name, level, iou_thresh, metric, mode)
            except ContractError:
                ap = None
            records.append({"category": name, "difficulty": level.label, "metric": metric_name,
                            "mode": mode.upper(), "ap": ap})
    return records


def format_summary_table(records: Sequence[dict]) -> str:
    levels = [lv.label for lv in REPORT_LEVELS]
    first = records[0] if records else {"category": "?", "mode": "?"}
    lines = [f"{first['category']} ({first['mode']})", f"{'':<8}" + "".join(f"{lv:>8}" for lv in levels)]
    for _, metric_name in REPORT_METRICS:
        cells = []
        for lv in levels:
            ap = next((r["ap"] for r in records if r["metric"] == metric_name and r["difficulty"] == lv), None)
            cells.append(f"{'n/a':>8}" if ap is None else f"{ap:>8.3f}")
        lines.append(f"{metric_name:<8}" + "".join(cells))
    return "\n".join(lines)
