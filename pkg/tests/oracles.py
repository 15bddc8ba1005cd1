"""Independent reference implementations used by the unit and acceptance tests."""
import math

import numpy as np


def mc_bev_iou(a, b, n=10_000_000, chunk=1_000_000):
    """Rotated-rectangle IoU from a stratified grid of about ``n`` points laid over box ``a``.

    The intersection is ``area(a)`` times the fraction of ``a``'s points that
    fall inside ``b``; each box is ``(cx, cz, length, width, yaw)`` with the
    length axis along ``(cos yaw, -sin yaw)`` in the x-z plane.
    """
    side = int(math.ceil(math.sqrt(n)))
    s = (np.arange(side) + 0.5) / side - 0.5
    hits = 0
    ca, sa = math.cos(a[4]), math.sin(a[4])
    cb, sb = math.cos(b[4]), math.sin(b[4])
    rows = max(1, chunk // side)
    for start in range(0, side, rows):
        u = s[start:start + rows, None] * a[2]  # along length
        v = s[None, :] * a[3]  # along width
        x = a[0] + ca * u + sa * v
        z = a[1] - sa * u + ca * v
        dx, dz = x - b[0], z - b[1]
        lu = cb * dx - sb * dz
        lv = sb * dx + cb * dz
        hits += int(np.count_nonzero((np.abs(lu) <= b[2] / 2) & (np.abs(lv) <= b[3] / 2)))
    area_a, area_b = a[2] * a[3], b[2] * b[3]
    inter = area_a * hits / (side * side)
    return inter / (area_a + area_b - inter)


def iou_2d(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def greedy_nms(boxes, scores, iou_thresh, score_thresh):
    """Repeatedly keep the best remaining box and discard everything overlapping it."""
    remaining = [i for i in range(len(boxes)) if scores[i] >= score_thresh]
    kept = []
    while remaining:
        best = max(remaining, key=lambda i: (scores[i], -i))
        kept.append(best)
        remaining = [i for i in remaining if i != best and iou_2d(boxes[i], boxes[best]) <= iou_thresh]
    return kept


def interpolated_ap(hits_by_score, n_gt, points):
    """AP from a list of ``(score, hit)`` by explicit max-over-suffix interpolation."""
    ordered = sorted(hits_by_score, key=lambda m: -m[0])
    rec, prec = [], []
    tp = 0
    for k, (_, hit) in enumerate(ordered, start=1):
        tp += hit
        rec.append(tp / n_gt)
        prec.append(tp / k)
    total = 0.0
    for r in points:
        candidates = [p for rr, p in zip(rec, prec) if rr >= r]
        total += max(candidates) if candidates else 0.0
    return total / len(points)


def match_2d(gts, dets, iou_thresh):
    """Score-ordered greedy matching on 2D boxes.

    ``gts`` are ``(box, counts)`` pairs; ``dets`` are ``(box, score)``. Returns
    the ``(score, hit)`` list (matches to non-counting ground truth dropped) and
    the number of counting ground truths.
    """
    used = [False] * len(gts)
    out = []
    for box, score in sorted(dets, key=lambda d: -d[1]):
        best, best_iou = None, iou_thresh
        for j, (g, _) in enumerate(gts):
            o = iou_2d(box, g)
            if not used[j] and o >= best_iou and (best is None or o > best_iou):
                best, best_iou = j, o
        if best is None:
            out.append((score, False))
        else:
            used[best] = True
            if gts[best][1]:
                out.append((score, True))
    return out, sum(1 for _, c in gts if c)
