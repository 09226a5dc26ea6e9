"""Oriented-box geometry: corners, rotated IoU, center-weighted IoU, the
corner regularizer, BEV NMS, and the interpolated-precision AP evaluator.

The polygon-clipping core is written over duck-typed scalars: plain floats
for evaluation/NMS, or autodiff scalar nodes when a loss needs gradients
through the intersection area. Branch decisions always read concrete float
values, so both paths share one implementation.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .core import Box3D

# rectangle corner sign pattern: bottom face counter-clockwise from (+x, +y)
_SX = (1.0, -1.0, -1.0, 1.0)
_SY = (1.0, 1.0, -1.0, -1.0)

AREA_EPS = 1e-12


def _exp(x):
    return ad.exp(x) if isinstance(x, ad.Node) else math.exp(x)


def _smooth_l1_scalar(x, beta: float = 1.0):
    """Huber-style penalty; generic over float or scalar Node."""
    v = float(x)
    if abs(v) < beta:
        return (0.5 / beta) * x * x
    return (x if v >= 0 else -x) - 0.5 * beta


def box_parts(b: Box3D):
    """(cx, cy, cz, w, l, h, cos_yaw, sin_yaw) float tuple."""
    return (b.cx, b.cy, b.cz, b.w, b.l, b.h, math.cos(b.yaw), math.sin(b.yaw))


def bev_rect(cx, cy, l, w, cos_y, sin_y):
    """Four BEV corners, counter-clockwise starting at local (+x, +y).

    Generic over floats or scalar nodes.
    """
    hx = 0.5 * l
    hy = 0.5 * w
    out = []
    for sx, sy in zip(_SX, _SY):
        lx = sx * hx
        ly = sy * hy
        out.append((cx + cos_y * lx - sin_y * ly,
                    cy + sin_y * lx + cos_y * ly))
    return out


def box_corners(b: Box3D) -> np.ndarray:
    """All 8 corners, canonical order: bottom face counter-clockwise from
    (+x, +y), then the top face in the same order. Shape (8, 3)."""
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    rect = bev_rect(b.cx, b.cy, b.l, b.w, c, s)
    out = np.empty((8, 3))
    for i, (x, y) in enumerate(rect):
        out[i] = (x, y, b.cz - 0.5 * b.h)
        out[i + 4] = (x, y, b.cz + 0.5 * b.h)
    return out


def polygon_area(poly):
    """Signed shoelace area (positive for counter-clockwise)."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = None
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        term = x1 * y2 - x2 * y1
        acc = term if acc is None else acc + term
    return 0.5 * acc


def clip_convex(subject, clip):
    """Sutherland-Hodgman clip of `subject` against convex CCW `clip`.

    Vertex coordinates may be floats or scalar nodes; inside/outside
    decisions read float values.
    """
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if len(output) < 3:
            return []
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        input_poly = output
        output = []
        sides = []
        for px, py in input_poly:
            sides.append((bx - ax) * (py - ay) - (by - ay) * (px - ax))
        m = len(input_poly)
        for j in range(m):
            cur = input_poly[j]
            nxt = input_poly[(j + 1) % m]
            d1, d2 = sides[j], sides[(j + 1) % m]
            in1 = float(d1) >= 0.0
            in2 = float(d2) >= 0.0
            if in1:
                output.append(cur)
            if in1 != in2:
                t = d1 / (d1 - d2)
                ix = cur[0] + t * (nxt[0] - cur[0])
                iy = cur[1] + t * (nxt[1] - cur[1])
                output.append((ix, iy))
    return output


def bev_intersection_area(parts_a, parts_b):
    """BEV intersection area of two oriented boxes (generic scalars)."""
    ra = bev_rect(parts_a[0], parts_a[1], parts_a[4], parts_a[3], parts_a[6], parts_a[7])
    rb = bev_rect(parts_b[0], parts_b[1], parts_b[4], parts_b[3], parts_b[6], parts_b[7])
    poly = clip_convex(ra, rb)
    if len(poly) < 3:
        return 0.0
    area = polygon_area(poly)
    if float(area) <= AREA_EPS:
        return 0.0
    return area


def iou3d_parts(parts_a, parts_b):
    """Rotated-box 3D IoU from part tuples; generic over floats/nodes."""
    inter_bev = bev_intersection_area(parts_a, parts_b)
    if isinstance(inter_bev, float) and inter_bev == 0.0:
        return 0.0
    za0 = parts_a[2] - 0.5 * parts_a[5]
    za1 = parts_a[2] + 0.5 * parts_a[5]
    zb0 = parts_b[2] - 0.5 * parts_b[5]
    zb1 = parts_b[2] + 0.5 * parts_b[5]
    top = za1 if float(za1) <= float(zb1) else zb1
    bot = za0 if float(za0) >= float(zb0) else zb0
    dz = top - bot
    if float(dz) <= 0.0:
        return 0.0
    inter = inter_bev * dz
    vol_a = parts_a[3] * parts_a[4] * parts_a[5]
    vol_b = parts_b[3] * parts_b[4] * parts_b[5]
    union = vol_a + vol_b - inter
    return inter / union


def iou3d(a: Box3D, b: Box3D) -> float:
    """Rotated 3D IoU: BEV polygon intersection times vertical overlap,
    over the union of volumes. Degenerate overlap returns 0."""
    v = float(iou3d_parts(box_parts(a), box_parts(b)))
    # polygon round-off can overshoot 1 by an ulp for identical boxes
    return min(max(v, 0.0), 1.0)


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Rotated rectangle IoU in the ground plane."""
    pa, pb = box_parts(a), box_parts(b)
    inter = bev_intersection_area(pa, pb)
    inter = float(inter) if not isinstance(inter, float) else inter
    area_a = a.w * a.l
    area_b = b.w * b.l
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return inter / union


def center_weight(parts_pred, parts_target):
    """Gaussian falloff on the center offset, scaled by the target diagonal.

    Equals 1 at zero offset and decays strictly monotonically; the scale is
    half the target box diagonal, so the weight stays O(1) for offsets small
    relative to the object size.
    """
    dx = parts_pred[0] - parts_target[0]
    dy = parts_pred[1] - parts_target[1]
    dz = parts_pred[2] - parts_target[2]
    d2 = dx * dx + dy * dy + dz * dz
    w, l, h = float(parts_target[3]), float(parts_target[4]), float(parts_target[5])
    diag2 = w * w + l * l + h * h
    return _exp(d2 * (-2.0 / diag2))


def cwiou_parts(parts_pred, parts_target):
    """Center-weighted IoU: iou3d times the Gaussian center weight.

    The weighting formula is intentionally isolated here; swapping in an
    alternative penalty is a one-line change.
    """
    iou = iou3d_parts(parts_pred, parts_target)
    if isinstance(iou, float) and iou == 0.0:
        return 0.0
    return iou * center_weight(parts_pred, parts_target)


def cwiou(pred: Box3D, target: Box3D) -> float:
    v = float(cwiou_parts(box_parts(pred), box_parts(target)))
    return min(max(v, 0.0), iou3d(pred, target))


def corner_loss(pred: Box3D, target: Box3D, beta: float = 1.0) -> float:
    """Mean smooth-L1 distance over the 8 canonical corner pairs, minimized
    over flipping the target yaw by pi (heading-agnostic)."""
    cp = box_corners(pred)
    best = None
    for flip in (0.0, math.pi):
        t = Box3D(target.cx, target.cy, target.cz, target.w, target.l, target.h,
                  target.yaw + flip)
        ct = box_corners(t)
        diff = cp - ct
        per = np.where(np.abs(diff) < beta, 0.5 * diff * diff / beta,
                       np.abs(diff) - 0.5 * beta)
        val = float(per.sum(axis=1).mean())
        best = val if best is None else min(best, val)
    return best


def nms_bev(boxes, scores, iou_threshold: float):
    """Greedy BEV non-maximum suppression; returns kept indices (score desc)."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if any(bev_iou(boxes[i], boxes[j]) > iou_threshold for j in kept):
            continue
        kept.append(i)
    return kept


def recall_grid(recall_positions: int) -> np.ndarray:
    """Recall sampling grid: 0..1 inclusive for 11 positions, 1/40..1 for 40."""
    if recall_positions == 11:
        return np.linspace(0.0, 1.0, 11)
    if recall_positions == 40:
        return np.arange(1, 41) / 40.0
    raise ValueError(f"recall_positions must be 11 or 40, got {recall_positions}")


def evaluate_ap(predictions, ground_truths, iou_threshold: float,
                recall_positions: int):
    """Average precision per class with greedy matching.

    predictions: iterable of (scene_id, class_id, Box3D, score)
    ground_truths: iterable of (scene_id, class_id, Box3D)

    Each ground truth matches at most one prediction; predictions are
    consumed in descending score order. Precision is interpolated
    (max precision at recall >= r) and averaged over the recall grid.
    Classes with zero ground truths score 0.
    """
    grid = recall_grid(recall_positions)
    classes = sorted({c for _, c, _ in ground_truths} | {c for _, c, _, _ in predictions})
    ap = {}
    for cls in classes:
        gts = [(sid, b) for sid, c, b in ground_truths if c == cls]
        n_gt = len(gts)
        preds = sorted(
            [(sid, b, s) for sid, c, b, s in predictions if c == cls],
            key=lambda t: -t[2],
        )
        if n_gt == 0 or not preds:
            ap[cls] = 0.0
            continue
        matched = [False] * n_gt
        tp = np.zeros(len(preds))
        for pi, (sid, pb, _) in enumerate(preds):
            best_iou, best_gi = 0.0, -1
            for gi, (gsid, gb) in enumerate(gts):
                if gsid != sid or matched[gi]:
                    continue
                v = iou3d(pb, gb)
                if v > best_iou:
                    best_iou, best_gi = v, gi
            if best_gi >= 0 and best_iou >= iou_threshold:
                matched[best_gi] = True
                tp[pi] = 1.0
        cum_tp = np.cumsum(tp)
        recall = cum_tp / n_gt
        precision = cum_tp / np.arange(1, len(preds) + 1)
        interp = np.zeros_like(grid)
        for i, r in enumerate(grid):
            ok = recall >= r - 1e-12
            interp[i] = precision[ok].max() if ok.any() else 0.0
        ap[cls] = float(interp.mean())
    return ap
