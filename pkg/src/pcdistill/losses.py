"""Training objectives.

Soft targets come from a frozen teacher: raw class confidences are squashed
by a temperature sigmoid, compared with a focal-style penalty, and teacher
boxes supervise localization through a center-weighted IoU plus per-field
smooth-L1 and a corner regularizer. Hard targets mirror the same structure
against ground truth. The hybrid objective is a weighted sum of the two.

Reductions: classification terms average over all points, localization terms
average over foreground points only (zero, flagged, when a batch has none).
Accumulation order is index-ascending for bit reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import boxes as bx

EPS = 1e-7

# corner sign patterns for all 8 corners (bottom CCW from +x+y, then top)
_CSX = np.array([1.0, -1.0, -1.0, 1.0] * 2)
_CSY = np.array([1.0, 1.0, -1.0, -1.0] * 2)
_CSZ = np.array([-1.0] * 4 + [1.0] * 4)


@dataclass
class LossBreakdown:
    """Per-step scalar record of every objective term."""

    total: float = 0.0
    soft_cls: float = 0.0
    soft_loc: float = 0.0
    soft_loc_iou: float = 0.0
    soft_loc_ind: float = 0.0
    soft_loc_corner: float = 0.0
    hard_cls: float = 0.0
    hard_loc: float = 0.0
    hard_loc_iou: float = 0.0
    hard_loc_ind: float = 0.0
    hard_loc_corner: float = 0.0
    center_vote: float = 0.0
    foreground: float = 0.0
    n_foreground: float = 0.0

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def as_row(self):
        return [getattr(self, n) for n in self.field_names()]

    def soft_total(self) -> float:
        return self.soft_cls + self.soft_loc

    def hard_total(self) -> float:
        return self.hard_cls + self.hard_loc + self.center_vote + self.foreground


def temp_sigmoid(c, t: float):
    """Temperature-scaled sigmoid squashing of raw confidences.

    Works on arrays (returns array) or nodes (returns node). t must be > 0;
    large t contracts every output toward 0.5.
    """
    if t <= 0:
        raise ValueError(f"temperature must be > 0, got {t}")
    if isinstance(c, ad.Node):
        return ad.sigmoid(ad.scale(c, 1.0 / t))
    v = np.asarray(c, dtype=np.float64) / t
    return np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.clip(v, 0, None))),
                    np.exp(np.clip(v, None, 0)) / (1.0 + np.exp(np.clip(v, None, 0))))


def smooth_l1(x, beta: float = 1.0):
    """Elementwise smooth-L1: quadratic inside |x| < beta, linear outside."""
    if isinstance(x, ad.Node):
        a = np.abs(x.value)
        absx = ad.where(x.value >= 0, x, ad.neg(x))
        quad = ad.scale(ad.mul(x, x), 0.5 / beta)
        lin = ad.sub(absx, 0.5 * beta)
        return ad.where(a < beta, quad, lin)
    v = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(v) < beta, 0.5 * v * v / beta, np.abs(v) - 0.5 * beta)


def soft_focal(c_soft, c_pred, fg_onehot, alpha_t: float, gamma: int):
    """Focal penalty between squashed teacher and student confidences.

    c_soft: (P, C) array of teacher soft labels (already squashed).
    c_pred: (P, C) node of squashed student confidences.
    fg_onehot: (P, C) bool; True where the class is the point's hard label.
    Sum over classes, mean over points.
    """
    if gamma <= 0 or gamma % 2 != 0:
        raise ValueError("gamma must be a positive even integer")
    soft = np.clip(np.asarray(c_soft, dtype=np.float64), EPS, 1.0 - EPS)
    if soft.shape[0] == 0:
        return ad.constant(0.0)
    pred = ad.clip(c_pred, EPS, 1.0 - EPS)
    p_t = ad.where(fg_onehot, pred, ad.sub(1.0, pred))
    mod = ad.pow_int(ad.sub(ad.constant(soft), p_t), gamma)
    per = ad.scale(ad.mul(mod, ad.log(p_t)), -alpha_t)
    return ad.mean(ad.sum_(per, axis=1))


def softmax_ce(logits: ad.Node, labels) -> ad.Node:
    """Cross-entropy over (P, K) logits against integer labels, mean over P."""
    labels = np.asarray(labels, dtype=np.int64)
    p, k = logits.shape
    if p == 0:
        return ad.constant(0.0)
    shift = np.max(logits.value, axis=1, keepdims=True)  # cancels exactly
    z = ad.sub(logits, ad.constant(shift))
    lse = ad.log(ad.sum_(ad.exp(z), axis=1))
    onehot = np.zeros((p, k))
    onehot[np.arange(p), labels] = 1.0
    picked = ad.sum_(ad.mul(z, ad.constant(onehot)), axis=1)
    return ad.mean(ad.sub(lse, picked))


def binary_ce(probs: ad.Node, targets) -> ad.Node:
    """Binary cross-entropy on probabilities, mean reduction."""
    y = np.asarray(targets, dtype=np.float64)
    if y.size == 0:
        return ad.constant(0.0)
    p = ad.clip(probs, EPS, 1.0 - EPS)
    pos = ad.mul(ad.constant(y), ad.log(p))
    negt = ad.mul(ad.constant(1.0 - y), ad.log(ad.sub(1.0, p)))
    return ad.neg(ad.mean(ad.add(pos, negt)))


def corners_from_part_nodes(parts: dict) -> tuple:
    """(X, Y, Z) nodes of shape (F, 8) from per-field (F,) part nodes."""
    f = parts["cx"].shape[0]

    def col(node):
        return ad.reshape(node, (f, 1))

    lx = ad.mul(col(parts["l"]), ad.constant(0.5 * _CSX[None, :]))
    ly = ad.mul(col(parts["w"]), ad.constant(0.5 * _CSY[None, :]))
    cosc, sinc = col(parts["cos"]), col(parts["sin"])
    x = ad.add(col(parts["cx"]), ad.sub(ad.mul(cosc, lx), ad.mul(sinc, ly)))
    y = ad.add(col(parts["cy"]), ad.add(ad.mul(sinc, lx), ad.mul(cosc, ly)))
    z = ad.add(col(parts["cz"]), ad.mul(col(parts["h"]), ad.constant(0.5 * _CSZ[None, :])))
    return x, y, z


def _target_corners(tb: np.ndarray, flip: bool) -> tuple:
    """(F, 8) corner coordinate arrays for target boxes (cx,cy,cz,w,l,h,yaw)."""
    yaw = tb[:, 6] + (np.pi if flip else 0.0)
    c, s = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
    lx = 0.5 * tb[:, 4][:, None] * _CSX[None, :]
    ly = 0.5 * tb[:, 3][:, None] * _CSY[None, :]
    x = tb[:, 0][:, None] + c * lx - s * ly
    y = tb[:, 1][:, None] + s * lx + c * ly
    z = tb[:, 2][:, None] + 0.5 * tb[:, 5][:, None] * _CSZ[None, :]
    return x, y, z


def corner_term(parts: dict, target_boxes: np.ndarray) -> ad.Node:
    """Vectorized corner regularizer with the min over a pi yaw flip of the
    target. Mean over foreground rows."""
    px, py, pz = corners_from_part_nodes(parts)
    per_flip = []
    for flip in (False, True):
        tx, ty, tz = _target_corners(target_boxes, flip)
        d = ad.add(ad.add(smooth_l1(ad.sub(px, ad.constant(tx))),
                          smooth_l1(ad.sub(py, ad.constant(ty)))),
                   smooth_l1(ad.sub(pz, ad.constant(tz))))
        per_flip.append(ad.mean(d, axis=1))  # (F,)
    a, b = per_flip
    best = ad.where(a.value <= b.value, a, b)
    return ad.mean(best)


def _iou_term(parts: dict, target_boxes: np.ndarray, use_cwiou: bool) -> ad.Node:
    """Mean over rows of (1 - IoU-like overlap), row-wise scalar clipping."""
    f = target_boxes.shape[0]
    keys = ("cx", "cy", "cz", "w", "l", "h", "cos", "sin")
    total = None
    for i in range(f):
        pp = tuple(ad.pick(parts[k], i) for k in keys)
        tb = target_boxes[i]
        tp = (tb[0], tb[1], tb[2], tb[3], tb[4], tb[5],
              float(np.cos(tb[6])), float(np.sin(tb[6])))
        overlap = bx.cwiou_parts(pp, tp) if use_cwiou else bx.iou3d_parts(pp, tp)
        if isinstance(overlap, ad.Node):
            # guard the ulp-level overshoot of a perfect overlap
            term = ad.sub(1.0, overlap) if float(overlap) <= 1.0 else ad.constant(0.0)
        else:
            term = ad.constant(max(1.0 - overlap, 0.0))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / f)


def loc_loss(parts: dict, target_boxes, lambda_ind: float, lambda_corner: float,
             use_cwiou: bool) -> dict:
    """Localization objective against target boxes (F, 7) arrays.

    Returns term nodes: {"total", "iou", "ind", "corner"}; all zero when
    there are no foreground rows.
    """
    tb = np.asarray(target_boxes, dtype=np.float64).reshape(-1, 7)
    if tb.shape[0] == 0:
        zero = ad.constant(0.0)
        return {"total": zero, "iou": zero, "ind": zero, "corner": zero}
    iou_t = _iou_term(parts, tb, use_cwiou)
    # per-field residuals, plus a sin() residual for the heading
    ind = None
    for k, col in zip(("cx", "cy", "cz", "w", "l", "h"), range(6)):
        term = smooth_l1(ad.sub(parts[k], ad.constant(tb[:, col])))
        ind = term if ind is None else ad.add(ind, term)
    sin_d = ad.sub(ad.mul(parts["sin"], ad.constant(np.cos(tb[:, 6]))),
                   ad.mul(parts["cos"], ad.constant(np.sin(tb[:, 6]))))
    ind = ad.mean(ad.add(ind, smooth_l1(sin_d)))
    corner = corner_term(parts, tb)
    total = ad.add(ad.add(iou_t, ad.scale(ind, lambda_ind)),
                   ad.scale(corner, lambda_corner))
    return {"total": total, "iou": iou_t, "ind": ind, "corner": corner}


def soft_loc_loss(parts: dict, soft_boxes, lambda_ind: float,
                  lambda_corner: float, use_cwiou: bool = True) -> dict:
    """Localization against teacher boxes; foreground rows only by contract."""
    return loc_loss(parts, soft_boxes, lambda_ind, lambda_corner, use_cwiou)


def hard_losses(det_logits: ad.Node, aux_logits: ad.Node, labels,
                loc_parts: dict | None, gt_boxes, votes: ad.Node | None,
                gt_centers, fg_rows, s_r: ad.Node, voxel_fg,
                lambda_ind: float, lambda_corner: float,
                use_cwiou: bool = False) -> dict:
    """Ground-truth supervision bundle.

    det_logits/aux_logits: (P, C+1) with background as the last class.
    labels: (P,) hard class ids (background = C). loc_parts/gt_boxes cover
    foreground rows only. votes are per-point predicted centers; the smooth-L1
    center term uses foreground rows. s_r/voxel_fg supervise the repository
    foreground head with binary cross-entropy.
    """
    out = {}
    out["cls"] = ad.add(softmax_ce(det_logits, labels), softmax_ce(aux_logits, labels))
    if loc_parts is not None:
        loc = loc_loss(loc_parts, gt_boxes, lambda_ind, lambda_corner, use_cwiou)
    else:
        zero = ad.constant(0.0)
        loc = {"total": zero, "iou": zero, "ind": zero, "corner": zero}
    out["loc"] = loc
    fg_rows = np.asarray(fg_rows, dtype=np.int64)
    if votes is not None and fg_rows.size > 0:
        v = ad.gather_rows(votes, fg_rows)
        diff = ad.sub(v, ad.constant(np.asarray(gt_centers, dtype=np.float64)))
        out["center_vote"] = ad.mean(ad.sum_(smooth_l1(diff), axis=1))
    else:
        out["center_vote"] = ad.constant(0.0)
    out["foreground"] = binary_ce(s_r, voxel_fg)
    return out


def hybrid_loss(soft_terms: dict, hard_terms: dict, lambda_soft: float,
                lambda_hard: float):
    """Weighted combination; returns (total node, LossBreakdown)."""
    if lambda_soft < 0 or lambda_hard < 0:
        raise ValueError("loss weights must be >= 0")
    zero = ad.constant(0.0)
    s_cls = soft_terms.get("cls", zero)
    s_loc = soft_terms.get("loc", {"total": zero, "iou": zero, "ind": zero, "corner": zero})
    h_cls = hard_terms.get("cls", zero)
    h_loc = hard_terms.get("loc", {"total": zero, "iou": zero, "ind": zero, "corner": zero})
    h_vote = hard_terms.get("center_vote", zero)
    h_fg = hard_terms.get("foreground", zero)

    soft_sum = ad.add(s_cls, s_loc["total"])
    hard_sum = ad.add(ad.add(h_cls, h_loc["total"]), ad.add(h_vote, h_fg))
    total = ad.add(ad.scale(soft_sum, lambda_soft), ad.scale(hard_sum, lambda_hard))

    breakdown = LossBreakdown(
        total=float(total.value),
        soft_cls=float(s_cls.value),
        soft_loc=float(s_loc["total"].value),
        soft_loc_iou=float(s_loc["iou"].value),
        soft_loc_ind=float(s_loc["ind"].value),
        soft_loc_corner=float(s_loc["corner"].value),
        hard_cls=float(h_cls.value),
        hard_loc=float(h_loc["total"].value),
        hard_loc_iou=float(h_loc["iou"].value),
        hard_loc_ind=float(h_loc["ind"].value),
        hard_loc_corner=float(h_loc["corner"].value),
        center_vote=float(h_vote.value),
        foreground=float(h_fg.value),
        n_foreground=float(soft_terms.get("n_foreground", hard_terms.get("n_foreground", 0))),
    )
    return total, breakdown
