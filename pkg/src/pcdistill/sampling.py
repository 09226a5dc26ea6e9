"""Point selection and neighborhood aggregation.

`fps`/`sfps` do greedy max-min subset selection (optionally weighted by
per-point foreground confidence), `ball_query` builds fixed-size radius
neighborhoods, and the aggregate_* helpers run a shared per-member MLP
followed by a max over the member set.

All functions are pure; batched variants are vectorized over query centers
and produce results identical to the per-center loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class QueryCounter:
    """Counts neighborhood searches: one unit per (center, scale) pair."""

    __slots__ = ("count",)

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def reset(self) -> None:
        self.count = 0


@dataclass
class NeighborGroup:
    """One query neighborhood: member indices, relative coords, features.

    When fewer than k members fall inside the radius the group is padded by
    repeating its first member (or the nearest point for an off-cloud,
    empty query) and `padded` is set.
    """

    center_index: int | None
    center: np.ndarray
    member_indices: np.ndarray
    rel_coords: np.ndarray
    member_features: np.ndarray | None
    padded: bool
    n_real: int


def fps(points_xyz: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Farthest point sampling: greedy max-min selection of m indices.

    Each selected index (after `start`) maximizes the minimum squared
    distance to the already-selected set; ties break to the lowest index.
    """
    pts = np.asarray(points_xyz, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"fps: m={m} out of range for {n} points")
    sel = np.empty(m, dtype=np.int64)
    sel[0] = start
    d = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(d))
        sel[i] = nxt
        np.minimum(d, np.sum((pts - pts[nxt]) ** 2, axis=1), out=d)
    return sel


def sfps(points_xyz: np.ndarray, scores: np.ndarray, m: int,
         gamma: float = 1.0, start: int = 0) -> np.ndarray:
    """Confidence-weighted FPS: criterion score**gamma * distance.

    gamma = 0 reduces exactly to plain fps (weights all one).
    """
    pts = np.asarray(points_xyz, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    n = pts.shape[0]
    if s.shape != (n,):
        raise ValueError(f"sfps: scores shape {s.shape} != ({n},)")
    if not 1 <= m <= n:
        raise ValueError(f"sfps: m={m} out of range for {n} points")
    if gamma < 0:
        raise ValueError("sfps: gamma must be >= 0")
    w = s ** gamma
    sel = np.empty(m, dtype=np.int64)
    sel[0] = start
    d = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(w * np.sqrt(d)))
        sel[i] = nxt
        np.minimum(d, np.sum((pts - pts[nxt]) ** 2, axis=1), out=d)
    return sel


def ball_query_indices(centers: np.ndarray, points_xyz: np.ndarray,
                       radius: float, k: int,
                       counter: QueryCounter | None = None):
    """Vectorized radius search around each center.

    Returns (idx [Q, k] int64, pad_mask [Q, k] bool, n_real [Q]). Members are
    taken in ascending point-index order, at most k of them. Padding repeats
    the first member; an empty neighborhood is filled with the nearest point
    (all padded).
    """
    c = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    pts = np.asarray(points_xyz, dtype=np.float64)
    if radius <= 0:
        raise ValueError("ball_query: radius must be > 0")
    if k < 1:
        raise ValueError("ball_query: k must be >= 1")
    q, n = c.shape[0], pts.shape[0]
    if counter is not None:
        counter.add(q)
    d2 = np.sum((c[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    within = d2 <= radius * radius
    # rank members within each row by ascending point index, keep the first k
    rank = np.cumsum(within, axis=1)
    n_real = np.minimum(rank[:, -1], k).astype(np.int64)
    take = within & (rank <= k)
    rows, cols = np.nonzero(take)
    idx = np.zeros((q, k), dtype=np.int64)
    idx[rows, rank[rows, cols] - 1] = cols
    # pad short rows with their first member; empty rows take the nearest point
    has_any = n_real > 0
    first = np.where(has_any, idx[:, 0], np.argmin(d2, axis=1))
    pad = np.arange(k)[None, :] >= n_real[:, None]
    idx = np.where(pad, first[:, None], idx)
    return idx, pad, n_real


def ball_query(centers, points_xyz, radius, k, features=None,
               counter: QueryCounter | None = None):
    """Radius search returning one NeighborGroup per center."""
    c = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    pts = np.asarray(points_xyz, dtype=np.float64)
    idx, pad, n_real = ball_query_indices(c, pts, radius, k, counter=counter)
    # map centers that coincide with cloud points to their index
    groups = []
    for qi in range(c.shape[0]):
        hit = np.nonzero(np.all(pts == c[qi], axis=1))[0]
        center_index = int(hit[0]) if hit.size else None
        rows = idx[qi]
        groups.append(NeighborGroup(
            center_index=center_index,
            center=c[qi].copy(),
            member_indices=rows.copy(),
            rel_coords=pts[rows] - c[qi],
            member_features=None if features is None else np.asarray(features)[rows],
            padded=bool(pad[qi].any()),
            n_real=int(n_real[qi]),
        ))
    return groups


def aggregate_groups(idx: np.ndarray, rel, features, store: ad.ParamStore,
                     prefix: str, widths, rng=None,
                     rel_scale: float = 1.0) -> ad.Node:
    """Shared MLP on [relative xyz | member feature] then max over members.

    idx: (Q, k) member rows into `features`; rel: (Q, k, 3) relative coords
    (array or Node); features: (N, C) Node/array or None. rel_scale rescales
    the relative coordinates (1/radius keeps MLP inputs O(1)).
    Returns (Q, widths[-1]).
    """
    q, k = idx.shape
    rel_node = rel if isinstance(rel, ad.Node) else ad.constant(np.asarray(rel))
    if rel_scale != 1.0:
        rel_node = ad.scale(rel_node, rel_scale)
    rel_flat = ad.reshape(rel_node, (q * k, 3))
    if features is not None:
        feats = features if isinstance(features, ad.Node) else ad.constant(features)
        gathered = ad.gather_rows(feats, idx.reshape(-1))
        x = ad.concat([rel_flat, gathered], axis=1)
    else:
        x = rel_flat
    h = ad.mlp(x, store, prefix, widths, rng=rng, final_relu=True)
    h = ad.reshape(h, (q, k, widths[-1]))
    return ad.max_over_set(h, axis=1)


def aggregate_group(group: NeighborGroup, store: ad.ParamStore, prefix: str,
                    widths, rng=None) -> ad.Node:
    """Aggregate one prepared NeighborGroup into a single feature vector."""
    k = group.member_indices.shape[0]
    if group.member_features is not None:
        feats = np.asarray(group.member_features, dtype=np.float64)
        n = int(group.member_indices.max()) + 1
        table = np.zeros((n, feats.shape[1]))
        table[group.member_indices] = feats
        out = aggregate_groups(group.member_indices[None, :],
                               group.rel_coords[None, :, :], table,
                               store, prefix, widths, rng=rng)
    else:
        out = aggregate_groups(group.member_indices[None, :],
                               group.rel_coords[None, :, :], None,
                               store, prefix, widths, rng=rng)
    return ad.reshape(out, (widths[-1],))


def aggregate_msg(point, points_xyz, features, store: ad.ParamStore,
                  prefix: str, radii, ks, mlps, rng=None,
                  counter: QueryCounter | None = None,
                  normalize_rel: bool = False) -> ad.Node:
    """Multi-scale grouping around one point: one ball query per scale,
    per-scale aggregation, concatenated. Performs exactly len(radii) searches."""
    if not (len(radii) == len(ks) == len(mlps)):
        raise ValueError("aggregate_msg: radii/ks/mlps must have equal length")
    center = np.asarray(point, dtype=np.float64).reshape(1, 3)
    outs = []
    for s, (r, k, widths) in enumerate(zip(radii, ks, mlps)):
        idx, _, _ = ball_query_indices(center, points_xyz, r, k, counter=counter)
        rel = np.asarray(points_xyz)[idx[0]] - center[0]
        outs.append(aggregate_groups(idx, rel[None, :, :], features, store,
                                     f"{prefix}.s{s}", widths, rng=rng,
                                     rel_scale=1.0 / r if normalize_rel else 1.0))
    return ad.reshape(ad.concat(outs, axis=1), (sum(m[-1] for m in mlps),))


def aggregate_msg_batch(centers, points_xyz, features, store: ad.ParamStore,
                        prefix: str, radii, ks, mlps, rng=None,
                        counter: QueryCounter | None = None,
                        centers_node: ad.Node | None = None,
                        normalize_rel: bool = False) -> ad.Node:
    """Batched multi-scale grouping over Q centers; returns (Q, sum of widths).

    When `centers_node` is given, relative coordinates are expressed through
    it so gradients flow into the query positions (used for voted centers).
    """
    c = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    pts = np.asarray(points_xyz, dtype=np.float64)
    outs = []
    for s, (r, k, widths) in enumerate(zip(radii, ks, mlps)):
        idx, _, _ = ball_query_indices(c, pts, r, k, counter=counter)
        member_xyz = pts[idx]  # (Q, k, 3)
        if centers_node is not None:
            rel = ad.sub(ad.constant(member_xyz),
                         ad.reshape(centers_node, (c.shape[0], 1, 3)))
        else:
            rel = member_xyz - c[:, None, :]
        outs.append(aggregate_groups(idx, rel, features, store,
                                     f"{prefix}.s{s}", widths, rng=rng,
                                     rel_scale=1.0 / r if normalize_rel else 1.0))
    return ad.concat(outs, axis=1)
