"""Sparse voxel feature repository.

A repository summarizes a scene as the set of occupied voxels, each carrying
the mean coordinate of its member points, a feature vector, and a foreground
confidence. The update path scatters selected-point features onto the same
grid (zeros elsewhere), mines scene context with a small sparse-convolution
encoder-decoder, and fuses the result back:

    new_features = confidence * scene_features + MLP(old_features)

Sparse convolutions are gather-scatter over packed voxel coordinates with
3x3x3 kernels: stride-1 layers are submanifold (output support = input
support); stride-2 transitions dilate support by the receptive field.
Voxel traversal is sorted, so every pass is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

_KERNEL_OFFSETS = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)
_PACK_BIAS = 1 << 19
_PACK_SHIFT = 20


@dataclass
class FeatureRepository:
    coords: np.ndarray          # (K, 3) int voxel indices, unique
    centers: np.ndarray         # (K, 3) mean member coordinate, meters
    features: ad.Node           # (K, C)
    s_r: ad.Node                # (K,) foreground confidence in [0, 1]
    voxel_size: tuple

    @property
    def k(self) -> int:
        return self.coords.shape[0]

    def dump(self, path) -> None:
        """Debug dump in the checkpoint array format."""
        ad.save_checkpoint(path, {
            "coords": self.coords.astype(np.float64),
            "centers": self.centers,
            "features": self.features.value,
            "s_r": self.s_r.value,
            "voxel_size": np.asarray(self.voxel_size, dtype=np.float64),
        })


@dataclass
class SparseKnowledge:
    """Features aligned to a repository grid; rows with no contributing
    points stay zero but remain part of the support."""

    coords: np.ndarray          # (K, 3) int, same rows as the repository
    features: ad.Node           # (K, C)


def _as_node(x) -> ad.Node:
    return x if isinstance(x, ad.Node) else ad.constant(np.asarray(x, dtype=np.float64))


def voxel_indices(points_xyz: np.ndarray, voxel_size) -> np.ndarray:
    vs = np.asarray(voxel_size, dtype=np.float64)
    if (vs <= 0).any():
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    return np.floor(np.asarray(points_xyz, dtype=np.float64) / vs).astype(np.int64)


def _pack(coords: np.ndarray) -> np.ndarray:
    c = coords + _PACK_BIAS
    if (c < 0).any() or (c >= (1 << _PACK_SHIFT)).any():
        raise ValueError("voxel coordinates out of packable range")
    return (c[:, 0] << (2 * _PACK_SHIFT)) | (c[:, 1] << _PACK_SHIFT) | c[:, 2]


class _CoordMap:
    """Sorted packed-coordinate lookup: coords -> row index or -1."""

    def __init__(self, coords: np.ndarray):
        keys = _pack(coords)
        self.order = np.argsort(keys, kind="stable")
        self.sorted_keys = keys[self.order]

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        q = _pack(coords)
        pos = np.searchsorted(self.sorted_keys, q)
        pos_clip = np.minimum(pos, len(self.sorted_keys) - 1)
        hit = (pos < len(self.sorted_keys)) & (self.sorted_keys[pos_clip] == q)
        rows = np.where(hit, self.order[pos_clip], -1)
        return rows


def voxelize_mean(points_xyz, features, voxel_size) -> FeatureRepository:
    """Initial repository: per occupied voxel, arithmetic mean of member
    coordinates and features. Foreground confidence starts at zero."""
    pts = np.asarray(points_xyz, dtype=np.float64)
    feats = _as_node(features)
    vidx = voxel_indices(pts, voxel_size)
    coords, seg = np.unique(vidx, axis=0, return_inverse=True)
    k = coords.shape[0]
    counts = np.bincount(seg, minlength=k).astype(np.float64)
    centers = np.zeros((k, 3))
    np.add.at(centers, seg, pts)
    centers /= counts[:, None]
    summed = ad.scatter_rows(feats, seg, k)
    mean_f = ad.mul(summed, ad.constant((1.0 / counts)[:, None]))
    return FeatureRepository(
        coords=coords, centers=centers, features=mean_f,
        s_r=ad.constant(np.zeros(k)), voxel_size=tuple(float(v) for v in voxel_size),
    )


def scatter_knowledge(point_xyz, point_features, repo: FeatureRepository,
                      rows=None) -> SparseKnowledge:
    """Place selected-point features onto the repository grid.

    Collisions are averaged; grid rows with no contribution stay zero.
    `rows` short-circuits the coordinate lookup when the caller already
    knows each point's repository row.
    """
    feats = _as_node(point_features)
    k = repo.k
    if rows is None:
        vidx = voxel_indices(np.asarray(point_xyz, dtype=np.float64), repo.voxel_size)
        rows = _CoordMap(repo.coords).lookup(vidx)
    rows = np.asarray(rows, dtype=np.int64)
    keep = rows >= 0
    if not keep.all():
        feats = ad.gather_rows(feats, np.nonzero(keep)[0])
        rows = rows[keep]
    counts = np.bincount(rows, minlength=k).astype(np.float64)
    summed = ad.scatter_rows(feats, rows, k)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    return SparseKnowledge(coords=repo.coords,
                           features=ad.mul(summed, ad.constant(inv[:, None])))


def _sparse_conv(x: ad.Node, in_coords, out_coords, in_map: _CoordMap,
                 store: ad.ParamStore, prefix: str, c_out: int,
                 stride: int, rng) -> ad.Node:
    """3x3x3 sparse convolution via gather-matmul-scatter per kernel offset.

    stride 1: out[p] = sum_k W_k x[p + k]
    stride 2: out[p] = sum_k W_k x[2p + k]
    """
    c_in = x.shape[1]
    n_out = out_coords.shape[0]
    base = out_coords * stride
    terms = []
    for ki, off in enumerate(_KERNEL_OFFSETS):
        # weights exist for every offset so the parameter set is data-independent
        w = store.param(f"{prefix}.k{ki}", (c_in, c_out), rng=rng)
        rows = in_map.lookup(base + off)
        hit = np.nonzero(rows >= 0)[0]
        if hit.size == 0:
            continue
        gathered = ad.gather_rows(x, rows[hit])
        terms.append(ad.scatter_rows(ad.matmul(gathered, w), hit, n_out))
    bias = store.param(f"{prefix}.b", (c_out,), init="zeros")
    if not terms:
        return ad.add(ad.constant(np.zeros((n_out, c_out))), bias)
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.add(acc, bias)


def _down_support(coords: np.ndarray) -> np.ndarray:
    """Stride-2 output support: every parent voxel whose 3x3x3 receptive
    field (around 2p) touches the input support."""
    per_axis = []
    for ax in range(3):
        q = coords[:, ax]
        even = q % 2 == 0
        opts = np.full((coords.shape[0], 2), np.iinfo(np.int64).min, dtype=np.int64)
        opts[even, 0] = q[even] // 2
        opts[~even, 0] = (q[~even] - 1) // 2
        opts[~even, 1] = (q[~even] + 1) // 2
        per_axis.append(opts)
    parents = []
    for ix in range(2):
        for iy in range(2):
            for iz in range(2):
                cand = np.stack([per_axis[0][:, ix], per_axis[1][:, iy],
                                 per_axis[2][:, iz]], axis=1)
                valid = (cand != np.iinfo(np.int64).min).all(axis=1)
                if valid.any():
                    parents.append(cand[valid])
    return np.unique(np.concatenate(parents, axis=0), axis=0)


def _up_conv(x: ad.Node, coarse_coords, fine_coords, coarse_map: _CoordMap,
             store: ad.ParamStore, prefix: str, c_out: int, rng) -> ad.Node:
    """Transposed stride-2 conv evaluated exactly at the saved finer support:
    out[q] = sum_k W_k x[p] over parents p with q = 2p + k."""
    c_in = x.shape[1]
    n_out = fine_coords.shape[0]
    terms = []
    for ki, off in enumerate(_KERNEL_OFFSETS):
        w = store.param(f"{prefix}.k{ki}", (c_in, c_out), rng=rng)
        # q = 2p + off  =>  p = (q - off) / 2 where divisible
        num = fine_coords - off
        ok = (num % 2 == 0).all(axis=1)
        if not ok.any():
            continue
        rows = np.full(n_out, -1, dtype=np.int64)
        rows[ok] = coarse_map.lookup(num[ok] // 2)
        hit = np.nonzero(rows >= 0)[0]
        if hit.size == 0:
            continue
        gathered = ad.gather_rows(x, rows[hit])
        terms.append(ad.scatter_rows(ad.matmul(gathered, w), hit, n_out))
    bias = store.param(f"{prefix}.b", (c_out,), init="zeros")
    if not terms:
        return ad.add(ad.constant(np.zeros((n_out, c_out))), bias)
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.add(acc, bias)


def encode_decode(knowledge: SparseKnowledge, store: ad.ParamStore,
                  prefix: str, channels, rng=None):
    """Two stride-2 downsamplings to a bottleneck, two upsamplings back, with
    additive skips between equal-resolution stages.

    channels = (c0, c1, c2, c3, c4) with c0 == c4 and c1 == c3. Returns
    (features at the input support, stage supports [S0, S1, S2]).
    """
    c0, c1, c2, c3, c4 = channels
    s0 = knowledge.coords
    map0 = _CoordMap(s0)
    x = _as_node(knowledge.features)

    enc0 = ad.relu(_sparse_conv(x, s0, s0, map0, store, f"{prefix}.enc0", c0, 1, rng))

    s1 = _down_support(s0)
    map1 = _CoordMap(s1)
    enc1 = ad.relu(_sparse_conv(enc0, s0, s1, map0, store, f"{prefix}.down1", c1, 2, rng))

    s2 = _down_support(s1)
    enc2 = ad.relu(_sparse_conv(enc1, s1, s2, map1, store, f"{prefix}.down2", c2, 2, rng))

    map2 = _CoordMap(s2)
    up1 = _up_conv(enc2, s2, s1, map2, store, f"{prefix}.up1", c3, rng)
    dec1 = ad.relu(ad.add(up1, enc1))  # additive skip at the mid resolution

    up2 = _up_conv(dec1, s1, s0, map1, store, f"{prefix}.up2", c4, rng)
    dec0 = ad.relu(ad.add(up2, enc0))  # skip at the input resolution
    return dec0, [s0, s1, s2]


def fuse_repository(repo: FeatureRepository, scene_features, s_r,
                    store: ad.ParamStore, prefix: str, out_dim: int,
                    rng=None) -> FeatureRepository:
    """Fusion update: new = s_r * scene_feature + MLP(old feature).

    scene_features must be aligned row-for-row with the repository (missing
    voxels contribute zero rows). The MLP has one hidden layer of width
    out_dim; a width mismatch between scene_features and the MLP output is
    an error.
    """
    scene = _as_node(scene_features)
    conf = _as_node(s_r)
    old = ad.mlp(_as_node(repo.features), store, f"{prefix}.mlp",
                 (out_dim, out_dim), rng=rng, final_relu=False)
    if scene.shape[1] != old.shape[1]:
        raise ad.ShapeError(
            f"fuse_repository: scene features width {scene.shape[1]} != "
            f"MLP output width {old.shape[1]}")
    if scene.shape[0] != repo.k:
        raise ad.ShapeError(
            f"fuse_repository: scene rows {scene.shape[0]} != voxels {repo.k}")
    gated = ad.mul(ad.reshape(conf, (repo.k, 1)), scene)
    return FeatureRepository(
        coords=repo.coords, centers=repo.centers,
        features=ad.add(gated, old), s_r=conf, voxel_size=repo.voxel_size,
    )
