"""The sparse voxel feature repository and its fusion update.

Voxel-mean initialization summarizes a scene; selected-point features are
scattered back onto the same grid (zeros elsewhere), mixed spatially by a
small sparse-convolution encoder-decoder, and fused with the old features
gated by the per-voxel foreground confidence.
"""

import numpy as np

from pcdistill import autodiff as ad
from pcdistill import repository as rp
from pcdistill.core import seeded_rng

rng = seeded_rng(1)

pts = rng.normal(size=(400, 3)) * np.array([6.0, 6.0, 1.0])
feats = rng.normal(size=(400, 8))

print("== voxel-mean initialization ==")
repo = rp.voxelize_mean(pts, feats, (1.0, 1.0, 1.0))
print(f"{pts.shape[0]} points -> {repo.k} occupied voxels "
      f"(width {repo.features.shape[1]})")
vidx = rp.voxel_indices(pts, (1.0, 1.0, 1.0))
_, seg = np.unique(vidx, axis=0, return_inverse=True)
counts = np.bincount(seg)
mass = (repo.centers * counts[:, None]).sum(axis=0)
print(f"centroid mass conserved: max axis error "
      f"{np.abs(mass - pts.sum(axis=0)).max():.2e}")

print("\n== scattering selected-point features ==")
rows = rng.choice(repo.k, size=24, replace=False)
selected = rng.normal(size=(24, 8))
knowledge = rp.scatter_knowledge(None, selected, repo, rows=rows)
occupied = np.abs(knowledge.features.value).sum(axis=1) > 0
print(f"24 selected points occupy {occupied.sum()} grid rows; the other "
      f"{repo.k - occupied.sum()} stay zero but remain in the support")

print("\n== encoder-decoder ==")
store = ad.ParamStore()
scene, supports = rp.encode_decode(knowledge, store, "ed", (8, 8, 16, 8, 8),
                                   rng=rng)
print(f"stage supports: {supports[0].shape[0]} -> {supports[1].shape[0]} -> "
      f"{supports[2].shape[0]} voxels (stride-2 stages dilate)")
print(f"output back at the input support: {scene.shape}")
spread = np.abs(scene.value[~occupied]).sum(axis=1)
print(f"zero-input rows now carry context: {int((spread > 0).sum())} of "
      f"{int((~occupied).sum())} are nonzero after mixing")

print("\n== fusion update ==")
s_r = ad.constant(rng.random(repo.k))
fused = rp.fuse_repository(repo, scene, s_r, store, "fuse", 8, rng=rng)
print(f"fused width {fused.features.shape[1]}; voxel count and coordinates "
      f"unchanged: {fused.k == repo.k and np.array_equal(fused.coords, repo.coords)}")
zero = rp.fuse_repository(repo, scene, ad.constant(np.zeros(repo.k)), store,
                          "fuse", 8)
h = np.maximum(repo.features.value @ store.params["fuse.mlp.0.w"].value
               + store.params["fuse.mlp.0.b"].value, 0)
mlp_only = h @ store.params["fuse.mlp.1.w"].value + store.params["fuse.mlp.1.b"].value
print(f"zero confidence degenerates to the MLP path: max error "
      f"{np.abs(zero.features.value - mlp_only).max():.2e}")
