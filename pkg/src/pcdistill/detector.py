"""Teacher and student detection networks and the distillation procedure.

Both roles share one architecture skeleton: a multi-scale keypoint stage
initializes the voxel feature repository, a selected subset of repository
points is aggregated into per-point features (multi-scale neighborhoods for
the teacher, a single neighborhood for the student), those features update
the repository through a sparse encoder-decoder, voted centers pool
object-level features, and class-statistics-modulated heads emit class
confidences and box residuals.

The teacher is pre-trained on hard targets; distillation freezes it and
trains the student against a blend of the teacher's squashed confidences
and boxes (soft) and ground truth (hard).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import boxes as bx
from . import data as dat
from . import losses as ls
from . import repository as rp
from . import sampling as sp
from .core import (Box3D, LabeledScene, NumericError, PipelineConfig, PointCloud,
                   derive_seed, pipeline_config_from_text, pipeline_config_to_text,
                   seeded_rng)


@dataclass
class ClassStats:
    """Per-class transferable feature statistics: one (D,) row per class."""

    rows: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ValueError("ClassStats expects an (n_classes, D) matrix")
        if not np.isfinite(self.rows).all():
            raise ValueError("ClassStats must be finite")

    @property
    def n_classes(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def update_class_stats(stats: ClassStats, features: np.ndarray, labels,
                       momentum: float) -> ClassStats:
    """EMA update of per-class rows from foreground object-level features.

    Classes with no foreground rows in the batch keep their previous row.
    """
    rows = stats.rows.copy()
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    for c in range(stats.n_classes):
        mask = labels == c
        if not mask.any():
            continue
        rows[c] = momentum * rows[c] + (1.0 - momentum) * feats[mask].mean(axis=0)
    return ClassStats(rows)


@dataclass
class Detections:
    boxes: list
    class_ids: np.ndarray
    scores: np.ndarray
    class_scores: np.ndarray      # (n, n_classes) foreground probabilities
    provenance: np.ndarray        # selected-point row of each detection

    def __len__(self):
        return len(self.boxes)


@dataclass
class ForwardState:
    cloud: PointCloud
    kp_xyz: np.ndarray
    repo: rp.FeatureRepository            # initial repository (s_r filled)
    s_r: ad.Node
    partial_rows: np.ndarray
    pcoords: np.ndarray
    pfeat: ad.Node
    aux_logits: ad.Node
    repo_fused: rp.FeatureRepository
    votes: ad.Node
    obj_feats: ad.Node
    cls_logits: ad.Node                   # (J, C+1), background last
    query_counts: dict = field(default_factory=dict)
    undersized: bool = False
    ed_supports: list = field(default_factory=list)

    @property
    def n_partial(self) -> int:
        return self.partial_rows.shape[0]


def _cycle_pad(idx: np.ndarray, m: int) -> np.ndarray:
    reps = int(np.ceil(m / idx.shape[0]))
    return np.tile(idx, reps)[:m]


class DetectorModel:
    """One detection network (teacher or student) plus its buffers."""

    def __init__(self, role: str, cfg: PipelineConfig, n_classes: int,
                 class_names=None):
        if role not in ("teacher", "student"):
            raise ValueError(f"role must be teacher or student, got {role!r}")
        self.role = role
        self.cfg = cfg
        self.n_classes = int(n_classes)
        self.class_names = list(class_names) if class_names else [
            f"class{i}" for i in range(n_classes)]
        self.store = ad.ParamStore()
        self.stats = ClassStats(np.ones((n_classes, cfg.stats_dim)))
        self.anchors = np.ones((n_classes, 3))
        self._build(seeded_rng(derive_seed(cfg.seed, f"model:{role}")))
        if role == "student":
            assert len(self.partial_radii) == 1
        else:
            assert len(self.partial_radii) >= 2

    # role-dependent stage configuration
    @property
    def partial_radii(self):
        c = self.cfg
        return [c.partial_radius] if self.role == "student" else list(c.teacher_partial_radii)

    @property
    def partial_ks(self):
        c = self.cfg
        return [c.partial_k] if self.role == "student" else list(c.teacher_partial_ks)

    @property
    def partial_mlps(self):
        return [list(self.cfg.partial_mlp) for _ in self.partial_radii]

    @property
    def partial_dim(self) -> int:
        return sum(m[-1] for m in self.partial_mlps)

    @property
    def ed_channels(self):
        c = self.cfg
        return c.student_ed_channels if self.role == "student" else c.teacher_ed_channels

    @property
    def obj_k(self) -> int:
        c = self.cfg
        return c.obj_k_student if self.role == "student" else c.obj_k_teacher

    @property
    def obj_dim(self) -> int:
        return self.cfg.stats_dim

    def _create_mlp(self, rng, prefix, in_dim, widths, final_scale: float = 1.0):
        d = in_dim
        for i, w in enumerate(widths):
            scale_i = final_scale if i == len(widths) - 1 else 1.0
            if scale_i == 1.0:
                self.store.param(f"{prefix}.{i}.w", (d, w), rng=rng)
            else:
                # head output layers start small so logits/residuals are O(0.1)
                self.store.param(
                    f"{prefix}.{i}.w", (d, w),
                    init=lambda s, d=d, sc=scale_i: ad.kaiming(s, rng) * sc)
            self.store.param(f"{prefix}.{i}.b", (w,), init="zeros")
            d = w

    def _build(self, rng):
        c = self.cfg
        def ln(name, dim):
            self.store.param(f"{name}.g", (dim,), init="ones")
            self.store.param(f"{name}.b", (dim,), init="zeros")

        for s, chs in enumerate(c.repo_msg_channels):
            self._create_mlp(rng, f"repo_msg.s{s}", 4, chs)
        msg_out = sum(chs[-1] for chs in c.repo_msg_channels)
        self._create_mlp(rng, "repo_proj", msg_out, (c.repo_init_dim,))
        ln("repo_ln", c.repo_init_dim)
        self._create_mlp(rng, "fg", c.repo_init_dim, (c.fg_head_hidden, 1),
                         final_scale=0.1)
        for s, widths in enumerate(self.partial_mlps):
            self._create_mlp(rng, f"partial.s{s}", 3 + c.repo_init_dim, widths)
        ln("partial_ln", self.partial_dim)
        self._create_mlp(rng, "aux", self.partial_dim,
                         (c.aux_head_hidden, self.n_classes + 1), final_scale=0.1)
        ed = self.ed_channels
        dims = [(self.partial_dim, ed[0]), (ed[0], ed[1]), (ed[1], ed[2]),
                (ed[2], ed[3]), (ed[3], ed[4])]
        for name, (ci, co) in zip(("enc0", "down1", "down2", "up1", "up2"), dims):
            for ki in range(27):
                self.store.param(f"ed.{name}.k{ki}", (ci, co), rng=rng)
            self.store.param(f"ed.{name}.b", (co,), init="zeros")
        self._create_mlp(rng, "scene_proj", ed[4], (c.repo_feature_dim,))
        self._create_mlp(rng, "fuse.mlp", c.repo_init_dim,
                         (c.repo_feature_dim, c.repo_feature_dim))
        ln("fuse_ln", c.repo_feature_dim)
        self._create_mlp(rng, "vote", self.partial_dim, (3,), final_scale=0.1)
        for s in range(len(c.obj_radii)):
            self._create_mlp(rng, f"obj.s{s}", 3 + c.repo_feature_dim, c.obj_mlp)
        self._create_mlp(rng, "obj_proj", len(c.obj_radii) * c.obj_mlp[-1],
                         (c.stats_dim,))
        ln("obj_ln", c.stats_dim)
        self._create_mlp(rng, "cls", c.stats_dim, (c.cls_head_hidden, 1),
                         final_scale=0.1)
        self._create_mlp(rng, "cls_bg", c.stats_dim, (1,), final_scale=0.1)
        if self.role == "student":
            self._create_mlp(rng, "loc", c.stats_dim, (c.loc_head_hidden, 8),
                             final_scale=0.1)
        else:
            self._create_mlp(rng, "loc_in", c.stats_dim, (c.loc_head_hidden,))
            self._create_mlp(rng, "loc_film_g", c.stats_dim, (c.loc_head_hidden,),
                             final_scale=0.1)
            self._create_mlp(rng, "loc_film_b", c.stats_dim, (c.loc_head_hidden,),
                             final_scale=0.1)
            self._create_mlp(rng, "loc_out", c.loc_head_hidden, (8,),
                             final_scale=0.1)

    def count_params(self) -> int:
        return self.store.count()

    def loc_head_params(self) -> int:
        names = [n for n in self.store.names()
                 if n.startswith(("loc.", "loc_in", "loc_film", "loc_out"))]
        return int(sum(self.store.params[n].size for n in names))

    # ------------------------------------------------------------------
    # forward stages

    def forward_repo_init(self, cloud: PointCloud, counters=None):
        """FPS keypoints -> multi-scale aggregation -> voxel-mean repository,
        with the foreground head filling per-voxel confidence."""
        c = self.cfg
        counters = counters if counters is not None else {}
        counter = counters.setdefault("repo_init", sp.QueryCounter())
        n = cloud.n
        undersized = n < c.n_keypoints
        if undersized:
            kp_idx = _cycle_pad(np.arange(n, dtype=np.int64), c.n_keypoints)
        else:
            kp_idx = sp.fps(cloud.xyz, c.n_keypoints)
        kp_xyz = cloud.xyz[kp_idx]
        refl = cloud.reflectance[:, None]
        feats = sp.aggregate_msg_batch(
            kp_xyz, cloud.xyz, refl, self.store, "repo_msg",
            c.repo_msg_radii, c.repo_msg_ks, list(c.repo_msg_channels),
            counter=counter, normalize_rel=True)
        feats = ad.relu(ad.mlp(feats, self.store, "repo_proj", (c.repo_init_dim,)))
        feats = ad.layer_norm(feats, self.store, "repo_ln")
        repo = rp.voxelize_mean(kp_xyz, feats, c.voxel_size)
        logits = ad.mlp(repo.features, self.store, "fg", (c.fg_head_hidden, 1))
        s_r = ad.sigmoid(ad.reshape(logits, (repo.k,)))
        repo.s_r = s_r
        return repo, kp_xyz, undersized

    def forward_partial_knowledge(self, repo: rp.FeatureRepository, rows=None,
                                  counters=None):
        """Confidence-weighted FPS selection plus neighborhood aggregation.

        The student performs exactly one neighborhood search per selected
        point; the teacher one per scale.
        """
        c = self.cfg
        counters = counters if counters is not None else {}
        counter = counters.setdefault("partial", sp.QueryCounter())
        if rows is None:
            m = min(c.n_partial, repo.k)
            rows = sp.sfps(repo.centers, repo.s_r.value, m, gamma=c.sfps_gamma)
            if m < c.n_partial:
                rows = _cycle_pad(rows, c.n_partial)
        rows = np.asarray(rows, dtype=np.int64)
        pcoords = repo.centers[rows]
        outs = []
        for s, (r, k, widths) in enumerate(zip(self.partial_radii, self.partial_ks,
                                               self.partial_mlps)):
            idx, _, _ = sp.ball_query_indices(pcoords, repo.centers, r, k,
                                              counter=counter)
            rel = repo.centers[idx] - pcoords[:, None, :]
            gathered = sp.aggregate_groups(idx, rel, repo.features, self.store,
                                           f"partial.s{s}", widths,
                                           rel_scale=1.0 / r)
            outs.append(gathered)
        pfeat = outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)
        pfeat = ad.layer_norm(pfeat, self.store, "partial_ln")
        aux_logits = ad.mlp(pfeat, self.store, "aux",
                            (c.aux_head_hidden, self.n_classes + 1))
        return rows, pcoords, pfeat, aux_logits

    def update_repository(self, repo: rp.FeatureRepository, rows, pfeat):
        """Scatter selected-point features, run the encoder-decoder, fuse."""
        c = self.cfg
        knowledge = rp.scatter_knowledge(None, pfeat, repo, rows=rows)
        scene, supports = rp.encode_decode(knowledge, self.store, "ed",
                                           self.ed_channels)
        scene = ad.mlp(scene, self.store, "scene_proj", (c.repo_feature_dim,))
        fused = rp.fuse_repository(repo, scene, repo.s_r, self.store, "fuse",
                                   c.repo_feature_dim)
        fused.features = ad.layer_norm(fused.features, self.store, "fuse_ln")
        return fused, supports

    def vote_centers(self, pcoords: np.ndarray, pfeat: ad.Node) -> ad.Node:
        """Predicted object center per selected point: coordinate + offset."""
        offset = ad.mlp(pfeat, self.store, "vote", (3,))
        return ad.add(ad.constant(pcoords), offset)

    def aggregate_object(self, repo: rp.FeatureRepository, votes: ad.Node,
                         counters=None) -> ad.Node:
        """Multi-scale pooling of repository features around voted centers."""
        c = self.cfg
        counters = counters if counters is not None else {}
        counter = counters.setdefault("object", sp.QueryCounter())
        ks = [self.obj_k] * len(c.obj_radii)
        mlps = [list(c.obj_mlp)] * len(c.obj_radii)
        # relative coordinates stay in meters here: absolute extent is the
        # strongest class cue at object level (the norm layer bounds scale)
        feats = sp.aggregate_msg_batch(
            votes.value, repo.centers, repo.features, self.store, "obj",
            c.obj_radii, ks, mlps, counter=counter, centers_node=votes)
        feats = ad.relu(ad.mlp(feats, self.store, "obj_proj", (c.stats_dim,)))
        return ad.layer_norm(feats, self.store, "obj_ln")

    def classify_with_stats(self, obj_feats: ad.Node) -> ad.Node:
        """Class scores from statistics-modulated features plus a background
        logit; returns (J, n_classes + 1)."""
        c = self.cfg
        j = obj_feats.shape[0]
        if obj_feats.shape[1] != self.stats.dim:
            raise ad.ShapeError(
                f"classify_with_stats: feature width {obj_feats.shape[1]} != "
                f"stats dim {self.stats.dim}")
        mod = ad.mul(ad.reshape(obj_feats, (j, 1, self.stats.dim)),
                     ad.constant(self.stats.rows[None, :, :]))
        mod = ad.reshape(mod, (j * self.n_classes, self.stats.dim))
        scores = ad.mlp(mod, self.store, "cls", (c.cls_head_hidden, 1))
        scores = ad.reshape(scores, (j, self.n_classes))
        bg = ad.mlp(obj_feats, self.store, "cls_bg", (1,))
        return ad.concat([scores, bg], axis=1)

    def localize(self, votes: ad.Node, obj_feats: ad.Node, assigned):
        """Box residuals and decoded box parts for each point.

        assigned: per-point class id used for the anchor (and, for the
        teacher, for the statistics-conditioned head).
        """
        c = self.cfg
        j = obj_feats.shape[0]
        assigned = np.asarray(assigned, dtype=np.int64)
        if self.role == "student":
            res = ad.mlp(obj_feats, self.store, "loc", (c.loc_head_hidden, 8))
        else:
            h = ad.relu(ad.mlp(obj_feats, self.store, "loc_in", (c.loc_head_hidden,)))
            stats_node = ad.constant(self.stats.rows)
            # scale generated around 1 so the head starts near plain identity
            gamma_rows = ad.add(ad.mlp(stats_node, self.store, "loc_film_g",
                                       (c.loc_head_hidden,)), 1.0)
            beta_rows = ad.mlp(stats_node, self.store, "loc_film_b",
                               (c.loc_head_hidden,))
            g = ad.gather_rows(gamma_rows, assigned)
            b = ad.gather_rows(beta_rows, assigned)
            h = ad.add(ad.mul(g, h), b)
            res = ad.mlp(h, self.store, "loc_out", (8,))
        center = ad.add(votes, ad.slice_cols(res, 0, 3))
        # size residuals are log-ratios; clamp so unsupervised background
        # rows cannot overflow/underflow the exp at inference
        dims = ad.mul(ad.constant(self.anchors[assigned]),
                      ad.exp(ad.clip(ad.slice_cols(res, 3, 6), -8.0, 8.0)))
        s_raw = ad.reshape(ad.slice_cols(res, 6, 7), (j,))
        c_raw = ad.reshape(ad.slice_cols(res, 7, 8), (j,))
        norm = ad.sqrt(ad.add(ad.add(ad.mul(s_raw, s_raw), ad.mul(c_raw, c_raw)),
                              1e-12))
        parts = {
            "cx": ad.reshape(ad.slice_cols(center, 0, 1), (j,)),
            "cy": ad.reshape(ad.slice_cols(center, 1, 2), (j,)),
            "cz": ad.reshape(ad.slice_cols(center, 2, 3), (j,)),
            "w": ad.reshape(ad.slice_cols(dims, 0, 1), (j,)),
            "l": ad.reshape(ad.slice_cols(dims, 1, 2), (j,)),
            "h": ad.reshape(ad.slice_cols(dims, 2, 3), (j,)),
            "sin": ad.div(s_raw, norm),
            "cos": ad.div(c_raw, norm),
        }
        return res, parts

    def forward(self, cloud: PointCloud, partial_rows=None) -> ForwardState:
        counters: dict = {}
        repo, kp_xyz, undersized = self.forward_repo_init(cloud, counters)
        rows, pcoords, pfeat, aux_logits = self.forward_partial_knowledge(
            repo, rows=partial_rows, counters=counters)
        fused, supports = self.update_repository(repo, rows, pfeat)
        votes = self.vote_centers(pcoords, pfeat)
        obj_feats = self.aggregate_object(fused, votes, counters)
        cls_logits = self.classify_with_stats(obj_feats)
        return ForwardState(
            cloud=cloud, kp_xyz=kp_xyz, repo=repo, s_r=repo.s_r,
            partial_rows=rows, pcoords=pcoords, pfeat=pfeat,
            aux_logits=aux_logits, repo_fused=fused, votes=votes,
            obj_feats=obj_feats, cls_logits=cls_logits,
            query_counts={k: v.count for k, v in counters.items()},
            undersized=undersized, ed_supports=supports,
        )


# ---------------------------------------------------------------------------
# box residual encode/decode helpers (inverse pair)

def encode_box(box: Box3D, vote_xyz, anchor) -> np.ndarray:
    """Residual vector the loc head would need to emit for `box`."""
    a = np.asarray(anchor, dtype=np.float64)
    v = np.asarray(vote_xyz, dtype=np.float64)
    return np.array([
        box.cx - v[0], box.cy - v[1], box.cz - v[2],
        math.log(box.w / a[0]), math.log(box.l / a[1]), math.log(box.h / a[2]),
        math.sin(box.yaw), math.cos(box.yaw),
    ])


def decode_box(res: np.ndarray, vote_xyz, anchor) -> Box3D:
    """Inverse of encode_box; zero residuals give the anchor box at the vote
    with yaw 0."""
    a = np.asarray(anchor, dtype=np.float64)
    v = np.asarray(vote_xyz, dtype=np.float64)
    return Box3D(
        v[0] + res[0], v[1] + res[1], v[2] + res[2],
        a[0] * math.exp(res[3]), a[1] * math.exp(res[4]), a[2] * math.exp(res[5]),
        math.atan2(res[6], res[7]),
    )


def parts_to_boxes(parts: dict) -> list:
    """Decode per-point part nodes into Box3D values."""
    n = parts["cx"].shape[0]
    out = []
    for i in range(n):
        yaw = math.atan2(float(parts["sin"].value[i]), float(parts["cos"].value[i]))
        out.append(Box3D(
            float(parts["cx"].value[i]), float(parts["cy"].value[i]),
            float(parts["cz"].value[i]), float(parts["w"].value[i]),
            float(parts["l"].value[i]), float(parts["h"].value[i]), yaw))
    return out


# ---------------------------------------------------------------------------
# target assembly and loss computation

def scene_targets(pcoords: np.ndarray, repo: rp.FeatureRepository,
                  scene: LabeledScene, n_classes: int) -> dict:
    """Hard labels for selected points and repository voxels."""
    labels = np.full(pcoords.shape[0], n_classes, dtype=np.int64)
    box_of = np.full(pcoords.shape[0], -1, dtype=np.int64)
    for bi, (b, cid) in enumerate(zip(scene.boxes, scene.class_ids)):
        mask = dat.points_in_box(pcoords, b) & (box_of < 0)
        labels[mask] = cid
        box_of[mask] = bi
    fg_rows = np.nonzero(box_of >= 0)[0]
    gt_boxes = np.array([scene.boxes[box_of[r]].as_array() for r in fg_rows],
                        dtype=np.float64).reshape(-1, 7)
    voxel_fg = np.zeros(repo.k)
    for b in scene.boxes:
        voxel_fg = np.maximum(voxel_fg, dat.points_in_box(repo.centers, b).astype(float))
    return {
        "labels": labels,
        "fg_rows": fg_rows,
        "gt_boxes": gt_boxes,
        "gt_centers": gt_boxes[:, :3],
        "voxel_fg": voxel_fg,
        "box_of": box_of,
    }


def _gather_parts(parts: dict, rows: np.ndarray) -> dict:
    return {k: ad.gather_rows(v, rows) for k, v in parts.items()}


def compute_scene_loss(model: DetectorModel, state: ForwardState,
                       scene: LabeledScene, teacher: DetectorModel | None = None,
                       teacher_state: ForwardState | None = None,
                       lambda_soft: float | None = None,
                       lambda_hard: float | None = None):
    """Total loss node and breakdown for one scene.

    When a teacher state is supplied (computed at the same partial rows),
    its squashed confidences and decoded boxes become soft targets.
    """
    cfg = model.cfg
    lam_s = cfg.lambda_soft if lambda_soft is None else lambda_soft
    lam_h = cfg.lambda_hard if lambda_hard is None else lambda_hard
    tg = scene_targets(state.pcoords, state.repo, scene, model.n_classes)
    labels, fg_rows = tg["labels"], tg["fg_rows"]

    # localization decode at the hard class (background rows use class 0;
    # they never contribute to localization terms)
    assigned = np.where(labels < model.n_classes, labels, 0)
    _, parts = model.localize(state.votes, state.obj_feats, assigned)
    parts_fg = _gather_parts(parts, fg_rows) if fg_rows.size else None

    hard = ls.hard_losses(
        state.cls_logits, state.aux_logits, labels,
        parts_fg, tg["gt_boxes"], state.votes, tg["gt_centers"], fg_rows,
        state.s_r, tg["voxel_fg"],
        cfg.lambda_ind, cfg.lambda_corner, use_cwiou=cfg.hard_loc_cwiou)
    hard["n_foreground"] = fg_rows.size

    soft: dict = {"n_foreground": fg_rows.size}
    if teacher is not None and teacher_state is not None and lam_s > 0:
        t = cfg.temperature
        fg_onehot = np.zeros((labels.shape[0], model.n_classes), dtype=bool)
        in_fg = labels < model.n_classes
        fg_onehot[np.nonzero(in_fg)[0], labels[in_fg]] = True

        det_soft = ls.temp_sigmoid(teacher_state.cls_logits.value[:, :model.n_classes], t)
        det_pred = ls.temp_sigmoid(ad.slice_cols(state.cls_logits, 0, model.n_classes), t)
        aux_soft = ls.temp_sigmoid(teacher_state.aux_logits.value[:, :model.n_classes], t)
        aux_pred = ls.temp_sigmoid(ad.slice_cols(state.aux_logits, 0, model.n_classes), t)
        soft["cls"] = ad.add(
            ls.soft_focal(det_soft, det_pred, fg_onehot, cfg.alpha_t, cfg.gamma),
            ls.soft_focal(aux_soft, aux_pred, fg_onehot, cfg.alpha_t, cfg.gamma))

        if fg_rows.size:
            _, t_parts = teacher.localize(teacher_state.votes,
                                          teacher_state.obj_feats, assigned)
            t_boxes = np.array(
                [b.as_array() for b in parts_to_boxes(_gather_parts(t_parts, fg_rows))])
            soft["loc"] = ls.soft_loc_loss(parts_fg, t_boxes, cfg.lambda_ind,
                                           cfg.lambda_corner,
                                           use_cwiou=cfg.soft_loc_cwiou)
    return ls.hybrid_loss(soft, hard, lam_s, lam_h)


def distill_step(teacher: DetectorModel | None, student: DetectorModel,
                 scenes, lr: float, lambda_soft: float | None = None,
                 lambda_hard: float | None = None,
                 state_hook=None, teacher_cache: dict | None = None) -> ls.LossBreakdown:
    """One optimizer step on a batch of scenes.

    The teacher (when present) runs frozen, and its trained foreground
    scores pick the selected rows: soft targets stay on-distribution and
    both branches see the same points (keypoints and the voxel grid are
    weight-independent, so repository rows align across roles). Any gradient
    reaching a teacher parameter is an error. `teacher_cache` memoizes
    teacher states per scene object when the caller replays identical
    scenes across epochs. state_hook(scene, state) sees each forward state
    (stats EMA piggybacks on it during teacher pre-training).
    """
    cfg = student.cfg
    lam_s = cfg.lambda_soft if lambda_soft is None else lambda_soft
    student.store.zero_grad()
    if teacher is not None:
        teacher.store.zero_grad()  # stale pre-training grads are not a violation
    rows_acc = None
    n = len(scenes)
    for scene in scenes:
        t_state = None
        if teacher is not None and lam_s > 0:
            if teacher_cache is not None and id(scene) in teacher_cache:
                t_state = teacher_cache[id(scene)]
            else:
                with ad.no_grad():
                    t_state = teacher.forward(scene.cloud)
                if teacher_cache is not None:
                    teacher_cache[id(scene)] = t_state
            state = student.forward(scene.cloud,
                                    partial_rows=t_state.partial_rows)
        else:
            state = student.forward(scene.cloud)
        total, bd = compute_scene_loss(student, state, scene, teacher, t_state,
                                       lambda_soft=lambda_soft,
                                       lambda_hard=lambda_hard)
        if not math.isfinite(bd.total):
            raise NumericError("non-finite loss")
        ad.backward(ad.scale(total, 1.0 / n))
        if state_hook is not None:
            state_hook(scene, state)
        row = np.asarray(bd.as_row())
        rows_acc = row if rows_acc is None else rows_acc + row
    if teacher is not None:
        for name, p in teacher.store.params.items():
            if p.grad is not None:
                raise RuntimeError(f"teacher parameter {name!r} received gradients; "
                                   "the teacher must stay frozen")
    ad.adam_step(student.store, lr)
    mean = rows_acc / n
    return ls.LossBreakdown(**dict(zip(ls.LossBreakdown.field_names(), mean)))


def set_anchors_from_scenes(model: DetectorModel, scenes) -> None:
    """Class-mean box dims over the training labels, used by size decoding."""
    sums = np.zeros((model.n_classes, 3))
    counts = np.zeros(model.n_classes)
    for scene in scenes:
        for b, cid in zip(scene.boxes, scene.class_ids):
            sums[cid] += (b.w, b.l, b.h)
            counts[cid] += 1
    anchors = np.ones((model.n_classes, 3))
    present = counts > 0
    anchors[present] = sums[present] / counts[present, None]
    model.anchors = anchors


def train_model(model: DetectorModel, train_scenes, *, teacher=None,
                epochs: int | None = None, batch_size: int | None = None,
                lr: float | None = None, lambda_soft: float | None = None,
                lambda_hard: float | None = None, val_scenes=None,
                seed_label: str = "train", update_stats: bool = False,
                augment: bool = True, epoch_hook=None):
    """Generic training loop used for both teacher pre-training and
    distillation. Returns the per-epoch history.

    Teacher pre-training: teacher=None, lambda_soft=0, lambda_hard=1,
    update_stats=True. Distillation: teacher=frozen model.
    history rows: (epoch, LossBreakdown, {class: val AP@11} | None).
    """
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    batch_size = cfg.batch_size if batch_size is None else batch_size
    base_lr = cfg.lr if lr is None else lr
    rng = seeded_rng(derive_seed(cfg.seed, f"{seed_label}:{model.role}"))
    steps_per_epoch = max(int(np.ceil(len(train_scenes) / batch_size)), 1)
    total_steps = steps_per_epoch * epochs
    history = []
    step = 0
    last_good = model.store.values()
    stats_hook = _make_stats_hook(model) if update_stats else None
    # identical scenes replay across epochs when augmentation is off, so the
    # frozen teacher's per-scene state can be memoized
    teacher_cache: dict | None = {} if (teacher is not None and not augment) else None
    for epoch in range(epochs):
        order = rng.permutation(len(train_scenes))
        rows_acc = None
        n_steps = 0
        for b0 in range(0, len(order), batch_size):
            batch_idx = order[b0:b0 + batch_size]
            batch = []
            for si in batch_idx:
                scene = train_scenes[si]
                if augment:
                    scene = dat.augment(scene, rng)
                    scene = dat.object_noise(scene, rng)
                batch.append(scene)
            lr_now = ad.lr_at(step, total_steps, base_lr)
            try:
                bd = distill_step(teacher, model, batch, lr_now,
                                  lambda_soft=lambda_soft, lambda_hard=lambda_hard,
                                  state_hook=stats_hook, teacher_cache=teacher_cache)
                model.store.check_finite()
            except NumericError:
                model.store.load_values(last_good)
                raise
            step += 1
            n_steps += 1
            row = np.asarray(bd.as_row())
            rows_acc = row if rows_acc is None else rows_acc + row
        mean_bd = ls.LossBreakdown(
            **dict(zip(ls.LossBreakdown.field_names(), rows_acc / n_steps)))
        val_aps = None
        if val_scenes is not None:
            val_aps = evaluate_model(model, val_scenes, cfg.eval_iou, 11)
        history.append((epoch, mean_bd, val_aps))
        if epoch_hook is not None:
            epoch_hook(epoch, mean_bd, val_aps)
        last_good = model.store.values()
    return history


def _make_stats_hook(model: DetectorModel):
    """Teacher-side EMA update fed by the training forward states."""

    def hook(scene, state):
        tg = scene_targets(state.pcoords, state.repo, scene, model.n_classes)
        fg = tg["fg_rows"]
        if fg.size == 0:
            return
        model.stats = update_class_stats(
            model.stats, state.obj_feats.value[fg], tg["labels"][fg],
            model.cfg.stats_momentum)

    return hook


def predict(model: DetectorModel, cloud: PointCloud,
            score_threshold: float | None = None,
            nms_iou: float | None = None) -> Detections:
    """Full forward pass, candidate thresholding, greedy per-class BEV NMS."""
    cfg = model.cfg
    thr = cfg.score_threshold if score_threshold is None else score_threshold
    nms = cfg.nms_iou if nms_iou is None else nms_iou
    with ad.no_grad():
        state = model.forward(cloud)
        logits = state.cls_logits.value
        z = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        fg = probs[:, :model.n_classes]
        cls_ids = fg.argmax(axis=1)
        scores = fg[np.arange(fg.shape[0]), cls_ids]
        keep = np.nonzero(scores >= thr)[0]
        if keep.size == 0:
            return Detections([], np.zeros(0, dtype=np.int64), np.zeros(0),
                              np.zeros((0, model.n_classes)), np.zeros(0, dtype=np.int64))
        _, parts = model.localize(state.votes, state.obj_feats, cls_ids)
        boxes = parts_to_boxes(_gather_parts(parts, keep))
    kept_rows = []
    for c in range(model.n_classes):
        rows = [i for i in range(keep.size) if cls_ids[keep[i]] == c]
        if not rows:
            continue
        sel = bx.nms_bev([boxes[i] for i in rows],
                         [scores[keep[i]] for i in rows], nms)
        kept_rows.extend(rows[i] for i in sel)
    kept_rows.sort(key=lambda i: -scores[keep[i]])
    return Detections(
        boxes=[boxes[i] for i in kept_rows],
        class_ids=cls_ids[keep[kept_rows]].copy(),
        scores=scores[keep[kept_rows]].copy(),
        class_scores=fg[keep[kept_rows]].copy(),
        provenance=state.partial_rows[keep[kept_rows]].copy(),
    )


def evaluate_model(model: DetectorModel, scenes, iou_threshold: float,
                   recall_positions: int) -> dict:
    """AP per class over a scene list."""
    preds, gts = [], []
    for sid, scene in enumerate(scenes):
        det = predict(model, scene.cloud)
        for b, cid, s in zip(det.boxes, det.class_ids, det.scores):
            preds.append((sid, int(cid), b, float(s)))
        for b, cid in zip(scene.boxes, scene.class_ids):
            gts.append((sid, int(cid), b))
    ap = bx.evaluate_ap(preds, gts, iou_threshold, recall_positions)
    for c in range(model.n_classes):
        ap.setdefault(c, 0.0)
    return ap


def inference_walltime(model: DetectorModel, cloud: PointCloud,
                       repeats: int = 3) -> float:
    """Median per-scene predict() wall time in seconds."""
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        predict(model, cloud)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


# ---------------------------------------------------------------------------
# gradient verification of the full hybrid objective

def tiny_pipeline_config(seed: int = 123) -> PipelineConfig:
    """Ultra-small widths for the finite-difference pipeline check."""
    return PipelineConfig(
        n_keypoints=32, repo_msg_radii=(0.5, 1.0, 2.0), repo_msg_ks=(4, 4, 4),
        repo_msg_channels=((4, 4), (4, 4), (4, 8)), repo_init_dim=8,
        voxel_size=(1.2, 1.2, 1.2), fg_head_hidden=4,
        n_partial=8, partial_radius=2.5, partial_k=6, partial_mlp=(8, 12),
        teacher_partial_radii=(1.0, 1.6, 2.5), teacher_partial_ks=(4, 4, 6),
        student_ed_channels=(6, 6, 10, 6, 6), teacher_ed_channels=(6, 8, 12, 8, 6),
        repo_feature_dim=10, obj_radii=(1.5, 2.5, 4.0), obj_k_student=3,
        obj_k_teacher=6, obj_mlp=(8, 12), stats_dim=12, cls_head_hidden=8,
        loc_head_hidden=8, aux_head_hidden=8, seed=seed,
    )


def pipeline_gradcheck(h: float = 1e-4, entries_per_param: int = 4):
    """Finite-difference check of the full hybrid loss through the whole
    student network at toy width.

    The selected-point rows are frozen at their unperturbed values so the
    check compares smooth branches (index selection is a discrete structure
    the analytic gradient also treats as constant). Returns
    (max relative error, worst parameter name).
    """
    cfg = tiny_pipeline_config()
    scene_cfg = dat.SceneGenConfig(
        extent=(12.0, 12.0, 4.0), objects_min=2, objects_max=3,
        surface_density=3.0, clutter_density=0.06, noise_points=4)
    scene = dat.generate_scene(scene_cfg, seed=5)
    teacher = DetectorModel("teacher", cfg, 2, ["car", "cyclist"])
    student = DetectorModel("student", cfg, 2, ["car", "cyclist"])
    stats_rng = seeded_rng(9)
    rows_init = stats_rng.normal(1.0, 0.3, size=(2, cfg.stats_dim))
    teacher.stats = ClassStats(rows_init)
    student.stats = ClassStats(rows_init.copy())
    set_anchors_from_scenes(teacher, [scene])
    set_anchors_from_scenes(student, [scene])
    # jitter to a generic point: zero-init biases would otherwise leave the
    # zero rows of the sparse tensor exactly on the relu kink, where central
    # differences and the subgradient legitimately disagree
    jitter = seeded_rng(9)
    for p in student.store.params.values():
        p.value = p.value + jitter.normal(0.0, 0.1, size=p.shape)

    with ad.no_grad():
        rows = student.forward(scene.cloud).partial_rows
        t_state = teacher.forward(scene.cloud, partial_rows=rows)

    def build_loss():
        state = student.forward(scene.cloud, partial_rows=rows)
        total, _ = compute_scene_loss(student, state, scene, teacher, t_state)
        return total

    return ad.check_gradients(build_loss, student.store, h=h,
                              max_entries_per_param=entries_per_param)


# ---------------------------------------------------------------------------
# checkpoints

def save_model(path, model: DetectorModel) -> None:
    arrays = {f"param:{k}": v for k, v in model.store.values().items()}
    arrays["buffer:stats"] = model.stats.rows
    arrays["buffer:anchors"] = model.anchors
    meta = {
        "config": pipeline_config_to_text(model.cfg),
        "role": model.role,
        "n_classes": str(model.n_classes),
        "class_names": json.dumps(model.class_names),
    }
    ad.save_checkpoint(path, arrays, meta)


def load_model(path) -> DetectorModel:
    arrays, meta = ad.load_checkpoint(path)
    cfg = pipeline_config_from_text(meta["config"])
    model = DetectorModel(meta["role"], cfg, int(meta["n_classes"]),
                          json.loads(meta["class_names"]))
    model.store.load_values(
        {k[len("param:"):]: v for k, v in arrays.items() if k.startswith("param:")})
    model.stats = ClassStats(arrays["buffer:stats"])
    model.anchors = arrays["buffer:anchors"]
    return model
