"""Synthetic labeled scenes: generation, augmentation, file round-trip.

Scenes are built from a flat-text generator config: oriented boxes with
class-conditional size distributions are placed without BEV overlap, their
outward-visible faces are sampled at a surface density, and ground clutter
plus uniform volume noise fill out the background. Everything is a pure
function of (config, seed).
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import boxes as bx
from .core import (Box3D, ConfigError, LabeledScene, PointCloud,
                   parse_flat_config, seeded_rng)

_SCENE_MAGIC = b"PCS1"
IN_BOX_EPS = 1e-9
_SURFACE_INSET = 1e-7


class DataGenError(RuntimeError):
    """Scene constraints cannot be satisfied (e.g. boxes do not fit)."""


@dataclass(frozen=True)
class ClassSpec:
    """Uniform size ranges (meters) for one object class."""

    name: str
    w: tuple
    l: tuple
    h: tuple

    def __post_init__(self):
        for field in ("w", "l", "h"):
            lo, hi = getattr(self, field)
            if not (0 < lo <= hi):
                raise ConfigError(f"class {self.name}: bad {field} range {(lo, hi)}")


DEFAULT_CLASSES = (
    ClassSpec("car", (1.6, 2.0), (3.5, 4.5), (1.4, 1.7)),
    ClassSpec("cyclist", (0.5, 0.8), (1.6, 2.0), (1.6, 1.8)),
)


@dataclass(frozen=True)
class SceneGenConfig:
    extent: tuple = (40.0, 40.0, 4.0)
    classes: tuple = DEFAULT_CLASSES
    objects_min: int = 2
    objects_max: int = 6
    surface_density: float = 10.0      # points per m^2 of visible surface
    clutter_density: float = 0.4       # ground points per m^2
    noise_points: int = 16
    dropout: float = 0.1               # occlusion dropout fraction
    min_points_per_box: int = 8

    def __post_init__(self):
        if self.surface_density <= 0 or self.clutter_density < 0:
            raise ConfigError("densities must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.objects_min < 0 or self.objects_max < self.objects_min:
            raise ConfigError("bad objects_min/objects_max")
        if len(self.extent) != 3 or any(e <= 0 for e in self.extent):
            raise ConfigError("extent must be three positive values")
        if not self.classes:
            raise ConfigError("at least one class is required")

    @property
    def class_names(self):
        return [c.name for c in self.classes]


_SCENE_SCALARS = {
    "objects_min": int, "objects_max": int, "noise_points": int,
    "min_points_per_box": int, "surface_density": float,
    "clutter_density": float, "dropout": float,
}


def scene_config_to_text(cfg: SceneGenConfig) -> str:
    lines = [f"extent = {', '.join(repr(float(v)) for v in cfg.extent)}"]
    lines.append(f"classes = {', '.join(c.name for c in cfg.classes)}")
    for c in cfg.classes:
        for field in ("w", "l", "h"):
            lo, hi = getattr(c, field)
            lines.append(f"class.{c.name}.{field} = {lo!r}, {hi!r}")
    for key, kind in _SCENE_SCALARS.items():
        lines.append(f"{key} = {kind(getattr(cfg, key))!r}")
    return "\n".join(lines) + "\n"


def scene_config_from_text(text: str) -> SceneGenConfig:
    raw = parse_flat_config(text)
    kwargs = {}
    if "extent" in raw:
        kwargs["extent"] = tuple(float(x) for x in raw.pop("extent").split(","))
    if "classes" in raw:
        names = [n.strip() for n in raw.pop("classes").split(",") if n.strip()]
        specs = []
        for name in names:
            ranges = {}
            for field in ("w", "l", "h"):
                key = f"class.{name}.{field}"
                if key not in raw:
                    raise ConfigError(f"missing config key {key!r}")
                parts = [float(x) for x in raw.pop(key).split(",")]
                if len(parts) != 2:
                    raise ConfigError(f"config key {key!r} needs 'lo, hi'")
                ranges[field] = (parts[0], parts[1])
            specs.append(ClassSpec(name, ranges["w"], ranges["l"], ranges["h"]))
        kwargs["classes"] = tuple(specs)
    for key, val in list(raw.items()):
        if key in _SCENE_SCALARS:
            kind = _SCENE_SCALARS[key]
            try:
                kwargs[key] = kind(val)
            except ValueError as e:
                raise ConfigError(f"config key {key!r}: cannot parse {val!r}") from e
            raw.pop(key)
    if raw:
        key = sorted(raw)[0]
        raise ConfigError(f"unknown config key {key!r}")
    return SceneGenConfig(**kwargs)


def load_scene_config(path) -> SceneGenConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_config_from_text(fh.read())


def points_in_box(points_xyz: np.ndarray, box: Box3D,
                  eps: float = IN_BOX_EPS) -> np.ndarray:
    """Boolean containment mask using the box frame, with a small tolerance
    so on-surface points survive rigid-transform round-off."""
    p = np.asarray(points_xyz, dtype=np.float64)
    rel = p - box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = c * rel[:, 0] + s * rel[:, 1]
    ly = -s * rel[:, 0] + c * rel[:, 1]
    return ((np.abs(lx) <= 0.5 * box.l + eps)
            & (np.abs(ly) <= 0.5 * box.w + eps)
            & (np.abs(rel[:, 2]) <= 0.5 * box.h + eps))


def point_labels(points_xyz: np.ndarray, scene: LabeledScene,
                 n_classes: int) -> np.ndarray:
    """Hard per-point class ids; background = n_classes. First containing
    box wins (generation guarantees no overlap)."""
    labels = np.full(points_xyz.shape[0], n_classes, dtype=np.int64)
    for b, cid in zip(scene.boxes, scene.class_ids):
        mask = points_in_box(points_xyz, b)
        labels[mask & (labels == n_classes)] = cid
    return labels


def _sample_face_points(rng, box: Box3D, density: float) -> np.ndarray:
    """Sample the five outward-visible faces (bottom skipped), slightly inset
    so the points are robustly inside the box."""
    w, l, h = box.w, box.l, box.h
    # (axis held fixed, fixed val, u-extent, v-extent) in the local frame
    faces = [
        ("z", +0.5 * h, l, w),    # top
        ("x", +0.5 * l, w, h),
        ("x", -0.5 * l, w, h),
        ("y", +0.5 * w, l, h),
        ("y", -0.5 * w, l, h),
    ]
    pts = []
    for axis, val, du, dv in faces:
        n = max(int(round(density * du * dv)), 1)
        u = rng.uniform(-0.5 * du, 0.5 * du, n)
        v = rng.uniform(-0.5 * dv, 0.5 * dv, n)
        if axis == "z":
            local = np.stack([u, v, np.full(n, val)], axis=1)
        elif axis == "x":
            local = np.stack([np.full(n, val), u, v], axis=1)
        else:
            local = np.stack([u, np.full(n, val), v], axis=1)
        pts.append(local)
    local = np.concatenate(pts, axis=0) * (1.0 - _SURFACE_INSET)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.cx
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.cy
    world[:, 2] = local[:, 2] + box.cz
    return world


def generate_scene(cfg: SceneGenConfig, seed: int) -> LabeledScene:
    """Sample boxes (no BEV overlap, fully inside the extent), surface points,
    ground clutter, and uniform noise. Reflectance is uniform in [0, 1]."""
    rng = seeded_rng(seed)
    ex, ey, ez = cfg.extent
    ground = -0.5 * ez
    n_obj = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    boxes, class_ids = [], []
    for _ in range(n_obj):
        placed = False
        for _ in range(100):
            cid = int(rng.integers(0, len(cfg.classes)))
            spec = cfg.classes[cid]
            w = rng.uniform(*spec.w)
            l = rng.uniform(*spec.l)
            h = rng.uniform(*spec.h)
            yaw = rng.uniform(-math.pi, math.pi)
            margin = 0.5 * math.hypot(w, l)
            cx = rng.uniform(-0.5 * ex + margin, 0.5 * ex - margin)
            cy = rng.uniform(-0.5 * ey + margin, 0.5 * ey - margin)
            box = Box3D(cx, cy, ground + 0.5 * h, w, l, h, yaw)
            if all(bx.bev_iou(box, other) == 0.0 for other in boxes):
                boxes.append(box)
                class_ids.append(cid)
                placed = True
                break
        if not placed:
            raise DataGenError(
                f"could not place box {len(boxes) + 1}/{n_obj} after 100 retries")

    chunks = []
    for box in boxes:
        surf = _sample_face_points(rng, box, cfg.surface_density)
        keep = rng.random(surf.shape[0]) >= cfg.dropout
        if keep.sum() < cfg.min_points_per_box:
            need = cfg.min_points_per_box - int(keep.sum())
            dropped = np.nonzero(~keep)[0]
            keep[dropped[:need]] = True
        chunks.append(surf[keep])

    n_clutter = int(round(cfg.clutter_density * ex * ey))
    if n_clutter > 0:
        cl = np.empty((n_clutter, 3))
        cl[:, 0] = rng.uniform(-0.5 * ex, 0.5 * ex, n_clutter)
        cl[:, 1] = rng.uniform(-0.5 * ey, 0.5 * ey, n_clutter)
        cl[:, 2] = ground + rng.uniform(0.0, 0.03, n_clutter)
        for box in boxes:
            cl = cl[~points_in_box(cl, box)]
        chunks.append(cl)
    if cfg.noise_points > 0:
        nz = np.empty((cfg.noise_points, 3))
        nz[:, 0] = rng.uniform(-0.5 * ex, 0.5 * ex, cfg.noise_points)
        nz[:, 1] = rng.uniform(-0.5 * ey, 0.5 * ey, cfg.noise_points)
        nz[:, 2] = rng.uniform(-0.5 * ez, 0.5 * ez, cfg.noise_points)
        for box in boxes:
            nz = nz[~points_in_box(nz, box)]
        chunks.append(nz)

    xyz = np.concatenate([c for c in chunks if c.shape[0] > 0], axis=0)
    refl = rng.uniform(0.0, 1.0, xyz.shape[0])
    cloud = PointCloud(np.column_stack([xyz, refl]))
    scene = LabeledScene(cloud=cloud, boxes=tuple(boxes), class_ids=tuple(class_ids))
    for box in boxes:
        if points_in_box(cloud.xyz, box).sum() < cfg.min_points_per_box:
            raise DataGenError("a box ended up with too few points")
    return scene


def augment(scene: LabeledScene, rng, flip: bool | None = None,
            rotation: float | None = None, scale: float | None = None) -> LabeledScene:
    """Global augmentation: mirror across the x axis with probability 0.5,
    yaw rotation uniform in [-pi/4, pi/4], scale uniform in [0.9, 1.1].

    Explicit arguments override the random draws. Labels are transformed
    consistently, so point-in-box membership is preserved.
    """
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if rotation is None:
        rotation = float(rng.uniform(-math.pi / 4, math.pi / 4))
    if scale is None:
        scale = float(rng.uniform(0.9, 1.1))

    pts = scene.cloud.xyzr.copy()
    boxes = [np.array([b.cx, b.cy, b.cz, b.w, b.l, b.h, b.yaw]) for b in scene.boxes]
    if flip:
        pts[:, 1] = -pts[:, 1]
        for b in boxes:
            b[1] = -b[1]
            b[6] = -b[6]
    c, s = math.cos(rotation), math.sin(rotation)
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = c * x - s * y
    pts[:, 1] = s * x + c * y
    for b in boxes:
        bxy = np.array([c * b[0] - s * b[1], s * b[0] + c * b[1]])
        b[0], b[1] = bxy
        b[6] += rotation
    pts[:, :3] *= scale
    for b in boxes:
        b[:6] *= scale

    new_boxes = tuple(Box3D.from_array(b) for b in boxes)
    return LabeledScene(cloud=PointCloud(pts), boxes=new_boxes,
                        class_ids=scene.class_ids)


def object_noise(scene: LabeledScene, rng, sigma_t: float = 0.1,
                 sigma_yaw: float = 0.05) -> LabeledScene:
    """Per-box jitter: rigid xy translation ~ N(0, sigma_t) and yaw
    ~ N(0, sigma_yaw) applied to each box together with its member points."""
    pts = scene.cloud.xyzr.copy()
    boxes = []
    for b in scene.boxes:
        mask = points_in_box(pts[:, :3], b)
        dx, dy = rng.normal(0.0, sigma_t, 2)
        dyaw = float(rng.normal(0.0, sigma_yaw))
        c, s = math.cos(dyaw), math.sin(dyaw)
        rel = pts[mask, :2] - np.array([b.cx, b.cy])
        pts[mask, 0] = c * rel[:, 0] - s * rel[:, 1] + b.cx + dx
        pts[mask, 1] = s * rel[:, 0] + c * rel[:, 1] + b.cy + dy
        boxes.append(Box3D(b.cx + dx, b.cy + dy, b.cz, b.w, b.l, b.h, b.yaw + dyaw))
    return LabeledScene(cloud=PointCloud(pts), boxes=tuple(boxes),
                        class_ids=scene.class_ids)


def save_scene(path, scene: LabeledScene) -> None:
    """Binary scene file: magic PCS1, counts, points 4xf64, boxes 7xf64 + u32."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_SCENE_MAGIC)
        fh.write(struct.pack("<II", scene.cloud.n, scene.n_boxes))
        fh.write(scene.cloud.xyzr.astype("<f8").tobytes())
        for b, cid in zip(scene.boxes, scene.class_ids):
            fh.write(b.as_array().astype("<f8").tobytes())
            fh.write(struct.pack("<I", cid))
    os.replace(tmp, path)


def load_scene(path) -> LabeledScene:
    with open(path, "rb") as fh:
        blob = fh.read()

    def need(n, off, what):
        if len(blob) < off + n:
            raise ValueError(
                f"{path}: truncated {what} at byte offset {off} "
                f"(need {n} more bytes, have {len(blob) - off})")

    need(4, 0, "magic")
    if blob[:4] != _SCENE_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r} at byte offset 0")
    need(8, 4, "header")
    n_pts, n_boxes = struct.unpack_from("<II", blob, 4)
    off = 12
    need(32 * n_pts, off, "points")
    pts = np.frombuffer(blob, dtype="<f8", count=4 * n_pts, offset=off)
    pts = pts.reshape(n_pts, 4).copy()
    off += 32 * n_pts
    boxes, cids = [], []
    for _ in range(n_boxes):
        need(60, off, "box record")
        vals = np.frombuffer(blob, dtype="<f8", count=7, offset=off)
        off += 56
        (cid,) = struct.unpack_from("<I", blob, off)
        off += 4
        boxes.append(Box3D.from_array(vals))
        cids.append(int(cid))
    return LabeledScene(cloud=PointCloud(pts), boxes=tuple(boxes),
                        class_ids=tuple(cids))


def write_dataset(out_dir, cfg: SceneGenConfig, seeds) -> dict:
    """Generate and save one scene per seed; returns the manifest dict."""
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for seed in seeds:
        name = f"scene_{int(seed):08d}.pcs"
        save_scene(os.path.join(out_dir, name), generate_scene(cfg, int(seed)))
        files.append(name)
    manifest = {
        "format": "PCS1",
        "config": scene_config_to_text(cfg),
        "seeds": [int(s) for s in seeds],
        "files": files,
        "class_names": cfg.class_names,
    }
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))
    return manifest


def load_dataset(data_dir):
    """Load every scene listed by a dataset manifest.

    Returns (scenes, class_names, manifest).
    """
    with open(os.path.join(data_dir, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    scenes = [load_scene(os.path.join(data_dir, f)) for f in manifest["files"]]
    return scenes, list(manifest["class_names"]), manifest
