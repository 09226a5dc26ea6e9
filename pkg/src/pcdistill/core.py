"""Domain types, pipeline configuration, deterministic RNG and yaw helpers.

Everything downstream (sampling, repository, losses, detector) builds on the
value types defined here. All types are immutable; arrays handed to them are
frozen read-only so instances can be shared freely between threads.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


class ConfigError(ValueError):
    """Raised for malformed or unknown configuration content."""


class NumericError(RuntimeError):
    """Raised when training hits a non-finite loss."""


def normalize_yaw(theta: float) -> float:
    """Map an angle to the canonical interval (-pi, pi].

    Raises ValueError for non-finite input. Idempotent: applying it twice
    gives the same result as applying it once.
    """
    t = float(theta)
    if not math.isfinite(t):
        raise ValueError(f"normalize_yaw: non-finite angle {theta!r}")
    r = math.fmod(t + math.pi, TWO_PI)
    if r <= 0.0:
        r += TWO_PI
    return r - math.pi


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic random stream; identical seed gives identical draws
    across runs and platforms (PCG64 is platform-stable)."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(seed: int, label: str) -> int:
    """Stable child seed for parallel workers: hash of (seed, label)."""
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Point:
    """A single lidar return: position in meters plus reflectance in [0, 1]."""

    x: float
    y: float
    z: float
    r: float

    def __post_init__(self):
        for name in ("x", "y", "z", "r"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"Point.{name} must be finite")
        if not 0.0 <= self.r <= 1.0:
            raise ValueError(f"Point.r must be in [0, 1], got {self.r}")


class PointCloud:
    """An ordered set of points stored as a read-only (N, 4) float64 array.

    Column order is x, y, z, reflectance. Iteration order is the storage
    order and is stable.
    """

    __slots__ = ("xyzr",)

    def __init__(self, xyzr: np.ndarray, validate: bool = True):
        arr = np.ascontiguousarray(xyzr, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise ValueError(f"PointCloud expects (N, 4) array, got {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("PointCloud needs at least one point")
        if validate:
            if not np.isfinite(arr).all():
                raise ValueError("PointCloud contains non-finite values")
            r = arr[:, 3]
            if (r < 0.0).any() or (r > 1.0).any():
                raise ValueError("PointCloud reflectance outside [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "xyzr", arr)

    @classmethod
    def from_points(cls, points: Sequence[Point]) -> "PointCloud":
        return cls(np.array([[p.x, p.y, p.z, p.r] for p in points]))

    @property
    def n(self) -> int:
        return self.xyzr.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.xyzr[:, :3]

    @property
    def reflectance(self) -> np.ndarray:
        return self.xyzr[:, 3]

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Point:
        x, y, z, r = self.xyzr[i]
        return Point(x, y, z, r)

    def __iter__(self):
        for i in range(self.n):
            yield self[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, PointCloud) and np.array_equal(self.xyzr, other.xyzr)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D bounding box: center (m), dims (m, > 0), yaw in (-pi, pi].

    `l` extends along the box-local x axis, `w` along local y, `h` along z.
    """

    cx: float
    cy: float
    cz: float
    w: float
    l: float
    h: float
    yaw: float

    def __post_init__(self):
        for name in ("cx", "cy", "cz", "w", "l", "h", "yaw"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"Box3D.{name} must be finite")
        if self.w <= 0 or self.l <= 0 or self.h <= 0:
            raise ValueError(f"Box3D dims must be > 0, got {(self.w, self.l, self.h)}")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.w, self.l, self.h])

    @property
    def volume(self) -> float:
        return self.w * self.l * self.h

    @property
    def diagonal(self) -> float:
        return math.sqrt(self.w * self.w + self.l * self.l + self.h * self.h)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.w, self.l, self.h, self.yaw])

    @classmethod
    def from_array(cls, a) -> "Box3D":
        cx, cy, cz, w, l, h, yaw = (float(v) for v in a)
        return cls(cx, cy, cz, w, l, h, yaw)


@dataclass(frozen=True)
class LabeledScene:
    """A point cloud plus its ground-truth boxes and per-box class ids."""

    cloud: PointCloud
    boxes: tuple
    class_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        if len(self.boxes) != len(self.class_ids):
            raise ValueError(
                f"boxes ({len(self.boxes)}) and class_ids ({len(self.class_ids)}) differ in length"
            )
        if any(c < 0 for c in self.class_ids):
            raise ValueError("class ids must be >= 0")

    @property
    def n_boxes(self) -> int:
        return len(self.boxes)

    def check_classes(self, n_classes: int) -> None:
        if any(c >= n_classes for c in self.class_ids):
            raise ValueError(f"class id out of range for n_classes={n_classes}")


# Field kinds used for flat-text config serialization.
_INT = "int"
_FLOAT = "float"
_BOOL = "bool"
_INTS = "int_tuple"
_FLOATS = "float_tuple"
_INTS2 = "int_tuple_tuple"


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the detection/distillation pipeline.

    Defaults reproduce the published operating point; desk-scale presets
    override them through the flat-text config format.
    """

    # repository initialization
    n_keypoints: int = 4096
    repo_msg_radii: tuple = (0.2, 0.4, 0.8)
    repo_msg_ks: tuple = (16, 16, 32)
    repo_msg_channels: tuple = ((16, 16, 32), (16, 16, 32), (32, 32, 64))
    repo_init_dim: int = 64
    voxel_size: tuple = (0.4, 0.4, 0.4)
    fg_head_hidden: int = 64
    # partial-knowledge stage
    n_partial: int = 512
    partial_radius: float = 1.6
    partial_k: int = 32
    partial_mlp: tuple = (128, 256, 512)
    teacher_partial_radii: tuple = (0.4, 0.8, 1.6)
    teacher_partial_ks: tuple = (16, 16, 32)
    sfps_gamma: float = 1.0
    # scene encoder-decoder and fusion
    student_ed_channels: tuple = (64, 64, 128, 64, 64)
    teacher_ed_channels: tuple = (64, 128, 256, 128, 64)
    repo_feature_dim: int = 128
    # object-level aggregation and heads
    obj_radii: tuple = (0.8, 1.6, 3.2)
    obj_k_student: int = 16
    obj_k_teacher: int = 32
    obj_mlp: tuple = (128, 256)
    stats_dim: int = 256
    stats_momentum: float = 0.99
    cls_head_hidden: int = 128
    loc_head_hidden: int = 128
    aux_head_hidden: int = 128
    # losses
    temperature: float = 3.0
    lambda_soft: float = 0.7
    lambda_hard: float = 0.3
    alpha_t: float = 0.25
    gamma: int = 2
    lambda_ind: float = 1.0
    lambda_corner: float = 1.0
    soft_loc_cwiou: bool = True
    hard_loc_cwiou: bool = False
    # optimization
    lr: float = 0.01
    epochs: int = 100
    batch_size: int = 16
    # inference
    score_threshold: float = 0.3
    nms_iou: float = 0.1
    eval_iou: float = 0.5
    # reproducibility
    seed: int = 0

    def __post_init__(self):
        def chk(cond, msg):
            if not cond:
                raise ConfigError(msg)

        counts = (
            self.n_keypoints, self.repo_init_dim, self.n_partial, self.partial_k,
            self.repo_feature_dim, self.obj_k_student, self.obj_k_teacher,
            self.stats_dim, self.batch_size, self.epochs,
        )
        chk(all(c >= 1 for c in counts), "all counts must be >= 1")
        for name in ("repo_msg_radii", "teacher_partial_radii", "obj_radii"):
            rr = getattr(self, name)
            chk(all(b > a for a, b in zip(rr, rr[1:])), f"{name} must be strictly increasing")
            chk(all(r > 0 for r in rr), f"{name} must be positive")
        chk(len(self.repo_msg_radii) == len(self.repo_msg_ks) == len(self.repo_msg_channels),
            "repo MSG radii/ks/channels must align")
        chk(len(self.teacher_partial_radii) == len(self.teacher_partial_ks),
            "teacher partial radii/ks must align")
        chk(all(v > 0 for v in self.voxel_size) and len(self.voxel_size) == 3,
            "voxel_size must be three positive values")
        chk(self.partial_radius > 0, "partial_radius must be > 0")
        chk(self.temperature > 0, "temperature must be > 0")
        chk(self.lambda_soft >= 0 and self.lambda_hard >= 0, "loss weights must be >= 0")
        chk(0.0 < self.alpha_t < 1.0, "alpha_t must be in (0, 1)")
        chk(self.gamma > 0 and self.gamma % 2 == 0, "gamma must be a positive even integer")
        chk(0.0 <= self.stats_momentum <= 1.0, "stats_momentum must be in [0, 1]")
        chk(len(self.student_ed_channels) == 5 and len(self.teacher_ed_channels) == 5,
            "encoder-decoder channel lists must have 5 entries")
        for name in ("student_ed_channels", "teacher_ed_channels"):
            ch = getattr(self, name)
            chk(ch[0] == ch[4] and ch[1] == ch[3],
                f"{name}: additive skips need matching widths (c0==c4, c1==c3)")


_PIPELINE_KINDS = {
    "n_keypoints": _INT, "repo_msg_radii": _FLOATS, "repo_msg_ks": _INTS,
    "repo_msg_channels": _INTS2, "repo_init_dim": _INT, "voxel_size": _FLOATS,
    "fg_head_hidden": _INT, "n_partial": _INT, "partial_radius": _FLOAT,
    "partial_k": _INT, "partial_mlp": _INTS, "teacher_partial_radii": _FLOATS,
    "teacher_partial_ks": _INTS, "sfps_gamma": _FLOAT,
    "student_ed_channels": _INTS, "teacher_ed_channels": _INTS,
    "repo_feature_dim": _INT, "obj_radii": _FLOATS, "obj_k_student": _INT,
    "obj_k_teacher": _INT, "obj_mlp": _INTS, "stats_dim": _INT,
    "stats_momentum": _FLOAT, "cls_head_hidden": _INT, "loc_head_hidden": _INT,
    "aux_head_hidden": _INT, "temperature": _FLOAT, "lambda_soft": _FLOAT,
    "lambda_hard": _FLOAT, "alpha_t": _FLOAT, "gamma": _INT,
    "lambda_ind": _FLOAT, "lambda_corner": _FLOAT, "soft_loc_cwiou": _BOOL,
    "hard_loc_cwiou": _BOOL, "lr": _FLOAT, "epochs": _INT, "batch_size": _INT,
    "score_threshold": _FLOAT, "nms_iou": _FLOAT, "eval_iou": _FLOAT, "seed": _INT,
}


def _format_value(kind: str, v) -> str:
    if kind == _INT:
        return str(int(v))
    if kind == _FLOAT:
        return repr(float(v))
    if kind == _BOOL:
        return "true" if v else "false"
    if kind == _INTS:
        return ", ".join(str(int(x)) for x in v)
    if kind == _FLOATS:
        return ", ".join(repr(float(x)) for x in v)
    if kind == _INTS2:
        return "; ".join(", ".join(str(int(x)) for x in grp) for grp in v)
    raise AssertionError(kind)


def _parse_value(kind: str, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind == _INT:
            return int(raw)
        if kind == _FLOAT:
            return float(raw)
        if kind == _BOOL:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == _INTS:
            return tuple(int(x) for x in raw.split(",") if x.strip() != "")
        if kind == _FLOATS:
            return tuple(float(x) for x in raw.split(",") if x.strip() != "")
        if kind == _INTS2:
            return tuple(
                tuple(int(x) for x in grp.split(",") if x.strip() != "")
                for grp in raw.split(";") if grp.strip() != ""
            )
    except ValueError as e:
        raise ConfigError(f"config key {key!r}: cannot parse value {raw!r}") from e
    raise AssertionError(kind)


def parse_flat_config(text: str) -> dict:
    """Parse the flat `key = value` format into a raw string dict.

    Blank lines and `#` comments are allowed. Duplicate keys are an error.
    """
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = raw.strip()
    return out


def pipeline_config_to_text(cfg: PipelineConfig) -> str:
    lines = []
    for f in fields(PipelineConfig):
        kind = _PIPELINE_KINDS[f.name]
        lines.append(f"{f.name} = {_format_value(kind, getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def pipeline_config_from_text(text: str) -> PipelineConfig:
    raw = parse_flat_config(text)
    kwargs = {}
    for key, val in raw.items():
        if key not in _PIPELINE_KINDS:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = _parse_value(_PIPELINE_KINDS[key], val, key)
    return PipelineConfig(**kwargs)


def load_pipeline_config(path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return pipeline_config_from_text(fh.read())


def save_pipeline_config(path, cfg: PipelineConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(pipeline_config_to_text(cfg))
