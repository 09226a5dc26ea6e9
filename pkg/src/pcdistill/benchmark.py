"""Distillation-direction benchmark at desk scale.

Generates a synthetic two-class dataset, pre-trains one teacher, then trains
student pairs (with and without the soft targets) across several seeds and
compares mean AP@11. Worker processes handle independent student runs; the
PCD_THREADS environment variable caps the pool size.
"""

from __future__ import annotations

import csv
import multiprocessing as mp
import os
import time

import numpy as np

from . import data as dat
from . import detector as det
from .core import PipelineConfig, derive_seed


def benchmark_scene_config() -> dat.SceneGenConfig:
    """Small scenes: two classes, a few hundred points each. Surfaces are
    dense enough that box orientation is recoverable at the benchmark's
    voxel resolution."""
    return dat.SceneGenConfig(
        extent=(24.0, 24.0, 4.0),
        classes=dat.DEFAULT_CLASSES,
        objects_min=2, objects_max=3,
        surface_density=7.0,
        clutter_density=0.06,
        noise_points=8,
        dropout=0.1,
    )


def benchmark_pipeline_config(seed: int = 0, **overrides) -> PipelineConfig:
    """Scaled-down pipeline preset used by the benchmark and smoke tests."""
    kwargs = dict(
        n_keypoints=144,
        repo_msg_radii=(0.4, 0.8, 1.6),
        repo_msg_ks=(6, 6, 12),
        repo_msg_channels=((8, 8, 16), (8, 8, 16), (16, 16, 32)),
        repo_init_dim=32,
        voxel_size=(0.8, 0.8, 0.8),
        fg_head_hidden=16,
        n_partial=36,
        partial_radius=2.4,
        partial_k=12,
        partial_mlp=(64, 128),
        teacher_partial_radii=(0.6, 1.2, 2.4),
        teacher_partial_ks=(6, 6, 12),
        student_ed_channels=(16, 16, 32, 16, 16),
        teacher_ed_channels=(16, 32, 64, 32, 16),
        repo_feature_dim=32,
        obj_radii=(1.2, 2.4, 4.8),
        obj_k_student=8,
        obj_k_teacher=16,
        obj_mlp=(32, 64),
        stats_dim=64,
        stats_momentum=0.9,   # rows must differentiate within a short schedule
        cls_head_hidden=32,
        loc_head_hidden=32,
        aux_head_hidden=32,
        lr=0.005,
        batch_size=4,
        score_threshold=0.3,
        seed=seed,
    )
    kwargs.update(overrides)
    return PipelineConfig(**kwargs)


def _worker_limit() -> int:
    env = os.environ.get("PCD_THREADS")
    if env:
        return max(int(env), 1)
    return min(os.cpu_count() or 1, 4)


def make_dataset(out_dir, n_train: int, n_val: int, base_seed: int = 7000):
    cfg = benchmark_scene_config()
    train_dir = os.path.join(out_dir, "train")
    val_dir = os.path.join(out_dir, "val")
    dat.write_dataset(train_dir, cfg, range(base_seed, base_seed + n_train))
    dat.write_dataset(val_dir, cfg, range(base_seed + n_train,
                                          base_seed + n_train + n_val))
    return train_dir, val_dir


def train_teacher(train_scenes, class_names, cfg: PipelineConfig,
                  epochs: int) -> det.DetectorModel:
    teacher = det.DetectorModel("teacher", cfg, len(class_names), class_names)
    det.set_anchors_from_scenes(teacher, train_scenes)
    det.train_model(teacher, train_scenes, epochs=epochs,
                    lambda_soft=0.0, lambda_hard=1.0,
                    seed_label="teacher", update_stats=True)
    return teacher


def train_student(train_scenes, teacher: det.DetectorModel,
                  cfg: PipelineConfig, epochs: int,
                  kd: bool) -> det.DetectorModel:
    student = det.DetectorModel("student", cfg, teacher.n_classes,
                                teacher.class_names)
    student.stats = det.ClassStats(teacher.stats.rows.copy())
    student.anchors = teacher.anchors.copy()
    det.train_model(student, train_scenes,
                    teacher=teacher if kd else None, epochs=epochs,
                    lambda_soft=None if kd else 0.0,
                    lambda_hard=None if kd else 1.0,
                    seed_label="student", update_stats=False)
    return student


def _student_job(args):
    (train_dir, val_dir, teacher_path, seed, kd, epochs) = args
    t0 = time.process_time()
    train_scenes, class_names, _ = dat.load_dataset(train_dir)
    val_scenes, _, _ = dat.load_dataset(val_dir)
    teacher = det.load_model(teacher_path)
    cfg = benchmark_pipeline_config(seed=seed)
    student = train_student(train_scenes, teacher, cfg, epochs, kd)
    ap = det.evaluate_model(student, val_scenes, cfg.eval_iou, 11)
    mean_ap = float(np.mean([ap[c] for c in sorted(ap)]))
    return {"seed": seed, "kd": kd, "ap": {int(k): float(v) for k, v in ap.items()},
            "mean_ap": mean_ap, "cpu_s": time.process_time() - t0}


def _four_core_makespan(serial_s: float, job_cpu_s) -> float:
    """Wall-clock model on four cores: serial phases plus a longest-first
    greedy schedule of the independent student jobs over four workers."""
    lanes = [0.0, 0.0, 0.0, 0.0]
    for cost in sorted(job_cpu_s, reverse=True):
        lanes[int(np.argmin(lanes))] += cost
    return serial_s + max(lanes)


def run_distill_benchmark(out_dir, n_train: int = 300, n_val: int = 100,
                          seeds=(11, 12, 13), teacher_epochs: int = 8,
                          student_epochs: int = 4, workers: int | None = None,
                          log=None) -> dict:
    """Full benchmark: returns per-run results plus KD / no-KD mean AP@11.

    Results and the comparison CSV land in out_dir. Student jobs are
    independent and run on a worker pool sized by PCD_THREADS (capped at the
    machine's cores); `four_core_runtime_s` reports the wall-clock model for
    the reference four-core budget, which equals the measured wall time when
    four cores are actually available.
    """
    os.makedirs(out_dir, exist_ok=True)
    t_start = time.perf_counter()
    say = log if log is not None else (lambda *_: None)

    say("generating dataset ...")
    train_dir, val_dir = make_dataset(out_dir, n_train, n_val)
    train_scenes, class_names, _ = dat.load_dataset(train_dir)

    say("training teacher ...")
    cfg = benchmark_pipeline_config(seed=derive_seed(0, "bench-teacher") % (2 ** 31))
    teacher = train_teacher(train_scenes, class_names, cfg, teacher_epochs)
    teacher_path = os.path.join(out_dir, "teacher.pcd")
    det.save_model(teacher_path, teacher)
    val_scenes, _, _ = dat.load_dataset(val_dir)
    teacher_ap = det.evaluate_model(teacher, val_scenes, cfg.eval_iou, 11)
    serial_s = time.perf_counter() - t_start
    say(f"teacher val AP@11: { {class_names[c]: round(v, 3) for c, v in teacher_ap.items()} } "
        f"({serial_s:.0f}s serial)")

    jobs = [(train_dir, val_dir, teacher_path, seed, kd, student_epochs)
            for seed in seeds for kd in (True, False)]
    n_workers = min(workers if workers is not None else _worker_limit(), len(jobs))
    say(f"training {len(jobs)} students on {n_workers} workers ...")
    if n_workers > 1:
        ctx = mp.get_context("fork")
        with ctx.Pool(n_workers) as pool:
            results = pool.map(_student_job, jobs)
    else:
        results = [_student_job(j) for j in jobs]

    kd_aps = [r["mean_ap"] for r in results if r["kd"]]
    nokd_aps = [r["mean_ap"] for r in results if not r["kd"]]
    out = {
        "teacher_ap": {int(k): float(v) for k, v in teacher_ap.items()},
        "runs": results,
        "kd_mean_ap": float(np.mean(kd_aps)),
        "nokd_mean_ap": float(np.mean(nokd_aps)),
        "class_names": class_names,
        "runtime_s": time.perf_counter() - t_start,
        "four_core_runtime_s": _four_core_makespan(
            serial_s, [r["cpu_s"] for r in results]),
    }
    path = os.path.join(out_dir, "benchmark.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "kd"] + [f"ap_{n}" for n in class_names] + ["mean_ap"])
        for r in results:
            w.writerow([r["seed"], int(r["kd"])]
                       + [f"{r['ap'][c]:.6f}" for c in range(len(class_names))]
                       + [f"{r['mean_ap']:.6f}"])
        w.writerow(["mean", 1] + [""] * len(class_names) + [f"{out['kd_mean_ap']:.6f}"])
        w.writerow(["mean", 0] + [""] * len(class_names) + [f"{out['nokd_mean_ap']:.6f}"])
    say(f"KD mean AP@11 {out['kd_mean_ap']:.3f} vs no-KD {out['nokd_mean_ap']:.3f} "
        f"(wall {out['runtime_s']:.0f}s, four-core model "
        f"{out['four_core_runtime_s']:.0f}s)")
    return out
