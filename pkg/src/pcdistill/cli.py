"""Command-line entry points for the full experimental lifecycle.

Subcommands: gen-data, train-teacher, distill, eval, bench, gradcheck.
Every run writes a manifest before any work starts; metrics land in fixed-
schema CSV files; outputs are written atomically (temp + rename).

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 numeric
failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import io
import json
import os
import subprocess
import sys

import numpy as np

from . import autodiff as ad
from . import benchmark as bench_mod
from . import data as dat
from . import detector as det
from . import losses as ls
from .core import (ConfigError, NumericError, PipelineConfig,
                   load_pipeline_config, pipeline_config_to_text)

USAGE_ERROR = 1
VALIDATION_ERROR = 2
NUMERIC_ERROR = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _write_json_atomic(path, payload) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _write_text_atomic(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_run_manifest(out_dir, command: str, argv, config_text: str,
                       seed: int, outputs) -> str:
    """Run record written before work starts; immutable afterward."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "run_manifest.json")
    _write_json_atomic(path, {
        "command": command,
        "argv": list(argv),
        "config": config_text,
        "seed": int(seed),
        "git_describe": _git_describe(),
        "start_time": _now(),
        "outputs": list(outputs),
    })
    return path


def _finish_run(out_dir) -> None:
    _write_json_atomic(os.path.join(out_dir, "done.json"), {"end_time": _now()})


def metrics_header(class_names) -> list:
    return (["epoch"] + ls.LossBreakdown.field_names()
            + [f"ap11_{n}" for n in class_names])


def _metrics_csv(history, class_names) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(metrics_header(class_names))
    for epoch, bd, val_aps in history:
        row = [epoch] + [f"{v:.9g}" for v in bd.as_row()]
        if val_aps is None:
            row += [""] * len(class_names)
        else:
            row += [f"{val_aps[c]:.6f}" for c in range(len(class_names))]
        w.writerow(row)
    return buf.getvalue()


def _parse_seeds(spec: str):
    if ":" in spec:
        a, b = spec.split(":", 1)
        return list(range(int(a), int(b)))
    return [int(s) for s in spec.split(",") if s.strip() != ""]


def _load_split(args):
    scenes, class_names, _ = dat.load_dataset(args.data)
    if getattr(args, "val_data", None):
        val_scenes, _, _ = dat.load_dataset(args.val_data)
    else:
        # hold out the last 10% for the per-epoch val AP columns
        n_val = max(len(scenes) // 10, 1)
        val_scenes = scenes[-n_val:]
        scenes = scenes[:-n_val]
    return scenes, val_scenes, class_names


def cmd_gen_data(args, argv) -> int:
    cfg = dat.load_scene_config(args.config)
    seeds = _parse_seeds(args.seeds)
    write_run_manifest(args.out, "gen-data", argv, dat.scene_config_to_text(cfg),
                       seeds[0] if seeds else 0,
                       [f"scene_{int(s):08d}.pcs" for s in seeds] + ["manifest.json"])
    dat.write_dataset(args.out, cfg, seeds)
    _finish_run(args.out)
    print(f"wrote {len(seeds)} scenes to {args.out}")
    return 0


def cmd_train_teacher(args, argv) -> int:
    cfg = load_pipeline_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    train_scenes, val_scenes, class_names = _load_split(args)
    write_run_manifest(args.out, "train-teacher", argv,
                       pipeline_config_to_text(cfg), cfg.seed,
                       ["teacher.pcd", "metrics.csv"])
    teacher = det.DetectorModel("teacher", cfg, len(class_names), class_names)
    det.set_anchors_from_scenes(teacher, train_scenes)
    ckpt = os.path.join(args.out, "teacher.pcd")
    try:
        history = det.train_model(
            teacher, train_scenes, epochs=args.epochs, lambda_soft=0.0,
            lambda_hard=1.0, val_scenes=val_scenes, seed_label="teacher",
            update_stats=True)
    except NumericError as e:
        det.save_model(ckpt, teacher)  # last-good values were restored
        print(f"numeric failure: {e}; last-good checkpoint kept", file=sys.stderr)
        return NUMERIC_ERROR
    det.save_model(ckpt, teacher)
    _write_text_atomic(os.path.join(args.out, "metrics.csv"),
                       _metrics_csv(history, class_names))
    _finish_run(args.out)
    last_aps = history[-1][2]
    print(f"teacher saved to {ckpt}; final val AP@11: "
          f"{ {class_names[c]: round(v, 3) for c, v in (last_aps or {}).items()} }")
    return 0


def cmd_distill(args, argv) -> int:
    cfg = load_pipeline_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    teacher = det.load_model(args.teacher)
    for key in ("voxel_size", "n_keypoints", "n_partial"):
        if getattr(teacher.cfg, key) != getattr(cfg, key):
            print(f"teacher/student config grid mismatch on {key!r}: "
                  f"{getattr(teacher.cfg, key)} vs {getattr(cfg, key)}",
                  file=sys.stderr)
            return VALIDATION_ERROR
    temperatures = [float(t) for t in str(args.T).split(",")] if args.T else [cfg.temperature]
    train_scenes, val_scenes, class_names = _load_split(args)
    write_run_manifest(args.out, "distill", argv, pipeline_config_to_text(cfg),
                       cfg.seed, [f"student_T{t:g}.pcd" for t in temperatures])
    sweep_rows = []
    for t in temperatures:
        run_cfg = dataclasses.replace(cfg, temperature=t)
        student = det.DetectorModel("student", run_cfg, teacher.n_classes,
                                    teacher.class_names)
        student.stats = det.ClassStats(teacher.stats.rows.copy())
        student.anchors = teacher.anchors.copy()
        ckpt = os.path.join(args.out, f"student_T{t:g}.pcd")
        kd = not args.no_kd
        try:
            history = det.train_model(
                student, train_scenes, teacher=teacher if kd else None,
                epochs=args.epochs, lambda_soft=None if kd else 0.0,
                lambda_hard=None if kd else 1.0, val_scenes=val_scenes,
                seed_label="student", update_stats=False)
        except NumericError as e:
            det.save_model(ckpt, student)
            print(f"numeric failure: {e}; last-good checkpoint kept", file=sys.stderr)
            return NUMERIC_ERROR
        det.save_model(ckpt, student)
        _write_text_atomic(os.path.join(args.out, f"metrics_T{t:g}.csv"),
                           _metrics_csv(history, class_names))
        aps = history[-1][2] or {}
        sweep_rows.append([t] + [aps.get(c, 0.0) for c in range(len(class_names))])
        print(f"T={t:g}: val AP@11 "
              f"{ {class_names[c]: round(aps.get(c, 0.0), 3) for c in range(len(class_names))} }")
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["T"] + [f"ap11_{n}" for n in class_names] + ["mean"])
    for row in sweep_rows:
        w.writerow([f"{row[0]:g}"] + [f"{v:.6f}" for v in row[1:]]
                   + [f"{float(np.mean(row[1:])):.6f}"])
    _write_text_atomic(os.path.join(args.out, "temperature_sweep.csv"), buf.getvalue())
    _finish_run(args.out)
    return 0


def cmd_eval(args, argv) -> int:
    model = det.load_model(args.model)
    scenes, class_names, _ = dat.load_dataset(args.data)
    aps = det.evaluate_model(model, scenes, args.iou, args.rp)
    rows = [(class_names[c] if c < len(class_names) else str(c), aps[c])
            for c in sorted(aps)]
    width = max(len(n) for n, _ in rows + [("class", 0)])
    print(f"{'class':<{width}}  AP@{args.rp}")
    for name, v in rows:
        print(f"{name:<{width}}  {v:.4f}")
    mean_ap = float(np.mean([v for _, v in rows]))
    print(f"{'mAP':<{width}}  {mean_ap:.4f}")
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["class", f"ap{args.rp}"])
    for name, v in rows:
        w.writerow([name, f"{v:.6f}"])
    w.writerow(["mAP", f"{mean_ap:.6f}"])
    _write_text_atomic(args.out, buf.getvalue())
    return 0


def bench_metrics(cfg: PipelineConfig | None = None) -> dict:
    """Teacher vs student complexity: exact parameter counts, per-scene wall
    time, partial-stage query counts, and a matmul MAC estimate."""
    cfg = cfg or PipelineConfig()
    scene = dat.generate_scene(bench_mod.benchmark_scene_config(), seed=424242)
    names = bench_mod.benchmark_scene_config().class_names
    out = {}
    for role in ("teacher", "student"):
        model = det.DetectorModel(role, cfg, len(names), names)
        det.set_anchors_from_scenes(model, [scene])
        with ad.no_grad():
            with ad.count_macs() as macs:
                state = model.forward(scene.cloud)
        wall = det.inference_walltime(model, scene.cloud, repeats=3)
        out[role] = {
            "params": model.count_params(),
            "infer_ms": wall * 1e3,
            "partial_queries": state.query_counts["partial"],
            "total_queries": sum(state.query_counts.values()),
            "mac_estimate": macs[0],
        }
    return out


def cmd_bench(args, argv) -> int:
    cfg = load_pipeline_config(args.config) if args.config else PipelineConfig()
    rows = bench_metrics(cfg)
    cols = ["params", "infer_ms", "partial_queries", "total_queries", "mac_estimate"]
    print(f"{'role':<9}" + "".join(f"{c:>17}" for c in cols))
    for role in ("teacher", "student"):
        r = rows[role]
        print(f"{role:<9}" + f"{r['params']:>17d}" + f"{r['infer_ms']:>17.1f}"
              + f"{r['partial_queries']:>17d}" + f"{r['total_queries']:>17d}"
              + f"{r['mac_estimate']:>17d}")
    t, s = rows["teacher"], rows["student"]
    print(f"student/teacher params ratio: {s['params'] / t['params']:.3f}")
    print(f"student/teacher partial-query ratio: "
          f"{s['partial_queries'] / t['partial_queries']:.3f}")
    return 0


def cmd_gradcheck(args, argv) -> int:
    tol = 1e-4
    prim = ad.gradcheck_primitives()
    worst_op = max(prim, key=lambda k: prim[k])
    ok = prim[worst_op] < tol
    print(f"primitives: worst op {worst_op!r} rel err {prim[worst_op]:.3e}")
    pipe_err, pipe_name = det.pipeline_gradcheck()
    print(f"pipeline: worst parameter {pipe_name!r} rel err {pipe_err:.3e}")
    if not ok or pipe_err >= tol:
        name = worst_op if not ok else pipe_name
        err = prim[worst_op] if not ok else pipe_err
        print(f"FAIL: {name} relative error {err:.3e} >= {tol}", file=sys.stderr)
        return VALIDATION_ERROR
    print("gradcheck passed")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="pcdistill", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--seeds", required=True,
                   help="comma list '1,2,3' or python-style range 'a:b'")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train-teacher", help="pre-train the multi-scale teacher")
    t.add_argument("--data", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--val-data")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)

    d = sub.add_parser("distill", help="train the single-neighborhood student")
    d.add_argument("--teacher", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--config", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--val-data")
    d.add_argument("--epochs", type=int)
    d.add_argument("--seed", type=int)
    d.add_argument("--no-kd", action="store_true",
                   help="drop the soft targets (lambda_soft = 0)")
    d.add_argument("--T", help="temperature, or comma list for a sweep")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--rp", type=int, choices=(11, 40), default=11)
    e.add_argument("--out", default="eval_ap.csv")

    b = sub.add_parser("bench", help="teacher vs student complexity table")
    b.add_argument("--config")

    sub.add_parser("gradcheck", help="finite-difference gradient suite")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    handlers = {
        "gen-data": cmd_gen_data,
        "train-teacher": cmd_train_teacher,
        "distill": cmd_distill,
        "eval": cmd_eval,
        "bench": cmd_bench,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.cmd](args, argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return VALIDATION_ERROR
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return VALIDATION_ERROR
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return NUMERIC_ERROR


def entry() -> None:
    sys.exit(main())
