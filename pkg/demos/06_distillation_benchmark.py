"""The full distillation-direction benchmark.

Generates a 300/100-scene two-class dataset, pre-trains one teacher, trains
three seed pairs of students (with and without the soft targets), and
compares mean AP@11. Expect roughly ten minutes on four cores; worker count
follows the PCD_THREADS environment variable.
"""

import sys
import tempfile

from pcdistill import benchmark as bm

out_dir = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="pcd_bench_")
print(f"writing artifacts to {out_dir}\n")
result = bm.run_distill_benchmark(out_dir, log=print)

print("\nper-run results:")
for run in result["runs"]:
    kind = "distilled" if run["kd"] else "no-KD    "
    aps = "  ".join(f"{result['class_names'][c]} {run['ap'][c]:.3f}"
                    for c in sorted(run["ap"]))
    print(f"  seed {run['seed']}  {kind}  {aps}  mean {run['mean_ap']:.3f}")
print(f"\ndistilled mean AP@11 : {result['kd_mean_ap']:.3f}")
print(f"no-KD mean AP@11     : {result['nokd_mean_ap']:.3f}")
print(f"gain                 : {(result['kd_mean_ap'] - result['nokd_mean_ap']) * 100:+.2f} points")
print(f"runtime              : {result['runtime_s']:.0f}s")
print(f"comparison CSV       : {out_dir}/benchmark.csv")
