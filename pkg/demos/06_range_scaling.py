"""Mini range-scaling benchmark: why fully sparse matters.

Fixed point budget, growing perception range.  The dense baseline's grid
grows quadratically; the sparse pipeline's cost follows the (constant)
number of points.  The full benchmark (more ranges, more repeats, CSV/JSON
reports) runs via `sparsedet bench`.
"""

import tempfile

from sparsedet.benchmark import run_scaling_bench
from sparsedet.config import RunConfig

cfg = RunConfig()
cfg.bench.ranges = (25.0, 50.0, 100.0)
cfg.bench.repeats = 3

with tempfile.TemporaryDirectory() as scene_dir:
    report = run_scaling_bench(cfg, scene_dir=scene_dir)

print(f"{'range':>6} {'pipeline':>8} {'latency ms':>11} {'peak MB':>9}")
table = {}
for row in report.rows:
    table.setdefault((row["range_m"], row["pipeline"]), {})[row["metric"]] = row["value"]
for (r, pipe), vals in sorted(table.items()):
    if "latency_ms" in vals:
        print(f"{r:6.0f} {pipe:>8} {vals['latency_ms']:11.1f} {vals['traced_peak_mb']:9.1f}")

print("\nfitted log-log cost exponents vs range:")
for key, value in sorted(report.exponents.items()):
    print(f"  {key:24s} {value:+.3f}")
for note in report.notes:
    print("note:", note)
