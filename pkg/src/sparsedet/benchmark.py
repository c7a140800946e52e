"""Range-scaling benchmark: sparse pipeline vs dense baseline.

Scenes with a fixed point budget are generated per perception range and
written to disk once; both pipelines consume the identical files.  For each
(range, pipeline) cell the harness records median inference latency over
repeated runs, allocator-reported peak bytes (tracemalloc) from a separate
untimed pass, peak resident set size, and the touched entity counts.  Cost
exponents come from least-squares slopes in log-log space.

The sparse model runs untrained with the participation threshold at zero so
every point flows through grouping and both recognition stacks; this is the
worst case for the sparse path and keeps the comparison honest.
"""

from __future__ import annotations

import csv
import io
import json
import os
import resource
import time
import tracemalloc
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import dense_baseline as dense
from . import detector
from . import synth
from .config import RunConfig, config_hash
from .encoder import voxelize
from .nn import ParamStore, TapeParams


@dataclass
class BenchReport:
    rows: list            # dicts: {range_m, pipeline, metric, value}
    exponents: dict       # {"sparse.latency": float, ...}
    notes: list
    provenance: dict

    def as_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "exponents": self.exponents,
            "rows": self.rows,
            "notes": self.notes,
        }


def _median_latency(fn, repeats: int, notes: list, label: str) -> float:
    fn()  # warmup
    res = time.get_clock_info("perf_counter").resolution
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    med = float(np.median(times))
    if med < 100 * res:
        notes.append(f"{label}: median near timer resolution, repeats doubled")
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        med = float(np.median(times))
    return med


def _traced_peak_bytes(fn) -> int:
    tracemalloc.start()
    try:
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return int(peak)


def _rss_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def fit_exponent(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.maximum(np.asarray(ys, dtype=np.float64), 1e-12)
    slope, _ = np.polyfit(np.log(xs), np.log(ys), 1)
    return float(slope)


def run_scaling_bench(cfg: RunConfig, scene_dir, out_dir=None) -> BenchReport:
    """Measure both pipelines across cfg.bench.ranges; write CSV/JSON mirrors."""
    bench = cfg.bench
    notes: list[str] = []
    rows: list[dict] = []

    os.makedirs(scene_dir, exist_ok=True)
    scene_paths = {}
    for r in bench.ranges:
        path = os.path.join(scene_dir, f"bench_range{int(r)}.fsds")
        spec = synth.SceneSpec(range_m=float(r), point_budget=bench.point_budget)
        synth.save_scene(synth.generate(spec, seed=cfg.seed), path)
        scene_paths[r] = path

    sparse_cfg = replace(cfg.model, fg_threshold=0.0)
    sparse_store = detector.init_model(sparse_cfg, cfg.seed, dtype=np.float32)
    spec = dense.DenseGridSpec(
        cell=bench.dense_cell, channels=bench.dense_channels,
        layers=bench.dense_layers, memory_cap_mb=bench.dense_memory_cap_mb,
    )
    dense_store = ParamStore(np.float32)
    dense.init_params(dense_store, np.random.default_rng(cfg.seed), spec)

    metrics: dict[str, dict[float, float]] = {}

    def record(r, pipeline, metric, value):
        rows.append({"range_m": float(r), "pipeline": pipeline, "metric": metric,
                     "value": float(value)})
        metrics.setdefault(f"{pipeline}.{metric}", {})[float(r)] = float(value)

    for r in bench.ranges:
        scene = synth.load_scene(scene_paths[r])
        record(r, "common", "points", scene.pc.n)
        grid = voxelize(scene.pc.coords, cfg.model.voxel_size)
        record(r, "sparse", "voxels", grid.num_voxels)
        record(r, "dense", "grid_cells", spec.grid_side(r) ** 2)

        def run_sparse(scene=scene):
            detector.detect(sparse_store, sparse_cfg, scene.pc)

        def run_dense(scene=scene, r=r):
            with ad.no_grad():
                out = dense.forward(dense_store, spec, scene.pc, float(r),
                                    tp=TapeParams(dense_store))
                dense.decode(out, spec)

        record(r, "sparse", "latency_ms",
               _median_latency(run_sparse, bench.repeats, notes, f"sparse@{r}") * 1e3)
        record(r, "dense", "latency_ms",
               _median_latency(run_dense, bench.repeats, notes, f"dense@{r}") * 1e3)
        record(r, "sparse", "traced_peak_mb", _traced_peak_bytes(run_sparse) / 2**20)
        record(r, "dense", "traced_peak_mb", _traced_peak_bytes(run_dense) / 2**20)
        record(r, "sparse", "rss_mb", _rss_mb())
        record(r, "dense", "rss_mb", _rss_mb())

    ranges = [float(r) for r in bench.ranges]
    exponents = {}
    for key in ("sparse.latency_ms", "sparse.traced_peak_mb",
                "dense.latency_ms", "dense.traced_peak_mb"):
        series = metrics.get(key, {})
        if len(series) >= 2:
            exponents[key] = fit_exponent(ranges, [series[r] for r in ranges])

    top = max(ranges)
    if metrics.get("dense.latency_ms") and metrics.get("sparse.latency_ms"):
        ratio = metrics["dense.latency_ms"][top] / max(metrics["sparse.latency_ms"][top], 1e-9)
        notes.append(f"dense/sparse latency ratio at {top:g} m: {ratio:.2f}x (context only)")

    report = BenchReport(
        rows=rows, exponents=exponents, notes=notes,
        provenance={"config_hash": config_hash(cfg), "seed": cfg.seed,
                    "version": _package_version(), "threads": _thread_cap()},
    )
    if out_dir is not None:
        write_reports(report, out_dir)
    return report


def _package_version() -> str:
    from . import __version__

    return __version__


def _thread_cap() -> int:
    from . import thread_cap

    return thread_cap()


def report_csv(report: BenchReport) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["range_m", "pipeline", "metric", "value"])
    writer.writeheader()
    for row in report.rows:
        writer.writerow(row)
    return buf.getvalue()


def write_reports(report: BenchReport, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "bench.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(report_csv(report))
    with open(os.path.join(out_dir, "bench.json"), "w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
