"""Sphere-vs-mesh runtime and memory comparison.

For each requested frame count the motion is uniformly subsampled and
one loss evaluation is timed: the sphere self-intersection loss over
the sub-motion, or the mesh baseline over the matching posed meshes.
The mesh path evaluates the batch the way a training loss would,
keeping every frame's collision intermediates alive until the batch
reduction, so its footprint grows with the frame count.

Timing reps run without the allocation tracer; peak transient memory
comes from one extra instrumented evaluation per configuration.
"""

from __future__ import annotations

import gc
import json
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .collision import mesh_si_value
from .errors import AssetMismatch, ConfigError
from .intersection import PairMask, si_loss
from .mesh import TriangleMesh
from .proxy import SphereSet
from .skinning import Motion, Skeleton, SphereBlendWeights

SPHERE = "sphere"
MESH = "mesh"

CSV_HEADER = "method,frames,rep,wall_s,peak_bytes,loss,threads,status"


@dataclass
class BenchConfig:
    frame_counts: tuple[int, ...] = (1, 2, 4, 8, 16)
    include_full_motion: bool = True
    repetitions: int = 5
    warmup: int = 1
    methods: tuple[str, ...] = (SPHERE, MESH)
    threads: int = 1
    mesh_time_budget: float = 120.0  # seconds per configuration

    def validate(self) -> None:
        if self.repetitions < 3:
            raise ConfigError("need at least 3 repetitions")
        if list(self.frame_counts) != sorted(self.frame_counts):
            raise ConfigError("frame counts must be ascending")
        if min(self.frame_counts) < 1:
            raise ConfigError("frame counts must be >= 1")
        bad = set(self.methods) - {SPHERE, MESH}
        if bad:
            raise ConfigError(f"unknown methods: {sorted(bad)}")


@dataclass
class BenchRecord:
    method: str
    frame_count: int
    wall_median: float
    wall_mean: float
    wall_min: float
    peak_memory: int
    loss: float
    threads: int = 1
    status: str = "OK"
    rep_times: list[float] = field(default_factory=list)


def uniform_frame_indices(n_total: int, count: int) -> np.ndarray:
    """Centered uniform subsampling: floor((i + 1/2) n / count)."""
    if count > n_total:
        raise ConfigError(f"cannot take {count} of {n_total} frames")
    return np.floor((np.arange(count) + 0.5) * n_total / count).astype(np.int64)


def _sphere_eval(spheres, bw, skeleton, motion, mask) -> float:
    return si_loss(spheres, bw, skeleton, motion, mask).value


def _mesh_batch_eval(frames: list[TriangleMesh]) -> float:
    retained = []  # all frames' pair data stays alive until the reduction
    for mesh in frames:
        value, pairs, terms = mesh_si_value(mesh)
        retained.append((value, pairs, terms))
    total = sum(v for v, _, _ in retained)
    return total / len(retained)


def _measure(fn, repetitions: int, warmup: int):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repetitions):
        gc.collect()
        t0 = time.perf_counter()
        loss = fn()
        times.append(time.perf_counter() - t0)
    # separate instrumented pass for the allocation high-water mark
    gc.collect()
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    before, _ = tracemalloc.get_traced_memory()
    fn()
    _, peak = tracemalloc.get_traced_memory()
    if not was_tracing:
        tracemalloc.stop()
    return times, max(peak - before, 1), loss


def run_benchmark(
    cfg: BenchConfig,
    spheres: SphereSet,
    bw: SphereBlendWeights,
    skeleton: Skeleton,
    motion: Motion,
    mask: PairMask,
    frame_meshes: list[TriangleMesh] | None = None,
) -> tuple[list[BenchRecord], list[dict]]:
    """Run every (method, frame count) configuration.

    Returns aggregated records plus per-repetition rows matching
    CSV_HEADER. The mesh method needs ``frame_meshes``, one posed mesh
    per motion frame; it is skipped with status INFEASIBLE when the
    projected cost exceeds the time budget.
    """
    cfg.validate()
    if MESH in cfg.methods:
        if frame_meshes is None:
            raise AssetMismatch("mesh method requested without posed meshes")
        if len(frame_meshes) != len(motion):
            raise AssetMismatch(
                f"{len(frame_meshes)} posed meshes for {len(motion)} frames"
            )

    counts = list(cfg.frame_counts)
    if cfg.include_full_motion and len(motion) not in counts:
        counts.append(len(motion))

    records: list[BenchRecord] = []
    rows: list[dict] = []
    mesh_per_frame_cost = None

    def add_rows(record: BenchRecord):
        if record.status != "OK":
            rows.append(
                {
                    "method": record.method,
                    "frames": record.frame_count,
                    "rep": -1,
                    "wall_s": "",
                    "peak_bytes": "",
                    "loss": "",
                    "threads": record.threads,
                    "status": record.status,
                }
            )
            return
        for rep, wall in enumerate(record.rep_times):
            rows.append(
                {
                    "method": record.method,
                    "frames": record.frame_count,
                    "rep": rep,
                    "wall_s": repr(wall),
                    "peak_bytes": record.peak_memory,
                    "loss": repr(record.loss),
                    "threads": record.threads,
                    "status": "OK",
                }
            )

    for method in cfg.methods:
        for count in counts:
            if count > len(motion):
                continue
            idx = uniform_frame_indices(len(motion), count)
            sub = motion.subsample(idx)
            if method == SPHERE:
                fn = lambda: _sphere_eval(spheres, bw, skeleton, sub, mask)
            else:
                frames = [frame_meshes[i] for i in idx]
                runs = cfg.warmup + cfg.repetitions + 1
                if mesh_per_frame_cost is not None:
                    projected = mesh_per_frame_cost * count * runs
                    if projected > cfg.mesh_time_budget:
                        record = BenchRecord(
                            method, count, float("nan"), float("nan"),
                            float("nan"), 0, float("nan"),
                            threads=cfg.threads, status="INFEASIBLE",
                        )
                        records.append(record)
                        add_rows(record)
                        continue
                fn = lambda frames=frames: _mesh_batch_eval(frames)
            times, peak, loss = _measure(fn, cfg.repetitions, cfg.warmup)
            if method == MESH:
                mesh_per_frame_cost = float(np.median(times)) / count
            record = BenchRecord(
                method=method,
                frame_count=count,
                wall_median=float(np.median(times)),
                wall_mean=float(np.mean(times)),
                wall_min=float(np.min(times)),
                peak_memory=int(peak),
                loss=float(loss),
                threads=cfg.threads,
                rep_times=[float(t) for t in times],
            )
            records.append(record)
            add_rows(record)
    return records, rows


def rows_to_csv(rows: list[dict], path: str | Path, header_lines=None) -> None:
    lines = list(header_lines or [])
    lines.append(CSV_HEADER)
    for row in rows:
        lines.append(
            ",".join(str(row[k]) for k in CSV_HEADER.split(","))
        )
    Path(path).write_text("\n".join(lines) + "\n")


def emit_plot_data(records: list[BenchRecord]) -> list[dict]:
    """Tidy rows: one per (method, frame count, metric)."""
    if not records:
        raise ConfigError("no benchmark records")
    out = []
    for rec in records:
        for metric, value in (
            ("time_s", rec.wall_median),
            ("peak_bytes", rec.peak_memory),
        ):
            out.append(
                {
                    "method": rec.method,
                    "frames": rec.frame_count,
                    "metric": metric,
                    "value": "" if rec.status != "OK" else repr(value),
                    "status": rec.status,
                }
            )
    return out


def plot_rows_to_csv(rows: list[dict], path: str | Path, header_lines=None):
    lines = list(header_lines or [])
    lines.append("method,frames,metric,value,status")
    for row in rows:
        lines.append(
            f"{row['method']},{row['frames']},{row['metric']},"
            f"{row['value']},{row['status']}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def summarize(records: list[BenchRecord]) -> dict:
    """Headline ratios: speedup and memory ratio at the largest shared
    frame count, plus growth factors across the sweep."""
    ok = [r for r in records if r.status == "OK"]
    by = {(r.method, r.frame_count): r for r in ok}
    counts = sorted({r.frame_count for r in ok})
    shared = [
        c for c in counts if (SPHERE, c) in by and (MESH, c) in by
    ]
    summary: dict = {"frame_counts": counts}
    if shared:
        top = max(shared)
        summary["comparison_frames"] = top
        summary["speedup_time"] = (
            by[(MESH, top)].wall_median / by[(SPHERE, top)].wall_median
        )
        summary["memory_ratio_mesh_over_sphere"] = (
            by[(MESH, top)].peak_memory / by[(SPHERE, top)].peak_memory
        )
    sphere_counts = [c for c in counts if (SPHERE, c) in by]
    if len(sphere_counts) >= 2:
        lo, hi = min(sphere_counts), max(sphere_counts)
        per_lo = by[(SPHERE, lo)].wall_median / lo
        per_hi = by[(SPHERE, hi)].wall_median / hi
        summary["sphere_per_frame_ratio"] = max(per_lo, per_hi) / min(
            per_lo, per_hi
        )
    mesh_counts = [c for c in counts if (MESH, c) in by]
    if len(mesh_counts) >= 2:
        lo, hi = min(mesh_counts), max(mesh_counts)
        summary["mesh_growth"] = (
            by[(MESH, hi)].wall_median / by[(MESH, lo)].wall_median
        )
        logs = np.log([by[(MESH, c)].wall_median for c in mesh_counts])
        slope = np.polyfit(np.log(mesh_counts), logs, 1)[0]
        summary["mesh_loglog_slope"] = float(slope)
    return summary


def summary_to_json(summary: dict, path: str | Path, provenance=None) -> None:
    data = dict(summary)
    if provenance:
        data["provenance"] = provenance
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2)
