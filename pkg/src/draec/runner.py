"""Scene-level processing, trace files and experiment sweeps."""
from __future__ import annotations

import csv
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import AlgorithmVariant, RunConfig, SceneOptions
from .core import TapLayout
from .metrics import MetricsReport, append_csv, evaluate, shadow_components
from .pipelines import PipelineOutput, StageRecord, process_signals
from .scene import Scene, make_scene, save_scene

WORKERS_ENV = "DRAEC_WORKERS"


def save_trace(path, out: PipelineOutput) -> None:
    arrays = {"kinds": np.array([st.kind for st in out.stages])}
    for i, st in enumerate(out.stages):
        arrays[f"rows_{i}"] = st.taps.rows
        arrays[f"lags_{i}"] = st.taps.lags
        arrays[f"stride_{i}"] = np.array(st.trace_stride)
        if st.trace is not None:
            arrays[f"trace_{i}"] = st.trace
    np.savez(path, **arrays)


def load_trace(path) -> list[StageRecord]:
    with np.load(path) as f:
        stages = []
        for i, kind in enumerate(f["kinds"]):
            trace = f[f"trace_{i}"] if f"trace_{i}" in f.files else None
            stages.append(StageRecord(str(kind), TapLayout(f[f"rows_{i}"], f[f"lags_{i}"]),
                                      trace, int(f[f"stride_{i}"])))
    return stages


def process_scene(scene: Scene, cfg: RunConfig, variant, trace_stride: int = 0):
    return process_signals(scene.mics, scene.playback[None, :], cfg, variant, trace_stride)


def evaluate_scene(scene: Scene, cfg: RunConfig, variant, scene_name: str = "") -> MetricsReport:
    """Process with full-stride tracing and compute every metric."""
    enhanced, out = process_scene(scene, cfg, variant, trace_stride=1)
    comps = shadow_components(scene, out, cfg.stft, cfg.filter)
    return evaluate(scene, enhanced, str(variant), cfg.stft, cfg.metrics, comps, scene_name)


@dataclass(frozen=True)
class ExperimentSpec:
    """Grid of scene conditions crossed with algorithm variants.

    ``rt60 == 0`` means an anechoic target with an echoic loudspeaker
    path; ``sir_db`` None means no interferer.
    """

    rt60: tuple = (0.0, 0.3, 0.6)
    ser_db: tuple = (0.0, -10.0, -20.0)
    sir_db: tuple = (None, 0.0)
    variants: tuple = tuple(str(v) for v in AlgorithmVariant.all())
    trials: int = 1
    seed: int = 0
    base: SceneOptions = field(default_factory=SceneOptions)
    tracking: bool = False

    def __post_init__(self):
        if not (self.rt60 and self.ser_db and self.sir_db and self.variants):
            raise ValueError("experiment grid is empty")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        for v in self.variants:
            AlgorithmVariant.parse(v)

    def cells(self):
        return list(itertools.product(self.rt60, self.ser_db, self.sir_db))

    def scene_options(self, cell, trial: int) -> SceneOptions:
        rt60, ser, sir = cell
        index = self.cells().index(cell)
        return replace(self.base, rt60=rt60, ser_db=ser, sir_db=sir,
                       seed=self.seed * 1_000_003 + index * 1009 + trial)


def _run_cell_trial(args):
    spec, cfg, cell, trial = args
    opts = spec.scene_options(cell, trial)
    scene = make_scene(opts, cfg.filter.n_mics, cfg.stft.sample_rate)
    name = f"rt{cell[0]}_ser{cell[1]}_sir{cell[2]}_t{trial}"
    return [evaluate_scene(scene, cfg, v, name) for v in spec.variants]


def _workers(n: int | None) -> int:
    if n is not None:
        return max(1, n)
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


TABLE_FIELDS = ("rt60", "ser_db", "sir_db", "variant", "trials",
                "sier_improvement_mean", "sier_improvement_std",
                "sdr_improvement_mean", "sdr_improvement_std",
                "erle_steady_mean", "sier_ordering_ok")


def run_experiment(spec: ExperimentSpec, cfg: RunConfig, out_dir, workers: int | None = None) -> dict:
    """Run every (cell, trial) and write tables.

    Files: ``runs.csv`` (one row per scene and variant), ``table.csv``
    (mean/std per cell and variant), ``erle_curve.csv`` when tracking.
    A ``PARTIAL`` marker is left behind if any cell fails.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / "PARTIAL"
    marker.write_text("experiment incomplete\n")
    jobs = [(spec, cfg, cell, t) for cell in spec.cells() for t in range(spec.trials)]
    n = _workers(workers)
    if n == 1:
        results = [_run_cell_trial(j) for j in jobs]
    else:
        with ProcessPoolExecutor(n) as pool:
            results = list(pool.map(_run_cell_trial, jobs))

    runs_csv = out_dir / "runs.csv"
    if runs_csv.exists():
        runs_csv.unlink()
    append_csv(runs_csv, [r for rs in results for r in rs])

    rows = []
    for cell in spec.cells():
        cell_reports = [r for (s, c, cl, t), rs in zip(jobs, results) if cl == cell for r in rs]
        means = {}
        for v in spec.variants:
            reps = [r for r in cell_reports if r.variant == v]
            sier = [r.sier_improvement_db for r in reps]
            sdr_ = [r.sdr_improvement_db for r in reps if r.sdr_improvement_db is not None]
            erl = [r.erle_steady_db for r in reps if r.erle_steady_db is not None]
            means[v] = float(np.mean(sier))
            rows.append({
                "rt60": cell[0], "ser_db": cell[1], "sir_db": cell[2], "variant": v,
                "trials": len(reps),
                "sier_improvement_mean": float(np.mean(sier)),
                "sier_improvement_std": float(np.std(sier)),
                "sdr_improvement_mean": float(np.mean(sdr_)) if sdr_ else None,
                "sdr_improvement_std": float(np.std(sdr_)) if sdr_ else None,
                "erle_steady_mean": float(np.mean(erl)) if erl else None,
            })
        for row in rows[-len(spec.variants):]:
            row["sier_ordering_ok"] = ordering_ok(means, row["variant"].split("-")[0])
    with (out_dir / "table.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_FIELDS)
        writer.writeheader()
        writer.writerows(rows)

    summary = {"cells": len(spec.cells()), "trials": spec.trials, "rows": len(rows)}
    if spec.tracking:
        summary["tracking"] = run_tracking(spec, cfg, out_dir / "erle_curve.csv")
    marker.unlink()
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def ordering_ok(means: dict, estimator: str):
    """SIER(joint) >= SIER(aec_then_dr) >= SIER(dr_then_aec) for one estimator,
    or None if a topology is missing."""
    keys = [f"{estimator}-{t}" for t in ("joint", "aec_then_dr", "dr_then_aec")]
    if not all(k in means for k in keys):
        return None
    a, b, c = (means[k] for k in keys)
    return bool(a >= b >= c)


def run_tracking(spec: ExperimentSpec, cfg: RunConfig, path) -> dict:
    """Echo-only scene with an echo path change; writes the ERLE curves."""
    opts = replace(spec.base, rt60=0.3, sir_db=None, seed=spec.seed)
    scene = make_scene(opts, cfg.filter.n_mics, cfg.stft.sample_rate, path_change=True,
                       echo_only=True)
    change_s = scene.meta["change_point"] / cfg.stft.sample_rate
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "time_s", "erle_db", "change_point_s"])
        for v in spec.variants:
            enhanced, _ = process_scene(scene, cfg, v)
            rep = evaluate(scene, enhanced, v, cfg.stft, cfg.metrics)
            for t, e in zip(rep.erle_times, rep.erle_db):
                writer.writerow([v, f"{t:.3f}", f"{e:.3f}", f"{change_s:.3f}"])
    return {"change_point_s": change_s}


def simulate(spec: ExperimentSpec, cfg: RunConfig, out_dir, path_change: bool = False,
             echo_only: bool = False) -> Path:
    """Write one scene directory per (cell, trial) plus ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for cell in spec.cells():
        for t in range(spec.trials):
            opts = spec.scene_options(cell, t)
            scene = make_scene(opts, cfg.filter.n_mics, cfg.stft.sample_rate,
                               path_change=path_change, echo_only=echo_only)
            name = f"scene_{len(entries):04d}"
            save_scene(scene, out_dir / name)
            entries.append({"dir": name, "seed": opts.seed, "rt60": cell[0], "ser_db": cell[1],
                            "sir_db": cell[2], "trial": t,
                            "change_point": scene.meta.get("change_point")})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"scenes": entries}, indent=2, sort_keys=True) + "\n")
    return manifest
