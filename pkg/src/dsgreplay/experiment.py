"""Multi-seed experiment driver and report aggregation."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, data_path
from .continual import rng_stream, run_stream
from .data import ChannelStats, Task, TaskStream, load_dataset, make_synthetic, split_stream
from .metrics import AccuracyMatrix, dump_json, metrics_report, metrics_rows, series, write_metrics_csv

log = logging.getLogger(__name__)

REPORT_FILE = "report.json"
MATRICES_FILE = "matrices.json"
MANIFEST_FILE = "manifest.json"
METRICS_CSV = "metrics.csv"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"{stage} failed: {cause}")


def build_stream(cfg: ExperimentConfig, seed: int) -> TaskStream:
    """Load or synthesize the dataset and split it with a seed-derived class order."""
    run = cfg.values["run"]
    data = cfg.values["data"]
    if data["source"] == "synthetic":
        spec = cfg.synth_spec()
        dataset = make_synthetic(spec)
        ratio = spec.train_ratio
    else:
        dataset = load_dataset(data_path(cfg), channels=data["channels"], length=data["length"],
                               num_classes=data["num_classes"])
        ratio = run["train_ratio"]
    rng = rng_stream(seed, "data")
    order = rng.permutation(dataset.num_classes).tolist()
    stream = split_stream(dataset, run["classes_per_task"], order, ratio, rng)
    if data["normalize"]:
        stats = ChannelStats.fit([t.train for t in stream])
        stream = TaskStream([Task(t.classes, stats.apply(t.train), stats.apply(t.test)) for t in stream],
                            stream.num_classes, stream.class_order)
    return stream


def resolved_config(cfg: ExperimentConfig) -> dict:
    values = cfg.to_dict()
    if values["data"]["source"] == "file":
        values["data"]["path"] = str(data_path(cfg).resolve())
    return values


@dataclass
class RunReport:
    method: str
    seeds: list[dict]
    summary: dict
    manifest: dict
    wall_clock: float

    def to_dict(self) -> dict:
        return {"method": self.method, "seeds": self.seeds, "summary": self.summary,
                "manifest": self.manifest, "wall_clock_seconds": self.wall_clock}


def summarize(matrices: list[AccuracyMatrix]) -> dict:
    acc = np.array([series(m)[0] for m in matrices])
    n_tasks = acc.shape[1]
    out = {
        "A_n_mean": acc.mean(axis=0).tolist(),
        "A_n_std": acc.std(axis=0).tolist(),
        "A_N_mean": float(acc[:, -1].mean()),
        "A_N_std": float(acc[:, -1].std()),
    }
    if n_tasks >= 2:
        fgt = np.array([series(m)[1][1:] for m in matrices], dtype=np.float64)
        out.update({"F_N_mean": float(fgt[:, -1].mean()), "F_N_std": float(fgt[:, -1].std())})
    else:
        out.update({"F_N_mean": None, "F_N_std": None})
    return out


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path, run_id: str | None = None) -> RunReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_id = run_id or out.name
    values = resolved_config(cfg)
    manifest = {"config": values, "method": cfg.method_kind, "seeds": cfg.seeds,
                "lambda": values["method"]["lambda"], "schedule": values["diffusion"],
                "protocol": values["protocol"]}
    dump_json(manifest, out / MANIFEST_FILE)
    method = cfg.method()
    protocol = cfg.protocol()

    started = time.perf_counter()
    per_seed, matrices, csv_rows = [], [], []
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        try:
            stream = build_stream(cfg, seed)
        except Exception as exc:
            raise StageError(f"data (seed {seed})", exc) from exc
        try:
            result = run_stream(method, stream, protocol, seed, out / "checkpoints" / f"seed_{seed}")
        except Exception as exc:
            raise StageError(f"training (seed {seed})", exc) from exc
        matrices.append(result.matrix)
        entry = {"seed": seed, "class_order": stream.class_order,
                 "wall_clock_seconds": time.perf_counter() - t0,
                 "classifier_epochs": [f.epochs for f in result.fits]}
        entry.update(metrics_report(result.matrix, result.confusions))
        per_seed.append(entry)
        csv_rows.extend(metrics_rows(run_id, cfg.method_kind, seed, result.matrix))
        log.info("seed %d: A_N=%.4f", seed, entry["A"][-1])

    report = RunReport(cfg.method_kind, per_seed, summarize(matrices), manifest, time.perf_counter() - started)
    dump_json(report.to_dict(), out / REPORT_FILE)
    dump_json({str(e["seed"]): e["accuracy_matrix"] for e in per_seed}, out / MATRICES_FILE)
    write_metrics_csv(out / METRICS_CSV, csv_rows)
    return report


# ---------------------------------------------------------------------------
# aggregation across run directories
# ---------------------------------------------------------------------------


def load_report(run_dir: str | Path) -> dict:
    path = Path(run_dir) / REPORT_FILE
    if not path.exists():
        raise FileNotFoundError(f"missing report file {path}")
    return json.loads(path.read_text())


def aggregate(run_dirs) -> dict[str, dict]:
    """Pool per-seed matrices by method across runs.  Runs are visited in
    sorted path order so the result does not depend on argument order."""
    pooled: dict[str, list[AccuracyMatrix]] = {}
    for d in sorted(str(Path(p)) for p in run_dirs):
        report = load_report(d)
        for entry in report["seeds"]:
            pooled.setdefault(report["method"], []).append(AccuracyMatrix.from_dict(entry["accuracy_matrix"]))
    return {method: summarize(ms) | {"runs": len(ms)} for method, ms in sorted(pooled.items())}


def format_table(summary: dict[str, dict]) -> str:
    def cell(mean, std):
        return "n/a" if mean is None else f"{100 * mean:.1f} ± {100 * std:.1f}"

    header = f"{'method':<8} {'runs':>4}  {'A_N (%)':>14}  {'F_N (%)':>14}"
    lines = [header, "-" * len(header)]
    for method, s in summary.items():
        lines.append(f"{method:<8} {s['runs']:>4}  {cell(s['A_N_mean'], s['A_N_std']):>14}  "
                     f"{cell(s['F_N_mean'], s['F_N_std']):>14}")
    return "\n".join(lines)


def write_curves(summary: dict[str, dict], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for method, s in summary.items():
        path = out / f"curve_{method}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "n", "A_n_mean", "A_n_std"])
            for n, (m, sd) in enumerate(zip(s["A_n_mean"], s["A_n_std"]), start=1):
                w.writerow([method, n, repr(m), repr(sd)])
        paths.append(path)
    return paths
