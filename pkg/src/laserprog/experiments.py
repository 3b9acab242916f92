"""Seeded end-to-end pipelines behind the ``experiment`` command.

Each experiment returns an :class:`ExperimentReport` holding one row per
(variant, seed) plus a summary of medians, and can write itself as JSON, CSV
and a plain-text table.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import scvae
from .anomaly import (
    EvalReport,
    SweepResult,
    Thresholds,
    calibrate,
    calibrate_alpha,
    evaluate_scores,
    score_windows,
)
from .baselines import LofConfig, gru_ae_config, lof_features, lof_fit
from .datagen import Dataset, DatasetSpec, NormStats, WindowSet, batch_shift, build_dataset, normalize_fit
from .scvae import ScvaeConfig, ScvaeModel, TrainTrace

log = logging.getLogger(__name__)

N_SEEDS = 5

# Settings the pipeline uses on top of the ScvaeConfig defaults: a small KL
# weight keeps the latent code informative, and a late learning-rate drop
# settles Adam before the final weights are taken.
PIPELINE_MODEL_OVERRIDES = {"kl_weight": 0.002, "lr_final": 1e-4}

# Shifted batches for the robustness study: one adds a cooler stress
# temperature, the other also adds a higher drive current.
BATCH_SHIFTS = (
    {"batch_id": 1, "extra_temperatures": (50.0,), "p0_factor": 0.95, "noise_factor": 1.25, "rate_factor": 1.1},
    {"batch_id": 2, "extra_temperatures": (50.0,), "extra_currents": (20.0,),
     "p0_factor": 1.05, "noise_factor": 1.5, "rate_factor": 0.9},
)


def pipeline_config(seed: int = 0, **overrides) -> ScvaeConfig:
    return ScvaeConfig(**{**PIPELINE_MODEL_OVERRIDES, "seed": seed, **overrides})


def seeds_for(seed: int, n: int = N_SEEDS) -> list[int]:
    return [seed + i for i in range(n)]


class ModelCache:
    """Trained models keyed by (training data, config); optionally mirrored on disk."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = None if directory is None else Path(directory)
        self._mem: dict[str, ScvaeModel] = {}
        self.traces: dict[str, TrainTrace] = {}

    @staticmethod
    def key(data_digest: str, config: ScvaeConfig) -> str:
        blob = json.dumps({"data": data_digest, "config": config.to_dict()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:20]

    def get_or_train(self, train: WindowSet, data_digest: str, config: ScvaeConfig, norm: NormStats) -> ScvaeModel:
        k = self.key(data_digest, config)
        if k in self._mem:
            return self._mem[k]
        path = None if self.directory is None else self.directory / f"model-{k}.json"
        if path is not None and path.exists():
            model = scvae.load(path)
        else:
            t0 = time.perf_counter()
            model, self.traces[k] = scvae.train(train, config, norm)
            log.info("trained %s in %.1fs", k, time.perf_counter() - t0)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                scvae.save(model, path)
        self._mem[k] = model
        return model


@dataclass
class PipelineRun:
    dataset: Dataset
    config: ScvaeConfig
    norm: NormStats
    model: ScvaeModel
    thresholds: Thresholds
    alpha_sweep: SweepResult
    beta_sweep: SweepResult
    calib_scores: np.ndarray
    test_scores: np.ndarray
    report: EvalReport


def run_pipeline(
    dataset: Dataset,
    config: ScvaeConfig,
    cache: ModelCache | None = None,
    min_precision: float | None = None,
) -> PipelineRun:
    """train -> calibrate -> evaluate on one dataset."""
    norm = normalize_fit(dataset.train)
    if cache is None:
        model, _ = scvae.train(dataset.train, config, norm)
    else:
        model = cache.get_or_train(dataset.train, dataset.manifest["spec_digest"], config, norm)
    calib_scores = score_windows(model, dataset.calib)
    thresholds, a, b = calibrate(calib_scores, dataset.calib, min_precision)
    test_scores = score_windows(model, dataset.test)
    report = evaluate_scores(test_scores, dataset.test, thresholds)
    return PipelineRun(dataset, config, norm, model, thresholds, a, b, calib_scores, test_scores, report)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class ExperimentReport:
    name: str
    columns: list[str]
    rows: list[dict]
    summary: dict
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"experiment": self.name, "config": self.config, "summary": self.summary, "rows": self.rows}

    def table(self) -> str:
        widths = [max(len(c), *(len(_fmt(r.get(c))) for r in self.rows)) for c in self.columns]
        lines = ["  ".join(c.ljust(w) for c, w in zip(self.columns, widths))]
        lines.append("  ".join("-" * w for w in widths))
        for r in self.rows:
            lines.append("  ".join(_fmt(r.get(c)).ljust(w) for c, w in zip(self.columns, widths)))
        return "\n".join(lines)

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{self.name}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        with open(out / f"{self.name}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns, extrasaction="ignore")
            w.writeheader()
            w.writerows(self.rows)
        (out / f"{self.name}.txt").write_text(self.table() + "\n")


def _plain(d: dict) -> dict:
    """Experiment options in JSON-friendly form."""
    return {k: (list(v) if isinstance(v, tuple) else v if isinstance(v, (int, float, str, list)) else repr(v))
            for k, v in d.items()}


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return "" if v is None else str(v)


def _median(rows: list[dict], key: str, **match) -> float:
    vals = [r[key] for r in rows if all(r.get(k) == v for k, v in match.items())]
    return float(np.median(vals))


# ---------------------------------------------------------------------------
# Experiments


def oc_ablation(spec: DatasetSpec, seed: int, n_seeds: int = N_SEEDS, cache: ModelCache | None = None,
                **model_overrides) -> ExperimentReport:
    """Detection with and without the operating conditions fed to the decoder."""
    dataset = build_dataset(spec)
    rows = []
    for variant, oc_dim in (("without oc", 0), ("with oc", 2)):
        for s in seeds_for(seed, n_seeds):
            run = run_pipeline(dataset, pipeline_config(s, oc_dim=oc_dim, **model_overrides), cache)
            m = run.report.metrics
            rows.append({"variant": variant, "seed": s, "precision": m.precision, "recall": m.recall,
                         "f1": m.f1, "auc": run.report.auc})
    summary = {v: {"median_f1": _median(rows, "f1", variant=v), "median_auc": _median(rows, "auc", variant=v)}
               for v in ("without oc", "with oc")}
    return ExperimentReport("oc_ablation", ["variant", "seed", "precision", "recall", "f1", "auc"], rows, summary)


def seqlen_sweep(spec: DatasetSpec, seed: int, lengths=(4, 5, 6, 7, 8), n_seeds: int = 1,
                 cache: ModelCache | None = None, **model_overrides) -> ExperimentReport:
    """Detection F1 as a function of window length."""
    rows = []
    for L in lengths:
        dataset = build_dataset(dataclasses.replace(spec, seq_len=L))
        for s in seeds_for(seed, n_seeds):
            run = run_pipeline(dataset, pipeline_config(s, seq_len=L, **model_overrides), cache)
            rows.append({"seq_len": L, "seed": s, "f1": run.report.metrics.f1, "auc": run.report.auc})
    summary = {str(L): _median(rows, "f1", seq_len=L) for L in lengths}
    best = max(lengths, key=lambda L: summary[str(L)])
    return ExperimentReport("seqlen_sweep", ["seq_len", "seed", "f1", "auc"], rows,
                            {"median_f1": summary, "best_seq_len": best})


def baselines(spec: DatasetSpec, seed: int, n_seeds: int = N_SEEDS, cache: ModelCache | None = None,
              lof: LofConfig = LofConfig(), **model_overrides) -> ExperimentReport:
    """SCVAE against the GRU autoencoder and LOF on the same partitions."""
    dataset = build_dataset(spec)
    norm = normalize_fit(dataset.train)
    rows = []
    for s in seeds_for(seed, n_seeds):
        for method, cfg in (("SCVAE", pipeline_config(s, **model_overrides)),
                            ("GRU-AE", gru_ae_config(pipeline_config(s, **model_overrides)))):
            run = run_pipeline(dataset, cfg, cache)
            rows.append({"method": method, "seed": s, "f1": run.report.metrics.f1, "auc": run.report.auc})

    # LOF has no training randomness: one fit, repeated per seed for the medians
    model = lof_fit(lof_features(dataset.train, norm), lof)
    calib_scores = model.score(lof_features(dataset.calib, norm))
    test_scores = model.score(lof_features(dataset.test, norm))
    a = calibrate_alpha(calib_scores, dataset.calib.is_degraded)
    report = evaluate_scores(test_scores, dataset.test, Thresholds(a.threshold, np.inf, {}))
    contamination = evaluate_scores(test_scores, dataset.test, Thresholds(model.threshold, np.inf, {}))
    for s in seeds_for(seed, n_seeds):
        rows.append({"method": "LOF", "seed": s, "f1": report.metrics.f1, "auc": report.auc,
                     "f1_contamination": contamination.metrics.f1})
    summary = {m: {"median_auc": _median(rows, "auc", method=m), "median_f1": _median(rows, "f1", method=m)}
               for m in ("SCVAE", "GRU-AE", "LOF")}
    summary["LOF"]["k"] = model.k
    return ExperimentReport("baselines", ["method", "seed", "f1", "auc", "f1_contamination"], rows, summary)


def early_windows(windows: WindowSet, cutoff_h: float, interval_h: float) -> np.ndarray:
    """Degraded windows whose last sample lies within the first ``cutoff_h`` hours."""
    end = windows.t_start_h + (windows.seq_len - 1) * interval_h
    return windows.is_degraded & (end <= cutoff_h)


def early_prediction(spec: DatasetSpec, seed: int, cache: ModelCache | None = None, run: PipelineRun | None = None,
                     **model_overrides) -> ExperimentReport:
    """How many late-failing devices are flagged from their first ``early_cutoff_h`` hours alone."""
    if run is None:
        run = run_pipeline(build_dataset(spec), pipeline_config(seed, **model_overrides), cache)
    test = run.dataset.test
    spec = run.dataset.spec
    early = early_windows(test, spec.early_cutoff_h, spec.interval_h)
    flagged = run.test_scores > run.thresholds.alpha
    rows = []
    for dev in np.unique(test.device_id[early]):
        mask = early & (test.device_id == dev)
        rows.append({"device_id": int(dev), "kind": str(test.kind[mask][0]), "early_windows": int(mask.sum()),
                     "flagged": int(flagged[mask].sum()), "detected": bool(flagged[mask].any())})
    recall = float(flagged[early].mean()) if early.any() else float("nan")
    summary = {
        "early_cutoff_h": spec.early_cutoff_h,
        "horizon_h": spec.horizon_h,
        "window_recall": recall,
        "device_recall": float(np.mean([r["detected"] for r in rows])) if rows else float("nan"),
        "n_windows": int(early.sum()),
        "test_time_saving": 1.0 - spec.early_cutoff_h / spec.horizon_h,
    }
    return ExperimentReport("early_prediction", ["device_id", "kind", "early_windows", "flagged", "detected"],
                            rows, summary)


def batch_robustness(spec: DatasetSpec, seed: int, cache: ModelCache | None = None, run: PipelineRun | None = None,
                     shifts=BATCH_SHIFTS, **model_overrides) -> ExperimentReport:
    """Apply a model trained and calibrated on the base batch to other batches."""
    if run is None:
        run = run_pipeline(build_dataset(spec), pipeline_config(seed, **model_overrides), cache)
    base = run.dataset.spec
    rows = [_batch_row(base, run.report)]
    for shift in shifts:
        shifted = batch_shift(base, **shift)
        test = build_dataset(shifted).test
        rows.append(_batch_row(shifted, evaluate_scores(score_windows(run.model, test), test, run.thresholds)))
    summary = {f"batch_{r['batch_id']}": r["f1"] for r in rows}
    return ExperimentReport("batch_robustness", ["batch_id", "temperatures", "currents", "f1", "auc"], rows, summary)


def _batch_row(spec: DatasetSpec, report: EvalReport) -> dict:
    temps = sorted({T for T, _ in spec.oc_grid})
    currents = sorted({I for _, I in spec.oc_grid})
    return {"batch_id": spec.batch_id, "temperatures": ";".join(f"{t:g}" for t in temps),
            "currents": ";".join(f"{i:g}" for i in currents), "f1": report.metrics.f1, "auc": report.auc}


EXPERIMENTS: dict[str, Callable[..., ExperimentReport]] = {
    "oc_ablation": oc_ablation,
    "seqlen_sweep": seqlen_sweep,
    "baselines": baselines,
    "early_prediction": early_prediction,
    "batch_robustness": batch_robustness,
}


def run_experiment(name: str, spec: DatasetSpec, seed: int, cache: ModelCache | None = None,
                   **model_overrides) -> ExperimentReport:
    """Run one experiment; keyword arguments are experiment options (``n_seeds``,
    ``lengths``, ...) or ScvaeConfig fields applied on top of the pipeline preset."""
    if name not in EXPERIMENTS:
        raise KeyError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    report = EXPERIMENTS[name](spec, seed, cache=cache, **model_overrides)
    model_keys = {f.name for f in dataclasses.fields(ScvaeConfig)}
    overrides = {k: v for k, v in model_overrides.items() if k in model_keys}
    options = {k: v for k, v in model_overrides.items() if k not in model_keys}
    report.config = {"spec": spec.to_dict(), "seed": seed, "options": _plain(options),
                     "model": pipeline_config(seed, **overrides).to_dict()}
    return report
