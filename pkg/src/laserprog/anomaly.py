"""Reconstruction-error scoring, threshold calibration and evaluation.

A window is degraded when its anomaly score (the squared L2 norm of the
reconstruction residual) is strictly above ``alpha``. Degraded windows are
further split by a second threshold::

    score <= alpha          -> normal
    alpha < score <= beta   -> gradual
    score > beta            -> sudden

Both thresholds are chosen by sweeping candidate values and keeping the
smallest one with the best F1.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .datagen import PowerWindow, WindowSet

NORMALIZED_TOL = 1e-9


class CalibrationError(ValueError):
    """Threshold calibration is impossible on the given data."""


# ---------------------------------------------------------------------------
# Scores


def _check_normalized(x: np.ndarray) -> None:
    if np.any(x < -NORMALIZED_TOL) or np.any(x > 1.0 + NORMALIZED_TOL):
        raise ValueError("input is not normalized: values outside [0, 1]")


def residual_scores(x: np.ndarray, xhat: np.ndarray) -> np.ndarray:
    return np.sum((np.asarray(x) - np.asarray(xhat)) ** 2, axis=-1)


def anomaly_scores(model, x: np.ndarray, oc: np.ndarray | None = None, rng=None) -> np.ndarray:
    """Scores for a batch of normalized windows.

    ``rng=None`` uses the posterior-mean reconstruction; pass a generator to
    draw one latent sample per window instead.
    """
    from .scvae import reconstruct

    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_normalized(x)
    xhat = reconstruct(model, x, oc, rng=rng)
    return residual_scores(x, xhat)


def anomaly_score(model, window: PowerWindow, rng=None) -> float:
    x, oc = window.normalized(model.norm)
    return float(anomaly_scores(model, x[None, :], oc[None, :], rng=rng)[0])


def score_windows(model, windows: WindowSet, rng=None) -> np.ndarray:
    x, oc = windows.normalized(model.norm)
    return anomaly_scores(model, x, oc, rng=rng)


# ---------------------------------------------------------------------------
# Decisions


def detect(score: float, alpha: float) -> str:
    return "degraded" if score > alpha else "normal"


def classify_type(score: float, thresholds: "Thresholds") -> str:
    if not thresholds.alpha < thresholds.beta:
        raise ValueError("alpha must be smaller than beta")
    if score <= thresholds.alpha:
        return "normal"
    if score <= thresholds.beta:
        return "gradual"
    return "sudden"


def classify_many(scores: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    if not alpha < beta:
        raise ValueError("alpha must be smaller than beta")
    scores = np.asarray(scores)
    out = np.full(scores.shape, "normal", dtype=object)
    out[scores > alpha] = "gradual"
    out[scores > beta] = "sudden"
    return out


@dataclass
class Thresholds:
    alpha: float
    beta: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < self.beta:
            raise CalibrationError(f"thresholds must satisfy 0 < alpha < beta, got {self.alpha}, {self.beta}")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "Thresholds":
        return cls(float(d["alpha"]), float(d["beta"]), dict(d.get("meta", {})))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Thresholds":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_predictions(cls, predicted: np.ndarray, actual: np.ndarray) -> "ConfusionCounts":
        predicted = np.asarray(predicted, dtype=bool)
        actual = np.asarray(actual, dtype=bool)
        return cls(
            int(np.sum(predicted & actual)),
            int(np.sum(~predicted & ~actual)),
            int(np.sum(predicted & ~actual)),
            int(np.sum(~predicted & actual)),
        )


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    fpr: float
    fdr_paper: float
    degenerate: tuple[str, ...] = ()


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _ratio(num: int, den: int, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def metrics(c: ConfusionCounts) -> Metrics:
    """Precision, recall, F1 and false-positive rate, with zero-denominator flags.

    ``fpr`` is FP / (FP + TN). ``fdr_paper`` is FP / (FP + TP), the ratio as
    printed alongside the other formulas, kept for comparison.
    """
    flags: list[str] = []
    p = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    r = _ratio(c.tp, c.tp + c.fn, "recall", flags)
    # 2TP / (2TP + FP + FN) equals 2PR / (P + R) and is exact in the counts
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "f1", flags)
    fpr = _ratio(c.fp, c.fp + c.tn, "fpr", flags)
    fdr = _ratio(c.fp, c.fp + c.tp, "fdr_paper", flags)
    return Metrics(p, r, f1, fpr, fdr, tuple(flags))


# ---------------------------------------------------------------------------
# Threshold sweeps


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """Ascending candidates: a value below every score, midpoints between
    consecutive distinct scores, and the largest score (nothing flagged)."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    if u.size == 0:
        raise CalibrationError("no scores")
    lo = u[0] / 2.0 if u[0] > 0 else u[0] - 1.0
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[lo], mids, [u[-1]]])


def sweep_counts(scores: np.ndarray, positive: np.ndarray, thresholds: np.ndarray):
    """TP, FP, FN, TN for the rule ``score > threshold`` at every threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    pos = np.sort(scores[positive])
    neg = np.sort(scores[~positive])
    tp = pos.size - np.searchsorted(pos, thresholds, side="right")
    fp = neg.size - np.searchsorted(neg, thresholds, side="right")
    return tp, fp, pos.size - tp, neg.size - fp


@dataclass
class SweepResult:
    threshold: float
    precision: float
    recall: float
    f1: float
    grid: np.ndarray
    grid_precision: np.ndarray
    grid_recall: np.ndarray
    grid_f1: np.ndarray

    def rows(self) -> list[tuple[float, float, float, float]]:
        return list(zip(self.grid.tolist(), self.grid_precision.tolist(),
                        self.grid_recall.tolist(), self.grid_f1.tolist()))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall", "f1"])
            for row in self.rows():
                w.writerow([repr(v) for v in row])

    def summary(self) -> dict:
        return {"threshold": self.threshold, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "candidates": int(self.grid.size)}


def _sweep(scores, positive, grid, min_precision: float | None) -> SweepResult:
    tp, fp, fn, _ = sweep_counts(scores, positive, grid)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
        rec = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 0.0)
        f1 = np.where(2 * tp + fp + fn > 0, 2 * tp / np.maximum(2 * tp + fp + fn, 1), 0.0)
    if min_precision is None:
        best = int(np.flatnonzero(f1 == f1.max())[0])
    else:
        ok = prec >= min_precision
        if not ok.any():
            raise CalibrationError(f"no threshold reaches precision {min_precision}")
        best_rec = rec[ok].max()
        cand = np.flatnonzero(ok & (rec == best_rec))
        best = int(cand[np.argmax(f1[cand])])
    return SweepResult(float(grid[best]), float(prec[best]), float(rec[best]), float(f1[best]),
                       grid, prec, rec, f1)


def calibrate_alpha(
    scores: np.ndarray, degraded: np.ndarray, min_precision: float | None = None
) -> SweepResult:
    """Detection threshold maximizing F1 (smallest such candidate).

    With ``min_precision`` set, the candidate with the highest recall among
    those meeting the precision target is returned instead.
    """
    scores = np.asarray(scores, dtype=np.float64)
    degraded = np.asarray(degraded, dtype=bool)
    if scores.shape != degraded.shape:
        raise ValueError("scores and labels differ in length")
    if degraded.all() or not degraded.any():
        raise CalibrationError("calibration needs both normal and degraded windows")
    return _sweep(scores, degraded, candidate_thresholds(scores), min_precision)


def calibrate_beta(scores: np.ndarray, sudden: np.ndarray, alpha: float) -> SweepResult:
    """Type threshold over degraded windows, sudden being the positive class.

    Only candidates above ``alpha`` are considered.
    """
    scores = np.asarray(scores, dtype=np.float64)
    sudden = np.asarray(sudden, dtype=bool)
    if scores.shape != sudden.shape:
        raise ValueError("scores and kinds differ in length")
    if sudden.all() or not sudden.any():
        raise CalibrationError("type calibration needs both gradual and sudden windows")
    grid = candidate_thresholds(scores)
    grid = grid[grid > alpha]
    if grid.size == 0:
        raise CalibrationError("no candidate threshold above alpha")
    return _sweep(scores, sudden, grid, None)


# ---------------------------------------------------------------------------
# ROC


@dataclass
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    auc_pairwise: float

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fpr", "tpr", "threshold"])
            for row in zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()):
                w.writerow([repr(v) for v in row])


def auc_pairwise(scores: np.ndarray, positive: np.ndarray) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties counting 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise CalibrationError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc(scores: np.ndarray, positive: np.ndarray) -> RocResult:
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    if positive.all() or not positive.any():
        raise CalibrationError("ROC needs both classes")
    grid = candidate_thresholds(scores)[::-1]
    tp, fp, fn, tn = sweep_counts(scores, positive, grid)
    tpr = tp / (tp + fn)
    fpr = fp / (fp + tn)
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocResult(fpr, tpr, grid, auc, auc_pairwise(scores, positive))


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalReport:
    n_windows: int
    counts: ConfusionCounts
    metrics: Metrics
    auc: float | None
    auc_pairwise: float | None
    roc: RocResult | None
    type_counts: dict
    type_metrics: Metrics | None
    alpha: float
    beta: float
    scores: np.ndarray
    decisions: np.ndarray
    flags: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "n_windows": self.n_windows,
            "counts": asdict(self.counts),
            "metrics": asdict(self.metrics),
            "auc": self.auc,
            "auc_pairwise": self.auc_pairwise,
            "type_counts": self.type_counts,
            "type_metrics": None if self.type_metrics is None else asdict(self.type_metrics),
            "alpha": self.alpha,
            "beta": self.beta,
            "flags": self.flags,
        }


def evaluate_scores(
    scores: np.ndarray, windows: WindowSet, thresholds: Thresholds
) -> EvalReport:
    """Aggregate detection, type classification and ROC for precomputed scores."""
    if len(windows) == 0:
        raise ValueError("nothing to evaluate")
    scores = np.asarray(scores, dtype=np.float64)
    degraded = windows.is_degraded
    decisions = classify_many(scores, thresholds.alpha, thresholds.beta)
    flagged = scores > thresholds.alpha
    counts = ConfusionCounts.from_predictions(flagged, degraded)
    flags: list[str] = []
    try:
        roc = roc_auc(scores, degraded)
    except CalibrationError:
        roc = None
        flags.append("roc_undefined_single_class")

    # type split is judged on degraded windows that were detected
    detected = degraded & flagged
    kinds = windows.kind
    type_counts = {
        kind: {d: int(np.sum((kinds == kind) & degraded & (decisions == d)))
               for d in ("normal", "gradual", "sudden")}
        for kind in ("gradual", "sudden")
    }
    type_metrics = None
    if detected.any():
        tc = ConfusionCounts.from_predictions(decisions[detected] == "sudden", kinds[detected] == "sudden")
        type_metrics = metrics(tc)
    else:
        flags.append("no_detected_degraded_windows")

    return EvalReport(
        n_windows=len(windows),
        counts=counts,
        metrics=metrics(counts),
        auc=None if roc is None else roc.auc,
        auc_pairwise=None if roc is None else roc.auc_pairwise,
        roc=roc,
        type_counts=type_counts,
        type_metrics=type_metrics,
        alpha=thresholds.alpha,
        beta=thresholds.beta,
        scores=scores,
        decisions=decisions,
        flags=flags,
    )


def evaluate(model, windows: WindowSet, thresholds: Thresholds, rng=None) -> EvalReport:
    return evaluate_scores(score_windows(model, windows, rng=rng), windows, thresholds)


def calibrate(scores: np.ndarray, windows: WindowSet, min_precision: float | None = None):
    """Fit alpha then beta on a labelled calibration set.

    Beta is fitted on the degraded windows that alpha detects.
    Returns ``(thresholds, alpha_sweep, beta_sweep)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    a = calibrate_alpha(scores, windows.is_degraded, min_precision)
    detected = windows.is_degraded & (scores > a.threshold)
    b = calibrate_beta(scores[detected], windows.kind[detected] == "sudden", a.threshold)
    meta = {
        "partition_hash": windows_digest(windows),
        "alpha_sweep": a.summary(),
        "beta_sweep": b.summary(),
        "min_precision": min_precision,
    }
    return Thresholds(a.threshold, b.threshold, meta), a, b


def windows_digest(windows: WindowSet) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(windows.power).tobytes())
    h.update(np.ascontiguousarray(windows.device_id).tobytes())
    h.update(np.ascontiguousarray(windows.t_start_h).tobytes())
    h.update("|".join(windows.label.tolist()).encode())
    return h.hexdigest()[:16]


def write_report(report: EvalReport, windows: WindowSet, out_dir: str | Path, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = report.summary()
    if extra:
        summary.update(extra)
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    if report.roc is not None:
        report.roc.write_csv(out / "roc.csv")
    with open(out / "verdicts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["device_id", "t_start_h", "score", "decision", "binary"])
        for dev, t, s, d in zip(windows.device_id.tolist(), windows.t_start_h.tolist(),
                                report.scores.tolist(), report.decisions.tolist()):
            w.writerow([dev, repr(t), repr(s), d, "normal" if d == "normal" else "degraded"])


def summarize_many(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"median": float(np.median(v)), "min": float(v.min()), "max": float(v.max()), "values": v.tolist()}
