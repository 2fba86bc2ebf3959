"""Task metrics and report containers.

All metric functions return plain dicts of Python scalars and lists so they
serialize to JSON without custom encoders.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


def classification_metrics(preds, labels, n_classes: int) -> dict:
    """Confusion matrix plus overall and mean per-class accuracy.

    Classes absent from ``labels`` are excluded from the per-class mean with
    a warning rather than counted as zero.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError("prediction/label length mismatch")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(labels, preds):
        conf[t, p] += 1
    support = conf.sum(axis=1)
    present = support > 0
    if not present.all():
        missing = np.where(~present)[0].tolist()
        warnings.warn(f"classes with no samples excluded from mean accuracy: {missing}")
    per_class = np.zeros(n_classes)
    per_class[present] = np.diag(conf)[present] / support[present]
    return {
        "confusion": conf.tolist(),
        "accuracy": float(np.diag(conf).sum() / max(1, conf.sum())),
        "per_class_accuracy": [float(v) if ok else None
                               for v, ok in zip(per_class, present)],
        "mean_per_class_accuracy": float(per_class[present].mean()) if present.any() else 0.0,
        "n_samples": int(conf.sum()),
    }


def positioning_metrics(preds, targets, n_bins: int = 20) -> dict:
    """Euclidean error statistics in meters plus an error histogram."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError("prediction/target shape mismatch")
    errs = np.linalg.norm(preds - targets, axis=-1)
    counts, edges = np.histogram(errs, bins=n_bins)
    return {
        "mean_error_m": float(errs.mean()),
        "std_error_m": float(errs.std()),
        "median_error_m": float(np.median(errs)),
        "histogram_counts": counts.tolist(),
        "histogram_edges": edges.tolist(),
        "n_samples": int(len(errs)),
    }


def grid_mse(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error per grid element; complex grids use |.|^2."""
    diff = np.asarray(pred) - np.asarray(target)
    return float(np.mean(np.abs(diff) ** 2))


def mse_vs_snr(model_preds: Sequence, targets: Sequence, snrs: Sequence,
               bin_edges: Sequence, baselines: Optional[dict] = None) -> dict:
    """Per-SNR-bin estimation MSE for the model and any baseline estimators.

    ``baselines`` maps a name (e.g. "ls", "lmmse") to a prediction list
    aligned with ``targets``.  The crossover field reports the center of the
    first bin, scanning upward in SNR, where the "ls" baseline beats the
    model (None when the model wins everywhere or no LS column exists).
    """
    snrs = np.asarray(snrs, dtype=np.float64)
    edges = np.asarray(bin_edges, dtype=np.float64)
    baselines = baselines or {}
    names = list(baselines.keys())
    rows = []
    for b in range(len(edges) - 1):
        lo, hi = edges[b], edges[b + 1]
        sel = (snrs >= lo) & (snrs < hi) if b < len(edges) - 2 else (snrs >= lo) & (snrs <= hi)
        idx = np.where(sel)[0]
        row = {"snr_lo": float(lo), "snr_hi": float(hi),
               "snr_center": float((lo + hi) / 2), "count": int(len(idx))}
        if len(idx):
            row["model_mse"] = float(np.mean([grid_mse(model_preds[i], targets[i]) for i in idx]))
            for name in names:
                row[f"{name}_mse"] = float(np.mean([grid_mse(baselines[name][i], targets[i])
                                                    for i in idx]))
        else:
            row["model_mse"] = None
            for name in names:
                row[f"{name}_mse"] = None
        rows.append(row)
    crossover = None
    if "ls" in baselines:
        for row in rows:
            if row["model_mse"] is not None and row["ls_mse"] is not None \
               and row["ls_mse"] < row["model_mse"]:
                crossover = row["snr_center"]
                break
    return {"rows": rows, "ls_crossover_snr_db": crossover}


def convergence_epoch(values: Sequence[float], mode: str = "max",
                      tol: float = 0.01) -> Optional[int]:
    """First epoch (0-based) whose metric is within ``tol`` (relative) of the
    best value the run ever reaches."""
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    best = max(vals) if mode == "max" else min(vals)
    for i, v in enumerate(values):
        if v is None:
            continue
        if abs(v - best) <= tol * abs(best) + 1e-12:
            return i
    return None


@dataclass
class MetricReport:
    """Everything a finished run reports, JSON-serializable via to_dict."""
    task: str
    records: list = field(default_factory=list)   # one dict per epoch/eval event
    final: dict = field(default_factory=dict)
    convergence: Optional[int] = None
    status: str = "ok"

    def to_dict(self) -> dict:
        return {"task": self.task, "records": self.records, "final": self.final,
                "convergence_epoch": self.convergence, "status": self.status}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "MetricReport":
        with open(path) as fh:
            d = json.load(fh)
        return cls(task=d["task"], records=d["records"], final=d["final"],
                   convergence=d["convergence_epoch"], status=d["status"])
