"""Bits per character, macro-F1, computation-time statistics and reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PROB_FLOOR = 1e-12


def bpc(probs_of_correct, total_chars: int | None = None) -> float:
    """Mean of -log2 p over predicted characters (p clamped below at 1e-12)."""
    p = np.maximum(np.asarray(probs_of_correct, dtype=np.float64).reshape(-1), PROB_FLOOR)
    n = p.size if total_chars is None else total_chars
    if n <= 0:
        raise ValueError("bpc needs at least one character")
    return float(-np.sum(np.log2(p)) / n)


def f1_per_class(predictions, truths, n_classes: int) -> np.ndarray:
    """F1 = 2TP / (2TP + FP + FN); 0 for a class with no truths and no predictions."""
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(truths, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError(f"predictions ({pred.size}) and truths ({true.size}) differ in length")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros(n_classes), where=denom > 0)


def macro_f1(predictions, truths, n_classes: int) -> float:
    """Unweighted class mean of F1.

    With a trailing heads axis (shape (..., heads)) the macro-F1 of each head
    is averaged.
    """
    pred = np.asarray(predictions)
    true = np.asarray(truths)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    if pred.ndim <= 1:
        return float(f1_per_class(pred, true, n_classes).mean())
    heads = pred.shape[-1]
    pred = pred.reshape(-1, heads)
    true = true.reshape(-1, heads)
    return float(np.mean([f1_per_class(pred[:, k], true[:, k], n_classes).mean() for k in range(heads)]))


@dataclass
class NtStats:
    mean_per_step: np.ndarray
    max_per_step: np.ndarray
    histogram: np.ndarray  # (steps, L): count of samples with n_t == l + 1
    max_nt: int
    multi_round_fraction: float


def nt_stats(n: np.ndarray, max_layers: int | None = None) -> NtStats:
    """Statistics of a (samples, steps) computation-time matrix.

    Also accepts a nested list of HaltingRecord (per sample, per step).
    """
    if not isinstance(n, np.ndarray):
        n = np.array([[r.n_t if hasattr(r, "n_t") else r for r in row] for row in n], dtype=np.int64)
    if n.size == 0:
        raise ValueError("nt_stats needs at least one record")
    n = n.astype(np.int64)
    L = int(n.max()) if max_layers is None else max_layers
    hist = np.stack([(n == l).sum(axis=0) for l in range(1, L + 1)], axis=1)
    return NtStats(
        mean_per_step=n.mean(axis=0),
        max_per_step=n.max(axis=0),
        histogram=hist,
        max_nt=int(n.max()),
        multi_round_fraction=float((n > 1).any(axis=1).mean()),
    )


def relative_improvement(metric: float, baseline: float, lower_is_better: bool = False) -> float:
    """(metric - baseline) / baseline, sign-flipped for lower-is-better metrics (BPC)."""
    if baseline == 0:
        raise ValueError("baseline must be non-zero")
    rel = (metric - baseline) / baseline
    return -rel if lower_is_better else rel


@dataclass
class MetricReport:
    model: str
    split: str
    metrics: dict
    per_step: dict = field(default_factory=dict)
    nt_histogram: list = field(default_factory=list)
    epoch: int | None = None

    def to_json(self) -> str:
        doc = {"epoch": self.epoch, "split": self.split, "model": self.model, "metrics": self.metrics, "per_step": self.per_step}
        return json.dumps(_plain(doc), sort_keys=True)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


def write_series_csv(path, values: Sequence[float], index_name: str = "step", value_name: str = "value", start: int = 1) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([index_name, value_name])
        for i, v in enumerate(values, start=start):
            w.writerow([i, repr(float(v))])


def write_nt_distribution_csv(path, stats: NtStats, max_layers: int) -> None:
    """Columns: step, mean_nt, max_nt, count_1..count_L."""
    hist = stats.histogram
    if hist.shape[1] < max_layers:
        hist = np.pad(hist, ((0, 0), (0, max_layers - hist.shape[1])))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mean_nt", "max_nt"] + [f"count_{l}" for l in range(1, max_layers + 1)])
        for t in range(hist.shape[0]):
            w.writerow([t + 1, repr(float(stats.mean_per_step[t])), int(stats.max_per_step[t])] + [int(c) for c in hist[t, :max_layers]])
