"""Accuracy and calibration metrics over prediction records."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .exceptions import DomainError, ParameterError

__all__ = [
    "PredictionRecord",
    "BinStats",
    "CalibrationReport",
    "self_entropy",
    "top1_accuracy",
    "ece",
    "mean_self_entropy",
]


def self_entropy(p) -> float:
    """Shannon entropy ``-sum p ln p`` in nats, with ``0 ln 0 = 0``."""
    p = np.asarray(p.data if hasattr(p, "data") else p, dtype=np.float64).reshape(-1)
    if (p < 0).any():
        raise DomainError("self_entropy: probabilities must be non-negative")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass
class PredictionRecord:
    """Outcome for one test sample.

    ``probabilities`` may be ``None`` for records rebuilt from a per-sample
    CSV, where only the label and confidence survive.
    """

    probabilities: np.ndarray | None
    predicted_label: int
    confidence: float
    true_label: int = -1
    sample_id: int = 0
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_probabilities(cls, probabilities, true_label: int = -1, sample_id: int = 0,
                           diagnostics: dict | None = None) -> "PredictionRecord":
        p = np.asarray(probabilities, dtype=np.float64)
        label = int(np.argmax(p))  # first maximum wins ties
        return cls(p, label, float(p[label]), int(true_label), int(sample_id), diagnostics or {})

    @property
    def correct(self) -> bool:
        return self.predicted_label == self.true_label


@dataclass
class BinStats:
    lower: float
    upper: float
    count: int
    mean_confidence: float
    accuracy: float


@dataclass
class CalibrationReport:
    ece: float
    n_bins: int
    bins: list[BinStats]
    top1_accuracy: float
    mean_entropy: float | None

    def to_dict(self) -> dict:
        return {
            "ece": self.ece,
            "n_bins": self.n_bins,
            "top1_accuracy": self.top1_accuracy,
            "mean_entropy": self.mean_entropy,
            "bins": [vars(b) for b in self.bins],
        }


def _require(records: Sequence[PredictionRecord], name: str):
    if len(records) == 0:
        raise ParameterError(f"{name}: no records")


def top1_accuracy(records: Sequence[PredictionRecord]) -> float:
    _require(records, "top1_accuracy")
    hits = 0
    for r in records:
        hits += r.predicted_label == r.true_label
    return hits / len(records)


def _bin_index(conf: float, edges: np.ndarray) -> int:
    # bin m holds (m/n, (m+1)/n]; zero goes to bin 0
    return max(int(np.searchsorted(edges, conf, side="left")) - 1, 0)


def ece(records: Sequence[PredictionRecord], n_bins: int = 15) -> CalibrationReport:
    """Equal-width binned expected calibration error over ``confidence``."""
    if n_bins < 1:
        raise ParameterError(f"ece: n_bins must be >= 1, got {n_bins}")
    _require(records, "ece")
    edges = np.arange(n_bins + 1) / n_bins
    counts = [0] * n_bins
    conf_sums = [0.0] * n_bins
    hit_sums = [0] * n_bins
    for r in records:
        c = float(r.confidence)
        if not 0.0 <= c <= 1.0:
            raise DomainError(f"ece: confidence {c} outside [0, 1]")
        m = _bin_index(c, edges)
        counts[m] += 1
        conf_sums[m] += c
        hit_sums[m] += r.predicted_label == r.true_label
    n = len(records)
    total = 0.0
    bins = []
    for m in range(n_bins):
        if counts[m]:
            conf = conf_sums[m] / counts[m]
            acc = hit_sums[m] / counts[m]
            total += counts[m] / n * abs(acc - conf)
        else:
            conf = acc = 0.0
        bins.append(BinStats(float(edges[m]), float(edges[m + 1]), counts[m], conf, acc))
    entropies = [self_entropy(r.probabilities) for r in records if r.probabilities is not None]
    return CalibrationReport(
        ece=total,
        n_bins=n_bins,
        bins=bins,
        top1_accuracy=top1_accuracy(records),
        mean_entropy=float(np.mean(entropies)) if len(entropies) == n else None,
    )


def mean_self_entropy(records: Sequence[PredictionRecord]) -> float:
    _require(records, "mean_self_entropy")
    return float(np.mean([self_entropy(r.probabilities) for r in records]))
