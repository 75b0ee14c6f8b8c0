"""Experiment-facing measurements: accuracy, rounds-to-threshold, CIs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax-correct predictions; score ties go to the lowest class."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.shape[0] == 0:
        raise ValueError("test set must be nonempty")
    return float((logits.argmax(axis=1) == labels).mean())


def rounds_to_threshold(curve: Sequence[float], threshold: float) -> Optional[int]:
    """1-based index of the first round reaching ``threshold``; None if never."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    for i, value in enumerate(curve):
        if value >= threshold:
            return i + 1
    return None


@dataclass(frozen=True)
class RunStats:
    mean: float
    ci_half_width: float
    n_runs: int


def confidence_interval(samples: Sequence[float], level: float = 0.95) -> RunStats:
    """Student-t interval: mean +- t_{level, n-1} s / sqrt(n)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < 2:
        raise ValueError("need at least 2 samples for an interval")
    sd = samples.std(ddof=1)
    quantile = stats.t.ppf(0.5 + level / 2.0, samples.size - 1)
    return RunStats(
        mean=float(samples.mean()),
        ci_half_width=float(quantile * sd / np.sqrt(samples.size)),
        n_runs=int(samples.size),
    )
