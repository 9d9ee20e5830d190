"""Easy-to-hard pseudo-labeling: confidence thresholds that loosen round by round."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TOutOfRange

# position 6 is 0.4 so the grid stays strictly decreasing
THRESHOLD_GRID = (0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1)
MAX_ROUNDS = len(THRESHOLD_GRID)


@dataclass(frozen=True)
class ThresholdSchedule:
    thresholds: tuple

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        if any(not 0.0 < x < 1.0 for x in t):
            raise ValueError(f"thresholds must lie in (0, 1): {t}")
        if any(a <= b for a, b in zip(t, t[1:])):
            raise ValueError(f"thresholds must be strictly decreasing: {t}")
        object.__setattr__(self, "thresholds", t)

    def __len__(self) -> int:
        return len(self.thresholds)

    def __iter__(self):
        return iter(self.thresholds)

    def __getitem__(self, i):
        return self.thresholds[i]


def default_schedule(T: int) -> ThresholdSchedule:
    """The first ``T`` thresholds of the grid, except ``T == 1`` which maps to ``[0.1]``."""
    if not 1 <= T <= MAX_ROUNDS:
        raise TOutOfRange(f"T must be in [1, {MAX_ROUNDS}], got {T}")
    if T == 1:
        return ThresholdSchedule((0.1,))
    return ThresholdSchedule(THRESHOLD_GRID[:T])


@dataclass(frozen=True)
class PseudoLabelSet:
    indices: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray
    threshold: float

    def __len__(self) -> int:
        return int(self.indices.size)


def select_pseudo_labels(probs, threshold: float) -> PseudoLabelSet:
    """Keep rows whose top probability is strictly above ``threshold``.

    ``np.argmax`` returns the first maximal index, which fixes the tie-break
    at the lowest class index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    conf = probs.max(axis=1)
    keep = np.flatnonzero(conf > threshold)
    labels = np.argmax(probs[keep], axis=1) if keep.size else np.zeros(0, dtype=np.int64)
    return PseudoLabelSet(keep, labels.astype(np.int64), conf[keep], float(threshold))
