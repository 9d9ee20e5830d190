"""Batch and class-conditional Gaussian statistics plus the covariance-gap RBF kernel."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyBatch,
    InsufficientClassSamples,
    MissingLabels,
    NonPositiveKappa,
)

DEFAULT_KAPPA = 0.1
MIN_CLASS_COUNT = 2
KERNEL_FLOOR = 1e-300


@dataclass(frozen=True)
class FeatureBatch:
    data: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data.reshape(1, -1)
        if data.ndim != 2:
            raise DimensionMismatch(f"feature batch must be 2-D, got shape {data.shape}")
        object.__setattr__(self, "data", data)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != data.shape[0]:
                raise DimensionMismatch(
                    f"{labels.shape[0]} labels for {data.shape[0]} rows"
                )
            if labels.size and labels.min() < 0:
                raise ValueError("labels must be non-negative")
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray


def _as_matrix(b) -> np.ndarray:
    if isinstance(b, FeatureBatch):
        return b.data
    return np.asarray(b, dtype=np.float64)


def batch_stats(b) -> GaussianStats:
    """Column mean and population (1/N) covariance of a batch.

    Rows are summed in lexicographic order, so any row permutation of the
    batch gives bit-identical statistics.
    """
    x = _as_matrix(b)
    if x.ndim != 2 or x.shape[0] < 1:
        raise EmptyBatch("batch_stats needs at least one row")
    x = x[np.lexsort(x.T[::-1])]
    mu = x.mean(axis=0)
    xc = x - mu
    return GaussianStats(mu, xc.T @ xc / x.shape[0])


def log_gaussian_kernel(sigma_s, sigma_t, kappa: float = DEFAULT_KAPPA) -> float:
    """``-kappa * ||sigma_s - sigma_t||_F^2``."""
    sigma_s = np.asarray(sigma_s, dtype=np.float64)
    sigma_t = np.asarray(sigma_t, dtype=np.float64)
    if sigma_s.shape != sigma_t.shape:
        raise DimensionMismatch(f"covariances {sigma_s.shape} vs {sigma_t.shape}")
    if not kappa > 0:
        raise NonPositiveKappa(f"kappa must be positive, got {kappa!r}")
    gap = sigma_s - sigma_t
    return -kappa * float(np.sum(gap * gap))


def gaussian_kernel(sigma_s, sigma_t, kappa: float = DEFAULT_KAPPA) -> float:
    """``exp(-kappa * ||sigma_s - sigma_t||_F^2)``, floored at 1e-300.

    Returns exactly 1.0 only for identical covariances; a nonzero gap too
    small to register in ``exp`` still yields the largest double below 1.
    """
    log_k = log_gaussian_kernel(sigma_s, sigma_t, kappa)
    if log_k == 0.0:
        return 1.0
    return float(np.clip(np.exp(log_k), KERNEL_FLOOR, np.nextafter(1.0, 0.0)))


def class_slice(b: FeatureBatch, c: int) -> FeatureBatch:
    if b.labels is None:
        raise MissingLabels("class_slice requires a labeled batch")
    mask = b.labels == c
    return FeatureBatch(b.data[mask].reshape(-1, b.dim), b.labels[mask])


def categorical_kernel(
    b_s: FeatureBatch,
    b_t: FeatureBatch,
    c: int,
    kappa: float = DEFAULT_KAPPA,
    min_class_count: int = MIN_CLASS_COUNT,
) -> float:
    s = class_slice(b_s, c)
    t = class_slice(b_t, c)
    if s.n < min_class_count or t.n < min_class_count:
        raise InsufficientClassSamples(
            f"class {c}: {s.n} source / {t.n} target rows (< {min_class_count})"
        )
    return gaussian_kernel(batch_stats(s).cov, batch_stats(t).cov, kappa)


def covariance_backward(x: np.ndarray, grad_cov: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the population covariance back to the batch rows.

    The mean-subtraction term drops out because centred rows sum to zero.
    """
    xc = x - x.mean(axis=0)
    return xc @ (grad_cov + grad_cov.T) / x.shape[0]
