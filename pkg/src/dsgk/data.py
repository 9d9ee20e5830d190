"""Domain datasets: synthetic shifted tasks, feature CSV files, paired batch sampling."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

from .errors import BatchTooLarge, InconsistentWidth, InvalidSpec, ParseError
from .moments import FeatureBatch

DEFAULT_BATCH_SIZE = 64


@dataclass(frozen=True)
class DomainDataset:
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    name: str = "source"

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", x)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if y.shape[0] != x.shape[0]:
                raise ValueError(f"{y.shape[0]} labels for {x.shape[0]} rows")
            object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def labeled(self) -> bool:
        return self.labels is not None and bool(np.all(self.labels >= 0))

    def unlabeled(self) -> "DomainDataset":
        """A view with labels removed, for code paths that must not see them."""
        return replace(self, labels=None)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    num_classes: int = 4
    dim: int = 10
    samples_per_class: int = 200
    rotation_degrees: float = 30.0
    translation_scale: float = 1.0
    class_separation: float = 1.3
    noise_scale: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise InvalidSpec("num_classes must be at least 2")
        if self.dim < 2:
            raise InvalidSpec("dim must be at least 2")
        if self.samples_per_class < 1:
            raise InvalidSpec("samples_per_class must be positive")
        if self.noise_scale < 0 or self.class_separation < 0 or self.translation_scale < 0:
            raise InvalidSpec("scales must be non-negative")


def _class_means(spec: SyntheticTaskSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.num_classes <= spec.dim:
        # vertices of a regular simplex: scaled standard basis vectors
        means = np.eye(spec.num_classes, spec.dim)
    else:
        means = rng.normal(size=(spec.num_classes, spec.dim))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
    return spec.class_separation * means


def _draw(spec, means, rng) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    x = means[labels] + spec.noise_scale * rng.normal(size=(labels.size, spec.dim))
    order = rng.permutation(labels.size)
    return x[order], labels[order]


def generate_task(spec: SyntheticTaskSpec) -> Tuple[DomainDataset, DomainDataset]:
    """Source and target domains sharing class-conditional laws up to a rigid shift.

    The target is drawn fresh from the same mixture, translated by
    ``translation_scale`` along a fixed random unit direction and then
    rotated by ``rotation_degrees`` in the plane of the first two
    coordinates. Target labels are kept for evaluation.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means = _class_means(spec, rng)
    direction = rng.normal(size=spec.dim)
    direction /= np.linalg.norm(direction)

    xs, ys = _draw(spec, means, rng)
    xt, yt = _draw(spec, means, rng)
    xt = xt + spec.translation_scale * direction
    a = np.deg2rad(spec.rotation_degrees)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    xt[:, :2] = xt[:, :2] @ rot.T
    return DomainDataset(xs, ys, "source"), DomainDataset(xt, yt, "target")


# ---------------------------------------------------------------------------
# feature CSV: "label,f0,...,f{d-1}" header, one sample per row, label -1 = unlabeled


def save_features(ds: DomainDataset, path) -> None:
    n, d = ds.features.shape
    labels = ds.labels if ds.labels is not None else np.full(n, -1, dtype=np.int64)
    lines = ["label," + ",".join(f"f{j}" for j in range(d))]
    for y, row in zip(labels, ds.features):
        lines.append(f"{int(y)}," + ",".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_features(path, name: Optional[str] = None) -> DomainDataset:
    """Parse a feature CSV. Rows labeled -1 are unlabeled.

    If no row carries a label the dataset has ``labels=None``.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty file", 1)
    header = lines[0].split(",")
    if header[0] != "label" or len(header) < 2:
        raise ParseError("header must start with 'label' followed by feature columns", 1)
    expected = [f"f{j}" for j in range(len(header) - 1)]
    if header[1:] != expected:
        raise ParseError("feature columns must be named f0, f1, ...", 1)
    d = len(expected)
    labels = np.empty(len(lines) - 1, dtype=np.int64)
    feats = np.empty((len(lines) - 1, d), dtype=np.float64)
    for k, line in enumerate(lines[1:]):
        lineno = k + 2
        cells = line.split(",")
        if len(cells) != d + 1:
            raise InconsistentWidth(f"expected {d} features, found {len(cells) - 1}", lineno)
        try:
            labels[k] = int(cells[0])
            feats[k] = [float(c) for c in cells[1:]]
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if labels[k] < -1:
            raise ParseError(f"label {labels[k]} is below -1", lineno)
        if not np.all(np.isfinite(feats[k])):
            raise ParseError("non-finite feature value", lineno)
    has_labels = bool(np.any(labels >= 0))
    return DomainDataset(feats, labels if has_labels else None, name or path.stem)


# ---------------------------------------------------------------------------
# paired sampling


class _Stream:
    """Endless shuffled index stream; reshuffles when a full batch no longer fits."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def reshuffle(self) -> None:
        self.perm = self.rng.permutation(self.n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        if self.pos + k > self.n:
            self.reshuffle()
        out = self.perm[self.pos : self.pos + k]
        self.pos += k
        return out


class PairedBatchSampler:
    """Draws equal-size source/target batches.

    An epoch is ``max(N_S, N_T) // batch_size`` steps. The larger domain is
    reshuffled at each epoch and its leftover rows dropped; the smaller one
    wraps around with a reshuffle whenever it runs out.
    """

    def __init__(self, source: DomainDataset, target: DomainDataset,
                 batch_size: int = DEFAULT_BATCH_SIZE, seed: int = 0):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        if batch_size > min(len(source), len(target)):
            raise BatchTooLarge(
                f"batch_size {batch_size} exceeds the smaller domain ({min(len(source), len(target))} rows)"
            )
        self.source = source
        self.target = target
        self.batch_size = batch_size
        rng = np.random.default_rng(seed)
        self._s = _Stream(len(source), rng)
        self._t = _Stream(len(target), rng)
        self._larger = self._s if len(source) >= len(target) else self._t
        self._started = False

    @property
    def steps_per_epoch(self) -> int:
        return max(len(self.source), len(self.target)) // self.batch_size

    def epoch_indices(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        if self._started:
            self._larger.reshuffle()
        self._started = True
        for _ in range(self.steps_per_epoch):
            yield self._s.take(self.batch_size), self._t.take(self.batch_size)

    def epoch(self) -> Iterator[Tuple[FeatureBatch, FeatureBatch]]:
        ys = self.source.labels
        for i_s, i_t in self.epoch_indices():
            yield (
                FeatureBatch(self.source.features[i_s], None if ys is None else ys[i_s]),
                FeatureBatch(self.target.features[i_t]),
            )


def paired_batches(source: DomainDataset, target: DomainDataset,
                   batch_size: int = DEFAULT_BATCH_SIZE, seed: int = 0,
                   epochs: Optional[int] = None) -> Iterator[Tuple[FeatureBatch, FeatureBatch]]:
    """Yield paired batches for ``epochs`` epochs (forever if ``None``).

    Target batches never carry labels.
    """
    sampler = PairedBatchSampler(source, target, batch_size, seed)
    e = 0
    while epochs is None or e < epochs:
        yield from sampler.epoch()
        e += 1
