"""Classification and discrepancy losses with analytic gradients.

Every discrepancy loss takes two feature matrices (rows are samples) and
returns a ``PairLoss`` holding the value and the gradient w.r.t. each
matrix. The full objective lives in ``total_loss``, which threads those
gradients back through the classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, NamedTuple, Optional

import numpy as np

from . import network as nn
from .errors import (
    EmptyBatch,
    InsufficientClassSamples,
    MissingLabels,
    NoValidClasses,
    RowNotNormalized,
    ShapeMismatch,
)
from .moments import (
    DEFAULT_KAPPA,
    MIN_CLASS_COUNT,
    FeatureBatch,
    batch_stats,
    categorical_kernel,
    covariance_backward,
    gaussian_kernel,
)
from .sphere import log_map, project_to_sphere

FEATURE = "feature"
MOMENT = "moment"
EMBEDDING_MODES = (FEATURE, MOMENT)
DISCREPANCIES = ("sphere", "coral", "mmd")

DEFAULT_ALPHA = 0.1
DEFAULT_BETA = 0.01


class PairLoss(NamedTuple):
    value: float
    grad_s: np.ndarray
    grad_t: np.ndarray
    kernel_value: float = float("nan")


class CategoricalLoss(NamedTuple):
    value: float
    grad_s: np.ndarray
    grad_t: np.ndarray
    valid_class_count: int
    kernel_values: Dict[int, float]


def _data(b) -> np.ndarray:
    if isinstance(b, FeatureBatch):
        return b.data
    x = np.asarray(b, dtype=np.float64)
    return x.reshape(1, -1) if x.ndim == 1 else x


def _check_mode(mode: str) -> None:
    if mode not in EMBEDDING_MODES:
        raise ValueError(f"unknown embedding mode {mode!r}")


# ---------------------------------------------------------------------------
# classification


def cross_entropy_loss(probs, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the pre-softmax logits.

    The gradient is that of the fused softmax + cross-entropy, ``(probs - onehot) / N``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise EmptyBatch("cross entropy needs at least one row")
    if labels.shape[0] != probs.shape[0]:
        raise ShapeMismatch(f"{labels.shape[0]} labels for {probs.shape[0]} rows")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise RowNotNormalized("probability rows must sum to 1")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError("label out of range")
    n = probs.shape[0]
    picked = probs[np.arange(n), labels]
    value = -float(np.mean(np.log(picked)))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return value, grad / n


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of the row softmax."""
    inner = np.sum(grad_probs * probs, axis=1, keepdims=True)
    return probs * (grad_probs - inner)


# ---------------------------------------------------------------------------
# spherical kernel geodesic loss


def _embedding_source(x: np.ndarray, mode: str) -> np.ndarray:
    if mode == FEATURE:
        return x
    if x.shape[0] < 2:
        raise EmptyBatch("moment embedding needs at least two rows")
    return batch_stats(x).cov


def sphere_embed(b, kernel_value: float, mode: str = FEATURE) -> np.ndarray:
    """Scale the batch (feature mode) or its covariance (moment mode) by the
    kernel value and project onto the unit sphere."""
    _check_mode(mode)
    x = _data(b)
    if x.shape[0] < 1:
        raise EmptyBatch("cannot embed an empty batch")
    return project_to_sphere(_embedding_source(x, mode) * kernel_value)


def _sphere_loss(xs: np.ndarray, xt: np.ndarray, kernel_value: float, mode: str) -> PairLoss:
    src_s = _embedding_source(xs, mode)
    src_t = _embedding_source(xt, mode)
    if src_s.shape != src_t.shape:
        raise ShapeMismatch(f"embeddings differ in shape: {src_s.shape} vs {src_t.shape}")
    flat_s = src_s.reshape(-1) * kernel_value
    flat_t = src_t.reshape(-1) * kernel_value
    p = project_to_sphere(flat_s)
    q = project_to_sphere(flat_t)
    v = log_map(p, q).vec
    value = float(v @ v)
    if value == 0.0:
        return PairLoss(0.0, np.zeros_like(xs), np.zeros_like(xt), kernel_value)

    c = float(np.clip(p @ q, -1.0, 1.0))
    theta = np.arccos(c)
    sin_theta = np.sqrt(max(1.0 - c * c, 0.0))
    # d(theta^2)/dc = -2 theta / sin(theta), which tends to -2 as theta -> 0
    dval_dc = -2.0 if theta < 1e-6 else -2.0 * theta / sin_theta
    g_p = dval_dc * q
    g_q = dval_dc * p
    # the scalar kernel cancels inside the projection, so the loss has no
    # gradient through it; only the normalisation Jacobian remains
    g_flat_s = kernel_value * (g_p - p * (p @ g_p)) / np.linalg.norm(flat_s)
    g_flat_t = kernel_value * (g_q - q * (q @ g_q)) / np.linalg.norm(flat_t)
    if mode == FEATURE:
        grad_s = g_flat_s.reshape(xs.shape)
        grad_t = g_flat_t.reshape(xt.shape)
    else:
        d = xs.shape[1]
        grad_s = covariance_backward(xs, g_flat_s.reshape(d, d))
        grad_t = covariance_backward(xt, g_flat_t.reshape(d, d))
    return PairLoss(value, grad_s, grad_t, kernel_value)


def sphere_kernel_geodesic_loss(
    b_s, b_t, kappa: float = DEFAULT_KAPPA, mode: str = FEATURE
) -> PairLoss:
    """Squared length of the Log map between the sphere embeddings of two batches.

    Both batches are scaled by the covariance-gap kernel before projection.
    """
    _check_mode(mode)
    xs, xt = _data(b_s), _data(b_t)
    if xs.shape[1] != xt.shape[1]:
        raise ShapeMismatch(f"feature widths differ: {xs.shape[1]} vs {xt.shape[1]}")
    if mode == FEATURE and xs.shape != xt.shape:
        raise ShapeMismatch(f"feature mode needs equal batch shapes: {xs.shape} vs {xt.shape}")
    k = gaussian_kernel(batch_stats(xs).cov, batch_stats(xt).cov, kappa)
    return _sphere_loss(xs, xt, k, mode)


# ---------------------------------------------------------------------------
# baseline discrepancies


def coral_loss(b_s, b_t) -> PairLoss:
    """``||cov_s - cov_t||_F^2 / (4 d^2)``."""
    xs, xt = _data(b_s), _data(b_t)
    if xs.shape[1] != xt.shape[1]:
        raise ShapeMismatch(f"feature widths differ: {xs.shape[1]} vs {xt.shape[1]}")
    d = xs.shape[1]
    gap = batch_stats(xs).cov - batch_stats(xt).cov
    scale = 1.0 / (4.0 * d * d)
    g = 2.0 * scale * gap
    return PairLoss(
        scale * float(np.sum(gap * gap)),
        covariance_backward(xs, g),
        covariance_backward(xt, -g),
    )


def linear_mmd_loss(b_s, b_t) -> PairLoss:
    """Squared distance between batch means."""
    xs, xt = _data(b_s), _data(b_t)
    if xs.shape[1] != xt.shape[1]:
        raise ShapeMismatch(f"feature widths differ: {xs.shape[1]} vs {xt.shape[1]}")
    gap = xs.mean(axis=0) - xt.mean(axis=0)
    return PairLoss(
        float(gap @ gap),
        np.broadcast_to(2.0 * gap / xs.shape[0], xs.shape).copy(),
        np.broadcast_to(-2.0 * gap / xt.shape[0], xt.shape).copy(),
    )


def marginal_loss(discrepancy: str, xs, xt, kappa: float, mode: str) -> PairLoss:
    if discrepancy == "sphere":
        return sphere_kernel_geodesic_loss(xs, xt, kappa, mode)
    if discrepancy == "coral":
        return coral_loss(xs, xt)
    if discrepancy == "mmd":
        return linear_mmd_loss(xs, xt)
    raise ValueError(f"unknown discrepancy {discrepancy!r}")


# ---------------------------------------------------------------------------
# class-conditional losses


def categorical_loss(
    b_s: FeatureBatch,
    b_t: FeatureBatch,
    discrepancy: str = "sphere",
    kappa: float = DEFAULT_KAPPA,
    mode: str = FEATURE,
    rng: Optional[np.random.Generator] = None,
    min_class_count: int = MIN_CLASS_COUNT,
) -> CategoricalLoss:
    """Average a discrepancy over the classes present in both labeled batches.

    Classes with fewer than ``min_class_count`` rows on either side are
    skipped and do not count towards the average. In feature mode the two
    class slices are subsampled (without replacement, order kept) down to
    the smaller slice so the flattened embeddings have equal length.
    """
    _check_mode(mode)
    if b_s.labels is None or b_t.labels is None:
        raise MissingLabels("categorical loss needs labels on both batches")
    xs, xt = b_s.data, b_t.data
    classes = np.intersect1d(b_s.labels, b_t.labels)
    grad_s = np.zeros_like(xs)
    grad_t = np.zeros_like(xt)
    total = 0.0
    kernels: Dict[int, float] = {}
    per_class = []
    for c in classes:
        c = int(c)
        try:
            k = categorical_kernel(b_s, b_t, c, kappa, min_class_count)
        except InsufficientClassSamples:
            continue
        rows_s = np.flatnonzero(b_s.labels == c)
        rows_t = np.flatnonzero(b_t.labels == c)
        if discrepancy == "sphere" and mode == FEATURE:
            m = min(rows_s.size, rows_t.size)
            if rng is None:
                rng = np.random.default_rng(0)
            if rows_s.size > m:
                rows_s = np.sort(rng.choice(rows_s, size=m, replace=False))
            if rows_t.size > m:
                rows_t = np.sort(rng.choice(rows_t, size=m, replace=False))
        if discrepancy == "sphere":
            res = _sphere_loss(xs[rows_s], xt[rows_t], k, mode)
        else:
            res = marginal_loss(discrepancy, xs[rows_s], xt[rows_t], kappa, mode)
        kernels[c] = k
        per_class.append((rows_s, rows_t, res))
    if not per_class:
        raise NoValidClasses("no class has enough rows in both batches")
    n_valid = len(per_class)
    for rows_s, rows_t, res in per_class:
        total += res.value
        grad_s[rows_s] += res.grad_s / n_valid
        grad_t[rows_t] += res.grad_t / n_valid
    return CategoricalLoss(total / n_valid, grad_s, grad_t, n_valid, kernels)


def categorical_sphere_kernel_geodesic_loss(
    b_s: FeatureBatch,
    b_t: FeatureBatch,
    kappa: float = DEFAULT_KAPPA,
    mode: str = FEATURE,
    rng: Optional[np.random.Generator] = None,
    min_class_count: int = MIN_CLASS_COUNT,
) -> CategoricalLoss:
    return categorical_loss(b_s, b_t, "sphere", kappa, mode, rng, min_class_count)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class TensorCheck:
    name: str
    coords_checked: int
    max_rel_error: float
    max_abs_analytic: float
    max_abs_numeric: float
    degenerate: bool

    def passed(self, tol: float) -> bool:
        return self.degenerate or self.max_rel_error <= tol


@dataclass
class GradCheckReport:
    tensors: Dict[str, TensorCheck] = field(default_factory=dict)
    tolerance: float = 1e-5

    @property
    def max_rel_error(self) -> float:
        errs = [t.max_rel_error for t in self.tensors.values() if not t.degenerate]
        return max(errs, default=0.0)

    @property
    def passed(self) -> bool:
        return all(t.passed(self.tolerance) for t in self.tensors.values())

    def lines(self):
        for t in self.tensors.values():
            flag = "degenerate" if t.degenerate else ("ok" if t.passed(self.tolerance) else "FAIL")
            yield (
                f"{t.name:<14} coords={t.coords_checked:<4d} "
                f"max_rel_err={t.max_rel_error:.3e} {flag}"
            )


DEGENERATE_ABS = 1e-8
ZERO_COORD_ABS = 1e-10


def gradient_check(
    fn: Callable[[], float],
    tensors: Dict[str, np.ndarray],
    analytic: Dict[str, np.ndarray],
    eps: float = 1e-4,
    tolerance: float = 1e-5,
    min_coords: int = 64,
    rng: Optional[np.random.Generator] = None,
    smooth: Optional[Callable[[], bool]] = None,
    zero_floor: float = ZERO_COORD_ABS,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``fn`` evaluates the loss reading the arrays in ``tensors``, which are
    perturbed in place one coordinate at a time and restored afterwards.
    A tensor whose analytic and numeric gradients are both below 1e-8 in
    magnitude is flagged degenerate and excluded from the verdict.

    Individual coordinates are skipped when both gradients are below
    ``zero_floor`` (structurally zero, only round-off left in the
    difference quotient), or when ``smooth`` is given and returns false
    right after either perturbed evaluation (the step crossed a kink).
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-6, 1e-2]")
    rng = np.random.default_rng(0) if rng is None else rng
    report = GradCheckReport(tolerance=tolerance)
    for name, arr in tensors.items():
        if arr.dtype != np.float64:
            raise TypeError(f"{name}: gradient checks require float64")
        ga = np.asarray(analytic[name]).reshape(-1)
        flat = arr.reshape(-1)  # view, so writes reach fn
        if flat.size <= min_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=min_coords, replace=False))
        max_rel = 0.0
        max_a = 0.0
        max_n = 0.0
        checked = 0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn()
            ok = smooth is None or smooth()
            flat[i] = orig - eps
            f_minus = fn()
            ok = ok and (smooth is None or smooth())
            flat[i] = orig
            if not ok:
                continue
            num = (f_plus - f_minus) / (2.0 * eps)
            a = ga[i]
            if abs(a) < zero_floor and abs(num) < zero_floor:
                continue
            checked += 1
            denom = max(abs(a), abs(num), 1e-8)
            max_rel = max(max_rel, abs(a - num) / denom)
            max_a = max(max_a, abs(a))
            max_n = max(max_n, abs(num))
        degenerate = max_a < DEGENERATE_ABS and max_n < DEGENERATE_ABS
        report.tensors[name] = TensorCheck(name, checked, max_rel, max_a, max_n, degenerate)
    return report


# ---------------------------------------------------------------------------
# full objective


@dataclass
class LossBreakdown:
    l_s: float
    l_t: float
    l_k: float
    l_k_cat: float
    total: float
    divergence_proxy: float
    kernel_value: float
    valid_class_count: int
    alpha: float
    beta: float
    mode: str = FEATURE


@dataclass
class ObjectiveSpec:
    """Weights and switches for one evaluation of the full objective."""

    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    kappa: float = DEFAULT_KAPPA
    mode: str = FEATURE
    features_for_loss: str = "softmax"
    use_K: bool = True
    use_T: bool = True
    use_C: bool = True
    discrepancy: str = "sphere"
    min_class_count: int = MIN_CLASS_COUNT
    joint_forward: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        _check_mode(self.mode)
        if self.features_for_loss not in ("softmax", "logits"):
            raise ValueError(f"features_for_loss must be softmax or logits, got {self.features_for_loss!r}")
        if self.discrepancy not in DISCREPANCIES:
            raise ValueError(f"unknown discrepancy {self.discrepancy!r}")


def total_loss(
    net: "nn.Network",
    xs: np.ndarray,
    ys: np.ndarray,
    xt: Optional[np.ndarray],
    xp: Optional[np.ndarray],
    yp: Optional[np.ndarray],
    spec: ObjectiveSpec,
    rng: Optional[np.random.Generator] = None,
    update_stats: bool = True,
):
    """Evaluate ``L_S + L_T + alpha*L_K + beta*mean_c L_K^c`` and its parameter gradients.

    ``xs``/``ys`` is the labeled source batch, ``xt`` the unlabeled target
    batch paired with it, and ``xp``/``yp`` a pseudo-labeled target batch
    (may be empty). Each group gets its own training-mode pass, so batch
    statistics never mix domains (``spec.joint_forward`` concatenates them
    instead). Returns ``(LossBreakdown, grads)`` where ``grads`` mirrors the
    network's parameter list.
    """
    ys = np.asarray(ys, dtype=np.int64)
    use_k = spec.use_K and xt is not None
    has_pseudo = xp is not None and len(xp) > 0
    use_t = spec.use_T and has_pseudo
    use_c = spec.use_C and has_pseudo

    groups = [xs]
    if use_k:
        groups.append(xt)
    if use_t or use_c:
        groups.append(xp)
    if spec.joint_forward:
        outs = [nn.forward(net, np.concatenate(groups, axis=0), training=True, update_stats=update_stats)]
    else:
        outs = [nn.forward(net, g, training=True, update_stats=update_stats) for g in groups]
    logits = np.concatenate([o.logits for o in outs], axis=0)
    probs = np.concatenate([o.probs for o in outs], axis=0)

    ns = xs.shape[0]
    nt = xt.shape[0] if use_k else 0
    sl_s = slice(0, ns)
    sl_t = slice(ns, ns + nt)
    sl_p = slice(ns + nt, logits.shape[0])
    feats = probs if spec.features_for_loss == "softmax" else logits

    g_logits = np.zeros_like(logits)
    g_feats = np.zeros_like(feats)

    l_s, g = cross_entropy_loss(probs[sl_s], ys)
    g_logits[sl_s] += g

    l_t = 0.0
    if use_t:
        l_t, g = cross_entropy_loss(probs[sl_p], yp)
        g_logits[sl_p] += g

    l_k = 0.0
    kernel_value = float("nan")
    alpha = spec.alpha if use_k else 0.0
    if use_k:
        res = marginal_loss(spec.discrepancy, feats[sl_s], feats[sl_t], spec.kappa, spec.mode)
        l_k = res.value
        kernel_value = res.kernel_value
        g_feats[sl_s] += alpha * res.grad_s
        g_feats[sl_t] += alpha * res.grad_t

    l_kc = 0.0
    n_valid = 0
    beta = spec.beta if use_c else 0.0
    if use_c:
        try:
            cres = categorical_loss(
                FeatureBatch(feats[sl_s], ys),
                FeatureBatch(feats[sl_p], yp),
                spec.discrepancy,
                spec.kappa,
                spec.mode,
                rng,
                spec.min_class_count,
            )
        except NoValidClasses:
            beta = 0.0
        else:
            l_kc = cres.value
            n_valid = cres.valid_class_count
            g_feats[sl_s] += beta * cres.grad_s
            g_feats[sl_p] += beta * cres.grad_t

    if spec.features_for_loss == "softmax":
        g_logits += softmax_backward(probs, g_feats)
    else:
        g_logits += g_feats

    grads = None
    offset = 0
    for o in outs:
        n = o.logits.shape[0]
        g, _ = nn.backward(net, o.cache, g_logits[offset : offset + n])
        grads = g if grads is None else [a + b for a, b in zip(grads, g)]
        offset += n
    total = l_s + l_t + alpha * l_k + beta * l_kc
    breakdown = LossBreakdown(
        l_s=l_s,
        l_t=l_t,
        l_k=l_k,
        l_k_cat=l_kc,
        total=total,
        divergence_proxy=l_k + l_kc,
        kernel_value=kernel_value,
        valid_class_count=n_valid,
        alpha=alpha,
        beta=beta,
        mode=spec.mode,
    )
    return breakdown, grads
