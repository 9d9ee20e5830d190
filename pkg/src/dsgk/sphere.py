"""Closed-form Riemannian operations on the unit hypersphere S^n.

Points are plain float64 numpy vectors; tangent vectors carry their base
point so that the Exp map can refuse a vector attached somewhere else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import Antipodal, BaseMismatch, DimensionMismatch, ZeroNorm

ZERO_NORM_TOL = 1e-12
ANTIPODAL_TOL = 1e-6
SMALL_ANGLE = 1e-8
BASE_TOL = 1e-9


@dataclass(frozen=True)
class TangentVector:
    base: np.ndarray
    vec: np.ndarray

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vec))


def project_to_sphere(x) -> np.ndarray:
    """Flatten ``x`` and scale it to unit Euclidean norm."""
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise ZeroNorm("cannot project an empty array onto the sphere")
    nrm = np.linalg.norm(flat)
    if not nrm > ZERO_NORM_TOL:
        raise ZeroNorm(f"norm {nrm:.3g} is too small to project")
    return flat / nrm


def _check_pair(p: np.ndarray, q: np.ndarray) -> None:
    if p.shape != q.shape:
        raise DimensionMismatch(f"points have shapes {p.shape} and {q.shape}")


def _cos_angle(p: np.ndarray, q: np.ndarray) -> float:
    # unit-vector dot products can overshoot 1 by an ulp
    return float(np.clip(np.dot(p, q), -1.0, 1.0))


def geodesic_distance(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_pair(p, q)
    return float(np.arccos(_cos_angle(p, q)))


def log_map(p, q) -> TangentVector:
    """Tangent vector at ``p`` pointing along the geodesic to ``q``.

    Its length is the geodesic distance. Raises ``Antipodal`` when
    ``<p, q>`` is within 1e-6 of -1, where the direction is undefined.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_pair(p, q)
    c = _cos_angle(p, q)
    if c <= -1.0 + ANTIPODAL_TOL:
        raise Antipodal(f"<p,q> = {c!r}; log map direction undefined")
    theta = np.arccos(c)
    resid = q - p * c
    rnorm = np.linalg.norm(resid)
    if rnorm <= ZERO_NORM_TOL and theta <= 1e-6:
        return TangentVector(p, np.zeros_like(p))
    if rnorm == 0.0:
        # theta above 1e-6 with an exactly vanishing residual only happens
        # when p and q are not unit vectors
        raise ZeroNorm("log map residual vanished; inputs are not unit vectors")
    return TangentVector(p, theta * resid / rnorm)


def exp_map(p, v: TangentVector | np.ndarray) -> np.ndarray:
    """Follow the geodesic from ``p`` with initial velocity ``v`` for unit time."""
    p = np.asarray(p, dtype=np.float64)
    if isinstance(v, TangentVector):
        if v.base.shape != p.shape or np.max(np.abs(v.base - p)) > BASE_TOL:
            raise BaseMismatch("tangent vector is attached to a different point")
        vec = v.vec
    else:
        vec = np.asarray(v, dtype=np.float64)
    if vec.shape != p.shape:
        raise DimensionMismatch(f"point {p.shape} vs tangent {vec.shape}")
    theta = float(np.linalg.norm(vec))
    if theta == 0.0:
        return p.copy()
    if theta < SMALL_ANGLE:
        sinc = 1.0 - theta * theta / 6.0
    else:
        sinc = np.sin(theta) / theta
    return np.cos(theta) * p + sinc * vec
