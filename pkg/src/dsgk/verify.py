"""Randomised self-checks behind the ``gradcheck`` and ``geomtest`` verbs."""

from __future__ import annotations

from typing import Callable, Dict, Iterator, List, Tuple

import numpy as np

from . import network as nn
from .losses import (
    FEATURE,
    MOMENT,
    GradCheckReport,
    ObjectiveSpec,
    categorical_sphere_kernel_geodesic_loss,
    coral_loss,
    cross_entropy_loss,
    gradient_check,
    linear_mmd_loss,
    sphere_kernel_geodesic_loss,
    total_loss,
)
from .moments import FeatureBatch
from .sphere import exp_map, log_map

GEOMETRY_DIMS = (3, 16, 100)
MIN_COSINE = -0.99

GEOMETRY_LIMITS = {
    "roundtrip": 1e-9,
    "tangency": 1e-10,
    "norm_vs_arccos": 1e-10,
    "exp_norm": 1e-9,
}

GRADCHECK_NET = (16, 8, 4)
GRADCHECK_INPUT_DIM = 10


# ---------------------------------------------------------------------------
# geometry


def _random_pair(d: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    while True:
        p = rng.normal(size=d)
        q = rng.normal(size=d)
        p /= np.linalg.norm(p)
        q /= np.linalg.norm(q)
        if p @ q > MIN_COSINE:
            return p, q


def geometry_suite(pairs: int = 10_000, seed: int = 0, dims=GEOMETRY_DIMS) -> Dict[str, float]:
    """Worst-case errors of the Log/Exp identities over random unit-vector pairs.

    Pairs are split evenly over ``dims``; nearly antipodal pairs are redrawn.
    """
    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(GEOMETRY_LIMITS, 0.0)
    for k in range(pairs):
        p, q = _random_pair(dims[k % len(dims)], rng)
        v = log_map(p, q)
        back = exp_map(p, v)
        theta = np.arccos(np.clip(p @ q, -1.0, 1.0))
        worst["roundtrip"] = max(worst["roundtrip"], float(np.max(np.abs(back - q))))
        worst["tangency"] = max(worst["tangency"], abs(float(p @ v.vec)))
        worst["norm_vs_arccos"] = max(worst["norm_vs_arccos"], abs(v.norm - theta))
        worst["exp_norm"] = max(worst["exp_norm"], abs(float(np.linalg.norm(back)) - 1.0))
    return worst


def geometry_passes(res: Dict[str, float]) -> bool:
    return all(res[k] <= lim for k, lim in GEOMETRY_LIMITS.items())


# ---------------------------------------------------------------------------
# gradients


def _labels_with_pairs(n: int, c: int, rng) -> np.ndarray:
    # every class appears at least twice so class statistics exist
    y = np.concatenate([np.repeat(np.arange(c), 2), rng.integers(0, c, size=n - 2 * c)])
    return rng.permutation(y)


def _ce_case(rng, n=8, c=4):
    z = rng.normal(size=(n, c))
    y = rng.integers(0, c, size=n)

    def fn():
        return cross_entropy_loss(nn.softmax(z), y)[0]

    return fn, {"logits": z}, {"logits": cross_entropy_loss(nn.softmax(z), y)[1]}, None


def _pair_case(loss: Callable, n=8, d=4):
    def build(rng):
        xs = rng.normal(size=(n, d))
        xt = rng.normal(size=(n, d))

        def fn():
            return loss(xs, xt).value

        res = loss(xs, xt)
        return fn, {"b_s": xs, "b_t": xt}, {"b_s": res.grad_s, "b_t": res.grad_t}, None

    return build


def _categorical_case(mode: str, n=16, d=4, c=4):
    def build(rng):
        xs = rng.normal(size=(n, d))
        xt = rng.normal(size=(n, d))
        ys = _labels_with_pairs(n, c, rng)
        yt = _labels_with_pairs(n, c, rng)
        sub_seed = int(rng.integers(2**31))

        def run():
            return categorical_sphere_kernel_geodesic_loss(
                FeatureBatch(xs, ys), FeatureBatch(xt, yt), 0.1, mode, np.random.default_rng(sub_seed)
            )

        res = run()
        return (lambda: run().value), {"b_s": xs, "b_t": xt}, {"b_s": res.grad_s, "b_t": res.grad_t}, None

    return build


def _objective_case(mode: str, n=16):
    def build(rng):
        c = GRADCHECK_NET[-1]
        net = nn.init_network(GRADCHECK_INPUT_DIM, GRADCHECK_NET, seed=int(rng.integers(2**31)))
        # move batch-norm affine parameters off their identity initialisation
        for layer in net.layers:
            if layer.norm is not None:
                layer.norm.gamma[:] = rng.uniform(0.5, 1.5, size=layer.norm.gamma.shape)
                layer.norm.beta[:] = rng.normal(scale=0.3, size=layer.norm.beta.shape)
            layer.bias[:] = rng.normal(scale=0.1, size=layer.bias.shape)
        xs = rng.normal(size=(n, GRADCHECK_INPUT_DIM))
        xt = rng.normal(size=(n, GRADCHECK_INPUT_DIM))
        xp = rng.normal(size=(n, GRADCHECK_INPUT_DIM))
        ys = _labels_with_pairs(n, c, rng)
        yp = _labels_with_pairs(n, c, rng)
        spec = ObjectiveSpec(mode=mode)
        sub_seed = int(rng.integers(2**31))

        def run():
            return total_loss(net, xs, ys, xt, xp, yp, spec, np.random.default_rng(sub_seed),
                              update_stats=False)

        def masks():
            return [[m.copy() for m in nn.forward(net, x, training=True, update_stats=False).cache.relu_mask
                     if m is not None] for x in (xs, xt, xp)]

        base_masks = masks()

        def smooth():
            now = masks()
            return all(np.array_equal(a, b) for ga, gb in zip(base_masks, now) for a, b in zip(ga, gb))

        _, grads = run()
        tensors = dict(net.parameters())
        analytic = {name: g for (name, _), g in zip(net.parameters(), grads)}
        return (lambda: run()[0].total), tensors, analytic, smooth

    return build


GRADCHECK_CASES = (
    ("L_S", _ce_case),
    ("L_T", lambda rng: _ce_case(rng, n=12)),
    ("L_K[feature]", _pair_case(lambda a, b: sphere_kernel_geodesic_loss(a, b, 0.1, FEATURE))),
    ("L_K[moment]", _pair_case(lambda a, b: sphere_kernel_geodesic_loss(a, b, 0.1, MOMENT))),
    ("L_K^c[feature]", _categorical_case(FEATURE)),
    ("L_K^c[moment]", _categorical_case(MOMENT)),
    ("CORAL", _pair_case(coral_loss)),
    ("MMD", _pair_case(linear_mmd_loss)),
    ("objective[feature]", _objective_case(FEATURE)),
    ("objective[moment]", _objective_case(MOMENT)),
)


def check_case(build, rng, eps: float, tolerance: float) -> GradCheckReport:
    fn, tensors, analytic, smooth = build(rng)
    return gradient_check(fn, tensors, analytic, eps=eps, tolerance=tolerance, rng=rng, smooth=smooth)


def run_case(name: str, build, points: int, eps: float, tolerance: float,
             seed: int = 0) -> Tuple[List[GradCheckReport], bool]:
    """Check one loss at ``points`` random points. A point where every tensor
    is degenerate does not count and is redrawn."""
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    reports = []
    attempts = 0
    while len(reports) < points and attempts < 5 * points:
        attempts += 1
        rep = check_case(build, rng, eps, tolerance)
        if all(t.degenerate for t in rep.tensors.values()):
            continue
        reports.append(rep)
    ok = len(reports) == points and all(r.passed for r in reports)
    return reports, ok


def gradcheck_suite(points: int = 20, eps: float = 1e-4, tolerance: float = 1e-5,
                    seed: int = 0) -> Iterator[Tuple[str, bool]]:
    """Yield one summary line per loss, ``(line, passed)``."""
    for name, build in GRADCHECK_CASES:
        reports, ok = run_case(name, build, points, eps, tolerance, seed)
        worst = max((r.max_rel_error for r in reports), default=float("nan"))
        failing = sum(not r.passed for r in reports)
        yield (
            f"{name:<20} points={len(reports):<3d} max_rel_err={worst:.3e} "
            f"failing_points={failing:<3d} {'PASS' if ok else 'FAIL'}",
            ok,
        )
