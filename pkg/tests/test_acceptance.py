"""Acceptance criteria, each at its stated tolerance.

A pass/fail line per criterion is printed in the terminal summary.
"""

import io
import time
from dataclasses import replace

import numpy as np

from conftest import DESK_VARIANTS, record
from dsgk import harness, verify
from dsgk import network as nn
from dsgk.data import SyntheticTaskSpec, generate_task
from dsgk.losses import (
    FEATURE,
    MOMENT,
    ObjectiveSpec,
    categorical_sphere_kernel_geodesic_loss,
    coral_loss,
    cross_entropy_loss,
    linear_mmd_loss,
    sphere_kernel_geodesic_loss,
    total_loss,
)
from dsgk.moments import FeatureBatch, batch_stats, gaussian_kernel
from dsgk.pseudo import default_schedule, select_pseudo_labels

DESK_TASK = SyntheticTaskSpec()


def test_1_geometry():
    t0 = time.perf_counter()
    res = verify.geometry_suite(10_000, seed=0)
    elapsed = time.perf_counter() - t0
    ok = verify.geometry_passes(res) and elapsed < 5.0
    record(1, ok, " ".join(f"{k}={v:.1e}" for k, v in res.items()) + f" time={elapsed:.2f}s")
    assert verify.geometry_passes(res), res
    assert elapsed < 5.0


def test_2_gradient_oracle():
    t0 = time.perf_counter()
    lines = list(verify.gradcheck_suite(points=20, eps=1e-4, tolerance=1e-5))
    elapsed = time.perf_counter() - t0
    failing = [line.split()[0] for line, ok in lines if not ok]
    ok = not failing and elapsed < 60.0
    record(2, ok, f"{len(lines) - len(failing)}/{len(lines)} losses pass at eps=1e-4"
           + (f", failing: {', '.join(failing)}" if failing else "") + f" time={elapsed:.1f}s")
    assert not failing, "\n".join(line for line, _ in lines)
    assert elapsed < 60.0


def test_3_kernel_and_loss_algebra():
    rng = np.random.default_rng(3)
    problems = []

    # K in (0, 1], exactly 1 only for equal covariances
    for _ in range(200):
        a = batch_stats(rng.normal(size=(8, 4))).cov
        b = batch_stats(rng.normal(size=(8, 4))).cov
        k = gaussian_kernel(a, b, 0.1)
        if not 0.0 < k < 1.0:
            problems.append(f"K={k!r} for distinct covariances")
    x = rng.normal(size=(8, 4))
    if gaussian_kernel(batch_stats(x).cov, batch_stats(x.copy()).cov, 0.1) != 1.0:
        problems.append("K != 1 for equal covariances")

    # kappa invariance in feature mode
    xs, xt = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    vals = [sphere_kernel_geodesic_loss(xs, xt, k, FEATURE).value for k in (0.01, 0.1, 1.0)]
    if max(vals) - min(vals) > 1e-12:
        problems.append(f"feature-mode L_K varies with kappa by {max(vals) - min(vals):.1e}")

    # every discrepancy vanishes on identical batches
    y = np.resize(np.arange(4), 16)
    b = FeatureBatch(rng.normal(size=(16, 4)), y)
    same = FeatureBatch(b.data.copy(), y.copy())
    zero = {
        "sphere[feature]": sphere_kernel_geodesic_loss(b, same, 0.1, FEATURE).value,
        "sphere[moment]": sphere_kernel_geodesic_loss(b, same, 0.1, MOMENT).value,
        "categorical[feature]": categorical_sphere_kernel_geodesic_loss(b, same, 0.1, FEATURE).value,
        "categorical[moment]": categorical_sphere_kernel_geodesic_loss(b, same, 0.1, MOMENT).value,
        "coral": coral_loss(b, same).value,
        "mmd": linear_mmd_loss(b, same).value,
    }
    problems += [f"{k}={v!r} on identical batches" for k, v in zero.items() if v != 0.0]

    # composition identity on random objective evaluations
    worst = 0.0
    for i in range(1000):
        d, c, n = 5, 4, 8
        net = nn.init_network(d, (6, c), seed=i)
        xs, xt, xp = (rng.normal(size=(n, d)) for _ in range(3))
        ys, yp = rng.integers(0, c, n), rng.integers(0, c, n)
        spec = ObjectiveSpec(alpha=rng.uniform(0, 1), beta=rng.uniform(0, 1),
                             mode=(FEATURE, MOMENT)[i % 2], discrepancy=("sphere", "coral", "mmd")[i % 3],
                             use_K=bool(rng.integers(2)), use_T=bool(rng.integers(2)), use_C=bool(rng.integers(2)))
        br, _ = total_loss(net, xs, ys, xt, xp, yp, spec, rng)
        worst = max(worst, abs(br.total - (br.l_s + br.l_t + br.alpha * br.l_k + br.beta * br.l_k_cat)))
    if worst > 1e-9:
        problems.append(f"composition error {worst:.1e}")

    record(3, not problems, "; ".join(problems) or f"max composition error {worst:.1e}")
    assert not problems


def test_4_pseudo_label_contracts():
    rng = np.random.default_rng(4)
    violations = 0
    for _ in range(1000):
        n, c = rng.integers(1, 50), rng.integers(2, 8)
        p = nn.softmax(rng.normal(scale=rng.uniform(0.1, 5), size=(n, c)))
        prev = set()
        for t in default_schedule(9):
            cur = set(select_pseudo_labels(p, t).indices.tolist())
            violations += not prev <= cur
            prev = cur
    s5 = default_schedule(5).thresholds
    s1 = default_schedule(1).thresholds
    ok = violations == 0 and s5 == (0.9, 0.8, 0.7, 0.6, 0.5) and s1 == (0.1,)
    record(4, ok, f"monotonicity violations={violations} T=5 -> {list(s5)} T=1 -> {list(s1)}")
    assert violations == 0
    assert s5 == (0.9, 0.8, 0.7, 0.6, 0.5)
    assert s1 == (0.1,)


def test_5_desk_adaptation_gain(desk_runs):
    rows, elapsed = desk_runs
    base, full = rows["DSGK-K/T/C"].mean, rows["DSGK"].mean
    gain = 100 * (full - base)
    # the five-variant fixture is a superset of the two rows this criterion needs
    pair_time = elapsed * 2 / len(DESK_VARIANTS)
    ok = gain >= 5.0 and pair_time < 300
    record(5, ok, f"source-only {100 * base:.2f}% DSGK {100 * full:.2f}% gain {gain:+.2f} pts "
           f"(~{pair_time:.0f}s for the two rows)")
    assert gain >= 5.0
    assert pair_time < 300


def test_6_divergence_reduction(desk_runs):
    rows, _ = desk_runs
    runs = rows["DSGK"].runs
    warm = np.array([r["warmup_divergence_proxy"] for r in runs])
    final = np.array([r["divergence_proxy"] for r in runs])
    ratio = final.mean() / warm.mean()
    per_seed = " ".join(f"{f / w:.2f}" for f, w in zip(final, warm))
    record(6, ratio <= 0.7, f"final/warmup-end proxy ratio {ratio:.3f} (limit 0.7), per seed [{per_seed}]")
    assert ratio <= 0.7


def test_7_ablation_ordering(desk_runs):
    rows, _ = desk_runs
    full = 100 * rows["DSGK"].mean
    gaps = {n: full - 100 * rows[n].mean for n in ("DSGK-C", "DSGK-T", "DSGK-K")}
    ok = all(g >= -1.0 for g in gaps.values())
    record(7, ok, f"DSGK {full:.2f}% minus " + ", ".join(f"{n} {g:+.2f}" for n, g in gaps.items()))
    assert ok, gaps


def test_8_determinism():
    src, tgt = generate_task(replace(DESK_TASK, seed=1))
    cfg = harness.RunConfig(seed=1)
    streams, hashes = [], []
    for _ in range(2):
        buf = io.StringIO()
        res = harness.train(cfg, src, tgt, sink=buf)
        streams.append(buf.getvalue().encode())
        hashes.append(nn.checkpoint_hash(res.net))
    ok = streams[0] == streams[1] and hashes[0] == hashes[1]
    record(8, ok, f"{len(streams[0])} stream bytes, checkpoint sha256 {hashes[0][:16]}...")
    assert streams[0] == streams[1]
    assert hashes[0] == hashes[1]


def test_9_cross_entropy_anchors():
    uniform, _ = cross_entropy_loss(np.full((5, 4), 0.25), [0, 1, 2, 3, 0])
    worked, _ = cross_entropy_loss(np.array([[0.9, 0.1], [0.2, 0.8]]), [0, 1])
    e1, e2 = abs(uniform - np.log(4)), abs(worked - 0.164252)
    record(9, e1 <= 1e-12 and e2 <= 1e-6, f"|L - ln4|={e1:.1e} |L - 0.164252|={e2:.1e}")
    assert e1 <= 1e-12
    assert e2 <= 1e-6
