import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsgk import network as nn
from dsgk.errors import (
    Antipodal,
    EmptyBatch,
    MissingLabels,
    NoValidClasses,
    RowNotNormalized,
    ShapeMismatch,
    ZeroNorm,
)
from dsgk.losses import (
    FEATURE,
    MOMENT,
    ObjectiveSpec,
    categorical_loss,
    categorical_sphere_kernel_geodesic_loss,
    coral_loss,
    cross_entropy_loss,
    gradient_check,
    linear_mmd_loss,
    marginal_loss,
    sphere_embed,
    sphere_kernel_geodesic_loss,
    total_loss,
)
from dsgk.moments import FeatureBatch, categorical_kernel


def rand(seed, *shape):
    return np.random.default_rng(seed).normal(size=shape)


class TestCrossEntropy:
    def test_uniform(self):
        v, _ = cross_entropy_loss(np.full((3, 4), 0.25), [0, 1, 3])
        assert abs(v - np.log(4)) <= 1e-12

    def test_worked_example(self):
        v, _ = cross_entropy_loss(np.array([[0.9, 0.1], [0.2, 0.8]]), [0, 1])
        assert abs(v - 0.164252) <= 1e-6

    def test_confident_correct(self):
        v, _ = cross_entropy_loss(np.array([[1 - 1e-9, 1e-9]]), [0])
        assert v == pytest.approx(0.0, abs=1e-8)

    def test_gradient_is_fused(self):
        p = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
        _, g = cross_entropy_loss(p, [1, 2])
        np.testing.assert_allclose(g, [[0.35, -0.4, 0.05], [0.05, 0.05, -0.1]], atol=1e-15)

    def test_errors(self):
        with pytest.raises(EmptyBatch):
            cross_entropy_loss(np.zeros((0, 3)), [])
        with pytest.raises(RowNotNormalized):
            cross_entropy_loss(np.array([[0.5, 0.6]]), [0])

    def test_finite_differences(self):
        z = rand(0, 8, 4)
        y = np.random.default_rng(1).integers(0, 4, 8)
        rep = gradient_check(lambda: cross_entropy_loss(nn.softmax(z), y)[0], {"z": z},
                             {"z": cross_entropy_loss(nn.softmax(z), y)[1]})
        assert rep.max_rel_error <= 1e-6


class TestSphereEmbed:
    def test_kernel_cancels(self):
        x = rand(2, 4, 3)
        np.testing.assert_array_equal(sphere_embed(x, 0.5), sphere_embed(x, 1.0))

    def test_identity_feature(self):
        r = 1 / np.sqrt(2)
        np.testing.assert_allclose(sphere_embed(np.eye(2), 1.0), [r, 0, 0, r], atol=1e-15)

    def test_moment_dimension(self):
        assert sphere_embed(rand(3, 6, 3), 1.0, MOMENT).shape == (9,)

    def test_constant_batch_moment(self):
        with pytest.raises(ZeroNorm):
            sphere_embed(np.ones((4, 3)), 1.0, MOMENT)


class TestSphereLoss:
    def test_identical(self):
        x = rand(4, 8, 4)
        for mode in (FEATURE, MOMENT):
            r = sphere_kernel_geodesic_loss(x, x.copy(), 0.1, mode)
            assert r.value == 0.0
            assert np.all(r.grad_s == 0) and np.all(r.grad_t == 0)

    def test_orthogonal(self):
        xs = np.array([[1.0, 0.0], [0.0, 0.0]])
        xt = np.array([[0.0, 1.0], [0.0, 0.0]])
        assert sphere_kernel_geodesic_loss(xs, xt).value == pytest.approx(2.467401, abs=1e-6)

    def test_antipodal(self):
        x = rand(5, 4, 2)
        with pytest.raises(Antipodal):
            sphere_kernel_geodesic_loss(x, -x)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            sphere_kernel_geodesic_loss(rand(6, 4, 2), rand(7, 5, 2))

    def test_kappa_invariance(self):
        xs, xt = rand(8, 8, 4), rand(9, 8, 4)
        res = [sphere_kernel_geodesic_loss(xs, xt, k) for k in (0.01, 0.1, 1.0)]
        assert max(r.value for r in res) - min(r.value for r in res) <= 1e-12
        assert len({r.kernel_value for r in res}) == 3

    @pytest.mark.parametrize("mode", [FEATURE, MOMENT])
    def test_finite_differences(self, mode):
        xs, xt = rand(10, 8, 4), rand(11, 8, 4)
        r = sphere_kernel_geodesic_loss(xs, xt, 0.1, mode)
        rep = gradient_check(lambda: sphere_kernel_geodesic_loss(xs, xt, 0.1, mode).value,
                             {"s": xs, "t": xt}, {"s": r.grad_s, "t": r.grad_t})
        assert rep.passed, list(rep.lines())

    def test_coincident_point_is_degenerate(self):
        x = rand(12, 8, 4)
        y = x.copy()
        r = sphere_kernel_geodesic_loss(x, y)
        rep = gradient_check(lambda: sphere_kernel_geodesic_loss(x, y).value,
                             {"s": x, "t": y}, {"s": r.grad_s, "t": r.grad_t})
        assert all(t.degenerate for t in rep.tensors.values())

    @given(st.integers(0, 2**31), st.sampled_from([FEATURE, MOMENT]))
    @settings(max_examples=50)
    def test_bounds_and_symmetry(self, seed, mode):
        rng = np.random.default_rng(seed)
        xs, xt = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        a = sphere_kernel_geodesic_loss(xs, xt, 0.1, mode).value
        b = sphere_kernel_geodesic_loss(xt, xs, 0.1, mode).value
        assert 0.0 <= a <= np.pi**2
        assert abs(a - b) <= 1e-12


class TestBaselines:
    def test_coral_unit_gap(self):
        xs = np.array([[1.0, 0.0], [-1.0, 0.0]])
        xt = np.zeros((2, 2))
        assert coral_loss(xs, xt).value == pytest.approx(1 / 16, abs=1e-15)

    def test_mmd_unit_gap(self):
        assert linear_mmd_loss(np.array([[1.0, 0.0]]), np.zeros((1, 2))).value == 1.0

    def test_zero_on_equal(self):
        x = rand(13, 5, 3)
        assert coral_loss(x, x[::-1].copy()).value == 0.0
        assert linear_mmd_loss(x, x.copy()).value == 0.0

    @pytest.mark.parametrize("fn", [coral_loss, linear_mmd_loss])
    def test_finite_differences(self, fn):
        xs, xt = rand(14, 8, 4), rand(15, 8, 4)
        r = fn(xs, xt)
        rep = gradient_check(lambda: fn(xs, xt).value, {"s": xs, "t": xt}, {"s": r.grad_s, "t": r.grad_t})
        assert rep.passed, list(rep.lines())

    def test_unknown_discrepancy(self):
        with pytest.raises(ValueError):
            marginal_loss("wasserstein", rand(1, 4, 2), rand(2, 4, 2), 0.1, FEATURE)


class TestCategorical:
    def labeled(self, seed):
        rng = np.random.default_rng(seed)
        xs, xt = rng.normal(size=(16, 4)), rng.normal(size=(16, 4))
        ys = rng.permutation(np.repeat(np.arange(4), 4))
        yt = rng.permutation(np.r_[np.repeat(np.arange(4), 3), [0, 1, 2, 2]])
        return FeatureBatch(xs, ys), FeatureBatch(xt, yt)

    def test_identical_is_zero(self):
        b, _ = self.labeled(0)
        for disc in ("sphere", "coral", "mmd"):
            for mode in (FEATURE, MOMENT):
                assert categorical_loss(b, b, disc, 0.1, mode).value == 0.0

    def test_single_valid_class(self):
        rng = np.random.default_rng(5)
        xs, xt = rng.normal(size=(6, 3)), rng.normal(size=(5, 3))
        bs = FeatureBatch(xs, [0, 0, 0, 0, 1, 2])
        bt = FeatureBatch(xt, [0, 0, 0, 1, 3])
        r = categorical_sphere_kernel_geodesic_loss(bs, bt, 0.1, FEATURE, np.random.default_rng(9))
        assert r.valid_class_count == 1
        k = categorical_kernel(bs, bt, 0, 0.1)
        keep = np.sort(np.random.default_rng(9).choice(np.arange(4), size=3, replace=False))
        direct = sphere_kernel_geodesic_loss(xs[keep], xt[:3], 0.1, FEATURE)
        assert r.value == pytest.approx(direct.value, abs=1e-15)
        assert r.kernel_values[0] == k

    def test_no_valid_classes(self):
        bs = FeatureBatch(np.zeros((2, 2)), [0, 1])
        with pytest.raises(NoValidClasses):
            categorical_sphere_kernel_geodesic_loss(bs, bs)

    def test_missing_labels(self):
        with pytest.raises(MissingLabels):
            categorical_sphere_kernel_geodesic_loss(FeatureBatch(np.zeros((2, 2))), FeatureBatch(np.zeros((2, 2))))

    def test_seeded_subsampling_is_deterministic(self):
        bs, bt = self.labeled(6)
        a = categorical_sphere_kernel_geodesic_loss(bs, bt, rng=np.random.default_rng(3))
        b = categorical_sphere_kernel_geodesic_loss(bs, bt, rng=np.random.default_rng(3))
        assert a.value == b.value

    @pytest.mark.parametrize("mode", [FEATURE, MOMENT])
    def test_finite_differences(self, mode):
        bs, bt = self.labeled(7)

        def run():
            return categorical_sphere_kernel_geodesic_loss(bs, bt, 0.1, mode, np.random.default_rng(4))

        r = run()
        rep = gradient_check(lambda: run().value, {"s": bs.data, "t": bt.data}, {"s": r.grad_s, "t": r.grad_t})
        assert rep.passed, list(rep.lines())


class TestGradientCheck:
    def test_eps_range(self):
        x = np.zeros(3)
        with pytest.raises(ValueError):
            gradient_check(lambda: 0.0, {"x": x}, {"x": x}, eps=1.0)

    def test_reports_wrong_gradient(self):
        x = rand(16, 5)
        rep = gradient_check(lambda: float(np.sum(x**2)), {"x": x}, {"x": 3 * x})
        assert not rep.passed

    def test_subsamples_large_tensors(self):
        x = rand(17, 200)
        rep = gradient_check(lambda: float(np.sum(x**3)), {"x": x}, {"x": 3 * x**2})
        assert rep.tensors["x"].coords_checked == 64


def objective_inputs(seed, n=12, d=5, c=4):
    rng = np.random.default_rng(seed)
    net = nn.init_network(d, (8, c), seed=seed)
    xs, xt, xp = (rng.normal(size=(n, d)) for _ in range(3))
    ys = rng.permutation(np.resize(np.arange(c), n))
    yp = rng.permutation(np.resize(np.arange(c), n))
    return net, xs, ys, xt, xp, yp


class TestTotalLoss:
    def test_defaults(self):
        s = ObjectiveSpec()
        assert (s.alpha, s.beta, s.kappa) == (0.1, 0.01, 0.1)

    def test_source_only(self):
        net, xs, ys, xt, _, _ = objective_inputs(0)
        spec = ObjectiveSpec(alpha=0.0, beta=0.0, use_K=False, use_T=False, use_C=False)
        b, _ = total_loss(net, xs, ys, xt, None, None, spec)
        assert b.total == b.l_s
        assert b.l_t == b.l_k == b.l_k_cat == 0.0

    def test_empty_pseudo_batch(self):
        net, xs, ys, xt, _, _ = objective_inputs(1)
        b, _ = total_loss(net, xs, ys, xt, np.zeros((0, 5)), np.zeros(0, dtype=int), ObjectiveSpec())
        assert b.l_t == 0.0 and b.l_k_cat == 0.0 and b.beta == 0.0
        assert b.total == pytest.approx(b.l_s + 0.1 * b.l_k, abs=1e-12)

    @given(st.integers(0, 2**31), st.sampled_from([FEATURE, MOMENT]),
           st.floats(0, 1), st.floats(0, 1), st.sampled_from(["sphere", "coral", "mmd"]))
    @settings(max_examples=40, deadline=None)
    def test_composition(self, seed, mode, alpha, beta, disc):
        net, xs, ys, xt, xp, yp = objective_inputs(seed % 1000)
        spec = ObjectiveSpec(alpha=alpha, beta=beta, mode=mode, discrepancy=disc)
        b, _ = total_loss(net, xs, ys, xt, xp, yp, spec, np.random.default_rng(seed))
        assert abs(b.total - (b.l_s + b.l_t + b.alpha * b.l_k + b.beta * b.l_k_cat)) <= 1e-9
        assert abs(b.divergence_proxy - (b.l_k + b.l_k_cat)) <= 1e-9
        if disc == "sphere":
            assert 0.0 <= b.l_k <= np.pi**2 and 0.0 <= b.l_k_cat <= np.pi**2

    def test_running_stats_frozen_when_requested(self):
        net, xs, ys, xt, xp, yp = objective_inputs(2)
        before = nn.checkpoint_hash(net)
        total_loss(net, xs, ys, xt, xp, yp, ObjectiveSpec(), update_stats=False)
        assert nn.checkpoint_hash(net) == before

    @pytest.mark.parametrize("mode", [FEATURE, MOMENT])
    def test_finite_differences(self, mode):
        net, xs, ys, xt, xp, yp = objective_inputs(3)
        spec = ObjectiveSpec(mode=mode)

        def run():
            return total_loss(net, xs, ys, xt, xp, yp, spec, np.random.default_rng(0), update_stats=False)

        _, grads = run()
        analytic = {name: g for (name, _), g in zip(net.parameters(), grads)}
        # small step: this test is about the analytic gradient, not the step size
        rep = gradient_check(lambda: run()[0].total, dict(net.parameters()), analytic, eps=1e-5)
        assert rep.passed, list(rep.lines())
