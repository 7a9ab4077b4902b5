import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowmatch import diagnostics, toydata
from flowmatch.coupling import CostSpec
from flowmatch.errors import ConfigError, UnderflowError
from flowmatch.fieldnet import VectorFieldNet
from flowmatch.toydata import Distribution2DSpec

GAUSS = Distribution2DSpec("isotropic_gaussian")
CIRCLE2 = Distribution2DSpec("circle_uniform", {"radius": 2.0})


def point(loc):
    return Distribution2DSpec("point_mass", {"location": list(loc)})


class TestRelativeVariance:
    def test_constant(self):
        assert diagnostics.relative_variance(np.full(10, 3.0)) == 0.0

    def test_known(self):
        # values {1, 3}: mean 2, population var 1.
        assert diagnostics.relative_variance([1.0, 3.0]) == 0.25

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(1e-3, 1e3), min_size=2, max_size=30), st.floats(1e-6, 1e6))
    def test_scale_invariant(self, values, k):
        v = np.array(values)
        a = diagnostics.relative_variance(v)
        b = diagnostics.relative_variance(k * v)
        assert abs(a - b) <= 1e-12 * max(1.0, a)


class TestEstimateTilt:
    def test_point_mass_opposite_is_exact(self, rng):
        z = rng.normal(size=(20, 2))
        est = diagnostics.estimate_tilt("source_f", z, point((1.0, -1.0)), 0.7, n_mc=200, rng=0)
        np.testing.assert_allclose(est.values, np.exp(-np.linalg.norm(z - [1, -1], axis=1) / 0.7),
                                   rtol=1e-12)

    def test_same_point_masses(self):
        pts = np.tile([2.0, 2.0], (16, 1))
        est = diagnostics.estimate_tilt("target_g", pts, point((2.0, 2.0)), 1.0, n_mc=100, rng=0)
        assert est.rel_variance == 0.0
        np.testing.assert_array_equal(est.values, 1.0)

    def test_sphere_target_constant(self):
        pts = toydata.sample(CIRCLE2, 256, 1).points
        est = diagnostics.estimate_tilt("target_g", pts, GAUSS, 1.0, n_mc=10_000, rng=2)
        assert est.rel_variance < 1e-2

    def test_doubling_n_mc(self):
        pts = toydata.sample(GAUSS, 64, 3).points
        a = diagnostics.estimate_tilt("source_f", pts, CIRCLE2, 1.0, n_mc=4000, rng=4)
        b = diagnostics.estimate_tilt("source_f", pts, CIRCLE2, 1.0, n_mc=8000, rng=5)
        # Per-point MC standard error of a mean of kernel values.
        others = toydata.sample(CIRCLE2, 20_000, 6).points
        w = np.exp(-np.linalg.norm(pts[:, None] - others[None], axis=2))
        se = w.std(axis=1) * math.sqrt(1 / 4000 + 1 / 8000)
        assert np.all(np.abs(a.values - b.values) <= 4 * se)
        assert np.mean(np.abs(a.values - b.values) <= 2 * se) > 0.9

    def test_underflow(self):
        far = np.array([[1e6, 0.0]])
        with pytest.raises(UnderflowError):
            diagnostics.estimate_tilt("source_f", far, point((0.0, 0.0)), 1e-3, n_mc=100, rng=0)

    def test_small_values_keep_rel_variance(self):
        pts = np.array([[10.0, 0.0], [11.0, 0.0]])
        est = diagnostics.estimate_tilt("source_f", pts, point((0.0, 0.0)), 0.05, n_mc=100, rng=0)
        assert np.all(est.values > 0)
        # exp(-20) relative factor between the two points.
        r = math.exp(-20.0)
        np.testing.assert_allclose(est.rel_variance, ((1 - r) / (1 + r)) ** 2, rtol=1e-10)

    def test_validation(self):
        with pytest.raises(ConfigError):
            diagnostics.estimate_tilt("other", np.zeros((1, 2)), GAUSS, 1.0)
        with pytest.raises(ConfigError):
            diagnostics.estimate_tilt("source_f", np.zeros((1, 2)), GAUSS, 1.0, n_mc=10)
        with pytest.raises(ConfigError):
            diagnostics.estimate_tilt("source_f", np.zeros((1, 2)), GAUSS, 0.0)


class TestElbow:
    def test_drop_then_flat(self):
        assert diagnostics.elbow_index([10, 1, 0.1, 0.09, 0.088]) == (3, True)

    def test_all_zero_selects_first(self):
        assert diagnostics.elbow_index(np.zeros(6)) == (0, True)

    def test_no_elbow(self):
        idx, found = diagnostics.elbow_index([5.0, 4.0, 3.0, 2.0, 1.0])
        assert (idx, found) == (4, False)

    def test_smoothing_removes_spike(self):
        np.testing.assert_array_equal(diagnostics.smooth3([1.0, 9.0, 1.0, 1.0]), [5.0, 1.0, 1.0, 1.0])

    def test_point_masses_select_smallest(self):
        pm = point((0.5, 0.5))
        scan = diagnostics.select_epsilon(pm, pm, rng=0, n_mc=128, n_eval=32)
        assert scan.selected_index == 0 and scan.warning is None
        np.testing.assert_array_equal(scan.curve, 0.0)

    def test_noisy_curve_warns(self):
        scan = diagnostics.select_epsilon(GAUSS, Distribution2DSpec("isotropic_gaussian", {"mean": [40.0, 0.0]}),
                                          kappa_grid=[0.01, 0.02, 0.03, 0.04], rng=0, n_mc=128,
                                          n_eval=32)
        assert scan.warning is not None
        assert scan.selected_index == 3

    def test_grid_validation(self):
        with pytest.raises(ConfigError):
            diagnostics.select_epsilon(GAUSS, GAUSS, kappa_grid=[0.1, 0.2, 0.3])
        with pytest.raises(ConfigError):
            diagnostics.select_epsilon(GAUSS, GAUSS, kappa_grid=[0.1, 0.3, 0.2, 0.4])

    def test_deterministic_and_member(self):
        a = diagnostics.select_epsilon(GAUSS, CIRCLE2, rng=5, n_mc=256, n_eval=64)
        b = diagnostics.select_epsilon(GAUSS, CIRCLE2, rng=5, n_mc=256, n_eval=64)
        np.testing.assert_array_equal(a.curve, b.curve)
        assert a.selected_kappa in a.kappa_grid
        assert a.selected_epsilon == pytest.approx(a.selected_kappa * math.sqrt(2))

    def test_circular_mog_in_working_range(self):
        scan = diagnostics.select_epsilon(toydata.circular_mog_source(),
                                          toydata.five_gaussians_target(), rng=0)
        assert 0.2 <= scan.selected_epsilon <= 0.4

    def test_outputs(self, tmp_path):
        scan = diagnostics.select_epsilon(GAUSS, CIRCLE2, rng=1, n_mc=256, n_eval=64)
        lines = scan.to_csv(tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "kappa,epsilon,rel_variance_f,rel_variance_g,sum"
        assert len(lines) == 17
        import json
        doc = json.loads(scan.to_json(tmp_path / "s.json").read_text())
        assert doc["selected_epsilon"] == scan.selected_epsilon


class TestPartition:
    def test_point_masses_exact(self):
        z, se = diagnostics.estimate_partition(point((0, 0)), point((3, 4)), CostSpec("euclidean", 2.5),
                                               n_pairs=1000, rng=0)
        assert z == pytest.approx(math.exp(-2.0), rel=1e-14) and se < 1e-12

    def test_ratio_constant_loss(self):
        # A zero field with point masses: L = |y - x|^2 for every pair.
        net = VectorFieldNet(2, (4,))
        r, se = diagnostics.weighted_cfm_ratio(net, point((0, 0)), point((3, 4)),
                                               CostSpec("euclidean", 1.0), n_pairs=1000, rng=0)
        assert r == pytest.approx(25.0, rel=1e-12)


class TestProp3:
    def test_constant_cost_exact_at_every_n(self):
        # Point masses make the plan the product; a constant nonzero field
        # makes the residual independent of t, so nothing is left to chance.
        net = VectorFieldNet(2, (8,))
        net.theta[-2:] = [0.3, -0.7]
        np.testing.assert_array_equal(net(np.array([0.2, 0.9]), np.ones((2, 2))), [[0.3, -0.7]] * 2)
        table = diagnostics.verify_prop3(net, CostSpec("euclidean", 1.0), batch_sizes=(2, 4, 8),
                                         reps=3, rng=1, source=point((0, 0)), target=point((1, 1)),
                                         n_pairs=10_000)
        for row in table.rows:
            np.testing.assert_allclose(row.ratio, 1.0, rtol=1e-12)
            np.testing.assert_allclose(row.exact_ratio, 1.0, rtol=1e-12)

    def test_degenerate_zero_field(self):
        pm = point((0.5, 0.5))
        net = VectorFieldNet(2, (4,))
        table = diagnostics.verify_prop3(net, CostSpec("euclidean", 1.0), batch_sizes=(4,), reps=2,
                                         rng=0, source=pm, target=pm, n_pairs=1000)
        assert table.reference == 0.0 and table.rows[0].mean_loss == 0.0
        assert math.isnan(table.rows[0].ratio)

    def test_small_run_shape(self, tmp_path):
        net = VectorFieldNet.init(2, (8,), rng=3)
        table = diagnostics.verify_prop3(net, CostSpec("euclidean", 1.0), batch_sizes=(4, 8), reps=4,
                                         rng=4, n_pairs=20_000)
        assert [r.n for r in table.rows] == [4, 8]
        lines = table.to_csv(tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "n,mean_ratio,stderr,mean_loss,exact_ratio" and len(lines) == 3

    def test_is_converging(self):
        assert diagnostics.is_converging([0.3, 0.2, 0.1, 0.05])
        assert diagnostics.is_converging([0.3, 0.2, 0.21, 0.05], [0.01] * 4)
        assert not diagnostics.is_converging([0.3, 0.2, 0.4, 0.05], [0.01] * 4)
        assert not diagnostics.is_converging([0.3, 0.31, 0.32, 0.05], [0.01] * 4)


class TestPushforward:
    def test_zero_field_identity(self):
        zero = lambda t, x: np.zeros_like(x)  # noqa: E731
        pm = point((1.0, 2.0))
        assert diagnostics.verify_pushforward(zero, pm, pm, n=64, rng=0) == 0.0

    def test_zero_field_same_distribution(self):
        zero = lambda t, x: np.zeros_like(x)  # noqa: E731
        # Two independent 512-point Gaussian samples: sampling noise only.
        w2s = [diagnostics.verify_pushforward(zero, GAUSS, GAUSS, n=512, rng=s) for s in range(3)]
        assert max(w2s) < 0.15

    def test_trained_identity_task(self):
        from flowmatch.trainer import TrainConfig, train
        pm = point((0.5, -0.5))
        net, _ = train(TrainConfig(iterations=200, batch_size=8, source=pm, target=pm,
                                   hidden_dims=(16, 16), seed=0, zero_final=True))
        assert diagnostics.verify_pushforward(net, pm, pm, n=64, rng=0) < 1e-6
