import numpy as np
import pytest

from flowmatch import coupling, trainer
from flowmatch.coupling import CostSpec
from flowmatch.errors import ConfigError, TrainingAborted
from flowmatch.fieldnet import VectorFieldNet
from flowmatch.toydata import Distribution2DSpec
from flowmatch.trainer import TrainConfig

POINT = Distribution2DSpec("point_mass", {"location": [0.5, -0.5]})


def small_config(**kw):
    base = dict(iterations=50, batch_size=16, hidden_dims=(16, 16), log_every=10, seed=3)
    base.update(kw)
    return TrainConfig(**base)


class TestInterpolate:
    def test_endpoints(self):
        x, y = np.array([1.0, 2.0]), np.array([4.0, -1.0])
        xt, v = trainer.interpolate(x, y, 0.0)
        np.testing.assert_array_equal(xt, x)
        np.testing.assert_array_equal(v, y - x)
        xt, v = trainer.interpolate(x, y, 1.0)
        np.testing.assert_array_equal(xt, y)

    def test_arithmetic(self):
        xt, v = trainer.interpolate(np.zeros(2), np.array([2.0, 4.0]), 0.25)
        np.testing.assert_array_equal(xt, [0.5, 1.0])
        np.testing.assert_array_equal(v, [2.0, 4.0])

    def test_degenerate_pair(self):
        x = np.array([3.0, 3.0])
        for t in (0.0, 0.3, 1.0):
            xt, v = trainer.interpolate(x, x, t)
            np.testing.assert_array_equal(xt, x)
            np.testing.assert_array_equal(v, 0.0)

    def test_per_row_times(self, rng):
        x, y, t = rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), rng.random(4)
        xt, _ = trainer.interpolate(x, y, t)
        for i in range(4):
            np.testing.assert_allclose(xt[i], (1 - t[i]) * x[i] + t[i] * y[i], rtol=1e-15)


class TestConfig:
    def test_requires_epsilon(self):
        with pytest.raises(ConfigError):
            TrainConfig(strategy="wcfm")
        with pytest.raises(ConfigError):
            TrainConfig(strategy="otcfm_sinkhorn")

    @pytest.mark.parametrize("kw", [{"strategy": "bogus"}, {"batch_size": 0}, {"iterations": 0},
                                    {"lr": 0.0}, {"log_every": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_dict_round_trip(self):
        cfg = TrainConfig(strategy="wcfm", cost=CostSpec("euclidean", 0.3), source=POINT)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({**cfg.to_dict(), "momentum": 0.9})


class TestTrain:
    def test_point_mass_to_itself(self):
        cfg = TrainConfig(iterations=200, batch_size=8, source=POINT, target=POINT,
                          hidden_dims=(16, 16), lr=1e-2, log_every=10, seed=0, zero_final=True)
        net, log = trainer.train(cfg)
        assert log.losses[-1] < 1e-10
        np.testing.assert_array_equal(net(0.5, np.array([0.5, -0.5])), 0.0)

    def test_point_mass_random_init_decreases(self):
        cfg = TrainConfig(iterations=200, batch_size=8, source=POINT, target=POINT,
                          hidden_dims=(16, 16), lr=1e-2, log_every=1, seed=0)
        _, log = trainer.train(cfg)
        assert log.losses[-1] < 1e-2 * log.losses[0]

    def test_mean_displacement_1d(self):
        src = Distribution2DSpec("isotropic_gaussian", {"dim": 1})
        tgt = Distribution2DSpec("isotropic_gaussian", {"dim": 1, "mean": [5.0]})
        cfg = TrainConfig(iterations=5000, batch_size=48, source=src, target=tgt, seed=1,
                          hidden_dims=(32, 32), log_every=500)
        net, _ = trainer.train(cfg)
        r = np.random.default_rng(0)
        x, t = r.normal(2.5, 1.0, size=(500, 1)), r.random(500)
        assert abs(net(t, x).mean() - 5.0) < 0.5

    def test_deterministic(self):
        cfg = small_config(strategy="wcfm", cost=CostSpec("euclidean", 0.5))
        a, la = trainer.train(cfg)
        b, lb = trainer.train(cfg)
        np.testing.assert_array_equal(a.theta, b.theta)
        np.testing.assert_array_equal(la.losses, lb.losses)

    def test_large_epsilon_matches_icfm(self):
        icfm, _ = trainer.train(small_config(iterations=200))
        wcfm, _ = trainer.train(small_config(iterations=200, strategy="wcfm",
                                             cost=CostSpec("euclidean", 1e9)))
        rel = np.linalg.norm(wcfm.theta - icfm.theta) / np.linalg.norm(icfm.theta)
        assert rel < 1e-6

    @pytest.mark.parametrize("strategy,eps", [("icfm", None), ("wcfm", 0.3), ("otcfm_exact", None),
                                              ("otcfm_sinkhorn", 0.3)])
    def test_loss_decreases(self, strategy, eps):
        cfg = small_config(strategy=strategy, cost=CostSpec("euclidean", eps), iterations=400,
                           log_every=100)
        _, log = trainer.train(cfg)
        assert log.losses[-1] < log.losses[0]

    def test_weighted_loss_identity(self, rng):
        # W-CFM batch loss = I-CFM per-term losses reweighted by the Gibbs kernel.
        net = VectorFieldNet.init(2, (16,), rng=1)
        xs, ys = rng.normal(size=(12, 2)), rng.normal(size=(12, 2))
        cost = CostSpec("euclidean", 0.7)
        pairs = coupling.pair_gibbs(xs, ys, cost, np.random.default_rng(4))
        xt, tgt = trainer.interpolate(pairs.x, pairs.y, pairs.t)
        loss, _ = net.loss_and_grad(pairs.t, xt, tgt, pairs.w)
        terms = np.sum((net(pairs.t, xt) - tgt) ** 2, axis=1)
        np.testing.assert_allclose(loss, np.mean(coupling.gibbs_weight(xs, ys, cost) * terms),
                                   rtol=1e-12)

    def test_normalized_weights_run(self):
        _, log = trainer.train(small_config(strategy="wcfm", cost=CostSpec("euclidean", 0.2),
                                            normalize_weights=True))
        assert np.all(np.isfinite(log.losses))

    def test_resume_bit_identical(self, tmp_path):
        cfg = small_config(iterations=60, checkpoint_every=20, strategy="otcfm_exact")
        full, _ = trainer.train(cfg, checkpoint_dir=tmp_path / "a")
        ckpt = tmp_path / "a" / "ckpt_0000020.json"
        resumed, _ = trainer.train(cfg, resume=ckpt)
        np.testing.assert_array_equal(resumed.theta, full.theta)
        assert trainer.last_checkpoint(tmp_path / "a").endswith("ckpt_0000060.json")
        assert trainer.last_checkpoint(tmp_path / "missing") is None

    def test_abort_on_nonfinite(self, tmp_path):
        far = Distribution2DSpec("point_mass", {"location": [1e200, 0.0]})
        cfg = small_config(target=far, checkpoint_every=0)
        with pytest.raises(TrainingAborted) as info:
            trainer.train(cfg)
        assert info.value.step == 0 and info.value.last_checkpoint is None

    def test_log_csv(self, tmp_path):
        _, log = trainer.train(small_config())
        lines = log.to_csv(tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "step,loss,wallclock_ms"
        assert len(lines) == 6 and lines[1].startswith("10,") and lines[1].endswith(",0")


class TestBatchEOTLoss:
    def test_zero_field(self, rng):
        net = VectorFieldNet(2, (4,))
        xs, ys = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
        cost = CostSpec("euclidean", 0.5)
        plan = coupling.sinkhorn(xs, ys, cost).matrix
        direct = sum(plan[i, j] * np.sum((ys[j] - xs[i]) ** 2) for i in range(6) for j in range(6))
        loss = trainer.batch_eot_cfm_loss(net, xs, ys, rng.random(6), cost)
        np.testing.assert_allclose(loss, direct, rtol=1e-12)

    def test_two_by_two_hand(self):
        # Unit-distance crossing: plan diag d = 1/(2(1+e^{-1/eps})), zero field.
        net = VectorFieldNet(1, (2,))
        xs, ys = np.array([[0.0], [1.0]]), np.array([[0.0], [1.0]])
        eps = 0.5
        d = 1.0 / (2.0 * (1.0 + np.exp(-1.0 / eps)))
        loss = trainer.batch_eot_cfm_loss(net, xs, ys, [0.2, 0.7], CostSpec("euclidean", eps),
                                          tol=1e-12)
        np.testing.assert_allclose(loss, 2 * (0.5 - d) * 1.0, atol=1e-9)

    def test_small_eps_concentrates(self, rng):
        xs = rng.normal(size=(8, 2)) * 3
        loss = trainer.batch_eot_cfm_loss(VectorFieldNet(2, (4,)), xs, xs, rng.random(8),
                                          CostSpec("euclidean", 0.05))
        assert loss < 1e-6
