import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowmatch import fieldnet
from flowmatch.errors import CheckpointError, ContractError, NumericalError
from flowmatch.fieldnet import AdamState, VectorFieldNet, adam_step


def finite_difference_check(net, t, x, target, w, coords, h=1e-5):
    """Max relative error between analytic and central-difference gradients at ``coords``."""
    _, grad = net.loss_and_grad(t, x, target, w)
    worst = 0.0
    for i in coords:
        saved = net.theta[i]
        net.theta[i] = saved + h
        up, _ = net.loss_and_grad(t, x, target, w)
        net.theta[i] = saved - h
        down, _ = net.loss_and_grad(t, x, target, w)
        net.theta[i] = saved
        fd = (up - down) / (2 * h)
        denom = max(abs(fd), abs(grad[i]), 1e-6)
        worst = max(worst, abs(fd - grad[i]) / denom)
    return worst


class TestForward:
    def test_zero_final_layer(self, backend):
        net = VectorFieldNet.init(2, (8, 8), rng=0, zero_final=True)
        np.testing.assert_array_equal(net(0.3, np.ones((5, 2))), np.zeros((5, 2)))

    def test_hand_two_unit_case(self, backend):
        # One hidden layer of two units; positive pre-activations make ELU the identity.
        net = VectorFieldNet(1, (2,))
        net.weights[0][...] = [[1.0, 0.0], [0.0, 1.0]]
        net.biases[0][...] = [0.5, 0.25]
        net.weights[1][...] = [[2.0, -1.0]]
        net.biases[1][...] = [0.1]
        x, t = 0.75, 0.4
        expected = 2.0 * (x + 0.5) - 1.0 * (t + 0.25) + 0.1
        np.testing.assert_allclose(net(t, np.array([x])), [expected], rtol=1e-15)

    def test_elu_negative_branch(self, backend):
        net = VectorFieldNet(1, (1,))
        net.weights[0][...] = [[1.0, 0.0]]
        net.weights[1][...] = [[1.0]]
        np.testing.assert_allclose(net(0.0, np.array([-2.0])), [math.expm1(-2.0)], rtol=1e-15)

    def test_batch_equals_rows(self, backend, rng):
        net = VectorFieldNet.init(2, (16, 16), rng=1)
        x = rng.normal(size=(7, 2))
        t = rng.random(7)
        batch = net(t, x)
        for i in range(7):
            np.testing.assert_allclose(batch[i], net(t[i], x[i]), rtol=0, atol=1e-14)

    def test_shape_mismatch(self):
        net = VectorFieldNet(2)
        with pytest.raises(ContractError):
            net(0.0, np.zeros((3, 3)))
        with pytest.raises(ContractError):
            VectorFieldNet(2, (4,), theta=np.zeros(3))

    def test_backends_agree(self, rng):
        from flowmatch import _backend
        if len(_backend.available()) < 2:
            pytest.skip("compiled backend not built")
        net = VectorFieldNet.init(2, (64, 64), rng=2)
        x, t = rng.normal(size=(50, 2)), rng.random(50)
        tgt, w = rng.normal(size=(50, 2)), rng.random(50)
        out = {}
        for name in ("python", "compiled"):
            with _backend.use(name):
                out[name] = (net(t, x),) + net.loss_and_grad(t, x, tgt, w)
        np.testing.assert_allclose(out["python"][0], out["compiled"][0], rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(out["python"][1], out["compiled"][1], rtol=1e-12)
        np.testing.assert_allclose(out["python"][2], out["compiled"][2], rtol=1e-10, atol=1e-14)


class TestLossAndGrad:
    def test_zero_weights(self, backend, rng):
        net = VectorFieldNet.init(2, (8,), rng=3)
        loss, grad = net.loss_and_grad(rng.random(4), rng.normal(size=(4, 2)),
                                       rng.normal(size=(4, 2)), np.zeros(4))
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_zero_net_hand_gradient(self, backend):
        # One hidden unit, zero parameters: v = 0, loss = |target|^2.
        # dL/dW2 = -2 target * elu(0) = 0, dL/db2 = -2 target,
        # dL/dW1 = W2 * ... = 0 because W2 = 0.
        net = VectorFieldNet(2, (1,))
        target = np.array([[3.0, -4.0]])
        loss, grad = net.loss_and_grad([0.5], np.array([[1.0, 2.0]]), target, [1.0])
        assert loss == 25.0
        gw, gb = net.unflatten(grad)
        np.testing.assert_array_equal(gb[-1], [-6.0, 8.0])
        np.testing.assert_array_equal(gw[-1], 0.0)
        np.testing.assert_array_equal(gw[0], 0.0)

    def test_hand_input_gradient(self, backend):
        # v = w2 * elu(w1 . [x, t] + b1); loss = (v - y)^2 with elu' = 1 on positive input.
        net = VectorFieldNet(1, (1,))
        net.weights[0][...] = [[0.5, 2.0]]
        net.biases[0][...] = [0.1]
        net.weights[1][...] = [[1.5]]
        x, t, y = 1.0, 0.25, 0.3
        z = 0.5 * x + 2.0 * t + 0.1
        r = 1.5 * z - y
        loss, grad = net.loss_and_grad([t], np.array([[x]]), np.array([[y]]))
        np.testing.assert_allclose(loss, r * r, rtol=1e-15)
        gw, gb = net.unflatten(grad)
        np.testing.assert_allclose(gw[0], [[2 * r * 1.5 * x, 2 * r * 1.5 * t]], rtol=1e-14)
        np.testing.assert_allclose(gb[0], [2 * r * 1.5], rtol=1e-14)
        np.testing.assert_allclose(gw[1], [[2 * r * z]], rtol=1e-14)

    def test_matches_direct_formula(self, backend, rng):
        net = VectorFieldNet.init(2, (8, 8), rng=4)
        t, x = rng.random(6), rng.normal(size=(6, 2))
        tgt, w = rng.normal(size=(6, 2)), rng.random(6)
        loss, _ = net.loss_and_grad(t, x, tgt, w)
        direct = np.mean(w * np.sum((net(t, x) - tgt) ** 2, axis=1))
        np.testing.assert_allclose(loss, direct, rtol=1e-14)

    def test_finite_differences(self, backend, rng):
        net = VectorFieldNet.init(2, (64, 64), rng=5)
        t, x = rng.random(16), rng.normal(size=(16, 2))
        tgt, w = rng.normal(size=(16, 2)), rng.random(16)
        coords = rng.choice(net.n_params, 64, replace=False)
        assert finite_difference_check(net, t, x, tgt, w, coords) < 1e-4

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31), st.floats(1e-3, 1e3))
    def test_weight_scaling(self, seed, k):
        r = np.random.default_rng(seed)
        net = VectorFieldNet.init(2, (8, 8), rng=r)
        t, x = r.random(5), r.normal(size=(5, 2))
        tgt, w = r.normal(size=(5, 2)), r.random(5) + 0.1
        l1, g1 = net.loss_and_grad(t, x, tgt, w)
        l2, g2 = net.loss_and_grad(t, x, tgt, k * w)
        np.testing.assert_allclose(l2, k * l1, rtol=1e-12)
        # Components that cancel to ~1e-20 carry the rounding of k * w, so
        # compare against the gradient scale.
        assert np.max(np.abs(g2 - k * g1)) < 1e-12 * k * np.max(np.abs(g1))

    @pytest.mark.parametrize("k", [0.25, 2.0, 1024.0])
    def test_weight_scaling_power_of_two_exact(self, k, rng):
        net = VectorFieldNet.init(2, (8, 8), rng=8)
        t, x = rng.random(5), rng.normal(size=(5, 2))
        tgt, w = rng.normal(size=(5, 2)), rng.random(5)
        l1, g1 = net.loss_and_grad(t, x, tgt, w)
        l2, g2 = net.loss_and_grad(t, x, tgt, k * w)
        assert l2 == k * l1
        np.testing.assert_array_equal(g2, k * g1)

    def test_errors(self, backend):
        net = VectorFieldNet(2, (4,))
        with pytest.raises(ContractError):
            net.loss_and_grad([0.1], np.zeros((1, 2)), np.zeros((1, 2)), [-1.0])
        with pytest.raises(NumericalError) as info:
            net.loss_and_grad([0.1, 0.2], np.zeros((2, 2)), np.array([[0.0, 0.0], [np.inf, 0.0]]))
        assert info.value.index == 1


class TestAdam:
    def test_zero_grad_fixed_point(self):
        net = VectorFieldNet.init(2, (4,), rng=0)
        before = net.theta.copy()
        state = AdamState(net.n_params)
        adam_step(net, np.zeros(net.n_params), state)
        np.testing.assert_array_equal(net.theta, before)
        assert state.step == 1

    def test_first_step_scalar(self):
        # From zero moments the bias-corrected step is -lr * g / (|g| + eps).
        net = VectorFieldNet(1, ())
        state = AdamState(net.n_params, lr=0.01)
        g = np.array([0.3, -2.0, 0.05])
        adam_step(net, g, state)
        np.testing.assert_allclose(net.theta, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_second_step_hand(self):
        net = VectorFieldNet(1, ())
        state = AdamState(net.n_params, lr=0.1)
        g1, g2 = np.array([1.0, 1.0, -1.0]), np.array([0.5, 0.5, 2.0])
        adam_step(net, g1, state)
        adam_step(net, g2, state)
        m = 0.9 * 0.1 * g1 + 0.1 * g2
        v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
        step2 = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
        np.testing.assert_allclose(net.theta, -0.1 * g1 / (1 + 1e-8) - step2, rtol=1e-12)

    def test_symmetry(self):
        net = VectorFieldNet(1, ())
        state = AdamState(net.n_params)
        for g in (0.7, -0.2, 1.3):
            adam_step(net, np.array([g, g, g]), state)
        assert net.theta[0] == net.theta[1] == net.theta[2]

    def test_shape_check(self):
        net = VectorFieldNet(1, ())
        with pytest.raises(ContractError):
            adam_step(net, np.zeros(5), AdamState(net.n_params))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        net = VectorFieldNet.init(2, (16, 8), rng=7)
        state = AdamState(net.n_params)
        adam_step(net, rng.normal(size=net.n_params), state)
        path = fieldnet.save_checkpoint(tmp_path / "c.json", net, state, rng_seed=3,
                                        training_config={"a": 1})
        doc = fieldnet.load_checkpoint(path)
        np.testing.assert_array_equal(doc["net"].theta, net.theta)
        np.testing.assert_array_equal(doc["adam"].m, state.m)
        np.testing.assert_array_equal(doc["adam"].v, state.v)
        assert doc["adam"].step == 1 and doc["rng_seed"] == 3
        assert doc["arch"] == {"input_dim": 3, "hidden_dims": [16, 8], "activation": "elu"}

    def test_version_mismatch(self, tmp_path):
        path = fieldnet.save_checkpoint(tmp_path / "c.json", VectorFieldNet(2, (4,)))
        text = path.read_text().replace('"format_version": 1', '"format_version": 99')
        path.write_text(text)
        with pytest.raises(CheckpointError):
            fieldnet.load_checkpoint(path)

    def test_unreadable(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(CheckpointError):
            fieldnet.load_checkpoint(tmp_path / "bad.json")
        with pytest.raises(CheckpointError):
            fieldnet.load_checkpoint(tmp_path / "missing.json")
