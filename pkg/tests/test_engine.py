import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splineprune.datasets import xshape
from splineprune.earlybird import EarlyBirdCallback, EBConfig
from splineprune.engine import (IDENTITY, RELU, Conv2d, Dataset, Dense, Flatten, MaxPool2d, Network,
                                SGDState, TrainConfig, accuracy, flops_estimate, init_kaiming,
                                leaky_relu, loss_and_grads, mlp, sgd_step, train)
from splineprune.errors import ConfigError, DimensionError, DivergenceError, LabelError
from splineprune.partition import hidden_signs


def naive_conv(x, w, b, stride=1, padding=0):
    """Direct loop cross-correlation, NCHW."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for r in range(ho):
                for s in range(wo):
                    patch = xp[i, :, r * stride:r * stride + kh, s * stride:s * stride + kw]
                    out[i, oc, r, s] = (patch * w[oc]).sum() + b[oc]
    return out


def small_convnet(seed=0, act=RELU):
    rng = np.random.default_rng(seed)
    layers = [
        Conv2d(rng.normal(size=(3, 2, 3, 3)) * 0.5, rng.normal(size=3) * 0.1, act, padding=1),
        MaxPool2d(),
        Flatten(),
        Dense(rng.normal(size=(4, 3 * 2 * 2)) * 0.5, rng.normal(size=4) * 0.1, act),
        Dense(rng.normal(size=(3, 4)) * 0.5, np.zeros(3), IDENTITY),
    ]
    return Network(layers, (2, 4, 4))


def numeric_grad(net, x, y, pos, name, idx, loss_kind, h=1e-5):
    arr = getattr(net.layers[pos], name)
    old = arr.flat[idx]
    arr.flat[idx] = old + h
    lp, _ = loss_and_grads(net, x, y, loss_kind)
    arr.flat[idx] = old - h
    lm, _ = loss_and_grads(net, x, y, loss_kind)
    arr.flat[idx] = old
    return (lp - lm) / (2 * h)


def codes_stable(net, x, pos, name, idx, h=1e-5):
    """True when perturbing the coordinate by +-h leaves every activation sign unchanged."""
    arr = getattr(net.layers[pos], name)
    old = arr.flat[idx]
    ref = _all_signs(net, x)
    arr.flat[idx] = old + h
    up = _all_signs(net, x)
    arr.flat[idx] = old - h
    down = _all_signs(net, x)
    arr.flat[idx] = old
    return np.array_equal(ref, up) and np.array_equal(ref, down)


def _all_signs(net, x):
    _, pre = net.forward(x)
    return np.concatenate([p.reshape(len(p), -1) >= 0 for p in pre], axis=1)


class TestForward:
    def test_relu_identity_layer(self):
        layer = Dense(np.eye(2), np.zeros(2), RELU)
        net = Network([layer], (2,))
        out, pre = net.forward(np.array([-1.0, 2.0]))
        np.testing.assert_array_equal(out, [0.0, 2.0])
        np.testing.assert_array_equal(pre[0], [-1.0, 2.0])

    def test_leaky_relu(self):
        net = Network([Dense(np.eye(2), np.zeros(2), leaky_relu(0.1))], (2,))
        out, _ = net.forward(np.array([-1.0, 2.0]))
        np.testing.assert_allclose(out, [-0.1, 2.0], rtol=0, atol=1e-15)

    def test_leaky_alpha_must_lie_in_unit_interval(self):
        with pytest.raises(ConfigError):
            leaky_relu(1.5)

    def test_shape_mismatch_names_layer(self):
        net = mlp([3, 4, 2])
        with pytest.raises(DimensionError, match="layer 0"):
            net.forward(np.zeros((5, 2)))

    def test_incompatible_stack_names_layer(self):
        with pytest.raises(DimensionError, match="layer 1"):
            Network([Dense(np.zeros((4, 3)), np.zeros(4)), Dense(np.zeros((2, 5)), np.zeros(2))], (3,))

    def test_conv_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        for stride, padding in [(1, 0), (1, 1), (2, 1), (2, 0)]:
            w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
            x = rng.normal(size=(2, 2, 6, 7))
            conv = Conv2d(w, b, IDENTITY, stride=stride, padding=padding)
            net = Network([conv], (2, 6, 7))
            out, _ = net.forward(x)
            np.testing.assert_allclose(out, naive_conv(x, w, b, stride, padding), atol=1e-12)

    def test_maxpool_picks_window_max(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        out, _ = MaxPool2d().forward(x)
        np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])

    def test_deterministic(self):
        net = small_convnet()
        x = np.random.default_rng(0).normal(size=(5, 2, 4, 4))
        a, _ = net.forward(x)
        b, _ = net.forward(x)
        np.testing.assert_array_equal(a, b)


class TestRegionAffineness:
    def test_affine_within_region(self):
        """Along a segment with constant codes the net is affine: 100 random cases."""
        rng = np.random.default_rng(11)
        checked = 0
        while checked < 100:
            sizes = [int(rng.integers(2, 6))] + list(rng.integers(3, 12, size=rng.integers(1, 4))) + [3]
            net = mlp(sizes, seed=int(rng.integers(1 << 30)))
            for layer in net.linear_layers:
                layer.bias = rng.normal(size=layer.bias.shape) * 0.3
            a = rng.normal(size=sizes[0])
            b = a + rng.normal(size=sizes[0]) * 1e-3
            lams = np.linspace(0, 1, 11)
            pts = np.array([lam * a + (1 - lam) * b for lam in lams])
            codes = hidden_signs(net, pts)
            if not (codes == codes[0]).all():
                continue  # the segment crosses a kink; resample
            fa, _ = net.forward(a)
            fb, _ = net.forward(b)
            fp, _ = net.forward(pts)
            expect = lams[:, None] * fa + (1 - lams[:, None]) * fb
            scale = max(np.abs(fa).max(), np.abs(fb).max(), 1.0)
            assert np.abs(fp - expect).max() <= 1e-6 * scale
            checked += 1


class TestGradients:
    def test_single_linear_unit_by_hand(self):
        net = Network([Dense(np.array([[2.0]]), np.array([0.0]), IDENTITY)], (1,))
        loss, grads = loss_and_grads(net, np.array([[1.0]]), np.array([[0.0]]), "mse")
        assert loss == pytest.approx(4.0)
        assert grads[0]["weights"][0, 0] == pytest.approx(4.0)
        assert grads[0]["bias"][0] == pytest.approx(4.0)

    @pytest.mark.parametrize("loss_kind", ["cross_entropy", "mse"])
    def test_mlp_matches_finite_differences(self, loss_kind):
        rng = np.random.default_rng(5)
        net = mlp([4, 7, 6, 3], seed=2)
        for layer in net.linear_layers:
            layer.bias = rng.normal(size=layer.bias.shape) * 0.2
        x = rng.normal(size=(8, 4))
        y = rng.integers(0, 3, size=8) if loss_kind == "cross_entropy" else rng.normal(size=(8, 3))
        self._check(net, x, y, loss_kind, rng, 50)

    def test_conv_leaky_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        net = small_convnet(1, leaky_relu(0.2))
        x = rng.normal(size=(3, 2, 4, 4))
        y = rng.integers(0, 3, size=3)
        self._check(net, x, y, "cross_entropy", rng, 50)

    def _check(self, net, x, y, loss_kind, rng, n_coords):
        _, grads = loss_and_grads(net, x, y, loss_kind)
        params = [(pos, name) for pos in net.linear_positions for name in ("weights", "bias")]
        done = 0
        while done < n_coords:
            pos, name = params[rng.integers(len(params))]
            idx = int(rng.integers(getattr(net.layers[pos], name).size))
            if not codes_stable(net, x, pos, name, idx):
                continue
            a = grads[pos][name].flat[idx]
            n = numeric_grad(net, x, y, pos, name, idx, loss_kind)
            rel = abs(a - n) / max(abs(a), abs(n), 1e-7)
            assert rel < 1e-4, (pos, name, idx, a, n)
            done += 1

    def test_masked_layer_gets_zero_grads(self):
        net = mlp([3, 5, 2], seed=0)
        net.layers[0].mask = np.zeros_like(net.layers[0].weights)
        x = np.random.default_rng(0).normal(size=(4, 3))
        _, grads = loss_and_grads(net, x, np.array([0, 1, 1, 0]), "cross_entropy")
        assert not grads[0]["weights"].any()

    def test_bad_label(self):
        net = mlp([2, 3, 2])
        with pytest.raises(LabelError):
            loss_and_grads(net, np.zeros((2, 2)), np.array([0, 5]), "cross_entropy")


class TestSGD:
    def _net(self, w=0.0):
        return Network([Dense(np.array([[w]]), np.array([0.0]), IDENTITY)], (1,))

    def _grads(self, g=1.0):
        return [{"weights": np.array([[g]]), "bias": np.array([0.0])}]

    def test_plain_step(self):
        net = self._net()
        cfg = TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.0)
        sgd_step(net, self._grads(), cfg)
        assert net.layers[0].weights[0, 0] == pytest.approx(-0.1)

    def test_two_momentum_steps(self):
        # v1 = -0.1, p1 = -0.1; v2 = 0.9 * -0.1 - 0.1 = -0.19, p2 = -0.29
        net = self._net()
        cfg = TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.0)
        state = SGDState(net)
        sgd_step(net, self._grads(), cfg, state)
        sgd_step(net, self._grads(), cfg, state)
        assert net.layers[0].weights[0, 0] == pytest.approx(-0.29)

    def test_weight_decay_enters_update(self):
        net = self._net(1.0)
        sgd_step(net, self._grads(0.0), TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.5))
        assert net.layers[0].weights[0, 0] == pytest.approx(1.0 - 0.1 * 0.5)

    def test_masked_entry_stays_zero(self):
        net = mlp([2, 2, 1], seed=0)
        net.layers[0].mask = np.array([[1.0, 0.0], [1.0, 1.0]])
        net.layers[0].weights *= net.layers[0].mask
        grads = [{"weights": np.ones((2, 2)), "bias": np.ones(2)}, {"weights": np.ones((1, 2)), "bias": np.ones(1)}]
        sgd_step(net, grads, TrainConfig(lr=0.1))
        assert net.layers[0].weights[0, 1] == 0.0

    def test_non_finite_gradient_aborts(self):
        with pytest.raises(DivergenceError):
            sgd_step(self._net(), self._grads(np.nan), TrainConfig(lr=0.1))


class TestKaiming:
    def test_variance_two_over_fan_in(self):
        net = Network([Dense(np.zeros((50_000, 2)), np.zeros(50_000))], (2,))
        init_kaiming(net, seed=0)
        var = net.layers[0].weights.var()
        assert abs(var - 1.0) < 0.05

    def test_same_seed_same_weights(self):
        a, b = mlp([3, 8, 2], seed=4), mlp([3, 8, 2], seed=4)
        for la, lb in zip(a.linear_layers, b.linear_layers):
            assert la.weights.tobytes() == lb.weights.tobytes()

    def test_biases_zero(self):
        net = mlp([3, 8, 2], seed=4)
        assert all(not l.bias.any() for l in net.linear_layers)


class TestTrain:
    def test_zero_epochs(self):
        net = mlp([2, 4, 2], seed=0)
        before = net.copy()
        data = xshape(20, seed=0)
        _, history = train(net, data, TrainConfig(epochs=0))
        assert history == []
        for a, b in zip(net.linear_layers, before.linear_layers):
            np.testing.assert_array_equal(a.weights, b.weights)

    def test_xshape_fcnet_fits(self):
        """2x20 net, 100 epochs of 100 batches = 10000 iterations."""
        data = xshape(1000, seed=0)
        net = mlp([2, 20, 20, 2], seed=0)
        cfg = TrainConfig(epochs=100, batch_size=20, lr=0.05, lr_schedule=TrainConfig.step_decay(100), seed=0)
        _, history = train(net, data, cfg)
        assert history[-1]["train_accuracy"] > 0.95

    def test_eb_callback_with_zero_threshold_never_stops(self):
        data = xshape(100, seed=0)
        net = mlp([2, 8, 2], seed=0)
        cb = EarlyBirdCallback(data.x, EBConfig(threshold=0.0))
        _, history = train(net, data, TrainConfig(epochs=12, batch_size=20, lr=0.05), [cb])
        assert len(history) == 12
        assert cb.report().trigger_epoch is None

    def test_callback_can_stop(self):
        data = xshape(50, seed=0)
        net = mlp([2, 4, 2], seed=0)
        _, history = train(net, data, TrainConfig(epochs=10), [lambda e, n, m: e == 3])
        assert len(history) == 3 and history[-1]["early_stop"]

    def test_metrics_include_test_split(self):
        data = xshape(50, seed=0)
        _, history = train(mlp([2, 4, 2]), data, TrainConfig(epochs=2), test_data=xshape(20, seed=1))
        assert {"train_loss", "train_accuracy", "test_loss", "test_accuracy"} <= set(history[0])

    def test_bit_identical_reruns(self):
        data = xshape(100, seed=0)
        cfg = TrainConfig(epochs=5, batch_size=16, lr=0.05, seed=3)
        a, _ = train(mlp([2, 6, 2], seed=1), data, cfg)
        b, _ = train(mlp([2, 6, 2], seed=1), data, cfg)
        for la, lb in zip(a.linear_layers, b.linear_layers):
            assert la.weights.tobytes() == lb.weights.tobytes()

    def test_mask_permanence(self):
        data = xshape(100, seed=0)
        net = mlp([2, 10, 2], seed=0)
        mask = (np.random.default_rng(0).random(net.layers[0].weights.shape) > 0.5).astype(float)
        net.layers[0].mask = mask
        net.layers[0].weights *= mask
        train(net, data, TrainConfig(epochs=5, batch_size=10, lr=0.05))
        assert not net.layers[0].weights[mask == 0].any()

    def test_divergence_reports_epoch(self):
        # w <- w (1 - 2 lr x^2) with x = 10: the weight grows by ~200x per step
        data = Dataset(np.array([[10.0]]), np.array([[0.0]]))
        net = Network([Dense(np.array([[1.0]]), np.array([0.0]), IDENTITY)], (1,))
        with pytest.raises(DivergenceError) as info, np.errstate(all="ignore"):
            train(net, data, TrainConfig(epochs=500, batch_size=1, lr=1.0, momentum=0.0, loss="mse"))
        assert info.value.epoch >= 1

    def test_accuracy_helper(self):
        net = Network([Dense(np.eye(2), np.zeros(2), IDENTITY)], (2,))
        assert accuracy(net, np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 0])) == 0.5


class TestTrainConfig:
    def test_schedule_milestone_beyond_epochs(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=10, lr_schedule={10: 0.1})

    @pytest.mark.parametrize("kwargs", [{"momentum": 1.0}, {"lr": 0.0}, {"weight_decay": -1},
                                        {"batch_size": 0}, {"loss": "hinge"}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_step_decay(self):
        cfg = TrainConfig(epochs=160, lr=0.1, lr_schedule=TrainConfig.step_decay(160))
        assert cfg.lr_at(79) == pytest.approx(0.1)
        assert cfg.lr_at(80) == pytest.approx(0.01)
        assert cfg.lr_at(120) == pytest.approx(0.001)


class TestFlops:
    def test_dense(self):
        assert flops_estimate(Network([Dense(np.zeros((3, 2)), np.zeros(3))], (2,))) == 6

    def test_conv_pad_one(self):
        net = Network([Conv2d(np.zeros((1, 1, 3, 3)), np.zeros(1), padding=1)], (1, 8, 8))
        assert flops_estimate(net) == 576

    def test_halving_units_halves_layer_macs(self):
        from splineprune.pruning import magnitude_prune
        net = Network([Dense(np.ones((4, 5)), np.zeros(4))], (5,))
        full = flops_estimate(net)
        wide = mlp([5, 4, 1], seed=0)
        pruned, _ = magnitude_prune(wide, 0.5)
        assert flops_estimate(Network([pruned.layers[0]], (5,))) == full // 2

    def test_masked_weights_not_counted(self):
        layer = Dense(np.ones((3, 2)), np.zeros(3), mask=np.array([[1, 0], [1, 1], [0, 0]], float))
        assert flops_estimate(Network([layer], (2,))) == 3


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=3, max_size=4), st.integers(0, 1000))
def test_forward_shapes_and_preacts(sizes, seed):
    net = mlp(sizes, seed=seed)
    x = np.random.default_rng(seed).normal(size=(3, sizes[0]))
    out, pre = net.forward(x)
    assert out.shape == (3, sizes[-1])
    assert [p.shape[1] for p in pre] == sizes[1:]
    np.testing.assert_allclose(np.maximum(pre[0], 0), net.layers[0].activation(pre[0]))
