import numpy as np
import pytest

from toriscope.tensor_core import (
    AdamState,
    BatchNorm1d,
    ContextAttention,
    Conv1d,
    GradientCheckError,
    Linear,
    MaxPool1d,
    ReLU,
    ShapeError,
    adam_step,
    check_layer,
    gradient_check,
)

F64 = np.float64
TOL = 1e-5


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def worst(errors):
    return max(errors.values())


class TestConv1d:
    def test_identity_kernel(self, rng):
        conv = Conv1d(3, 3, rng=rng, dtype=F64)
        w = np.zeros((3, 3, 3))
        for c in range(3):
            w[c, c, 1] = 1.0
        conv.params["weight"][...] = w
        x = rng.standard_normal((2, 3, 9))
        np.testing.assert_array_equal(conv.forward(x), x)

    def test_all_ones_hand_convolution(self):
        conv = Conv1d(1, 1, dtype=F64)
        conv.params["weight"][...] = 1.0
        out = conv.forward(np.ones((1, 1, 4)))
        np.testing.assert_array_equal(out[0, 0], [2.0, 3.0, 3.0, 2.0])

    @pytest.mark.parametrize("t", [1, 2, 5, 17])
    def test_same_length(self, rng, t):
        conv = Conv1d(2, 4, rng=rng)
        assert conv.forward(rng.standard_normal((3, 2, t)).astype(np.float32)).shape == (3, 4, t)

    def test_gradients(self, rng):
        conv = Conv1d(3, 4, rng=rng, dtype=F64)
        conv.params["bias"][...] = rng.standard_normal(4)
        assert worst(check_layer(conv, rng.standard_normal((2, 3, 6)), rng)) < TOL

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            Conv1d(3, 4, rng=rng).forward(np.zeros((1, 2, 5), np.float32))


class TestBatchNorm:
    def test_constant_input_gives_zero(self):
        bn = BatchNorm1d(2, dtype=F64)
        x = np.empty((3, 2, 5))
        x[:, 0], x[:, 1] = 4.0, -1.5
        np.testing.assert_allclose(bn.forward(x), 0.0, atol=1e-12)

    def test_standardized_fixed_point(self, rng):
        bn = BatchNorm1d(3, dtype=F64)
        x = rng.standard_normal((4, 3, 50))
        x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
        np.testing.assert_allclose(bn.forward(x), x, atol=1e-4)

    def test_train_statistics(self, rng):
        bn = BatchNorm1d(4, dtype=F64)
        x = 3.0 + 5.0 * rng.standard_normal((8, 4, 40))
        y = bn.forward(x)
        assert np.all(np.abs(y.mean(axis=(0, 2))) < 1e-6)
        assert np.all(np.abs(y.var(axis=(0, 2)) - 1.0) < 1e-4)

    def test_running_stats_and_eval(self, rng):
        bn = BatchNorm1d(2, dtype=F64)
        x = 2.0 + rng.standard_normal((4, 2, 10))
        bn.forward(x)
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2)))
        assert np.all(bn.running_var >= 0)
        bn.training = False
        y = bn.forward(x)
        expected = (x - bn.running_mean[None, :, None]) / np.sqrt(bn.running_var[None, :, None] + 1e-5)
        np.testing.assert_allclose(y, expected)

    def test_eval_before_train_errors(self):
        bn = BatchNorm1d(2)
        bn.training = False
        with pytest.raises(RuntimeError, match="uninitialized"):
            bn.forward(np.zeros((1, 2, 3), np.float32))

    def test_gradients_train(self, rng):
        bn = BatchNorm1d(3, dtype=F64)
        bn.params["scale"][...] = rng.uniform(0.5, 2.0, 3)
        bn.params["shift"][...] = rng.standard_normal(3)
        assert worst(check_layer(bn, rng.standard_normal((2, 3, 6)), rng)) < TOL

    def test_gradients_eval(self, rng):
        bn = BatchNorm1d(3, dtype=F64)
        bn.forward(rng.standard_normal((2, 3, 6)))
        bn.training = False
        assert worst(check_layer(bn, rng.standard_normal((2, 3, 6)), rng)) < TOL


class TestReLU:
    def test_values(self):
        np.testing.assert_array_equal(ReLU().forward(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_positive_identity(self, rng):
        x = rng.uniform(0.1, 3.0, (4, 5))
        np.testing.assert_array_equal(ReLU().forward(x), x)

    def test_gradients_away_from_kink(self, rng):
        x = rng.standard_normal((2, 3, 8))
        x[np.abs(x) < 1e-3] = 0.5
        assert worst(check_layer(ReLU(), x, rng)) < TOL

    def test_subgradient_at_zero(self):
        r = ReLU()
        r.forward(np.array([0.0]))
        assert r.backward(np.array([1.0]))[0] == 0.0


class TestMaxPool:
    def test_length_600_window_5(self, rng):
        assert MaxPool1d(5).forward(rng.standard_normal((1, 2, 600))).shape == (1, 2, 120)

    def test_remainder_dropped(self, rng):
        assert MaxPool1d(4).forward(rng.standard_normal((1, 1, 10))).shape == (1, 1, 2)

    def test_increasing_picks_last(self):
        x = np.arange(12, dtype=float).reshape(1, 1, 12)
        np.testing.assert_array_equal(MaxPool1d(4).forward(x)[0, 0], [3.0, 7.0, 11.0])

    def test_gradient_goes_to_first_argmax(self):
        p = MaxPool1d(3)
        p.forward(np.array([[[1.0, 5.0, 5.0]]]))
        np.testing.assert_array_equal(p.backward(np.array([[[2.0]]]))[0, 0], [0.0, 2.0, 0.0])

    def test_gradients(self, rng):
        # a permutation keeps every window maximum unique
        x = rng.permutation(48).astype(float).reshape(2, 3, 8) / 10.0
        assert worst(check_layer(MaxPool1d(3), x, rng)) < TOL

    def test_bad_window(self):
        with pytest.raises(ValueError):
            MaxPool1d(0)


class TestLinear:
    def test_identity(self, rng):
        lin = Linear(4, 4, dtype=F64)
        lin.params["weight"][...] = np.eye(4)
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(lin.forward(x), x)

    def test_zero_input_gives_bias(self):
        lin = Linear(3, 2, dtype=F64)
        lin.params["bias"][...] = [1.5, -2.0]
        np.testing.assert_array_equal(lin.forward(np.zeros((2, 3))), [[1.5, -2.0], [1.5, -2.0]])

    def test_gradients(self, rng):
        lin = Linear(5, 3, rng=rng, dtype=F64)
        x = rng.standard_normal((4, 5))
        errors = check_layer(lin, x, rng)
        assert worst(errors) < 1e-7

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Linear(3, 2).forward(np.zeros((2, 4), np.float32))


class TestContextAttention:
    def test_single_frame(self, rng):
        att = ContextAttention(8, 2, rng=rng, dtype=F64)
        x = rng.standard_normal((3, 1, 8))
        np.testing.assert_allclose(att.forward(x), x[:, 0], atol=1e-15)

    def test_identical_frames(self, rng):
        att = ContextAttention(8, 4, rng=rng, dtype=F64)
        frame = rng.standard_normal(8)
        x = np.tile(frame, (2, 6, 1))
        np.testing.assert_allclose(att.forward(x), np.tile(frame, (2, 1)), atol=1e-12)

    def test_heads_must_divide(self):
        with pytest.raises(ShapeError):
            ContextAttention(10, 3)

    def test_uniform_limit_permutation_invariant(self, rng):
        att = ContextAttention(8, 2, rng=rng, dtype=F64)
        att.params["weight"][...] = 0.0
        att.params["bias"][...] = 0.0
        x = rng.standard_normal((2, 7, 8))
        a = att.forward(x)
        b = att.forward(x[:, rng.permutation(7)])
        np.testing.assert_allclose(a, b, atol=1e-9)
        np.testing.assert_allclose(a, x.mean(axis=1), atol=1e-9)

    def test_weights_are_distributions(self, rng):
        att = ContextAttention(8, 2, rng=rng, dtype=F64)
        att.forward(rng.standard_normal((2, 5, 8)))
        np.testing.assert_allclose(att.last_weights.sum(axis=1), 1.0)

    def test_gradients(self, rng):
        att = ContextAttention(8, 2, rng=rng, dtype=F64)
        att.params["bias"][...] = rng.standard_normal(8) * 0.1
        assert worst(check_layer(att, rng.standard_normal((2, 5, 8)), rng)) < TOL


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState())
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_scalar(self):
        p = {"w": np.array([0.3])}
        g = 0.5
        state = adam_step(p, {"w": np.array([g])}, AdamState(learning_rate=0.001))
        # m = 0.1 g, v = 0.001 g^2; bias corrected they are g and g^2
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        expected = 0.3 - 0.001 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert p["w"][0] == pytest.approx(expected, abs=1e-15)
        assert state.step == 1

    def test_second_moment_grows(self):
        p = {"w": np.array([1.0])}
        state = AdamState()
        adam_step(p, {"w": np.array([0.7])}, state)
        v1 = state.second_moment["w"].copy()
        adam_step(p, {"w": np.array([0.7])}, state)
        assert state.second_moment["w"][0] > v1[0] >= 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())

    def test_deterministic(self):
        def run():
            r = np.random.default_rng(5)
            p = {"w": r.standard_normal(10).astype(np.float32)}
            st = AdamState()
            for _ in range(20):
                adam_step(p, {"w": (p["w"] * 2 + r.standard_normal(10)).astype(np.float32)}, st)
            return p["w"]

        np.testing.assert_array_equal(run(), run())


class TestGradientCheck:
    def test_quadratic(self):
        x = np.array([1.0, -2.0, 0.5])
        err = gradient_check(lambda: float(np.sum(x ** 2)), x, 2 * x)
        assert err < 1e-8

    def test_detects_wrong_gradient(self):
        x = np.array([1.0, 2.0])
        assert gradient_check(lambda: float(np.sum(x ** 2)), x, 3 * x) > 0.1

    def test_requires_float64(self):
        x = np.ones(2, np.float32)
        with pytest.raises(TypeError):
            gradient_check(lambda: 0.0, x, x)

    def test_non_finite(self):
        x = np.array([0.0])
        with pytest.raises(GradientCheckError), np.errstate(invalid="ignore", divide="ignore"):
            gradient_check(lambda: float(np.log(x[0])), x, np.array([1.0]))
