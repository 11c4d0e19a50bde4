import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fibinetpp.errors import DimensionError, InputError, StateError
from fibinetpp.tensor import (Linear, ReLU, Sequential, checked, matmul, relu, sigmoid, tensor)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class TestTensor:
    def test_rank_and_dtype(self):
        t = tensor([[1, 2], [3, 4]])
        assert t.dtype == np.float64 and t.flags.c_contiguous and t.shape == (2, 2)

    @pytest.mark.parametrize("bad", [np.zeros((2, 2, 2)), np.float64(3.0), np.zeros((0, 3))])
    def test_rejects_bad_shapes(self, bad):
        with pytest.raises(DimensionError):
            tensor(bad)

    def test_checked_mode_rejects_non_finite(self):
        tensor([1.0, np.nan])  # release mode skips the scan
        with checked():
            with pytest.raises(InputError):
                tensor([1.0, np.inf])
        with pytest.raises(InputError):
            tensor([np.nan], check=True)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(np.eye(2), a), a)

    def test_hand_value(self):
        assert matmul([[1, 2]], [[3], [4]]).tolist() == [[11.0]]

    def test_annihilator(self):
        rng = np.random.default_rng(0)
        assert np.array_equal(matmul(np.zeros((1, 5)), rng.normal(size=(5, 3))), np.zeros((1, 3)))

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
    def test_identity_both_sides(self, a):
        n, k = a.shape
        assert np.array_equal(matmul(np.eye(n), a), a)
        assert np.array_equal(matmul(a, np.eye(k)), a)


class TestActivations:
    def test_relu_values(self):
        assert relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
        assert not relu(-np.arange(1.0, 5.0)).any()

    def test_relu_layer_gradient(self):
        layer = ReLU()
        layer.forward(np.array([[3.0, -3.0]]))
        assert layer.backward(np.ones((1, 2))).tolist() == [[1.0, 0.0]]
        eps = 1e-6
        for x, expected in ((3.0, 1.0), (-3.0, 0.0)):
            numeric = (relu(np.array(x + eps)) - relu(np.array(x - eps))) / (2 * eps)
            assert numeric == pytest.approx(expected, abs=1e-9)

    def test_sigmoid_zero(self):
        assert sigmoid(0.0) == 0.5

    def test_sigmoid_large_input_is_stable(self):
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            s = sigmoid(40.0)
            tiny = sigmoid(-800.0)
        # 1 - 4.2e-18 is closer to 1.0 than to the next double below it, so the
        # correctly rounded float64 value is exactly 1.0
        with mpmath.workdps(50):
            exact = 1 / (1 + mpmath.exp(-40))
            assert s == float(exact) and s >= 1 - 1e-15
            assert tiny == float(1 / (1 + mpmath.exp(800)))

    def test_sigmoid_symmetry(self):
        assert sigmoid(-1.7) == pytest.approx(1 - sigmoid(1.7), abs=1e-15)

    @given(finite)
    def test_sigmoid_in_unit_interval(self, x):
        s = sigmoid(x)
        assert 0.0 <= s <= 1.0


class TestLayerContract:
    def test_backward_before_forward(self):
        with pytest.raises(StateError):
            Linear(2, 2, np.random.default_rng(0), name="l").backward(np.ones((1, 2)))

    def test_forward_is_pure(self):
        rng = np.random.default_rng(1)
        net = Sequential([Linear(4, 5, rng, name="a"), ReLU(), Linear(5, 2, rng, name="b")])
        x = rng.normal(size=(3, 4))
        assert np.array_equal(net.forward(x), net.forward(x))

    def test_gradients_accumulate_exactly(self):
        rng = np.random.default_rng(2)
        net = Sequential([Linear(4, 5, rng, name="a"), ReLU(), Linear(5, 2, rng, name="b")])
        x, g = rng.normal(size=(3, 4)), rng.normal(size=(3, 2))
        net.forward(x)
        net.backward(g)
        once = [p.grad.copy() for p in net.parameters()]
        net.forward(x)
        net.backward(g)
        for p, first in zip(net.parameters(), once):
            assert np.array_equal(p.grad, 2 * first)
        net.zero_grad()
        assert all(not p.grad.any() for p in net.parameters())

    def test_parameter_names_and_shapes(self):
        layer = Linear(3, 2, np.random.default_rng(0), name="fc")
        assert [p.name for p in layer.parameters()] == ["fc.weight", "fc.bias"]
        for p in layer.parameters():
            assert p.grad.shape == p.value.shape

    def test_linear_init_bound(self):
        layer = Linear(16, 8, np.random.default_rng(0), name="fc")
        assert np.abs(layer.weight.value).max() <= 1 / 4
        assert not layer.bias.value.any()

    @settings(max_examples=25)
    @given(st.integers(0, 2**32 - 1))
    def test_linear_matches_matmul(self, seed):
        rng = np.random.default_rng(seed)
        layer = Linear(3, 4, rng, name="fc")
        x = rng.normal(size=(2, 3))
        np.testing.assert_allclose(layer.forward(x), x @ layer.weight.value.T + layer.bias.value,
                                   rtol=1e-14)
