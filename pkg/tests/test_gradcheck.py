import numpy as np
import pytest

from fibinetpp.errors import ConfigError, DeterminismError
from fibinetpp.gradcheck import (KinkCrossing, check_at_random_point, grad_check,
                                 grad_check_report, layer_suite)
from fibinetpp.models import ModelHyper
from fibinetpp.tensor import Layer, Linear, ReLU, Sequential

HYPER = ModelHyper(d=4, mlp=(8, 8), m=5, g=2, r=3)


def test_linear_layer_is_exact():
    rng = np.random.default_rng(0)
    layer = Linear(5, 3, rng, name="fc")
    assert grad_check(layer, rng.normal(size=(4, 5))) <= 1e-9


def test_relu_away_from_kink():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 6))
    x += np.sign(x) * 20 * 1e-5  # at least 10 epsilon from zero
    net = Sequential([ReLU(), Linear(6, 2, rng, name="fc")])
    assert grad_check(net, x) <= 1e-6


class Noisy(Layer):
    def __init__(self):
        super().__init__("noisy")
        self.rng = np.random.default_rng(0)

    def forward(self, x):
        return x + self.rng.normal(size=x.shape)

    def backward(self, grad):
        return grad


def test_non_deterministic_layer():
    with pytest.raises(DeterminismError):
        grad_check(Noisy(), np.ones((2, 2)))


def test_epsilon_range():
    layer = Linear(2, 2, np.random.default_rng(0), name="fc")
    for eps in (0.0, 0.1):
        with pytest.raises(ConfigError):
            grad_check(layer, np.ones((1, 2)), eps)


class BrokenLinear(Linear):
    def backward(self, grad):
        out = super().backward(grad)
        self.weight.grad[0, 0] += 1e-3
        return out


def test_detects_wrong_gradient():
    layer = BrokenLinear(3, 2, np.random.default_rng(0), name="fc")
    report = grad_check_report(layer, np.ones((2, 3)))
    assert report["fc.weight"] > 1e-4 and report["input"] < 1e-9


def test_kink_crossing_is_reported():
    x = np.array([[3e-6, 1.0]])
    with pytest.raises(KinkCrossing):
        grad_check_report(ReLU(), x, 1e-5, detect_kinks=True)


def test_random_point_redraws_past_kinks():
    draws = iter([np.array([[1e-7, 2.0]]), np.array([[0.5, 2.0]])])
    seen = []

    def draw(rng):
        seen.append(next(draws))
        return seen[-1]
    report = check_at_random_point(ReLU(), draw, np.random.default_rng(0))
    assert len(seen) == 2 and report["input"] <= 1e-9


def test_buffers_left_untouched():
    layer, draw = layer_suite(4, 4, HYPER, seed=0)["batch_norm"]
    before = {k: v.copy() for k, v in layer.buffers().items()}
    grad_check(layer, draw(np.random.default_rng(0)))
    assert all(np.array_equal(before[k], v) for k, v in layer.buffers().items())


@pytest.mark.parametrize("name", ["embedding", "batch_norm", "feature_norm", "bilinear_inner",
                                  "squeeze", "fuse", "senet", "graph:fibinetpp"])
def test_suite_entries_single_seed(name):
    layer, draw = layer_suite(4, 4, HYPER, seed=11)[name]
    report = check_at_random_point(layer, draw, np.random.default_rng(3))
    assert max(report.values()) <= 1e-4
