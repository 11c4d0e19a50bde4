"""Central-difference gradient checking for :class:`~fibinetpp.tensor.Layer`."""
from __future__ import annotations

import numpy as np

from .bilinear import BilinearHadamard, BilinearInner, compression_layer
from .errors import ConfigError, DeterminismError
from .features import CategoricalField, EncodedBatch, FeatureEmbedding, FeatureSchema, NumericalField
from .models import Arch, build, build_mlp
from .normalization import BatchNorm, FeatureNormalization, LayerNorm
from .senet import SENet, SENetPlus, Excitation, Squeeze, reweight
from .tensor import Layer, Linear, sigmoid


class KinkCrossing(DeterminismError):
    """A finite-difference step changed which side of a ReLU/max kink some unit is on."""


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check_report(layer, x, epsilon: float = 1e-5, *, probe=None,
                      detect_kinks: bool = False) -> dict[str, float]:
    """Max relative error per parameter (and ``"input"`` when differentiable).

    The scalar objective is ``sum(output * probe)``; ``probe`` defaults to all
    ones, i.e. the plain sum of outputs. Layers whose outputs have a constant
    sum (normalizations) need a non-uniform probe, otherwise the analytic
    gradient is identically zero and only rounding noise is compared.
    Running statistics touched by train-mode forwards are restored after every
    evaluation so the check leaves the layer as it found it. With
    ``detect_kinks`` a :class:`KinkCrossing` is raised as soon as a perturbed
    forward changes the ReLU/max-pool activation pattern, i.e. the point is
    too close to a non-differentiable surface for central differences.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ConfigError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    saved = {k: v.copy() for k, v in layer.buffers().items()}

    def restore():
        for k, v in layer.buffers().items():
            v[...] = saved[k]

    def run(inp):
        out = layer.forward(inp)
        restore()
        return out

    first, second = run(x), run(x)
    if not np.array_equal(first, second):
        raise DeterminismError(f"layer {layer.name!r} is not deterministic: two forwards differ")
    w = np.ones_like(first) if probe is None else np.asarray(probe, dtype=np.float64)
    base_pattern = activation_pattern(layer) if detect_kinks else None

    def objective(inp):
        value = float(np.sum(run(inp) * w))
        if base_pattern is not None:
            pattern = activation_pattern(layer)
            if any(not np.array_equal(a, b) for a, b in zip(base_pattern, pattern)):
                raise KinkCrossing(f"layer {layer.name!r}: a step of {epsilon} crosses a kink")
        return value

    layer.zero_grad()
    run(x)
    input_grad = layer.backward(w.copy())
    report = {}
    for p in layer.parameters():
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = objective(x)
            flat[i] = orig - epsilon
            down = objective(x)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * epsilon)
        report[p.name] = _relative_error(analytic, numeric)

    if input_grad is not None and isinstance(x, np.ndarray) and x.dtype.kind == "f":
        numeric = np.zeros_like(x)
        xp = x.copy()
        flat = xp.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = objective(xp)
            flat[i] = orig - epsilon
            down = objective(xp)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * epsilon)
        report["input"] = _relative_error(np.asarray(input_grad), numeric)
    return report


def grad_check(layer, x, epsilon: float = 1e-5, *, probe=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    report = grad_check_report(layer, x, epsilon, probe=probe)
    return max(report.values(), default=0.0)


def activation_pattern(layer) -> list[np.ndarray]:
    """ReLU on/off masks and max-pool argmax indices of the last forward pass."""
    out, stack = [], [layer]
    while stack:
        node = stack.pop()
        probe = getattr(node, "activation_pattern", None)
        if probe is not None:
            out.append(probe())
        stack.extend(node._children)
    return out


def check_at_random_point(layer, draw, rng: np.random.Generator, epsilon: float = 1e-5,
                          attempts: int = 50) -> dict[str, float]:
    """Grad-check ``layer`` at ``draw(rng)``, redrawing while a step crosses a kink.

    Each attempt also draws a fresh standard-normal probe over the outputs.
    """
    for _ in range(attempts):
        x = draw(rng)
        out = layer.forward(x)
        probe = rng.standard_normal(out.shape)
        try:
            return grad_check_report(layer, x, epsilon, probe=probe, detect_kinks=True)
        except KinkCrossing:
            continue
    raise DeterminismError(f"every one of {attempts} draws lies within {epsilon} of a kink")


class _Reweight(Layer):
    """``[A, V] -> A * V`` so both operands of the re-weight step get checked."""

    def __init__(self, width: int):
        super().__init__("reweight")
        self.width = width
        self._cache = None

    def forward(self, x):
        A, V = x[:, :self.width], x[:, self.width:]
        self._cache = (A, V)
        return reweight(A, V)

    def backward(self, grad):
        self._require_forward()
        A, V = self._cache
        return np.concatenate([grad * V, grad * A], axis=1)


class _Fuse(Layer):
    """``[v_o, v_w] -> per-field LN(v_o + v_w)``."""

    def __init__(self, f: int, d: int):
        super().__init__("")
        self.width = f * d
        self.ln = self.add_child(LayerNorm(f, d, "fuse_ln"))

    def forward(self, x):
        return self.ln.forward(x[:, :self.width] + x[:, self.width:])

    def backward(self, grad):
        g = self.ln.backward(grad)
        return np.concatenate([g, g], axis=1)


class _Prediction(Layer):
    """``sigmoid(w_0 + w . h)`` over the last hidden layer."""

    def __init__(self, h: int, rng):
        super().__init__("")
        self.head = self.add_child(Linear(h, 1, rng, name="head", component="prediction"))
        self._cache = None

    def forward(self, x):
        p = sigmoid(self.head.forward(x))
        self._cache = p
        return p

    def backward(self, grad):
        self._require_forward()
        p = self._cache
        return self.head.backward(grad * p * (1.0 - p))


def gradcheck_schema(f: int, vocab_size: int = 5) -> FeatureSchema:
    """``f`` fields, numerical ones first (``f // 2`` of them), unit min-max range."""
    n_num = f // 2
    fields = [NumericalField(f"I{i + 1}", 0.0, 1.0) for i in range(n_num)]
    fields += [CategoricalField(f"C{i + 1}", vocab_size) for i in range(f - n_num)]
    return FeatureSchema(tuple(fields))


def random_batch(schema: FeatureSchema, rng: np.random.Generator, batch: int) -> EncodedBatch:
    f = len(schema)
    highs = np.array([s.vocab_size + 1 if isinstance(s, CategoricalField) else 1
                      for s in schema.fields])
    ids = rng.integers(0, highs, size=(batch, f))
    return EncodedBatch(ids, rng.random((batch, f)), None)


def layer_suite(f: int, d: int, hyper, seed: int, batch: int = 6) -> dict:
    """``{name: (layer, draw)}`` covering every building block plus the whole graphs.

    ``draw(rng)`` returns an input for the layer. The DNN, FiBiNet and
    FiBiNet++ graphs are checked at the logit.
    """
    rng = np.random.default_rng(seed)
    schema = gradcheck_schema(f)
    cat = schema.is_categorical
    n_cat, n_num = sum(cat), len(cat) - sum(cat)
    n_pairs = f * (f - 1) // 2
    fd = f * d
    z_width = 2 * hyper.g * f
    dense = lambda width: (lambda r: r.standard_normal((batch, width)))  # noqa: E731
    data = lambda r: random_batch(schema, r, batch)  # noqa: E731

    suite = {
        "embedding": (FeatureEmbedding(schema, d, rng), data),
        "batch_norm": (BatchNorm(max(n_cat, 1), d, "bn"), dense(max(n_cat, 1) * d)),
        "layer_norm": (LayerNorm(max(n_num, 1), d, "ln"), dense(max(n_num, 1) * d)),
        "feature_norm": (FeatureNormalization(schema, d), dense(fd)),
        "bilinear_hadamard": (BilinearHadamard(f, d, hyper.field_type, rng, "bilinear"), dense(fd)),
        "bilinear_inner": (BilinearInner(f, d, hyper.field_type, rng, "bilinear"), dense(fd)),
        "compress": (compression_layer(n_pairs, hyper.m, rng), dense(n_pairs)),
        "squeeze": (Squeeze(f, d, hyper.g), dense(fd)),
        "excite": (Excitation(z_width, fd, hyper.r, rng), dense(z_width)),
        "reweight": (_Reweight(fd), dense(2 * fd)),
        "fuse": (_Fuse(f, d), dense(2 * fd)),
        "senet_plus": (SENetPlus(f, d, hyper.g, hyper.r, rng), dense(fd)),
        "senet": (SENet(f, d, hyper.r, rng), dense(fd)),
        "mlp": (build_mlp(hyper.m + fd, hyper.mlp, rng), dense(hyper.m + fd)),
        "prediction": (_Prediction(hyper.mlp[-1], rng), dense(hyper.mlp[-1])),
    }
    for arch in Arch:
        suite[f"graph:{arch.value}"] = (build(arch, schema, hyper, seed=seed).logit_view(), data)
    return suite


def run_suite(f: int, d: int, hyper, seeds, epsilon: float = 1e-5, batch: int = 6,
              skip=()) -> dict[str, float]:
    """Worst relative error per suite entry over ``seeds``; names in ``skip`` are left out."""
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        for name, (layer, draw) in layer_suite(f, d, hyper, seed, batch).items():
            if name in skip:
                continue
            report = check_at_random_point(layer, draw, rng, epsilon)
            worst[name] = max(worst.get(name, 0.0), max(report.values(), default=0.0))
    return worst
