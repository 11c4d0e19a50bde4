"""DNN, FiBiNet and FiBiNet++ graphs, prediction and parameter accounting."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from .bilinear import BilinearFieldType, BilinearHadamard, BilinearPlus
from .errors import ConfigError
from .features import CategoricalField, EncodedBatch, FeatureEmbedding, FeatureSchema
from .normalization import BatchNorm, FeatureNormalization
from .senet import SENet, SENetPlus
from .tensor import Layer, Linear, ReLU, Sequential, sigmoid


class Arch(str, enum.Enum):
    DNN = "dnn"
    FIBINET = "fibinet"
    FIBINETPP = "fibinetpp"


@dataclass(frozen=True)
class ModelHyper:
    d: int = 10
    mlp: tuple[int, ...] = (400, 400, 400)
    m: int = 50
    g: int = 2
    r: float = 3
    field_type: str = BilinearFieldType.FIELD_INTERACTION.value

    def __post_init__(self):
        object.__setattr__(self, "mlp", tuple(int(h) for h in self.mlp))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mlp"] = list(self.mlp)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelHyper":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


def validate(arch: Arch, hyper: ModelHyper) -> None:
    if hyper.d < 1:
        raise ConfigError(f"embedding size d must be >= 1, got {hyper.d}")
    if not hyper.mlp or any(h < 1 for h in hyper.mlp):
        raise ConfigError(f"MLP widths must be a non-empty list of positive ints, got {hyper.mlp}")
    if arch is Arch.FIBINETPP:
        if hyper.g < 1 or hyper.d % hyper.g:
            raise ConfigError(f"d={hyper.d} must be divisible by group count g={hyper.g}")
        if hyper.m < 1:
            raise ConfigError(f"compression size m must be >= 1, got {hyper.m}")
    if arch is not Arch.DNN:
        if hyper.r <= 0:
            raise ConfigError(f"reduction ratio r must be positive, got {hyper.r}")
        try:
            BilinearFieldType(hyper.field_type)
        except ValueError:
            raise ConfigError(f"unknown bilinear field type {hyper.field_type!r}") from None


class LinearPart(Layer):
    """One scalar weight per feature: a row per categorical value, one per numerical field."""

    def __init__(self, schema: FeatureSchema, name: str = "linear"):
        super().__init__(name)
        self.schema = schema
        self.weights = []
        for spec in schema.fields:
            rows = spec.vocab_size + 1 if isinstance(spec, CategoricalField) else 1
            self.weights.append(self.add_param(spec.name, np.zeros(rows), "linear_part"))
        self._cat = schema.is_categorical
        self._cache = None

    def forward(self, batch: EncodedBatch):
        out = np.zeros(len(batch))
        for i, w in enumerate(self.weights):
            out += w.value[batch.ids[:, i]] if self._cat[i] else batch.values[:, i] * w.value[0]
        self._cache = batch
        return out

    def backward(self, grad):
        self._require_forward()
        batch = self._cache
        for i, w in enumerate(self.weights):
            if self._cat[i]:
                np.add.at(w.grad, batch.ids[:, i], grad)
            else:
                w.grad[0] += batch.values[:, i] @ grad
        return None


def build_mlp(n_in: int, widths, rng) -> Sequential:
    layers = []
    for l, h in enumerate(widths):
        comp = "mlp_first_layer" if l == 0 else "deeper_mlp"
        layers.append(Linear(n_in, h, rng, name=f"mlp.{l}", component=comp,
                             bias_component="deeper_mlp"))
        layers.append(ReLU(f"mlp.{l}.relu"))
        n_in = h
    return Sequential(layers, "mlp")


class CTRModel(Layer):
    """An assembled CTR graph mapping an :class:`EncodedBatch` to click probabilities.

    ``forward`` returns a length-B vector of probabilities; ``backward`` takes
    the gradient with respect to those probabilities. Training code uses
    :meth:`backward_logits` to skip the sigmoid derivative.
    """

    def __init__(self, arch, schema: FeatureSchema, hyper: ModelHyper, seed: int = 0,
                 init: bool = True):
        super().__init__("")
        self.arch = Arch(arch)
        validate(self.arch, hyper)
        self.schema, self.hyper, self.seed = schema, hyper, seed
        rng = np.random.default_rng(seed)
        f, d = len(schema), hyper.d
        self.f = f
        self.embedding = self.add_child(FeatureEmbedding(schema, d, rng, init=init))
        self.norm = self.bilinear = self.bilinear2 = self.senet = self.linear = None
        if self.arch is Arch.DNN:
            width = f * d
        elif self.arch is Arch.FIBINET:
            self.senet = self.add_child(SENet(f, d, hyper.r, rng, "senet"))
            self.bilinear = self.add_child(
                BilinearHadamard(f, d, hyper.field_type, rng, "bilinear", init))
            self.bilinear2 = self.add_child(
                BilinearHadamard(f, d, hyper.field_type, rng, "bilinear_senet", init))
            self.linear = self.add_child(LinearPart(schema))
            width = 2 * self.bilinear.n_pairs * d
        else:
            self.norm = self.add_child(FeatureNormalization(schema, d, "norm"))
            self.bilinear = self.add_child(
                BilinearPlus(f, d, hyper.m, hyper.field_type, rng, "bilinear_plus", init))
            self.senet = self.add_child(SENetPlus(f, d, hyper.g, hyper.r, rng, "senet_plus"))
            width = hyper.m + f * d
        self.mlp_input_width = width
        self.mlp = self.add_child(build_mlp(width, hyper.mlp, rng))
        self.head = self.add_child(Linear(hyper.mlp[-1], 1, rng, name="head", component="prediction"))
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise ConfigError("parameter names are not unique")
        self._cache = None

    def logits(self, batch: EncodedBatch) -> np.ndarray:
        emb = self.embedding.forward(batch)
        if self.arch is Arch.DNN:
            h0 = emb
        elif self.arch is Arch.FIBINET:
            p = self.bilinear.forward(emb)
            q = self.bilinear2.forward(self.senet.forward(emb))
            h0 = np.concatenate([p, q], axis=1)
        else:
            v = self.norm.forward(emb)
            h0 = np.concatenate([self.bilinear.forward(v), self.senet.forward(v)], axis=1)
        z = self.head.forward(self.mlp.forward(h0))[:, 0]
        if self.linear is not None:
            z = z + self.linear.forward(batch)
        return z

    def forward(self, batch: EncodedBatch) -> np.ndarray:
        z = self.logits(batch)
        p = sigmoid(z)
        self._cache = p
        return p

    def backward(self, grad):
        self._require_forward()
        p = self._cache
        return self.backward_logits(np.asarray(grad) * p * (1.0 - p))

    def backward_logits(self, dz):
        dz = np.asarray(dz, dtype=np.float64)
        if self.linear is not None:
            self.linear.backward(dz)
        dh0 = self.mlp.backward(self.head.backward(dz[:, None]))
        if self.arch is Arch.DNN:
            demb = dh0
        elif self.arch is Arch.FIBINET:
            n = self.bilinear.n_pairs * self.hyper.d
            demb = self.bilinear.backward(dh0[:, :n])
            demb = demb + self.senet.backward(self.bilinear2.backward(dh0[:, n:]))
        else:
            m = self.hyper.m
            dv = self.bilinear.backward(dh0[:, :m]) + self.senet.backward(dh0[:, m:])
            demb = self.norm.backward(dv)
        self.embedding.backward(demb)
        return None

    def batch_norms(self) -> list[BatchNorm]:
        out, stack = [], [self]
        while stack:
            layer = stack.pop()
            if isinstance(layer, BatchNorm):
                out.append(layer)
            stack.extend(layer._children)
        return out

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def logit_view(self) -> "Logits":
        return Logits(self)


class Logits(Layer):
    """The model up to (not including) the sigmoid, as a layer of its own.

    Gradient checks run here: a saturated sigmoid would otherwise shrink every
    gradient below what central differences can resolve in float64.
    """

    def __init__(self, model: CTRModel):
        super().__init__("logits")
        self.model = self.add_child(model)

    def forward(self, batch):
        return self.model.logits(batch)

    def backward(self, grad):
        return self.model.backward_logits(grad)


def build(arch, schema: FeatureSchema, hyper: ModelHyper | None = None, seed: int = 0,
          init: bool = True) -> CTRModel:
    return CTRModel(arch, schema, hyper or ModelHyper(), seed, init)


def predict(model: CTRModel, batch: EncodedBatch, batch_size: int = 8192) -> np.ndarray:
    """Eval-mode click probabilities; the model's train/eval mode is restored afterwards."""
    was_training = model.training
    model.eval()
    try:
        parts = [model.forward(batch.take(slice(i, i + batch_size)))
                 for i in range(0, len(batch), batch_size)]
    finally:
        model.train(was_training)
    return np.concatenate(parts) if parts else np.zeros(0)


COMPONENTS = ("mlp_first_layer", "compression_layer", "bilinear_ws", "excitation", "norm_affine",
              "linear_part", "deeper_mlp", "prediction")


@dataclass
class ParamAudit:
    """Exact parameter counts per component.

    ``mlp_first_layer`` is the weight matrix feeding the first hidden layer;
    its bias is counted in ``deeper_mlp`` together with the remaining MLP.
    """

    components: dict = field(default_factory=dict)
    embedding_total: int = 0

    @property
    def non_embedding_total(self) -> int:
        return sum(self.components.values())

    def __getitem__(self, key) -> int:
        return self.components.get(key, 0)

    @property
    def three_part(self) -> int:
        """SENet+/compression -> first MLP layer plus the compression layer itself."""
        return self["mlp_first_layer"] + self["compression_layer"]

    @property
    def two_part(self) -> int:
        """Bilinear outputs -> first MLP layer plus the linear part (FiBiNet)."""
        return self["mlp_first_layer"] + self["linear_part"]


def count_params(model: CTRModel) -> ParamAudit:
    audit = ParamAudit({c: 0 for c in COMPONENTS})
    for p in model.parameters():
        if p.component == "embedding":
            audit.embedding_total += p.size
        else:
            audit.components[p.component] = audit.components.get(p.component, 0) + p.size
    return audit


def closed_form_fibinet(f: int, d: int, h: int, t: int) -> int:
    """``f(f-1) d h + t``: bilinear outputs into the first MLP layer, plus the linear part."""
    return f * (f - 1) * d * h + t


def closed_form_fibinetpp(f: int, d: int, h: int, m: int) -> int:
    """``f d h + m h + f(f-1)/2 m``."""
    return f * d * h + m * h + f * (f - 1) // 2 * m
