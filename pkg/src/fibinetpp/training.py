"""Log loss, AUC, Adam, the 8:1:1 split and the mini-batch training loop."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np

from .errors import ConfigError, MetricError, SplitError, TrainingError
from .features import EncodedBatch
from .models import CTRModel, predict

LOSS_CLAMP = 1e-7


def logloss(y, yhat) -> float:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.size == 0:
        raise MetricError("log loss of an empty set is undefined")
    if y.shape != yhat.shape:
        raise MetricError(f"label/prediction length mismatch: {y.shape} vs {yhat.shape}")
    p = np.clip(yhat, LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def auc(y, scores) -> float:
    """Mann-Whitney AUC from average ranks; ties count one half."""
    y = np.asarray(y, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if y.shape != scores.shape:
        raise MetricError(f"label/score length mismatch: {y.shape} vs {scores.shape}")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative label")
    # imported here: scipy.stats costs about a second, which commands like
    # count-params never need
    from scipy.stats import rankdata

    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


class Adam:
    """Bias-corrected Adam over a list of :class:`~fibinetpp.tensor.Parameter`.

    With ``lazy=True`` parameters that report ``touched_rows`` (embedding
    tables) only update the moments and values of those rows.
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, lazy: bool = False):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.lazy = lazy
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {p.name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p in self.params:
            m, v, g = self.m[p.name], self.v[p.name], p.grad
            if self.lazy and p.touched_rows is not None:
                rows = p.touched_rows
                m[rows] = b1 * m[rows] + (1.0 - b1) * g[rows]
                v[rows] = b2 * v[rows] + (1.0 - b2) * g[rows] * g[rows]
                p.value[rows] -= self.lr * (m[rows] / bc1) / (np.sqrt(v[rows] / bc2) + self.eps)
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params, state: Adam) -> Adam:
    """Apply one update with ``state`` to ``params`` (whose ``grad`` is filled)."""
    if [p.name for p in params] != [p.name for p in state.params]:
        raise ConfigError("Adam state was created for a different parameter list")
    state.step()
    return state


def split_dataset(rows: Sequence, seed: int):
    """Seeded shuffle, then ``floor(0.8N)`` / ``floor(0.1N)`` / remainder."""
    n = len(rows)
    if n < 10:
        raise SplitError(f"need at least 10 rows to split 8:1:1, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train, n_val = (8 * n) // 10, n // 10
    pick = lambda idx: [rows[i] for i in idx]  # noqa: E731
    return (pick(order[:n_train]), pick(order[n_train:n_train + n_val]),
            pick(order[n_train + n_val:]))


@dataclass
class EvalReport:
    auc: float
    logloss: float
    n: int


def evaluate(model: CTRModel, data: EncodedBatch, batch_size: int = 8192) -> EvalReport:
    scores = predict(model, data, batch_size)
    return EvalReport(auc(data.labels, scores), logloss(data.labels, scores), len(data))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 1024
    epochs: int = 20
    seed: int = 0
    patience: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lazy_adam: bool = False
    record_wall_time: bool = True

    def validate(self):
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ConfigError(f"learning rate must be finite and >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")


@dataclass
class EpochRecord:
    epoch: int
    train_logloss: float
    val_auc: float | None
    val_logloss: float | None
    wall_ms: int
    lr: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainResult:
    model: CTRModel
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: EvalReport | None = None


def _snapshot(model: CTRModel):
    return ([p.value.copy() for p in model.parameters()],
            {k: v.copy() for k, v in model.buffers().items()})


def _restore(model: CTRModel, snap) -> None:
    values, buffers = snap
    for p, v in zip(model.parameters(), values):
        p.value[...] = v
    for k, v in model.buffers().items():
        v[...] = buffers[k]


def train(model: CTRModel, train_data: EncodedBatch, val_data: EncodedBatch | None,
          config: TrainConfig, metrics: TextIO | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Fit ``model`` with Adam on the log loss, keeping the best-on-validation weights.

    Batch norms run in train mode while fitting and in eval mode during
    validation. Training stops after ``config.patience`` epochs without a
    validation AUC improvement. A non-finite loss restores the last good
    weights and raises :class:`TrainingError`.
    """
    config.validate()
    if len(train_data) == 0:
        raise ConfigError("training data is empty")
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    opt = Adam(model.parameters(), config.lr, config.beta1, config.beta2, config.adam_eps,
               lazy=config.lazy_adam)
    min_batch = 2 if model.batch_norms() else 1
    labels = train_data.labels
    result = TrainResult(model)
    best = _snapshot(model)
    best_auc, stale = -math.inf, 0

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        model.train()
        order = shuffle_rng.permutation(len(train_data))
        loss_sum, seen = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            if len(idx) < min_batch:
                continue
            batch = train_data.take(idx)
            y = labels[idx]
            model.zero_grad()
            p = model.forward(batch)
            loss = logloss(y, p)
            if not math.isfinite(loss):
                _restore(model, best)
                raise TrainingError(f"non-finite training loss at epoch {epoch}", result.history)
            model.backward_logits((p - y) / len(idx))
            try:
                opt.step()
            except TrainingError as exc:
                _restore(model, best)
                raise TrainingError(str(exc), result.history) from None
            loss_sum += loss * len(idx)
            seen += len(idx)

        report = evaluate(model, val_data) if val_data is not None and len(val_data) else None
        wall = int(round((time.perf_counter() - start) * 1000)) if config.record_wall_time else 0
        record = EpochRecord(epoch, loss_sum / max(seen, 1),
                             None if report is None else report.auc,
                             None if report is None else report.logloss, wall, config.lr)
        result.history.append(record)
        if metrics is not None:
            metrics.write(record.to_json() + "\n")
            metrics.flush()
        if on_epoch is not None:
            on_epoch(record)

        score = report.auc if report is not None else -record.train_logloss
        if score > best_auc:
            best_auc, stale = score, 0
            best = _snapshot(model)
            result.best_epoch, result.best_val = epoch, report
        else:
            stale += 1
            if stale >= config.patience:
                break

    _restore(model, best)
    model.eval()
    return result


def train_lr_grid(make_model: Callable[[], CTRModel], train_data: EncodedBatch,
                  val_data: EncodedBatch, config: TrainConfig,
                  lrs: Sequence[float] = (1e-4, 1e-3), metrics: TextIO | None = None):
    """Train one fresh model per learning rate and keep the best by validation AUC."""
    best = None
    for lr in lrs:
        cfg = TrainConfig(**{**asdict(config), "lr": lr})
        res = train(make_model(), train_data, val_data, cfg, metrics)
        key = res.best_val.auc if res.best_val is not None else -math.inf
        if best is None or key > best[0]:
            best = (key, lr, res)
    return best[2], best[1]
