"""Loss, optimizers, the fixed-budget training loop and the multi-run protocol."""
from __future__ import annotations

import csv
import enum
import io
import logging
import math
import warnings
from dataclasses import dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import EncodedCorpus, epoch_batches, make_batch
from .errors import (
    EmptyCorpus,
    LabelOutOfRange,
    NonFiniteLoss,
    ParseError,
    StateShapeMismatch,
)
from .model import ModelParams, ModelSpec, forward, init_params, l2_penalty, trainable
from .tensor import Tensor

logger = logging.getLogger(__name__)

LEARNING_RATES = {50: 0.15, 100: 0.125, 200: 0.1, 300: 0.1, 600: 0.05}


class Optimizer(str, enum.Enum):
    ADADELTA = "adadelta"
    ADAM = "adam"


@dataclass
class TrainConfig:
    total_batches: int = 100_000
    batch_size: int = 32
    learning_rate: float = 0.1
    eval_interval: int = 1_000
    dropout_rate: float = 0.7
    optimizer: Optimizer = Optimizer.ADADELTA
    seed: int = 0
    runs: int = 5
    rho: float = 0.95
    adadelta_eps: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.optimizer = Optimizer(self.optimizer)
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        if self.total_batches < 0 or self.batch_size < 1 or self.runs < 1:
            raise ValueError("total_batches >= 0, batch_size >= 1 and runs >= 1 required")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "TrainConfig":
        """Build from string key/value pairs, coercing each to the field's type."""
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in kinds:
                raise KeyError(f"unknown config key {key!r}")
            kind = kinds[key]
            if kind == "int":
                kw[key] = int(raw)
            elif kind == "float":
                kw[key] = float(raw)
            else:
                kw[key] = raw.strip()
        return cls(**kw)


def read_config_file(path) -> dict[str, str]:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(lineno, f"{path}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def default_learning_rate(d_model: int) -> float:
    """Per-dimension learning rate; off-table sizes take the nearest entry (ties round down)."""
    if d_model in LEARNING_RATES:
        return LEARNING_RATES[d_model]
    nearest = min(LEARNING_RATES, key=lambda d: (abs(d - d_model), d))
    warnings.warn(f"no tuned learning rate for d_model={d_model}; using the d_model={nearest} value",
                  stacklevel=2)
    return LEARNING_RATES[nearest]


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    b, C = logits.shape
    if labels.shape != (b,):
        raise LabelOutOfRange(f"expected {b} labels, got shape {labels.shape}")
    if b and (labels.min() < 0 or labels.max() >= C):
        raise LabelOutOfRange(f"labels must lie in [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = -log_probs[rows, labels].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g / b),)

    return T._node(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# optimizers


def _check_state(params: Mapping[str, Tensor], state: dict, keys: Sequence[str]) -> None:
    for name, p in params.items():
        for key in keys:
            slot = state.setdefault(key, {})
            if name not in slot:
                slot[name] = np.zeros_like(p.data)
            elif slot[name].shape != p.shape:
                raise StateShapeMismatch(
                    f"{key} state for {name} has shape {slot[name].shape}, parameter {p.shape}")


def adadelta_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: dict,
                  lr: float = 1.0, rho: float = 0.95, eps: float = 1e-6) -> None:
    """One ADADELTA update; the unscaled step feeds the squared-update accumulator."""
    _check_state(params, state, ("sq_grad", "sq_update"))
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise StateShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        acc_g, acc_u = state["sq_grad"][name], state["sq_update"][name]
        acc_g *= rho
        acc_g += (1 - rho) * g * g
        update = np.sqrt(acc_u + eps) / np.sqrt(acc_g + eps) * g
        acc_u *= rho
        acc_u += (1 - rho) * update * update
        p.data -= lr * update


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: dict,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    _check_state(params, state, ("m", "v"))
    t = state["t"] = state.get("t", 0) + 1
    c1, c2 = 1 - beta1 ** t, 1 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise StateShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m, v = state["m"][name], state["v"][name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def optimizer_step(config: TrainConfig, params: Mapping[str, Tensor], state: dict) -> None:
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    if config.optimizer is Optimizer.ADADELTA:
        adadelta_step(params, grads, state, config.learning_rate, config.rho, config.adadelta_eps)
    else:
        adam_step(params, grads, state, config.learning_rate, config.beta1, config.beta2,
                  config.adam_eps)


# ---------------------------------------------------------------------------
# training and evaluation


def predict(spec: ModelSpec, params: ModelParams, corpus: EncodedCorpus,
            batch_size: int = 32) -> np.ndarray:
    out = [np.argmax(forward(spec, params, b).data, axis=1)
           for b in epoch_batches(corpus, batch_size)]
    return np.concatenate(out)


def evaluate(params: ModelParams, spec: ModelSpec, corpus: EncodedCorpus,
             batch_size: int = 32) -> float:
    """Accuracy with dropout off."""
    if len(corpus) == 0:
        raise EmptyCorpus("cannot evaluate on an empty corpus")
    return float(np.mean(predict(spec, params, corpus, batch_size) == corpus.labels))


def training_loss(spec: ModelSpec, params: ModelParams, batch, training: bool = True,
                  rng: np.random.Generator | None = None) -> Tensor:
    loss = cross_entropy(forward(spec, params, batch, training, rng), batch.labels)
    penalty = l2_penalty(spec, params)
    return loss if penalty is None else loss + penalty


@dataclass
class RunRecord:
    seed: int
    best_dev: float
    best_batch: int
    test: float | None
    dev_history: list[tuple[int, float]] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def _snapshot(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def train_one(spec: ModelSpec, config: TrainConfig, train: EncodedCorpus, dev: EncodedCorpus,
              test: EncodedCorpus | None = None, params: ModelParams | None = None,
              seed: int | None = None, embeddings: np.ndarray | None = None,
              train_embeddings: bool = True) -> tuple[ModelParams, RunRecord]:
    """Fixed-budget training with dev-accuracy checkpoint selection.

    Dev accuracy is measured before the first batch, every ``eval_interval``
    batches and after the last one; the earliest checkpoint reaching the best
    accuracy is kept and returned.
    """
    if len(train) == 0 or len(dev) == 0:
        raise EmptyCorpus("train and dev corpora must be non-empty")
    spec = replace(spec, dropout_rate=config.dropout_rate)
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_params(spec, rng, embeddings=embeddings, train_embeddings=train_embeddings)
    learnable = trainable(params)
    state: dict = {}

    best_dev = evaluate(params, spec, dev, config.batch_size)
    best_batch, best = 0, _snapshot(params)
    record = RunRecord(seed, best_dev, 0, None, dev_history=[(0, best_dev)])

    for step in range(1, config.total_batches + 1):
        batch = make_batch(train, config.batch_size, rng)
        loss = training_loss(spec, params, batch, True, rng)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLoss(f"loss became {value} at batch {step} (seed {seed})")
        record.losses.append(value)
        T.zero_grad(learnable.values())
        T.backward(loss)
        optimizer_step(config, learnable, state)
        if step % config.eval_interval == 0 or step == config.total_batches:
            acc = evaluate(params, spec, dev, config.batch_size)
            record.dev_history.append((step, acc))
            logger.debug("seed %d batch %d loss %.4f dev %.4f", seed, step, value, acc)
            if acc > best_dev:
                best_dev, best_batch, best = acc, step, _snapshot(params)

    for k, arr in best.items():
        params[k].data = arr
    record.best_dev, record.best_batch = best_dev, best_batch
    if test is not None and len(test):
        record.test = evaluate(params, spec, test, config.batch_size)
    return params, record


@dataclass
class TrainReport:
    runs: list[RunRecord]
    config: TrainConfig
    spec: ModelSpec | None = None
    best_params: ModelParams | None = field(default=None, repr=False)

    @property
    def test_scores(self) -> np.ndarray:
        return np.array([r.test if r.test is not None else r.best_dev for r in self.runs])

    @property
    def mean(self) -> float:
        return float(self.test_scores.mean())

    @property
    def std(self) -> float:
        # population standard deviation over runs
        return float(self.test_scores.std())

    def to_tsv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
        writer.writerow(["run", "seed", "best_dev", "best_batch", "test"])
        for i, r in enumerate(self.runs):
            test = "" if r.test is None else f"{r.test:.6f}"
            writer.writerow([i, r.seed, f"{r.best_dev:.6f}", r.best_batch, test])
        writer.writerow(["mean", "", "", "", f"{self.mean:.6f}"])
        writer.writerow(["std", "", "", "", f"{self.std:.6f}"])
        return buf.getvalue()


def run_protocol(spec: ModelSpec, config: TrainConfig, train: EncodedCorpus, dev: EncodedCorpus,
                 test: EncodedCorpus | None = None, seeds: Sequence[int] | None = None,
                 **train_kw) -> TrainReport:
    """``config.runs`` independent runs with seeds ``seed + run`` (or explicit ``seeds``)."""
    seeds = list(seeds) if seeds is not None else [config.seed + i for i in range(config.runs)]
    records, best = [], None
    for s in seeds:
        params, record = train_one(spec, config, train, dev, test, seed=s, **train_kw)
        if not records or record.best_dev > max(r.best_dev for r in records):
            best = params
        records.append(record)
    return TrainReport(records, config, spec, best)


def macro_average(reports: Sequence[TrainReport] | Sequence[float]) -> float:
    """Unweighted mean of per-dataset mean accuracies."""
    means = [r.mean if isinstance(r, TrainReport) else float(r) for r in reports]
    return float(np.mean(means))
