"""Model characteristics: closed-form parameter counts and wall-clock timing protocols."""
from __future__ import annotations

import contextlib
import gc
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .attention import PositionMethod
from .data import EncodedCorpus, epoch_batches, n_epoch_batches
from .model import Arch, ModelParams, ModelSpec, forward, init_params, model_parameters, trainable
from .train import Optimizer, TrainConfig, cross_entropy, optimizer_step

# Reference figures from the original GPU benchmark; informational only.
REFERENCE_TABLE = {
    "ssan1+rpr": (465_600, 64.6, 8.9),
    "ssan1+pe": (453_000, 58.1, 8.5),
    "ssan2+rpr": (839_400, 70.3, 9.3),
    "transformer+rpr": (1_177_920, 78.2, 9.7),
}


def _dense(fan_in: int, fan_out: int, bias: bool = True) -> int:
    return fan_in * fan_out + (fan_out if bias else 0)


def count_parameters(spec: ModelSpec) -> int:
    """Trainable parameters implied by ``spec``; the word-embedding matrix is excluded."""
    d, C = spec.d_model, spec.n_classes
    if spec.arch is Arch.BOW:
        return _dense(spec.vocab_size, C)
    if spec.arch is Arch.AVE:
        return _dense(d, C)
    rpr = 2 * (2 * spec.attention.clip_k + 1) * spec.attention.d_k
    if spec.arch is Arch.TRANSFORMER:
        f = spec.ffn_dim
        layer = 4 * _dense(d, d) + _dense(d, f) + _dense(f, d) + 2 * 2 * d
    else:
        layer = 3 * _dense(d, d) + _dense(d, d)
    if spec.position is PositionMethod.RPR:
        layer += rpr
    total = spec.layers * layer + _dense(d, d) + _dense(d, C, bias=False)
    if spec.position is PositionMethod.LEARNED:
        total += spec.max_len * d
    return total


def enumerate_parameters(params: ModelParams) -> int:
    return sum(t.size for t in model_parameters(params).values())


@dataclass
class Characteristics:
    arch: str
    parameter_count: int
    train_time_s: float
    inference_time_s: float
    train_batches: int
    inference_batches_per_pass: int
    inference_passes: int

    @property
    def inference_batches(self) -> int:
        return self.inference_batches_per_pass * self.inference_passes

    def row(self) -> str:
        return f"{self.arch}\t{self.parameter_count}\t{self.train_time_s:.3f}\t{self.inference_time_s:.3f}"


HEADER = "arch\tparams\ttrain_s\tinfer_s"


@contextlib.contextmanager
def _quiet():
    """Single-threaded BLAS with the cyclic garbage collector paused, as ``timeit`` does."""
    enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        with threadpool_limits(limits=1):
            yield
    finally:
        if enabled:
            gc.enable()


def _label(spec: ModelSpec) -> str:
    if spec.arch in (Arch.BOW, Arch.AVE) or spec.position is PositionMethod.NONE:
        return spec.arch.value
    return f"{spec.arch.value}+{spec.position.value}"


def _train_epochs(spec, params, batches, epochs, config, state, rng):
    learnable = trainable(params)
    for _ in range(epochs):
        for batch in batches:
            loss = cross_entropy(forward(spec, params, batch, True, rng), batch.labels)
            T.zero_grad(learnable.values())
            T.backward(loss)
            optimizer_step(config, learnable, state)


def measure_training_time(spec: ModelSpec, corpus: EncodedCorpus, epochs: int = 10,
                          trials: int = 3, batch_size: int = 32, warmup: bool = True,
                          learning_rate: float = 1e-3, seed: int = 0) -> float:
    """Mean wall-clock seconds to train ``epochs`` sequential epochs with ADAM.

    Each trial starts from fresh parameters; one untimed warm-up epoch runs first.
    """
    if epochs == 0:
        return 0.0
    batches = epoch_batches(corpus, batch_size)
    config = TrainConfig(learning_rate=learning_rate, optimizer=Optimizer.ADAM)
    times = []
    with _quiet():
        for trial in range(trials):
            rng = np.random.default_rng(seed + trial)
            params = init_params(spec, rng)
            state: dict = {}
            if warmup:
                _train_epochs(spec, params, batches[:1], 1, config, state, rng)
            start = time.perf_counter()
            _train_epochs(spec, params, batches, epochs, config, state, rng)
            times.append(time.perf_counter() - start)
    return float(np.mean(times))


def inference_timings(spec: ModelSpec, params: ModelParams, corpus: EncodedCorpus,
                      passes: int = 10, trials: int = 3, batch_size: int = 32) -> list[float]:
    """Per-trial seconds for ``passes`` evaluation-mode passes over ``corpus``."""
    batches = epoch_batches(corpus, batch_size)
    times = []
    with _quiet():
        for b in batches[:1]:
            forward(spec, params, b)
        for _ in range(trials):
            start = time.perf_counter()
            for _ in range(passes):
                for b in batches:
                    np.argmax(forward(spec, params, b).data, axis=1)
            times.append(time.perf_counter() - start)
    return times


def measure_inference_time(spec: ModelSpec, params: ModelParams, corpus: EncodedCorpus,
                           passes: int = 10, trials: int = 3, batch_size: int = 32) -> float:
    return float(np.mean(inference_timings(spec, params, corpus, passes, trials, batch_size)))


def characterize(spec: ModelSpec, train: EncodedCorpus, dev: EncodedCorpus, epochs: int = 10,
                 passes: int = 10, trials: int = 3, batch_size: int = 32,
                 seed: int = 0) -> Characteristics:
    params = init_params(spec, seed)
    return Characteristics(
        arch=_label(spec),
        parameter_count=count_parameters(spec),
        train_time_s=measure_training_time(spec, train, epochs, trials, batch_size, seed=seed),
        inference_time_s=measure_inference_time(spec, params, dev, passes, trials, batch_size),
        train_batches=n_epoch_batches(len(train), batch_size, epochs),
        inference_batches_per_pass=n_epoch_batches(len(dev), batch_size),
        inference_passes=passes,
    )
