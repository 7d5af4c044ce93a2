"""Fast built-in invariant checks run by ``ssan selftest``."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import (
    RelativePositionTable,
    attention,
    attention_rpr,
    relative_index,
    sinusoidal_pe,
)
from .bench import count_parameters, enumerate_parameters
from .data import EncodedCorpus, epoch_batches, n_epoch_batches
from .model import Batch, forward, init_params, ssan_spec
from .tensor import Tensor
from .train import adadelta_step, cross_entropy, default_learning_rate

CHECKS: list[tuple[str, Callable[[], bool]]] = []


def _check(fn):
    CHECKS.append((fn.__name__.removeprefix("check_").replace("_", " "), fn))
    return fn


@_check
def check_matmul_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))
    naive = np.array([[sum(a[i, p] * b[p, j] for p in range(4)) for j in range(2)] for i in range(3)])
    return np.allclose(T.matmul(Tensor(a), Tensor(b)).data, naive, rtol=0, atol=1e-12)


@_check
def check_softmax_values():
    uniform = T.softmax(Tensor([0.0, 0.0, 0.0])).data
    pair = T.softmax(Tensor([0.7071, 0.0])).data
    shifted = T.softmax(Tensor([0.7071 + 5.0, 5.0])).data
    return (np.allclose(uniform, 1 / 3, atol=1e-15) and np.allclose(pair, [0.6698, 0.3302], atol=1e-4)
            and np.allclose(pair, shifted, atol=1e-12))


@_check
def check_layer_norm_hand_value():
    out = T.layer_norm(Tensor([1.0, -1.0]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=0.0)
    return np.array_equal(out.data, [1.0, -1.0])


@_check
def check_dropout_mean():
    out = T.dropout(Tensor(np.ones(100_000)), 0.7, True, np.random.default_rng(0))
    return 0.97 <= out.data.mean() <= 1.03


@_check
def check_sinusoidal_values():
    pe = sinusoidal_pe(2, 4).data
    return (np.array_equal(pe[0], [0.0, 1.0, 0.0, 1.0])
            and np.allclose(pe[1], [0.841471, 0.540302, 0.010000, 0.999950], atol=1e-6))


@_check
def check_attention_hand_value():
    Q = Tensor([[[1.0, 0.0]]])
    I2 = Tensor([[[1.0, 0.0], [0.0, 1.0]]])
    out = attention(Q, I2, I2, np.ones((1, 2), dtype=bool)).data[0, 0]
    return np.allclose(out, [0.6698, 0.3302], atol=1e-4)


@_check
def check_rpr_zero_reduction():
    rng = np.random.default_rng(2)
    Q, K, V = (Tensor(rng.uniform(-1, 1, (2, 6, 4))) for _ in range(3))
    mask = np.ones((2, 6), dtype=bool)
    mask[1, 4:] = False
    zero = RelativePositionTable(Tensor(np.zeros((5, 4))), Tensor(np.zeros((5, 4))), 2)
    return np.array_equal(attention(Q, K, V, mask).data, attention_rpr(Q, K, V, zero, mask).data)


@_check
def check_clip_rows():
    idx = relative_index(40, 10)
    return idx[0, 15] == 20 and idx[12, 0] == 0 and idx[5, 5] == 10


@_check
def check_reference_parameter_counts():
    expected = {("rpr", 1): 465_600, ("pe", 1): 453_000, ("rpr", 2): 839_400}
    for (pos, layers), n in expected.items():
        spec = ssan_spec(layers, 300, 5, pos, 10)
        if count_parameters(spec) != n or enumerate_parameters(init_params(spec, 0)) != n:
            return False
    return True


@_check
def check_permutation_invariance():
    rng = np.random.default_rng(3)
    spec = ssan_spec(1, 8, 3, "none", vocab_size=20, dropout_rate=0.0)
    params = init_params(spec, rng)
    ids = rng.integers(2, 20, size=(1, 7))
    perm = rng.permutation(7)
    a = forward(spec, params, Batch(ids, ids != 0, [0])).data
    b = forward(spec, params, Batch(ids[:, perm], ids != 0, [0])).data
    return np.allclose(a, b, rtol=0, atol=1e-9)


@_check
def check_epoch_arithmetic():
    corpus = EncodedCorpus([np.array([2])] * 10, np.zeros(10, dtype=np.int64), 2)
    sizes = [len(b) for b in epoch_batches(corpus, 3)]
    return sizes == [3, 3, 3, 1] and n_epoch_batches(8544, 32, 10) == 2670


@_check
def check_cross_entropy_uniform():
    return math.isclose(cross_entropy(Tensor(np.zeros((2, 5))), [0, 3]).item(), math.log(5),
                        rel_tol=1e-12)


@_check
def check_adadelta_first_step():
    g, lr, rho, eps = 0.3, 0.1, 0.95, 1e-6
    p = T.parameter([1.0])
    adadelta_step({"p": p}, {"p": np.array([g])}, {}, lr, rho, eps)
    expected = 1.0 - lr * math.sqrt(eps) / math.sqrt((1 - rho) * g * g + eps) * g
    return math.isclose(p.data[0], expected, rel_tol=1e-12)


@_check
def check_learning_rate_table():
    return default_learning_rate(300) == 0.1 and default_learning_rate(600) == 0.05


def run() -> list[tuple[str, bool]]:
    results = []
    for name, fn in CHECKS:
        try:
            ok = bool(fn())
        except Exception:  # a crashing check is a failing check
            ok = False
        results.append((name, ok))
    return results
