"""Central finite-difference checks of tape gradients.

Relative error per element is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)``;
a check reports the maximum over all elements of all inputs.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import (
    MultiHeadParams,
    RelativePositionTable,
    attention,
    attention_rpr,
    multi_head,
)
from .model import Arch, AttentionSpec, Batch, ModelSpec, forward, init_params, ssan_spec
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-3


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, step: float = STEP) -> np.ndarray:
    grad = np.zeros_like(x.data)
    flat, gflat = x.data.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f().item()
        flat[i] = orig - step
        down = f().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check(f: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = STEP) -> float:
    """Max relative error between tape and finite-difference gradients of scalar ``f``."""
    T.zero_grad(inputs)
    T.backward(f())
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    errs = [relative_error(a, numerical_gradient(f, x, step)) for a, x in zip(analytic, inputs)]
    return max(errs)


def _rand(rng, *shape):
    return T.parameter(rng.uniform(-1, 1, size=shape))


def _scalar(fn, rng):
    """Wrap a tensor-valued ``fn`` into a scalar loss with fixed random projection weights."""
    w = rng.uniform(-1, 1, size=fn().shape)
    return lambda: T.sum_(fn() * w)


def _mask(rng, b, n):
    mask = np.ones((b, n), dtype=bool)
    for row in range(1, b):
        mask[row, rng.integers(1, n + 1):] = False
    return mask


def _primitive_cases(rng):
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    c, d = _rand(rng, 2, 3, 4), _rand(rng, 3, 1)
    x = _rand(rng, 2, 5)
    g, beta = _rand(rng, 5), _rand(rng, 5)
    y = _rand(rng, 4, 6)
    y.data[np.abs(y.data) < 1e-2] += 0.05  # keep relu away from its kink
    table = _rand(rng, 7, 3)
    ids = np.array([[1, 2, 4], [3, 3, 6]])
    idx = np.array([[0, 1, 2, 2], [0, 0, 1, 2], [1, 2, 3, 3]])
    sc = _rand(rng, 2, 3, 4)
    gt = _rand(rng, 2, 3, 4)
    cases = {
        "matmul": (lambda: T.matmul(a, b), [a, b]),
        "matmul_batched": (lambda: T.matmul(c, T.reshape(b, (1, 4, 2))), [c, b]),
        "add_broadcast": (lambda: c + d, [c, d]),
        "sub": (lambda: T.sub(c, d), [c, d]),
        "mul_broadcast": (lambda: c * d, [c, d]),
        "scale": (lambda: T.scale(a, -2.5), [a]),
        "relu": (lambda: T.relu(y), [y]),
        "mean": (lambda: T.mean(c, axis=1), [c]),
        "sum": (lambda: T.sum_(c, axis=(0, 2)), [c]),
        "concat": (lambda: T.concat([a, T.matmul(a, b)], axis=1), [a, b]),
        "softmax": (lambda: T.softmax(c, axis=-1), [c]),
        "log_softmax": (lambda: T.log_softmax(x, axis=1), [x]),
        "layer_norm": (lambda: T.layer_norm(x, g, beta, 1e-6), [x, g, beta]),
        "transpose_reshape": (lambda: T.reshape(T.transpose(c, (2, 0, 1)), (4, 6)), [c]),
        "embed": (lambda: T.embed(table, ids), [table]),
        "gather_last": (lambda: T.gather_last(sc, idx), [sc]),
        "scatter_last": (lambda: T.scatter_last(gt, idx, 5), [gt]),
        "dropout": (lambda: T.dropout(x, 0.5, True, np.random.default_rng(3)), [x]),
    }
    return cases


def _attention_cases(rng, b=3, n=5, d=4):
    Q, K, V = _rand(rng, b, n, d), _rand(rng, b, n, d), _rand(rng, b, n, d)
    mask = _mask(rng, b, n)
    k = 2
    rpr = RelativePositionTable(_rand(rng, 2 * k + 1, d), _rand(rng, 2 * k + 1, d), k)
    X = _rand(rng, b, n, 6)
    mh = MultiHeadParams(*(_rand(rng, 6, 6) for _ in range(4)), *(_rand(rng, 6) for _ in range(4)))
    rpr_h = RelativePositionTable(_rand(rng, 2 * k + 1, 3), _rand(rng, 2 * k + 1, 3), k)
    mh_inputs = [X, mh.w_q, mh.w_k, mh.w_v, mh.w_o, mh.b_q, mh.b_k, mh.b_v, mh.b_o]
    return {
        "attention": (lambda: attention(Q, K, V, mask), [Q, K, V]),
        "attention_rpr": (lambda: attention_rpr(Q, K, V, rpr, mask),
                          [Q, K, V, rpr.key_table, rpr.value_table]),
        "multi_head": (lambda: multi_head(X, mh, mask, 2), mh_inputs),
        "multi_head_rpr": (lambda: multi_head(X, mh, mask, 2, rpr_h),
                           mh_inputs + [rpr_h.key_table, rpr_h.value_table]),
    }


def _model_cases(rng):
    from .train import cross_entropy

    b, n, vocab, C = 3, 5, 12, 3
    ids = rng.integers(2, vocab, size=(b, n))
    ids[1, 3:] = 0
    ids[2, 1:] = 0
    batch = Batch(ids, ids != 0, rng.integers(0, C, size=b))
    specs = {
        "ssan1_rpr": ssan_spec(1, d_model=8, n_classes=C, position="rpr", clip_k=2, vocab_size=vocab),
        "ssan1_pe": ssan_spec(1, d_model=8, n_classes=C, position="pe", vocab_size=vocab),
        "ssan1_learned": ssan_spec(1, d_model=8, n_classes=C, position="learned", vocab_size=vocab,
                                   max_len=6),
        "ssan2_rpr": ssan_spec(2, d_model=8, n_classes=C, position="rpr", clip_k=2, vocab_size=vocab),
        "transformer_rpr": ModelSpec(Arch.TRANSFORMER, 12, C,
                                     AttentionSpec(12, heads=2, position="rpr", clip_k=2),
                                     vocab_size=vocab),
    }
    cases = {}
    for name, spec in specs.items():
        params = init_params(spec, rng)
        for p in params.values():
            if p.name and p.name.endswith(".bias"):
                p.data[...] = rng.uniform(-0.1, 0.1, size=p.shape)
        inputs = list(params.values())
        cases[f"{name}_loss"] = (
            lambda spec=spec, params=params: cross_entropy(forward(spec, params, batch), batch.labels),
            inputs)
    return cases


def suite(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """All named gradient checks: primitives, attention layers and full model losses."""
    rng = np.random.default_rng(seed)
    cases = {}
    for name, (fn, inputs) in {**_primitive_cases(rng), **_attention_cases(rng)}.items():
        cases[name] = (_scalar(fn, rng), inputs)
    cases.update(_model_cases(rng))
    return cases


def run_suite(seed: int = 0, tolerance: float = TOLERANCE) -> dict[str, tuple[float, bool]]:
    return {name: (err := check(f, inputs), err < tolerance)
            for name, (f, inputs) in suite(seed).items()}
