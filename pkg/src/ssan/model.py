"""Classifier assembly: SSAN (1 or 2 layers), a 2-layer Transformer encoder, and Bow/Ave baselines.

Parameters live in a flat ``dict`` mapping a dotted path (``"layer1.q.weight"``)
to a :class:`~ssan.tensor.Tensor`. The optional ``"embedding"`` entry holds the
word-embedding matrix; it is never counted as a model parameter.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass
from typing import Dict

import numpy as np

from . import tensor as T
from .attention import (
    AttentionSpec,
    MultiHeadParams,
    PositionMethod,
    RelativePositionTable,
    attention,
    attention_rpr,
    check_mask,
    learned_pe,
    multi_head,
    sinusoidal_pe,
)
from .errors import ShapeMismatch
from .tensor import Tensor

ModelParams = Dict[str, Tensor]

EMBEDDING = "embedding"


class Arch(str, enum.Enum):
    SSAN1 = "ssan1"
    SSAN2 = "ssan2"
    TRANSFORMER = "transformer"
    BOW = "bow"
    AVE = "ave"


@dataclass(frozen=True)
class ModelSpec:
    arch: Arch
    d_model: int
    n_classes: int
    attention: AttentionSpec | None = None
    dropout_rate: float = 0.7
    ffn_inner_dim: int | None = None
    l2_lambda: float = 0.0
    vocab_size: int | None = None
    max_len: int = 256
    qkv_activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "arch", Arch(self.arch))
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.attention is None:
            heads = 6 if self.arch is Arch.TRANSFORMER and self.d_model % 6 == 0 else 1
            object.__setattr__(self, "attention", AttentionSpec(self.d_model, heads=heads))
        elif isinstance(self.attention, dict):
            object.__setattr__(self, "attention", AttentionSpec(**self.attention))
        if self.attention.d_model != self.d_model:
            raise ShapeMismatch("attention d_model must equal the model d_model")
        if self.arch in (Arch.SSAN1, Arch.SSAN2) and self.attention.heads != 1:
            raise ValueError("SSAN uses a single attention head")
        if self.arch is Arch.BOW and self.vocab_size is None:
            raise ValueError("Bow needs vocab_size")
        if self.qkv_activation not in ("relu", "linear"):
            raise ValueError(f"qkv_activation must be 'relu' or 'linear', got {self.qkv_activation!r}")

    @property
    def layers(self) -> int:
        return {Arch.SSAN1: 1, Arch.SSAN2: 2, Arch.TRANSFORMER: 2}.get(self.arch, 0)

    @property
    def position(self) -> PositionMethod:
        return self.attention.position

    @property
    def ffn_dim(self) -> int:
        return self.ffn_inner_dim or self.d_model

    def to_json(self) -> str:
        d = asdict(self)
        d["arch"] = self.arch.value
        d["attention"]["position"] = self.attention.position.value
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls(**json.loads(text))


def ssan_spec(layers: int = 1, d_model: int = 300, n_classes: int = 5,
              position: str = "rpr", clip_k: int = 10, **kw) -> ModelSpec:
    arch = Arch.SSAN1 if layers == 1 else Arch.SSAN2
    att = AttentionSpec(d_model, heads=1, position=position, clip_k=clip_k)
    return ModelSpec(arch, d_model, n_classes, att, **kw)


@dataclass
class Batch:
    token_ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.labels)


# ---------------------------------------------------------------------------
# initialisation


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Every trainable tensor the spec implies, excluding the embedding matrix."""
    d, C = spec.d_model, spec.n_classes
    shapes: dict[str, tuple[int, ...]] = {}

    def dense(name, fan_in, fan_out, bias=True):
        shapes[f"{name}.weight"] = (fan_in, fan_out)
        if bias:
            shapes[f"{name}.bias"] = (fan_out,)

    if spec.arch is Arch.BOW:
        dense("out", spec.vocab_size, C)
        return shapes
    if spec.arch is Arch.AVE:
        dense("out", d, C)
        return shapes

    if spec.position is PositionMethod.LEARNED:
        shapes["pe.table"] = (spec.max_len, d)
    rows, width = 2 * spec.attention.clip_k + 1, spec.attention.d_k
    for layer in range(1, spec.layers + 1):
        p = f"layer{layer}"
        if spec.arch is Arch.TRANSFORMER:
            for proj in "qkvo":
                dense(f"{p}.attn.{proj}", d, d)
            shapes[f"{p}.norm1.gain"] = (d,)
            shapes[f"{p}.norm1.bias"] = (d,)
            dense(f"{p}.ffn1", d, spec.ffn_dim)
            dense(f"{p}.ffn2", spec.ffn_dim, d)
            shapes[f"{p}.norm2.gain"] = (d,)
            shapes[f"{p}.norm2.bias"] = (d,)
        else:
            for proj in "qkv":
                dense(f"{p}.{proj}", d, d)
            dense(f"{p}.ffn", d, d)
        if spec.position is PositionMethod.RPR:
            shapes[f"{p}.rpr.key"] = (rows, width)
            shapes[f"{p}.rpr.value"] = (rows, width)
    dense("pool", d, d)
    dense("out", d, C, bias=False)
    return shapes


def init_params(spec: ModelSpec, rng: np.random.Generator | int | None = None,
                embeddings: np.ndarray | None = None, train_embeddings: bool = True) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains, U(-0.1, 0.1) position tables.

    When ``embeddings`` is omitted but ``spec.vocab_size`` is set, a random
    U(-0.25, 0.25) table with a zero padding row is created.
    """
    rng = np.random.default_rng(rng)
    params: ModelParams = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        elif ".rpr." in name or name == "pe.table":
            data = rng.uniform(-0.1, 0.1, size=shape)
        else:
            data = glorot(rng, *shape)
        params[name] = T.parameter(data, name=name)
    if spec.arch is not Arch.BOW:
        if embeddings is None and spec.vocab_size is not None:
            embeddings = rng.uniform(-0.25, 0.25, size=(spec.vocab_size, spec.d_model))
            embeddings[0] = 0.0
        if embeddings is not None:
            attach_embeddings(params, embeddings, trainable=train_embeddings)
    return params


def attach_embeddings(params: ModelParams, matrix, trainable: bool = True) -> None:
    matrix = matrix.data if isinstance(matrix, Tensor) else np.asarray(matrix, dtype=np.float64)
    params[EMBEDDING] = Tensor(matrix.copy(), requires_grad=trainable, name=EMBEDDING)


def model_parameters(params: ModelParams) -> dict[str, Tensor]:
    """The counted parameters: everything except the embedding matrix."""
    return {k: v for k, v in params.items() if k != EMBEDDING}


def trainable(params: ModelParams) -> dict[str, Tensor]:
    return {k: v for k, v in params.items() if v.requires_grad}


# ---------------------------------------------------------------------------
# forward passes


def _dense(params: ModelParams, name: str, x: Tensor, activation: bool = True) -> Tensor:
    y = T.matmul(x, params[f"{name}.weight"])
    bias = params.get(f"{name}.bias")
    if bias is not None:
        y = y + bias
    return T.relu(y) if activation else y


def _embed_inputs(spec: ModelSpec, params: ModelParams, batch: Batch) -> tuple[Tensor, np.ndarray]:
    if EMBEDDING not in params:
        raise KeyError("params carry no embedding matrix; call attach_embeddings first")
    ids = batch.token_ids
    if ids.ndim != 2:
        raise ShapeMismatch(f"token_ids must be [b, n], got {ids.shape}")
    mask = check_mask(batch.mask, *ids.shape)
    x = T.embed(params[EMBEDDING], ids)
    if x.shape[-1] != spec.d_model:
        raise ShapeMismatch(f"embedding width {x.shape[-1]} differs from d_model {spec.d_model}")
    n = ids.shape[1]
    if spec.position is PositionMethod.SINUSOIDAL:
        x = x + T.reshape(sinusoidal_pe(n, spec.d_model), (1, n, spec.d_model))
    elif spec.position is PositionMethod.LEARNED:
        x = x + T.reshape(learned_pe(params["pe.table"], n), (1, n, spec.d_model))
    return x, mask


def _rpr(spec: ModelSpec, params: ModelParams, layer: str) -> RelativePositionTable | None:
    if spec.position is not PositionMethod.RPR:
        return None
    return RelativePositionTable(params[f"{layer}.rpr.key"], params[f"{layer}.rpr.value"],
                                 spec.attention.clip_k)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Average over valid positions only: ``[b, n, d] -> [b, d]``."""
    weights = mask / mask.sum(axis=1, keepdims=True)
    return T.sum_(x * weights[:, :, None], axis=1)


def _head(spec: ModelSpec, params: ModelParams, h: Tensor, mask, training, rng) -> Tensor:
    sentence = _dense(params, "pool", masked_mean(h, mask))
    sentence = T.dropout(sentence, spec.dropout_rate, training, rng)
    return T.matmul(sentence, params["out.weight"])


def ssan_forward(spec: ModelSpec, params: ModelParams, batch: Batch,
                 training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    x, mask = _embed_inputs(spec, params, batch)
    h = T.dropout(x, spec.dropout_rate, training, rng)
    act = spec.qkv_activation == "relu"
    for layer in range(1, spec.layers + 1):
        p = f"layer{layer}"
        q = _dense(params, f"{p}.q", h, act)
        k = _dense(params, f"{p}.k", h, act)
        v = _dense(params, f"{p}.v", h, act)
        rpr = _rpr(spec, params, p)
        z = attention(q, k, v, mask) if rpr is None else attention_rpr(q, k, v, rpr, mask)
        z = T.dropout(z, spec.attention.attend_dropout_rate, training, rng)
        h = _dense(params, f"{p}.ffn", z)
        h = T.dropout(h, spec.dropout_rate, training, rng)
    return _head(spec, params, h, mask, training, rng)


def transformer_encoder_forward(spec: ModelSpec, params: ModelParams, batch: Batch,
                                training: bool = False,
                                rng: np.random.Generator | None = None) -> Tensor:
    """Post-norm encoder layers: ``LN(x + Dropout(Sublayer(x)))`` for attention then FFN."""
    x, mask = _embed_inputs(spec, params, batch)
    h = T.dropout(x, spec.dropout_rate, training, rng)
    for layer in range(1, spec.layers + 1):
        p = f"layer{layer}"
        mh = MultiHeadParams(*(params[f"{p}.attn.{n}.weight"] for n in "qkvo"),
                             *(params[f"{p}.attn.{n}.bias"] for n in "qkvo"))
        att = multi_head(h, mh, mask, spec.attention.heads, _rpr(spec, params, p))
        att = T.dropout(att, spec.attention.attend_dropout_rate, training, rng)
        att = T.dropout(att, spec.dropout_rate, training, rng)
        h = T.layer_norm(h + att, params[f"{p}.norm1.gain"], params[f"{p}.norm1.bias"])
        ff = _dense(params, f"{p}.ffn2", _dense(params, f"{p}.ffn1", h), activation=False)
        ff = T.dropout(ff, spec.dropout_rate, training, rng)
        h = T.layer_norm(h + ff, params[f"{p}.norm2.gain"], params[f"{p}.norm2.bias"])
    return _head(spec, params, h, mask, training, rng)


def bag_of_words(token_ids: np.ndarray, vocab_size: int, pad_id: int = 0) -> np.ndarray:
    counts = np.zeros((token_ids.shape[0], vocab_size))
    rows = np.repeat(np.arange(token_ids.shape[0]), token_ids.shape[1])
    flat = token_ids.reshape(-1)
    keep = flat != pad_id
    np.add.at(counts, (rows[keep], flat[keep]), 1.0)
    return counts


def bow_forward(spec: ModelSpec, params: ModelParams, batch: Batch,
                training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    counts = bag_of_words(batch.token_ids, spec.vocab_size)
    return _dense(params, "out", Tensor(counts), activation=False)


def ave_forward(spec: ModelSpec, params: ModelParams, batch: Batch,
                training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    x, mask = _embed_inputs(spec, params, batch)
    return _dense(params, "out", masked_mean(x, mask), activation=False)


_FORWARD = {
    Arch.SSAN1: ssan_forward,
    Arch.SSAN2: ssan_forward,
    Arch.TRANSFORMER: transformer_encoder_forward,
    Arch.BOW: bow_forward,
    Arch.AVE: ave_forward,
}


def forward(spec: ModelSpec, params: ModelParams, batch: Batch,
            training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Logits ``[b, n_classes]`` for any architecture."""
    return _FORWARD[spec.arch](spec, params, batch, training, rng)


def probabilities(logits: Tensor) -> np.ndarray:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def l2_penalty(spec: ModelSpec, params: ModelParams) -> Tensor | None:
    """``l2_lambda * ||W||^2`` over baseline weight matrices; biases are never penalised."""
    if spec.arch not in (Arch.BOW, Arch.AVE) or spec.l2_lambda == 0.0:
        return None
    w = params["out.weight"]
    return T.scale(T.sum_(w * w), spec.l2_lambda)


# ---------------------------------------------------------------------------
# checkpoints


_SPEC_KEY = "__spec__"
_VOCAB_KEY = "__vocab__"


def save_checkpoint(path, spec: ModelSpec, params: ModelParams, vocab_tokens=None) -> None:
    """Write a flat ``.npz`` archive: one float64 array per parameter path plus a JSON spec header."""
    arrays = {name: t.data for name, t in params.items()}
    arrays[_SPEC_KEY] = np.array(spec.to_json())
    if vocab_tokens is not None:
        arrays[_VOCAB_KEY] = np.array(json.dumps(list(vocab_tokens)))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(spec, params, vocab_tokens_or_None)``."""
    with np.load(path, allow_pickle=False) as archive:
        spec = ModelSpec.from_json(str(archive[_SPEC_KEY]))
        vocab = json.loads(str(archive[_VOCAB_KEY])) if _VOCAB_KEY in archive.files else None
        params = {k: T.parameter(archive[k], name=k) for k in archive.files
                  if k not in (_SPEC_KEY, _VOCAB_KEY)}
    return spec, params, vocab
