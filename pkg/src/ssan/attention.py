"""Scaled dot-product attention, multi-head attention and position information.

All attention functions work on batched inputs of shape ``[b, n, d]`` (or
``[b, h, n, d]`` inside multi-head attention) and take a boolean validity mask
of shape ``[b, n]``. Masked key positions get weight exactly zero.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import EmptyMaskRow, HeadDivisibility, SequenceTooLong, ShapeMismatch
from .tensor import Tensor


class PositionMethod(str, enum.Enum):
    NONE = "none"
    SINUSOIDAL = "pe"
    LEARNED = "learned"
    RPR = "rpr"


@dataclass(frozen=True)
class AttentionSpec:
    d_model: int
    heads: int = 1
    position: PositionMethod = PositionMethod.NONE
    clip_k: int = 10
    attend_dropout_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", PositionMethod(self.position))
        if self.d_model < 1 or self.heads < 1:
            raise ValueError("d_model and heads must be positive")
        if self.d_model % self.heads:
            raise HeadDivisibility(f"{self.heads} heads do not divide d_model={self.d_model}")
        if self.position is PositionMethod.RPR and self.clip_k < 1:
            raise ValueError(f"clip_k must be >= 1 for relative positions, got {self.clip_k}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    d_v = d_k


@dataclass
class RelativePositionTable:
    """Trainable key/value embeddings for clipped relative offsets.

    Row ``r`` holds the embedding for offset ``r - clip_k``.
    """

    key_table: Tensor
    value_table: Tensor
    clip_k: int

    def __post_init__(self):
        rows = 2 * self.clip_k + 1
        if self.key_table.shape[0] != rows or self.value_table.shape[0] != rows:
            raise ShapeMismatch(
                f"tables need {rows} rows for clip_k={self.clip_k}, got "
                f"{self.key_table.shape} and {self.value_table.shape}")
        if self.key_table.shape != self.value_table.shape:
            raise ShapeMismatch("key and value tables must have the same shape")

    @property
    def rows(self) -> int:
        return 2 * self.clip_k + 1


def clip_offset(offset, clip_k: int):
    """Table row for a signed offset ``j - i``."""
    return np.clip(offset, -clip_k, clip_k) + clip_k


def relative_index(n: int, clip_k: int) -> np.ndarray:
    """``idx[i, j]`` is the table row for key position ``j`` seen from query ``i``."""
    pos = np.arange(n)
    return clip_offset(pos[None, :] - pos[:, None], clip_k).astype(np.int64)


def compatibility(k: Tensor, q: Tensor) -> Tensor:
    """Scaled dot-product score ``(k . q) / sqrt(d_k)`` for two vectors."""
    if k.shape != q.shape or k.ndim != 1:
        raise ShapeMismatch(f"compatibility needs equal-length vectors, got {k.shape} and {q.shape}")
    return T.scale(T.sum_(k * q), 1.0 / math.sqrt(k.shape[0]))


def check_mask(mask: np.ndarray, batch: int, n: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (batch, n):
        raise ShapeMismatch(f"mask shape {mask.shape} does not cover [{batch}, {n}]")
    empty = ~mask.any(axis=1)
    if n and empty.any():
        raise EmptyMaskRow(f"sequences {np.flatnonzero(empty).tolist()} have no valid position")
    return mask


def _key_mask(mask: np.ndarray, score_ndim: int) -> np.ndarray:
    b, n = mask.shape
    return mask.reshape((b,) + (1,) * (score_ndim - 2) + (n,))


def _attend(Q: Tensor, K: Tensor, V: Tensor, mask, rpr: RelativePositionTable | None):
    if (Q.ndim < 3 or Q.ndim != K.ndim or Q.ndim != V.ndim or Q.shape[-1] != K.shape[-1]
            or Q.shape[:-2] != K.shape[:-2] or K.shape[:-1] != V.shape[:-1]):
        raise ShapeMismatch(f"attention shapes do not conform: Q{Q.shape} K{K.shape} V{V.shape}")
    b, n = K.shape[0], K.shape[-2]
    if rpr is not None and Q.shape[-2] != n:
        raise ShapeMismatch("relative positions need as many queries as keys")
    mask = check_mask(mask, b, n)
    d_k = Q.shape[-1]
    logits = T.matmul(Q, T.swapaxes(K, -1, -2))
    idx = None
    if rpr is not None:
        if rpr.key_table.shape[1] != d_k or rpr.value_table.shape[1] != V.shape[-1]:
            raise ShapeMismatch(
                f"relative tables {rpr.key_table.shape} do not match head width {d_k}")
        idx = relative_index(n, rpr.clip_k)
        per_offset = T.matmul(Q, T.swapaxes(rpr.key_table, 0, 1))  # [..., n, 2k+1]
        logits = logits + T.gather_last(per_offset, idx)
    scores = T.scale(logits, 1.0 / math.sqrt(d_k))
    scores = T.where(_key_mask(mask, scores.ndim), scores, T.NEG_INF)
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, V)
    if rpr is not None:
        out = out + T.matmul(T.scatter_last(weights, idx, rpr.rows), rpr.value_table)
    return out, weights


def attention(Q: Tensor, K: Tensor, V: Tensor, mask) -> Tensor:
    """``softmax(Q K^T / sqrt(d_k)) V`` with masked keys excluded."""
    return _attend(Q, K, V, mask, None)[0]


def attention_rpr(Q: Tensor, K: Tensor, V: Tensor, rpr: RelativePositionTable, mask) -> Tensor:
    """Attention whose scores and outputs include clipped relative-offset embeddings.

    The score between query ``i`` and key ``j`` is
    ``q_i . (k_j + a^K[clip(j - i)]) / sqrt(d_k)`` and the output sums
    ``alpha_ij (v_j + a^V[clip(j - i)])``.
    """
    return _attend(Q, K, V, mask, rpr)[0]


def attention_weights(Q: Tensor, K: Tensor, V: Tensor, mask,
                      rpr: RelativePositionTable | None = None) -> np.ndarray:
    """The softmax weight matrix, for inspection."""
    return _attend(Q, K, V, mask, rpr)[1].data


@dataclass
class MultiHeadParams:
    """Per-head projections stored side by side: ``w_q[:, i*d_k:(i+1)*d_k]`` is head ``i``."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Tensor | None = None
    b_k: Tensor | None = None
    b_v: Tensor | None = None
    b_o: Tensor | None = None


def _affine(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else y + b


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * d))


def multi_head(X: Tensor, params: MultiHeadParams, mask, heads: int,
               rpr: RelativePositionTable | None = None) -> Tensor:
    """``Concat(head_1, ..., head_h) W^O`` where each head attends on its own projections.

    A relative position table, when given, is shared by all heads.
    """
    if X.ndim != 3:
        raise ShapeMismatch(f"multi_head expects [b, n, d_model], got {X.shape}")
    d_model = X.shape[-1]
    if heads < 1 or d_model % heads:
        raise HeadDivisibility(f"{heads} heads do not divide d_model={d_model}")
    for w in (params.w_q, params.w_k, params.w_v):
        if w.shape != (d_model, d_model):
            raise ShapeMismatch(f"projection shape {w.shape}, expected {(d_model, d_model)}")
    q = _split_heads(_affine(X, params.w_q, params.b_q), heads)
    k = _split_heads(_affine(X, params.w_k, params.b_k), heads)
    v = _split_heads(_affine(X, params.w_v, params.b_v), heads)
    out = _attend(q, k, v, mask, rpr)[0]
    return _affine(_merge_heads(out), params.w_o, params.b_o)


def sinusoidal_pe(n: int, d_model: int) -> Tensor:
    """Fixed encodings ``sin(pos / 10000^(2i/d))`` on even and ``cos`` on odd columns.

    For odd ``d_model`` the last column is a sine column.
    """
    pos = np.arange(n, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, two_i / d_model)
    pe = np.zeros((n, d_model))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return Tensor(pe)


def learned_pe(table: Tensor, n: int) -> Tensor:
    """First ``n`` rows of a trainable position table."""
    if n > table.shape[0]:
        raise SequenceTooLong(f"sequence length {n} exceeds the {table.shape[0]} learned positions")
    return table[:n]
