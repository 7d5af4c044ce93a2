import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssan import tensor as T
from ssan.attention import (
    AttentionSpec,
    MultiHeadParams,
    RelativePositionTable,
    attention,
    attention_rpr,
    attention_weights,
    clip_offset,
    compatibility,
    learned_pe,
    multi_head,
    relative_index,
    sinusoidal_pe,
)
from ssan.errors import EmptyMaskRow, HeadDivisibility, SequenceTooLong, ShapeMismatch
from ssan.model import init_params, ssan_spec
from ssan.tensor import Tensor

from conftest import fd_gradient, max_rel_err


def _qkv(rng, b=2, n=5, d=4):
    return [Tensor(rng.uniform(-1, 1, (b, n, d))) for _ in range(3)]


def _ragged_mask(b, n, lengths):
    return np.arange(n)[None, :] < np.asarray(lengths)[:, None]


def rpr_oracle(Q, K, V, key_table, value_table, k, mask):
    """Per-pair loops over the relative-position attention formulas."""
    b, n, d = Q.shape
    out = np.zeros_like(V)
    for s in range(b):
        for i in range(n):
            scores = np.full(n, -np.inf)
            for j in range(n):
                if mask[s, j]:
                    r = min(max(j - i, -k), k) + k
                    scores[j] = Q[s, i] @ (K[s, j] + key_table[r]) / math.sqrt(d)
            w = np.exp(scores - scores.max())
            w /= w.sum()
            for j in range(n):
                if mask[s, j]:
                    r = min(max(j - i, -k), k) + k
                    out[s, i] += w[j] * (V[s, j] + value_table[r])
    return out


def test_compatibility_examples():
    assert compatibility(Tensor([0.3, -2.0]), Tensor([0.0, 0.0])).item() == 0.0
    assert compatibility(Tensor([1.0, 1.0]), Tensor([1.0, 1.0])).item() == pytest.approx(1.41421, abs=1e-5)
    k, q = np.array([0.4, -1.0, 2.0]), np.array([1.5, 0.5, -0.2])
    plain = compatibility(Tensor(k), Tensor(q)).item()
    padded = compatibility(Tensor(np.r_[k, 0, 0, 0]), Tensor(np.r_[q, 0, 0, 0])).item()
    assert padded == pytest.approx(plain / math.sqrt(2), rel=1e-14)
    with pytest.raises(ShapeMismatch):
        compatibility(Tensor([1.0]), Tensor([1.0, 2.0]))


def test_attention_single_key_returns_values(rng):
    Q, K, V = _qkv(rng, n=1)
    np.testing.assert_array_equal(attention(Q, K, V, np.ones((2, 1), bool)).data, V.data)


def test_attention_hand_example():
    Q = Tensor([[[1.0, 0.0]]])
    I2 = Tensor([[[1.0, 0.0], [0.0, 1.0]]])
    mask = np.ones((1, 2), bool)
    p = math.exp(1 / math.sqrt(2)) / (math.exp(1 / math.sqrt(2)) + 1)
    np.testing.assert_allclose(attention_weights(Q, I2, I2, mask)[0, 0], [0.6698, 0.3302], atol=1e-4)
    np.testing.assert_allclose(attention(Q, I2, I2, mask).data[0, 0], [p, 1 - p], atol=1e-14)


def test_equal_keys_give_masked_mean(rng):
    Q, _, V = _qkv(rng, n=6)
    K = Tensor(np.broadcast_to(rng.uniform(-1, 1, (2, 1, 4)), (2, 6, 4)).copy())
    mask = _ragged_mask(2, 6, [6, 3])
    out = attention(Q, K, V, mask).data
    for s, length in enumerate([6, 3]):
        np.testing.assert_allclose(out[s], np.broadcast_to(V.data[s, :length].mean(0), (6, 4)),
                                   atol=1e-12)


def test_attention_weights_invariants(rng):
    Q, K, V = _qkv(rng, b=3, n=7)
    mask = _ragged_mask(3, 7, [7, 4, 1])
    w = attention_weights(Q, K, V, mask)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-9)
    assert np.all(w[~np.broadcast_to(mask[:, None, :], w.shape)] == 0.0)


def test_attention_errors(rng):
    Q, K, V = _qkv(rng)
    with pytest.raises(EmptyMaskRow):
        attention(Q, K, V, _ragged_mask(2, 5, [3, 0]))
    with pytest.raises(ShapeMismatch):
        attention(Q, K, V, np.ones((2, 4), bool))
    with pytest.raises(ShapeMismatch):
        attention(Q, Tensor(np.ones((2, 5, 3))), V, np.ones((2, 5), bool))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2**31 - 1))
def test_permutation_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (2, n, 3))
    mask = _ragged_mask(2, n, [n, rng.integers(1, n + 1)])
    perm = rng.permutation(n)
    out = attention(Tensor(X), Tensor(X), Tensor(X), mask).data
    out_p = attention(Tensor(X[:, perm]), Tensor(X[:, perm]), Tensor(X[:, perm]), mask[:, perm]).data
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-9)


def test_clip_rows():
    assert clip_offset(15, 10) == 20
    assert clip_offset(-12, 10) == 0
    assert clip_offset(0, 10) == 10
    idx = relative_index(6, 2)
    assert idx[0].tolist() == [2, 3, 4, 4, 4, 4]
    assert idx[5].tolist() == [0, 0, 0, 0, 1, 2]


def test_rpr_zero_tables_reduce_bitwise(rng):
    Q, K, V = _qkv(rng, n=8)
    mask = _ragged_mask(2, 8, [8, 5])
    zero = RelativePositionTable(Tensor(np.zeros((7, 4))), Tensor(np.zeros((7, 4))), 3)
    assert np.array_equal(attention_weights(Q, K, V, mask), attention_weights(Q, K, V, mask, zero))
    assert np.array_equal(attention(Q, K, V, mask).data, attention_rpr(Q, K, V, zero, mask).data)


def test_rpr_matches_pairwise_oracle(rng):
    Q, K, V = _qkv(rng, b=2, n=9, d=3)
    kt, vt = rng.uniform(-1, 1, (7, 3)), rng.uniform(-1, 1, (7, 3))
    mask = _ragged_mask(2, 9, [9, 6])
    got = attention_rpr(Q, K, V, RelativePositionTable(Tensor(kt), Tensor(vt), 3), mask).data
    np.testing.assert_allclose(got, rpr_oracle(Q.data, K.data, V.data, kt, vt, 3, mask), atol=1e-12)


def test_rpr_far_offsets_share_contributions(rng):
    n, d, k = 40, 4, 10
    q = Tensor(rng.uniform(-1, 1, (1, n, d)))
    zeros = Tensor(np.zeros((1, n, d)))
    rpr = RelativePositionTable(Tensor(rng.uniform(-1, 1, (2 * k + 1, d))),
                                Tensor(rng.uniform(-1, 1, (2 * k + 1, d))), k)
    # with zero keys the scores are the relative terms alone
    w = attention_weights(q, zeros, zeros, np.ones((1, n), bool), rpr)
    assert w[0, 0, 12] == w[0, 0, 30]
    assert w[0, 0, 10] == w[0, 0, 15] == w[0, 0, 39]
    assert w[0, 30, 0] == w[0, 30, 18]
    # value side: one-hot weights at offsets 12 and 30 read the same table row
    one_hot = np.zeros((1, n, n))
    one_hot[0, 0, 12], one_hot[0, 1, 31] = 1.0, 1.0
    reads = T.matmul(T.scatter_last(Tensor(one_hot), relative_index(n, k), 2 * k + 1),
                     rpr.value_table).data
    assert np.array_equal(reads[0, 0], reads[0, 1])


def test_rpr_gradients_wrt_tables(rng):
    Q, K, V = _qkv(rng, b=2, n=6, d=3)
    rpr = RelativePositionTable(T.parameter(rng.uniform(-1, 1, (5, 3))),
                                T.parameter(rng.uniform(-1, 1, (5, 3))), 2)
    mask = _ragged_mask(2, 6, [6, 4])
    proj = rng.uniform(-1, 1, (2, 6, 3))
    f = lambda: T.sum_(attention_rpr(Q, K, V, rpr, mask) * proj)
    T.backward(f())
    for table in (rpr.key_table, rpr.value_table):
        assert max_rel_err(table.grad, fd_gradient(lambda: f().item(), table.data)) < 1e-4


def _identity_heads(d):
    eye = lambda: Tensor(np.eye(d))
    return MultiHeadParams(eye(), eye(), eye(), eye())


def test_multi_head_identity_single_head(rng):
    X = Tensor(rng.uniform(-1, 1, (2, 5, 6)))
    mask = _ragged_mask(2, 5, [5, 2])
    np.testing.assert_allclose(multi_head(X, _identity_heads(6), mask, 1).data,
                               attention(X, X, X, mask).data, atol=1e-15)


@pytest.mark.parametrize("h", [1, 2, 3, 5, 6])
def test_multi_head_shapes_at_300(rng, h):
    X = Tensor(rng.uniform(-1, 1, (1, 3, 300)) * 0.1)
    w = lambda: Tensor(rng.uniform(-0.05, 0.05, (300, 300)))
    out = multi_head(X, MultiHeadParams(w(), w(), w(), w()), np.ones((1, 3), bool), h)
    assert out.shape == (1, 3, 300)


def test_multi_head_block_diagonal_equals_split_heads(rng):
    d, half = 6, 3
    blocks = {n: [rng.uniform(-1, 1, (half, half)) for _ in range(2)] for n in "qkv"}
    diag = lambda a, b: np.block([[a, np.zeros((half, half))], [np.zeros((half, half)), b]])
    params = MultiHeadParams(*(Tensor(diag(*blocks[n])) for n in "qkv"), Tensor(np.eye(d)))
    X = rng.uniform(-1, 1, (2, 4, d))
    mask = _ragged_mask(2, 4, [4, 3])
    got = multi_head(Tensor(X), params, mask, 2).data
    heads = []
    for i, sl in enumerate([slice(0, half), slice(half, d)]):
        q, k, v = (Tensor(X[..., sl] @ blocks[n][i]) for n in "qkv")
        heads.append(attention(q, k, v, mask).data)
    np.testing.assert_allclose(got, np.concatenate(heads, -1), atol=1e-14)


def test_multi_head_divisibility(rng):
    X = Tensor(rng.uniform(-1, 1, (1, 3, 6)))
    with pytest.raises(HeadDivisibility):
        multi_head(X, _identity_heads(6), np.ones((1, 3), bool), 4)
    with pytest.raises(HeadDivisibility):
        AttentionSpec(300, heads=7)


def test_sinusoidal_values():
    pe = sinusoidal_pe(3, 4).data
    assert np.array_equal(pe[0], [0.0, 1.0, 0.0, 1.0])
    np.testing.assert_allclose(pe[1], [0.841471, 0.540302, 0.010000, 0.999950], atol=1e-6)
    mpmath.mp.dps = 30
    for pos in range(3):
        for col in range(4):
            angle = mpmath.mpf(pos) / mpmath.power(10000, mpmath.mpf(col - col % 2) / 4)
            exact = mpmath.sin(angle) if col % 2 == 0 else mpmath.cos(angle)
            assert pe[pos, col] == pytest.approx(float(exact), abs=1e-15)


def test_sinusoidal_range_extrapolation_and_odd_width():
    pe = sinusoidal_pe(5000, 6).data
    assert pe.shape == (5000, 6) and np.abs(pe).max() <= 1.0
    odd = sinusoidal_pe(4, 5).data
    np.testing.assert_allclose(odd[:, 4], np.sin(np.arange(4) / 10000 ** (4 / 5)))
    np.testing.assert_allclose(odd[:, 1], np.cos(np.arange(4)))


def test_learned_pe(rng):
    table = Tensor(rng.uniform(-1, 1, (10, 4)))
    assert np.array_equal(learned_pe(table, 10).data, table.data)
    assert learned_pe(table, 0).shape == (0, 4)
    with pytest.raises(SequenceTooLong):
        learned_pe(table, 11)


def test_learned_pe_initial_variance():
    spec = ssan_spec(1, d_model=8, n_classes=2, position="learned", max_len=1250)
    table = init_params(spec, 0)["pe.table"].data
    assert table.size == 10_000
    expected = 0.2 ** 2 / 12  # variance of U(-0.1, 0.1)
    assert abs(table.var() / expected - 1) < 0.2
