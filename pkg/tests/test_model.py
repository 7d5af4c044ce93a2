import numpy as np
import pytest

from ssan import tensor as T
from ssan.attention import AttentionSpec, MultiHeadParams, attention, multi_head
from ssan.bench import count_parameters, enumerate_parameters
from ssan.model import (
    EMBEDDING,
    Arch,
    Batch,
    ModelSpec,
    forward,
    init_params,
    l2_penalty,
    load_checkpoint,
    param_shapes,
    probabilities,
    save_checkpoint,
    ssan_spec,
)
from ssan.tensor import Tensor
from ssan.train import cross_entropy

from conftest import fd_gradient, max_rel_err

VOCAB = 30


def _batch(rng, b=3, n=6, lengths=None):
    lengths = lengths or [n] + list(rng.integers(1, n + 1, size=b - 1))
    ids = rng.integers(2, VOCAB, size=(b, n))
    ids[np.arange(n)[None, :] >= np.asarray(lengths)[:, None]] = 0
    return Batch(ids, ids != 0, rng.integers(0, 3, size=b))


def _transformer(d=12, h=2, pos="rpr", **kw):
    return ModelSpec(Arch.TRANSFORMER, d, 3, AttentionSpec(d, heads=h, position=pos, clip_k=3),
                     vocab_size=VOCAB, **kw)


def test_single_token_identity_network_is_relu_chain(rng):
    d = 5
    spec = ssan_spec(1, d_model=d, n_classes=3, position="rpr", clip_k=2, vocab_size=VOCAB)
    params = init_params(spec, rng)
    for name, p in params.items():
        if name.endswith(".weight") and name != "out.weight":
            p.data[...] = np.eye(d)
        elif name.endswith(".bias") or ".rpr." in name:
            p.data[...] = 0.0
    ids = np.array([[7]])
    logits = forward(spec, params, Batch(ids, ids != 0, [0])).data
    e = params[EMBEDDING].data[7]
    np.testing.assert_allclose(logits[0], np.maximum(e, 0) @ params["out.weight"].data, atol=1e-15)


def _permuted_logits(spec, rng):
    params = init_params(spec, rng)
    ids = rng.permutation(np.arange(2, 12))[None, :8]
    perm = np.array([3, 0, 7, 1, 5, 2, 6, 4])
    a = forward(spec, params, Batch(ids, ids != 0, [0])).data
    b = forward(spec, params, Batch(ids[:, perm], ids != 0, [0])).data
    return a, b


def test_no_position_information_is_permutation_invariant(rng):
    for spec in (ssan_spec(1, 8, 3, "none", vocab_size=VOCAB), ssan_spec(2, 8, 3, "none", vocab_size=VOCAB),
                 _transformer(pos="none")):
        a, b = _permuted_logits(spec, rng)
        np.testing.assert_allclose(a, b, atol=1e-9)


@pytest.mark.parametrize("pos", ["pe", "rpr", "learned"])
def test_position_information_breaks_permutation_invariance(rng, pos):
    a, b = _permuted_logits(ssan_spec(1, 8, 3, pos, clip_k=3, vocab_size=VOCAB, max_len=10), rng)
    assert np.abs(a - b).max() > 1e-6


@pytest.mark.parametrize("pos,layers,expected", [("rpr", 1, 465_600), ("pe", 1, 453_000),
                                                 ("rpr", 2, 839_400)])
def test_reference_counts_by_enumeration(pos, layers, expected):
    spec = ssan_spec(layers, 300, 5, pos, 10)
    assert sum(np.prod(s) for s in param_shapes(spec).values()) == expected
    assert enumerate_parameters(init_params(spec, 0)) == expected


def test_transformer_output_shape_and_residual_path(rng):
    spec = _transformer(d=12, h=3)
    params = init_params(spec, rng)
    for proj in "qk":
        for layer in (1, 2):
            params[f"layer{layer}.attn.{proj}.weight"].data[...] = 0.0
    batch = _batch(rng, b=4, n=5)
    logits = forward(spec, params, batch).data
    assert logits.shape == (4, 3)
    ids = np.array([[3, 3, 3], [4, 4, 4]])
    out = forward(spec, params, Batch(ids, ids != 0, [0, 0])).data
    assert np.abs(out[0] - out[1]).max() > 1e-6


def test_transformer_gradient_check_through_both_layers(rng):
    spec = _transformer(d=12, h=2, pos="rpr")
    params = init_params(spec, rng)
    for name, p in params.items():
        if name.endswith(".bias"):
            p.data[...] = rng.uniform(-0.1, 0.1, p.shape)
    batch = _batch(rng, b=3, n=5)
    f = lambda: cross_entropy(forward(spec, params, batch), batch.labels)
    T.backward(f())
    for name in ("layer1.attn.q.weight", "layer1.rpr.key", "layer1.norm1.gain", "layer2.ffn1.weight",
                 "layer2.rpr.value", "layer2.norm2.bias", "pool.weight", EMBEDDING):
        p = params[name]
        assert max_rel_err(p.grad, fd_gradient(lambda: f().item(), p.data)) < 1e-4, name


def test_bow_zero_weights_uniform_and_ave_single_token(rng):
    bow = ModelSpec(Arch.BOW, 8, 4, vocab_size=VOCAB)
    params = init_params(bow, rng)
    params["out.weight"].data[...] = 0.0
    probs = probabilities(forward(bow, params, _batch(rng)))
    np.testing.assert_allclose(probs, 0.25)

    ave = ModelSpec(Arch.AVE, 8, 3, vocab_size=VOCAB)
    params = init_params(ave, rng)
    params["out.weight"].data[...] = np.eye(8)[:, :3]
    ids = np.array([[5, 0, 0]])
    logits = forward(ave, params, Batch(ids, ids != 0, [0])).data
    np.testing.assert_allclose(logits[0], params[EMBEDDING].data[5, :3], atol=1e-15)


def test_bow_counts_tokens(rng):
    spec = ModelSpec(Arch.BOW, 8, 2, vocab_size=6)
    params = init_params(spec, rng)
    params["out.weight"].data[...] = np.arange(12.0).reshape(6, 2)
    params["out.bias"].data[...] = [0.5, -0.5]
    ids = np.array([[2, 2, 5, 0]])
    logits = forward(spec, params, Batch(ids, ids != 0, [0])).data
    np.testing.assert_allclose(logits[0], 2 * np.array([4.0, 5.0]) + [10.0, 11.0] + [0.5, -0.5])


def test_init_is_seeded_and_shaped():
    spec = ssan_spec(2, 16, 3, "rpr", clip_k=4, vocab_size=VOCAB)
    a, b = init_params(spec, 42), init_params(spec, 42)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    for name, shape in param_shapes(spec).items():
        assert a[name].shape == shape
    assert a[EMBEDDING].shape == (VOCAB, 16) and not a[EMBEDDING].data[0].any()
    assert all(not a[k].data.any() for k in a if k.endswith(".bias"))


def test_glorot_variance_at_300():
    w = init_params(ssan_spec(1, 300, 5, "rpr"), 7)["layer1.q.weight"].data
    limit = np.sqrt(6 / 600)
    assert abs(w.var() / (limit ** 2 / 3) - 1) < 0.15
    assert np.abs(w).max() <= limit


def test_eval_determinism_and_dropout_placement(rng):
    spec = ssan_spec(2, 8, 3, "rpr", clip_k=2, vocab_size=VOCAB, dropout_rate=0.0)
    params = init_params(spec, rng)
    batch = _batch(rng)
    a, b = forward(spec, params, batch).data, forward(spec, params, batch).data
    assert np.array_equal(a, b)
    train_mode = forward(spec, params, batch, training=True, rng=np.random.default_rng(0)).data
    assert np.array_equal(a, train_mode)
    noisy = ssan_spec(2, 8, 3, "rpr", clip_k=2, vocab_size=VOCAB, dropout_rate=0.5)
    dropped = forward(noisy, params, batch, training=True, rng=np.random.default_rng(0)).data
    assert not np.array_equal(a, dropped)


def test_ssan_attention_step_matches_single_head_multi_head(rng):
    d = 6
    spec = ssan_spec(1, d, 3, "none", vocab_size=VOCAB, qkv_activation="linear")
    params = init_params(spec, rng)
    X = Tensor(rng.uniform(-1, 1, (2, 5, d)))
    mask = np.ones((2, 5), bool)
    mask[1, 3:] = False
    dense = lambda n: T.matmul(X, params[f"layer1.{n}.weight"]) + params[f"layer1.{n}.bias"]
    direct = attention(dense("q"), dense("k"), dense("v"), mask).data
    mh = MultiHeadParams(*(params[f"layer1.{n}.weight"] for n in "qkv"), Tensor(np.eye(d)),
                         *(params[f"layer1.{n}.bias"] for n in "qkv"))
    np.testing.assert_allclose(multi_head(X, mh, mask, 1).data, direct, atol=1e-14)


def test_qkv_activation_switch(rng):
    batch = _batch(rng)
    relu = ssan_spec(1, 8, 3, "rpr", clip_k=2, vocab_size=VOCAB)
    linear = ssan_spec(1, 8, 3, "rpr", clip_k=2, vocab_size=VOCAB, qkv_activation="linear")
    params = init_params(relu, 3)
    assert not np.allclose(forward(relu, params, batch).data, forward(linear, params, batch).data)
    with pytest.raises(ValueError):
        ssan_spec(1, 8, 3, qkv_activation="tanh")


def test_l2_penalty_covers_weights_only(rng):
    spec = ModelSpec(Arch.AVE, 4, 2, vocab_size=VOCAB, l2_lambda=0.5)
    params = init_params(spec, rng)
    params["out.bias"].data[...] = 3.0
    pen = l2_penalty(spec, params)
    assert pen.item() == pytest.approx(0.5 * (params["out.weight"].data ** 2).sum())
    T.backward(pen)
    np.testing.assert_allclose(params["out.weight"].grad, params["out.weight"].data)
    assert params["out.bias"].grad is None
    assert l2_penalty(ssan_spec(1, 4, 2), init_params(ssan_spec(1, 4, 2), 0)) is None


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    spec = _transformer(d=12, h=2, pos="rpr", dropout_rate=0.3)
    params = init_params(spec, rng)
    path = tmp_path / "model.npz"
    save_checkpoint(path, spec, params, ["a", "b"])
    spec2, params2, vocab = load_checkpoint(path)
    assert spec2 == spec and vocab == ["a", "b"]
    assert params2.keys() == params.keys()
    for k in params:
        assert params2[k].data.tobytes() == params[k].data.tobytes()


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(Arch.SSAN1, 8, 1)
    with pytest.raises(ValueError):
        ModelSpec(Arch.SSAN1, 8, 2, AttentionSpec(8, heads=2))
    with pytest.raises(ValueError):
        ModelSpec(Arch.BOW, 8, 2)
    assert ModelSpec(Arch.TRANSFORMER, 300, 5).attention.heads == 6
