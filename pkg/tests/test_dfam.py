import numpy as np
import pytest

from lrrg import tensor as T
from lrrg.model import FeatureAlignment
from lrrg.params import ParameterStore
from lrrg.tensor import Tensor
from helpers import randomise

C, TXT = 8, 5


def make(seed=0, randomised=True, **kw):
    store = ParameterStore(seed, dtype=np.float64)
    block = FeatureAlignment(store, "align.stage1", C, TXT, **kw)
    if randomised:
        randomise(store, seed + 10)
    return store, block


def p(store, name):
    return store[f"align.stage1.{name}"].data


def inorm(x, g, b):
    mu = x.mean(axis=(1, 2), keepdims=True)
    var = x.var(axis=(1, 2), keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g[:, None, None] + b[:, None, None]


def c1(x, w, b):
    return np.einsum("oc,chw->ohw", w, x) + b[:, None, None]


def attention_oracle(store, feat, text):
    """Per-pixel loop with explicit exp/normalise."""
    c, h, w = feat.shape
    q = inorm(c1(feat, p(store, "q.weight"), p(store, "q.bias")), p(store, "q_norm.weight"),
              p(store, "q_norm.bias")).reshape(c, h * w)
    k = text @ p(store, "k.weight").T + p(store, "k.bias")
    v = text @ p(store, "v.weight").T + p(store, "v.bias")
    att = np.zeros((h * w, c))
    weights = np.zeros((h * w, len(text)))
    for j in range(h * w):
        e = np.array([np.exp(q[:, j] @ k[l] / np.sqrt(c)) for l in range(len(text))])
        weights[j] = e / e.sum()
        for l in range(len(text)):
            att[j] += weights[j, l] * v[l]
    out = inorm(c1(att.T.reshape(c, h, w), p(store, "t.weight"), p(store, "t.bias")),
                p(store, "t_norm.weight"), p(store, "t_norm.bias"))
    return out, weights


def fuse_oracle(store, feat, att):
    fa = np.maximum(c1(np.maximum(c1(feat, p(store, "a.weight"), p(store, "a.bias")), 0) * att,
                       p(store, "f.weight"), p(store, "f.bias")), 0)
    g = np.maximum(c1(fa, p(store, "gate.b1.weight"), p(store, "gate.b1.bias")), 0)
    return np.tanh(c1(g, p(store, "gate.b2.weight"), p(store, "gate.b2.bias"))) * fa


def test_attention_matches_scalar_loop(f64):
    rng = np.random.default_rng(0)
    store, block = make()
    feat, text = rng.normal(size=(1, C, 4, 4)), rng.normal(size=(1, 5, TXT))
    att, weights = block.attention(Tensor(feat), Tensor(text))
    ref, ref_w = attention_oracle(store, feat[0], text[0])
    np.testing.assert_allclose(att.data[0], ref, rtol=1e-9, atol=1e-11)
    np.testing.assert_allclose(weights[0], ref_w, rtol=1e-9, atol=1e-12)


def test_single_token_every_pixel_attends_it(f64):
    rng = np.random.default_rng(1)
    store, block = make()
    _, weights = block.attention(Tensor(rng.normal(size=(1, C, 3, 3))), Tensor(rng.normal(size=(1, 1, TXT))))
    assert np.all(weights == 1.0)


def test_identical_tokens_give_uniform_weights(f64):
    rng = np.random.default_rng(2)
    store, block = make()
    tok = rng.normal(size=TXT)
    text = np.tile(tok, (1, 4, 1))
    _, weights = block.attention(Tensor(rng.normal(size=(1, C, 3, 3))), Tensor(text))
    np.testing.assert_allclose(weights, 0.25, atol=1e-15)


def test_weights_sum_to_one_with_padding(f64):
    rng = np.random.default_rng(3)
    _, block = make()
    mask = np.array([[True] * 6, [True, True, True, False, False, False]])
    _, weights = block.attention(Tensor(rng.normal(size=(2, C, 4, 4))), Tensor(rng.normal(size=(2, 6, TXT))), mask)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(weights[1, :, 3:] < 1e-300)


def test_padding_equals_unpadded(f64):
    rng = np.random.default_rng(4)
    _, block = make()
    feat, text = rng.normal(size=(1, C, 3, 3)), rng.normal(size=(1, 3, TXT))
    padded = np.concatenate([text, rng.normal(size=(1, 2, TXT))], axis=1)
    a, _ = block.attention(Tensor(feat), Tensor(text))
    b, _ = block.attention(Tensor(feat), Tensor(padded), np.array([[1, 1, 1, 0, 0]], dtype=bool))
    np.testing.assert_allclose(a.data, b.data, rtol=1e-12, atol=1e-14)


def test_missing_text_rejected(f64):
    _, block = make()
    with pytest.raises(ValueError, match="missing prior text"):
        block.attention(Tensor(np.zeros((1, C, 2, 2))), Tensor(np.zeros((1, 0, TXT))))


def test_zero_gate_gives_exact_zero(f64):
    rng = np.random.default_rng(5)
    _, block = make(randomised=False)
    out = block(Tensor(rng.normal(size=(1, C, 4, 4))), Tensor(rng.normal(size=(1, 3, TXT))))
    assert np.all(out.data == 0.0)


def test_identity_residual_at_init(f64):
    rng = np.random.default_rng(6)
    _, block = make(randomised=False)
    feat = Tensor(rng.normal(size=(1, C, 4, 4)))
    np.testing.assert_array_equal(T.add(feat, block(feat, Tensor(rng.normal(size=(1, 3, TXT))))).data, feat.data)


def test_zero_attention_exercises_bias_path(f64):
    rng = np.random.default_rng(7)
    store, block = make()
    feat = rng.normal(size=(1, C, 3, 3))
    out = block.fuse(Tensor(feat), Tensor(np.zeros((1, C, 3, 3))))
    fa = np.maximum(p(store, "f.bias"), 0)[:, None, None] * np.ones((C, 3, 3))
    g = np.maximum(c1(fa, p(store, "gate.b1.weight"), p(store, "gate.b1.bias")), 0)
    gate = np.tanh(c1(g, p(store, "gate.b2.weight"), p(store, "gate.b2.bias")))
    np.testing.assert_allclose(out.data[0], gate * fa, rtol=1e-12)


def test_fuse_matches_formula_replay(f64):
    rng = np.random.default_rng(8)
    store, block = make()
    feat, att = rng.normal(size=(2, C, 3, 3)), rng.normal(size=(2, C, 3, 3))
    out = block.fuse(Tensor(feat), Tensor(att)).data
    for i in range(2):
        np.testing.assert_allclose(out[i], fuse_oracle(store, feat[i], att[i]), rtol=1e-10, atol=1e-12)


def test_full_block_gradient(f64):
    rng = np.random.default_rng(9)
    store, block = make()
    feat = Tensor(rng.normal(size=(1, 4, 6, 6)), requires_grad=True)
    small_store = ParameterStore(0, dtype=np.float64)
    small = FeatureAlignment(small_store, "align.stage1", 4, TXT)
    randomise(small_store, 3, scale=0.5)
    text = Tensor(rng.normal(size=(1, 3, TXT)), requires_grad=True)
    proj = Tensor(rng.normal(size=(1, 4, 6, 6)))
    f = lambda: T.sum(T.mul(T.add(feat, small(feat, text)), proj))  # noqa: E731
    for leaf in [feat, text] + [t for _, t in small_store.items()]:
        assert T.finite_difference_check(f, leaf) < 1e-4


def test_text_input_gets_no_gradient_when_detached(f64):
    rng = np.random.default_rng(10)
    store, block = make()
    feat = Tensor(rng.normal(size=(1, C, 3, 3)))
    text = Tensor(rng.normal(size=(1, 3, TXT)))
    T.backward(T.sum(block(feat, text)))
    assert text.grad is None
    assert store["align.stage1.q.weight"].grad is not None
    assert np.any(store["align.stage1.q.weight"].grad != 0)


def test_token_permutation_invariance_without_positions(f64):
    rng = np.random.default_rng(11)
    _, block = make()
    feat, text = rng.normal(size=(1, C, 3, 3)), rng.normal(size=(1, 5, TXT))
    perm = [3, 0, 4, 2, 1]
    a = block(Tensor(feat), Tensor(text)).data
    b = block(Tensor(feat), Tensor(text[:, perm])).data
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_no_fam_ablation_gates_raw_feature(f64):
    rng = np.random.default_rng(12)
    store, block = make(align=False)
    assert not any(".q." in n for n in store)
    feat = rng.normal(size=(1, C, 3, 3))
    g = np.maximum(c1(feat[0], p(store, "gate.b1.weight"), p(store, "gate.b1.bias")), 0)
    gate = np.tanh(c1(g, p(store, "gate.b2.weight"), p(store, "gate.b2.bias")))
    out = block(Tensor(feat), Tensor(rng.normal(size=(1, 2, TXT))))
    np.testing.assert_allclose(out.data[0], gate * feat[0], rtol=1e-12)


def test_no_df_ablation_is_pass_through_gate(f64):
    rng = np.random.default_rng(13)
    store, block = make(dynamic=False)
    assert not any("gate" in n for n in store)
    feat, text = rng.normal(size=(1, C, 3, 3)), rng.normal(size=(1, 2, TXT))
    att, _ = block.attention(Tensor(feat), Tensor(text))
    fa = np.maximum(c1(np.maximum(c1(feat[0], p(store, "a.weight"), p(store, "a.bias")), 0) * att.data[0],
                       p(store, "f.weight"), p(store, "f.bias")), 0)
    out = block(Tensor(feat), Tensor(text))
    assert out.shape == feat.shape
    np.testing.assert_allclose(out.data[0], fa, rtol=1e-12)
