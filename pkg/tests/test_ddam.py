import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrrg import tensor as T
from lrrg.model import DifferenceAware, LDConv, ldconv, pixel_difference
from lrrg.params import ParameterStore
from lrrg.tensor import ShapeError, Tensor
from helpers import randomise

C = 4


def make(randomised=True, seed=0, **kw):
    store = ParameterStore(seed, dtype=np.float64)
    block = DifferenceAware(store, "diff.stage1", C, **kw)
    if randomised:
        randomise(store, seed + 20)
    return store, block


def p(store, name):
    return store[f"diff.stage1.{name}"].data


def ldconv_oracle(x, w, theta, b):
    """Both branches evaluated patchwise: vanilla and central-difference patches."""
    c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((w.shape[0], h, wd))
    for o in range(w.shape[0]):
        for i in range(h):
            for j in range(wd):
                patch = xp[:, i:i + 3, j:j + 3]
                cd = patch - patch[:, 1:2, 1:2]
                out[o, i, j] = np.sum(w[o] * patch) + theta[o] * np.sum(w[o] * cd) + b[o]
    return out


def c1(x, w, b):
    return np.einsum("oc,chw->ohw", w, x) + b[:, None, None]


def ddam_oracle(store, cur, pri):
    enc = ldconv_oracle(cur, p(store, "ldc_cur.weight"), p(store, "ldc_cur.theta"), p(store, "ldc_cur.bias"))
    enp = ldconv_oracle(pri, p(store, "ldc_prior.weight"), p(store, "ldc_prior.theta"), p(store, "ldc_prior.bias"))
    pd = np.zeros((1,) + cur.shape[1:])
    for i in range(cur.shape[1]):
        for j in range(cur.shape[2]):
            pd[0, i, j] = 1 / (1 + np.exp(-np.mean(enc[:, i, j] - enp[:, i, j])))
    da = np.maximum(c1(np.concatenate([enc * pd, enp * pd]), p(store, "pd.weight"), p(store, "pd.bias")), 0)
    g = np.maximum(c1(da, p(store, "gate.b1.weight"), p(store, "gate.b1.bias")), 0)
    return cur + np.tanh(c1(g, p(store, "gate.b2.weight"), p(store, "gate.b2.bias"))) * da


# -- ldconv -------------------------------------------------------------------

def test_ldconv_matches_patch_loop(f64):
    rng = np.random.default_rng(0)
    x, w, th, b = rng.normal(size=(1, 4, 5, 5)), rng.normal(size=(3, 4, 3, 3)), rng.normal(size=3), rng.normal(size=3)
    out = ldconv(Tensor(x), Tensor(w), Tensor(th), Tensor(b)).data
    np.testing.assert_allclose(out[0], ldconv_oracle(x[0], w, th, b), rtol=1e-10, atol=1e-12)


def test_ldconv_theta_zero_is_vanilla_conv(f64):
    rng = np.random.default_rng(1)
    x, w, b = Tensor(rng.normal(size=(2, 4, 5, 5))), Tensor(rng.normal(size=(4, 4, 3, 3))), Tensor(rng.normal(size=4))
    out = ldconv(x, w, Tensor(np.zeros(4)), b)
    np.testing.assert_array_equal(out.data, T.conv2d(x, w, b, padding=1).data)


def test_ldconv_constant_input_kills_differences(f64):
    # interior pixels: every patch is constant, so the difference branch vanishes
    rng = np.random.default_rng(2)
    x = Tensor(np.full((1, 4, 6, 6), 0.7))
    w, b = Tensor(rng.normal(size=(4, 4, 3, 3))), Tensor(rng.normal(size=4))
    out = ldconv(x, w, Tensor(rng.normal(size=4)), b).data
    vanilla = T.conv2d(x, w, b, padding=1).data
    np.testing.assert_allclose(out[..., 1:-1, 1:-1], vanilla[..., 1:-1, 1:-1], rtol=1e-12)


def test_ldconv_shape_errors(f64):
    with pytest.raises(ShapeError):
        ldconv(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((4, 4, 3, 3))), Tensor(np.zeros(4)))


def test_ldconv_theta_initialised_to_tenth():
    store = ParameterStore(0, dtype=np.float64)
    LDConv(store, "x", 5)
    np.testing.assert_array_equal(store["x.theta"].data, 0.1)


# -- pixel difference -------------------------------------------------------------

def test_equal_features_give_half(f64):
    x = Tensor(np.random.default_rng(3).normal(size=(1, 4, 3, 3)))
    np.testing.assert_array_equal(pixel_difference(x, x).data, 0.5)


def test_large_difference_saturates(f64):
    a = Tensor(np.full((1, 4, 2, 2), 20.0))
    assert np.all(np.abs(pixel_difference(a, Tensor(np.zeros((1, 4, 2, 2)))).data - 1) < 1e-6)


def test_pixel_difference_oracle(f64):
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
    out = pixel_difference(Tensor(a), Tensor(b)).data
    for n in range(2):
        for i in range(4):
            for j in range(4):
                d = sum(a[n, c, i, j] - b[n, c, i, j] for c in range(3)) / 3
                assert out[n, 0, i, j] == pytest.approx(1 / (1 + np.exp(-d)), rel=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_pixel_difference_strictly_inside_unit_interval(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(scale=5, size=(1, 3, 4, 4)), rng.normal(scale=5, size=(1, 3, 4, 4))
    out = pixel_difference(Tensor(a), Tensor(b)).data
    assert np.all(out > 0) and np.all(out < 1)


def test_pixel_difference_monotone():
    base = np.zeros((1, 2, 1, 1))
    values = [pixel_difference(Tensor(base + d), Tensor(base)).item() for d in np.linspace(-3, 3, 13)]
    assert all(x < y for x, y in zip(values, values[1:]))


def test_pixel_difference_shape_error():
    with pytest.raises(ShapeError):
        pixel_difference(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 3, 4))))


# -- amplification and full module ----------------------------------------------------

def test_closed_saliency_gives_relu_bias(f64):
    store, block = make()
    rng = np.random.default_rng(5)
    out = block.amplify(Tensor(rng.normal(size=(1, C, 3, 3))), Tensor(rng.normal(size=(1, C, 3, 3))),
                        Tensor(np.zeros((1, 1, 3, 3))))
    np.testing.assert_allclose(out.data[0], np.maximum(p(store, "pd.bias"), 0)[:, None, None] * np.ones((C, 3, 3)))


def test_symmetric_projection_of_equal_features(f64):
    # identical halves and weights [I | I] with zero bias: P^d(cat(F*0.5, F*0.5)) = relu(F)
    store, block = make()
    store["diff.stage1.pd.weight"].data = np.concatenate([np.eye(C), np.eye(C)], axis=1)
    store["diff.stage1.pd.bias"].data = np.zeros(C)
    f = np.random.default_rng(6).normal(size=(1, C, 3, 3))
    half = Tensor(np.full((1, 1, 3, 3), 0.5))
    out = block.amplify(Tensor(f), Tensor(f), half)
    np.testing.assert_allclose(out.data, np.maximum(f, 0), rtol=1e-15)


def test_module_matches_formula_replay(f64):
    store, block = make()
    rng = np.random.default_rng(7)
    cur, pri = rng.normal(size=(2, C, 4, 4)), rng.normal(size=(2, C, 4, 4))
    out = block(Tensor(cur), Tensor(pri)).data
    for i in range(2):
        np.testing.assert_allclose(out[i], ddam_oracle(store, cur[i], pri[i]), rtol=1e-10, atol=1e-12)


def test_no_prior_is_bit_identical_and_gradient_free(f64):
    store, block = make()
    cur = Tensor(np.random.default_rng(8).normal(size=(1, C, 3, 3)), requires_grad=True)
    out = block(cur, None, has_prior=False)
    assert out is cur
    T.backward(T.sum(T.mul(out, out)))
    assert all(t.grad is None for _, t in store.items())


def test_zero_gate_is_identity_even_with_prior(f64):
    store, block = make(randomised=False)
    rng = np.random.default_rng(9)
    cur = Tensor(rng.normal(size=(1, C, 3, 3)))
    out = block(cur, Tensor(rng.normal(size=(1, C, 3, 3))))
    np.testing.assert_array_equal(out.data, cur.data)


def test_prior_missing_is_contract_violation(f64):
    _, block = make()
    with pytest.raises(ValueError, match="no prior feature"):
        block(Tensor(np.zeros((1, C, 2, 2))), None, has_prior=True)


def test_full_block_gradient(f64):
    store, block = make(seed=3)
    rng = np.random.default_rng(10)
    cur = Tensor(rng.normal(size=(1, C, 4, 4)), requires_grad=True)
    pri = Tensor(rng.normal(size=(1, C, 4, 4)), requires_grad=True)
    proj = Tensor(rng.normal(size=(1, C, 4, 4)))
    f = lambda: T.sum(T.mul(block(cur, pri), proj))  # noqa: E731
    for leaf in [cur, pri] + [t for _, t in store.items()]:
        assert T.finite_difference_check(f, leaf) < 1e-4


def test_no_dam_ablation_uses_prior_feature(f64):
    store, block = make(difference=False)
    assert not any("ldc" in n or ".pd." in n for n in store)
    rng = np.random.default_rng(11)
    cur, pri = rng.normal(size=(1, C, 3, 3)), rng.normal(size=(1, C, 3, 3))
    g = np.maximum(c1(pri[0], p(store, "gate.b1.weight"), p(store, "gate.b1.bias")), 0)
    expected = cur[0] + np.tanh(c1(g, p(store, "gate.b2.weight"), p(store, "gate.b2.bias"))) * pri[0]
    np.testing.assert_allclose(block(Tensor(cur), Tensor(pri)).data[0], expected, rtol=1e-12)


def test_no_df_ablation_adds_difference_feature(f64):
    store, block = make(dynamic=False)
    rng = np.random.default_rng(12)
    cur, pri = Tensor(rng.normal(size=(1, C, 3, 3))), Tensor(rng.normal(size=(1, C, 3, 3)))
    da, _ = block.difference_feature(cur, pri)
    out = block(cur, pri)
    assert out.shape == cur.shape
    np.testing.assert_allclose(out.data, cur.data + da.data, rtol=1e-15)
