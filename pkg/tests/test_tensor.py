"""Kernel-level checks: hand oracles for the dense ops, finite-difference
oracles for the MLP gradients, and exactness of the FLOP accounting."""

import numpy as np
import pytest

from docprune.rng import Rng
from docprune.tensor import (ELEMWISE_FLOPS, FlopCounter, LossCurve, Mlp2,
                             attention, bce_loss, gelu, gelu_grad, layernorm,
                             linear, matmul, mlp2_backward, mlp2_forward,
                             mlp2_init, mlp2_zeros, sigmoid, softmax_rows)


# --- matmul ---

def test_matmul_identity():
    b = np.array([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), b), b)


def test_matmul_hand_case():
    out = matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
    np.testing.assert_array_equal(out, [[11.0]])


def test_matmul_against_triple_loop():
    rng = Rng(11)
    a = rng.uniforms(64, -1, 1).reshape(8, 8)
    b = rng.uniforms(64, -1, 1).reshape(8, 8)
    ref = np.zeros((8, 8))
    for i in range(8):
        for j in range(8):
            s = 0.0
            for k in range(8):
                s += a[i, k] * b[k, j]
            ref[i, j] = s
    np.testing.assert_allclose(matmul(a, b), ref, atol=1e-12)


def test_matmul_rejects_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError, match="2-D"):
        matmul(np.zeros(3), np.zeros((3, 2)))


def test_matmul_transpose_consistency():
    rng = Rng(12)
    a = rng.uniforms(64, -1, 1).reshape(8, 8)
    b = rng.uniforms(64, -1, 1).reshape(8, 8)
    np.testing.assert_allclose(matmul(a, b).T, matmul(b.T, a.T), atol=1e-10)


# --- softmax ---

def test_softmax_symmetry_and_shift():
    np.testing.assert_allclose(softmax_rows(np.array([[0.0, 0.0]])),
                               [[0.5, 0.5]])
    np.testing.assert_allclose(softmax_rows(np.array([[1000.0, 1000.0]])),
                               [[0.5, 0.5]])


def test_softmax_rows_sum_to_one():
    a = Rng(13).uniforms(16, -5, 5).reshape(4, 4)
    sums = softmax_rows(a).sum(axis=1)
    np.testing.assert_allclose(sums, np.ones(4), atol=1e-9)


def test_softmax_shift_invariance():
    a = Rng(14).uniforms(12, -3, 3).reshape(3, 4)
    np.testing.assert_allclose(softmax_rows(a), softmax_rows(a + 7.5),
                               atol=1e-12)


# --- layernorm ---

def test_layernorm_constant_row_is_zero():
    out = layernorm(np.full((1, 6), 4.2), np.ones(6), np.zeros(6))
    np.testing.assert_allclose(out, np.zeros((1, 6)), atol=1e-6)


def test_layernorm_two_point():
    out = layernorm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2),
                    eps=1e-12)
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-5)


def test_layernorm_row_statistics():
    a = Rng(15).uniforms(32, -2, 2).reshape(4, 8)
    out = layernorm(a, np.ones(8), np.zeros(8))
    np.testing.assert_allclose(out.mean(axis=1), np.zeros(4), atol=1e-6)
    np.testing.assert_allclose(out.var(axis=1), np.ones(4), atol=1e-3)


def test_layernorm_validates_shapes():
    with pytest.raises(ValueError, match="affine"):
        layernorm(np.zeros((2, 4)), np.ones(3), np.zeros(4))
    with pytest.raises(ValueError, match="eps"):
        layernorm(np.zeros((2, 4)), np.ones(4), np.zeros(4), eps=0.0)


# --- attention ---

def test_attention_one_hot_limit():
    # query aligned with key 0 at large scale: output is value row 0
    q = np.array([[100.0, 0.0]])
    k = np.array([[100.0, 0.0], [0.0, 100.0]])
    v = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(attention(q, k, v), [[1.0, 2.0]], atol=1e-9)


def test_attention_identical_queries_identical_rows():
    q = np.tile(Rng(16).uniforms(4), (3, 1))
    k = Rng(17).uniforms(20).reshape(5, 4)
    v = Rng(18).uniforms(10).reshape(5, 2)
    out = attention(q, k, v)
    np.testing.assert_allclose(out[0], out[1])
    np.testing.assert_allclose(out[0], out[2])


def test_attention_matches_composed_oracle():
    rng = Rng(19)
    q = rng.uniforms(12, -1, 1).reshape(3, 4)
    k = rng.uniforms(12, -1, 1).reshape(3, 4)
    v = rng.uniforms(15, -1, 1).reshape(3, 5)
    ref = softmax_rows((q @ k.T) / 2.0) @ v
    np.testing.assert_allclose(attention(q, k, v), ref, atol=1e-10)


def test_attention_rejects_mismatch():
    with pytest.raises(ValueError, match="q/k"):
        attention(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 4)))
    with pytest.raises(ValueError, match="k/v"):
        attention(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((3, 4)))


# --- MLP and gradients ---

def test_mlp2_zero_network_scores_half():
    x = Rng(20).uniforms(18).reshape(3, 6)
    out, _ = mlp2_forward(x, mlp2_zeros(6, 8, 1), sigmoid_out=True)
    np.testing.assert_allclose(out, np.full((3, 1), 0.5))


def test_bce_head_gradient_closed_form():
    # prediction 0.5, label 1: dL/db2 = (pred - y) / n = -0.5
    x = np.zeros((1, 6))
    p = mlp2_zeros(6, 8, 1)
    pred, cache = mlp2_forward(x, p, sigmoid_out=True)
    g = mlp2_backward(cache, p, np.array([[1.0]]))
    np.testing.assert_allclose(g["db2"], [-0.5])


def test_bce_loss_at_half_is_ln2():
    pred = np.full((4, 1), 0.5)
    y = np.array([[0.0], [1.0], [1.0], [0.0]])
    assert abs(bce_loss(pred, y) - np.log(2.0)) < 1e-9


def test_bce_pos_weight_scales_positive_term():
    pred = np.full((2, 1), 0.5)
    y = np.array([[1.0], [0.0]])
    assert abs(bce_loss(pred, y, pos_weight=3.0) - 2.0 * np.log(2.0)) < 1e-9


def _fd_grad(x, p, y, param, idx, pw, h=1e-5):
    arr = getattr(p, param)
    arr[idx] += h
    up = bce_loss(mlp2_forward(x, p, sigmoid_out=True)[0], y, pw)
    arr[idx] -= 2 * h
    down = bce_loss(mlp2_forward(x, p, sigmoid_out=True)[0], y, pw)
    arr[idx] += h
    return (up - down) / (2 * h)


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    rng = Rng(seed)
    x = rng.uniforms(30, -1, 1).reshape(5, 6)
    y = (rng.uniforms(5) > 0.5).astype(float).reshape(5, 1)
    p = mlp2_init(rng, 6, 7, 1)
    pw = 1.0 if seed % 2 == 0 else 2.5
    _, cache = mlp2_forward(x, p, sigmoid_out=True)
    g = mlp2_backward(cache, p, y, pos_weight=pw)
    checks = [("w1", (2, 3), "dw1"), ("b1", (1,), "db1"),
              ("w2", (4, 0), "dw2"), ("b2", (0,), "db2")]
    for param, idx, key in checks:
        arr_idx = idx if len(idx) > 1 else idx[0]
        analytic = g[key][arr_idx]
        numeric = _fd_grad(x, p, y, param, arr_idx, pw)
        denom = max(abs(numeric), 1e-8)
        assert abs(analytic - numeric) / denom < 1e-4, (param, idx)


def test_input_gradient_matches_finite_differences():
    rng = Rng(77)
    x = rng.uniforms(12, -1, 1).reshape(2, 6)
    y = np.array([[1.0], [0.0]])
    p = mlp2_init(rng, 6, 5, 1)
    _, cache = mlp2_forward(x, p, sigmoid_out=True)
    g = mlp2_backward(cache, p, y)
    i, j = 1, 4
    h = 1e-5
    x[i, j] += h
    up = bce_loss(mlp2_forward(x, p, sigmoid_out=True)[0], y)
    x[i, j] -= 2 * h
    dn = bce_loss(mlp2_forward(x, p, sigmoid_out=True)[0], y)
    x[i, j] += h
    numeric = (up - dn) / (2 * h)
    assert abs(g["dx"][i, j] - numeric) / max(abs(numeric), 1e-8) < 1e-4


def test_gelu_grad_matches_finite_differences():
    x = Rng(9).uniforms(50, -3, 3)
    h = 1e-6
    numeric = (gelu(x + h) - gelu(x - h)) / (2 * h)
    np.testing.assert_allclose(gelu_grad(x), numeric, atol=1e-6)


def test_mlp2_forward_rejects_bad_input():
    with pytest.raises(ValueError, match="dim mismatch"):
        mlp2_forward(np.zeros((2, 5)), mlp2_zeros(6, 4, 1))


def test_backward_rejects_label_shape():
    x = np.zeros((2, 6))
    p = mlp2_zeros(6, 4, 1)
    _, cache = mlp2_forward(x, p, sigmoid_out=True)
    with pytest.raises(ValueError, match="label shape"):
        mlp2_backward(cache, p, np.zeros((3, 1)))


# --- FLOP accounting ---

def test_flop_counts_are_exact_integers():
    c = FlopCounter()
    matmul(np.zeros((3, 4)), np.zeros((4, 5)), c)
    assert c.total() == 2 * 3 * 4 * 5

    c = FlopCounter()
    linear(np.zeros((3, 4)), np.zeros((4, 5)), np.zeros(5), c)
    assert c.total() == 2 * 3 * 4 * 5 + 15

    c = FlopCounter()
    softmax_rows(np.zeros((2, 8)), c)
    assert c.total() == ELEMWISE_FLOPS * 16

    c = FlopCounter()
    attention(np.zeros((3, 4)), np.zeros((5, 4)), np.zeros((5, 6)), c)
    expected = 2 * 3 * 4 * 5 + ELEMWISE_FLOPS * 15 + 2 * 3 * 5 * 6
    assert c.total() == expected


def test_flop_counter_additive_across_composition():
    c_both = FlopCounter()
    x = Rng(30).uniforms(24).reshape(4, 6)
    p = mlp2_init(Rng(31), 6, 5, 2)
    mlp2_forward(x, p, c_both)

    c1, c2, c3 = FlopCounter(), FlopCounter(), FlopCounter()
    z1 = linear(x, p.w1, p.b1, c1)
    h = gelu(z1, c2)
    linear(h, p.w2, p.b2, c3)
    assert c_both.total() == c1.total() + c2.total() + c3.total()


def test_flop_counter_categories_nest():
    c = FlopCounter()
    with c.category("outer"):
        c.add(10)
        with c.category("inner"):
            c.add(5)
        c.add(1)
    c.add(2)
    assert c.get("outer") == 11
    assert c.get("inner") == 5
    assert c.get("uncategorized") == 2
    assert c.total() == 18


def test_sigmoid_extremes_and_symmetry():
    x = np.array([-800.0, -5.0, 0.0, 5.0, 800.0])
    s = sigmoid(x)
    assert np.all(np.isfinite(s))
    assert s[2] == 0.5
    np.testing.assert_allclose(s + s[::-1], np.ones(5), atol=1e-12)


def test_loss_curve_rejects_non_finite():
    curve = LossCurve()
    curve.append(0.7)
    with pytest.raises(FloatingPointError):
        curve.append(float("nan"))


def test_mlp2_copy_is_deep():
    p = mlp2_init(Rng(8), 4, 3, 1)
    q = p.copy()
    q.w1[0, 0] += 1.0
    assert p.w1[0, 0] != q.w1[0, 0]
