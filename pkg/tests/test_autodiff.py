import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factorcl import autodiff as ad
from factorcl.errors import DataError, ShapeError


def rng_array(shape, seed, scale=1.0, offset=0.0):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=shape) * scale + offset).astype(np.float32)


def check(graph, loss, tol=1e-3, **kw):
    report = ad.grad_check(graph, loss, tolerance=tol, **kw)
    assert report.passed, str(report)
    return report


# -- forward values -----------------------------------------------------------


def test_softmax_cross_entropy_uniform_logits():
    g = ad.Graph()
    logits = g.leaf(np.zeros((3, 7), dtype=np.float32))
    loss = g.softmax_cross_entropy(logits, np.array([0, 3, 6]))
    assert abs(float(g.value(loss)) - math.log(7)) < 1e-6


def test_relu_values():
    g = ad.Graph()
    out = g.relu(g.leaf(np.array([-1.0, 2.0], dtype=np.float32)))
    np.testing.assert_array_equal(g.value(out), [0.0, 2.0])


def test_conv2d_1x1_kernel_equals_pointwise_matmul():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    w = rng.normal(size=(5, 3)).astype(np.float32)
    g = ad.Graph()
    out = g.conv2d(g.leaf(w), g.leaf(x), kernel=(3, 1, 1))
    direct = np.einsum("oc,bchw->bohw", w, x)
    np.testing.assert_allclose(g.value(out), direct, atol=1e-5)


def test_conv2d_stride_padding_shapes():
    g = ad.Graph()
    x = g.leaf(rng_array((1, 2, 7, 7), seed=1))
    w = g.leaf(rng_array((4, 2 * 3 * 3), seed=2))
    out = g.conv2d(w, x, kernel=(2, 3, 3), stride=2, padding=1)
    assert g.value(out).shape == (1, 4, 4, 4)


def test_forward_matches_pure_recomputation():
    g = ad.Graph()
    a = g.leaf(rng_array((3, 4), seed=5), trainable=True)
    b = g.leaf(rng_array((4, 2), seed=6))
    out = g.relu(g.matmul(a, b))
    replayed = g.replay(out, dtype=np.float32)
    np.testing.assert_array_equal(replayed, g.value(out))


def test_shape_errors():
    g = ad.Graph()
    a = g.leaf(np.ones((2, 3), dtype=np.float32))
    b = g.leaf(np.ones((2, 3), dtype=np.float32))
    with pytest.raises(ShapeError):
        g.matmul(a, b)
    with pytest.raises(ShapeError):
        g.transpose(g.leaf(np.ones(3, dtype=np.float32)))
    with pytest.raises(ShapeError):
        g.diag_embed(a)
    with pytest.raises(ShapeError):
        g.conv2d(a, g.leaf(np.ones((1, 3, 5, 5), dtype=np.float32)), kernel=(3, 3, 3))


def test_label_out_of_range():
    g = ad.Graph()
    logits = g.leaf(np.zeros((2, 3), dtype=np.float32))
    with pytest.raises(DataError):
        g.softmax_cross_entropy(logits, np.array([0, 3]))
    with pytest.raises(DataError):
        g.softmax_cross_entropy(logits, np.array([-1, 0]))


# -- backward ------------------------------------------------------------------


def test_quadratic_gradient():
    # loss = ||x||^2 via x xT; gradient is 2x
    g = ad.Graph()
    x = g.leaf(np.array([[1.0, 2.0]], dtype=np.float32), trainable=True)
    loss = g.reshape(g.matmul(x, g.transpose(x)), ())
    grads = g.backward(loss)
    np.testing.assert_allclose(grads[x], [[2.0, 4.0]], atol=1e-6)


def test_frozen_leaf_excluded_and_unchanged():
    g = ad.Graph()
    frozen_value = rng_array((3, 3), seed=8)
    frozen = g.leaf(frozen_value, trainable=False)
    train = g.leaf(rng_array((3, 3), seed=9), trainable=True)
    loss = g.frobenius_norm(g.add(g.matmul(frozen, train), g.constant(np.float32(0.1))))
    grads = g.backward(loss)
    assert train in grads and frozen not in grads
    np.testing.assert_array_equal(g.value(frozen), frozen_value)


def test_non_scalar_loss_rejected():
    g = ad.Graph()
    a = g.leaf(np.ones((2, 2), dtype=np.float32), trainable=True)
    with pytest.raises(ValueError):
        g.backward(a)


def test_gradient_set_covers_exactly_reachable_trainables():
    g = ad.Graph()
    used = g.leaf(rng_array((2, 2), seed=1), trainable=True)
    unused = g.leaf(rng_array((2, 2), seed=2), trainable=True)
    loss = g.frobenius_norm(used)
    grads = g.backward(loss)
    assert set(grads) == {used}
    assert unused not in grads


def test_determinism_bitwise():
    def build():
        g = ad.Graph()
        x = g.leaf(rng_array((4, 6), seed=3), trainable=True)
        h = g.dropout(g.relu(x), rate=0.5, seed=123, train=True)
        loss = g.frobenius_norm(h)
        return g.value(loss).copy(), g.backward(loss)[x]

    la, ga = build()
    lb, gb = build()
    np.testing.assert_array_equal(la, lb)
    np.testing.assert_array_equal(ga, gb)


# -- finite-difference checks, one per op ---------------------------------------


def test_fd_matmul_add_scale():
    g = ad.Graph()
    a = g.leaf(rng_array((3, 4), seed=10), trainable=True, name="a")
    b = g.leaf(rng_array((4, 2), seed=11), trainable=True, name="b")
    c = g.leaf(rng_array((1, 2), seed=12), trainable=True, name="c")
    loss = g.frobenius_norm(g.scale(g.add(g.matmul(a, b), c), 0.7))
    check(g, loss)


def test_fd_transpose_diag_embed():
    g = ad.Graph()
    s = g.leaf(np.array([1.5, 0.7, 0.3], dtype=np.float32), trainable=True, name="s")
    u = g.leaf(rng_array((4, 3), seed=13), trainable=True, name="u")
    loss = g.frobenius_norm(g.matmul(u, g.transpose(g.diag_embed(s))))
    check(g, loss)


def test_fd_relu_away_from_kink():
    g = ad.Graph()
    x = g.leaf(rng_array((5, 5), seed=14, offset=0.0) + 0.2, trainable=True, name="x")
    loss = g.frobenius_norm(g.relu(x))
    check(g, loss)


def test_fd_div():
    g = ad.Graph()
    num = g.leaf(rng_array((4,), seed=15), trainable=True, name="num")
    den = g.leaf(np.abs(rng_array((4,), seed=16)) + 1.0, trainable=True, name="den")
    loss = g.l1_norm(g.div(num, den))
    check(g, loss)


def test_fd_norms_away_from_zero():
    g = ad.Graph()
    x = g.leaf(np.abs(rng_array((6,), seed=17)) + 0.5, trainable=True, name="x")
    y = g.leaf(np.abs(rng_array((3, 3), seed=18)) + 0.5, trainable=True, name="y")
    loss = g.add(g.add(g.l1_norm(x), g.l2_norm(x)), g.frobenius_norm(y))
    check(g, loss)


def test_fd_linear_softmax_ce():
    g = ad.Graph()
    x = g.leaf(rng_array((6, 5), seed=19), trainable=True, name="x")
    w = g.leaf(rng_array((5, 4), seed=20, scale=0.5), trainable=True, name="w")
    b = g.leaf(rng_array((4,), seed=21, scale=0.1), trainable=True, name="b")
    loss = g.softmax_cross_entropy(g.linear(x, w, b), np.array([0, 1, 2, 3, 0, 1]))
    check(g, loss)


def test_fd_conv2d():
    g = ad.Graph()
    x = g.leaf(rng_array((2, 3, 6, 6), seed=22, scale=0.5), trainable=True, name="x")
    w = g.leaf(rng_array((4, 3 * 3 * 3), seed=23, scale=0.3), trainable=True, name="w")
    out = g.conv2d(w, x, kernel=(3, 3, 3), stride=2, padding=1)
    loss = g.frobenius_norm(g.reshape(out, (2, 4 * 3 * 3)))
    check(g, loss)


def test_fd_dropout_fixed_mask():
    g = ad.Graph()
    x = g.leaf(np.abs(rng_array((5, 5), seed=24)) + 0.3, trainable=True, name="x")
    loss = g.frobenius_norm(g.dropout(x, rate=0.4, seed=7, train=True))
    check(g, loss)


def test_fd_composed_factorized_conv_net():
    # weight assembled as frozen U S V^T plus trainable U S V^T, then conv + head
    rng = np.random.default_rng(25)
    g = ad.Graph()
    c, nhw, r = 4, 2 * 3 * 3, 3
    frozen = g.leaf(rng.normal(size=(c, nhw)).astype(np.float32) * 0.2)
    u = g.leaf(rng.normal(size=(c, r)).astype(np.float32) * 0.4, trainable=True, name="u")
    s = g.leaf(np.abs(rng.normal(size=r)).astype(np.float32) + 0.3, trainable=True, name="s")
    v = g.leaf(rng.normal(size=(nhw, r)).astype(np.float32) * 0.4, trainable=True, name="v")
    w = g.add(frozen, g.matmul(g.matmul(u, g.diag_embed(s)), g.transpose(v)))
    x = g.leaf(rng.normal(size=(4, 2, 5, 5)).astype(np.float32) * 0.5)
    feat = g.relu(g.conv2d(w, x, kernel=(2, 3, 3), padding=1))
    flat = g.reshape(feat, (4, c * 5 * 5))
    hw = g.leaf(rng.normal(size=(c * 5 * 5, 3)).astype(np.float32) * 0.1, trainable=True, name="head_w")
    hb = g.leaf(np.zeros(3, dtype=np.float32), trainable=True, name="head_b")
    loss = g.softmax_cross_entropy(g.linear(flat, hw, hb), np.array([0, 1, 2, 0]))
    check(g, loss, max_entries=15)


def test_grad_check_negative_control(monkeypatch):
    # sabotage one backward rule; the checker must notice
    def zero_backward(grad, values, out, aux):
        return [np.zeros_like(values[0])]

    monkeypatch.setitem(ad._BACKWARD, "relu", zero_backward)
    g = ad.Graph()
    x = g.leaf(np.abs(rng_array((4, 4), seed=26)) + 0.5, trainable=True)
    loss = g.frobenius_norm(g.relu(x))
    report = ad.grad_check(g, loss)
    assert not report.passed


@given(seed=st.integers(0, 2**16), rows=st.integers(2, 5), cols=st.integers(2, 5))
@settings(max_examples=25, deadline=None)
def test_fd_random_small_graphs(seed, rows, cols):
    rng = np.random.default_rng(seed)
    g = ad.Graph()
    a = g.leaf((rng.normal(size=(rows, cols)) + 2.0).astype(np.float32), trainable=True)
    b = g.leaf((rng.normal(size=(cols, rows)) + 2.0).astype(np.float32), trainable=True)
    h = g.relu(g.scale(g.matmul(a, b), 0.5))
    loss = g.frobenius_norm(g.add(h, g.transpose(g.matmul(a, b))))
    check(g, loss, max_entries=10)
