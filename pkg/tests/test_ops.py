import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funnel import ops
from funnel.errors import ConfigError, ShapeError
from funnel.tensor import make_rng

GRID = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)


def naive_conv(x, w, b, pad, stride):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for a in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0 if b is None else b[o]
                    for c in range(ci):
                        for di in range(kh):
                            for dj in range(kw):
                                s += xp[a, c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                    out[a, o, i, j] = s
    return out


# -- depthwise ------------------------------------------------------------------------

def test_depthwise_examples():
    ones = ops.DepthwiseConvParams(np.ones((1, 1, 3, 3)))
    assert ops.depthwise_conv_forward(GRID, ones)[0, 0, 1, 1] == 45.0
    zero = ops.DepthwiseConvParams(np.zeros((1, 2, 3, 3)))
    x = make_rng(0).standard_normal((2, 2, 4, 4))
    out = ops.depthwise_conv_forward(x, zero)
    assert not out.any() and not np.signbit(out).any()
    p = np.array([0.25, -0.5])
    one = ops.DepthwiseConvParams(p.reshape(1, 2, 1, 1))
    assert np.array_equal(ops.depthwise_conv_forward(x, one), x * p[None, :, None, None])
    with pytest.raises(ShapeError):
        ops.depthwise_conv_forward(make_rng(0).standard_normal((1, 3, 4, 4)), zero)


def test_depthwise_backward_examples():
    rng = make_rng(1)
    x = rng.standard_normal((2, 3, 4, 5))
    p = ops.DepthwiseConvParams(rng.standard_normal((1, 3, 3, 3)))
    gx, gw = ops.depthwise_conv_backward(x, p, np.zeros_like(x))
    assert not gx.any() and not gw.any()
    g = rng.standard_normal(x.shape)
    one = ops.DepthwiseConvParams(rng.standard_normal((1, 3, 1, 1)))
    _, gw = ops.depthwise_conv_backward(x, one, g)
    assert np.allclose(gw.ravel(), (x * g).sum(axis=(0, 2, 3)), rtol=1e-12)
    with pytest.raises(ShapeError):
        ops.depthwise_conv_backward(x, p, g[:, :, :3])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(1, 1), (3, 3), (5, 5), (1, 3), (3, 1), (7, 7)]))
def test_depthwise_linearity_adjoint_and_shape(seed, k):
    rng = make_rng(seed)
    x, y = rng.standard_normal((2, 2, 6, 5)), rng.standard_normal((2, 2, 6, 5))
    p = ops.DepthwiseConvParams(rng.standard_normal((1, 2) + k))
    f = lambda v: ops.depthwise_conv_forward(v, p)  # noqa: E731
    fx = f(x)
    assert fx.shape == x.shape
    a, b = 0.7, -1.3
    assert np.allclose(f(a * x + b * y), a * fx + b * f(y), atol=1e-12, rtol=0)
    u = rng.standard_normal(fx.shape)
    gx, gw = ops.depthwise_conv_backward(x, p, u)
    assert abs(np.sum(fx * u) - np.sum(x * gx)) <= 1e-9 * max(1.0, abs(np.sum(fx * u)))
    # weight direction: forward is linear in w as well
    dw = rng.standard_normal(p.weights.shape)
    fdw = ops.depthwise_conv_forward(x, ops.DepthwiseConvParams(dw))
    assert abs(np.sum(fdw * u) - np.sum(dw * gw)) <= 1e-9 * max(1.0, abs(np.sum(fdw * u)))


# -- dense conv -------------------------------------------------------------------------

def test_conv_identity_and_zero():
    x = make_rng(2).standard_normal((2, 3, 4, 4))
    eye = np.eye(3).reshape(3, 3, 1, 1)
    assert np.array_equal(ops.conv_forward(x, ops.ConvParams(eye)), x)
    assert not ops.conv_forward(x, ops.ConvParams(np.zeros((2, 3, 3, 3)), padding=1)).any()


@pytest.mark.parametrize("k,pad,stride,bias", [(3, 1, 1, False), (3, 0, 1, True), (1, 0, 2, False),
                                               (3, 1, 2, True), (5, 2, 1, False)])
def test_conv_matches_naive_loops(k, pad, stride, bias):
    rng = make_rng(k * 10 + stride)
    x = rng.standard_normal((2, 2, 5, 4))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(3) if bias else None
    got = ops.conv_forward(x, ops.ConvParams(w, b, (pad, pad), stride))
    assert np.allclose(got, naive_conv(x, w, b, pad, stride), rtol=1e-13, atol=1e-13)


def test_conv_two_channel_exact():
    rng = make_rng(5)
    x = rng.integers(-3, 4, (1, 2, 4, 4)).astype(float)
    w = rng.integers(-2, 3, (2, 2, 3, 3)).astype(float)
    # small integers: every partial sum is exact, so equality is bitwise
    assert np.array_equal(ops.conv_forward(x, ops.ConvParams(w, padding=1)), naive_conv(x, w, None, 1, 1))


@pytest.mark.parametrize("k,pad,stride", [(3, 1, 1), (3, 0, 1), (1, 0, 1), (3, 1, 2), (7, 3, 2), (1, 0, 2)])
def test_conv_adjoint(k, pad, stride):
    rng = make_rng(k + pad + stride)
    x = rng.standard_normal((2, 3, 9, 8))
    p = ops.ConvParams(rng.standard_normal((4, 3, k, k)), None, (pad, pad), stride)
    out = ops.conv_forward(x, p)
    u = rng.standard_normal(out.shape)
    gx, gw, gb = ops.conv_backward(x, p, u)
    assert gb is None
    assert gx.shape == x.shape
    assert abs(np.sum(out * u) - np.sum(x * gx)) < 1e-9
    dw = rng.standard_normal(p.weights.shape)
    assert abs(np.sum(ops.conv_forward(x, ops.ConvParams(dw, None, (pad, pad), stride)) * u)
               - np.sum(dw * gw)) < 1e-9


def test_conv_shape_errors():
    x = np.zeros((1, 2, 4, 4))
    with pytest.raises(ShapeError):
        ops.conv_forward(x, ops.ConvParams(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        ops.conv_forward(np.zeros((1, 1, 2, 2)), ops.ConvParams(np.zeros((1, 1, 5, 5))))
    with pytest.raises(ConfigError):
        ops.ConvParams(np.zeros((1, 1, 1, 1)), stride=0)


# -- normalization ------------------------------------------------------------------------

def _norm(kind, c, groups=1, **kw):
    return ops.NormParams(kind, c, np.ones(c), np.zeros(c), np.zeros(c), np.ones(c), groups=groups, **kw)


def test_norm_examples():
    x = np.full((4, 2, 3, 3), 3.5)
    out, _ = ops.norm_forward(x, _norm("bn", 2), "train")
    assert not out.any()
    y = make_rng(0).standard_normal((4, 2, 3, 3))
    same, _ = ops.norm_forward(y, ops.NormParams("none", 2), "train")
    assert same is y or np.array_equal(same, y)
    out, cache = ops.norm_forward(y, _norm("bn", 2), "train")
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-9)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) < 1e-3)   # eps=1e-5 shrinks it slightly
    assert np.all(np.abs(cache.xhat.var(axis=(0, 2, 3)) - 1) < 1e-3)
    with pytest.raises(ConfigError):
        ops.norm_forward(y, _norm("gn", 2, groups=3), "train")


def test_bn_moments_pre_affine_exact():
    y = make_rng(4).standard_normal((4, 2, 3, 3))
    p = _norm("bn", 2, eps=1e-300)
    out, _ = ops.norm_forward(y, p, "train")
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-9)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) < 1e-6)


def test_bn_running_stats_and_eval_affine():
    rng = make_rng(8)
    x = rng.standard_normal((5, 3, 4, 4)) * 2 + 1
    p = _norm("bn", 3)
    _, cache = ops.norm_forward(x, p, "train")
    m = x.shape[0] * 16
    assert np.allclose(cache.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    assert np.allclose(cache.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    assert np.all(cache.running_var >= 0)
    q = ops.updated_running_stats(p, cache)
    f = lambda v: ops.norm_forward(v, q, "eval")[0]  # noqa: E731
    a, b = 1.7, -0.4
    assert np.allclose(f(a * x + b) - f(np.full_like(x, b)), a * (f(x) - f(np.zeros_like(x))), atol=1e-12)


@pytest.mark.parametrize("kind,groups", [("bn", 1), ("ln", 1), ("in", 1), ("gn", 2)])
def test_norm_backward_trivial(kind, groups):
    x = make_rng(3).standard_normal((3, 4, 3, 3))
    p = _norm(kind, 4, groups)
    gx, gg, gb = ops.norm_backward(x, p, np.zeros_like(x), mode="train")
    assert not gx.any() and not gg.any() and not gb.any()
    g = make_rng(4).standard_normal(x.shape)
    gx, gg, gb = ops.norm_backward(x, ops.NormParams("none", 4), g)
    assert gx is g or np.array_equal(gx, g)


# -- windows --------------------------------------------------------------------------------

def test_window_examples():
    c = np.full((1, 2, 4, 5), -2.5)
    assert np.array_equal(ops.window_maxpool(c, 3, 3), c)
    assert np.allclose(ops.window_avgpool(c, 3, 3), c, rtol=0, atol=1e-15)
    sq = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert ops.window_maxpool(sq, 3, 3).tolist() == [[[[4.0, 4.0], [4.0, 4.0]]]]
    assert ops.window_avgpool(GRID, 3, 3)[0, 0, 1, 1] == 5.0
    # border: divide by in-bounds taps only
    assert ops.window_avgpool(GRID, 3, 3)[0, 0, 0, 0] == (1 + 2 + 4 + 5) / 4
    with pytest.raises(ConfigError):
        ops.window_maxpool(sq, 2, 2)
    with pytest.raises(ConfigError):
        ops.window_avgpool(sq, 3, 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(1, 1), (3, 3), (1, 3), (5, 3)]))
def test_max_dominates_mean(seed, k):
    x = make_rng(seed).standard_normal((2, 2, 5, 4))
    assert np.all(ops.window_maxpool(x, *k) >= ops.window_avgpool(x, *k) - 1e-12)
    assert ops.window_maxpool(x, *k).shape == x.shape


def test_window_backward_adjoint():
    rng = make_rng(6)
    x = rng.standard_normal((2, 2, 5, 4))
    u = rng.standard_normal(x.shape)
    ga = ops.window_avgpool_backward(x, 3, 3, u)
    v = rng.standard_normal(x.shape)
    assert abs(np.sum(ops.window_avgpool(v, 3, 3) * u) - np.sum(v * ga)) < 1e-10
    gm = ops.window_maxpool_backward(x, 3, 3, u)
    # each output routes its gradient to exactly one input
    assert abs(gm.sum() - u.sum()) < 1e-10


def test_softmax_cross_entropy():
    logits = np.zeros((4, 4))
    loss, grad = ops.softmax_cross_entropy(logits, np.array([0, 1, 2, 3]))
    assert abs(loss - np.log(4)) < 1e-12
    assert np.allclose(grad.sum(axis=1), 0)
