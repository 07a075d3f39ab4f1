import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funnel import activations as A
from funnel import ops
from funnel.errors import ConfigError, ShapeError, StateError
from funnel.tensor import make_rng

NO_NORM = A.FunnelConfig(window=3, norm="none")


def rand(shape, seed=0):
    return make_rng(seed).standard_normal(shape)


def test_relu_examples():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
    assert A.relu_forward(x).ravel().tolist() == [0.0, 0.0, 2.0]
    assert A.relu_backward(np.full((1, 1, 1, 1), -1.0), np.full((1, 1, 1, 1), 5.0)).item() == 0.0
    # subgradient at the kink passes the gradient
    assert A.relu_backward(np.zeros((1, 1, 1, 1)), np.full((1, 1, 1, 1), 5.0)).item() == 5.0


def test_prelu_examples():
    x = np.full((1, 1, 1, 1), -2.0)
    assert A.prelu_forward(x, np.array([0.25])).item() == -0.5
    pos = np.abs(rand((2, 3, 4, 4))) + 1e-3
    assert np.array_equal(A.prelu_forward(pos, np.array([0.1, 0.5, 0.9])), pos)
    with pytest.raises(ShapeError):
        A.prelu_forward(pos, np.array([0.1, 0.2]))


def test_swish_examples():
    assert A.swish_forward(np.zeros((1, 1, 1, 1))).item() == 0.0
    assert abs(A.swish_forward(np.full((1, 1, 1, 1), 100.0)).item() - 100.0) < 1e-30 + 1e-12 * 100
    big = A.swish_forward(np.array([-800.0, 800.0]).reshape(1, 1, 1, 2))
    assert np.all(np.isfinite(big))


def test_condition_examples():
    x = rand((2, 2, 4, 4))
    zero = {"weight": np.zeros((1, 2, 3, 3))}
    t, _ = A.funnel_condition(x, NO_NORM, zero)
    assert not t.any()
    p = np.array([0.3, -0.7])
    one = A.FunnelConfig(window=1, norm="none")
    t, _ = A.funnel_condition(x, one, {"weight": p.reshape(1, 2, 1, 1)})
    assert np.array_equal(t, x * p[None, :, None, None])
    grid = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    t, _ = A.funnel_condition(grid, NO_NORM, {"weight": np.ones((1, 1, 3, 3))})
    assert t[0, 0, 1, 1] == 45.0
    with pytest.raises(ConfigError):
        A.funnel_condition(x, NO_NORM, {"weight": np.zeros((1, 2, 5, 5))})


def test_frelu_forward_example():
    x = np.array([[1.0, -1.0], [-2.0, 3.0]]).reshape(1, 1, 2, 2)
    out, cache = A.frelu_forward(x, NO_NORM, {"weight": np.ones((1, 1, 3, 3))})
    assert out.reshape(2, 2).tolist() == [[1.0, 1.0], [1.0, 3.0]]


def test_frelu_backward_state_and_zero():
    with pytest.raises(StateError):
        A.frelu_backward(None, np.zeros((1, 1, 2, 2)))
    cfg = A.FunnelConfig(window=3, norm="bn")
    params, buffers = A.init_funnel_params(cfg, 2, make_rng(0))
    x = rand((2, 2, 5, 5))
    _, cache = A.frelu_forward(x, cfg, params, buffers, "train")
    gx, grads = A.frelu_backward(cache, np.zeros_like(x))
    assert not gx.any() and all(not g.any() for g in grads.values())


def test_frelu_zero_weights_backward_is_relu():
    x = rand((2, 2, 5, 5), 3)
    g = rand(x.shape, 4)
    _, cache = A.frelu_forward(x, NO_NORM, {"weight": np.zeros((1, 2, 3, 3))})
    gx, grads = A.frelu_backward(cache, g)
    assert np.array_equal(gx, A.relu_backward(x, g))
    # T = 0 wins where x < 0, so the weights see the correlation of x with g there
    masked = np.where(x < 0, g, 0.0)
    _, ref = ops.depthwise_conv_backward(x, ops.DepthwiseConvParams(np.zeros((1, 2, 3, 3))), masked)
    assert np.allclose(grads["weight"], ref, rtol=1e-12)


def test_dw_then_relu_examples():
    x = rand((2, 2, 4, 4))
    out, _ = A.dw_then_relu_forward(x, NO_NORM, {"weight": np.zeros((1, 2, 3, 3))})
    assert not out.any()
    w = np.zeros((1, 2, 1, 1)) + 1.0
    cfg = A.FunnelConfig(window=1, norm="none")
    out, _ = A.dw_then_relu_forward(np.abs(x), cfg, {"weight": w})
    assert np.array_equal(out, np.abs(x))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([1, 3, 5]), st.sampled_from(["bn", "ln", "none"]))
def test_frelu_dominance_and_selection(seed, k, norm):
    cfg = A.FunnelConfig(window=k, norm=norm)
    rng = make_rng(seed)
    params, buffers = A.init_funnel_params(cfg, 3, rng)
    params["weight"] = rng.standard_normal(params["weight"].shape)
    x = rng.standard_normal((2, 3, 5, 5))
    out, _ = A.frelu_forward(x, cfg, params, buffers, "train")
    t, _ = A.funnel_condition(x, cfg, params, buffers, "train")
    assert np.all(out >= x) and np.all(out >= t)
    assert np.all((out == x) | (out == t))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_frelu_never_mixes_channels(seed):
    rng = make_rng(seed)
    cfg = A.FunnelConfig(window=3, norm="in")
    params, buffers = A.init_funnel_params(cfg, 2, rng)
    x = rng.standard_normal((1, 2, 5, 5))
    y = x.copy()
    y[:, 0] += rng.standard_normal((5, 5))
    a, _ = A.frelu_forward(x, cfg, params, buffers)
    b, _ = A.frelu_forward(y, cfg, params, buffers)
    assert np.array_equal(a[:, 1], b[:, 1])


def test_tie_routes_to_identity():
    x = np.array([[0.5]]).reshape(1, 1, 1, 1)
    cfg = A.FunnelConfig(window=1, norm="none")
    _, cache = A.frelu_forward(x, cfg, {"weight": np.ones((1, 1, 1, 1))})
    gx, grads = A.frelu_backward(cache, np.ones_like(x))
    assert gx.item() == 1.0 and grads["weight"].item() == 0.0


def test_degeneracy_relu_bitwise():
    x = rand((4, 5, 25, 20), 9)           # 10^4 values
    out, _ = A.frelu_forward(x, NO_NORM, {"weight": np.zeros((1, 5, 3, 3))})
    assert out.tobytes() == A.relu_forward(x).tobytes()


def test_degeneracy_prelu_bitwise():
    x = rand((4, 5, 25, 20), 10)
    p = np.array([0.25, 0.1, -0.3, 0.9, 0.0])
    cfg = A.FunnelConfig(window=1, norm="none")
    out, cache = A.frelu_forward(x, cfg, {"weight": p.reshape(1, 5, 1, 1)})
    assert out.tobytes() == A.prelu_forward(x, p).tobytes()
    g = rand(x.shape, 11)
    gx, grads = A.frelu_backward(cache, g)
    gx_ref, gp_ref = A.prelu_backward(x, p, g)
    assert gx.tobytes() == gx_ref.tobytes()
    assert grads["weight"].ravel().tobytes() == gp_ref.tobytes()


def test_config_validation():
    for bad in (dict(window=2), dict(window=0), dict(fusion="min"), dict(condition="x"),
                dict(pair_combine="avg"), dict(norm="batch"), dict(init_std=-1)):
        with pytest.raises(ConfigError):
            A.FunnelConfig(**bad)
    assert A.FunnelConfig(window="3x3").window == 3
    assert A.FunnelConfig(window="1x3+3x1").is_pair
    pool = A.FunnelConfig(condition="maxpool", norm="bn")
    params, _ = A.init_funnel_params(pool, 4, make_rng(0))
    assert params == {}


def test_layer_parameter_counts_and_init():
    assert A.ActivationLayer("relu", 8).num_params() == 0
    assert A.ActivationLayer("swish", 8).num_params() == 0
    pre = A.ActivationLayer("prelu", 8)
    assert pre.num_params() == 8 and np.all(pre.params["slope"] == 0.25)
    fr = A.ActivationLayer("frelu", 8, A.FunnelConfig(), make_rng(0))
    assert fr.num_params() == 8 * 9 + 16
    pair = A.ActivationLayer("frelu", 8, A.FunnelConfig(window=A.PAIR), make_rng(0))
    assert pair.num_params() == 8 * 6 + 32
    with pytest.raises(ConfigError):
        A.ActivationLayer("gelu", 8)


def test_layer_updates_running_stats_only_in_training():
    layer = A.ActivationLayer("frelu", 2, A.FunnelConfig(), make_rng(0))
    x = rand((4, 2, 5, 5)) + 3.0
    before = {k: v.copy() for k, v in layer.buffers.items()}
    layer.forward(x, training=False)
    assert all(np.array_equal(before[k], layer.buffers[k]) for k in before)
    layer.forward(x, training=True)
    assert not np.array_equal(before["norm.running_mean"], layer.buffers["norm.running_mean"])
    with pytest.raises(StateError):
        A.ActivationLayer("relu", 1).backward(np.zeros((1, 1, 1, 1)))
