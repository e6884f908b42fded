import numpy as np
import pytest

from retgrade.errors import ShapeError, StateError
from retgrade.nn import (Backbone, BackboneConfig, Conv2dLayer, GlobalAvgPoolLayer, LinearLayer,
                         ParamStore, ReLULayer, SigmoidLayer, backbone_forward, conv2d,
                         global_avg_pool, he_uniform, init_params, linear, relu)


def conv2d_oracle(x, weight, bias, stride, pad):
    """Direct nested-loop cross-correlation (single image)."""
    cout, cin, k, _ = weight.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (x.shape[1] + 2 * pad - k) // stride + 1
    ow = (x.shape[2] + 2 * pad - k) // stride + 1
    out = np.zeros((cout, oh, ow))
    for co in range(cout):
        for oy in range(oh):
            for ox in range(ow):
                patch = xp[:, oy * stride:oy * stride + k, ox * stride:ox * stride + k]
                out[co, oy, ox] = (patch * weight[co]).sum() + bias[co]
    return out


# ---------------------------------------------------------------------------
# contract-level ops
# ---------------------------------------------------------------------------

def test_conv2d_1x1_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 6, 6))
    w = np.ones((1, 1, 1, 1))
    assert np.allclose(conv2d(x, w, np.zeros(1)), x)


def test_conv2d_all_ones_kernel_box_sums():
    c = 3.0
    x = np.full((1, 6, 6), c)
    w = np.ones((1, 1, 3, 3))
    y = conv2d(x, w, np.zeros(1), stride=1, pad=1)
    assert y.shape == (1, 6, 6)
    assert np.allclose(y[0, 2, 2], 9 * c)
    assert np.allclose(y[0, 0, 0], 4 * c)
    assert np.allclose(y[0, 0, 3], 6 * c)


def test_conv2d_output_shape_follows_floor_formula():
    x = np.zeros((1, 8, 8))
    w = np.zeros((2, 1, 3, 3))
    y = conv2d(x, w, np.zeros(2), stride=2, pad=1)
    assert y.shape == (2, 4, 4)


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 9, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    for stride, pad in [(1, 0), (1, 1), (2, 1), (3, 0)]:
        got = conv2d(x, w, b, stride, pad)
        assert np.allclose(got, conv2d_oracle(x, w, b, stride, pad), atol=1e-10)


def test_conv2d_shape_errors_name_shapes():
    x = np.zeros((2, 8, 8))
    w = np.zeros((4, 3, 3, 3))
    with pytest.raises(ShapeError):
        conv2d(x, w, np.zeros(4))
    with pytest.raises(ShapeError):
        conv2d(np.zeros((3, 8, 8)), np.zeros((4, 3, 2, 2)), np.zeros(4))


def test_relu_basics():
    x = np.array([-3.0, -0.5, 0.0, 2.0])
    assert np.array_equal(relu(x), [0, 0, 0, 2.0])
    assert np.array_equal(relu(relu(x)), relu(x))
    y = np.abs(np.random.default_rng(0).normal(size=10))
    assert np.array_equal(relu(y), y)


def test_global_avg_pool():
    x = np.arange(1, 5, dtype=float).reshape(1, 2, 2)
    assert np.allclose(global_avg_pool(x), 2.5)
    c = np.full((4, 3, 3), 7.0)
    assert np.allclose(global_avg_pool(c), 7.0)
    a = np.random.default_rng(1).normal(size=(2, 5, 5))
    assert np.allclose(global_avg_pool(3.0 * a), 3.0 * global_avg_pool(a))


def test_linear_identity_zero_and_oracle():
    x = np.array([1.0, 2.0, 3.0])
    assert np.allclose(linear(x, np.eye(3), np.zeros(3)), x)
    assert np.allclose(linear(x, np.zeros((2, 3)), np.array([5.0, -1.0])), [5.0, -1.0])
    rng = np.random.default_rng(2)
    w = rng.normal(size=(3, 2))
    v = rng.normal(size=2)
    b = rng.normal(size=3)
    expect = [float(np.dot(w[i], v)) + b[i] for i in range(3)]
    assert np.allclose(linear(v, w, b), expect)
    with pytest.raises(ShapeError):
        linear(np.zeros(4), w, b)


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

def test_param_store_unique_names_and_reuse():
    store = ParamStore()
    p = store.register("a", np.zeros(3))
    again = store.register("a", np.ones(3))  # re-bind ignores the initializer
    assert again is p
    with pytest.raises(ShapeError):
        store.register("a", np.zeros(4))
    with pytest.raises(StateError):
        store.register("missing", None)


def test_param_store_zero_grads_and_flag():
    store = ParamStore()
    p = store.register("w", np.zeros(2))
    p.grad += 1.0
    store.mark_grads_populated()
    assert store.grads_populated
    store.zero_grads()
    assert not store.grads_populated
    assert np.all(p.grad == 0)


def test_he_uniform_variance():
    rng = np.random.default_rng(3)
    fan_in = 256
    w = he_uniform((fan_in, 64), fan_in, rng)
    var = w.var()
    assert abs(var - 2.0 / fan_in) < 0.2 * 2.0 / fan_in
    assert w.dtype == np.float32


def test_init_params_seeded_and_zero_biases():
    cfg = BackboneConfig(32, (8, 16), 24)
    a = init_params(cfg, seed=9)
    b = init_params(cfg, seed=9)
    assert a.names() == b.names()
    for name in a.names():
        assert np.array_equal(a[name].value, b[name].value)
        if name.endswith(".bias"):
            assert np.all(a[name].value == 0)
    c = init_params(cfg, seed=10)
    assert not np.array_equal(a["backbone.stage0.weight"].value,
                              c["backbone.stage0.weight"].value)


# ---------------------------------------------------------------------------
# backbone forward
# ---------------------------------------------------------------------------

def test_backbone_forward_zero_input_zero_biases_gives_zero_features():
    cfg = BackboneConfig(32, (8, 16), 12)
    params = init_params(cfg, seed=0)
    out = backbone_forward(np.zeros((3, 32, 32), np.float32), params, cfg)
    assert out.shape == (12,)
    assert np.allclose(out, 0.0)


def test_backbone_forward_output_length_and_determinism():
    cfg = BackboneConfig(48, (8, 16, 24), 20)
    params = init_params(cfg, seed=4)
    x = np.random.default_rng(5).normal(size=(3, 48, 48)).astype(np.float32)
    a = backbone_forward(x, params, cfg)
    b = backbone_forward(x, params, cfg)
    assert a.shape == (20,)
    assert np.array_equal(a, b)


def test_backbone_rejects_wrong_input_size():
    cfg = BackboneConfig(32, (8,), 4)
    params = init_params(cfg, seed=0)
    with pytest.raises(ShapeError):
        backbone_forward(np.zeros((3, 16, 16), np.float32), params, cfg)


# ---------------------------------------------------------------------------
# layer gradients vs finite differences
# ---------------------------------------------------------------------------

def fd_check_layer(layer_builder, x_shape, seed=0, eps=1e-6, tol=1e-4):
    """Generic per-layer check: loss = sum(weights * forward(x)); analytic
    parameter and input gradients must match central differences in f64."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    layer = layer_builder(store, rng)
    x = rng.normal(size=x_shape)
    y = layer.forward(x)
    mix = rng.normal(size=y.shape)
    layer_gx = layer.backward(mix)

    def loss(inp):
        return float((layer.forward(inp) * mix).sum())

    # input gradient
    flat = x.reshape(-1)
    for i in rng.choice(flat.size, size=min(10, flat.size), replace=False):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss(x)
        flat[i] = orig - eps
        down = loss(x)
        flat[i] = orig
        fd = (up - down) / (2 * eps)
        assert abs(layer_gx.reshape(-1)[i] - fd) / max(1e-8, abs(fd)) < tol
    # parameter gradients
    for name in store.names():
        p = store[name]
        pf = p.value.reshape(-1)
        for i in rng.choice(pf.size, size=min(8, pf.size), replace=False):
            orig = pf[i]
            pf[i] = orig + eps
            up = loss(x)
            pf[i] = orig - eps
            down = loss(x)
            pf[i] = orig
            fd = (up - down) / (2 * eps)
            got = p.grad.reshape(-1)[i]
            assert abs(got - fd) / max(1e-8, abs(fd)) < tol, (name, i, got, fd)


def test_conv_layer_gradients():
    fd_check_layer(
        lambda s, rng: Conv2dLayer(s, "c", 2, 3, k=3, stride=2, pad=1, rng=rng, dtype=np.float64),
        (2, 2, 9, 9))


def test_linear_layer_gradients():
    fd_check_layer(
        lambda s, rng: LinearLayer(s, "l", 6, 4, rng=rng, dtype=np.float64),
        (3, 6))


def test_linear_layer_weight_gradient_closed_form():
    # loss = sum(output) for one linear layer: dL/dW = broadcast of the input
    store = ParamStore()
    rng = np.random.default_rng(1)
    layer = LinearLayer(store, "l", 4, 3, rng=rng, dtype=np.float64)
    x = rng.normal(size=(1, 4))
    y = layer.forward(x)
    layer.backward(np.ones_like(y))
    assert np.allclose(store["l.weight"].grad, np.tile(x, (3, 1)))
    assert np.allclose(store["l.bias"].grad, 1.0)


def test_backbone_gradient_accumulation_is_additive():
    cfg = BackboneConfig(16, (4, 8), 6)
    store = ParamStore()
    rng = np.random.default_rng(2)
    bb = Backbone(store, "bb", cfg, rng, dtype=np.float64)
    x = rng.normal(size=(2, 3, 16, 16))
    g = rng.normal(size=(2, 6))

    bb.forward(x)
    bb.backward(g)
    once = {n: store[n].grad.copy() for n in store.names()}
    bb.forward(x)
    bb.backward(g)
    for n in store.names():
        assert np.allclose(store[n].grad, 2 * once[n])

    store.zero_grads()
    bb.forward(x)
    bb.backward(np.zeros_like(g))
    for n in store.names():
        assert np.all(store[n].grad == 0)


def test_layers_raise_before_forward():
    store = ParamStore()
    rng = np.random.default_rng(0)
    for layer in (Conv2dLayer(store, "c", 1, 1, rng=rng), ReLULayer(),
                  GlobalAvgPoolLayer(), LinearLayer(store, "l", 2, 2, rng=rng),
                  SigmoidLayer()):
        with pytest.raises(StateError):
            layer.backward(np.zeros((1, 2)))


def test_finite_inputs_give_finite_outputs():
    cfg = BackboneConfig(32, (8, 16), 10)
    params = init_params(cfg, seed=6)
    x = np.random.default_rng(7).uniform(-100, 100, (3, 32, 32)).astype(np.float32)
    out = backbone_forward(x, params, cfg)
    assert np.all(np.isfinite(out))
