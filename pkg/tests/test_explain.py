import json

import numpy as np
import pytest
from PIL import Image

from xdistill import autodiff as ad
from xdistill import nn, serialize
from xdistill.exceptions import ContractError
from xdistill.explain import (METHODS, attention, attention_map, explain, export_heatmap, grad_cam,
                              gradient_times_input, input_gradient, lrp)

from conftest import assert_rel_close, bias_free_mlp, central_diff, param_fd


def linear_net(w):
    layer = nn.Dense(len(w), 1, bias=False, dtype=np.float64)
    layer.weight.data = np.asarray([w], dtype=np.float64)
    return nn.Network([layer], (len(w),), 1)


def bias_free_cnn(seed, dtype=np.float64):
    spec = nn.cnn_spec((3, 4), hidden=(5,), bias=False)
    spec = [dict(d, bias=False) if d["kind"] == "conv" else d for d in spec]
    net = nn.build_network(spec, (2, 8, 8), 4, seed=seed, dtype=dtype)
    net.last_layer.bias = None
    net.last_layer.bias_enabled = False
    return net


# -- attention ------------------------------------------------------------------

def test_attention_examples(rng):
    y = np.zeros((1, 2, 2, 2))
    y[0, :, 1, 0] = [3.0, 4.0]
    assert attention(ad.tensor(y), 1).numpy()[0, 1, 0] == 25.0
    np.testing.assert_array_equal(attention(ad.tensor(np.zeros((1, 3, 4, 4))), 1).numpy(), 0.0)
    r = rng.normal(size=(1, 4, 5, 5))
    oracle = np.array([[sum(r[0, c, i, j] ** 2 for c in range(4)) for j in range(5)] for i in range(5)])
    np.testing.assert_allclose(attention(ad.tensor(r), 1).numpy()[0], oracle, atol=1e-12)


def test_attention_needs_spatial_layer():
    with pytest.raises(ContractError):
        attention(ad.tensor(np.ones((2, 5))), 0)


def test_attention_map_ignores_class(tiny_cnn, rng):
    x = rng.normal(size=(2, 2, 8, 8))
    a0 = attention_map(tiny_cnn, x, 0).numpy()
    a2 = attention_map(tiny_cnn, x, 2).numpy()
    assert a0.shape == (2, 4, 4) and np.array_equal(a0, a2)


# -- gradients ----------------------------------------------------------------------

def test_input_gradient_of_linear_model_is_weight(rng):
    w = np.array([0.5, -2.0, 3.0])
    for x in rng.normal(size=(3, 3)):
        np.testing.assert_array_equal(input_gradient(linear_net(w), x, 0).numpy()[0], w)
        np.testing.assert_allclose(gradient_times_input(linear_net(w), x, 0).numpy()[0], w * x)
    np.testing.assert_array_equal(gradient_times_input(linear_net(w), np.zeros(3), 0).numpy(), 0.0)


def test_input_gradient_zero_on_dead_relu():
    first = nn.Dense(2, 2, bias=False, dtype=np.float64)
    first.weight.data = np.array([[1.0, 0.0], [0.0, 1.0]])
    second = nn.Dense(2, 1, bias=False, dtype=np.float64)
    second.weight.data = np.array([[1.0, 1.0]])
    net = nn.Network([first, nn.ReLU(), second], (2,), 1)
    np.testing.assert_array_equal(input_gradient(net, [-1.0, 2.0], 0).numpy()[0], [0.0, 1.0])


def test_input_gradient_matches_finite_differences(rng):
    net = bias_free_mlp(rng, [4, 6, 5, 3])
    for layer in net.layers:
        if isinstance(layer, nn.Dense):
            layer.bias = ad.Tensor(rng.normal(size=layer.out_features), requires_grad=True)
    x = rng.normal(size=4)
    fd = central_diff(lambda v: net(v).numpy()[0, 2], x)
    assert_rel_close(input_gradient(net, x, 2).numpy()[0], fd)


def test_invalid_class_is_contract_error(tiny_cnn, rng):
    x = rng.normal(size=(1, 2, 8, 8))
    for method in ("lrp", "inputgrad", "gradxinput", "gradcam"):
        with pytest.raises(ContractError):
            explain(tiny_cnn, x, 3, method)
        with pytest.raises(ContractError):
            explain(tiny_cnn, x, -1, method)


# -- Grad-CAM -----------------------------------------------------------------------

def gap_net(k_weight, n_classes=3, size=4):
    conv = nn.Conv2D(1, 1, kernel=1, bias=False, dtype=np.float64)
    conv.weight.data = np.ones((1, 1, 1, 1))
    head = nn.Dense(1, n_classes, bias=False, dtype=np.float64)
    head.weight.data = np.asarray(k_weight, dtype=np.float64).reshape(n_classes, 1)
    layers = [conv, nn.ReLU(), nn.AvgPool2D(size), nn.Flatten(), head]
    return nn.Network(layers, (1, size, size), n_classes)


def test_grad_cam_single_channel_closed_form(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    cam = grad_cam(gap_net([0.0, 1.0, 0.0]), x, 1).numpy()
    np.testing.assert_allclose(cam[0], np.maximum(x[0, 0], 0) / 16, atol=1e-15)


def test_grad_cam_negative_weighting_is_zero(rng):
    x = np.abs(rng.normal(size=(1, 1, 4, 4)))
    np.testing.assert_array_equal(grad_cam(gap_net([-1.0, 1.0, 0.0]), x, 0).numpy(), 0.0)


def test_grad_cam_matches_finite_difference_channel_weights(tiny_cnn, rng):
    x = rng.normal(size=(1, 2, 8, 8))
    k = 1
    _, trace = tiny_cnn.forward(x)
    j = 4  # second conv block: conv, relu
    feat = trace.outputs[j].numpy()[0]

    def head(f):
        a = ad.tensor(f[None])
        for layer in tiny_cnn.layers[j + 1:]:
            a = layer.forward(a)
        return a.numpy()[0, k]

    grads = central_diff(head, feat.copy(), h=1e-6)
    alpha = grads.mean(axis=(1, 2))
    oracle = np.maximum(np.tensordot(alpha, feat, axes=1), 0)
    np.testing.assert_allclose(grad_cam(tiny_cnn, x, k).numpy()[0], oracle, atol=1e-7)


def test_grad_cam_needs_a_conv():
    with pytest.raises(ContractError):
        grad_cam(linear_net([1.0, 2.0]), [1.0, 1.0], 0)
    with pytest.raises(ContractError):
        attention_map(linear_net([1.0, 2.0]), [1.0, 1.0])


# -- LRP ------------------------------------------------------------------------

def test_lrp_single_dense_examples():
    net = linear_net([1.0, 1.0])
    hm = lrp(net, [1.0, 2.0], 0, eps=0.0)
    np.testing.assert_allclose(hm.numpy()[0], [1.0, 2.0])
    hm = lrp(net, [1.0, 2.0], 0, eps=1.0)
    np.testing.assert_allclose(hm.numpy()[0], [0.75, 1.5])
    assert hm.numpy().sum() == pytest.approx(2.25)


def test_lrp_rejects_negative_epsilon():
    with pytest.raises(ContractError):
        lrp(linear_net([1.0, 1.0]), [1.0, 2.0], 0, eps=-0.1)


def _lrp_loop_oracle(weights, x, k, eps):
    acts = [x]
    for i, W in enumerate(weights):
        z = W @ acts[-1]
        acts.append(np.maximum(z, 0) if i < len(weights) - 1 else z)
    R = np.zeros(weights[-1].shape[0])
    R[k] = acts[-1][k]
    for i in range(len(weights) - 1, -1, -1):
        W, a = weights[i], acts[i]
        z = W @ a
        Rin = np.zeros(W.shape[1])
        for j in range(W.shape[1]):
            for o in range(W.shape[0]):
                den = z[o] + (1.0 if z[o] >= 0 else -1.0) * eps
                Rin[j] += a[j] * W[o, j] * R[o] / den
        R = Rin
    return R


@pytest.mark.parametrize("eps", [0.0, 0.01, 0.5])
def test_lrp_mlp_matches_per_neuron_oracle(eps, rng):
    net = bias_free_mlp(rng, [5, 7, 4])
    weights = [l.weight.data for l in net.layers if isinstance(l, nn.Dense)]
    x = rng.normal(size=5)
    for k in range(4):
        ours = lrp(net, x, k, eps=eps).numpy()[0]
        np.testing.assert_allclose(ours, _lrp_loop_oracle(weights, x, k, eps), atol=1e-6)


def test_lrp_conserves_on_bias_free_cnn(rng):
    net = bias_free_cnn(3)
    x = rng.normal(size=(3, 2, 8, 8))
    logits = net(x).numpy()
    k = np.array([0, 2, 3])
    hm = lrp(net, x, k)
    np.testing.assert_allclose(hm.numpy().sum(axis=(1, 2, 3)), logits[np.arange(3), k], rtol=1e-10)
    for R in hm.relevances:
        np.testing.assert_allclose(R.numpy().reshape(3, -1).sum(1), logits[np.arange(3), k], rtol=1e-10)


def test_lrp_zero_equals_gradient_times_input_on_cnn(rng):
    net = bias_free_cnn(7)
    x = rng.normal(size=(2, 2, 8, 8))
    np.testing.assert_allclose(lrp(net, x, 1).numpy(), gradient_times_input(net, x, 1).numpy(), atol=1e-12)


def test_lrp_epsilon_absorbs_relevance_layerwise(rng):
    # non-negative weights and inputs: every z >= 0 and every relevance >= 0
    for seed in range(5):
        r = np.random.default_rng(seed)
        net = bias_free_mlp(r, [6, 8, 5, 3])
        for l in net.layers:
            if isinstance(l, nn.Dense):
                l.weight.data = np.abs(l.weight.data)
        hm = lrp(net, r.uniform(0, 1, size=6), 1, eps=0.05)
        totals = [abs(R.numpy().sum()) for R in hm.relevances]
        assert all(lo <= hi + 1e-6 for lo, hi in zip(totals[:-1], totals[1:]))
        assert totals[0] < totals[-1]


def test_lrp_through_batchnorm_matches_fused_network(rng):
    net = nn.build_network(nn.cnn_spec((3, 4), hidden=(5,), batchnorm=True), (2, 8, 8), 3, seed=1,
                           dtype=np.float64)
    for layer in net.layers:
        if isinstance(layer, nn.BatchNorm):
            layer.running_mean = rng.normal(size=layer.num_features) * 0.2
            layer.running_var = rng.uniform(0.5, 2, size=layer.num_features)
            layer.gamma.data = rng.uniform(0.5, 1.5, size=layer.num_features)
            layer.beta.data = rng.normal(size=layer.num_features) * 0.1
    fused = nn.fuse_batchnorm(net)
    x = rng.normal(size=(2, 2, 8, 8))
    np.testing.assert_allclose(lrp(net, x, 2, eps=0.01).numpy(), lrp(fused, x, 2, eps=0.01).numpy(), atol=1e-10)


@pytest.mark.parametrize("method", METHODS)
def test_methods_are_pure(method, tiny_cnn, rng):
    x = rng.normal(size=(2, 2, 8, 8))
    a = explain(tiny_cnn, x, 1, method, eps=0.01).numpy()
    b = explain(tiny_cnn, x, 1, method, eps=0.01).numpy()
    assert a.tobytes() == b.tobytes()
    assert np.isfinite(a).all()
    expected = (2, 2, 8, 8) if method in ("lrp", "gradxinput", "inputgrad") else (2, 4, 4)
    assert a.shape == expected


@pytest.mark.parametrize("method", METHODS)
def test_heatmap_loss_is_differentiable(method, rng):
    net = nn.build_network(nn.cnn_spec((2, 3), hidden=(4,)), (1, 8, 8), 3, seed=11, dtype=np.float64)
    for p in net.parameters():
        if p.ndim == 1:
            p.data = rng.normal(size=p.shape) * 0.1
    x = rng.normal(size=(2, 1, 8, 8))
    k = np.array([0, 2])

    def loss(n, create_graph=True):
        return ad.tsum(ad.tabs(explain(n, x, k, method, eps=0.01, create_graph=create_graph).values))

    target = net.layers[0].weight
    (g,) = ad.grad(loss(net), [target])
    net_params = net.parameters()
    fd_all = param_fd(net, lambda n: loss(n, create_graph=False).item(), h=1e-6)
    fd = fd_all[[i for i, p in enumerate(net_params) if p is target][0]]
    assert_rel_close(g.numpy(), fd)


# -- export --------------------------------------------------------------------

def test_export_png_and_sidecar(tmp_path, rng):
    values = rng.normal(size=(3, 6, 5)).astype(np.float32)
    meta = export_heatmap(values, tmp_path / "h", fmt="png", meta={"class": 2})
    img = np.asarray(Image.open(tmp_path / "h.png"))
    assert img.shape == (6, 5, 3) and img.dtype == np.uint8
    side = json.loads((tmp_path / "h.json").read_text())
    assert side["min"] == float(values.min()) and side["max"] == float(values.max())
    assert side["class"] == 2 and meta == side
    assert serialize.load(tmp_path / "h.xtsr").tobytes() == values.tobytes()


def test_export_pgm(tmp_path):
    values = np.array([[0.0, 1.0], [2.0, -1.0]], dtype=np.float32)
    export_heatmap(values, tmp_path / "p", fmt="pgm")
    raw = (tmp_path / "p.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    assert list(raw[-4:]) == [85, 170, 255, 0]
