import numpy as np
import pytest
import torch

from cdssl.imaging import slice_to_uint8
from cdssl.models import Encoder, EncoderSpec, RegressionNet
from cdssl.saliency import (
    Heatmap,
    SaliencyError,
    blue_red,
    cam_from_activations,
    grad_cam,
    render_overlay,
    save_overlay,
)


def _net(seed=0, **kw):
    torch.manual_seed(seed)
    spec = EncoderSpec(**{"width": 4, "depth": 3, "input_pool": 1, **kw})
    enc = Encoder(spec)
    net = RegressionNet(enc, enc.feature_dim)
    net.eval()
    return net


def _img(seed=0, size=32):
    return np.random.default_rng(seed).normal(size=(size, size)).astype(np.float32)


def test_zero_gradient_gives_zero_map():
    net = _net()
    with torch.no_grad():
        net.head.weight.zero_()
    hm = grad_cam(net, _img())
    assert hm.data.shape == (32, 32) and not hm.data.any()


def test_cam_hand_example():
    acts = torch.tensor([[[1.0, 0.0], [0.0, 0.0]]])
    grads = torch.full((1, 2, 2), 0.25)
    cam = cam_from_activations(acts, grads)
    assert torch.equal(cam, torch.tensor([[0.25, 0.0], [0.0, 0.0]]))


def test_grad_cam_on_fixed_tiny_network():
    # single conv block whose kernel is the identity tap; BN in eval with unit stats
    net = _net(width=1, depth=1)
    conv, bn = net.encoder.blocks["block1"][0], net.encoder.blocks["block1"][1]
    with torch.no_grad():
        conv.weight.zero_()
        conv.weight[0, 0, 1, 1] = 1.0
        bn.weight.fill_(1.0)
        bn.bias.zero_()
        net.head.weight.fill_(2.0)
    hm = grad_cam(net, np.array([[1.0, 0.0], [0.0, 0.0]], dtype=np.float32))
    assert hm.layer_tag == "block1"
    assert np.allclose(hm.data, [[1.0, 0.0], [0.0, 0.0]], atol=1e-12)


@pytest.mark.parametrize("layer", ["block1", "block2", "block3"])
def test_heatmap_shape_and_range(layer):
    net = _net(input_pool=4)
    hm = grad_cam(net, _img(size=224), layer)
    assert hm.data.shape == (224, 224)
    assert hm.data.min() >= 0.0 and hm.data.max() <= 1.0


def test_head_rescale_invariance():
    net = _net()
    img = _img(3)
    a = grad_cam(net, img).data
    assert a.max() > 0
    with torch.no_grad():
        net.head.weight.mul_(3.7)
        net.head.bias.add_(1.0)
    b = grad_cam(net, img).data
    assert np.max(np.abs(a - b)) < 1e-6


def test_weight_activation_identity():
    g = torch.Generator().manual_seed(0)
    acts, grads = torch.randn(5, 6, 7, generator=g, dtype=torch.float64), torch.randn(5, 6, 7, generator=g, dtype=torch.float64)
    w = grads.mean(dim=(1, 2))
    pre_relu = (w[:, None, None] * acts).sum(0)
    assert float((w * acts.mean(dim=(1, 2))).sum()) == pytest.approx(float(pre_relu.mean()), abs=1e-12)


def test_non_spatial_layer_rejected():
    with pytest.raises(SaliencyError):
        grad_cam(_net(), _img(), "head")
    flat = _net(arch="flat")
    with pytest.raises(SaliencyError):
        grad_cam(flat, _img())


def test_grad_cam_leaves_model_mode():
    net = _net()
    net.train()
    grad_cam(net, _img())
    assert net.training


def test_overlay_zero_map_is_uniform_tint():
    img = _img(4, 16)
    rgb = render_overlay(img, Heatmap(np.zeros((16, 16)), "block3"))
    gray = slice_to_uint8(img) / 255.0
    zero = blue_red(np.array(0.0))
    expect = np.round(255 * (0.5 * gray[..., None] + 0.5 * zero)).astype(np.uint8)
    assert np.array_equal(rgb, expect)


def test_overlay_peak_pixel_takes_max_colour():
    img = np.zeros((8, 8), dtype=np.float32)
    img[0, 0] = 1.0
    data = np.zeros((8, 8))
    data[3, 4] = 1.0
    rgb = render_overlay(img, Heatmap(data, "x"))
    top = blue_red(np.array(1.0))
    assert tuple(rgb[3, 4]) == tuple(np.round(255 * 0.5 * top).astype(np.uint8))
    assert tuple(top) == (0.5, 0.0, 0.0) and tuple(blue_red(np.array(0.0))) == (0.0, 0.0, 0.5)


def test_overlay_shape_mismatch():
    with pytest.raises(SaliencyError):
        render_overlay(_img(size=8), Heatmap(np.zeros((4, 4)), "x"))


def test_overlay_file_deterministic(tmp_path):
    net = _net()
    img = _img(5)
    for name in ("a.png", "b.png"):
        save_overlay(render_overlay(img, grad_cam(net, img)), tmp_path / name)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
