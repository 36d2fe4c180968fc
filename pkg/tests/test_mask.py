import pytest
import torch
from hypothesis import given, strategies as st

from condvc.codec import build_model
from condvc.config import toy_model_config
from condvc.mask import MaskGenerator, generate_mask, replicate_mask


@given(st.floats(1, 1e4), st.integers(0, 1000))
def test_range_adversarial(scale, seed):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    net = MaskGenerator(8)
    m = generate_mask(net, scale * torch.randn(1, 2, 8, 8, generator=g), scale * torch.randn(1, 3, 8, 8, generator=g))
    assert m.shape == (1, 1, 8, 8)
    assert m.min() >= 0 and m.max() <= 1


@pytest.mark.parametrize("bias,check", [(10.0, lambda m: m.min() >= 0.9999), (-10.0, lambda m: m.max() <= 1e-4)])
def test_saturation(bias, check):
    net = MaskGenerator(8)
    torch.nn.init.zeros_(net.tail.weight)
    torch.nn.init.constant_(net.tail.bias, bias)
    assert check(net(torch.randn(1, 2, 8, 8), torch.randn(1, 3, 8, 8)))


def test_replicate():
    m = torch.tensor([[[0.1, 0.2], [0.3, 0.4]]])
    r = replicate_mask(m)
    assert r.shape == (3, 2, 2) and all(torch.equal(r[i], m[0]) for i in range(3))
    x = torch.randn(3, 2, 2)
    assert torch.equal(replicate_mask(torch.ones(1, 2, 2)) * x, x)
    assert torch.equal(replicate_mask(torch.zeros(1, 2, 2)) * x, torch.zeros_like(x))
    with pytest.raises(ValueError):
        replicate_mask(torch.zeros(2, 2, 2))


def test_shape_guard():
    with pytest.raises(ValueError):
        MaskGenerator(8)(torch.zeros(1, 2, 8, 8), torch.zeros(1, 3, 8, 4))


def test_decoder_regenerates_mask():
    model = build_model(toy_model_config("mcr", 8), seed=0).eval()
    x_ref, x_t = torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)
    enc = model.compress(x_t, x_ref)
    dec = model.decompress(enc.motion_payload, enc.inter_payload, x_ref)
    assert torch.equal(enc.mask, dec.mask)


def test_mask_independent_of_target():
    model = build_model(toy_model_config("mcr", 8), seed=0)
    flow, x_ref = torch.randn(1, 2, 16, 16), torch.rand(1, 3, 16, 16)
    _, m1 = model.build_conditions(x_ref, flow)
    _, m2 = model.build_conditions(x_ref, flow)
    assert torch.equal(m1, m2)


def test_gradient_through_blend():
    torch.manual_seed(0)
    net = MaskGenerator(4).double()
    flow = torch.randn(1, 2, 8, 8, dtype=torch.float64)
    x_pix = torch.randn(1, 3, 8, 8, dtype=torch.float64)
    x_t = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    w = net.tail.weight

    def blended(weight):
        net.tail.weight = torch.nn.Parameter(weight) if not isinstance(weight, torch.nn.Parameter) else weight
        h = net.body(net.act(net.head(torch.cat([flow, x_pix], 1))))
        m = torch.sigmoid(torch.nn.functional.conv2d(h, weight, net.tail.bias, padding=1))
        return (x_t - replicate_mask(m) * x_pix).square().sum()

    assert torch.autograd.gradcheck(blended, (w.detach().clone().requires_grad_(),), eps=1e-6, atol=1e-6, rtol=1e-3)
