import pytest
import torch
from hypothesis import given, strategies as st

from condvc.codec import add_back, build_model, form_codec_input
from condvc.config import CodingMode, toy_model_config


def _blend_reference(x_t, x_pix, m):
    m3 = m.expand_as(x_t)
    return (1 - m3) * x_t + m3 * (x_t - x_pix)


class TestInputFormation:
    def test_pixel_example(self):
        x_t, x_pix, m = torch.full((1, 3, 1, 1), 0.8), torch.full((1, 3, 1, 1), 0.4), torch.full((1, 1, 1, 1), 0.5)
        assert form_codec_input(x_t, x_pix, m, "mcr") == pytest.approx(0.6)

    def test_blend_limits_bitwise(self):
        g = torch.Generator().manual_seed(0)
        x_t, x_pix = torch.rand(2, 3, 8, 8, generator=g), torch.randn(2, 3, 8, 8, generator=g)
        ones, zeros = torch.ones(2, 1, 8, 8), torch.zeros(2, 1, 8, 8)
        assert torch.equal(form_codec_input(x_t, x_pix, ones, "mcr"), form_codec_input(x_t, x_pix, None, "cr"))
        assert torch.equal(form_codec_input(x_t, x_pix, zeros, "mcr"), form_codec_input(x_t, None, None, "cc"))

    @given(st.integers(0, 10_000))
    def test_blend_identity(self, seed):
        g = torch.Generator().manual_seed(seed)
        x_t, x_pix = torch.rand(1, 3, 6, 6, generator=g), 2 * torch.randn(1, 3, 6, 6, generator=g)
        m = torch.rand(1, 1, 6, 6, generator=g)
        assert (form_codec_input(x_t, x_pix, m, CodingMode.MCR) - _blend_reference(x_t, x_pix, m)).abs().max() <= 1e-6

    def test_mode_purity_errors(self):
        x = torch.rand(1, 3, 4, 4)
        with pytest.raises(ValueError):
            form_codec_input(x, x, torch.ones(1, 1, 4, 4), "cr")
        with pytest.raises(ValueError):
            form_codec_input(x, x, torch.ones(1, 1, 4, 4), "cc")
        with pytest.raises(ValueError):
            form_codec_input(x, x, None, "mcr")
        with pytest.raises(ValueError):
            add_back(x, x, None, "mcr")

    def test_cc_ignores_predictor(self):
        x = torch.rand(1, 3, 4, 4)
        assert torch.equal(form_codec_input(x, torch.randn(1, 3, 4, 4), None, "cc"), x)
        assert torch.equal(add_back(x, torch.randn(1, 3, 4, 4), None, "cc"), x.clamp(0, 1))


class TestAddBack:
    def test_cr_inversion(self):
        x_t, x_pix = torch.rand(1, 3, 8, 8), torch.randn(1, 3, 8, 8)
        assert torch.allclose(add_back(x_t - x_pix, x_pix, None, "cr"), x_t, atol=1e-6)

    def test_mcr_zero_mask_is_cc(self):
        g = 2 * torch.randn(1, 3, 4, 4)
        assert torch.equal(add_back(g, torch.randn(1, 3, 4, 4), torch.zeros(1, 1, 4, 4), "mcr"), add_back(g, None, None, "cc"))

    def test_clamp(self):
        out = add_back(torch.full((1, 3, 1, 1), 0.7), torch.full((1, 3, 1, 1), 0.5), None, "cr")
        assert torch.equal(out, torch.ones(1, 3, 1, 1))


class TestInterCodec:
    def test_latent_shape(self):
        model = build_model(toy_model_config("cc", 16), seed=0)
        x = torch.rand(1, 3, 256, 256)
        x_dot = torch.rand(1, 16, 256, 256)
        y = model.g_enc(x, x_dot, model.cond_down(x_dot))
        assert y.shape == (1, model.cfg.latent_channels, 16, 16)
        dec = model.g_dec(torch.round(y), model.cond_down(x_dot))
        assert dec.shape == (1, model.cfg.dec_channels, 256, 256)

    def test_full_decoder_width(self):
        from condvc.config import ModelConfig

        assert ModelConfig().dec_channels == 64

    def test_zero_in_zero_out(self):
        model = build_model(toy_model_config("cc", 8), seed=0)
        for mod in (model.g_enc, model.cond_down):
            for name, p in mod.named_parameters():
                if name.endswith("bias"):
                    torch.nn.init.zeros_(p)
        x_dot = torch.zeros(1, 8, 64, 64)
        y = model.g_enc(torch.zeros(1, 3, 64, 64), x_dot, model.cond_down(x_dot))
        assert torch.equal(y, torch.zeros_like(y))

    def test_conditioning_is_live(self):
        model = build_model(toy_model_config("cr", 8), seed=0)
        torch.manual_seed(1)
        x, x_dot = torch.rand(1, 3, 64, 64), torch.rand(1, 8, 64, 64)
        dx = x_dot + 0.1 * torch.randn_like(x_dot)
        y1 = model.g_enc(x, x_dot, model.cond_down(x_dot))
        y2 = model.g_enc(x, dx, model.cond_down(dx))
        assert (y1 - y2).norm() > 0
        d1 = model.g_dec(torch.round(y1), model.cond_down(x_dot))
        d2 = model.g_dec(torch.round(y1), model.cond_down(dx))
        assert (d1 - d2).norm() > 0
        assert torch.equal(d1, model.g_dec(torch.round(y1), model.cond_down(x_dot)))

    def test_forward_outputs(self):
        model = build_model(toy_model_config("mcr", 8), seed=0)
        out = model(torch.rand(2, 3, 64, 64), torch.rand(2, 3, 64, 64))
        assert out["x_hat"].shape == (2, 3, 64, 64)
        assert out["mask"].shape == (2, 1, 64, 64)
        assert torch.allclose(out["total_bits"], out["motion_bits"] + out["inter_bits"])
        assert out["x_hat"].min() >= 0 and out["x_hat"].max() <= 1


@pytest.mark.parametrize("mode", ["cc", "cr", "mcr"])
def test_compress_decompress_bitwise(mode):
    model = build_model(toy_model_config(mode, 8), seed=0).eval()
    g = torch.Generator().manual_seed(3)
    x_ref, x_t = torch.rand(1, 3, 64, 128, generator=g), torch.rand(1, 3, 64, 128, generator=g)
    enc = model.compress(x_t, x_ref)
    dec = model.decompress(enc.motion_payload, enc.inter_payload, x_ref)
    assert torch.equal(enc.x_hat, dec.x_hat)
    assert torch.equal(enc.flow_hat, dec.flow_hat)
    assert (enc.debug["y_hat"] - enc.debug["y"]).abs().max() <= 0.5 + 1e-5
    assert enc.x_pix is None if mode == "cc" else torch.equal(enc.x_pix, dec.x_pix)


def test_compress_size_guard():
    model = build_model(toy_model_config("cc", 8), seed=0).eval()
    with pytest.raises(ValueError):
        model.compress(torch.rand(1, 3, 48, 64), torch.rand(1, 3, 48, 64))


def test_groups():
    cc = build_model(toy_model_config("cc", 8), seed=0)
    mcr = build_model(toy_model_config("mcr", 8), seed=0)
    assert "mask_gen" not in cc.available_groups()
    assert mcr.available_groups() == {"inter_codec", "menet", "motion_codec", "fe_and_proj", "mask_gen"}
    assert cc.digest() == build_model(toy_model_config("cc", 8), seed=0).digest()
    assert cc.digest() != build_model(toy_model_config("cc", 8), seed=1).digest()
