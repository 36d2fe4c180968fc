"""The conditional inter-frame codec shared by CC, CR and MCR.

The three schemes differ only in what the autoencoder is asked to code and
what is added back after the frame generator:

====  ========================  ==========================
mode  codec input               reconstruction
====  ========================  ==========================
CC    x_t                       clamp(g)
CR    x_t - x_pix               clamp(g + x_pix)
MCR   x_t - m * x_pix           clamp(g + m * x_pix)
====  ========================  ==========================

``g`` is the frame generator output on concat(decoded features, x_dot).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .condition import ConditionBundle, FeatureExtractor, PixelProjection, RefinementNet
from .config import CodingMode, ConfigError, ModelConfig, digest_of
from .entropy.models import (
    EntropyParams,
    FactorizedGaussian,
    PriorFusion,
    clip_symbols,
    decode_gaussian,
    encode_gaussian,
    estimate_rate,
    quantize,
    scale_index,
    symbol_bound,
)
from .entropy.rangecoder import DecodeError, RangeDecoder, RangeEncoder
from .errors import stage
from .layers import ResBlock, act, conv3x3, deconv3x3
from .mask import MaskGenerator, replicate_mask
from .motion import FlowEstimator, MotionCodec, warp

# training-schedule module groups -> attribute names on InterFrameCodec
MODULE_GROUPS = {
    "inter_codec": ("refine", "cond_down", "g_enc", "g_dec", "frame_gen",
                    "hyper_enc", "hyper_dec", "z_prior", "temporal_prior", "prior_fusion"),
    "menet": ("flow_net",),
    "motion_codec": ("motion_codec",),
    "fe_and_proj": ("feature_extractor", "projection"),
    "mask_gen": ("mask_generator",),
}


def form_codec_input(x_t: torch.Tensor, x_pix: torch.Tensor | None, m: torch.Tensor | None,
                     mode: CodingMode) -> torch.Tensor:
    mode = CodingMode.parse(mode)
    if mode is CodingMode.MCR:
        if m is None:
            raise ValueError("MCR needs a mask")
        return x_t - replicate_mask(m) * x_pix
    if m is not None:
        raise ValueError(f"a mask was supplied in {mode.name} mode")
    if mode is CodingMode.CR:
        return x_t - x_pix
    return x_t


def add_back(g: torch.Tensor, x_pix: torch.Tensor | None, m: torch.Tensor | None,
             mode: CodingMode) -> torch.Tensor:
    """Undo the input formation on the generator output and clamp to [0, 1]."""
    mode = CodingMode.parse(mode)
    if mode is CodingMode.MCR:
        if m is None:
            raise ValueError("MCR needs a mask")
        g = g + replicate_mask(m) * x_pix
    elif mode is CodingMode.CR:
        g = g + x_pix
    return g.clamp(0.0, 1.0)


class InterEncoder(nn.Module):
    def __init__(self, width: int, channels: int, latent_channels: int, multiscale: bool):
        super().__init__()
        self.multiscale = multiscale
        self.s1 = conv3x3(3 + channels, width, 2)
        self.s2 = conv3x3(width, width, 2)
        self.s3 = conv3x3(width * (2 if multiscale else 1), width, 2)
        self.s4 = conv3x3(width, latent_channels, 2)
        self.act = act()

    def forward(self, signal, x_dot, cond_feat=None):
        h = self.act(self.s1(torch.cat([signal, x_dot], dim=1)))
        h = self.act(self.s2(h))
        if self.multiscale:
            h = torch.cat([h, cond_feat], dim=1)
        return self.s4(self.act(self.s3(h)))


class InterDecoder(nn.Module):
    def __init__(self, width: int, latent_channels: int, out_channels: int, multiscale: bool):
        super().__init__()
        self.multiscale = multiscale
        self.d1 = deconv3x3(latent_channels, width)
        self.d2 = deconv3x3(width, width)
        self.d3 = deconv3x3(width * (2 if multiscale else 1), width)
        self.d4 = deconv3x3(width, out_channels)
        self.act = act()

    def forward(self, y_hat, cond_feat=None):
        h = self.act(self.d2(self.act(self.d1(y_hat))))
        if self.multiscale:
            h = torch.cat([h, cond_feat], dim=1)
        return self.d4(self.act(self.d3(h)))


class FrameGenerator(nn.Module):
    def __init__(self, dec_channels: int, channels: int, width: int):
        super().__init__()
        self.net = nn.Sequential(
            conv3x3(dec_channels + channels, width), act(),
            ResBlock(width), ResBlock(width),
            conv3x3(width, 3),
        )

    def forward(self, dec_features, x_dot):
        return self.net(torch.cat([dec_features, x_dot], dim=1))


def _strided_stack(c_in: int, width: int, stages: int, c_out: int | None = None) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(stages):
        last = i == stages - 1
        layers.append(conv3x3(c_in if i == 0 else width, (c_out or width) if last else width, 2))
        if not last:
            layers.append(act())
    return nn.Sequential(*layers)


def _upsampling_stack(c_in: int, width: int, stages: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(stages):
        layers.append(deconv3x3(c_in if i == 0 else width, width))
        if i < stages - 1:
            layers.append(act())
    return nn.Sequential(*layers)


@dataclass
class CodedFrame:
    motion_payload: bytes
    inter_payload: bytes
    x_hat: torch.Tensor
    motion_bits_est: float
    inter_bits_est: float
    flow_hat: torch.Tensor
    x_pix: torch.Tensor | None
    mask: torch.Tensor | None
    signal: torch.Tensor | None = None
    debug: dict = field(default_factory=dict)

    @property
    def payload_bits(self) -> int:
        return 8 * (len(self.motion_payload) + len(self.inter_payload))


class InterFrameCodec(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        C, N = cfg.channels, cfg.base_width
        self.mode = cfg.mode

        self.flow_net = FlowEstimator(cfg.flow_width)
        self.motion_codec = MotionCodec(cfg.motion_width, cfg.motion_latent_channels)
        self.feature_extractor = FeatureExtractor(C)
        self.projection = PixelProjection(C) if self.mode is not CodingMode.CC else None
        self.mask_generator = MaskGenerator(cfg.mask_width) if self.mode is CodingMode.MCR else None

        self.refine = RefinementNet(C)
        self.cond_down = nn.Sequential(conv3x3(C, N, 2), act(), conv3x3(N, N, 2), act()) \
            if cfg.multiscale_condition else None
        self.g_enc = InterEncoder(N, C, cfg.latent_channels, cfg.multiscale_condition)
        self.g_dec = InterDecoder(N, cfg.latent_channels, cfg.dec_channels, cfg.multiscale_condition)
        self.frame_gen = FrameGenerator(cfg.dec_channels, C, N)
        self.hyper_enc = _strided_stack(cfg.latent_channels, cfg.hyper_channels, 2)
        self.hyper_dec = _upsampling_stack(cfg.hyper_channels, cfg.hyper_channels, 2)
        self.z_prior = FactorizedGaussian(cfg.hyper_channels)
        self.temporal_prior = _strided_stack(C, N, 4) if cfg.temporal_prior else None
        self.prior_fusion = PriorFusion(cfg.hyper_channels, N if cfg.temporal_prior else 0, cfg.latent_channels)

    # ------------------------------------------------------------------ groups

    def group_modules(self, group: str) -> list[nn.Module]:
        return [m for name in MODULE_GROUPS[group] if (m := getattr(self, name)) is not None]

    def group_parameters(self, group: str) -> list[nn.Parameter]:
        return [p for m in self.group_modules(group) for p in m.parameters()]

    def available_groups(self) -> set[str]:
        return {g for g in MODULE_GROUPS if self.group_modules(g)}

    def digest(self) -> bytes:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return digest_of(self.cfg.to_dict(), h.digest())

    # ------------------------------------------------------------------ shared pieces

    def build_conditions(self, x_ref: torch.Tensor, flow_hat: torch.Tensor) -> tuple[ConditionBundle, torch.Tensor | None]:
        feats = self.feature_extractor(x_ref)
        x_c = warp(feats, flow_hat)
        x_pix = self.projection(x_c) if self.projection is not None else None
        x_dot = self.refine(x_c)
        mask = self.mask_generator(flow_hat, x_pix) if self.mask_generator is not None else None
        return ConditionBundle(feats, x_c, x_dot, x_pix, self.cfg.channels), mask

    def _temporal_features(self, bundle: ConditionBundle):
        if self.temporal_prior is None:
            return None
        src = bundle.x_dot if self.cfg.temporal_prior_source == "refined" else bundle.x_c
        return self.temporal_prior(src)

    def _cond_features(self, bundle: ConditionBundle):
        return self.cond_down(bundle.x_dot) if self.cond_down is not None else None

    def latent_params(self, z_hat: torch.Tensor, bundle: ConditionBundle) -> EntropyParams:
        return self.prior_fusion(self.hyper_dec(z_hat), self._temporal_features(bundle))

    def reconstruct(self, y_hat, bundle: ConditionBundle, mask, cond_feat=None) -> torch.Tensor:
        if cond_feat is None:
            cond_feat = self._cond_features(bundle)
        dec = self.g_dec(y_hat, cond_feat)
        g = self.frame_gen(dec, bundle.x_dot)
        return add_back(g, bundle.x_pix, mask, self.mode)

    # ------------------------------------------------------------------ differentiable pass

    def forward(self, x_t: torch.Tensor, x_ref: torch.Tensor, phase: str = "train",
                stage: str = "full", flow: torch.Tensor | None = None) -> dict:
        """Training/validation pass with estimated rates (bits summed over the batch)."""
        if flow is None:
            flow = self.flow_net(x_t, x_ref)
        flow_hat, motion_bits = self.motion_codec(flow, phase)
        bundle, mask = self.build_conditions(x_ref, flow_hat)
        out = {"flow": flow, "flow_hat": flow_hat, "motion_bits": motion_bits,
               "x_pix": bundle.x_pix, "bundle": bundle, "mask": mask}
        if stage == "motion_comp":
            return out
        signal = form_codec_input(x_t, bundle.x_pix, mask, self.mode)
        cond_feat = self._cond_features(bundle)
        y = self.g_enc(signal, bundle.x_dot, cond_feat)
        z = self.hyper_enc(y)
        z_params = self.z_prior.params(z)
        z_hat = quantize(z, phase, z_params.mu)
        y_params = self.latent_params(z_hat, bundle)
        y_hat = quantize(y, phase, y_params.mu)
        x_hat = self.reconstruct(y_hat, bundle, mask, cond_feat)
        inter_bits = estimate_rate(z_hat, z_params) + estimate_rate(y_hat, y_params)
        out.update(signal=signal, y=y, y_hat=y_hat, x_hat=x_hat, inter_bits=inter_bits,
                   total_bits=motion_bits + inter_bits)
        return out

    # ------------------------------------------------------------------ real coding

    def _latent_shapes(self, h: int, w: int):
        return (1, self.cfg.latent_channels, h // 16, w // 16), (1, self.cfg.hyper_channels, h // 64, w // 64)

    @torch.no_grad()
    def compress(self, x_t: torch.Tensor, x_ref: torch.Tensor) -> CodedFrame:
        """Code one padded frame (1, 3, H, W); x_hat is produced by the decoder path."""
        if x_t.shape != x_ref.shape or x_t.shape[0] != 1:
            raise ValueError(f"compress expects matching (1,3,H,W) frames, got {tuple(x_t.shape)} / {tuple(x_ref.shape)}")
        h, w = x_t.shape[-2:]
        if h % 64 or w % 64:
            raise ValueError(f"frame {h}x{w} must be padded to a multiple of 64")
        with stage("estimate_flow"):
            flow = self.flow_net(x_t, x_ref)
        with stage("encode_motion"):
            seg, flow_hat, _ = self.motion_codec.compress(flow)
        with stage("build_conditions"):
            bundle, mask = self.build_conditions(x_ref, flow_hat)
        with stage("encode_inter"):
            signal = form_codec_input(x_t, bundle.x_pix, mask, self.mode)
            cond_feat = self._cond_features(bundle)
            y = self.g_enc(signal, bundle.x_dot, cond_feat)
            z = self.hyper_enc(y)
            z_params = self.z_prior.params(z)
            z_sym = clip_symbols(torch.round(z - z_params.mu)).to(torch.int64)
            z_hat = z_sym.float() + z_params.mu
            y_params = self.latent_params(z_hat, bundle)
            y_sym = clip_symbols(torch.round(y - y_params.mu)).to(torch.int64)
            y_hat = y_sym.float() + y_params.mu
        with stage("entropy_coding"):
            zb, yb = symbol_bound(z_sym.numpy()), symbol_bound(y_sym.numpy())
            y_levels = scale_index(y_params.sigma)
            enc = RangeEncoder()
            encode_gaussian(enc, z_sym.numpy(), scale_index(z_params.sigma), zb)
            encode_gaussian(enc, y_sym.numpy(), y_levels, yb)
            inter_payload = bytes([zb, yb]) + enc.finish()
            inter_est = float(estimate_rate(z_hat, z_params) + estimate_rate(y_hat, y_params))
        with stage("generate_frame"):
            x_hat = self.reconstruct(y_hat, bundle, mask, cond_feat)
        return CodedFrame(seg.payload, inter_payload, x_hat, seg.estimated_bits, inter_est,
                          flow_hat, bundle.x_pix, mask, signal,
                          debug={"y_levels": y_levels, "y_bound": yb, "y": y, "y_hat": y_hat})

    @torch.no_grad()
    def decompress(self, motion_payload: bytes, inter_payload: bytes, x_ref: torch.Tensor) -> CodedFrame:
        h, w = x_ref.shape[-2:]
        with stage("decode_motion"):
            m_sym = self.motion_codec.decode_symbols(motion_payload, self.motion_codec.latent_dims(h, w))
            flow_hat = self.motion_codec.dequantize(m_sym)
        with stage("build_conditions"):
            bundle, mask = self.build_conditions(x_ref, flow_hat)
        with stage("entropy_decoding"):
            if len(inter_payload) < 2:
                raise DecodeError("inter payload too short")
            zb, yb = inter_payload[0], inter_payload[1]
            y_shape, z_shape = self._latent_shapes(h, w)
            z_params = self.z_prior.params(torch.zeros(z_shape))
            dec = RangeDecoder(inter_payload[2:])
            z_sym = torch.from_numpy(decode_gaussian(dec, scale_index(z_params.sigma), zb))
            z_hat = z_sym.float() + z_params.mu
            y_params = self.latent_params(z_hat, bundle)
            y_levels = scale_index(y_params.sigma)
            y_sym = torch.from_numpy(decode_gaussian(dec, y_levels, yb))
            dec.finish()
        with stage("generate_frame"):
            y_hat = y_sym.float() + y_params.mu
            x_hat = self.reconstruct(y_hat, bundle, mask)
        return CodedFrame(motion_payload, inter_payload, x_hat, float("nan"), float("nan"),
                          flow_hat, bundle.x_pix, mask, None,
                          debug={"y_levels": y_levels, "y_bound": yb, "y_hat": y_hat})


def build_model(cfg: ModelConfig, seed: int | None = None) -> InterFrameCodec:
    if seed is not None:
        torch.manual_seed(seed)
    return InterFrameCodec(cfg)
