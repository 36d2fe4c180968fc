"""Optical flow estimation, the motion autoencoder and backward warping.

Flow convention: channel 0 is horizontal, channel 1 vertical displacement in
pixels, and warping is backward, ``out(p) = in(p + flow(p))``. A target that is
the reference translated right by 2 px therefore has flow (-2, 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .entropy.models import (
    FactorizedGaussian,
    clip_symbols,
    decode_gaussian,
    encode_gaussian,
    estimate_rate,
    quantize,
    scale_index,
    symbol_bound,
)
from .entropy.rangecoder import DecodeError, RangeDecoder, RangeEncoder
from .layers import act, conv3x3, deconv3x3

PYRAMID_LEVELS = 3
# level inputs are centred and the residual amplified; raw [0, 1] frames leave
# the small temporal differences too faint for the level nets to pick up
_INPUT_GAIN = 4.0
_RESIDUAL_GAIN = 10.0


def warp(features: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear backward warp with clamp-to-edge sampling.

    Works on (N, C, H, W) features and (N, 2, H, W) flow. Integer displacements
    reduce to an exact gather.
    """
    if features.dim() == 3:
        return warp(features[None], flow[None] if flow.dim() == 3 else flow)[0]
    n, c, h, w = features.shape
    if flow.shape[0] != n or flow.shape[1] != 2 or flow.shape[-2:] != (h, w):
        raise ValueError(f"flow {tuple(flow.shape)} does not match features {tuple(features.shape)}")
    ys = torch.arange(h, dtype=flow.dtype, device=flow.device).view(1, h, 1)
    xs = torch.arange(w, dtype=flow.dtype, device=flow.device).view(1, 1, w)
    px = (xs + flow[:, 0]).clamp(0, w - 1)
    py = (ys + flow[:, 1]).clamp(0, h - 1)
    x0 = px.detach().floor()
    y0 = py.detach().floor()
    wx = (px - x0).unsqueeze(1)
    wy = (py - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = features.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).view(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).view(n, c, h, w)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def _check_same(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


class FlowLevel(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.net = nn.Sequential(
            conv3x3(8, width), act(),
            conv3x3(width, width), act(),
            conv3x3(width, width), act(),
            conv3x3(width, 2),
        )
        nn.init.normal_(self.net[-1].weight, std=1e-3)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, x):
        return self.net(x)


class FlowEstimator(nn.Module):
    """Three-level coarse-to-fine pyramid; each level predicts a flow increment.

    A level sees the centred target, the amplified residual against the
    reference warped by the current estimate, and the current estimate.
    """

    def __init__(self, width: int = 16, levels: int = PYRAMID_LEVELS):
        super().__init__()
        self.levels = nn.ModuleList(FlowLevel(width) for _ in range(levels))

    def forward(self, x_t: torch.Tensor, x_ref: torch.Tensor) -> torch.Tensor:
        _check_same(x_t, x_ref)
        n_levels = len(self.levels)
        targets, refs = [x_t], [x_ref]
        for _ in range(n_levels - 1):
            targets.append(F.avg_pool2d(targets[-1], 2))
            refs.append(F.avg_pool2d(refs[-1], 2))
        flow = torch.zeros_like(targets[-1][:, :2])
        for i, level in enumerate(self.levels):
            k = n_levels - 1 - i
            if i > 0:
                flow = 2.0 * F.interpolate(flow, scale_factor=2, mode="bilinear", align_corners=False)
            warped = warp(refs[k], flow)
            inp = torch.cat([(targets[k] - 0.5) * _INPUT_GAIN, (targets[k] - warped) * _RESIDUAL_GAIN, flow], dim=1)
            flow = flow + level(inp)
        return flow


@dataclass
class MotionBitstreamSegment:
    payload: bytes
    latent_dims: tuple[int, int, int]
    estimated_bits: float


class MotionCodec(nn.Module):
    """Four stride-2 convs to a /16 latent, mirrored decoder, factorized Gaussian entropy model."""

    def __init__(self, width: int = 64, latent_channels: int = 64):
        super().__init__()
        self.latent_channels = latent_channels
        self.encoder = nn.Sequential(
            conv3x3(2, width, 2), act(),
            conv3x3(width, width, 2), act(),
            conv3x3(width, width, 2), act(),
            conv3x3(width, latent_channels, 2),
        )
        self.decoder = nn.Sequential(
            deconv3x3(latent_channels, width), act(),
            deconv3x3(width, width), act(),
            deconv3x3(width, width), act(),
            deconv3x3(width, 2),
        )
        self.prior = FactorizedGaussian(latent_channels)

    def latent_dims(self, height: int, width: int) -> tuple[int, int, int]:
        return self.latent_channels, height // 16, width // 16

    def forward(self, flow: torch.Tensor, phase: str = "train"):
        """Differentiable pass: returns (decoded flow, estimated bits)."""
        y = self.encoder(flow)
        params = self.prior.params(y)
        y_hat = quantize(y, phase, params.mu)
        return self.decoder(y_hat), estimate_rate(y_hat, params)

    # real coding ---------------------------------------------------------

    def _symbols(self, flow: torch.Tensor):
        y = self.encoder(flow)
        params = self.prior.params(y)
        return clip_symbols(torch.round(y - params.mu)).to(torch.int64), params

    def dequantize(self, symbols: torch.Tensor) -> torch.Tensor:
        params = self.prior.params(symbols.to(torch.float32))
        return self.decoder(symbols.to(torch.float32) + params.mu)

    @torch.no_grad()
    def compress(self, flow: torch.Tensor) -> tuple[MotionBitstreamSegment, torch.Tensor, torch.Tensor]:
        """Returns (segment, decoded flow, symbols). ``flow`` must be a single (1, 2, H, W) item."""
        h, w = flow.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"motion codec needs dimensions divisible by 16, got {h}x{w}")
        if flow.shape[0] != 1:
            raise ValueError("compress codes one frame at a time")
        symbols, params = self._symbols(flow)
        est = float(estimate_rate(symbols.float() + params.mu, params))
        s = symbols.numpy()
        bound = symbol_bound(s)
        enc = RangeEncoder()
        encode_gaussian(enc, s, scale_index(params.sigma), bound)
        payload = bytes([bound]) + enc.finish()
        seg = MotionBitstreamSegment(payload, tuple(symbols.shape[1:]), est)
        return seg, self.dequantize(symbols), symbols

    def decode_symbols(self, payload: bytes, latent_dims: tuple[int, int, int]) -> torch.Tensor:
        if not payload:
            raise DecodeError("empty motion payload")
        bound = payload[0]
        shape = (1, *latent_dims)
        params = self.prior.params(torch.zeros(shape))
        dec = RangeDecoder(payload[1:])
        s = decode_gaussian(dec, scale_index(params.sigma), bound)
        dec.finish()
        return torch.from_numpy(s)

    @torch.no_grad()
    def decompress(self, segment: MotionBitstreamSegment) -> torch.Tensor:
        return self.dequantize(self.decode_symbols(segment.payload, segment.latent_dims))
