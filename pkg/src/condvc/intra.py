"""I-frame coding at GOP boundaries: lossless 8-bit passthrough or a small learned autoencoder."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import ConfigError
from .data import from_8bit, to_8bit
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


class IntraMethod(enum.Enum):
    LEARNED_AE = "learned_ae"
    PASSTHROUGH = "lossless_passthrough"


@dataclass
class IntraResult:
    x_hat: np.ndarray
    bits: float
    method: IntraMethod
    payload: bytes


class LearnedIntraCodec(nn.Module):
    def __init__(self, width: int = 32, latent_channels: int = 32):
        super().__init__()
        self.latent_channels = latent_channels
        self.encoder = nn.Sequential(
            conv3x3(3, width, 2), act(), conv3x3(width, width, 2), act(),
            conv3x3(width, width, 2), act(), conv3x3(width, latent_channels, 2),
        )
        self.decoder = nn.Sequential(
            deconv3x3(latent_channels, width), act(), deconv3x3(width, width), act(),
            deconv3x3(width, width), act(), deconv3x3(width, 3),
        )
        self.prior = FactorizedGaussian(latent_channels)

    def forward(self, x: torch.Tensor, phase: str = "train"):
        y = self.encoder(x - 0.5)
        params = self.prior.params(y)
        y_hat = quantize(y, phase, params.mu)
        return (self.decoder(y_hat) + 0.5).clamp(0, 1), estimate_rate(y_hat, params)

    def _reconstruct(self, symbols: torch.Tensor) -> torch.Tensor:
        params = self.prior.params(symbols.float())
        return (self.decoder(symbols.float() + params.mu) + 0.5).clamp(0, 1)

    @torch.no_grad()
    def compress(self, x: torch.Tensor) -> tuple[bytes, torch.Tensor]:
        y = self.encoder(x - 0.5)
        params = self.prior.params(y)
        sym = clip_symbols(torch.round(y - params.mu)).to(torch.int64)
        bound = symbol_bound(sym.numpy())
        enc = RangeEncoder()
        encode_gaussian(enc, sym.numpy(), scale_index(params.sigma), bound)
        return bytes([bound]) + enc.finish(), self._reconstruct(sym)

    @torch.no_grad()
    def decompress(self, payload: bytes, height: int, width: int) -> torch.Tensor:
        if not payload:
            raise DecodeError("empty intra payload")
        shape = (1, self.latent_channels, height // 16, width // 16)
        params = self.prior.params(torch.zeros(shape))
        dec = RangeDecoder(payload[1:])
        sym = torch.from_numpy(decode_gaussian(dec, scale_index(params.sigma), payload[0]))
        dec.finish()
        return self._reconstruct(sym)


def _pad(x: torch.Tensor, multiple: int = 16) -> torch.Tensor:
    from .pipeline import pad_frame

    return pad_frame(x, multiple)


def code_intra(x: np.ndarray, method: IntraMethod | str = IntraMethod.PASSTHROUGH,
               model: LearnedIntraCodec | None = None) -> IntraResult:
    """Code an unpadded (3, H, W) frame."""
    method = IntraMethod(method)
    x = np.asarray(x, dtype=np.float32)
    _, h, w = x.shape
    if method is IntraMethod.PASSTHROUGH:
        payload = to_8bit(x).tobytes()
        return IntraResult(from_8bit(np.frombuffer(payload, np.uint8).reshape(3, h, w)), 24.0 * h * w, method, payload)
    if model is None:
        raise ConfigError("learned intra coding needs a trained LearnedIntraCodec")
    xt = _pad(torch.from_numpy(x)[None])
    payload, x_hat = model.compress(xt)
    return IntraResult(x_hat[0, :, :h, :w].numpy().copy(), 8.0 * len(payload), method, payload)


def decode_intra(payload: bytes, method: IntraMethod | str, height: int, width: int,
                 model: LearnedIntraCodec | None = None) -> np.ndarray:
    method = IntraMethod(method)
    if method is IntraMethod.PASSTHROUGH:
        if len(payload) != 3 * height * width:
            raise DecodeError(f"passthrough payload has {len(payload)} bytes, expected {3 * height * width}")
        return from_8bit(np.frombuffer(payload, np.uint8).reshape(3, height, width))
    if model is None:
        raise ConfigError("learned intra decoding needs a trained LearnedIntraCodec")
    ph, pw = height + (-height) % 16, width + (-width) % 16
    return model.decompress(payload, ph, pw)[0, :, :height, :width].numpy().copy()


def train_intra(model: LearnedIntraCodec, frames: np.ndarray, iters: int = 200, lmbda: float = 512,
                lr: float = 1e-3, batch_size: int = 4, seed: int = 0) -> list[float]:
    """Fit the intra autoencoder on (N, 3, H, W) frames with R + lambda * MSE."""
    gen = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    data = torch.from_numpy(np.asarray(frames, dtype=np.float32))
    n, _, h, w = data.shape
    losses = []
    model.train()
    for _ in range(iters):
        batch = data[gen.integers(0, n, size=batch_size)]
        x_hat, bits = model(batch)
        loss = bits / (batch_size * h * w) + lmbda * torch.mean((x_hat - batch) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    model.eval()
    return losses
