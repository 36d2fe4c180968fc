"""Quantization, Gaussian likelihoods, rate estimates and the CDF tables that back them."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import ndtr

from ..config import SIGMA_MIN
from .rangecoder import CdfTable, RangeDecoder, RangeEncoder

PROB_FLOOR = 2.0 ** -16
MAX_BOUND = 255
SCALE_LEVELS = 256
SCALE_MAX = 256.0


class EntropySource(enum.Enum):
    FACTORIZED = "factorized"
    HYPERPRIOR = "hyperprior"
    HYPERPRIOR_TEMPORAL = "hyperprior+temporal"


@dataclass
class EntropyParams:
    mu: torch.Tensor
    sigma: torch.Tensor
    source: EntropySource = EntropySource.HYPERPRIOR_TEMPORAL

    def __post_init__(self):
        self.sigma = self.sigma.clamp_min(SIGMA_MIN)


def quantize(y: torch.Tensor, phase: str, mu: torch.Tensor | None = None,
             generator: torch.Generator | None = None) -> torch.Tensor:
    """``train``: additive uniform noise in [-0.5, 0.5); ``eval``: mean-centred rounding."""
    if phase == "train":
        noise = torch.rand(y.shape, generator=generator, dtype=y.dtype, device=y.device) - 0.5
        return y + noise
    if phase != "eval":
        raise ValueError(f"phase must be 'train' or 'eval', got {phase!r}")
    if mu is None:
        return torch.round(y)
    return torch.round(y - mu) + mu


def symbols_of(y: torch.Tensor, mu: torch.Tensor | None = None) -> torch.Tensor:
    return torch.round(y if mu is None else y - mu).to(torch.int64)


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x * (1.0 / math.sqrt(2.0)))


def gaussian_likelihood(y_hat: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Mass of the unit-width bin around ``y_hat`` under N(mu, sigma^2), floored at 2^-16."""
    sigma = sigma.clamp_min(SIGMA_MIN)
    # evaluated on the lower tail for numerical stability
    v = (y_hat - mu).abs()
    p = _std_normal_cdf((0.5 - v) / sigma) - _std_normal_cdf((-0.5 - v) / sigma)
    return p.clamp_min(PROB_FLOOR)


def estimate_rate(y_hat: torch.Tensor, params: EntropyParams) -> torch.Tensor:
    """Total bits, summed over every element (including batch)."""
    if y_hat.shape != params.mu.shape:
        raise ValueError(f"latent shape {tuple(y_hat.shape)} != params shape {tuple(params.mu.shape)}")
    return -torch.log2(gaussian_likelihood(y_hat, params.mu, params.sigma)).sum()


# --------------------------------------------------------------------------- CDF tables


def scale_levels() -> np.ndarray:
    return np.exp(np.linspace(math.log(SIGMA_MIN), math.log(SCALE_MAX), SCALE_LEVELS))


def scale_index(sigma: torch.Tensor | np.ndarray) -> np.ndarray:
    """Nearest level (log domain) of the shared scale table."""
    s = np.asarray(sigma.detach().cpu().numpy() if isinstance(sigma, torch.Tensor) else sigma, dtype=np.float64)
    step = (math.log(SCALE_MAX) - math.log(SIGMA_MIN)) / (SCALE_LEVELS - 1)
    idx = np.rint((np.log(np.clip(s, SIGMA_MIN, SCALE_MAX)) - math.log(SIGMA_MIN)) / step)
    return idx.astype(np.int64)


@lru_cache(maxsize=4096)
def gaussian_cdf_table(level: int, bound: int) -> CdfTable:
    """Table for a zero-mean Gaussian at scale level ``level`` over ``[-bound, bound]``.

    Tail mass beyond the support is folded into the two extreme symbols so that
    interior symbols cost what the continuous rate estimate says they cost.
    """
    sigma = scale_levels()[level]
    edges = (np.arange(-bound, bound + 2) - 0.5) / sigma
    cdf = ndtr(edges)
    cdf[0], cdf[-1] = 0.0, 1.0
    return CdfTable.from_pmf(np.diff(cdf), bound)


def symbol_bound(symbols: np.ndarray) -> int:
    """Per-tensor support half-width: max |symbol| + 2."""
    m = int(np.abs(symbols).max()) if symbols.size else 0
    return m + 2


def clip_symbols(symbols: torch.Tensor) -> torch.Tensor:
    """Keep symbols inside what a one-byte bound can describe."""
    return symbols.clamp(-(MAX_BOUND - 2), MAX_BOUND - 2)


def encode_gaussian(enc: RangeEncoder, symbols: np.ndarray, levels: np.ndarray, bound: int):
    for s, lv in zip(symbols.reshape(-1).tolist(), levels.reshape(-1).tolist()):
        enc.encode(s, gaussian_cdf_table(lv, bound))


def decode_gaussian(dec: RangeDecoder, levels: np.ndarray, bound: int) -> np.ndarray:
    out = [dec.decode(gaussian_cdf_table(lv, bound)) for lv in levels.reshape(-1).tolist()]
    return np.asarray(out, dtype=np.int64).reshape(levels.shape)


def tables_digest(levels: np.ndarray, bound: int) -> str:
    """Hash of every table a tensor is coded with; equal on encoder and decoder by construction."""
    import hashlib

    h = hashlib.sha256()
    for lv in levels.reshape(-1).tolist():
        h.update(gaussian_cdf_table(lv, bound).digest().encode())
    return h.hexdigest()


# --------------------------------------------------------------------------- learned models


class FactorizedGaussian(nn.Module):
    """Per-channel Gaussian with learned mean and scale, independent of the data."""

    def __init__(self, channels: int, init_scale: float = 1.0):
        super().__init__()
        self.mu = nn.Parameter(torch.zeros(channels))
        self.raw_sigma = nn.Parameter(torch.full((channels,), math.log(math.expm1(init_scale))))

    def params(self, like: torch.Tensor) -> EntropyParams:
        c = self.mu.numel()
        mu = self.mu.view(1, c, 1, 1).expand_as(like)
        sigma = F.softplus(self.raw_sigma).view(1, c, 1, 1).expand_as(like)
        return EntropyParams(mu, sigma, EntropySource.FACTORIZED)


class PriorFusion(nn.Module):
    """Predicts (mu, sigma) of the main latent from hyper-decoder and temporal-prior features."""

    def __init__(self, hyper_channels: int, temporal_channels: int, latent_channels: int):
        super().__init__()
        self.temporal_channels = temporal_channels
        self.fuse = nn.Sequential(
            nn.Conv2d(hyper_channels + temporal_channels, 2 * latent_channels, 1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(2 * latent_channels, 2 * latent_channels, 1),
        )

    def forward(self, hyper_feat: torch.Tensor, temporal_feat: torch.Tensor | None) -> EntropyParams:
        if self.temporal_channels:
            x = torch.cat([hyper_feat, temporal_feat], dim=1)
            source = EntropySource.HYPERPRIOR_TEMPORAL
        else:
            x = hyper_feat
            source = EntropySource.HYPERPRIOR
        mu, raw = self.fuse(x).chunk(2, dim=1)
        return EntropyParams(mu, F.softplus(raw), source)
