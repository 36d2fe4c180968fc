"""Condition signals derived from the previous reconstruction.

``x_c`` is the warped C-channel feature predictor, ``x_dot`` its refined
version (the condition the inter codec sees) and ``x_pix`` a 3-channel pixel
domain predictor projected from the *unrefined* ``x_c``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import SUPPORTED_CHANNELS, ConfigError
from .layers import ResBlock, conv3x3
from .motion import warp


@dataclass
class ConditionBundle:
    ref_features: torch.Tensor
    x_c: torch.Tensor
    x_dot: torch.Tensor
    x_pix: torch.Tensor | None
    channels: int


@dataclass
class CodecState:
    """Decoder-visible state carried between frames of one coding session."""

    reference: torch.Tensor | None = None
    ref_features: torch.Tensor | None = None
    frame_index: int = 0

    def set_reference(self, frame: torch.Tensor):
        self.reference = frame
        self.ref_features = None


class FeatureExtractor(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        if channels not in SUPPORTED_CHANNELS:
            raise ConfigError(f"unsupported channel size {channels}")
        self.channels = channels
        self.head = conv3x3(3, channels)
        self.block = ResBlock(channels)

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        return self.block(self.head(frame))


class RefinementNet(nn.Module):
    """Two zero-initialised residual blocks, so refinement starts as the identity."""

    def __init__(self, channels: int):
        super().__init__()
        self.blocks = nn.Sequential(ResBlock(channels, zero_init=True), ResBlock(channels, zero_init=True))

    def forward(self, x_c: torch.Tensor) -> torch.Tensor:
        return self.blocks(x_c)


class PixelProjection(nn.Module):
    """Single linear 3x3 conv, C -> 3 channels. The output is deliberately left unclamped."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = conv3x3(channels, 3)

    def forward(self, x_c: torch.Tensor) -> torch.Tensor:
        return self.conv(x_c)


def extract_features(fe: FeatureExtractor, reference: torch.Tensor, channels: int | None = None) -> torch.Tensor:
    if channels is not None and channels != fe.channels:
        raise ConfigError(f"feature extractor built for C={fe.channels}, asked for C={channels}")
    return fe(reference)


def build_temporal_predictor(ref_features: torch.Tensor, flow_hat: torch.Tensor) -> torch.Tensor:
    if ref_features.shape[-2:] != flow_hat.shape[-2:] or ref_features.shape[0] != flow_hat.shape[0]:
        raise ValueError(f"features {tuple(ref_features.shape)} and flow {tuple(flow_hat.shape)} disagree")
    return warp(ref_features, flow_hat)


def refine_condition(net: RefinementNet, x_c: torch.Tensor) -> torch.Tensor:
    return net(x_c)


def project_to_pixels(proj: PixelProjection, x_c: torch.Tensor) -> torch.Tensor:
    return proj(x_c)
