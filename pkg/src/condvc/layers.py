from __future__ import annotations

import torch
import torch.nn as nn


def conv3x3(c_in: int, c_out: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)


def deconv3x3(c_in: int, c_out: int) -> nn.ConvTranspose2d:
    """Stride-2 transposed conv that exactly doubles even spatial sizes."""
    return nn.ConvTranspose2d(c_in, c_out, 3, stride=2, padding=1, output_padding=1)


def act() -> nn.Module:
    return nn.LeakyReLU(0.1)


class ResBlock(nn.Module):
    """x + conv(act(conv(act(x)))); ``zero_init`` makes the block start as the identity."""

    def __init__(self, channels: int, zero_init: bool = False):
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)
        self.act = act()
        if zero_init:
            nn.init.zeros_(self.conv2.weight)
            nn.init.zeros_(self.conv2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(self.act(self.conv1(self.act(x))))
