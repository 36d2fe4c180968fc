from __future__ import annotations

import torch
import torch.nn as nn

from .layers import ResBlock, act, conv3x3


class MaskGenerator(nn.Module):
    """Soft pixel mask from decoded flow and the pixel-domain predictor.

    conv3x3(5->w), leaky ReLU, two residual blocks, conv3x3(w->1), sigmoid.
    Only decoded quantities go in, so the decoder regenerates the same mask.
    """

    def __init__(self, width: int = 32):
        super().__init__()
        self.head = conv3x3(5, width)
        self.act = act()
        self.body = nn.Sequential(ResBlock(width), ResBlock(width))
        self.tail = conv3x3(width, 1)

    def forward(self, flow_hat: torch.Tensor, x_pix: torch.Tensor) -> torch.Tensor:
        if flow_hat.shape[-2:] != x_pix.shape[-2:] or flow_hat.shape[0] != x_pix.shape[0]:
            raise ValueError(f"flow {tuple(flow_hat.shape)} and predictor {tuple(x_pix.shape)} disagree")
        x = torch.cat([flow_hat, x_pix], dim=1)
        return torch.sigmoid(self.tail(self.body(self.act(self.head(x)))))


def generate_mask(model: MaskGenerator, flow_hat: torch.Tensor, x_pix: torch.Tensor) -> torch.Tensor:
    return model(flow_hat, x_pix)


def replicate_mask(m: torch.Tensor) -> torch.Tensor:
    """(…, 1, H, W) -> (…, 3, H, W) by channel replication."""
    if m.shape[-3] != 1:
        raise ValueError(f"mask must have a single channel, got shape {tuple(m.shape)}")
    return m.repeat_interleave(3, dim=-3)
