"""
Initial feature extraction for frames and event segments.
"""

import logging

import torch
from torch import nn

logger = logging.getLogger(__name__)

LRELU_SLOPE = 0.1


def init_weights(module: nn.Module) -> None:
    """Kaiming-uniform conv weights with zero bias."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d)):
            nn.init.kaiming_uniform_(m.weight, a=LRELU_SLOPE, nonlinearity='leaky_relu')
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ResidualBlock(nn.Module):
    """conv3x3 - LReLU - conv3x3 with an identity skip and no normalization."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.LeakyReLU(LRELU_SLOPE)
        init_weights(self)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(self.act(self.conv1(x)))


class _Encoder(nn.Module):
    in_channels = 0
    head_kernel = 3

    def __init__(self, channels: int = 64, num_blocks: int = 5):
        super().__init__()
        self.channels = channels
        self.head = nn.Conv2d(self.in_channels, channels, self.head_kernel, padding=self.head_kernel // 2)
        self.act = nn.LeakyReLU(LRELU_SLOPE)
        self.blocks = nn.Sequential(*[ResidualBlock(channels) for _ in range(num_blocks)])
        init_weights(self.head)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise TypeError(f"{type(self).__name__} expects (B, {self.in_channels}, H, W) input, "
                            f"got {tuple(x.shape)}")
        return self.blocks(self.act(self.head(x)))


class FrameEncoder(_Encoder):
    """5x5 conv with LReLU followed by residual blocks, on RGB frames."""
    in_channels = 3
    head_kernel = 5


class EventEncoder(_Encoder):
    """3x3 conv with LReLU followed by residual blocks, on 2-bin event segments."""
    in_channels = 2
    head_kernel = 3


def _encode_many(encoder: _Encoder, x: torch.Tensor) -> torch.Tensor:
    # (B, N, c, H, W) -> (B, N, C, H, W) with one encoder pass over B*N maps
    b, n = x.shape[:2]
    feats = encoder(x.reshape(b * n, *x.shape[2:]))
    return feats.reshape(b, n, *feats.shape[1:])


def extract_frame_features(encoder: FrameEncoder, frames: torch.Tensor) -> torch.Tensor:
    """
    Encode frames.

    Args:
        encoder: FrameEncoder
        frames: (3, H, W), (B, 3, H, W) or (B, N, 3, H, W) in [0, 1]

    Returns:
        Feature maps with the channel axis widened to C, same spatial size
    """
    return _apply(encoder, frames, 3)


def extract_event_features(encoder: EventEncoder, segments: torch.Tensor) -> torch.Tensor:
    """Encode event segments of shape (2, H, W), (B, 2, H, W) or (B, M, 2, H, W)."""
    return _apply(encoder, segments, 2)


def _apply(encoder: _Encoder, x: torch.Tensor, channels: int) -> torch.Tensor:
    if x.dim() < 3 or x.shape[-3] != channels:
        raise TypeError(f"expected {channels} input channels, got shape {tuple(x.shape)}")
    if x.dim() == 3:
        return encoder(x.unsqueeze(0))[0]
    if x.dim() == 4:
        return encoder(x)
    if x.dim() == 5:
        return _encode_many(encoder, x)
    raise TypeError(f"unsupported input rank {x.dim()}")
