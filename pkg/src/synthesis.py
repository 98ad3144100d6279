"""
Event-adapted feature synthesis.

Turns the two endpoint frame features and the per-segment event features
into a temporally dense feature sequence at timestamps
``0, 1/(M+1), ..., M/(M+1), 1``:

1. event-modulated alignment warps a reference frame feature towards each
   segment timestamp through a coarse-to-fine offset pyramid, forwards from
   frame 0 and backwards from frame 1;
2. the two directions are fused per timestamp;
3. bidirectional recurrent compensation refines the sequence with gated
   recurrent sweeps conditioned on event features.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoders import LRELU_SLOPE, init_weights
from .resample import bilinear_gather

logger = logging.getLogger(__name__)

OFFSET_INIT_STD = 1e-3


@dataclass
class FeatureSequence:
    """
    Feature maps at uniformly spaced normalized timestamps.

    ``maps`` has shape (B, N, C, h, w); ``timestamps`` holds N values
    ``k / (N - 1)``.
    """
    maps: torch.Tensor
    timestamps: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        n = self.maps.shape[1] if self.maps.dim() == 5 else -1
        if self.maps.dim() != 5:
            raise ValueError(f"feature maps must be (B, N, C, h, w), got {tuple(self.maps.shape)}")
        if len(self.timestamps) != n:
            raise ValueError(f"{n} feature maps but {len(self.timestamps)} timestamps")
        if n >= 2:
            expected = np.arange(n) / (n - 1)
            if not np.allclose(self.timestamps, expected, rtol=0, atol=1e-12):
                raise ValueError("timestamps must be uniform on [0, 1]")

    @classmethod
    def uniform(cls, maps: torch.Tensor) -> 'FeatureSequence':
        n = maps.shape[1]
        return cls(maps, np.arange(n, dtype=np.float64) / max(n - 1, 1))

    def __len__(self) -> int:
        return self.maps.shape[1]

    @property
    def num_segments(self) -> int:
        return len(self) - 2

    @property
    def spacing(self) -> float:
        return 1.0 / (len(self) - 1)


def deform_resample(feat: torch.Tensor, offsets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """
    Offset-driven bilinear resampling with a modulation mask.

    Every output position p gathers G bilinear samples at ``p + offset_g``
    (zero outside the map) and combines them as the mask-weighted average
    ``sum_g m_g x_g / sum_g m_g``. Zero offsets reproduce ``feat``.

    Args:
        feat: (B, C, H, W)
        offsets: (B, G, 2, H, W), component 0 is dx, component 1 is dy
        mask: (B, G, H, W) positive weights

    Returns:
        (B, C, H, W)
    """
    b, c, h, w = feat.shape
    if offsets.shape[0] != b or offsets.shape[2] != 2 or offsets.shape[-2:] != (h, w):
        raise ValueError(f"offsets {tuple(offsets.shape)} do not match features {tuple(feat.shape)}")
    groups = offsets.shape[1]
    base_y = torch.arange(h, dtype=feat.dtype, device=feat.device).view(1, 1, h, 1)
    base_x = torch.arange(w, dtype=feat.dtype, device=feat.device).view(1, 1, 1, w)
    ys = base_y + offsets[:, :, 1]
    xs = base_x + offsets[:, :, 0]
    samples = bilinear_gather(feat, ys, xs, padding='zeros')  # (B, C, G, H, W)
    weights = mask.unsqueeze(1)
    return (samples * weights).sum(dim=2) / weights.sum(dim=2)


class EventModulation(nn.Module):
    """Feature-wise affine modulation of motion features: mv * (1 + gamma(e)) + beta(e)."""

    def __init__(self, channels: int):
        super().__init__()
        self.gamma = nn.Conv2d(channels, channels, 3, padding=1)
        self.beta = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, mv: torch.Tensor, event_feat: torch.Tensor) -> torch.Tensor:
        if mv.shape[-2:] != event_feat.shape[-2:]:
            raise ValueError("motion and event features differ in spatial size")
        return mv * (1 + self.gamma(event_feat)) + self.beta(event_feat)


def emb_modulate(module: EventModulation, mv: torch.Tensor, event_feat: torch.Tensor) -> torch.Tensor:
    return module(mv, event_feat)


class EventModulatedAlignment(nn.Module):
    """
    One direction of event-modulated alignment.

    At each pyramid level (coarse to fine) motion features are computed
    from the concatenated reference and target frame features, fused with
    the upsampled coarser offsets and aligned feature, modulated by the
    event feature, and mapped to per-group offsets and mask logits that
    drive ``deform_resample`` on the reference feature. Offset convolutions
    start from small random weights and zero bias; with them zeroed
    (``zero_offsets``) the module returns the reference unchanged.
    """

    def __init__(self, channels: int, levels: int = 3, groups: int = 9):
        super().__init__()
        if not 1 <= levels <= 3:
            raise ValueError(f"alignment levels must be in 1..3, got {levels}")
        self.channels = channels
        self.levels = levels
        self.groups = groups
        c, g = channels, groups
        self.frame_down = nn.ModuleList(nn.Conv2d(c, c, 3, stride=2, padding=1) for _ in range(levels - 1))
        self.event_down = nn.ModuleList(nn.Conv2d(c, c, 3, stride=2, padding=1) for _ in range(levels - 1))
        self.mv_conv = nn.ModuleList(nn.Conv2d(2 * c, c, 3, padding=1) for _ in range(levels))
        self.fuse_conv = nn.ModuleList(nn.Conv2d(2 * c + 3 * g, c, 3, padding=1) for _ in range(levels - 1))
        self.emb = nn.ModuleList(EventModulation(c) for _ in range(levels))
        self.offset_conv = nn.ModuleList(nn.Conv2d(c, 3 * g, 3, padding=1) for _ in range(levels))
        self.act = nn.LeakyReLU(LRELU_SLOPE)
        init_weights(self)
        for conv in self.offset_conv:
            nn.init.normal_(conv.weight, std=OFFSET_INIT_STD)
            nn.init.zeros_(conv.bias)

    def zero_offsets(self) -> None:
        """Zero every offset and mask convolution."""
        with torch.no_grad():
            for conv in self.offset_conv:
                conv.weight.zero_()
                conv.bias.zero_()

    def _pyramid(self, x: torch.Tensor, downs: nn.ModuleList) -> List[torch.Tensor]:
        levels = [x]
        for down in downs:
            levels.append(self.act(down(levels[-1])))
        return levels

    def _upsample_offsets(self, offset: torch.Tensor, size) -> torch.Tensor:
        up = F.interpolate(offset, size=size, mode='bilinear', align_corners=False)
        g2 = 2 * self.groups
        # offsets are in pixels of the coarser level
        return torch.cat([up[:, :g2] * 2, up[:, g2:]], dim=1)

    def forward(self, ref: torch.Tensor, other: torch.Tensor, event_feat: torch.Tensor) -> torch.Tensor:
        refs = self._pyramid(ref, self.frame_down)
        others = self._pyramid(other, self.frame_down)
        events = self._pyramid(event_feat, self.event_down)

        offset: Optional[torch.Tensor] = None
        aligned: Optional[torch.Tensor] = None
        for level in reversed(range(self.levels)):
            size = refs[level].shape[-2:]
            mv = self.act(self.mv_conv[level](torch.cat([refs[level], others[level]], dim=1)))
            if offset is not None:
                up_aligned = F.interpolate(aligned, size=size, mode='bilinear', align_corners=False)
                mv = self.act(self.fuse_conv[level](
                    torch.cat([mv, self._upsample_offsets(offset, size), up_aligned], dim=1)))
            mv = self.emb[level](mv, events[level])
            offset = self.offset_conv[level](mv)

            b = offset.shape[0]
            g = self.groups
            offsets = offset[:, :2 * g].reshape(b, g, 2, *size)
            mask = torch.sigmoid(offset[:, 2 * g:])
            aligned = deform_resample(refs[level], offsets, mask)
        return aligned


def ema_align(module: EventModulatedAlignment, f0: torch.Tensor, f1: torch.Tensor,
              segments: torch.Tensor, direction: str = 'fwd',
              num_segments: Optional[int] = None) -> torch.Tensor:
    """
    Align a reference frame feature to every event segment.

    Args:
        module: Alignment module of this direction
        f0, f1: (B, C, h, w) endpoint features
        segments: (B, M, C, h, w) event segment features
        direction: 'fwd' uses f0 as reference, 'bwd' uses f1
        num_segments: Expected M, checked when given

    Returns:
        (B, M, C, h, w) aligned features, in the segment order given
    """
    if segments.dim() != 5:
        raise ValueError(f"segment features must be (B, M, C, h, w), got {tuple(segments.shape)}")
    b, m = segments.shape[:2]
    if num_segments is not None and m != num_segments:
        raise ValueError(f"expected {num_segments} event segments, got {m}")
    if f0.shape != f1.shape or f0.shape[-2:] != segments.shape[-2:]:
        raise ValueError("frame and event features must share spatial size")
    if direction not in ('fwd', 'bwd'):
        raise ValueError(f"unknown alignment direction: {direction}")

    ref, other = (f0, f1) if direction == 'fwd' else (f1, f0)

    def repeat(x):
        return x.unsqueeze(1).expand(b, m, *x.shape[1:]).reshape(b * m, *x.shape[1:])

    aligned = module(repeat(ref), repeat(other), segments.reshape(b * m, *segments.shape[2:]))
    return aligned.reshape(b, m, *aligned.shape[1:])


class DirectionFusion(nn.Module):
    """Concatenate forward and backward features and fuse with a conv block."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.act = nn.LeakyReLU(LRELU_SLOPE)
        init_weights(self)

    def forward(self, fwd: torch.Tensor, bwd: torch.Tensor) -> torch.Tensor:
        return self.act(self.conv(torch.cat([fwd, bwd], dim=1)))


def fuse_directions(fusion: DirectionFusion, fwd: torch.Tensor, bwd: torch.Tensor,
                    f0: torch.Tensor, f1: torch.Tensor) -> FeatureSequence:
    """
    Fuse per-timestamp forward and backward features into a sequence.

    Args:
        fusion: DirectionFusion block
        fwd: (B, M, C, h, w), index m-1 at timestamp m/(M+1)
        bwd: (B, M, C, h, w) in reversed temporal order, as the backward
            pass produces it; realigned here
        f0, f1: (B, C, h, w) endpoint features

    Returns:
        FeatureSequence of M + 2 maps
    """
    if fwd.shape != bwd.shape:
        raise ValueError(f"direction lengths differ: {tuple(fwd.shape)} vs {tuple(bwd.shape)}")
    b, m = fwd.shape[:2]
    bwd = torch.flip(bwd, dims=[1])
    fused = fusion(fwd.reshape(b * m, *fwd.shape[2:]), bwd.reshape(b * m, *bwd.shape[2:]))
    fused = fused.reshape(b, m, *fused.shape[1:])
    maps = torch.cat([f0.unsqueeze(1), fused, f1.unsqueeze(1)], dim=1)
    return FeatureSequence.uniform(maps)


class ChannelAttention(nn.Module):
    """
    Channel-attention fusion of a frame feature with an event feature.

    The concatenation is gated per channel by a squeeze-excitation branch
    and projected back to C channels.
    """

    def __init__(self, channels: int, enabled: bool = True):
        super().__init__()
        self.enabled = enabled
        self.squeeze = nn.Conv2d(2 * channels, 2 * channels, 1)
        self.excite = nn.Conv2d(2 * channels, 2 * channels, 1)
        self.fuse = nn.Conv2d(2 * channels, channels, 1)
        self.act = nn.LeakyReLU(LRELU_SLOPE)
        init_weights(self)

    def gate(self, u: torch.Tensor) -> torch.Tensor:
        pooled = u.mean(dim=(-2, -1), keepdim=True)
        return torch.sigmoid(self.excite(self.act(self.squeeze(pooled))))

    def forward(self, frame_feat: torch.Tensor, event_feat: torch.Tensor) -> torch.Tensor:
        if frame_feat.shape != event_feat.shape:
            raise ValueError("frame and event features differ in shape")
        u = torch.cat([frame_feat, event_feat], dim=1)
        if self.enabled:
            u = u * self.gate(u)
        return self.fuse(u)


def channel_attention(module: ChannelAttention, frame_feat: torch.Tensor,
                      event_feat: torch.Tensor) -> torch.Tensor:
    return module(frame_feat, event_feat)


class RecurrentCell(nn.Module):
    """
    Conv-gated recurrent cell.

    h' = (1 - z) * h + z * h_tilde with z = sigmoid(conv[x, h]) and
    h_tilde = tanh(conv[x, h]); the output is r = conv[x, h']. With
    ``cross_input`` the input is first fused with the other direction's
    output.
    """

    def __init__(self, channels: int, cross_input: bool = False):
        super().__init__()
        self.cross_input = cross_input
        c = channels
        self.conv_in = nn.Conv2d(2 * c, c, 3, padding=1) if cross_input else None
        self.conv_z = nn.Conv2d(2 * c, c, 3, padding=1)
        self.conv_h = nn.Conv2d(2 * c, c, 3, padding=1)
        self.conv_out = nn.Conv2d(2 * c, c, 3, padding=1)
        init_weights(self)

    def forward(self, x: torch.Tensor, h: torch.Tensor, cross: Optional[torch.Tensor] = None):
        if self.conv_in is not None:
            if cross is None:
                raise ValueError("this cell expects the other direction's output")
            x = self.conv_in(torch.cat([x, cross], dim=1))
        xh = torch.cat([x, h], dim=1)
        z = torch.sigmoid(self.conv_z(xh))
        candidate = torch.tanh(self.conv_h(xh))
        h_next = (1 - z) * h + z * candidate
        r = self.conv_out(torch.cat([x, h_next], dim=1))
        return r, h_next


class RecurrentCompensation(nn.Module):
    """
    Bidirectional recurrent compensation over a feature sequence.

    The backward sweep runs first (from tau = 1 down to 0); the forward
    sweep then consumes the backward outputs. The module input is added to
    the output when ``residual`` is set.
    """

    def __init__(self, channels: int, attention: bool = True, direction: str = 'bidirectional',
                 residual: bool = True):
        super().__init__()
        if direction not in ('fwd', 'bwd', 'bidirectional'):
            raise ValueError(f"unknown recurrence direction: {direction}")
        self.channels = channels
        self.direction = direction
        self.residual = residual
        self.attention_b = ChannelAttention(channels, attention)
        self.attention_f = ChannelAttention(channels, attention)
        self.cell_b = RecurrentCell(channels)
        self.cell_f = RecurrentCell(channels, cross_input=(direction == 'bidirectional'))

    def _sweep(self, attention, cell, frames, events, order, cross=None):
        b, n, c, h, w = frames.shape
        hidden = frames.new_zeros(b, c, h, w)
        outputs: List[Optional[torch.Tensor]] = [None] * n
        for i in order:
            x = attention(frames[:, i], events[:, i])
            outputs[i], hidden = cell(x, hidden, None if cross is None else cross[i])
        return outputs

    def forward(self, seq: FeatureSequence, event_feats: torch.Tensor) -> FeatureSequence:
        frames = seq.maps
        if len(seq) < 2:
            raise ValueError(f"recurrent compensation needs at least 2 steps, got {len(seq)}")
        if event_feats.shape != frames.shape:
            raise ValueError(f"event features {tuple(event_feats.shape)} do not match "
                             f"the sequence {tuple(frames.shape)}")
        n = len(seq)
        backward_outputs = None
        if self.direction in ('bwd', 'bidirectional'):
            backward_outputs = self._sweep(self.attention_b, self.cell_b, frames, event_feats,
                                           range(n - 1, -1, -1))
        if self.direction == 'bwd':
            outputs = backward_outputs
        else:
            outputs = self._sweep(self.attention_f, self.cell_f, frames, event_feats, range(n),
                                  cross=backward_outputs)
        out = torch.stack(outputs, dim=1)
        if self.residual:
            out = frames + out
        return FeatureSequence(out, seq.timestamps)


def brc(module: RecurrentCompensation, seq: FeatureSequence, event_feats: torch.Tensor) -> FeatureSequence:
    return module(seq, event_feats)


class EventSynthesis(nn.Module):
    """Alignment in one or two directions, direction fusion and recurrent compensation."""

    def __init__(self, channels: int, num_segments: int, levels: int = 3, groups: int = 9,
                 direction: str = 'fwd_bwd', brc_enabled: bool = True, attention: bool = True,
                 brc_direction: str = 'bidirectional', residual: bool = True):
        super().__init__()
        if direction not in ('fwd', 'fwd_bwd'):
            raise ValueError(f"unknown alignment direction setting: {direction}")
        self.channels = channels
        self.num_segments = num_segments
        self.direction = direction
        self.brc_enabled = brc_enabled
        self.align_fwd = EventModulatedAlignment(channels, levels, groups)
        self.align_bwd = EventModulatedAlignment(channels, levels, groups)
        self.fusion = DirectionFusion(channels)
        self.brc = RecurrentCompensation(channels, attention, brc_direction, residual)

    def forward(self, f0: torch.Tensor, f1: torch.Tensor, events_fwd: torch.Tensor,
                events_bwd: torch.Tensor) -> FeatureSequence:
        """
        Args:
            f0, f1: (B, C, h, w) endpoint frame features
            events_fwd: (B, M, C, h, w) features of the forward segments
            events_bwd: (B, M, C, h, w) features of the reversed-voxel segments

        Returns:
            FeatureSequence of M + 2 maps
        """
        m = self.num_segments
        fwd = ema_align(self.align_fwd, f0, f1, events_fwd, 'fwd', m)
        if self.direction == 'fwd_bwd':
            bwd = ema_align(self.align_bwd, f0, f1, events_bwd, 'bwd', m)
        else:
            bwd = torch.zeros_like(fwd)
        seq = fuse_directions(self.fusion, fwd, bwd, f0, f1)
        if self.brc_enabled:
            endpoint = events_fwd.new_zeros(events_fwd.shape[0], 1, *events_fwd.shape[2:])
            seq = self.brc(seq, torch.cat([endpoint, events_fwd, endpoint], dim=1))
        return seq
