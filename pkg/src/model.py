"""
Model assembly: encoders, event-adapted synthesis and the video decoder.
"""

import logging
from collections import OrderedDict
from typing import Dict, Optional

import torch
from torch import nn

from .config import Settings
from .encoders import EventEncoder, FrameEncoder, extract_event_features, extract_frame_features
from .events import reverse_voxel, split_segments
from .synthesis import EventSynthesis, FeatureSequence
from .video_inr import LocalGridConfig, LocalVideoTransformer, QuerySpec

logger = logging.getLogger(__name__)


class SpaceTimeEnhancer(nn.Module):
    """
    Two LR frames plus the events between them to frames at any (s, t).

    Inputs are (B, 2, 3, h, w) frames and a (B, M+1, h, w) forward voxel;
    the backward voxel defaults to the reversed forward voxel.
    """

    def __init__(self, channels: int = 64, num_segments: int = 7, frame_blocks: int = 5,
                 event_blocks: int = 5, ema_direction: str = 'fwd_bwd', ema_levels: int = 3,
                 offset_groups: int = 9, brc_enabled: bool = True, brc_attention: bool = True,
                 brc_direction: str = 'bidirectional', brc_residual: bool = True,
                 grid: Optional[LocalGridConfig] = None, pos_encoding: str = 'cosine',
                 attention: str = 'cross_scale', mlp_hidden=(256, 256, 256, 256),
                 cell_decode: bool = True, prev_query: bool = True, query_chunk: int = 0):
        super().__init__()
        self.num_segments = num_segments
        grid = grid or LocalGridConfig()
        grid.validate(num_segments + 2)
        self.frame_encoder = FrameEncoder(channels, frame_blocks)
        self.event_encoder = EventEncoder(channels, event_blocks)
        self.synthesis = EventSynthesis(channels, num_segments, levels=ema_levels, groups=offset_groups,
                                        direction=ema_direction, brc_enabled=brc_enabled,
                                        attention=brc_attention, brc_direction=brc_direction,
                                        residual=brc_residual)
        self.decoder = LocalVideoTransformer(channels, grid, pos_encoding=pos_encoding, attention=attention,
                                             mlp_hidden=mlp_hidden, cell_decode=cell_decode,
                                             prev_query=prev_query, query_chunk=query_chunk)

    def features(self, lr: torch.Tensor, voxel_fwd: torch.Tensor,
                 voxel_bwd: Optional[torch.Tensor] = None) -> FeatureSequence:
        """Encode the inputs and synthesize the M + 2 feature sequence."""
        if lr.dim() != 5 or lr.shape[1] != 2:
            raise ValueError(f"expected (B, 2, 3, h, w) frames, got {tuple(lr.shape)}")
        if voxel_fwd.shape[1] != self.num_segments + 1:
            raise ValueError(f"expected {self.num_segments + 1} voxel bins, got {voxel_fwd.shape[1]}")
        if voxel_fwd.shape[-2:] != lr.shape[-2:]:
            raise ValueError("voxel and frame spatial sizes differ")
        if voxel_bwd is None:
            voxel_bwd = reverse_voxel(voxel_fwd)

        frame_feats = extract_frame_features(self.frame_encoder, lr)
        events_fwd = extract_event_features(self.event_encoder, split_segments(voxel_fwd))
        events_bwd = extract_event_features(self.event_encoder, split_segments(voxel_bwd))
        return self.synthesis(frame_feats[:, 0], frame_feats[:, 1], events_fwd, events_bwd)

    def forward(self, lr: torch.Tensor, voxel_fwd: torch.Tensor, query: QuerySpec,
                voxel_bwd: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Returns:
            (B, len(query), 3, oh, ow) frames
        """
        return self.decoder(self.features(lr, voxel_fwd, voxel_bwd), query)


def build_model(settings: Settings) -> SpaceTimeEnhancer:
    """Construct the model described by a settings table."""
    t_g, h_g, w_g = (int(v) for v in settings['livt.local_grid'])
    grid = LocalGridConfig(t_g=t_g, h_g=h_g, w_g=w_g, channels=settings['livt.channels'],
                           frequencies=settings['livt.pos_frequencies'])
    model = SpaceTimeEnhancer(
        channels=settings['model.channels'],
        num_segments=settings['model.num_segments'],
        frame_blocks=settings['model.frame_blocks'],
        event_blocks=settings['model.event_blocks'],
        ema_direction=settings['ema.direction'],
        ema_levels=settings['ema.levels'],
        offset_groups=settings['ema.offset_groups'],
        brc_enabled=settings['brc.enabled'],
        brc_attention=settings['brc.attention.enabled'],
        brc_direction=settings['brc.direction'],
        brc_residual=settings['brc.residual'],
        grid=grid,
        pos_encoding=settings['livt.pos_encoding'],
        attention=settings['livt.attention'],
        mlp_hidden=tuple(int(v) for v in settings['livt.mlp_hidden']),
        cell_decode=settings['livt.cell_decode'],
        prev_query=settings['livt.prev_query'],
        query_chunk=settings['livt.query_chunk'],
    )
    logger.info(f"Built model with {count_parameters(model)['total']:,} parameters")
    return model


def count_parameters(model: nn.Module) -> Dict[str, int]:
    """Trainable parameter counts per top-level submodule, plus ``total``."""
    counts: Dict[str, int] = OrderedDict()
    for name, child in model.named_children():
        counts[name] = sum(p.numel() for p in child.parameters() if p.requires_grad)
    counts['total'] = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return counts
