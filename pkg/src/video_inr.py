"""
Local implicit video transformer.

Maps continuous query coordinates (time, y, x) at spatial scale s and
temporal scale t to RGB. For every target time the nearest T_G feature
slices are selected; each HR query attends to an H_G x W_G neighborhood of
LR keys in every selected slice with a positional bias derived from the
query-key offsets, and an MLP decodes the concatenated slice outputs.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .encoders import LRELU_SLOPE
from .resample import bilinear_gather
from .synthesis import FeatureSequence

logger = logging.getLogger(__name__)

# Distances (in grid steps) equal to this many decimals are ties.
_TIE_DECIMALS = 9
_SNAP_TOLERANCE = 1e-9


@dataclass
class QuerySpec:
    """Target scales and timestamps of one render."""
    s: float
    t: int
    target_timestamps: np.ndarray = None
    out_size: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.s < 1:
            raise ValueError(f"spatial scale s must be >= 1, got {self.s}")
        if self.t < 1 or int(self.t) != self.t:
            raise ValueError(f"temporal scale t must be an integer >= 1, got {self.t}")
        self.t = int(self.t)
        if self.target_timestamps is None:
            self.target_timestamps = np.arange(self.t + 1, dtype=np.float64) / self.t
        self.target_timestamps = np.asarray(self.target_timestamps, dtype=np.float64).reshape(-1)
        if len(self.target_timestamps) == 0:
            raise ValueError("at least one target timestamp is required")
        bad = (self.target_timestamps < 0) | (self.target_timestamps > 1)
        if bad.any():
            raise ValueError(f"target timestamps must lie in [0, 1], got {self.target_timestamps[bad][0]}")

    @classmethod
    def uniform(cls, s: float, t: int) -> 'QuerySpec':
        return cls(s=s, t=t)

    @classmethod
    def explicit(cls, s: float, times: Sequence[float]) -> 'QuerySpec':
        """Explicit timestamps; the temporal cell uses t = max(1, len(times) - 1)."""
        times = np.asarray(list(times), dtype=np.float64)
        return cls(s=s, t=max(1, len(times) - 1), target_timestamps=times)

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        if self.out_size is not None:
            return tuple(self.out_size)
        return (int(math.ceil(self.s * height - 1e-9)), int(math.ceil(self.s * width - 1e-9)))

    def cell(self, height: int, width: int) -> Tuple[float, float, float]:
        """Decoding cell (2/(s*h), 2/(s*w), 1/t) in normalized coordinates."""
        return (2.0 / (self.s * height), 2.0 / (self.s * width), 1.0 / self.t)

    def __len__(self) -> int:
        return len(self.target_timestamps)


@dataclass(frozen=True)
class LocalGridConfig:
    """Local attention window and width settings."""
    t_g: int = 3
    h_g: int = 3
    w_g: int = 3
    channels: int = 64
    frequencies: int = 10

    def validate(self, sequence_length: Optional[int] = None) -> None:
        if self.t_g < 1:
            raise ValueError(f"temporal grid extent must be >= 1, got {self.t_g}")
        if self.h_g < 1 or self.w_g < 1 or self.h_g % 2 == 0 or self.w_g % 2 == 0:
            raise ValueError(f"spatial grid extents must be odd, got {self.h_g}x{self.w_g}")
        if self.frequencies < 1:
            raise ValueError(f"frequency count must be >= 1, got {self.frequencies}")
        if sequence_length is not None and self.t_g > sequence_length:
            raise ValueError(f"temporal grid extent {self.t_g} exceeds the {sequence_length} feature slices")

    @property
    def neighbors(self) -> int:
        return self.h_g * self.w_g


@dataclass
class AttentionBundle:
    """
    Per-query attention operands for one target time.

    q: (B, P, C); k, v: (B, P, T_G, G, C); bias: (B or 1, P, T_G, G).
    """
    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    bias: torch.Tensor

    def __post_init__(self):
        b, p, c = self.q.shape
        if self.k.dim() != 5 or self.k.shape[:2] != (b, p) or self.k.shape[-1] != c:
            raise ValueError(f"keys {tuple(self.k.shape)} do not match queries {tuple(self.q.shape)}")
        if self.v.shape != self.k.shape:
            raise ValueError(f"values {tuple(self.v.shape)} do not match keys {tuple(self.k.shape)}")
        if self.bias.shape[1:] != self.k.shape[1:4]:
            raise ValueError(f"bias {tuple(self.bias.shape)} does not match keys {tuple(self.k.shape)}")


def select_timestamps(target: float, timestamps: Sequence[float], t_g: int) -> np.ndarray:
    """
    Indices of the T_G slices nearest to ``target``, ascending.

    Nearest-T_G minimizes the summed distance; ties go to the earlier slice.

    Args:
        target: Query time in [0, 1]
        timestamps: Uniform grid k / (N - 1)
        t_g: Window size

    Returns:
        int array of T_G ascending indices
    """
    timestamps = np.asarray(timestamps, dtype=np.float64)
    n = len(timestamps)
    if t_g < 1:
        raise ValueError(f"temporal grid extent must be >= 1, got {t_g}")
    if t_g > n:
        raise ValueError(f"cannot select {t_g} of {n} timestamps")
    if not 0 <= target <= 1:
        raise ValueError(f"query time must lie in [0, 1], got {target}")
    steps = max(n - 1, 1)
    distance = np.round(np.abs(np.arange(n) - target * steps), _TIE_DECIMALS)
    order = np.lexsort((np.arange(n), distance))
    return np.sort(order[:t_g])


class KQVEmbedding(nn.Module):
    """Shared 3D feature convolution followed by independent K, Q and V 3D convolutions."""

    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        self.feature = nn.Conv3d(in_channels, channels, 3, padding=1)
        self.key = nn.Conv3d(channels, channels, 3, padding=1)
        self.query = nn.Conv3d(channels, channels, 3, padding=1)
        self.value = nn.Conv3d(channels, channels, 3, padding=1)
        self.act = nn.LeakyReLU(LRELU_SLOPE)

    def forward(self, maps: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(B, N, C_in, h, w) -> K, Q, V each (B, N, C, h, w)."""
        volume = maps.permute(0, 2, 1, 3, 4)
        feat = self.act(self.feature(volume))

        def back(x):
            return x.permute(0, 2, 1, 3, 4).contiguous()

        return back(self.key(feat)), back(self.query(feat)), back(self.value(feat))


def embed_kqv(module: KQVEmbedding, seq: FeatureSequence):
    return module(seq.maps)


def lr_positions(out_size: int, s: float, dtype=np.float64) -> np.ndarray:
    """LR coordinates of HR pixel centers: (i + 0.5) / s - 0.5."""
    return ((np.arange(out_size, dtype=np.float64) + 0.5) / s - 0.5).astype(dtype)


def _query_grid(out_size: Tuple[int, int], s: float, like: torch.Tensor):
    ys = torch.as_tensor(lr_positions(out_size[0], s), dtype=like.dtype, device=like.device)
    xs = torch.as_tensor(lr_positions(out_size[1], s), dtype=like.dtype, device=like.device)
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing='ij')
    return grid_y.reshape(-1), grid_x.reshape(-1)


def _time_position(target: float, n: int) -> Tuple[int, float]:
    u = target * (n - 1)
    if abs(u - round(u)) < _SNAP_TOLERANCE:
        u = float(round(u))
    i0 = min(int(math.floor(u)), max(n - 2, 0))
    return i0, u - i0


def sample_query(q_volume: torch.Tensor, target: float, s: float,
                 out_size: Tuple[int, int], positions=None) -> torch.Tensor:
    """
    Trilinear sampling of the query volume at HR pixel centers and time ``target``.

    Args:
        q_volume: (B, N, C, h, w)
        target: Query time in [0, 1]
        s: Spatial scale
        out_size: HR grid (oh, ow)
        positions: Optional precomputed (ys, xs) LR positions of the queries

    Returns:
        (B, P, C) with P = oh * ow in row-major order
    """
    b, n = q_volume.shape[:2]
    ys, xs = positions if positions is not None else _query_grid(out_size, s, q_volume)
    ys = ys.unsqueeze(0).expand(b, -1)
    xs = xs.unsqueeze(0).expand(b, -1)
    i0, frac = _time_position(target, n)
    q = bilinear_gather(q_volume[:, i0], ys, xs, padding='border')
    if frac > 0:
        q1 = bilinear_gather(q_volume[:, i0 + 1], ys, xs, padding='border')
        q = (1 - frac) * q + frac * q1
    return q.transpose(1, 2)


def nearest_lr_index(positions: torch.Tensor, size: int) -> torch.Tensor:
    return torch.floor(positions + 0.5).long().clamp(0, size - 1)


def neighborhood_index(ys: torch.Tensor, xs: torch.Tensor, height: int, width: int,
                       h_g: int, w_g: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Row-major H_G x W_G neighborhood around each query's nearest LR pixel.

    Returns:
        (key_y, key_x), each (P, G) long tensors, replicate-clamped into the map
    """
    cy = nearest_lr_index(ys, height)
    cx = nearest_lr_index(xs, width)
    dy = torch.arange(h_g, device=ys.device) - h_g // 2
    dx = torch.arange(w_g, device=ys.device) - w_g // 2
    off_y, off_x = torch.meshgrid(dy, dx, indexing='ij')
    key_y = (cy.unsqueeze(1) + off_y.reshape(1, -1)).clamp(0, height - 1)
    key_x = (cx.unsqueeze(1) + off_x.reshape(1, -1)).clamp(0, width - 1)
    return key_y, key_x


def sample_local_kv(k_volume: torch.Tensor, v_volume: torch.Tensor, slice_index: int, s: float,
                    h_g: int, w_g: int, out_size: Tuple[int, int], positions=None):
    """
    Nearest local sampling of keys and values on one time slice.

    Returns:
        k, v of shape (B, P, H_G * W_G, C), plus the (key_y, key_x) LR
        positions used, each (P, G)
    """
    h, w = k_volume.shape[-2:]
    ys, xs = positions if positions is not None else _query_grid(out_size, s, k_volume)
    key_y, key_x = neighborhood_index(ys, xs, h, w, h_g, w_g)
    flat_index = key_y * w + key_x

    def gather(volume):
        flat = volume[:, slice_index].flatten(2).transpose(1, 2)  # (B, h*w, C)
        return flat[:, flat_index]

    return gather(k_volume), gather(v_volume), (key_y, key_x)


def cosine_encoding(rel: torch.Tensor, frequencies: int) -> torch.Tensor:
    """
    Sinusoidal encoding of relative coordinates.

    Args:
        rel: (..., 3) offsets (dtau, dx, dy)
        frequencies: L

    Returns:
        (..., 3 * 2L) laid out per component and frequency as (sin, cos) pairs
    """
    scales = 2.0 ** torch.arange(frequencies, dtype=rel.dtype, device=rel.device)
    angles = rel.unsqueeze(-1) * scales  # (..., 3, L)
    return torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).flatten(-3)


class PositionalBias(nn.Module):
    """
    Scalar attention bias per query-key pair from its relative offset.

    ``cosine`` uses the fixed sinusoidal encoding; ``learnable`` uses
    Fourier features ``sin(rel @ B + phi)`` of the same width, initialized
    to reproduce the fixed encoding. One bias-free linear projection is
    shared by all time slices; a constant logit shift would cancel in the
    softmax.
    """

    def __init__(self, frequencies: int = 10, kind: str = 'cosine'):
        super().__init__()
        if kind not in ('cosine', 'learnable'):
            raise ValueError(f"unknown positional encoding: {kind}")
        self.frequencies = frequencies
        self.kind = kind
        width = 3 * 2 * frequencies
        if kind == 'learnable':
            basis = torch.zeros(3, 3, frequencies, 2)
            for c in range(3):
                basis[c, c] = (2.0 ** torch.arange(frequencies, dtype=torch.float32)).unsqueeze(-1)
            phase = torch.tensor([0.0, math.pi / 2]).repeat(3 * frequencies)
            self.basis = nn.Parameter(basis.reshape(3, width))
            self.phase = nn.Parameter(phase)
        self.project = nn.Linear(width, 1, bias=False)

    @property
    def width(self) -> int:
        return 3 * 2 * self.frequencies

    def encode(self, rel: torch.Tensor) -> torch.Tensor:
        if self.kind == 'cosine':
            return cosine_encoding(rel, self.frequencies)
        return torch.sin(rel @ self.basis.to(rel.dtype) + self.phase.to(rel.dtype))

    def forward(self, rel: torch.Tensor) -> torch.Tensor:
        """(..., 3) -> (...,) scalar biases."""
        return self.project(self.encode(rel)).squeeze(-1)


def positional_bias(module: PositionalBias, rel: torch.Tensor) -> torch.Tensor:
    return module(rel)


def relative_coordinates(target: float, slice_time: float, spacing: float, query_y: torch.Tensor,
                         query_x: torch.Tensor, key_y: torch.Tensor, key_x: torch.Tensor,
                         grid: LocalGridConfig) -> torch.Tensor:
    """
    Normalized (dtau, dx, dy) from each query to each of its keys.

    dtau is scaled by the temporal window T_G * spacing, dx and dy by the
    spatial half extents W_G / 2 and H_G / 2.

    Returns:
        (P, G, 3)
    """
    dtype = query_y.dtype
    dy = (key_y.to(dtype) - query_y.unsqueeze(1)) / (grid.h_g / 2)
    dx = (key_x.to(dtype) - query_x.unsqueeze(1)) / (grid.w_g / 2)
    dtau = torch.full_like(dy, (slice_time - target) / (grid.t_g * spacing))
    return torch.stack([dtau, dx, dy], dim=-1)


def local_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, bias: torch.Tensor,
                    return_weights: bool = False):
    """
    Local attention over T_G slices.

    Per slice: softmax(q k^T / sqrt(C) + b) v; slice outputs are concatenated
    along channels.

    Args:
        q: (B, P, C)
        k, v: (B, P, T_G, G, C)
        bias: (B or 1, P, T_G, G)

    Returns:
        (B, P, T_G * C), and the (B, P, T_G, G) attention maps when requested
    """
    AttentionBundle(q, k, v, bias)
    c = q.shape[-1]
    logits = torch.einsum('bpc,bptgc->bptg', q, k) / math.sqrt(c) + bias
    weights = torch.softmax(logits, dim=-1)
    out = torch.einsum('bptg,bptgc->bptc', weights, v)
    out = out.reshape(out.shape[0], out.shape[1], -1)
    if return_weights:
        return out, weights
    return out


class RGBDecoder(nn.Module):
    """MLP with GELU activations mapping decoder inputs to RGB."""

    def __init__(self, in_dim: int, hidden: Sequence[int] = (256, 256, 256, 256)):
        super().__init__()
        layers: List[nn.Module] = []
        last = in_dim
        for width in hidden:
            layers += [nn.Linear(last, width), nn.GELU()]
            last = width
        layers.append(nn.Linear(last, 3))
        self.layers = nn.Sequential(*layers)
        self.in_dim = in_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"decoder expects {self.in_dim} input features, got {x.shape[-1]}")
        return self.layers(x)


def decode_rgb(decoder: RGBDecoder, z: torch.Tensor, q: Optional[torch.Tensor] = None,
               cell: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Decode concat(Z, q, cell) per query to 3 values."""
    parts = [z]
    if q is not None:
        parts.append(q)
    if cell is not None:
        parts.append(cell.expand(*z.shape[:-1], cell.shape[-1]))
    return decoder(torch.cat(parts, dim=-1))


class LocalVideoTransformer(nn.Module):
    """Continuous space-time decoder over a feature sequence."""

    def __init__(self, in_channels: int, grid: LocalGridConfig, pos_encoding: str = 'cosine',
                 attention: str = 'cross_scale', mlp_hidden: Sequence[int] = (256, 256, 256, 256),
                 cell_decode: bool = True, prev_query: bool = True, query_chunk: int = 0):
        super().__init__()
        grid.validate()
        if attention not in ('cross_scale', 'neighborhood'):
            raise ValueError(f"unknown attention variant: {attention}")
        self.grid = grid
        self.attention = attention
        self.cell_decode = cell_decode
        self.prev_query = prev_query
        self.query_chunk = query_chunk
        c = grid.channels
        self.embed = KQVEmbedding(in_channels, c)
        self.bias = PositionalBias(grid.frequencies, pos_encoding)
        in_dim = grid.t_g * c + (c if prev_query else 0) + (3 if cell_decode else 0)
        self.decoder = RGBDecoder(in_dim, mlp_hidden)

    def _query(self, q_volume, target, s, positions, selected):
        if self.attention == 'cross_scale':
            return sample_query(q_volume, target, s, None, positions=positions)
        h, w = q_volume.shape[-2:]
        # nearest LR pixel of the nearest selected slice
        nearest = selected[np.argmin(np.abs(selected / (q_volume.shape[1] - 1) - target))]
        index = nearest_lr_index(positions[0], h) * w + nearest_lr_index(positions[1], w)
        return q_volume[:, int(nearest)].flatten(2).transpose(1, 2)[:, index]

    def render_frame(self, volumes, timestamps: np.ndarray, target: float, query: QuerySpec,
                     lr_size: Tuple[int, int]) -> torch.Tensor:
        """
        Render one target time.

        Returns:
            (B, 3, oh, ow)
        """
        k_volume, q_volume, v_volume = volumes
        h, w = lr_size
        oh, ow = query.output_size(h, w)
        ys, xs = _query_grid((oh, ow), query.s, q_volume)
        spacing = 1.0 / max(len(timestamps) - 1, 1)
        selected = select_timestamps(target, timestamps, self.grid.t_g)
        cell = None
        if self.cell_decode:
            c = query.cell(h, w)
            cell = torch.tensor([c[0] * h, c[1] * w, c[2]], dtype=q_volume.dtype, device=q_volume.device)

        total = oh * ow
        chunk = self.query_chunk if self.query_chunk > 0 else total
        pieces = []
        for start in range(0, total, chunk):
            positions = (ys[start:start + chunk], xs[start:start + chunk])
            q = self._query(q_volume, target, query.s, positions, selected)
            keys, values, biases = [], [], []
            for index in selected:
                k, v, (key_y, key_x) = sample_local_kv(k_volume, v_volume, int(index), query.s,
                                                       self.grid.h_g, self.grid.w_g, None,
                                                       positions=positions)
                rel = relative_coordinates(target, float(timestamps[index]), spacing, positions[0],
                                           positions[1], key_y, key_x, self.grid)
                keys.append(k)
                values.append(v)
                biases.append(self.bias(rel))
            z = local_attention(q, torch.stack(keys, dim=2), torch.stack(values, dim=2),
                                torch.stack(biases, dim=1).unsqueeze(0))
            pieces.append(decode_rgb(self.decoder, z, q if self.prev_query else None, cell))
        rgb = torch.cat(pieces, dim=1)
        return rgb.transpose(1, 2).reshape(rgb.shape[0], 3, oh, ow)

    def forward(self, seq: FeatureSequence, query: QuerySpec) -> torch.Tensor:
        """
        Render every target time of ``query``.

        Returns:
            (B, len(query), 3, oh, ow)
        """
        self.grid.validate(len(seq))
        volumes = self.embed(seq.maps)
        lr_size = seq.maps.shape[-2:]
        frames = [self.render_frame(volumes, seq.timestamps, float(target), query, lr_size)
                  for target in query.target_timestamps]
        return torch.stack(frames, dim=1)


def render(model: LocalVideoTransformer, seq: FeatureSequence, query: QuerySpec) -> torch.Tensor:
    return model(seq, query)
