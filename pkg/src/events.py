"""
Event stream module.

Represents asynchronous brightness-change records, simulates them from frame
sequences, bins them into voxel grids and slices those grids into the event
segments consumed by the network. Every function here is pure.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from .config import ConfigError
from .resample import bicubic_resize

logger = logging.getLogger(__name__)

# Timestamps live on a dyadic lattice of the inter-frame interval. Every
# lattice value is exact in float64 and in decimal text, and t -> 1 - t is
# exact, so reversal is an involution and voxel sums are exact.
TIME_RESOLUTION = 2 ** 20

BT601 = np.array([0.299, 0.587, 0.114])

_VOXEL_MAGIC = 'EVVOXEL1'


class EventRangeError(ValueError):
    """An event record lies outside the sensor or carries invalid fields."""

    def __init__(self, index: int, message: str):
        super().__init__(f"event record {index}: {message}")
        self.index = index


@dataclass(frozen=True)
class EventRecord:
    """A single event (t, x, y, p)."""
    t: float
    x: int
    y: int
    p: int


class EventStream:
    """
    Ordered set of events.

    Records are kept in canonical order: ascending time, then row, column
    and polarity. Timestamps are stored as integer ticks of
    ``1 / TIME_RESOLUTION``.
    """

    def __init__(self, ticks: Iterable[int], x: Iterable[int], y: Iterable[int], p: Iterable[int]):
        ticks = np.asarray(ticks, dtype=np.int64).reshape(-1)
        x = np.asarray(x, dtype=np.int64).reshape(-1)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        p = np.asarray(p, dtype=np.int64).reshape(-1)
        if not (len(ticks) == len(x) == len(y) == len(p)):
            raise ValueError("event field arrays differ in length")

        bad_t = np.flatnonzero((ticks < 0) | (ticks > TIME_RESOLUTION))
        if bad_t.size:
            i = int(bad_t[0])
            raise EventRangeError(i, f"timestamp {ticks[i] / TIME_RESOLUTION} outside [0, 1]")
        bad_p = np.flatnonzero((p != 1) & (p != -1))
        if bad_p.size:
            i = int(bad_p[0])
            raise EventRangeError(i, f"polarity {p[i]} not in {{-1, +1}}")
        bad_xy = np.flatnonzero((x < 0) | (y < 0))
        if bad_xy.size:
            i = int(bad_xy[0])
            raise EventRangeError(i, f"negative coordinate ({x[i]}, {y[i]})")

        order = np.lexsort((p, x, y, ticks))
        self.ticks = ticks[order]
        self.x = x[order]
        self.y = y[order]
        self.p = p[order]

    @classmethod
    def empty(cls) -> 'EventStream':
        return cls([], [], [], [])

    @classmethod
    def from_records(cls, records: Iterable[Union[EventRecord, Tuple[float, int, int, int]]]) -> 'EventStream':
        """Build a stream from (t, x, y, p) records with real t in [0, 1]."""
        rows = [tuple(r) if not isinstance(r, EventRecord) else (r.t, r.x, r.y, r.p) for r in records]
        if not rows:
            return cls.empty()
        t, x, y, p = (np.asarray(col) for col in zip(*rows))
        return cls(quantize_time(t), x, y, p)

    @property
    def t(self) -> np.ndarray:
        """Normalized timestamps in [0, 1]."""
        return self.ticks / TIME_RESOLUTION

    def __len__(self) -> int:
        return len(self.ticks)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (np.array_equal(self.ticks, other.ticks) and np.array_equal(self.x, other.x)
                and np.array_equal(self.y, other.y) and np.array_equal(self.p, other.p))

    def __repr__(self) -> str:
        return f"EventStream({len(self)} events)"

    def records(self) -> list:
        return [EventRecord(float(t), int(x), int(y), int(p))
                for t, x, y, p in zip(self.t, self.x, self.y, self.p)]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'t': self.t, 'x': self.x, 'y': self.y, 'p': self.p})

    def check_bounds(self, height: int, width: int) -> None:
        """Raise EventRangeError naming the first record outside an H x W sensor."""
        bad = np.flatnonzero((self.x >= width) | (self.y >= height))
        if bad.size:
            i = int(bad[0])
            raise EventRangeError(i, f"coordinate ({self.x[i]}, {self.y[i]}) outside {width}x{height} sensor")


def quantize_time(t: Union[float, np.ndarray]) -> np.ndarray:
    """Map real timestamps in [0, 1] onto the tick lattice."""
    return np.rint(np.asarray(t, dtype=np.float64) * TIME_RESOLUTION).astype(np.int64)


@dataclass
class VoxelGrid:
    """
    Signed temporal binning of an event stream.

    ``data`` is stored bins-first, shape (M + 1, H, W).
    """
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] < 2:
            raise ValueError(f"voxel data must have shape (M+1, H, W) with M >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("voxel data contains non-finite values")

    @property
    def num_segments(self) -> int:
        return self.data.shape[0] - 1

    @property
    def time_span(self) -> Tuple[float, float]:
        return (0.0, 1.0)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def total_mass(self) -> float:
        return float(self.data.sum())


@dataclass
class EventSegmentStack:
    """M adjacent-bin pairs, each 2 x H x W, with their center timestamps."""
    segments: np.ndarray
    center_timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.segments)


def voxelize(events: EventStream, height: int, width: int, num_segments: int) -> VoxelGrid:
    """
    Bin an event stream into an (M + 1)-bin voxel grid.

    Each event deposits its polarity on the two bins adjacent to ``t * M``
    with weights (1 - frac, frac). ``t = 1`` lands entirely on bin M.

    Args:
        events: Event stream with t in [0, 1]
        height, width: Sensor size
        num_segments: M >= 1

    Returns:
        VoxelGrid of shape (M + 1, H, W)
    """
    if num_segments < 1:
        raise ConfigError(f"number of segments must be >= 1, got {num_segments}")
    events.check_bounds(height, width)

    bins = num_segments + 1
    grid = np.zeros((bins, height, width), dtype=np.float64)
    if len(events) == 0:
        return VoxelGrid(grid)

    position = events.t * num_segments
    left = np.floor(position).astype(np.int64)
    frac = position - left
    polarity = events.p.astype(np.float64)

    np.add.at(grid, (left, events.y, events.x), polarity * (1.0 - frac))
    right = left + 1
    spill = right < bins
    np.add.at(grid, (right[spill], events.y[spill], events.x[spill]), polarity[spill] * frac[spill])
    return VoxelGrid(grid)


def slice_segments(voxel: VoxelGrid) -> EventSegmentStack:
    """Segment m (1..M) is the pair of bins (m - 1, m), centered at m / (M + 1)."""
    m = voxel.num_segments
    segments = np.stack([voxel.data[i - 1:i + 1] for i in range(1, m + 1)], axis=0)
    centers = np.arange(1, m + 1, dtype=np.float64) / (m + 1)
    return EventSegmentStack(segments=segments, center_timestamps=centers)


def split_segments(voxel: torch.Tensor) -> torch.Tensor:
    """Batched torch form of slice_segments: (B, M+1, H, W) -> (B, M, 2, H, W)."""
    return torch.stack([voxel[:, i - 1:i + 1] for i in range(1, voxel.shape[1])], dim=1)


def reverse(events: EventStream) -> EventStream:
    """Reverse time and polarity: (t, x, y, p) -> (1 - t, x, y, -p)."""
    return EventStream(TIME_RESOLUTION - events.ticks, events.x, events.y, -events.p)


def reverse_voxel(voxel: Union[VoxelGrid, torch.Tensor, np.ndarray]):
    """Voxel-level reversal: flip the bin order and negate."""
    if isinstance(voxel, VoxelGrid):
        return VoxelGrid(-voxel.data[::-1].copy())
    if isinstance(voxel, torch.Tensor):
        return -torch.flip(voxel, dims=[-3])
    return -np.asarray(voxel)[..., ::-1, :, :].copy()


def to_gray(frames: np.ndarray) -> np.ndarray:
    """BT.601 luma of channel-last RGB frames; 2-D frames pass through."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3 and frames.shape[-1] == 3:
        return frames @ BT601
    return frames


def simulate_events(frames: Sequence[np.ndarray], threshold: float = 0.15,
                    log_eps: float = 1e-3, crossing_tolerance: float = 1e-9) -> EventStream:
    """
    Threshold-crossing event simulator.

    Frames are spread uniformly over [0, 1]. Per pixel, log intensity
    ``L = log(gray + log_eps)`` is linearly interpolated between consecutive
    frames; every crossing of a multiple of ``threshold`` relative to the
    last emission level emits one event at the interpolated time.

    Args:
        frames: >= 2 frames of equal size, (H, W) gray or (H, W, 3) RGB in [0, 1]
        threshold: Contrast threshold > 0
        log_eps: Log guard
        crossing_tolerance: Slack (in thresholds) when counting crossings

    Returns:
        EventStream sorted by time
    """
    if threshold <= 0:
        raise ConfigError(f"simulator threshold must be positive, got {threshold}")
    frames = [np.asarray(f) for f in frames]
    if len(frames) < 2:
        raise ValueError(f"event simulation needs at least 2 frames, got {len(frames)}")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ValueError("event simulation needs frames of identical size")

    logs = [np.log(to_gray(f) + log_eps) for f in frames]
    height, width = logs[0].shape
    ys, xs = np.mgrid[0:height, 0:width]
    span = len(frames) - 1

    reference = logs[0].copy()
    chunks = []
    for i in range(span):
        start, end = logs[i], logs[i + 1]
        delta = end - start
        for sign in (1, -1):
            count = np.floor(sign * (end - reference) / threshold + crossing_tolerance).astype(np.int64)
            count = np.maximum(count, 0)
            for k in range(1, int(count.max(initial=0)) + 1):
                hit = count >= k
                level = reference[hit] + sign * k * threshold
                with np.errstate(divide='ignore', invalid='ignore'):
                    frac = np.where(delta[hit] != 0, (level - start[hit]) / delta[hit], 1.0)
                frac = np.clip(frac, 0.0, 1.0)
                chunks.append((quantize_time((i + frac) / span), xs[hit], ys[hit],
                               np.full(int(hit.sum()), sign)))
            reference = np.where(count > 0, reference + sign * count * threshold, reference)

    if not chunks:
        return EventStream.empty()
    ticks, x, y, p = (np.concatenate(parts) for parts in zip(*chunks))
    stream = EventStream(ticks, x, y, p)
    logger.debug(f"Simulated {len(stream)} events over {len(frames)} frames")
    return stream


def downsample_voxel(voxel: VoxelGrid, scale: float) -> VoxelGrid:
    """Bicubic-downsample every temporal bin by ``scale``; the bin count is unchanged."""
    return VoxelGrid(bicubic_resize(voxel.data, scale))


def write_events_csv(events: EventStream, path: Union[str, Path]) -> Path:
    """Write ``t,x,y,p`` CSV; lattice timestamps round-trip exactly."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        events.to_frame().to_csv(path, index=False, float_format=None)
    except OSError as e:
        raise OSError(f"could not write events to {path}: {e}") from e
    logger.info(f"Saved {len(events)} events: {path}")
    return path


def read_events_csv(path: Union[str, Path]) -> EventStream:
    """Read a ``t,x,y,p`` CSV written by write_events_csv."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype={'t': np.float64, 'x': np.int64, 'y': np.int64, 'p': np.int64})
    except FileNotFoundError:
        raise FileNotFoundError(f"event file not found: {path}") from None
    except (OSError, ValueError) as e:
        raise OSError(f"could not read events from {path}: {e}") from e
    missing = {'t', 'x', 'y', 'p'} - set(frame.columns)
    if missing:
        raise ValueError(f"event file {path} lacks columns: {', '.join(sorted(missing))}")
    return EventStream(quantize_time(frame['t'].to_numpy()), frame['x'], frame['y'], frame['p'])


def save_voxel(voxel: VoxelGrid, path: Union[str, Path]) -> Path:
    """Write the voxel container: ASCII shape header then row-major float32 payload."""
    path = Path(path)
    bins, height, width = voxel.shape
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as f:
            f.write(f"{_VOXEL_MAGIC} {bins} {height} {width}\n".encode('ascii'))
            f.write(voxel.data.astype('<f4').tobytes(order='C'))
    except OSError as e:
        raise OSError(f"could not write voxel grid to {path}: {e}") from e
    return path


def load_voxel(path: Union[str, Path]) -> VoxelGrid:
    """Read a voxel container written by save_voxel."""
    path = Path(path)
    try:
        with open(path, 'rb') as f:
            header = f.readline().decode('ascii').split()
            payload = f.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"voxel file not found: {path}") from None
    except OSError as e:
        raise OSError(f"could not read voxel grid from {path}: {e}") from e
    if len(header) != 4 or header[0] != _VOXEL_MAGIC:
        raise ValueError(f"{path} is not a voxel container")
    shape = tuple(int(v) for v in header[1:])
    data = np.frombuffer(payload, dtype='<f4')
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: payload holds {data.size} values, header promises {shape}")
    return VoxelGrid(data.reshape(shape).astype(np.float64))


def voxelize_clip(events: EventStream, size: Tuple[int, int], num_segments: int,
                  scale: float = 1.0) -> Tuple[VoxelGrid, VoxelGrid]:
    """Forward and backward voxel grids, voxelized at ``size`` then downsampled by ``scale``."""
    forward = downsample_voxel(voxelize(events, size[0], size[1], num_segments), scale)
    return forward, reverse_voxel(forward)

