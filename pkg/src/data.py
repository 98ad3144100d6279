"""
Data module for the space-time enhancer.

Builds training and evaluation samples from frame sequences, applies
geometric augmentation consistently across frames and voxel grids, and
persists predictions and checkpoints.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.image as mpimg
import matplotlib.pyplot as plt
import numpy as np
import torch

from .events import EventStream, VoxelGrid, simulate_events, voxelize_clip
from .resample import bicubic_resize_frames

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class TrainingSample:
    """
    One clip: LR endpoint frames, LR forward/backward voxels and t + 1 GT frames.

    Frames are channel-last float arrays in [0, 1]; voxels are bins-first.
    """
    lr_pair: np.ndarray
    voxel_fwd: VoxelGrid
    voxel_bwd: VoxelGrid
    gt: np.ndarray
    scales: Tuple[float, int]

    def __post_init__(self):
        s, t = self.scales
        if self.lr_pair.shape[0] != 2:
            raise ValueError(f"lr_pair must hold 2 frames, got {self.lr_pair.shape[0]}")
        if self.gt.shape[0] != t + 1:
            raise ValueError(f"gt must hold t + 1 = {t + 1} frames, got {self.gt.shape[0]}")
        if self.voxel_fwd.shape[1:] != self.lr_pair.shape[1:3]:
            raise ValueError("voxel spatial size must match the LR frame size")


@dataclass(frozen=True)
class ClipIndex:
    """Location of a clip inside a sequence."""
    sequence_id: int
    start: int
    stride: int = 1

    def check(self, length: int, t: int) -> None:
        if self.start < 0 or self.start + t * self.stride >= length:
            raise IndexError(f"clip start {self.start} + {t} frames exceeds sequence {self.sequence_id} "
                             f"of {length} frames")


@dataclass(frozen=True)
class AugmentParams:
    """LR crop offset, quarter turns and horizontal flip."""
    y0: int
    x0: int
    crop: int
    rotations: int
    flip: bool


def sample_clip(frames: np.ndarray, t: int, s: float, start: int = 0, num_segments: int = 7,
                events: Optional[EventStream] = None, threshold: float = 0.15,
                log_eps: float = 1e-3, stride: int = 1) -> TrainingSample:
    """
    Cut a (t + 1)-frame clip and build its network inputs.

    Args:
        frames: (N, H, W, 3) sequence in [0, 1]
        t: Temporal scale >= 1
        s: Spatial scale >= 1
        start: First frame of the clip
        num_segments: M
        events: Optional stream over the clip; simulated when absent
        threshold, log_eps: Simulator settings
        stride: Frame step inside the sequence

    Returns:
        TrainingSample
    """
    if t < 1:
        raise ValueError(f"temporal scale t must be >= 1, got {t}")
    if s < 1:
        raise ValueError(f"spatial scale s must be >= 1, got {s}")
    frames = np.asarray(frames, dtype=np.float64)
    ClipIndex(0, start, stride).check(len(frames), t)

    clip = frames[start:start + t * stride + 1:stride]
    height, width = clip.shape[1:3]
    if events is None:
        events = simulate_events(clip, threshold=threshold, log_eps=log_eps)
    voxel_fwd, voxel_bwd = voxelize_clip(events, (height, width), num_segments, scale=s)
    lr_pair = bicubic_resize_frames(clip[[0, -1]], s)
    return TrainingSample(lr_pair=np.clip(lr_pair, 0.0, 1.0), voxel_fwd=voxel_fwd,
                          voxel_bwd=voxel_bwd, gt=clip.copy(), scales=(s, t))


def _offset_step(s: float) -> int:
    return Fraction(s).limit_denominator(16).denominator


def draw_augment_params(sample: TrainingSample, rng_seed: int, crop: int = 32) -> AugmentParams:
    """Draw the crop window, rotation and flip for a sample from a seed."""
    h, w = sample.lr_pair.shape[1:3]
    if h < crop or w < crop:
        raise ValueError(f"LR size {h}x{w} is smaller than the {crop}x{crop} crop")
    s = sample.scales[0]
    step = _offset_step(s)
    rng = np.random.default_rng(rng_seed)
    y0 = int(rng.integers(0, (h - crop) // step + 1)) * step
    x0 = int(rng.integers(0, (w - crop) // step + 1)) * step
    rotations = int(rng.integers(0, 4))
    flip = bool(rng.random() < 0.5)
    return AugmentParams(y0=y0, x0=x0, crop=crop, rotations=rotations, flip=flip)


def rotate_flip(array: np.ndarray, rotations: int, flip: bool, axes: Tuple[int, int]) -> np.ndarray:
    """Horizontal flip (optional) followed by ``rotations`` quarter turns in the given plane."""
    if flip:
        array = np.flip(array, axis=axes[1])
    return np.ascontiguousarray(np.rot90(array, k=rotations, axes=axes))


def apply_augment(sample: TrainingSample, params: AugmentParams) -> TrainingSample:
    """Apply one crop window and one geometric transform to every tensor of a sample."""
    s = sample.scales[0]
    crop, y0, x0 = params.crop, params.y0, params.x0
    gy, gx, gcrop = int(round(y0 * s)), int(round(x0 * s)), int(round(crop * s))

    lr = sample.lr_pair[:, y0:y0 + crop, x0:x0 + crop]
    fwd = sample.voxel_fwd.data[:, y0:y0 + crop, x0:x0 + crop]
    bwd = sample.voxel_bwd.data[:, y0:y0 + crop, x0:x0 + crop]
    gt = sample.gt[:, gy:gy + gcrop, gx:gx + gcrop]

    k, flip = params.rotations, params.flip
    return TrainingSample(
        lr_pair=rotate_flip(lr, k, flip, (1, 2)),
        voxel_fwd=VoxelGrid(rotate_flip(fwd, k, flip, (1, 2))),
        voxel_bwd=VoxelGrid(rotate_flip(bwd, k, flip, (1, 2))),
        gt=rotate_flip(gt, k, flip, (1, 2)),
        scales=sample.scales,
    )


def geometric_transform(sample: TrainingSample, rotations: int, flip: bool) -> TrainingSample:
    """Rotate/flip a whole sample without cropping."""
    return replace(
        sample,
        lr_pair=rotate_flip(sample.lr_pair, rotations, flip, (1, 2)),
        voxel_fwd=VoxelGrid(rotate_flip(sample.voxel_fwd.data, rotations, flip, (1, 2))),
        voxel_bwd=VoxelGrid(rotate_flip(sample.voxel_bwd.data, rotations, flip, (1, 2))),
        gt=rotate_flip(sample.gt, rotations, flip, (1, 2)),
    )


def augment(sample: TrainingSample, rng_seed: int, crop: int = 32) -> TrainingSample:
    """Random crop, quarter-turn rotation and horizontal flip, identical across all tensors."""
    return apply_augment(sample, draw_augment_params(sample, rng_seed, crop))


def sample_seed(base_seed: int, epoch: int, index: int) -> int:
    """Per-sample seed derived deterministically from (epoch, index)."""
    return int(np.random.SeedSequence([base_seed, epoch, index]).generate_state(1)[0])


def collate(samples: Sequence[TrainingSample]) -> Dict[str, torch.Tensor]:
    """
    Stack samples into network tensors.

    Returns:
        Dictionary with ``lr`` (B, 2, 3, h, w), ``voxel_fwd`` / ``voxel_bwd``
        (B, M+1, h, w) and ``gt`` (B, t+1, 3, H, W), all float32
    """
    def frames(key):
        return torch.from_numpy(np.stack([getattr(x, key) for x in samples])).permute(0, 1, 4, 2, 3).float()

    def voxels(key):
        return torch.from_numpy(np.stack([getattr(x, key).data for x in samples])).float()

    return {
        'lr': frames('lr_pair').contiguous(),
        'voxel_fwd': voxels('voxel_fwd'),
        'voxel_bwd': voxels('voxel_bwd'),
        'gt': frames('gt').contiguous(),
    }


class ClipDataset:
    """Handles clip sampling from a set of frame sequences."""

    def __init__(self, sequences: Sequence[np.ndarray], num_segments: int, t: int = 8,
                 crop: int = 32, augment: bool = True, threshold: float = 0.15,
                 log_eps: float = 1e-3, seed: int = 1234, workers: int = 0):
        self.sequences = [np.asarray(seq, dtype=np.float64) for seq in sequences]
        self.num_segments = num_segments
        self.t = t
        self.crop = crop
        self.augment = augment
        self.threshold = threshold
        self.log_eps = log_eps
        self.seed = seed
        self.workers = workers
        self._cache: Dict[Tuple[int, int, float], TrainingSample] = {}

        usable = [i for i, seq in enumerate(self.sequences) if len(seq) >= t + 1]
        if not usable:
            raise ValueError(f"no sequence holds the {t + 1} frames a clip needs")
        self.clips = [ClipIndex(i, start) for i in usable
                      for start in range(len(self.sequences[i]) - t)]
        logger.info(f"Clip dataset: {len(self.sequences)} sequences, {len(self.clips)} clips of {t + 1} frames")

    def __len__(self) -> int:
        return len(self.clips)

    def hold_out(self) -> ClipIndex:
        """Remove the last clip from the training pool and return it."""
        if len(self.clips) < 2:
            raise ValueError("holding out a clip needs at least two clips")
        return self.clips.pop()

    def base_sample(self, clip: ClipIndex, s: float) -> TrainingSample:
        """Unaugmented sample, cached per (sequence, start, scale)."""
        key = (clip.sequence_id, clip.start, float(s))
        if key not in self._cache:
            self._cache[key] = sample_clip(self.sequences[clip.sequence_id], self.t, s, clip.start,
                                           num_segments=self.num_segments, threshold=self.threshold,
                                           log_eps=self.log_eps, stride=clip.stride)
        return self._cache[key]

    def get(self, epoch: int, index: int, s: float) -> TrainingSample:
        """Sample ``index`` of ``epoch``; clip choice and augmentation follow the derived seed."""
        seed = sample_seed(self.seed, epoch, index)
        clip = self.clips[seed % len(self.clips)]
        sample = self.base_sample(clip, s)
        if not self.augment:
            return sample
        h, w = sample.lr_pair.shape[1:3]
        crop = min(self.crop, h, w)
        return augment(sample, seed, crop=crop)

    def batch(self, epoch: int, step: int, batch_size: int, s: float) -> Dict[str, torch.Tensor]:
        """Collated batch for one optimization step."""
        indices = [step * batch_size + i for i in range(batch_size)]
        if self.workers > 0:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                samples = list(pool.map(lambda i: self.get(epoch, i, s), indices))
        else:
            samples = [self.get(epoch, i, s) for i in indices]
        return collate(samples)


def moving_square_sequence(num_frames: int = 9, height: int = 64, width: int = 64,
                           square: int = 16, step: int = 2, background: float = 0.1,
                           foreground: float = 0.9) -> np.ndarray:
    """
    Synthetic sequence of a textured bright square translating horizontally.

    Returns:
        (num_frames, H, W, 3) float array in [0, 1]
    """
    yy, xx = np.mgrid[0:height, 0:width]
    frames = np.full((num_frames, height, width, 3), background, dtype=np.float64)
    top = (height - square) // 2
    for i in range(num_frames):
        left = 2 + i * step
        inside = (yy >= top) & (yy < top + square) & (xx >= left) & (xx < left + square)
        texture = 0.08 * np.sin(0.7 * (xx - left)) * np.cos(0.5 * (yy - top))
        for c, tint in enumerate((1.0, 0.8, 0.6)):
            frames[i, ..., c] = np.where(inside, foreground * tint + texture, background)
    return np.clip(frames, 0.0, 1.0)


def _read_png(path: Path) -> np.ndarray:
    image = np.asarray(mpimg.imread(path))
    if image.dtype.kind in 'ui':
        image = image / np.iinfo(image.dtype).max
    image = image.astype(np.float64)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=-1)
    return image[..., :3]


def load_frames(frames_dir: Union[str, Path]) -> np.ndarray:
    """
    Read the ordered PNG frames of one sequence directory.

    Returns:
        (N, H, W, 3) float array in [0, 1]
    """
    frames_dir = Path(frames_dir)
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"frame directory not found: {frames_dir}")
    paths = sorted(frames_dir.glob('*.png'))
    if not paths:
        raise FileNotFoundError(f"no PNG frames in {frames_dir}")
    try:
        frames = [_read_png(p) for p in paths]
    except (OSError, ValueError) as e:
        raise OSError(f"could not read frames from {frames_dir}: {e}") from e
    if any(f.shape != frames[0].shape for f in frames):
        raise ValueError(f"frames in {frames_dir} differ in size")
    logger.info(f"Loaded {len(frames)} frames of {frames[0].shape[1]}x{frames[0].shape[0]} from {frames_dir}")
    return np.stack(frames)


def load_sequences(root: Union[str, Path]) -> List[np.ndarray]:
    """A directory of PNGs is one sequence; a directory of directories is many."""
    root = Path(root)
    subdirs = sorted(d for d in root.iterdir() if d.is_dir()) if root.is_dir() else []
    if subdirs:
        return [load_frames(d) for d in subdirs if any(d.glob('*.png'))]
    return [load_frames(root)]


def quantize_frame(frame: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round to 8 bits."""
    return np.rint(np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_prediction(frames: Union[np.ndarray, torch.Tensor], path: Union[str, Path],
                    prefix: str = 'frame') -> List[Path]:
    """
    Save frames as 8-bit PNGs.

    Args:
        frames: (N, H, W, 3) array or (N, 3, H, W) tensor, values in [0, 1]
        path: Output directory
        prefix: File name prefix

    Returns:
        List of written paths, in frame order
    """
    if isinstance(frames, torch.Tensor):
        frames = frames.detach().cpu().permute(0, 2, 3, 1).double().numpy()
    out_dir = Path(path)
    saved = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(frames):
            file_path = out_dir / f"{prefix}_{i:04d}.png"
            plt.imsave(file_path, quantize_frame(frame))
            saved.append(file_path)
    except OSError as e:
        raise OSError(f"could not write frames to {out_dir}: {e}") from e
    logger.info(f"Saved {len(saved)} frames to {out_dir}")
    return saved


def save_checkpoint(path: Union[str, Path], model: torch.nn.Module,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    settings: Optional[Dict] = None, stage: int = 0, step: int = 0,
                    best_psnr: Optional[float] = None) -> Path:
    """Write the checkpoint container."""
    path = Path(path)
    payload = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'model': model.state_dict(),
        'optimizer': optimizer.state_dict() if optimizer is not None else None,
        'settings': dict(settings or {}),
        'stage': stage,
        'step': step,
        'best_psnr': best_psnr,
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except (OSError, RuntimeError) as e:
        raise OSError(f"could not write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint: {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict:
    """Read a checkpoint container written by save_checkpoint."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location='cpu', weights_only=False)
    except (OSError, RuntimeError, EOFError) as e:
        raise OSError(f"could not read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get('format_version') != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path} is not a checkpoint of format version {CHECKPOINT_FORMAT_VERSION}")
    return payload


def iter_clip_starts(length: int, t: int) -> Iterator[int]:
    """Non-overlapping clip starts (sharing endpoints) for evaluation."""
    start = 0
    while start + t < length:
        yield start
        start += t
