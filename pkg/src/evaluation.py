"""
Evaluation module: Y-channel PSNR/SSIM and diagnostic images.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import torch
from skimage.metrics import structural_similarity

logger = logging.getLogger(__name__)

BT601_Y = np.array([0.299, 0.587, 0.114])
PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def as_frames(frames: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
    """float64 channel-last frames from an array or a (..., 3, H, W) tensor."""
    if isinstance(frames, torch.Tensor):
        return frames.detach().cpu().double().movedim(-3, -1).numpy()
    return np.asarray(frames, dtype=np.float64)


def rgb_to_y(frames: np.ndarray) -> np.ndarray:
    """Full-range BT.601 luma of channel-last RGB values."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != 3:
        raise ValueError(f"expected channel-last RGB, got shape {frames.shape}")
    return frames @ BT601_Y


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")


def psnr_y(pred: np.ndarray, gt: np.ndarray, cap: Optional[float] = PSNR_CAP) -> float:
    """
    PSNR on the Y channel for values in [0, 1].

    Identical inputs give +inf, or ``cap`` when a cap is set.
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _check_pair(pred, gt)
    mse = float(np.mean((rgb_to_y(pred) - rgb_to_y(gt)) ** 2))
    value = math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)
    return min(value, cap) if cap is not None else value


def ssim_y(pred: np.ndarray, gt: np.ndarray) -> float:
    """Single-scale SSIM on Y with an 11x11 Gaussian window (sigma 1.5)."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _check_pair(pred, gt)
    y_pred, y_gt = rgb_to_y(pred), rgb_to_y(gt)
    if min(y_pred.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got "
                         f"{y_pred.shape[1]}x{y_pred.shape[0]}")
    return float(structural_similarity(y_pred, y_gt, data_range=1.0, gaussian_weights=True,
                                       sigma=SSIM_SIGMA, use_sample_covariance=False,
                                       win_size=SSIM_WINDOW))


def center_indices(count: int) -> List[int]:
    """First, middle and last frame indices."""
    return sorted({0, count // 2, count - 1})


@dataclass
class MetricReport:
    """Per-frame PSNR/SSIM with Center and Average protocol means."""
    psnr: List[float]
    ssim: List[float]
    name: str = 'sequence'
    center: List[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.psnr) != len(self.ssim):
            raise ValueError("PSNR and SSIM lists differ in length")
        if not self.center:
            self.center = center_indices(len(self.psnr))

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def center_psnr(self) -> float:
        return float(np.mean([self.psnr[i] for i in self.center]))

    @property
    def center_ssim(self) -> float:
        return float(np.mean([self.ssim[i] for i in self.center]))

    def protocol(self, name: str) -> Dict[str, float]:
        if name == 'center':
            return {'psnr': self.center_psnr, 'ssim': self.center_ssim}
        if name == 'average':
            return {'psnr': self.psnr_mean, 'ssim': self.ssim_mean}
        raise ValueError(f"unknown protocol: {name}")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'sequence': self.name,
            'frame': range(len(self.psnr)),
            'psnr_y': self.psnr,
            'ssim_y': self.ssim,
            'center': [i in self.center for i in range(len(self.psnr))],
        })

    def summary(self) -> Dict[str, Union[str, float, int]]:
        return {
            'sequence': self.name,
            'frames': len(self.psnr),
            'center_psnr': self.center_psnr,
            'center_ssim': self.center_ssim,
            'average_psnr': self.psnr_mean,
            'average_ssim': self.ssim_mean,
        }


def evaluate_sequence(pred, gt, name: str = 'sequence', with_ssim: bool = True) -> MetricReport:
    """
    Score predicted frames against ground truth.

    Args:
        pred, gt: (N, H, W, 3) arrays or (N, 3, H, W) tensors in [0, 1]
        name: Sequence label
        with_ssim: SSIM is skipped (reported as NaN) when False

    Returns:
        MetricReport
    """
    pred, gt = as_frames(pred), as_frames(gt)
    _check_pair(pred, gt)
    psnr = [psnr_y(p, g) for p, g in zip(pred, gt)]
    ssim = [ssim_y(p, g) if with_ssim else float('nan') for p, g in zip(pred, gt)]
    report = MetricReport(psnr=psnr, ssim=ssim, name=name)
    logger.debug(f"{name}: average PSNR {report.psnr_mean:.2f} dB over {len(psnr)} frames")
    return report


def temporal_profile(frames, axis: str = 'row', index: int = 0) -> np.ndarray:
    """
    Stack one row (or column) of every frame, ordered by time.

    Returns:
        (N, W, ...) for a row profile, (N, H, ...) for a column profile
    """
    frames = as_frames(frames)
    if len(frames) < 2:
        raise ValueError(f"a temporal profile needs at least 2 frames, got {len(frames)}")
    if axis not in ('row', 'col'):
        raise ValueError(f"profile axis must be 'row' or 'col', got {axis!r}")
    extent = frames.shape[1] if axis == 'row' else frames.shape[2]
    if not 0 <= index < extent:
        raise IndexError(f"{axis} index {index} out of bounds for size {extent}")
    return frames[:, index] if axis == 'row' else frames[:, :, index]


def difference_map(pred, gt) -> np.ndarray:
    """
    Absolute difference, averaged over channels and max-normalized per frame.

    Returns:
        (N, H, W) in [0, 1]; frames without error stay zero
    """
    pred, gt = as_frames(pred), as_frames(gt)
    _check_pair(pred, gt)
    diff = np.abs(pred - gt).mean(axis=-1)
    peak = diff.reshape(len(diff), -1).max(axis=1).reshape(-1, 1, 1)
    return np.divide(diff, peak, out=np.zeros_like(diff), where=peak > 0)


def save_profile_png(profile: np.ndarray, path: Union[str, Path]) -> Path:
    """Write a temporal profile as an 8-bit PNG, one row per frame."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image = np.clip(profile, 0.0, 1.0)
    if image.ndim == 2:
        plt.imsave(path, image, cmap='gray', vmin=0.0, vmax=1.0)
    else:
        plt.imsave(path, np.rint(image * 255).astype(np.uint8))
    return path


def save_difference_png(diff: np.ndarray, path: Union[str, Path], cmap: str = 'inferno') -> Path:
    """Write one normalized difference map as a PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(path, np.clip(diff, 0.0, 1.0), cmap=cmap, vmin=0.0, vmax=1.0)
    return path


def save_diagnostics(pred, gt, out_dir: Union[str, Path], rows: Sequence[int] = (),
                     cols: Sequence[int] = ()) -> List[Path]:
    """Profiles of the given rows/columns (middle row by default) for pred and GT, plus difference maps."""
    pred, gt = as_frames(pred), as_frames(gt)
    out_dir = Path(out_dir)
    if not rows and not cols:
        rows = (pred.shape[1] // 2,)
    saved = []
    for axis, indices in (('row', rows), ('col', cols)):
        for index in indices:
            for label, frames in (('pred', pred), ('gt', gt)):
                profile = temporal_profile(frames, axis, index)
                saved.append(save_profile_png(profile, out_dir / f"profile_{axis}{index:04d}_{label}.png"))
    for i, diff in enumerate(difference_map(pred, gt)):
        saved.append(save_difference_png(diff, out_dir / f"diff_{i:04d}.png"))
    logger.info(f"Saved {len(saved)} diagnostic images to {out_dir}")
    return saved
