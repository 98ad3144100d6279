"""
Resampling kernels shared by frames, voxel grids and feature maps.

``bicubic_resize`` is the single bicubic resampler used for LR frames and LR
voxels (Catmull-Rom, separable, reflect padding). ``bilinear_gather`` samples
torch feature maps at arbitrary real positions with exact results at integer
positions.
"""

import math
from typing import Tuple

import numpy as np
import torch

CATMULL_ROM_A = -0.5


def cubic_kernel(x: np.ndarray, a: float = CATMULL_ROM_A) -> np.ndarray:
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2 = x * x
    x3 = x2 * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def reflect_index(index: np.ndarray, size: int) -> np.ndarray:
    """Mirror indices into [0, size) without repeating the edge sample."""
    index = np.asarray(index)
    if size == 1:
        return np.zeros_like(index)
    period = 2 * (size - 1)
    index = np.mod(index, period)
    return np.where(index >= size, period - index, index)


def resize_matrix(in_size: int, out_size: int, scale: float) -> np.ndarray:
    """
    Build the (out_size, in_size) bicubic interpolation matrix for one axis.

    Output sample ``i`` sits at input coordinate ``(i + 0.5) * scale - 0.5``
    (pixel-center convention).
    """
    centers = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    base = np.floor(centers).astype(np.int64)
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    for tap in range(-1, 3):
        idx = base + tap
        weight = cubic_kernel(centers - idx)
        np.add.at(matrix, (rows, reflect_index(idx, in_size)), weight)
    return matrix


def output_size(in_size: Tuple[int, int], scale: float) -> Tuple[int, int]:
    """Downsampled size ``floor(H / s) x floor(W / s)``; raises on degenerate sizes."""
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    h, w = in_size
    out_h, out_w = int(math.floor(h / scale)), int(math.floor(w / scale))
    if out_h < 1 or out_w < 1:
        raise ValueError(f"downsampling {h}x{w} by {scale} gives a degenerate {out_h}x{out_w} grid")
    return out_h, out_w


def bicubic_resize(array: np.ndarray, scale: float) -> np.ndarray:
    """
    Downsample the last two axes of ``array`` by ``scale``.

    Args:
        array: Real array of shape (..., H, W)
        scale: Spatial factor s >= 1

    Returns:
        float64 array of shape (..., floor(H/s), floor(W/s))
    """
    array = np.asarray(array, dtype=np.float64)
    h, w = array.shape[-2:]
    out_h, out_w = output_size((h, w), scale)
    if scale == 1:
        return array.copy()
    rows = resize_matrix(h, out_h, scale)
    cols = resize_matrix(w, out_w, scale)
    return np.einsum('ih,...hw,jw->...ij', rows, array, cols, optimize=True)


def bicubic_resize_frames(frames: np.ndarray, scale: float) -> np.ndarray:
    """Downsample channel-last frames of shape (..., H, W, 3)."""
    moved = np.moveaxis(np.asarray(frames), -1, -3)
    return np.moveaxis(bicubic_resize(moved, scale), -3, -1)


def bilinear_gather(feat: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor,
                    padding: str = 'zeros') -> torch.Tensor:
    """
    Bilinearly sample ``feat`` at real positions.

    Args:
        feat: (B, C, H, W) tensor
        ys, xs: (B, *S) row / column positions in pixel units
        padding: 'zeros' (taps outside the map contribute 0) or 'border'
            (positions are clamped into the map first)

    Returns:
        (B, C, *S) tensor; exact at integer positions
    """
    b, c, h, w = feat.shape
    sample_shape = ys.shape[1:]
    ys = ys.reshape(b, -1)
    xs = xs.reshape(b, -1)
    if padding == 'border':
        ys = ys.clamp(0, h - 1)
        xs = xs.clamp(0, w - 1)

    y0 = torch.floor(ys)
    x0 = torch.floor(xs)
    wy = (ys - y0).to(feat.dtype)
    wx = (xs - x0).to(feat.dtype)
    y0 = y0.long()
    x0 = x0.long()

    flat = feat.reshape(b, c, h * w)
    out = feat.new_zeros(b, c, ys.shape[1])
    for dy, weight_y in ((0, 1 - wy), (1, wy)):
        for dx, weight_x in ((0, 1 - wx), (1, wx)):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            index = (yy.clamp(0, h - 1) * w + xx.clamp(0, w - 1))
            values = torch.gather(flat, 2, index.unsqueeze(1).expand(b, c, -1))
            weight = (weight_y * weight_x * valid.to(feat.dtype)).unsqueeze(1)
            out = out + values * weight
    return out.reshape(b, c, *sample_shape)
