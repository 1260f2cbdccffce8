"""Low-level image helpers shared by the generator and the augmenter.

Images are float32 (3,H,W); labels are uint8 (H,W).  Everything here is a
pure function of its arguments.
"""
from __future__ import annotations

import math

import numpy as np

__all__ = ["gaussian_blur", "resize_nearest", "hue_rotation_matrix", "apply_color_matrix"]


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return (k / k.sum()).astype(np.float32)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the two trailing axes, reflect-padded."""
    if sigma <= 0:
        return image.copy()
    k = _gaussian_kernel(sigma)
    r = len(k) // 2
    out = np.asarray(image, dtype=np.float32)
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        xp = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        for i, kv in enumerate(k):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(i, i + out.shape[axis])
            acc += kv * xp[tuple(sl)]
        out = acc
    return out


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of the two trailing axes; dtype-preserving."""
    h, w = arr.shape[-2], arr.shape[-1]
    ys = np.minimum((np.arange(out_h) + 0.5) * (h / out_h), h - 1).astype(np.int64)
    xs = np.minimum((np.arange(out_w) + 0.5) * (w / out_w), w - 1).astype(np.int64)
    return np.ascontiguousarray(arr[..., ys[:, None], xs[None, :]])


def hue_rotation_matrix(turns: float) -> np.ndarray:
    """3x3 RGB rotation about the gray axis; ``turns`` in fractions of 360°."""
    theta = 2.0 * math.pi * turns
    c, s = math.cos(theta), math.sin(theta)
    eye = np.eye(3)
    third = np.full((3, 3), 1.0 / 3.0)
    skew = np.array([[0.0, -1.0, 1.0],
                     [1.0, 0.0, -1.0],
                     [-1.0, 1.0, 0.0]]) / math.sqrt(3.0)
    return (c * eye + (1.0 - c) * third + s * skew).astype(np.float32)


def apply_color_matrix(image: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Apply a 3x3 color matrix to a (3,H,W) image."""
    c, h, w = image.shape
    flat = matrix.astype(np.float32) @ image.reshape(c, h * w)
    return flat.reshape(c, h, w)
