"""Bicubic resampling and BT.601 colour conversion on numpy arrays.

Resampling uses the Keys cubic kernel (a = -0.5) with edge-clamped taps and
half-pixel-centre alignment, ``x_in = (x_out + 0.5) / factor - 0.5``. No
anti-alias prefilter is applied when shrinking.
"""
from __future__ import annotations

import numpy as np

KEYS_A = -0.5

# full-range BT.601, offset form: Y in [0, 1], Cb/Cr centred on 0.5
_KR, _KG, _KB = 0.299, 0.587, 0.114
RGB_TO_YCBCR = np.array([
    [_KR, _KG, _KB],
    [-_KR / (2 - 2 * _KB), -_KG / (2 - 2 * _KB), 0.5],
    [0.5, -_KG / (2 - 2 * _KR), -_KB / (2 - 2 * _KR)],
])
YCBCR_OFFSET = np.array([0.0, 0.5, 0.5])
YCBCR_TO_RGB = np.linalg.inv(RGB_TO_YCBCR)


def keys_kernel(t: np.ndarray, a: float = KEYS_A) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def sample_matrix(n_in: int, positions: np.ndarray) -> np.ndarray:
    """(len(positions), n_in) matrix of Keys weights at fractional input positions."""
    base = np.floor(positions).astype(np.int64)
    m = np.zeros((len(positions), n_in))
    rows = np.arange(len(positions))
    for k in range(-1, 3):
        idx = base + k
        w = keys_kernel(positions - idx)
        np.add.at(m, (rows, np.clip(idx, 0, n_in - 1)), w)
    return m


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    if n_in <= 0 or n_out <= 0:
        raise ValueError(f"resize extents must be positive, got {n_in} -> {n_out}")
    factor = n_out / n_in
    pos = (np.arange(n_out) + 0.5) / factor - 0.5
    return sample_matrix(n_in, pos)


def resize_matrices(shape: tuple[int, int], factor: float | None = None,
                    size: tuple[int, int] | None = None, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Row and column maps resizing an ``shape`` image by ``factor`` (or to ``size``)."""
    h, w = shape
    if size is None:
        if factor is None or factor <= 0:
            raise ValueError(f"resize factor must be positive, got {factor}")
        size = (int(round(h * factor)), int(round(w * factor)))
    return (resize_matrix(h, size[0]).astype(dtype, copy=False),
            resize_matrix(w, size[1]).astype(dtype, copy=False))


def bicubic_resize(img: np.ndarray, factor: float | None = None, size: tuple[int, int] | None = None) -> np.ndarray:
    """Resize the last two axes of ``img`` by ``factor`` (or to ``size``)."""
    mh, mw = resize_matrices(img.shape[-2:], factor, size, img.dtype)
    return mh @ img @ mw.T


def shift_crop(img: np.ndarray, top: float, left: float, height: int, width: int) -> np.ndarray:
    """Bicubically sample a ``height x width`` window whose origin is at (top, left)."""
    mh = sample_matrix(img.shape[-2], top + np.arange(height, dtype=np.float64))
    mw = sample_matrix(img.shape[-1], left + np.arange(width, dtype=np.float64))
    return mh @ img @ mw.T


def rgb_to_ycbcr(rgb: np.ndarray, axis: int = 1) -> np.ndarray:
    x = np.moveaxis(rgb, axis, -1)
    out = x @ RGB_TO_YCBCR.T.astype(rgb.dtype) + YCBCR_OFFSET.astype(rgb.dtype)
    return np.moveaxis(out, -1, axis)


def ycbcr_to_rgb(ycc: np.ndarray, axis: int = 1) -> np.ndarray:
    x = np.moveaxis(ycc, axis, -1) - YCBCR_OFFSET.astype(ycc.dtype)
    out = x @ YCBCR_TO_RGB.T.astype(ycc.dtype)
    return np.moveaxis(out, -1, axis)
