"""PSNR and SSIM on the luminance channel of light fields in [0, 1]."""
from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

from .errors import ShapeError
from .imaging import rgb_to_ycbcr

SSIM_K1, SSIM_K2 = 0.01, 0.03


def luminance(lf: np.ndarray) -> np.ndarray:
    """(B, 1 or 3, A, H, W) -> (B, A, H, W) Y."""
    if lf.ndim != 5 or lf.shape[1] not in (1, 3):
        raise ShapeError(f"expected (B, 1|3, A, H, W), got {lf.shape}")
    y = lf[:, :1] if lf.shape[1] == 1 else rgb_to_ycbcr(lf.astype(np.float64), axis=1)[:, :1]
    return y[:, 0].astype(np.float64)


def psnr_y(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-view PSNR (B, A) and the mean over views then scenes; identical views give inf."""
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    mse = ((luminance(pred) - luminance(gt)) ** 2).mean(axis=(-2, -1))
    with np.errstate(divide="ignore"):
        per_view = 10 * np.log10(1.0 / mse)
    return per_view, float(per_view.mean(axis=1).mean())


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim_image(a: np.ndarray, b: np.ndarray, window: np.ndarray | None = None) -> float:
    """Single-scale SSIM of two 2D images (L = 1), over the valid window positions."""
    w = gaussian_window() if window is None else window
    if a.shape[0] < w.shape[0] or a.shape[1] < w.shape[1]:
        raise ShapeError(f"image {a.shape} smaller than the {w.shape} SSIM window")
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2

    def filt(x):
        return convolve2d(x, w[::-1, ::-1], mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def ssim_y(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, float]:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    yp, yg = luminance(pred), luminance(gt)
    per_view = np.array([[ssim_image(yp[b, a], yg[b, a]) for a in range(yp.shape[1])]
                         for b in range(yp.shape[0])])
    return per_view, float(per_view.mean(axis=1).mean())


def format_value(x: float, digits: int = 4) -> str:
    return "inf" if np.isposinf(x) else f"{x:.{digits}f}"
