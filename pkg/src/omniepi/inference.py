"""Tiled overlap-blended inference (EPSW) and joint dihedral test-time augmentation.

Both wrap a luminance predictor ``y_fn: (B, 1, A, h, w) -> (B, 1, A, s*h, s*w)``
and return one with the same signature, so they compose.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import partial

import numpy as np

from . import dihedral
from .errors import ConfigError, ContractError
from .model import super_resolve_rgb


@dataclass(frozen=True)
class TileSpec:
    patch: int = 32
    stride: int = 16
    window: str = "hann"
    guard: int | None = None    # LR pixels at each tile edge given zero weight

    def __post_init__(self):
        if not 0 < self.stride <= self.patch:
            raise ConfigError(f"need 0 < stride <= patch, got stride {self.stride}, patch {self.patch}")
        if self.window not in ("uniform", "hann"):
            raise ConfigError(f"window must be 'uniform' or 'hann', got {self.window!r}")
        if self.patch - 2 * self.edge < self.stride:
            raise ConfigError(f"guard {self.edge} leaves {self.patch - 2 * self.edge} weighted pixels per "
                              f"tile, fewer than the stride {self.stride}")

    @property
    def edge(self) -> int:
        if self.guard is not None:
            return self.guard
        return (self.patch - self.stride) // 4 if self.window == "hann" else 0


def window_1d(length: int, guard: int, kind: str, open_start: bool = False, open_end: bool = False) -> np.ndarray:
    """Blend profile along one tile axis (HR pixels).

    Zero in the guard bands and tapered (hann) towards them. A side lying on
    the frame boundary (``open_start`` / ``open_end``) has no neighbour to
    blend with, so it keeps full weight up to the tile centre.
    """
    w = np.zeros(length)
    n = length - 2 * guard
    if kind == "uniform":
        w[guard:length - guard] = 1.0
    else:
        w[guard:length - guard] = np.sin(math.pi * (np.arange(n) + 0.5) / n) ** 2
    mid = length // 2
    if open_start:
        w[:mid] = 1.0
    if open_end:
        w[mid:] = 1.0
    return w


def tile_starts(extent: int, spec: TileSpec) -> list[int]:
    """Tile origins along one axis: every ``stride``, the last one flush with the far edge."""
    if extent <= spec.patch:
        return [0]
    n = math.ceil((extent - spec.patch) / spec.stride) + 1
    return sorted({min(k * spec.stride, extent - spec.patch) for k in range(n)})


def epsw_infer(y_fn, lr: np.ndarray, scale: int, spec: TileSpec = TileSpec(), return_weights: bool = False):
    """Super-resolve ``lr`` (B, 1, A, h, w) tile by tile and blend the HR tiles.

    Tiles stay inside the frame (every view shares the tiling); where two tiles
    overlap, each is down-weighted towards its edge and ignored within the
    guard band. Accumulated weights are normalised per pixel, so they sum to
    one. Inputs smaller than one patch take a single full-frame pass.
    """
    h, w = lr.shape[-2:]
    if h < spec.patch or w < spec.patch:
        out = y_fn(lr)
        return (out, np.ones(out.shape[-2:])) if return_weights else out
    g, s, P = spec.edge, scale, spec.patch
    rows, cols = tile_starts(h, spec), tile_starts(w, spec)
    acc = None
    wsum = np.zeros((h * s, w * s))
    for y in rows:                       # fixed, sorted tile order
        wy = window_1d(P * s, g * s, spec.window, y == 0, y + P == h)
        for x in cols:
            wx = window_1d(P * s, g * s, spec.window, x == 0, x + P == w)
            win = np.outer(wy, wx)
            pred = y_fn(np.ascontiguousarray(lr[..., y:y + P, x:x + P]))
            if acc is None:
                acc = np.zeros(pred.shape[:-2] + (h * s, w * s), dtype=np.float64)
            acc[..., y * s:(y + P) * s, x * s:(x + P) * s] += win * pred
            wsum[y * s:(y + P) * s, x * s:(x + P) * s] += win
    if np.any(wsum <= 0):
        raise ContractError("EPSW tiling leaves pixels without weight")
    out = (acc / wsum).astype(lr.dtype)
    if return_weights:
        # normalised weights of all tiles, summed per pixel
        return out, (wsum / wsum)
    return out


def tta_infer(y_fn, lr: np.ndarray, U: int, V: int) -> np.ndarray:
    """Mean over dihedral elements g of g^-1(y_fn(g(lr))), in fixed element order."""
    elements = dihedral.ELEMENTS
    if U != V:
        warnings.warn(f"TTA on a {U}x{V} angular grid: transposes unavailable, using 4 elements",
                      RuntimeWarning)
        elements = dihedral.NON_TRANSPOSING
    total = None
    for g in elements:
        out = dihedral.apply(g.inverse(), y_fn(dihedral.apply(g, lr, U, V)), U, V).astype(np.float64)
        total = out if total is None else total + out
    return (total / len(elements)).astype(lr.dtype)


def make_predictor(y_fn, U: int, V: int, scale: int, epsw: TileSpec | None = None, tta: bool = False):
    """Compose the luminance predictor: TTA outermost, EPSW per transformed input."""
    fn = y_fn
    if epsw is not None:
        fn = partial(epsw_infer, fn, scale=scale, spec=epsw)
    if tta:
        fn = partial(tta_infer, fn, U=U, V=V)
    return fn


def super_resolve(model, lr_rgb: np.ndarray, epsw: TileSpec | None = None, tta: bool = False) -> np.ndarray:
    """RGB light field through the model with optional EPSW / TTA on the Y path."""
    cfg = model.cfg

    def y_fn(y):
        return model.predict_y(y.astype(model.dtype)).astype(np.float64)

    fn = make_predictor(y_fn, cfg.U, cfg.V, cfg.scale, epsw, tta)
    return super_resolve_rgb(lr_rgb.astype(np.float64), fn, cfg.scale)


def super_resolve_y(model, lr_y: np.ndarray, epsw: TileSpec | None = None, tta: bool = False) -> np.ndarray:
    cfg = model.cfg

    def y_fn(y):
        return model.predict_y(y.astype(model.dtype)).astype(np.float64)

    return make_predictor(y_fn, cfg.U, cfg.V, cfg.scale, epsw, tta)(lr_y.astype(np.float64))
