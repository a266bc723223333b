"""Layered synthetic light fields with known disparity, and an EPI slope probe.

A layer is a texture translated by ``d * (u - u_c, v - v_c)`` pixels in view
(u, v). Layers are composited back to front through their (equally shifted)
opacity masks, so occlusion is consistent across views.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import geometry as geo
from .autodiff.tensor import Tensor
from .errors import EstimationError, ShapeError
from .imaging import bicubic_resize, shift_crop


@dataclass
class Layer:
    texture: np.ndarray                 # (C, Ht, Wt), larger than the view by the parallax margin
    disparity: float
    mask: np.ndarray | None = None      # (Ht, Wt) opacity in [0, 1]; None means opaque


@dataclass
class SyntheticScene:
    layers: list[Layer]                 # back to front
    U: int
    V: int
    H: int
    W: int
    meta: dict = field(default_factory=dict)

    @property
    def center(self) -> tuple[float, float]:
        return (self.U - 1) / 2, (self.V - 1) / 2

    def margin(self) -> int:
        """Texture border needed so shifted windows stay inside the texture."""
        uc, vc = self.center
        reach = max((abs(L.disparity) * max(uc, vc) for L in self.layers), default=0.0)
        return int(np.ceil(reach)) + 2


def render(scene: SyntheticScene) -> np.ndarray:
    """HR light field (1, C, U*V, H, W)."""
    if not scene.layers:
        raise ShapeError("a scene needs at least one layer")
    U, V, H, W = scene.U, scene.V, scene.H, scene.W
    uc, vc = scene.center
    C = scene.layers[0].texture.shape[0]
    out = np.zeros((1, C, U * V, H, W))
    for layer in scene.layers:
        th, tw = layer.texture.shape[-2:]
        oy, ox = (th - H) / 2, (tw - W) / 2
        for u in range(U):
            for v in range(V):
                top = oy - layer.disparity * (u - uc)
                left = ox - layer.disparity * (v - vc)
                if top < 0 or left < 0 or top + H > th or left + W > tw:
                    raise ShapeError(f"texture {th}x{tw} too small for disparity {layer.disparity}")
                tex = shift_crop(layer.texture, top, left, H, W)
                a = u * V + v
                if layer.mask is None:
                    out[0, :, a] = tex
                else:
                    m = np.clip(shift_crop(layer.mask, top, left, H, W), 0.0, 1.0)
                    out[0, :, a] = m * tex + (1 - m) * out[0, :, a]
    return out


def gen_synthetic_lf(scene: SyntheticScene, scale: int) -> tuple[np.ndarray, np.ndarray]:
    """(hr, lr) pair; LR is the bicubic 1/scale downsampling of each HR view."""
    if scene.H % scale or scene.W % scale:
        raise ShapeError(f"HR size {scene.H}x{scene.W} not divisible by scale {scale}")
    hr = np.clip(render(scene), 0.0, 1.0)
    lr = bicubic_resize(hr, size=(scene.H // scale, scene.W // scale))
    return hr, np.clip(lr, 0.0, 1.0)


def random_texture(rng: np.random.Generator, shape, channels: int = 3) -> np.ndarray:
    """Band-limited noise plus oriented gratings, in [0, 1]."""
    h, w = shape
    base = np.zeros((channels, h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    for c in range(channels):
        noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=rng.uniform(0.8, 2.0))
        base[c] = noise / (np.abs(noise).max() + 1e-12)
    for _ in range(3):
        theta, freq, phase = rng.uniform(0, np.pi), rng.uniform(0.15, 0.6), rng.uniform(0, 2 * np.pi)
        wave = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        base += rng.uniform(0.2, 0.5) * wave * rng.uniform(0.5, 1.0, size=(channels, 1, 1))
    base -= base.min()
    return base / base.max()


def random_scene(rng: np.random.Generator, U: int, V: int, H: int, W: int, channels: int = 3,
                 disparities=(-1.0, 1.0), two_layer: bool = True) -> SyntheticScene:
    """Background plane plus (optionally) an elliptical foreground occluder."""
    d_back = float(rng.uniform(*disparities))
    layers_d = [d_back]
    if two_layer:
        layers_d.append(float(np.clip(d_back + rng.uniform(0.5, 1.5), *disparities)))
    scene = SyntheticScene([], U, V, H, W, meta={"disparities": layers_d})
    reach = int(np.ceil(max(abs(d) for d in layers_d) * max(U - 1, V - 1) / 2)) + 3
    size = (H + 2 * reach, W + 2 * reach)
    scene.layers.append(Layer(random_texture(rng, size, channels), d_back))
    if two_layer:
        yy, xx = np.mgrid[0:size[0], 0:size[1]]
        cy, cx = rng.uniform(0.3, 0.7) * size[0], rng.uniform(0.3, 0.7) * size[1]
        ry, rx = rng.uniform(0.15, 0.3) * size[0], rng.uniform(0.15, 0.3) * size[1]
        mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(float)
        scene.layers.append(Layer(random_texture(rng, size, channels), layers_d[1], mask))
    return scene


def single_layer_scene(rng: np.random.Generator, d: float, U: int = 5, V: int = 5, H: int = 24, W: int = 24,
                       channels: int = 1) -> SyntheticScene:
    reach = int(np.ceil(abs(d) * max(U - 1, V - 1) / 2)) + 2
    tex = random_texture(rng, (H + 2 * reach, W + 2 * reach), channels)
    return SyntheticScene([Layer(tex, float(d))], U, V, H, W, meta={"disparities": [float(d)]})


# -- slope measurement ------------------------------------------------------------------

def row_shift(epi: np.ndarray, max_shift: int) -> int:
    """Integer s maximising the correlation of row p+1 with row p shifted by s.

    ``epi`` is (..., P, Q): rows p are consecutive angular samples and Q is the
    spatial axis. Scores are pooled over all leading axes and row pairs.
    """
    rows = epi.reshape(-1, epi.shape[-2], epi.shape[-1])
    a, b = rows[:, :-1, :], rows[:, 1:, :]
    Q = rows.shape[-1]
    if Q <= 2 * max_shift + 1:
        raise EstimationError(f"spatial extent {Q} too short for shift search +-{max_shift}")
    best, best_score = None, -np.inf
    for s in range(-max_shift, max_shift + 1):
        # b[q] is compared with a[q - s] over the common valid range
        lo, hi = max_shift, Q - max_shift
        x = a[..., lo - s:hi - s]
        y = b[..., lo:hi]
        x = x - x.mean(-1, keepdims=True)
        y = y - y.mean(-1, keepdims=True)
        denom = np.sqrt((x * x).sum(-1) * (y * y).sum(-1))
        valid = denom > 1e-12
        if not valid.any():
            raise EstimationError("textureless input: no EPI row has variance")
        score = ((x * y).sum(-1)[valid] / denom[valid]).mean()
        if score > best_score + 1e-12:
            best, best_score = s, score
    return best


def plane_shift(stack: np.ndarray, max_shift: int) -> tuple[int, int]:
    """Integer (sy, sx) maximising the correlation of plane p+1 with plane p shifted by it.

    ``stack`` is (..., P, Y, X) with P consecutive angular samples. Used on
    diagonal EPIs, where one angular step moves content along both spatial axes.
    """
    planes = stack.reshape((-1,) + stack.shape[-3:])
    a, b = planes[:, :-1], planes[:, 1:]
    Y, X = planes.shape[-2:]
    m = max_shift
    if min(Y, X) <= 2 * m + 1:
        raise EstimationError(f"spatial extent {Y}x{X} too small for shift search +-{m}")
    y = b[..., m:Y - m, m:X - m]
    y = y - y.mean(axis=(-2, -1), keepdims=True)
    best, best_score = None, -np.inf
    for sy in range(-m, m + 1):
        for sx in range(-m, m + 1):
            x = a[..., m - sy:Y - m - sy, m - sx:X - m - sx]
            x = x - x.mean(axis=(-2, -1), keepdims=True)
            denom = np.sqrt((x * x).sum((-2, -1)) * (y * y).sum((-2, -1)))
            valid = denom > 1e-12
            if not valid.any():
                raise EstimationError("textureless input: no view has variance")
            score = ((x * y).sum((-2, -1))[valid] / denom[valid]).mean()
            if score > best_score + 1e-12:
                best, best_score = (sy, sx), score
    return best


def verify_epi_slope(lf: np.ndarray, U: int, V: int, max_shift: int = 4) -> dict[str, tuple[int, ...]]:
    """Per-axis disparity measured on the EPIs of each direction.

    Horizontal EPIs (rows u, spatial axis h) give the h-shift per u step;
    vertical EPIs (rows v, spatial axis w) the w-shift per v step. Along a
    diagonal EPI each angular step moves content on both spatial axes, so the
    (h, w) shift between consecutive rows is searched jointly and divided by
    the angular step on each axis (the 135 degree path steps v by -1). For an
    integer disparity-d scene every entry equals d.
    """
    if np.ptp(lf) < 1e-9:
        raise EstimationError("textureless input: light field is constant")
    field = geo.LightField(Tensor(np.asarray(lf, dtype=np.float64), dtype=np.float64), U, V)
    out = {
        "horizontal": (row_shift(geo.to_horizontal_epi(field).tensor.data, max_shift),),
        "vertical": (row_shift(geo.to_vertical_epi(field).tensor.data, max_shift),),
    }
    if U == V and U > 1:
        e45, e135 = geo.extract_diagonals(field)
        for name, view, dv in (("diag45", e45, 1), ("diag135", e135, -1)):
            d = view.tensor.data.transpose(0, 1, 3, 4, 2)        # b c w i h -> b c i h w
            sh, sw = plane_shift(d, max_shift)
            out[name] = (sh, dv * sw)
    return out
