"""Layout transforms between the 5D light-field tensor and its EPI / MacPI views.

A light field is stored as (B, C, A, H, W) with the angular index flattened
as ``a = u * V + v``. Every rearrangement here is built from reshape,
permute, gather and scatter ops, so gradients flow through all of them.

Layouts produced:

* horizontal EPIs  ``b c (u v) h w -> b c (v w) u h``  (token grid U x H)
* vertical EPIs    ``b c (u v) h w -> b c (u h) v w``  (token grid V x W)
* diagonal EPIs    views (i, i) and (i, U-1-i), each ``b c w u h`` (grid U x H)
* MacPI            ``(B, C, U*H, V*W)`` with ``[h*U + u, w*V + v] = lf[u*V + v, h, w]``
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor
from .errors import ContractError, ShapeError

DIRECTIONS = ("horizontal", "vertical", "diag45", "diag135", "macpi")


@dataclass(frozen=True)
class LightField:
    """(B, C, U*V, H, W) tensor plus its angular grid extents."""

    tensor: Tensor
    U: int
    V: int

    def __post_init__(self):
        t = self.tensor
        if t.ndim != 5:
            raise ShapeError(f"light field must be rank 5 (B, C, A, H, W), got shape {t.shape}")
        if t.shape[2] != self.U * self.V:
            raise ShapeError(f"angular extent {t.shape[2]} != U*V = {self.U}*{self.V}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    @property
    def grid_shape(self) -> tuple[int, int, int, int, int, int]:
        B, C, _, H, W = self.tensor.shape
        return B, C, self.U, self.V, H, W


@dataclass(frozen=True)
class EpiView:
    """A rearranged light field tied to the layout that produced it."""

    tensor: Tensor
    direction: str
    source: tuple[int, int, int, int, int, int]   # (B, C, U, V, H, W)

    @property
    def grid(self) -> tuple[int, int]:
        """Token grid (P, Q) of one EPI sequence; MacPI has none."""
        _, _, U, V, H, W = self.source
        if self.direction == "vertical":
            return V, W
        if self.direction == "macpi":
            raise ContractError("MacPI views are images, not token sequences")
        return U, H

    @property
    def source_index(self) -> np.ndarray:
        """Flat light-field index read by each element of this view (view order)."""
        B, C, U, V, H, W = self.source
        probe = Tensor(np.arange(B * C * U * V * H * W, dtype=np.float64).reshape(B, C, U * V, H, W),
                       dtype=np.float64)
        lf = LightField(probe, U, V)
        view = {"horizontal": to_horizontal_epi, "vertical": to_vertical_epi,
                "macpi": to_macpi}.get(self.direction)
        if view is not None:
            data = view(lf).tensor.data
        else:
            e45, e135 = extract_diagonals(lf)
            data = (e45 if self.direction == "diag45" else e135).tensor.data
        return data.reshape(-1).astype(np.int64)

    @property
    def inverse_map(self) -> np.ndarray:
        """Permutation ``m`` with ``lf.flat == view.flat[m]`` (full permutations only)."""
        if self.direction not in ("horizontal", "vertical", "macpi"):
            raise ContractError(f"{self.direction} view is a gather, not a permutation")
        return np.argsort(self.source_index, kind="stable")


def _grid6(lf: LightField) -> Tensor:
    return ops.reshape(lf.tensor, lf.grid_shape)


def to_horizontal_epi(lf: LightField) -> EpiView:
    B, C, U, V, H, W = lf.grid_shape
    t = ops.permute(_grid6(lf), (0, 1, 3, 5, 2, 4))          # b c v w u h
    return EpiView(ops.reshape(t, (B, C, V * W, U, H)), "horizontal", lf.grid_shape)


def to_vertical_epi(lf: LightField) -> EpiView:
    B, C, U, V, H, W = lf.grid_shape
    t = ops.permute(_grid6(lf), (0, 1, 2, 4, 3, 5))          # b c u h v w
    return EpiView(ops.reshape(t, (B, C, U * H, V, W)), "vertical", lf.grid_shape)


def to_macpi(lf: LightField) -> EpiView:
    B, C, U, V, H, W = lf.grid_shape
    t = ops.permute(_grid6(lf), (0, 1, 4, 2, 5, 3))          # b c h u w v
    return EpiView(ops.reshape(t, (B, C, H * U, W * V)), "macpi", lf.grid_shape)


def from_epi(view: EpiView) -> LightField:
    """Exact inverse of the horizontal, vertical and MacPI rearrangements."""
    B, C, U, V, H, W = view.source
    t = view.tensor
    if view.direction == "horizontal":
        _check(t, (B, C, V * W, U, H), view.direction)
        t = ops.permute(ops.reshape(t, (B, C, V, W, U, H)), (0, 1, 4, 2, 5, 3))
    elif view.direction == "vertical":
        _check(t, (B, C, U * H, V, W), view.direction)
        t = ops.permute(ops.reshape(t, (B, C, U, H, V, W)), (0, 1, 2, 4, 3, 5))
    elif view.direction == "macpi":
        return from_macpi(view)
    else:
        raise ContractError(f"from_epi cannot invert a {view.direction} view; use scatter_diagonals")
    return LightField(ops.reshape(t, (B, C, U * V, H, W)), U, V)


def from_macpi(view: EpiView) -> LightField:
    B, C, U, V, H, W = view.source
    t = view.tensor
    if t.ndim != 4 or t.shape[2] % U or t.shape[3] % V:
        raise ShapeError(f"MacPI of shape {t.shape} is not divisible by angular grid {U}x{V}")
    _check(t, (B, C, H * U, W * V), "macpi")
    t = ops.permute(ops.reshape(t, (B, C, H, U, W, V)), (0, 1, 3, 5, 2, 4))
    return LightField(ops.reshape(t, (B, C, U * V, H, W)), U, V)


def diagonal_indices(U: int, V: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Flat angular indices of the 45 and 135 degree diagonals."""
    V = U if V is None else V
    if U != V:
        raise ContractError(f"diagonal EPIs need a square angular grid, got {U}x{V}")
    i = np.arange(U)
    return i * V + i, i * V + (U - 1 - i)


def extract_diagonals(lf: LightField) -> tuple[EpiView, EpiView]:
    idx45, idx135 = diagonal_indices(lf.U, lf.V)
    views = []
    for idx, name in ((idx45, "diag45"), (idx135, "diag135")):
        g = ops.take(lf.tensor, idx, axis=2)                   # b c i h w
        views.append(EpiView(ops.permute(g, (0, 1, 4, 2, 3)), name, lf.grid_shape))
    return views[0], views[1]


def scatter_diagonals(proc45: Tensor, proc135: Tensor, like: LightField) -> LightField:
    """Write both diagonal responses into a zero light field.

    Contributions landing on the same view (the centre view for odd U) add.
    """
    B, C, U, V, H, W = like.grid_shape
    idx45, idx135 = diagonal_indices(U, V)
    for t in (proc45, proc135):
        _check(t, (B, C, W, U, H), "diagonal")
    stacked = ops.concat([ops.permute(proc45, (0, 1, 3, 4, 2)),
                          ops.permute(proc135, (0, 1, 3, 4, 2))], axis=2)   # b c 2U h w
    out = ops.index_add(stacked, np.concatenate([idx45, idx135]), axis=2, size=U * V)
    return LightField(out, U, V)


def to_tokens(view: EpiView) -> Tensor:
    """(B, C, S, P, Q) view -> (B*S, P*Q, C) token sequences."""
    B, C, S, P, Q = view.tensor.shape
    t = ops.permute(view.tensor, (0, 2, 3, 4, 1))
    return ops.reshape(t, (B * S, P * Q, C))


def from_tokens(tokens: Tensor, view: EpiView) -> EpiView:
    B, C, S, P, Q = view.tensor.shape
    _check(tokens, (B * S, P * Q, C), "tokens")
    t = ops.permute(ops.reshape(tokens, (B, S, P, Q, C)), (0, 4, 1, 2, 3))
    return EpiView(t, view.direction, view.source)


def _check(t: Tensor, expected: tuple[int, ...], what: str) -> None:
    if t.shape != tuple(expected):
        raise ShapeError(f"{what} layout mismatch: expected {tuple(expected)}, got {t.shape}")
