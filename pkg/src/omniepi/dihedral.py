"""The 8-element dihedral group acting jointly on angular and spatial axes.

An element is a signed 2x2 permutation matrix ``M``. It maps the angular
coordinate (u, v) and the spatial coordinate (h, w), both taken relative to
their grid centres, to ``M @ (u, v)`` and ``M @ (h, w)``. Acting on both
pairs with the same matrix keeps every epipolar line at its disparity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class Element:
    transpose: bool = False     # applied first: (u, v) <-> (v, u) and (h, w) <-> (w, h)
    flip_rows: bool = False     # then reverse u and h
    flip_cols: bool = False     # then reverse v and w

    @property
    def matrix(self) -> np.ndarray:
        t = np.array([[0, 1], [1, 0]]) if self.transpose else np.eye(2, dtype=int)
        signs = np.diag([-1 if self.flip_rows else 1, -1 if self.flip_cols else 1])
        return signs @ t

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Element:
        m = np.asarray(m)
        transpose = m[0, 0] == 0
        d = m @ (np.array([[0, 1], [1, 0]]) if transpose else np.eye(2, dtype=int))
        return cls(bool(transpose), bool(d[0, 0] < 0), bool(d[1, 1] < 0))

    def then(self, other: Element) -> Element:
        """The element equal to applying ``self`` and then ``other``."""
        return Element.from_matrix(other.matrix @ self.matrix)

    def inverse(self) -> Element:
        return Element.from_matrix(self.matrix.T)


IDENTITY = Element()
ELEMENTS = tuple(Element(t, r, c) for t in (False, True) for r in (False, True) for c in (False, True))
NON_TRANSPOSING = tuple(g for g in ELEMENTS if not g.transpose)


def apply(g: Element, lf: np.ndarray, U: int, V: int) -> np.ndarray:
    """Transform a (B, C, U*V, H, W) array; returns a new contiguous array."""
    if lf.ndim != 5 or lf.shape[2] != U * V:
        raise ShapeError(f"expected (B, C, {U * V}, H, W), got {lf.shape}")
    if g.transpose and U != V:
        raise ContractError(f"transposing elements need U == V, got {U}x{V}")
    B, C, _, H, W = lf.shape
    x = lf.reshape(B, C, U, V, H, W)
    if g.transpose:
        x = x.transpose(0, 1, 3, 2, 5, 4)
        H, W = W, H
    if g.flip_rows:
        x = x[:, :, ::-1, :, ::-1, :]
    if g.flip_cols:
        x = x[:, :, :, ::-1, :, ::-1]
    return np.ascontiguousarray(x).reshape(B, C, U * V, H, W)
