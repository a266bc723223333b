"""EPI Transformer branch, TP-FFN, directional fusion and the Omni-EPI block."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import geometry as geo
from ..autodiff import ops
from ..autodiff.tensor import Parameter, Tensor, get_dtype
from ..errors import ConfigError, ContractError, ShapeError
from .module import Conv, LayerNorm, Linear, Module


@dataclass(frozen=True)
class BranchConfig:
    channels: int
    heads: int
    layerscale_init: float = 1e-2
    droppath_rate: float = 0.0
    local_window: int | None = None
    ffn_ratio: int = 4
    share_hv: bool = False
    ffn_type: str = "tp"          # "tp" (topology-preserving) or "1d" (pointwise)

    def __post_init__(self):
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.ffn_ratio < 1:
            raise ConfigError(f"ffn_ratio must be >= 1, got {self.ffn_ratio}")
        if not 0.0 <= self.droppath_rate < 1.0:
            raise ConfigError(f"droppath_rate must lie in [0, 1), got {self.droppath_rate}")
        if self.local_window is not None and self.local_window < 0:
            raise ConfigError("local_window must be non-negative")
        if self.ffn_type not in ("tp", "1d"):
            raise ConfigError(f"unknown ffn_type {self.ffn_type!r}")


@dataclass(frozen=True)
class FusionConfig:
    channels: int
    reduction: int = 4
    tiny_mode: bool = False
    kernel: tuple[int, int, int] = (3, 3, 3)
    directions: int = 3

    def __post_init__(self):
        if self.channels % self.reduction:
            raise ConfigError(f"channels {self.channels} not divisible by reduction {self.reduction}")

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction


def band_mask(grid: tuple[int, int], window: int) -> np.ndarray:
    """(L, L) mask: token (p, q) sees (p', q') iff |q - q'| <= window."""
    P, Q = grid
    q = np.tile(np.arange(Q), P)
    return np.abs(q[:, None] - q[None, :]) <= window


def drop_path(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Stochastic depth over the leading (sequence) axis."""
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("drop_path in training mode needs an rng")
    keep = (rng.random(x.shape[0]) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep.reshape((-1,) + (1,) * (x.ndim - 1))


class MultiHeadSelfAttention(Module):
    def __init__(self, channels: int, heads: int, rng: np.random.Generator):
        if channels % heads:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(channels, channels, rng)
        self.k = Linear(channels, channels, rng)
        self.v = Linear(channels, channels, rng)
        self.proj = Linear(channels, channels, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        S, L, C = x.shape
        h, dh = self.heads, C // self.heads
        if mask is not None and np.shape(mask) != (L, L):
            raise ShapeError(f"attention mask must be ({L}, {L}), got {np.shape(mask)}")

        def split(t):
            return ops.permute(ops.reshape(t, (S, L, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = ops.scale(ops.matmul(q, ops.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = ops.softmax(scores, mask)
        out = ops.reshape(ops.permute(ops.matmul(attn, v), (0, 2, 1, 3)), (S, L, C))
        return self.proj(out)


class TPFFN(Module):
    """Feed-forward net applied on the token sequence restored to its 2D grid."""

    def __init__(self, channels: int, ratio: int, rng: np.random.Generator):
        hidden = channels * ratio
        self.norm = LayerNorm(channels)
        self.up = Conv(channels, hidden, (1, 1), rng)
        self.dw = Conv(hidden, hidden, (3, 3), rng, depthwise=True)
        self.down = Conv(hidden, channels, (1, 1), rng)

    def __call__(self, x: Tensor, grid: tuple[int, int]) -> Tensor:
        S, L, C = x.shape
        P, Q = grid
        if P * Q != L:
            raise ContractError(f"{L} tokens do not factor into the recorded grid {P}x{Q}")
        m = ops.permute(ops.reshape(x, (S, P, Q, C)), (0, 3, 1, 2))
        m = self.norm(m, axis=1)
        m = self.down(ops.gelu(self.dw(self.up(m))))
        return ops.reshape(ops.permute(m, (0, 2, 3, 1)), (S, L, C))


class PointwiseFFN(Module):
    """Token-wise FFN without spatial mixing (ablation baseline)."""

    def __init__(self, channels: int, ratio: int, rng: np.random.Generator):
        self.norm = LayerNorm(channels)
        self.up = Linear(channels, channels * ratio, rng)
        self.down = Linear(channels * ratio, channels, rng)

    def __call__(self, x: Tensor, grid: tuple[int, int]) -> Tensor:
        return self.down(ops.gelu(self.up(self.norm(x))))


class EpiBranch(Module):
    """Pre-norm transformer layer with LayerScale and DropPath on both residuals."""

    def __init__(self, cfg: BranchConfig, rng: np.random.Generator):
        C = cfg.channels
        self.cfg = cfg
        self.norm1 = LayerNorm(C)
        self.attn = MultiHeadSelfAttention(C, cfg.heads, rng)
        self.gamma1 = Parameter(np.full(C, cfg.layerscale_init), dtype=get_dtype())
        self.norm2 = LayerNorm(C)
        ffn = TPFFN if cfg.ffn_type == "tp" else PointwiseFFN
        self.ffn = ffn(C, cfg.ffn_ratio, rng)
        self.gamma2 = Parameter(np.full(C, cfg.layerscale_init), dtype=get_dtype())

    def __call__(self, x: Tensor, grid: tuple[int, int], rng: np.random.Generator | None = None) -> Tensor:
        mask = None if self.cfg.local_window is None else band_mask(grid, self.cfg.local_window)
        rate = self.cfg.droppath_rate
        h = self.attn(self.norm1(x), mask)
        x = x + self.gamma1 * drop_path(h, rate, self.training, rng)
        h = self.ffn(self.norm2(x), grid)
        return x + self.gamma2 * drop_path(h, rate, self.training, rng)


class DirectionalFusion(Module):
    """Channel gates from pooled branch responses, then a residual 3D conv."""

    def __init__(self, cfg: FusionConfig, rng: np.random.Generator, gated: bool = True):
        self.cfg = cfg
        C = cfg.channels
        if gated:
            self.fc1 = Linear(C, cfg.hidden, rng)
            self.fc2 = Linear(cfg.hidden, cfg.directions * C, rng)
        self.gated = gated
        self.conv = Conv(C, C, cfg.kernel, rng)

    def pooled(self, branches) -> Tensor:
        total = branches[0]
        for b in branches[1:]:
            total = total + b
        return ops.mean(total, axis=(2, 3, 4))

    def gates(self, branches) -> list[Tensor]:
        z = self.pooled(branches)
        B, C = z.shape
        g = self.fc2(ops.gelu(self.fc1(z)))
        if self.cfg.tiny_mode:
            g = ops.sigmoid(g)
        return [ops.reshape(g[:, i * C:(i + 1) * C], (B, C, 1, 1, 1)) for i in range(len(branches))]

    def __call__(self, branches, f_in: Tensor) -> Tensor:
        branches = list(branches)
        if len(branches) != self.cfg.directions:
            raise ShapeError(f"fusion configured for {self.cfg.directions} branches, got {len(branches)}")
        for b in branches:
            if b.shape != f_in.shape:
                raise ShapeError(f"branch shape {b.shape} != block input shape {f_in.shape}")
        if self.gated:
            fused = None
            for g, b in zip(self.gates(branches), branches):
                term = g * b
                fused = term if fused is None else fused + term
        else:
            fused = branches[0]
            for b in branches[1:]:
                fused = fused + b
        return self.conv(fused) + f_in


class OmniEpiBlock(Module):
    """Horizontal, vertical and diagonal EPI branches merged by directional fusion."""

    def __init__(self, branch: BranchConfig, fusion: FusionConfig, rng: np.random.Generator,
                 diag_kernel=(3, 3, 3), use_diagonal: bool = True, use_fusion: bool = True):
        self.share_hv = branch.share_hv
        self.use_diagonal = use_diagonal
        self.branch_h = EpiBranch(branch, rng)
        self.branch_v = None if branch.share_hv else EpiBranch(branch, rng)
        if use_diagonal:
            self.branch_d = EpiBranch(branch, rng)
            self.diag_conv = Conv(branch.channels, branch.channels, diag_kernel, rng)
        expected = 3 if use_diagonal else 2
        if fusion.directions != expected:
            raise ConfigError(f"fusion expects {fusion.directions} directions, block provides {expected}")
        self.fusion = DirectionalFusion(fusion, rng, gated=use_fusion)

    def _run(self, branch: EpiBranch, view: geo.EpiView, rng) -> geo.EpiView:
        return geo.from_tokens(branch(geo.to_tokens(view), view.grid, rng), view)

    def diagonal(self, lf: geo.LightField, rng=None, record: dict | None = None) -> Tensor:
        e45, e135 = geo.extract_diagonals(lf)
        # both diagonals share weights, so run them as one batch of sequences
        W = e45.tensor.shape[2]
        joint = geo.EpiView(ops.concat([e45.tensor, e135.tensor], axis=2), "diag45", e45.source)
        out = self._run(self.branch_d, joint, rng).tensor
        p45, p135 = out[:, :, :W], out[:, :, W:]
        scattered = geo.scatter_diagonals(p45, p135, lf).tensor
        if record is not None:
            record["scattered"] = scattered
        return lf.tensor + self.diag_conv(scattered)

    def __call__(self, x: Tensor, U: int, V: int, rng: np.random.Generator | None = None,
                 record: dict | None = None) -> Tensor:
        lf = geo.LightField(x, U, V)
        branch_v = self.branch_h if self.share_hv else self.branch_v
        f_h = geo.from_epi(self._run(self.branch_h, geo.to_horizontal_epi(lf), rng)).tensor
        f_v = geo.from_epi(self._run(branch_v, geo.to_vertical_epi(lf), rng)).tensor
        branches = [f_h, f_v]
        if self.use_diagonal:
            branches.append(self.diagonal(lf, rng, record))
        if record is not None:
            record["branches"] = branches
        return self.fusion(branches, x)


class AngularEmbedding(Module):
    """Learnable (1, C, A, 1, 1) offset added to the initial features."""

    def __init__(self, channels: int, views: int):
        self.table = Parameter(np.zeros((1, channels, views, 1, 1)), dtype=get_dtype())

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1:3] != self.table.shape[1:3]:
            raise ShapeError(f"angular embedding {self.table.shape} does not fit features {x.shape}")
        return x + self.table


class MultiLevelAggregation(Module):
    """Concatenate tapped block outputs along channels and fuse with a 1x1x1 conv."""

    def __init__(self, channels: int, taps: int, rng: np.random.Generator):
        self.taps = taps
        self.conv = Conv(channels * taps, channels, (1, 1, 1), rng)

    def __call__(self, features) -> Tensor:
        features = list(features)
        if len(features) != self.taps:
            raise ShapeError(f"expected {self.taps} tapped features, got {len(features)}")
        shape = features[0].shape
        for f in features[1:]:
            if f.shape != shape:
                raise ShapeError(f"tapped feature shapes differ: {shape} vs {f.shape}")
        return self.conv(ops.concat(features, axis=1))
