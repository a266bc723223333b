"""GTF (fidelity) and GTF-Tiny (efficiency) light-field super-resolution models."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .autodiff import ops
from .autodiff.tensor import Tensor, get_dtype, no_grad, precision
from .errors import ConfigError, ContractError, ShapeError
from .imaging import bicubic_resize, resize_matrices, rgb_to_ycbcr, ycbcr_to_rgb
from .nn import (AngularEmbedding, BranchConfig, Conv, FusionConfig, Module, MultiLevelAggregation,
                 OmniEpiBlock)

VARIANTS = ("gtf", "gtf_tiny")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "gtf_tiny"
    channels: int = 32
    blocks: int = 6
    heads: int = 4
    ffn_ratio: int = 2
    scale: int = 4
    U: int = 5
    V: int = 5
    droppath: float = 0.0
    local_window: int | None = None
    mla_taps: tuple[int, ...] = (1, 3, 5)
    use_macpi_prior: bool = False
    use_angular_embed: bool = True
    share_hv: bool = False
    layerscale_init: float = 1e-2
    fusion_reduction: int = 2
    fusion_kernel: tuple[int, ...] = (1, 3, 3)
    diag_kernel: tuple[int, ...] = (3, 1, 1)
    use_diagonal: bool = True
    use_fusion: bool = True
    ffn_type: str = "tp"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not isinstance(self.scale, int) or self.scale < 1:
            raise ConfigError(f"scale must be a positive integer, got {self.scale!r}")
        if self.U < 1 or self.V < 1:
            raise ConfigError("angular extents must be positive")
        if self.use_diagonal and self.U != self.V:
            raise ConfigError("the diagonal branch needs U == V")
        if self.variant == "gtf_tiny":
            if self.local_window is not None:
                raise ConfigError("gtf_tiny uses unmasked attention; local_window must be none")
            if not self.mla_taps or any(not 1 <= t <= self.blocks for t in self.mla_taps):
                raise ConfigError(f"mla_taps {self.mla_taps} must lie in 1..{self.blocks}")
        elif self.mla_taps:
            raise ConfigError("gtf uses a residual stack; mla_taps must be empty")
        for k in (self.fusion_kernel, self.diag_kernel):
            if len(k) != 3 or any(e % 2 == 0 for e in k):
                raise ConfigError(f"3D kernels need three odd extents, got {k}")
        # validate the derived sub-configs eagerly
        self.branch_config()
        self.fusion_config()

    @property
    def views(self) -> int:
        return self.U * self.V

    @property
    def tiny(self) -> bool:
        return self.variant == "gtf_tiny"

    def branch_config(self) -> BranchConfig:
        return BranchConfig(channels=self.channels, heads=self.heads,
                            layerscale_init=self.layerscale_init, droppath_rate=self.droppath,
                            local_window=self.local_window, ffn_ratio=self.ffn_ratio,
                            share_hv=self.share_hv, ffn_type=self.ffn_type)

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(channels=self.channels, reduction=self.fusion_reduction,
                            tiny_mode=self.tiny, kernel=tuple(self.fusion_kernel),
                            directions=3 if self.use_diagonal else 2)


PRESETS = {
    "gtf": ModelConfig(variant="gtf", channels=128, blocks=8, heads=8, ffn_ratio=4, droppath=0.1,
                       local_window=31, mla_taps=(), use_macpi_prior=True, use_angular_embed=False,
                       share_hv=True, fusion_reduction=4, fusion_kernel=(3, 3, 3),
                       diag_kernel=(3, 3, 3)),
    "gtf_tiny": ModelConfig(),
    "nano": ModelConfig(channels=8, blocks=2, heads=2, ffn_ratio=2, scale=2, U=3, V=3,
                        mla_taps=(1, 2), fusion_kernel=(3, 3, 3), diag_kernel=(3, 3, 3)),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return dataclasses.replace(PRESETS[name], **overrides)


def pixel_shuffle(x: Tensor, scale: int) -> Tensor:
    """(B, C*s*s, A, H, W) -> (B, C, A, s*H, s*W); channel (c, i*s + j) lands at offset (i, j)."""
    B, CS, A, H, W = x.shape
    if CS % (scale * scale):
        raise ShapeError(f"{CS} channels not divisible by scale^2 = {scale * scale}")
    C = CS // (scale * scale)
    t = ops.reshape(x, (B, C, scale, scale, A, H, W))
    t = ops.permute(t, (0, 1, 4, 5, 2, 6, 3))
    return ops.reshape(t, (B, C, A, H * scale, W * scale))


def bicubic_upsample_lf(lf: np.ndarray, scale: int) -> np.ndarray:
    return bicubic_resize(lf, float(scale))


class GTF(Module):
    """Luminance network: shallow features, Omni-EPI stack, pixel-shuffle head."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        C, a = cfg.channels, cfg.scale
        self.shallow = Conv(1, C, (3, 3, 3), rng)
        if cfg.use_macpi_prior:
            self.prior = Conv(1, C, (3, 3), rng, dilation=(cfg.U, cfg.V))
            self.prior_fuse = Conv(2 * C, C, (1, 1, 1), rng)
        if cfg.use_angular_embed:
            self.angular = AngularEmbedding(C, cfg.views)
        branch, fusion = cfg.branch_config(), cfg.fusion_config()
        self.blocks = [OmniEpiBlock(branch, fusion, rng, diag_kernel=tuple(cfg.diag_kernel),
                                    use_diagonal=cfg.use_diagonal, use_fusion=cfg.use_fusion)
                       for _ in range(cfg.blocks)]
        if cfg.tiny:
            self.mla = MultiLevelAggregation(C, len(cfg.mla_taps), rng)
        self.head_expand = Conv(C, C * a * a, (1, 1, 1), rng)
        self.head_out = Conv(C, 1, (1, 3, 3), rng)
        self.head_out.weight.data[...] = 0.0
        self.assign_names()

    # -- stages -------------------------------------------------------------

    def _check_input(self, lr_y: Tensor) -> None:
        if lr_y.ndim != 5 or lr_y.shape[1] != 1 or lr_y.shape[2] != self.cfg.views:
            raise ShapeError(f"expected luminance light field (B, 1, {self.cfg.views}, H, W), got {lr_y.shape}")

    def shallow_features(self, lr_y: Tensor) -> Tensor:
        self._check_input(lr_y)
        return self.shallow(lr_y)

    def macpi_prior(self, lr_y: Tensor) -> Tensor:
        """Dilated 3x3 conv on the macro-pixel image, mapped back to (B, C, A, H, W)."""
        if not self.cfg.use_macpi_prior:
            raise ContractError("this configuration has no MacPI prior")
        lf = geo.LightField(lr_y, self.cfg.U, self.cfg.V)
        mac = geo.to_macpi(lf)
        conv = geo.EpiView(self.prior(mac.tensor), "macpi", mac.source[:1] + (self.cfg.channels,) + mac.source[2:])
        return geo.from_macpi(conv).tensor

    def initial_features(self, lr_y: Tensor) -> Tensor:
        f = self.shallow_features(lr_y)
        if self.cfg.use_macpi_prior:
            f = self.prior_fuse(ops.concat([f, self.macpi_prior(lr_y)], axis=1))
        if self.cfg.use_angular_embed:
            f = self.angular(f)
        return f

    def body(self, f0: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.cfg
        x = f0
        taps = []
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, cfg.U, cfg.V, rng)
            if i in cfg.mla_taps:
                taps.append(x)
        if cfg.tiny:
            return x + self.mla(taps)
        return x + f0

    def reconstruct(self, feature: Tensor, lr_y: Tensor) -> Tensor:
        up = pixel_shuffle(self.head_expand(feature), self.cfg.scale)
        mh, mw = resize_matrices(lr_y.shape[-2:], float(self.cfg.scale), dtype=lr_y.dtype)
        return self.head_out(up) + ops.resample(lr_y, mh, mw)

    def forward_y(self, lr_y: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return self.reconstruct(self.body(self.initial_features(lr_y), rng), lr_y)

    __call__ = forward_y

    def predict_y(self, lr_y: np.ndarray) -> np.ndarray:
        """Inference on a luminance array (B, 1, A, H, W), in eval mode, without a tape."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                out = self.forward_y(Tensor(lr_y, dtype=self.dtype)).data
        finally:
            self.train(was_training)
        return out

    @property
    def dtype(self):
        return self.shallow.weight.dtype

    def forward(self, lr_rgb: np.ndarray) -> np.ndarray:
        return super_resolve_rgb(lr_rgb, self.predict_y, self.cfg.scale)


def zero_residual_paths(model: GTF) -> GTF:
    """Zero every LayerScale and the head output conv; the model then returns bicubic."""
    for name, p in model.named_parameters():
        if name.rsplit(".", 1)[-1] in ("gamma1", "gamma2") or name.startswith("head_out."):
            p.data[...] = 0.0
    return model


def build_model(cfg: ModelConfig, dtype=None) -> GTF:
    """Instantiate under the requested (or current) precision."""
    dtype = np.dtype(dtype or get_dtype())
    with precision("f64" if dtype == np.float64 else "f32"):
        return GTF(cfg)


def super_resolve_rgb(lr_rgb: np.ndarray, y_fn, scale: int) -> np.ndarray:
    """RGB light field (B, 3, A, H, W) -> SR RGB, learned luminance and bicubic chroma."""
    if lr_rgb.ndim != 5 or lr_rgb.shape[1] != 3:
        raise ShapeError(f"expected RGB light field (B, 3, A, H, W), got {lr_rgb.shape}")
    ycc = rgb_to_ycbcr(lr_rgb, axis=1)
    sr_y = y_fn(np.ascontiguousarray(ycc[:, :1]))
    sr_c = bicubic_upsample_lf(ycc[:, 1:], scale)
    out = ycbcr_to_rgb(np.concatenate([sr_y.astype(sr_c.dtype), sr_c], axis=1), axis=1)
    return np.clip(out, 0.0, 1.0)
