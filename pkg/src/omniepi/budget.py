"""Closed-form parameter and FLOP totals for a :class:`ModelConfig`.

FLOPs are 2 x multiply-accumulates of convolutions and matrix products
(linear layers, QK^T and AV). Normalisation, activations, softmax,
element-wise arithmetic and the bicubic residual are not counted.
"""
from __future__ import annotations

import math

from .model import ModelConfig

PUBLISHED_TINY_PARAMS = 0.915e6
PUBLISHED_TINY_FLOPS = 19.8e9
PUBLISHED_GTF_PARAMS = 16.26e6
PUBLISHED_GTF_FLOPS = 335e9
TINY_PARAM_LIMIT = 1.0e6
TINY_FLOP_LIMIT = 20.0e9


def _conv_params(cin, cout, k, depthwise=False):
    return (1 if depthwise else cin) * cout * math.prod(k) + cout


def _linear_params(fan_in, fan_out):
    return fan_in * fan_out + fan_out


def _branch_params(cfg: ModelConfig) -> int:
    C, r = cfg.channels, cfg.ffn_ratio
    n = 2 * C + 4 * _linear_params(C, C) + C          # norm1, q/k/v/proj, gamma1
    n += 2 * C + C                                    # norm2, gamma2
    if cfg.ffn_type == "tp":
        n += 2 * C + _conv_params(C, r * C, (1, 1)) + _conv_params(r * C, r * C, (3, 3), True) \
            + _conv_params(r * C, C, (1, 1))
    else:
        n += 2 * C + _linear_params(C, r * C) + _linear_params(r * C, C)
    return n


def _block_params(cfg: ModelConfig) -> int:
    C = cfg.channels
    sets = (1 if cfg.share_hv else 2) + (1 if cfg.use_diagonal else 0)
    n = sets * _branch_params(cfg)
    if cfg.use_diagonal:
        n += _conv_params(C, C, cfg.diag_kernel)
    if cfg.use_fusion:
        fc = cfg.fusion_config()
        n += _linear_params(C, fc.hidden) + _linear_params(fc.hidden, fc.directions * C)
    n += _conv_params(C, C, cfg.fusion_kernel)
    return n


def count_params(cfg: ModelConfig) -> int:
    C, a = cfg.channels, cfg.scale
    n = _conv_params(1, C, (3, 3, 3))
    if cfg.use_macpi_prior:
        n += _conv_params(1, C, (3, 3)) + _conv_params(2 * C, C, (1, 1, 1))
    if cfg.use_angular_embed:
        n += C * cfg.views
    n += cfg.blocks * _block_params(cfg)
    if cfg.tiny:
        n += _conv_params(len(cfg.mla_taps) * C, C, (1, 1, 1))
    n += _conv_params(C, C * a * a, (1, 1, 1)) + _conv_params(C, 1, (1, 3, 3))
    return n


def _branch_flops(cfg: ModelConfig, seqs: int, length: int) -> int:
    C, r = cfg.channels, cfg.ffn_ratio
    tokens = seqs * length
    f = 4 * 2 * C * C * tokens                        # q, k, v, proj
    f += 2 * 2 * seqs * length * length * C           # QK^T and AV over all heads
    if cfg.ffn_type == "tp":
        f += 2 * C * r * C * tokens + 2 * r * C * 9 * tokens + 2 * r * C * C * tokens
    else:
        f += 2 * 2 * C * r * C * tokens
    return f


def flop_breakdown(cfg: ModelConfig, height: int = 32, width: int = 32, batch: int = 1) -> dict[str, int]:
    """Per-component FLOPs at an LR input of (batch, 1, U*V, height, width)."""
    C, a, U, V = cfg.channels, cfg.scale, cfg.U, cfg.V
    H, W = height, width
    pos = batch * U * V * H * W
    out = {"shallow": 2 * C * 27 * pos}
    if cfg.use_macpi_prior:
        out["macpi_prior"] = 2 * C * 9 * pos + 2 * 2 * C * C * pos
    attn = {"branch_h": _branch_flops(cfg, batch * V * W, U * H),
            "branch_v": _branch_flops(cfg, batch * U * H, V * W)}
    if cfg.use_diagonal:
        attn["branch_d"] = _branch_flops(cfg, batch * 2 * W, U * H)
        attn["diag_conv"] = 2 * C * C * math.prod(cfg.diag_kernel) * pos
    fusion = 2 * C * C * math.prod(cfg.fusion_kernel) * pos
    if cfg.use_fusion:
        fc = cfg.fusion_config()
        fusion += 2 * batch * (C * fc.hidden + fc.hidden * fc.directions * C)
    attn["fusion"] = fusion
    for k, v in attn.items():
        out[k] = cfg.blocks * v
    if cfg.tiny:
        out["mla"] = 2 * len(cfg.mla_taps) * C * C * pos
    out["head"] = 2 * C * C * a * a * pos + 2 * C * 9 * pos * a * a
    return out


def count_flops(cfg: ModelConfig, height: int = 32, width: int = 32, batch: int = 1) -> int:
    return sum(flop_breakdown(cfg, height, width, batch).values())


def budget_report(cfg: ModelConfig, height: int = 32, width: int = 32) -> dict:
    """Totals, the efficiency-track gate (Tiny only) and the gap to the published size."""
    params = count_params(cfg)
    flops = count_flops(cfg, height, width)
    if cfg.tiny:
        ref_params, ref_flops = PUBLISHED_TINY_PARAMS, PUBLISHED_TINY_FLOPS
        gated = True
    else:
        ref_params, ref_flops = PUBLISHED_GTF_PARAMS, PUBLISHED_GTF_FLOPS
        gated = False
    return {
        "params": params,
        "flops": flops,
        "macs": flops // 2,
        "gated": gated,
        "params_ok": params < TINY_PARAM_LIMIT or not gated,
        "flops_ok": flops < TINY_FLOP_LIMIT or not gated,
        "ref_params": ref_params,
        "ref_flops": ref_flops,
        "params_gap": params / ref_params - 1.0,
        "flops_gap": flops / ref_flops - 1.0,
    }


def format_report(cfg: ModelConfig, height: int = 32, width: int = 32) -> str:
    r = budget_report(cfg, height, width)

    def verdict(ok):
        if not r["gated"]:
            return "(no gate)"
        return "ok" if ok else "OVER"

    lines = [
        f"variant          {cfg.variant}",
        f"input (LR)       {cfg.U}x{cfg.V}x{height}x{width}",
        f"params           {r['params']:,} ({r['params'] / 1e6:.3f} M)  limit <1.000 M  "
        f"{verdict(r['params_ok'])}  vs {r['ref_params'] / 1e6:.3f} M: {100 * r['params_gap']:+.1f}%",
        f"flops (2*MAC)    {r['flops']:,} ({r['flops'] / 1e9:.2f} G)  limit <20 G  "
        f"{verdict(r['flops_ok'])}  vs {r['ref_flops'] / 1e9:.1f} G: {100 * r['flops_gap']:+.1f}%",
        f"macs             {r['macs']:,} ({r['macs'] / 1e9:.2f} G)",
        "breakdown (G):",
    ]
    for k, v in flop_breakdown(cfg, height, width).items():
        lines.append(f"  {k:<14} {v / 1e9:8.3f}")
    return "\n".join(lines)
