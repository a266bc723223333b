from .blocks import (AngularEmbedding, BranchConfig, DirectionalFusion, EpiBranch, FusionConfig,
                     MultiHeadSelfAttention, MultiLevelAggregation, OmniEpiBlock, PointwiseFFN,
                     TPFFN, band_mask, drop_path)
from .module import Conv, LayerNorm, Linear, Module

__all__ = [
    "AngularEmbedding", "BranchConfig", "Conv", "DirectionalFusion", "EpiBranch", "FusionConfig",
    "LayerNorm", "Linear", "Module", "MultiHeadSelfAttention", "MultiLevelAggregation",
    "OmniEpiBlock", "PointwiseFFN", "TPFFN", "band_mask", "drop_path",
]
