"""
LiDAR-queried cross attention over the image features with ReLU affinities
"""

import sys
from pathlib import Path
from typing import Dict

# Add parent directory to path
sys.path.append(str(Path(__file__).parent.parent))

from config import SffaConfig
from errors import DimensionError
from model.numerics import (
    ParamSet,
    ParamSpec,
    Tensor,
    add,
    as_tensor,
    linear,
    linear_specs,
    matmul,
    mul,
    norm_specs,
    relu,
    reshape,
    rms_norm,
    scale,
    transpose,
    zeros,
)

MODULE = "sffa"


def sffa_specs(cfg: SffaConfig, prefix: str = "sffa") -> Dict[str, ParamSpec]:
    c = cfg.embed_dim
    specs: Dict[str, ParamSpec] = {}
    for name in ("q", "k", "v", "merge"):
        specs.update(linear_specs(f"{prefix}.{name}", c, c))
    specs.update(norm_specs(f"{prefix}.norm", c, with_bias=False))
    return specs


def _tokens(f_lidar, f_gcfat, cfg: SffaConfig):
    f_lidar, f_gcfat = as_tensor(f_lidar), as_tensor(f_gcfat)
    if f_lidar.shape != f_gcfat.shape or f_lidar.ndim != 3:
        raise DimensionError(f"SFFA inputs differ: {f_lidar.shape} vs {f_gcfat.shape}", module=MODULE)
    h, w, c = f_lidar.shape
    if c != cfg.embed_dim:
        raise DimensionError(f"SFFA width {c} != configured {cfg.embed_dim}", module=MODULE)
    return reshape(f_lidar, (h * w, c)), reshape(f_gcfat, (h * w, c))


def _affinity(lidar_tok: Tensor, image_tok: Tensor, cfg: SffaConfig, params: ParamSet, prefix: str) -> Tensor:
    n = lidar_tok.shape[0]
    if not cfg.enabled:
        return zeros((n, n))
    q = linear(lidar_tok, params, f"{prefix}.q", MODULE)
    k = linear(image_tok, params, f"{prefix}.k", MODULE)
    return relu(scale(matmul(q, transpose(k, (1, 0))), cfg.affinity_scale))


def sffa_affinity(f_lidar, f_gcfat, cfg: SffaConfig, params: ParamSet, prefix: str = "sffa") -> Tensor:
    """beta = ReLU(q k^T * scale), (H*W) x (H*W), nonnegative."""
    lidar_tok, image_tok = _tokens(f_lidar, f_gcfat, cfg)
    return _affinity(lidar_tok, image_tok, cfg, params, prefix)


def merge_fused(normed: Tensor, image_tok: Tensor, params: ParamSet, prefix: str = "sffa") -> Tensor:
    """image + normed * linear(image), token-wise."""
    return add(image_tok, mul(normed, linear(image_tok, params, f"{prefix}.merge", MODULE)))


def sffa_forward(f_lidar, f_gcfat, cfg: SffaConfig, params: ParamSet, prefix: str = "sffa") -> Tensor:
    """Fused H x W x C map: f_gcfat + RMSNorm(beta v) * linear(f_gcfat).

    With beta all zero the output is f_gcfat itself.
    """
    lidar_tok, image_tok = _tokens(f_lidar, f_gcfat, cfg)
    beta = _affinity(lidar_tok, image_tok, cfg, params, prefix)
    v = linear(image_tok, params, f"{prefix}.v", MODULE)
    normed = rms_norm(matmul(beta, v), params.require(f"{prefix}.norm.gain", MODULE), cfg.eps)
    fused = merge_fused(normed, image_tok, params, prefix)
    return reshape(fused, as_tensor(f_gcfat).shape)
