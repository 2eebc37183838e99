"""
Image encoder with depth guidance

Patch embedding, windowed self-attention over the RGB tokens (LMSA) and a
cross attention in which one global query built from the depth map is shared
by every window (GDA). The stages alternate the two and the result is the
image feature map used by the fusion blocks.
"""

import logging
import math
import sys
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

# Add parent directory to path
sys.path.append(str(Path(__file__).parent.parent))

from config import GcfatConfig
from errors import DimensionError
from model.numerics import (
    ParamSet,
    ParamSpec,
    Tensor,
    add,
    as_tensor,
    concat,
    dropout_mask,
    gather_rows,
    layer_norm,
    linear,
    linear_specs,
    matmul,
    mlp,
    mlp_specs,
    mul,
    norm_specs,
    reshape,
    scale,
    softmax_rows,
    transpose,
    zeros,
)
from utils.scene import DepthMap

logger = logging.getLogger(__name__)

MODULE = "gcfat"


@dataclass
class WindowPartition:
    """Feature map split into non-overlapping windows.

    `windows` is N* x (h_p*w_p) x C; `mask` marks real (unpadded) tokens and
    `index` gives the flat source token of each window slot (-1 for padding).
    """

    windows: Tensor
    mask: np.ndarray
    index: np.ndarray
    grid: Tuple[int, int]
    window: Tuple[int, int]
    feature_hw: Tuple[int, int]

    @property
    def num_windows(self) -> int:
        return int(self.grid[0] * self.grid[1])

    @property
    def tokens_per_window(self) -> int:
        return int(self.window[0] * self.window[1])


@dataclass
class GlobalQuery:
    """Depth-derived query of shape B x C x h_p x w_p (B = 1)"""

    data: Tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def tokens(self) -> Tensor:
        _, c, hp, wp = self.data.shape
        return reshape(transpose(self.data, (0, 2, 3, 1)), (hp * wp, c))

    def replicate(self, num_windows: int) -> Tensor:
        """Copy along the batch axis: B* = B x N*."""
        return concat([self.data] * num_windows, axis=0)

    @classmethod
    def from_tokens(cls, tokens: Tensor, window: Sequence[int]) -> "GlobalQuery":
        hp, wp = window
        c = tokens.shape[-1]
        return cls(transpose(reshape(tokens, (1, hp, wp, c)), (0, 3, 1, 2)))


# ----------------------------------------------------------------------
# Parameters
# ----------------------------------------------------------------------
def gcfat_specs(cfg: GcfatConfig, prefix: str = "gcfat") -> Dict[str, ParamSpec]:
    c, p = cfg.embed_dim, cfg.patch_size
    specs: Dict[str, ParamSpec] = {}
    specs.update(linear_specs(f"{prefix}.patch_embed", p * p * 3, c))
    specs.update(linear_specs(f"{prefix}.depth_embed", p * p * 3, c))
    specs.update(linear_specs(f"{prefix}.query_proj", c, c))
    for s, depth in enumerate(cfg.depths):
        if s > 0:
            specs.update(linear_specs(f"{prefix}.merge{s}", 4 * c, c))
        for b in range(depth):
            specs.update(lmsa_specs(f"{prefix}.stage{s}.block{b}.lmsa", c, cfg.mlp_ratio))
            specs.update(gda_specs(f"{prefix}.stage{s}.block{b}.gda", c))
    specs.update(norm_specs(f"{prefix}.norm", c))
    return specs


def lmsa_specs(prefix: str, c: int, mlp_ratio: int) -> Dict[str, ParamSpec]:
    specs: Dict[str, ParamSpec] = {}
    for name in ("q", "k", "v", "proj"):
        specs.update(linear_specs(f"{prefix}.{name}", c, c))
    specs.update(norm_specs(f"{prefix}.norm", c))
    specs.update(mlp_specs(f"{prefix}.mlp", (c, mlp_ratio * c, c)))
    return specs


def gda_specs(prefix: str, c: int) -> Dict[str, ParamSpec]:
    specs: Dict[str, ParamSpec] = {}
    specs.update(linear_specs(f"{prefix}.k", c, c))
    specs.update(linear_specs(f"{prefix}.v", c, c))
    specs.update(norm_specs(f"{prefix}.norm", c))
    return specs


def _norm(x: Tensor, params: ParamSet, prefix: str, eps: float) -> Tensor:
    return layer_norm(
        x,
        params.require(f"{prefix}.gain", MODULE),
        params.require(f"{prefix}.bias", MODULE),
        eps,
    )


# ----------------------------------------------------------------------
# Token layout
# ----------------------------------------------------------------------
def _unfold(data: np.ndarray, p: int) -> Tuple[np.ndarray, int, int]:
    """H x W x D -> (H'*W') x (p*p*D) patches, zero-padding right/bottom."""
    h, w, d = data.shape
    hp, wp = math.ceil(h / p), math.ceil(w / p)
    padded = np.zeros((hp * p, wp * p, d))
    padded[:h, :w] = data
    patches = padded.reshape(hp, p, wp, p, d).transpose(0, 2, 1, 3, 4).reshape(hp * wp, p * p * d)
    return patches, hp, wp


def patch_embed(img, params: ParamSet, cfg: GcfatConfig, prefix: str = "gcfat.patch_embed") -> Tensor:
    """Non-overlapping p x p patches projected to width C."""
    data = as_tensor(img).data
    if data.ndim != 3:
        raise DimensionError(f"patch_embed expects H x W x D, got {data.shape}", module=MODULE)
    patches, hp, wp = _unfold(data, cfg.patch_size)
    tokens = linear(Tensor(patches), params, prefix, MODULE)
    return reshape(tokens, (hp, wp, cfg.embed_dim))


def _flat(feat: Tensor) -> Tensor:
    h, w, c = feat.shape
    return reshape(feat, (h * w, c))


def partition_windows(feat: Tensor, window: Sequence[int]) -> WindowPartition:
    h, w, c = feat.shape
    hp, wp = window
    gh, gw = math.ceil(h / hp), math.ceil(w / wp)
    rows = np.arange(gh * hp).reshape(gh, hp)
    cols = np.arange(gw * wp).reshape(gw, wp)
    # window (a, b), slot (i, j) reads pixel (a*hp + i, b*wp + j)
    r = rows[:, None, :, None]
    cc = cols[None, :, None, :]
    inside = (r < h) & (cc < w)
    index = np.where(inside, r * w + cc, -1).reshape(gh * gw, hp * wp)
    windows = gather_rows(_flat(feat), index)
    return WindowPartition(windows, index >= 0, index, (gh, gw), (hp, wp), (h, w))


def merge_windows(windows: Tensor, part: WindowPartition) -> Tensor:
    """Inverse of partition_windows; padded slots are dropped."""
    h, w = part.feature_hw
    c = windows.shape[-1]
    slots = np.full(h * w, -1, dtype=np.int64)
    flat_index = part.index.reshape(-1)
    real = flat_index >= 0
    slots[flat_index[real]] = np.nonzero(real)[0]
    tokens = gather_rows(reshape(windows, (part.num_windows * part.tokens_per_window, c)), slots)
    return reshape(tokens, (h, w, c))


def patch_merge(feat: Tensor, params: ParamSet, prefix: str) -> Tensor:
    """2 x 2 neighbourhoods concatenated (4C) and projected back to C."""
    h, w, c = feat.shape
    oh, ow = math.ceil(h / 2), math.ceil(w / 2)
    r = (2 * np.arange(oh))[:, None]
    cc = (2 * np.arange(ow))[None, :]
    flat = _flat(feat)
    parts = []
    for dr, dc in ((0, 0), (1, 0), (0, 1), (1, 1)):
        rr, ccol = r + dr, cc + dc
        idx = np.where((rr < h) & (ccol < w), rr * w + ccol, -1).reshape(-1)
        parts.append(gather_rows(flat, idx))
    merged = linear(concat(parts, axis=-1), params, prefix, MODULE)
    return reshape(merged, (oh, ow, c))


def resample_nearest(feat: Tensor, out_hw: Sequence[int]) -> Tensor:
    h, w, c = feat.shape
    oh, ow = out_hw
    rows = (np.arange(oh) * h) // oh
    cols = (np.arange(ow) * w) // ow
    idx = (rows[:, None] * w + cols[None, :]).reshape(-1)
    return reshape(gather_rows(_flat(feat), idx), (oh, ow, c))


# ----------------------------------------------------------------------
# Attention
# ----------------------------------------------------------------------
def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    num_heads: int,
    key_mask: Optional[np.ndarray] = None,
    drop: Optional[Tensor] = None,
) -> Tuple[Tensor, Tensor]:
    """Scaled dot-product attention split over heads.

    Returns the context (T_q x C) and the affinity (heads x T_q x T_k) before
    dropout.
    """
    tq, c = q.shape
    tk = k.shape[0]
    if c % num_heads:
        raise DimensionError(f"width {c} not divisible by {num_heads} heads", module=MODULE)
    d = c // num_heads
    qh = transpose(reshape(q, (tq, num_heads, d)), (1, 0, 2))
    kt = transpose(reshape(k, (tk, num_heads, d)), (1, 2, 0))
    vh = transpose(reshape(v, (tk, num_heads, d)), (1, 0, 2))
    scores = scale(matmul(qh, kt), 1.0 / math.sqrt(d))
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[None, None, :]
    weights = softmax_rows(scores, mask=mask)
    attn = weights if drop is None else mul(weights, drop)
    context = reshape(transpose(matmul(attn, vh), (1, 0, 2)), (tq, c))
    return context, weights


def _window_seed(seed: int, tag: str, window: int) -> int:
    return (int(seed) * 1_000_003 + zlib.crc32(f"{tag}/{window}".encode("utf-8"))) % (2 ** 63)


def _window_order(n: int, order: Optional[Sequence[int]]) -> Sequence[int]:
    if order is None:
        return range(n)
    order = [int(i) for i in order]
    if sorted(order) != list(range(n)):
        raise DimensionError(f"window order must permute 0..{n - 1}", module=MODULE)
    return order


def lmsa_block(
    feat: Tensor,
    cfg: GcfatConfig,
    params: ParamSet,
    prefix: str,
    window_order: Optional[Sequence[int]] = None,
) -> Tensor:
    """Window self-attention, residual + LayerNorm, then MLP with residual."""
    part = partition_windows(feat, cfg.window)
    results = [None] * part.num_windows
    for w in _window_order(part.num_windows, window_order):
        x = gather_rows(part.windows, [w])
        x = reshape(x, x.shape[1:])
        q = linear(x, params, f"{prefix}.q", MODULE)
        k = linear(x, params, f"{prefix}.k", MODULE)
        v = linear(x, params, f"{prefix}.v", MODULE)
        ctx, _ = multi_head_attention(q, k, v, cfg.num_heads, key_mask=part.mask[w])
        x = _norm(add(x, linear(ctx, params, f"{prefix}.proj", MODULE)), params, f"{prefix}.norm", cfg.eps)
        c = cfg.embed_dim
        x = add(x, mlp(x, params, f"{prefix}.mlp", (c, cfg.mlp_ratio * c, c), MODULE))
        results[w] = reshape(x, (1,) + x.shape)
    return merge_windows(concat(results, axis=0), part)


def lmsa(feat: Tensor, cfg: GcfatConfig, params: ParamSet, prefix: str = "gcfat") -> Tensor:
    """Local attention only: every stage's LMSA blocks with patch merging in between."""
    x = as_tensor(feat)
    for s, depth in enumerate(cfg.depths):
        if s > 0:
            x = patch_merge(x, params, f"{prefix}.merge{s}")
        for b in range(depth):
            x = lmsa_block(x, cfg, params, f"{prefix}.stage{s}.block{b}.lmsa")
    return x


def _adaptive_pool_matrix(h: int, w: int, out_h: int, out_w: int) -> np.ndarray:
    """(out_h*out_w) x (h*w) averaging weights with adaptive bin edges."""
    pool = np.zeros((out_h * out_w, h * w))
    for i in range(out_h):
        r0, r1 = (i * h) // out_h, -(-((i + 1) * h) // out_h)
        for j in range(out_w):
            c0, c1 = (j * w) // out_w, -(-((j + 1) * w) // out_w)
            rows, cols = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
            pool[i * out_w + j, (rows * w + cols).ravel()] = 1.0 / rows.size
    return pool


def make_global_query(depth: DepthMap, cfg: GcfatConfig, params: ParamSet, prefix: str = "gcfat") -> GlobalQuery:
    """Depth map -> 3 channels -> depth patch embedding -> pooled to h_p x w_p -> projection."""
    hp, wp = cfg.window
    if depth.num_valid == 0:
        return GlobalQuery(zeros((1, cfg.embed_dim, hp, wp)))
    channels = depth.as_channels(3) / cfg.depth_scale
    emb = patch_embed(channels, params, cfg, f"{prefix}.depth_embed")
    h, w, _ = emb.shape
    pooled = matmul(Tensor(_adaptive_pool_matrix(h, w, hp, wp)), _flat(emb))
    tokens = linear(pooled, params, f"{prefix}.query_proj", MODULE)
    return GlobalQuery.from_tokens(tokens, (hp, wp))


def gda(
    feat: Tensor,
    q_g: GlobalQuery,
    cfg: GcfatConfig,
    params: ParamSet,
    seed: int = 0,
    prefix: str = "gcfat.gda",
    window_order: Optional[Sequence[int]] = None,
    return_affinity: bool = False,
):
    """Global depth query attends to each window's tokens.

    Per window: out = LN(x + alpha v) with alpha = softmax(q_g k^T / sqrt(C/N_h)),
    the query slots lining up with the window slots.
    """
    part = partition_windows(feat, cfg.window)
    if q_g.shape[2:] != tuple(cfg.window) or q_g.shape[1] != feat.shape[-1]:
        raise DimensionError(f"global query {q_g.shape} does not fit window {cfg.window}", module=MODULE)
    replicated = q_g.replicate(part.num_windows)
    n_tok = part.tokens_per_window
    results = [None] * part.num_windows
    affinity = [None] * part.num_windows
    for w in _window_order(part.num_windows, window_order):
        x = gather_rows(part.windows, [w])
        x = reshape(x, x.shape[1:])
        q = GlobalQuery(gather_rows(replicated, [w])).tokens()
        k = linear(x, params, f"{prefix}.k", MODULE)
        v = linear(x, params, f"{prefix}.v", MODULE)
        drop = None
        if cfg.training and cfg.attn_drop > 0:
            drop = dropout_mask((cfg.num_heads, n_tok, n_tok), cfg.attn_drop, _window_seed(seed, prefix, w), training=True)
        ctx, alpha = multi_head_attention(q, k, v, cfg.num_heads, key_mask=part.mask[w], drop=drop)
        x = _norm(add(x, ctx), params, f"{prefix}.norm", cfg.eps)
        results[w] = reshape(x, (1,) + x.shape)
        affinity[w] = alpha
    out = merge_windows(concat(results, axis=0), part)
    if return_affinity:
        return out, affinity
    return out


def gcfat_forward(
    img,
    depth: DepthMap,
    cfg: GcfatConfig,
    params: ParamSet,
    seed: int = 0,
    prefix: str = "gcfat",
    window_order: Optional[Callable[[int], Sequence[int]]] = None,
) -> Tensor:
    """Image features at the fusion resolution (fusion_hw x C).

    `window_order` maps a window count to the order in which windows are
    visited; the result does not depend on it.
    """
    fh, fw = cfg.fusion_hw
    if not cfg.enabled:
        return zeros((fh, fw, cfg.embed_dim))

    x = patch_embed(img, params, cfg, f"{prefix}.patch_embed")
    q_g = make_global_query(depth, cfg, params, prefix) if cfg.use_depth_query else None
    for s, n_blocks in enumerate(cfg.depths):
        if s > 0:
            x = patch_merge(x, params, f"{prefix}.merge{s}")
        for b in range(n_blocks):
            block = f"{prefix}.stage{s}.block{b}"
            order = None if window_order is None else window_order(partition_windows(x, cfg.window).num_windows)
            x = lmsa_block(x, cfg, params, f"{block}.lmsa", window_order=order)
            if q_g is not None:
                x = gda(x, q_g, cfg, params, seed, f"{block}.gda", window_order=order)
    x = _norm(x, params, f"{prefix}.norm", cfg.eps)
    logger.debug("gcfat features %s -> %s", x.shape, (fh, fw))
    return resample_nearest(x, (fh, fw))
