"""
LiDAR branch: voxelization, furthest point sampling, hashed sparse 3x3x3
convolutions and the bird's-eye-view collapse that yields the LiDAR BEV map
"""

import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

# Add parent directory to path
sys.path.append(str(Path(__file__).parent.parent))

from config import VoxelConfig
from errors import ConfigurationError, InputError
from model.numerics import ParamSet, ParamSpec, Tensor, linear, linear_specs, relu
from utils.scene import PointCloud

logger = logging.getLogger(__name__)

# 27 kernel taps in (di, dj, dk) order matching weight[di + 1, dj + 1, dk + 1]
KERNEL_OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64)


@dataclass(frozen=True)
class SparseVoxelGrid:
    """Occupied voxels only: sorted integer indices (N x 3) and features (N x C)"""

    indices: np.ndarray
    features: np.ndarray
    extents: Tuple[int, int, int]
    stride: int = 1
    counts: Optional[np.ndarray] = None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            feats = feats.reshape(len(idx), -1) if len(idx) else feats.reshape(0, 0)
        idx.setflags(write=False)
        feats.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))

    @property
    def num_voxels(self) -> int:
        return int(len(self.indices))

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])

    def keys(self) -> np.ndarray:
        return linear_keys(self.indices, self.extents)

    def lookup(self, query: np.ndarray) -> np.ndarray:
        """Row of each queried index, or -1 when it is unoccupied or out of bounds."""
        query = np.asarray(query, dtype=np.int64).reshape(-1, 3)
        rows = np.full(len(query), -1, dtype=np.int64)
        if self.num_voxels == 0 or len(query) == 0:
            return rows
        inside = np.all((query >= 0) & (query < np.array(self.extents)), axis=1)
        keys = self.keys()
        qk = linear_keys(query[inside], self.extents)
        pos = np.searchsorted(keys, qk)
        pos_clip = np.minimum(pos, len(keys) - 1)
        hit = keys[pos_clip] == qk
        found = np.where(hit, pos_clip, -1)
        rows[inside] = found
        return rows

    def with_features(self, features: np.ndarray) -> "SparseVoxelGrid":
        return SparseVoxelGrid(self.indices, features, self.extents, self.stride, self.counts)


def linear_keys(indices: np.ndarray, extents: Sequence[int]) -> np.ndarray:
    _, ey, ez = extents
    idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    return (idx[:, 0] * ey + idx[:, 1]) * ez + idx[:, 2]


def _make_grid(indices: np.ndarray, features: np.ndarray, extents, stride: int, counts=None) -> SparseVoxelGrid:
    """Build a grid with rows sorted by linear key."""
    if len(indices) == 0:
        return SparseVoxelGrid(np.zeros((0, 3), dtype=np.int64), np.zeros((0, features.shape[1])), extents, stride, counts)
    order = np.argsort(linear_keys(indices, extents), kind="stable")
    return SparseVoxelGrid(indices[order], features[order], extents, stride, None if counts is None else counts[order])


@dataclass(frozen=True)
class KeyPointSet:
    indices: np.ndarray
    positions: np.ndarray

    @property
    def count(self) -> int:
        return int(len(self.indices))


@dataclass
class BackboneOutput:
    stages: List[SparseVoxelGrid]
    keypoints: KeyPointSet
    voxels: SparseVoxelGrid = field(default=None)

    def stage(self, stride: int) -> SparseVoxelGrid:
        for grid in self.stages:
            if grid.stride == stride:
                return grid
        raise ConfigurationError(f"no backbone stage with stride {stride}", module="voxel")


# ----------------------------------------------------------------------
# Geometry helpers
# ----------------------------------------------------------------------
def grid_extents(cfg: VoxelConfig) -> Tuple[int, int, int]:
    lo, hi = np.array(cfg.point_range[:3]), np.array(cfg.point_range[3:])
    # round first so 51.2 / 0.4 does not become 128.00000000000003
    return tuple(int(math.ceil(round(float(v), 9))) for v in (hi - lo) / np.array(cfg.voxel_size))


def stage_extents(cfg: VoxelConfig) -> List[Tuple[int, int, int]]:
    """Extents at strides 1, 2, 4, 8; each stage halves (rounding up) the previous one."""
    extents = [grid_extents(cfg)]
    for _ in range(3):
        extents.append(tuple(int(math.ceil(e / 2)) for e in extents[-1]))
    return extents


def voxel_centers(grid: SparseVoxelGrid, cfg: VoxelConfig) -> np.ndarray:
    size = np.array(cfg.voxel_size) * grid.stride
    return (grid.indices + 0.5) * size + np.array(cfg.point_range[:3])


def bev_cell_centers(cfg: VoxelConfig, out_hw: Sequence[int]) -> np.ndarray:
    """World (x, y) of every BEV cell; rows follow x, columns follow y."""
    h, w = out_hw
    x0, y0, _, x1, y1, _ = cfg.point_range
    xs = x0 + (np.arange(h) + 0.5) * (x1 - x0) / h
    ys = y0 + (np.arange(w) + 0.5) * (y1 - y0) / w
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx, gy], axis=-1)


# ----------------------------------------------------------------------
# Operations
# ----------------------------------------------------------------------
def voxelize(cloud: PointCloud, cfg: VoxelConfig) -> SparseVoxelGrid:
    """Mean (u, v, w, r) of the in-range points of every occupied voxel."""
    extents = grid_extents(cfg)
    lo, hi = np.array(cfg.point_range[:3]), np.array(cfg.point_range[3:])
    pts = cloud.points
    inside = np.all((pts[:, :3] >= lo) & (pts[:, :3] < hi), axis=1) if len(pts) else np.zeros(0, dtype=bool)
    pts = pts[inside]
    if len(pts) == 0:
        return _make_grid(np.zeros((0, 3), dtype=np.int64), np.zeros((0, 4)), extents, 1, np.zeros(0, dtype=np.int64))

    idx = np.floor((pts[:, :3] - lo) / np.array(cfg.voxel_size)).astype(np.int64)
    idx = np.clip(idx, 0, np.array(extents) - 1)
    keys = linear_keys(idx, extents)
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    counts = np.bincount(inverse, minlength=len(uniq))
    sums = np.zeros((len(uniq), 4))
    np.add.at(sums, inverse, pts)
    return SparseVoxelGrid(idx[first], sums / counts[:, None], extents, 1, counts)


def local_features(grid: SparseVoxelGrid, cfg: VoxelConfig) -> SparseVoxelGrid:
    """Replace absolute mean positions by offsets from the voxel centre."""
    if grid.num_voxels == 0:
        return grid
    offsets = grid.features[:, :3] - voxel_centers(grid, cfg)
    return grid.with_features(np.column_stack([offsets, grid.features[:, 3:]]))


def fps(cloud: PointCloud, k: int, seed: Optional[int] = None, start: Optional[int] = None) -> KeyPointSet:
    """Greedy furthest point sampling.

    The first point is `start` when given, a seeded random point when only
    `seed` is given, and index 0 otherwise. Ties go to the lowest index.
    """
    if k < 1:
        raise InputError("fps needs K >= 1", module="voxel")
    if cloud.count == 0:
        raise InputError("fps on an empty point cloud", module="voxel")
    xyz = cloud.xyz
    n = len(xyz)
    if k > n:
        return KeyPointSet(np.arange(n), xyz.copy())

    if start is None:
        start = 0 if seed is None else int(np.random.default_rng(int(seed) % (2 ** 63)).integers(n))
    if not 0 <= start < n:
        raise InputError(f"fps start index {start} out of range", module="voxel")

    selected = [int(start)]
    dist = np.full(n, np.inf)
    taken = np.zeros(n, dtype=bool)
    taken[start] = True
    for _ in range(k - 1):
        d = np.sum((xyz - xyz[selected[-1]]) ** 2, axis=1)
        dist = np.minimum(dist, d)
        nxt = int(np.argmax(np.where(taken, -np.inf, dist)))
        selected.append(nxt)
        taken[nxt] = True
    idx = np.array(selected, dtype=np.int64)
    return KeyPointSet(idx, xyz[idx].copy())


def sparse_conv3(grid: SparseVoxelGrid, params: ParamSet, prefix: str, stride: int = 1) -> SparseVoxelGrid:
    """3x3x3 sparse convolution + bias + ReLU.

    stride 1 keeps the input sites (submanifold); stride 2 emits one site per
    occupied 2x2x2 block, centring the kernel on the block's even anchor.
    Missing neighbours contribute zero.
    """
    if stride not in (1, 2):
        raise ConfigurationError(f"sparse_conv3 stride must be 1 or 2, got {stride}", module="voxel")
    weight = params.require(f"{prefix}.weight", "voxel").data
    bias = params.require(f"{prefix}.bias", "voxel").data
    if weight.shape[:3] != (3, 3, 3) or weight.ndim != 5:
        raise ConfigurationError(f"{prefix}.weight must be 3x3x3xCinxCout, got {weight.shape}", module="voxel")
    c_in, c_out = weight.shape[3], weight.shape[4]
    if grid.channels != c_in:
        raise ConfigurationError(f"{prefix}: grid has {grid.channels} channels, kernel expects {c_in}", module="voxel")

    if stride == 1:
        out_idx, extents, centre = grid.indices, grid.extents, grid.indices
    else:
        extents = tuple(int(math.ceil(e / 2)) for e in grid.extents)
        out_idx = np.unique(grid.indices // 2, axis=0) if grid.num_voxels else np.zeros((0, 3), dtype=np.int64)
        centre = out_idx * 2

    out = np.zeros((len(out_idx), c_out))
    if len(out_idx):
        for offset in KERNEL_OFFSETS:
            rows = grid.lookup(centre + offset)
            hit = rows >= 0
            if not hit.any():
                continue
            tap = weight[offset[0] + 1, offset[1] + 1, offset[2] + 1]
            out[hit] += grid.features[rows[hit]] @ tap
        out = np.maximum(out + bias, 0.0)
    return _make_grid(out_idx, out, extents, grid.stride * stride)


def conv_specs(prefix: str, c_in: int, c_out: int) -> Dict[str, ParamSpec]:
    fan_in = 27 * c_in
    return {
        f"{prefix}.weight": ParamSpec((3, 3, 3, c_in, c_out), "weight", fan_in),
        f"{prefix}.bias": ParamSpec((c_out,), "bias", fan_in),
    }


def backbone_specs(cfg: VoxelConfig, prefix: str = "backbone") -> Dict[str, ParamSpec]:
    widths = cfg.stage_widths
    specs = conv_specs(f"{prefix}.conv1", 4, widths[0])
    for s in range(1, 4):
        specs.update(conv_specs(f"{prefix}.down{s + 1}", widths[s - 1], widths[s]))
        specs.update(conv_specs(f"{prefix}.conv{s + 1}", widths[s], widths[s]))
    specs.update(linear_specs("bev_neck", widths[-1], cfg.bev_out_dim))
    return specs


def lidar_backbone(cloud: PointCloud, cfg: VoxelConfig, params: ParamSet, prefix: str = "backbone") -> BackboneOutput:
    """Voxelize, then four stages at strides 1/2/4/8, plus FPS keypoints."""
    voxels = voxelize(cloud, cfg)
    x = sparse_conv3(local_features(voxels, cfg), params, f"{prefix}.conv1", stride=1)
    stages = [x]
    for s in range(2, 5):
        x = sparse_conv3(x, params, f"{prefix}.down{s}", stride=2)
        x = sparse_conv3(x, params, f"{prefix}.conv{s}", stride=1)
        stages.append(x)

    if cloud.count:
        keypoints = fps(cloud, cfg.num_keypoints, start=min(cfg.fps_start, cloud.count - 1))
    else:
        keypoints = KeyPointSet(np.zeros(0, dtype=np.int64), np.zeros((0, 3)))
    logger.debug("backbone voxels per stage: %s", [g.num_voxels for g in stages])
    return BackboneOutput(stages=stages, keypoints=keypoints, voxels=voxels)


def bev_collapse(grid: SparseVoxelGrid, out_hw: Sequence[int], reduce: str = "mean") -> Tensor:
    """Collapse height into an H x W x C map, then nearest-neighbour resample to `out_hw`."""
    ex, ey, _ = grid.extents
    c = grid.channels
    bev = np.zeros((ex, ey, c))
    if grid.num_voxels:
        i, j = grid.indices[:, 0], grid.indices[:, 1]
        if reduce == "mean":
            counts = np.zeros((ex, ey))
            np.add.at(bev, (i, j), grid.features)
            np.add.at(counts, (i, j), 1.0)
            bev = np.where(counts[..., None] > 0, bev / np.maximum(counts, 1.0)[..., None], 0.0)
        elif reduce == "max":
            bev[:] = -np.inf
            np.maximum.at(bev, (i, j), grid.features)
            bev = np.where(np.isfinite(bev), bev, 0.0)
        else:
            raise ConfigurationError(f"unknown BEV reduction {reduce!r}", module="voxel")

    h, w = out_hw
    rows = (np.arange(h) * ex) // h
    cols = (np.arange(w) * ey) // w
    return Tensor(bev[rows][:, cols])


def bev_features(grid: SparseVoxelGrid, cfg: VoxelConfig, out_hw: Sequence[int], params: ParamSet) -> Tensor:
    """BEV collapse followed by the 1x1 neck that maps stage width to the fusion width."""
    return relu(linear(bev_collapse(grid, out_hw, cfg.bev_reduce), params, "bev_neck", "voxel"))


def bev_occupancy(grid: SparseVoxelGrid, out_hw: Sequence[int]) -> np.ndarray:
    """Boolean H x W mask of BEV cells holding at least one voxel, resampled like bev_collapse."""
    ex, ey, _ = grid.extents
    occupied = np.zeros((ex, ey), dtype=bool)
    if grid.num_voxels:
        occupied[grid.indices[:, 0], grid.indices[:, 1]] = True
    h, w = out_hw
    rows = (np.arange(h) * ex) // h
    cols = (np.arange(w) * ey) // w
    return occupied[rows][:, cols]
