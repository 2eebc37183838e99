"""
RoI grid fusion: pool LiDAR and image features on a G x G x G lattice inside
each proposal and mix them through per-channel sigmoid gates
"""

import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

# Add parent directory to path
sys.path.append(str(Path(__file__).parent.parent))

from config import VgaConfig, VoxelConfig
from errors import DimensionError, InputError
from model.numerics import (
    ParamSet,
    ParamSpec,
    Tensor,
    add,
    as_tensor,
    concat,
    linear,
    linear_specs,
    matmul,
    mean,
    mlp,
    mlp_specs,
    mul,
    reshape,
    sigmoid,
)
from model.voxel import SparseVoxelGrid, voxel_centers
from utils.box_ops import Box3D, rotation_z
from utils.scene import CameraModel

logger = logging.getLogger(__name__)

MODULE = "vga"


@dataclass
class LidarSource:
    """Voxel centres (N x 3) and features (N x C_stage) that LiDAR pooling reads"""

    centers: np.ndarray
    features: np.ndarray
    radius: float

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])


@dataclass
class FusionGate:
    logits: Tensor
    theta_lidar: Tensor
    theta_sffa: Tensor


def vga_specs(cfg: VgaConfig, lidar_channels: int, embed_dim: int, prefix: str = "vga") -> Dict[str, ParamSpec]:
    c = embed_dim
    specs: Dict[str, ParamSpec] = {}
    specs.update(linear_specs(f"{prefix}.lidar_proj", lidar_channels, c))
    specs.update(mlp_specs(f"{prefix}.gate", (2 * c, cfg.gate_hidden, 2 * c)))
    specs.update(mlp_specs(f"{prefix}.fuse", (2 * c, cfg.fuse_hidden, cfg.out_dim)))
    return specs


def roi_grid_points(box: Box3D, grid_size: int, margin: float = 0.0) -> np.ndarray:
    """G^3 cell centres of the (enlarged) box in world coordinates, i over l, j over w, k over h."""
    if grid_size < 1:
        raise InputError(f"grid size must be >= 1, got {grid_size}", module=MODULE)
    size = np.asarray(box.size, dtype=np.float64)
    if np.any(size <= 0) or not np.all(np.isfinite(size)):
        raise InputError(f"degenerate box size {tuple(size)}", module=MODULE)
    size = size + 2.0 * margin
    steps = (np.arange(grid_size) + 0.5) / grid_size - 0.5
    gi, gj, gk = np.meshgrid(steps, steps, steps, indexing="ij")
    local = np.stack([gi.ravel(), gj.ravel(), gk.ravel()], axis=1) * size
    return local @ rotation_z(box.yaw).T + np.asarray(box.center)


def lidar_source(grid: SparseVoxelGrid, voxel_cfg: VoxelConfig, radius: Optional[float] = None) -> LidarSource:
    """Pooling source for one backbone stage; the radius defaults to one voxel diagonal at that stride."""
    if radius is None:
        radius = float(np.linalg.norm(np.asarray(voxel_cfg.voxel_size) * grid.stride))
    return LidarSource(voxel_centers(grid, voxel_cfg), np.asarray(grid.features), float(radius))


def pool_lidar_points(grid_pts: np.ndarray, centers: np.ndarray, features: np.ndarray, radius: float) -> np.ndarray:
    """Mean feature of the voxels within `radius` of each grid point (zero if none)."""
    grid_pts = np.asarray(grid_pts, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((len(grid_pts), features.shape[1]))
    if len(centers) == 0 or len(grid_pts) == 0:
        return out
    tree = cKDTree(centers)
    for p, hits in enumerate(tree.query_ball_point(grid_pts, r=radius)):
        if hits:
            out[p] = features[np.sort(hits)].mean(axis=0)
    return out


def pool_lidar(grid_pts: np.ndarray, source: LidarSource) -> np.ndarray:
    return pool_lidar_points(grid_pts, source.centers, source.features, source.radius)


def image_sampling_matrix(grid_pts: np.ndarray, feat_hw: Tuple[int, int], cam: CameraModel) -> np.ndarray:
    """Bilinear weights (P x H*W) from grid points to feature cells.

    Feature cell (r, c) sits at pixel ((c + 0.5) * sx, (r + 0.5) * sy); points
    behind the camera or outside the image get an all-zero row, and corners
    beyond the feature grid contribute nothing.
    """
    fh, fw = feat_hw
    pts = np.asarray(grid_pts, dtype=np.float64).reshape(-1, 3)
    weights = np.zeros((len(pts), fh * fw))
    if len(pts) == 0:
        return weights
    u, v, depth = cam.project(pts)
    with np.errstate(invalid="ignore"):
        ok = (depth > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    sx, sy = cam.width / fw, cam.height / fh
    for p in np.nonzero(ok)[0]:
        xf = u[p] / sx - 0.5
        yf = v[p] / sy - 0.5
        x0, y0 = math.floor(xf), math.floor(yf)
        ax, ay = xf - x0, yf - y0
        for r, c, wgt in (
            (y0, x0, (1 - ay) * (1 - ax)),
            (y0, x0 + 1, (1 - ay) * ax),
            (y0 + 1, x0, ay * (1 - ax)),
            (y0 + 1, x0 + 1, ay * ax),
        ):
            if 0 <= r < fh and 0 <= c < fw and wgt != 0.0:
                weights[p, r * fw + c] += wgt
    return weights


def pool_image(grid_pts: np.ndarray, f_sffa, cam: CameraModel) -> Tensor:
    """Bilinear samples of the fused image map at the projected grid points (P x C)."""
    f_sffa = as_tensor(f_sffa)
    fh, fw, c = f_sffa.shape
    sampler = image_sampling_matrix(grid_pts, (fh, fw), cam)
    return matmul(Tensor(sampler), reshape(f_sffa, (fh * fw, c)))


def _split_halves(x: Tensor, c: int) -> Tuple[Tensor, Tensor]:
    eye = np.eye(2 * c)
    return matmul(x, Tensor(eye[:, :c])), matmul(x, Tensor(eye[:, c:]))


def vga_gates(
    f_lidar_pt,
    f_sffa_pt,
    cfg: VgaConfig,
    params: ParamSet,
    prefix: str = "vga",
    logit_shift: float = 0.0,
) -> FusionGate:
    """Sigmoid gates per grid point and channel (or one set per RoI in 'roi' mode).

    `logit_shift` is added to the LiDAR half of the logits before the sigmoid.
    """
    f_lidar_pt, f_sffa_pt = as_tensor(f_lidar_pt), as_tensor(f_sffa_pt)
    if f_lidar_pt.shape != f_sffa_pt.shape:
        raise DimensionError(f"VGA inputs differ: {f_lidar_pt.shape} vs {f_sffa_pt.shape}", module=MODULE)
    c = f_lidar_pt.shape[-1]
    logits = mlp(concat([f_lidar_pt, f_sffa_pt], axis=-1), params, f"{prefix}.gate", (2 * c, cfg.gate_hidden, 2 * c), MODULE)
    if cfg.gate_mode == "roi":
        logits = mean(logits, axis=0, keepdims=True)
    logit_l, logit_s = _split_halves(logits, c)
    if logit_shift:
        logit_l = add(logit_l, logit_shift)
    if not cfg.enabled:
        ones = Tensor(np.ones(f_lidar_pt.shape))
        return FusionGate(logits, ones, Tensor(np.zeros(f_lidar_pt.shape)))
    return FusionGate(logits, sigmoid(logit_l), sigmoid(logit_s))


def vga_fuse(f_lidar_pt, f_sffa_pt, cfg: VgaConfig, params: ParamSet, prefix: str = "vga", logit_shift: float = 0.0) -> Tensor:
    """MLP_f(concat(theta_l * f_lidar, theta_s * f_sffa)) per grid point."""
    f_lidar_pt, f_sffa_pt = as_tensor(f_lidar_pt), as_tensor(f_sffa_pt)
    gate = vga_gates(f_lidar_pt, f_sffa_pt, cfg, params, prefix, logit_shift)
    c = f_lidar_pt.shape[-1]
    gated = concat([mul(gate.theta_lidar, f_lidar_pt), mul(gate.theta_sffa, f_sffa_pt)], axis=-1)
    return mlp(gated, params, f"{prefix}.fuse", (2 * c, cfg.fuse_hidden, cfg.out_dim), MODULE)


def vga_forward(
    box: Box3D,
    source: LidarSource,
    f_sffa,
    cam: CameraModel,
    cfg: VgaConfig,
    params: ParamSet,
    prefix: str = "vga",
) -> Tensor:
    """Fused grid features of one proposal, G x G x G x out_dim."""
    g = cfg.grid_size
    pts = roi_grid_points(box, g, cfg.margin)
    lidar = linear(Tensor(pool_lidar(pts, source)), params, f"{prefix}.lidar_proj", MODULE)
    image = pool_image(pts, f_sffa, cam)
    fused = vga_fuse(lidar, image, cfg, params, prefix)
    return reshape(fused, (g, g, g, cfg.out_dim))
