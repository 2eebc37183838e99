"""
Finite-difference checks of the fusion blocks on tiny shapes
"""

import dataclasses
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np

# Add parent directory to path
sys.path.append(str(Path(__file__).parent.parent))

from config import PipelineConfig
from model.detector import refine_outputs, refine_specs
from model.gcfat import GlobalQuery, gcfat_forward, gcfat_specs, gda, gda_specs
from model.numerics import ParamSet, ParamSpec, Tensor, grad_check_report, linear, mul, sum_all
from model.sffa import sffa_forward, sffa_specs
from model.vga import LidarSource, pool_image, pool_lidar, roi_grid_points, vga_forward, vga_fuse, vga_specs
from utils.box_ops import Box3D
from utils.scene import PointCloud, camera_from_config, depth_map

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4
SUITE_KEYS = ("gda", "sffa", "vga", "composed")


def tiny_config(cfg: PipelineConfig) -> PipelineConfig:
    """Shrink a config to shapes of at most 16 x 16 x 8 while keeping its switches."""
    tiny = dataclasses.replace(cfg)
    tiny.scene = dataclasses.replace(cfg.scene, image_hw=(16, 16))
    tiny.voxel = dataclasses.replace(cfg.voxel, bev_out_dim=8)
    tiny.gcfat = dataclasses.replace(
        cfg.gcfat, embed_dim=8, num_heads=2, window=(2, 2), patch_size=4, depths=(1, 1), mlp_ratio=2, fusion_hw=(4, 4), training=False
    )
    tiny.sffa = dataclasses.replace(cfg.sffa, embed_dim=8)
    tiny.vga = dataclasses.replace(cfg.vga, grid_size=2, gate_hidden=8, fuse_hidden=8, out_dim=4)
    tiny.detect = dataclasses.replace(cfg.detect, refine_hidden=8)
    return tiny


class _Fixture:
    """Random inputs shared by the checks, all drawn from one seed"""

    def __init__(self, cfg: PipelineConfig, seed: int):
        rng = np.random.default_rng(seed)
        c = cfg.gcfat.embed_dim
        fh, fw = cfg.gcfat.fusion_hw
        self.feat = Tensor(rng.normal(size=(fh, fw, c)))
        self.f_lidar = Tensor(rng.normal(size=(fh, fw, c)))
        self.f_gcfat = Tensor(rng.normal(size=(fh, fw, c)))
        self.camera = camera_from_config(cfg.scene)
        self.box = Box3D((12.0, 0.5, -0.9), (4.0, 2.0, 1.6), 0.3, label=0)
        pts = roi_grid_points(self.box, 3, 0.0) + rng.normal(scale=0.2, size=(27, 3))
        self.source = LidarSource(pts, rng.normal(size=(27, c)), radius=1.5)
        self.image = Tensor(rng.uniform(size=cfg.scene.image_hw + (3,)))
        cloud = np.column_stack([
            rng.uniform(6.0, 20.0, size=200),
            rng.uniform(-4.0, 4.0, size=200),
            rng.uniform(-1.5, 1.0, size=200),
            rng.uniform(0.0, 1.0, size=200),
        ])
        self.depth = depth_map(PointCloud(cloud), self.camera, cfg.scene.completion_min_neighbors)
        self.probe: Dict[Tuple[int, ...], Tensor] = {}
        self._rng = rng

    def probe_for(self, shape: Tuple[int, ...]) -> Tensor:
        # a random projection keeps LayerNorm outputs from summing to a constant
        if shape not in self.probe:
            self.probe[shape] = Tensor(self._rng.normal(size=shape))
        return self.probe[shape]


def _scalar(fixture: _Fixture, out: Tensor) -> Tensor:
    return sum_all(mul(out, fixture.probe_for(out.shape)))


def build_checks(cfg: PipelineConfig, seed: int = 0) -> Dict[str, Tuple[Callable[[ParamSet], Tensor], ParamSet]]:
    """Scalar functions and their parameters, one per suite key."""
    tiny = tiny_config(cfg)
    fx = _Fixture(tiny, seed)
    c = tiny.gcfat.embed_dim
    hp, wp = tiny.gcfat.window

    gda_params = ParamSet.init(
        {**gda_specs("gda", c), "query": ParamSpec((hp * wp, c), "weight", c)}, seed
    )

    def gda_fn(p: ParamSet) -> Tensor:
        q_g = GlobalQuery.from_tokens(p["query"], (hp, wp))
        return _scalar(fx, gda(fx.feat, q_g, tiny.gcfat, p, seed, prefix="gda"))

    sffa_params = ParamSet.init(sffa_specs(tiny.sffa), seed)

    def sffa_fn(p: ParamSet) -> Tensor:
        return _scalar(fx, sffa_forward(fx.f_lidar, fx.f_gcfat, tiny.sffa, p))

    vga_params = ParamSet.init(vga_specs(tiny.vga, c, c), seed)

    def vga_fn(p: ParamSet) -> Tensor:
        return _scalar(fx, vga_forward(fx.box, fx.source, fx.f_gcfat, fx.camera, tiny.vga, p))

    composed_specs: Dict[str, ParamSpec] = {}
    composed_specs.update(gcfat_specs(tiny.gcfat))
    composed_specs.update(sffa_specs(tiny.sffa))
    composed_specs.update(vga_specs(tiny.vga, c, c))
    composed_specs.update(refine_specs(tiny.detect, tiny.vga))
    composed_params = ParamSet.init(composed_specs, seed)
    grid_pts = roi_grid_points(fx.box, tiny.vga.grid_size, tiny.vga.margin)
    pooled = Tensor(pool_lidar(grid_pts, fx.source))

    def composed_fn(p: ParamSet) -> Tensor:
        f_gcfat = gcfat_forward(fx.image, fx.depth, tiny.gcfat, p, seed)
        f_sffa = sffa_forward(fx.f_lidar, f_gcfat, tiny.sffa, p)
        lidar = linear(pooled, p, "vga.lidar_proj", "vga")
        fused = vga_fuse(lidar, pool_image(grid_pts, f_sffa, fx.camera), tiny.vga, p)
        return _scalar(fx, refine_outputs([fused], p, tiny.detect, tiny.vga))

    return {
        "gda": (gda_fn, gda_params),
        "sffa": (sffa_fn, sffa_params),
        "vga": (vga_fn, vga_params),
        "composed": (composed_fn, composed_params),
    }


def run_grad_suite(cfg: PipelineConfig, h: float = 1e-6, max_entries: int = 6, seed: Optional[int] = None) -> Dict[str, Dict[str, float]]:
    """Per block, the max relative error of every parameter."""
    seed = cfg.seed if seed is None else seed
    report: Dict[str, Dict[str, float]] = {}
    for key, (fn, params) in build_checks(cfg, seed).items():
        report[key] = grad_check_report(fn, params, h=h, max_entries=max_entries, seed=seed)
        logger.info("grad check %s: max rel err %.3e", key, max(report[key].values()))
    return report


def suite_passed(report: Dict[str, Dict[str, float]], tolerance: float = GRAD_TOLERANCE) -> bool:
    return all(err < tolerance for block in report.values() for err in block.values())
