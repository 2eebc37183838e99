"""
End-to-end fusion pipeline: depth projection, LiDAR backbone, image encoder,
SFFA, proposals, RoI grid fusion, refinement and final NMS
"""

import dataclasses
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

# Add parent directory to path
sys.path.append(str(Path(__file__).parent.parent))

from config import PipelineConfig
from errors import ConfigurationError, InputError
from model.detector import ProposalSet, decode_proposals, oracle_head, propose, refine, refine_specs, rpn_specs
from model.gcfat import gcfat_forward, gcfat_specs
from model.numerics import ParamSet, ParamSpec, Tensor, assert_finite
from model.sffa import sffa_forward, sffa_specs
from model.vga import lidar_source, vga_forward, vga_specs
from model.voxel import BackboneOutput, backbone_specs, bev_features, bev_occupancy, lidar_backbone
from utils.box_ops import Box3D, nms
from utils.io_formats import format_sparse_grid, save_tensor, write_text
from utils.scene import DepthMap, Scene, depth_map

logger = logging.getLogger(__name__)

ORACLE_SCORE_THRESHOLD = 0.5


def stage_index(stride: int) -> int:
    index = int(round(math.log2(stride)))
    if 2 ** index != stride or not 0 <= index <= 3:
        raise ConfigurationError(f"no backbone stage at stride {stride}", module="pipeline")
    return index


def pipeline_specs(cfg: PipelineConfig) -> Dict[str, ParamSpec]:
    lidar_width = cfg.voxel.stage_widths[stage_index(cfg.vga.lidar_stride)]
    specs: Dict[str, ParamSpec] = {}
    specs.update(backbone_specs(cfg.voxel))
    specs.update(gcfat_specs(cfg.gcfat))
    specs.update(sffa_specs(cfg.sffa))
    specs.update(vga_specs(cfg.vga, lidar_width, cfg.gcfat.embed_dim))
    specs.update(rpn_specs(cfg.voxel.bev_out_dim))
    specs.update(refine_specs(cfg.detect, cfg.vga))
    return specs


def init_params(cfg: PipelineConfig, seed: Optional[int] = None) -> ParamSet:
    """Deterministic parameters for every block (seed defaults to the config seed)."""
    return ParamSet.init(pipeline_specs(cfg), cfg.seed if seed is None else seed)


def oracle_params(params: ParamSet) -> ParamSet:
    """Zero the refinement head so refined boxes equal their proposals."""
    for name in [n for n in params if n.startswith("refine.")]:
        params = params.with_value(name, np.zeros(params[name].shape))
    return params


@dataclass
class PipelineResult:
    detections: List[Box3D]
    proposals: ProposalSet
    depth: DepthMap
    backbone: BackboneOutput
    f_lidar: Tensor
    f_gcfat: Tensor
    f_sffa: Tensor
    vga_feats: List[Tensor] = field(default_factory=list)


def run_pipeline(scene: Scene, cfg: PipelineConfig, params: ParamSet, oracle: Optional[bool] = None) -> PipelineResult:
    """
    Run every stage on one scene

    Args:
        scene: Input bundle (cloud, image, camera; boxes are read only in oracle mode)
        cfg: Validated pipeline configuration
        params: Parameters from init_params
        oracle: Oracle-assisted proposals (defaults to cfg.detect.oracle_proposals)

    Returns:
        PipelineResult with final detections and all intermediate stages
    """
    cfg.validate()
    oracle = cfg.detect.oracle_proposals if oracle is None else oracle
    fusion_hw = tuple(cfg.gcfat.fusion_hw)
    image_hw = tuple(scene.image.shape[:2])
    if image_hw != (scene.camera.height, scene.camera.width):
        raise InputError(f"image {image_hw} does not match the camera", module="pipeline")

    depth = depth_map(scene.cloud, scene.camera, cfg.scene.completion_min_neighbors)
    backbone = lidar_backbone(scene.cloud, cfg.voxel, params)
    bev_grid = backbone.stage(8)
    f_lidar = bev_features(bev_grid, cfg.voxel, fusion_hw, params)
    f_gcfat = gcfat_forward(scene.image, depth, cfg.gcfat, params, seed=cfg.seed)
    f_sffa = sffa_forward(f_lidar, f_gcfat, cfg.sffa, params)
    for name, tensor in (("lidar BEV", f_lidar), ("image features", f_gcfat), ("fused features", f_sffa)):
        assert_finite(tensor, name, module="pipeline")

    if oracle:
        detect_cfg = dataclasses.replace(
            cfg.detect, score_threshold=max(cfg.detect.score_threshold, ORACLE_SCORE_THRESHOLD)
        )
        proposals = decode_proposals(oracle_head(scene.boxes, cfg.voxel, detect_cfg, fusion_hw), cfg.voxel, detect_cfg)
        params = oracle_params(params)
    else:
        proposals = propose(f_lidar, params, cfg.detect, cfg.voxel, occupancy=bev_occupancy(bev_grid, fusion_hw))

    source = lidar_source(backbone.stage(cfg.vga.lidar_stride), cfg.voxel, cfg.vga.radius)
    vga_feats = [vga_forward(box, source, f_sffa, scene.camera, cfg.vga, params) for box in proposals]
    for feat in vga_feats:
        assert_finite(feat, "grid features", module="pipeline")
    refined = refine(proposals, vga_feats, params, cfg.detect, cfg.vga)
    detections = nms(refined, cfg.detect.final_iou)
    logger.info("scene seed=%d: %d proposals, %d detections", scene.seed, len(proposals), len(detections))
    return PipelineResult(
        detections=detections,
        proposals=proposals,
        depth=depth,
        backbone=backbone,
        f_lidar=f_lidar,
        f_gcfat=f_gcfat,
        f_sffa=f_sffa,
        vga_feats=vga_feats,
    )


def dump_stages(result: PipelineResult, directory) -> List[Path]:
    """Write intermediate tensors and sparse grids; returns the written paths."""
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputError(f"cannot create {out}: {e}", module="io") from e

    tensors = {
        "depth.aydt": result.depth.as_channels(3),
        "f_lidar.aydt": result.f_lidar,
        "f_gcfat.aydt": result.f_gcfat,
        "f_sffa.aydt": result.f_sffa,
    }
    if result.backbone.keypoints.count:
        tensors["keypoints.aydt"] = result.backbone.keypoints.positions
    if result.vga_feats:
        tensors["vga.aydt"] = np.stack([f.data for f in result.vga_feats])

    written = []
    for name, tensor in tensors.items():
        save_tensor(tensor, out / name)
        written.append(out / name)
    for grid in result.backbone.stages:
        path = out / f"stage_s{grid.stride}.txt"
        write_text(path, format_sparse_grid(grid))
        written.append(path)
    return written
