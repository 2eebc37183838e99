"""
Proposal head on the LiDAR BEV map and the refinement head over fused RoI grids
"""

import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit

# Add parent directory to path
sys.path.append(str(Path(__file__).parent.parent))

from config import Config, DetectConfig, VgaConfig, VoxelConfig
from errors import DimensionError, InputError
from model.numerics import ParamSet, ParamSpec, Tensor, concat, linear, linear_specs, mlp, mlp_specs, reshape
from model.voxel import bev_cell_centers
from utils.box_ops import Box3D, decode_residuals, encode_residuals, nms

logger = logging.getLogger(__name__)

MODULE = "detect"

# objectness logit + (dx, dy, dz, dl, dw, dh, dyaw)
HEAD_WIDTH = 8
ORACLE_LOGIT = 10.0


@dataclass
class ProposalSet:
    """Proposals sorted by descending objectness"""

    boxes: List[Box3D] = field(default_factory=list)

    @property
    def scores(self) -> np.ndarray:
        return np.array([b.score for b in self.boxes])

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)


def rpn_specs(channels: int, prefix: str = "rpn") -> Dict[str, ParamSpec]:
    return linear_specs(f"{prefix}.head", channels, Config.NUM_CLASSES * HEAD_WIDTH)


def refine_specs(cfg: DetectConfig, vga_cfg: VgaConfig, prefix: str = "refine") -> Dict[str, ParamSpec]:
    flat = vga_cfg.grid_size ** 3 * vga_cfg.out_dim
    return mlp_specs(f"{prefix}.head", (flat, cfg.refine_hidden, HEAD_WIDTH))


def anchor_boxes(voxel_cfg: VoxelConfig, cfg: DetectConfig, out_hw: Sequence[int]) -> List[Box3D]:
    """One anchor per BEV cell and class, cells row-major, classes innermost."""
    centers = bev_cell_centers(voxel_cfg, out_hw).reshape(-1, 2)
    anchors = []
    for x, y in centers:
        for label in range(Config.NUM_CLASSES):
            l, w, h = Config.CLASSES[label]["anchor"]
            anchors.append(Box3D((x, y, cfg.ground_z + h / 2.0), (l, w, h), 0.0, label=label))
    return anchors


def decode_proposals(
    head: np.ndarray,
    voxel_cfg: VoxelConfig,
    cfg: DetectConfig,
    occupancy: Optional[np.ndarray] = None,
) -> ProposalSet:
    """Turn raw head outputs (H x W x K*8) into NMS-filtered proposals.

    Candidates below `score_threshold`, or on cells that `occupancy` marks
    empty, are dropped; equal scores keep the row-major cell order, class id
    breaking ties inside a cell.
    """
    h, w = head.shape[:2]
    raw = np.asarray(head, dtype=np.float64).reshape(h * w * Config.NUM_CLASSES, HEAD_WIDTH)
    scores = expit(raw[:, 0])
    allowed = np.ones(len(raw), dtype=bool)
    if occupancy is not None:
        allowed = np.repeat(np.asarray(occupancy, dtype=bool).reshape(-1), Config.NUM_CLASSES)
    anchors = anchor_boxes(voxel_cfg, cfg, (h, w))
    order = np.argsort(-scores, kind="stable")
    candidates = [
        decode_residuals(raw[i, 1:], anchors[i], score=float(scores[i]), label=anchors[i].label)
        for i in order
        if allowed[i] and scores[i] >= cfg.score_threshold
    ]
    kept = nms(candidates, cfg.proposal_iou, top_n=cfg.proposal_top_n)
    logger.debug("proposals: %d candidates, %d kept", len(candidates), len(kept))
    return ProposalSet(kept)


def rpn_head(f_lidar_bev, params: ParamSet, prefix: str = "rpn") -> Tensor:
    """1x1 linear head per BEV cell."""
    return linear(f_lidar_bev, params, f"{prefix}.head", MODULE)


def propose(
    f_lidar_bev,
    params: ParamSet,
    cfg: DetectConfig,
    voxel_cfg: VoxelConfig,
    occupancy: Optional[np.ndarray] = None,
    prefix: str = "rpn",
) -> ProposalSet:
    return decode_proposals(rpn_head(f_lidar_bev, params, prefix).data, voxel_cfg, cfg, occupancy)


def oracle_head(gt_boxes: Sequence[Box3D], voxel_cfg: VoxelConfig, cfg: DetectConfig, out_hw: Sequence[int]) -> np.ndarray:
    """Head outputs that place one confident proposal on each ground-truth box.

    Every other candidate gets objectness -10. Used by the oracle-assisted
    harness mode only.
    """
    h, w = out_hw
    head = np.zeros((h, w, Config.NUM_CLASSES, HEAD_WIDTH))
    head[..., 0] = -ORACLE_LOGIT
    x0, y0, _, x1, y1, _ = voxel_cfg.point_range
    anchors = anchor_boxes(voxel_cfg, cfg, out_hw)
    for box in gt_boxes:
        r = int(np.floor((box.center[0] - x0) / (x1 - x0) * h))
        c = int(np.floor((box.center[1] - y0) / (y1 - y0) * w))
        if not (0 <= r < h and 0 <= c < w):
            continue
        anchor = anchors[(r * w + c) * Config.NUM_CLASSES + box.label]
        head[r, c, box.label, 0] = ORACLE_LOGIT
        head[r, c, box.label, 1:] = encode_residuals(box, anchor)
    return head.reshape(h, w, Config.NUM_CLASSES * HEAD_WIDTH)


def refine_outputs(vga_feats: Sequence[Tensor], params: ParamSet, cfg: DetectConfig, vga_cfg: VgaConfig, prefix: str = "refine") -> Tensor:
    """N x 8 head outputs (score logit + residuals) from flattened grid features."""
    flat = vga_cfg.grid_size ** 3 * vga_cfg.out_dim
    rows = []
    for feat in vga_feats:
        if feat.size != flat:
            raise DimensionError(f"refine expects {flat} grid values, got {feat.size}", module=MODULE)
        rows.append(reshape(feat, (1, flat)))
    return mlp(concat(rows, axis=0), params, f"{prefix}.head", (flat, cfg.refine_hidden, HEAD_WIDTH), MODULE)


def refine(
    proposals: ProposalSet,
    vga_feats: Sequence[Tensor],
    params: ParamSet,
    cfg: DetectConfig,
    vga_cfg: VgaConfig,
    prefix: str = "refine",
) -> List[Box3D]:
    """Apply refined residuals to each proposal and score it with a sigmoid."""
    if len(proposals) != len(vga_feats):
        raise InputError(f"{len(proposals)} proposals but {len(vga_feats)} feature blocks", module=MODULE)
    if len(proposals) == 0:
        return []
    raw = refine_outputs(vga_feats, params, cfg, vga_cfg, prefix).data
    scores = expit(raw[:, 0])
    return [
        decode_residuals(raw[i, 1:], box, score=float(scores[i]), label=box.label)
        for i, box in enumerate(proposals)
    ]
