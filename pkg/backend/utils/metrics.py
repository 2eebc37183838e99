"""
Utilities for detection matching, AP and heading-weighted APH
"""

import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

# Add parent directory to path
sys.path.append(str(Path(__file__).parent.parent))

from config import Config, EvalConfig
from errors import UndefinedMetricError
from utils.box_ops import Box3D, bev_iou, iou_3d, wrap_angle

logger = logging.getLogger(__name__)

LEVELS = ("l1", "l2")


@dataclass
class MatchResult:
    """Outcome of matching one scene's detections of one class.

    Per-detection arrays follow the input order of the detections.
    """

    scores: np.ndarray
    tp: np.ndarray
    ignored: np.ndarray
    matched_gt: np.ndarray
    heading_error: np.ndarray
    gt_matched: np.ndarray
    gt_ignored: np.ndarray

    @property
    def num_gt(self) -> int:
        """Ground truth that counts towards recall."""
        return int((~self.gt_ignored).sum())

    @property
    def num_tp(self) -> int:
        return int(self.tp.sum())

    @property
    def heading_weight(self) -> np.ndarray:
        return np.where(self.tp, np.maximum(0.0, 1.0 - np.abs(self.heading_error) / math.pi), 0.0)


def match(
    dets: Sequence[Box3D],
    gts: Sequence[Box3D],
    iou_thresh: float,
    label: Optional[int] = None,
    iou_fn: Callable[[Box3D, Box3D], float] = iou_3d,
    gt_ignore: Optional[Sequence[bool]] = None,
    det_ignore: Optional[Sequence[bool]] = None,
) -> MatchResult:
    """
    Greedy matching by descending detection score

    Each detection takes the unmatched ground truth with the highest IoU at or
    above the threshold (lowest index on ties). A detection matched to an
    ignored ground truth, or flagged in `det_ignore` and left unmatched,
    counts as neither TP nor FP.

    Args:
        dets: Detections (scores used for ordering, equal scores keep input order)
        gts: Ground truth boxes
        iou_thresh: Minimum IoU for a match
        label: When given, both lists are restricted to this class first

    Returns:
        MatchResult over the (filtered) detections
    """
    dets = list(dets)
    gts = list(gts)
    gt_ignore = np.zeros(len(gts), dtype=bool) if gt_ignore is None else np.asarray(gt_ignore, dtype=bool)
    det_ignore = np.zeros(len(dets), dtype=bool) if det_ignore is None else np.asarray(det_ignore, dtype=bool)
    if label is not None:
        keep_d = [i for i, d in enumerate(dets) if d.label == label]
        keep_g = [i for i, g in enumerate(gts) if g.label == label]
        dets, det_ignore = [dets[i] for i in keep_d], det_ignore[keep_d]
        gts, gt_ignore = [gts[i] for i in keep_g], gt_ignore[keep_g]

    n_det, n_gt = len(dets), len(gts)
    tp = np.zeros(n_det, dtype=bool)
    ignored = np.zeros(n_det, dtype=bool)
    matched_gt = np.full(n_det, -1, dtype=np.int64)
    heading = np.zeros(n_det)
    gt_matched = np.zeros(n_gt, dtype=bool)

    order = sorted(range(n_det), key=lambda i: -dets[i].score)
    for i in order:
        best, best_iou = -1, iou_thresh
        for j in range(n_gt):
            if gt_matched[j]:
                continue
            iou = iou_fn(dets[i], gts[j])
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            gt_matched[best] = True
            matched_gt[i] = best
            heading[i] = abs(wrap_angle(dets[i].yaw - gts[best].yaw))
            if gt_ignore[best]:
                ignored[i] = True
            else:
                tp[i] = True
        elif det_ignore[i]:
            ignored[i] = True

    return MatchResult(
        scores=np.array([d.score for d in dets], dtype=np.float64),
        tp=tp,
        ignored=ignored,
        matched_gt=matched_gt,
        heading_error=heading,
        gt_matched=gt_matched,
        gt_ignored=gt_ignore,
    )


def _ranked(results: Sequence[MatchResult]):
    """Counted detections of all scenes, ranked by score (stable across scenes)."""
    if not results:
        return np.zeros(0), np.zeros(0, dtype=bool), np.zeros(0), 0
    scores = np.concatenate([r.scores[~r.ignored] for r in results])
    tp = np.concatenate([r.tp[~r.ignored] for r in results])
    weight = np.concatenate([r.heading_weight[~r.ignored] for r in results])
    num_gt = sum(r.num_gt for r in results)
    order = np.argsort(-scores, kind="stable")
    return scores[order], tp[order], weight[order], num_gt


def _curves(results: Sequence[MatchResult]):
    scores, tp, weight, num_gt = _ranked(results)
    if num_gt == 0:
        raise UndefinedMetricError("AP is undefined without ground truth")
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    ctp_h = np.cumsum(weight)
    denom = np.maximum(ctp + cfp, 1)
    return {
        "score": scores,
        "recall": ctp / num_gt,
        "precision": ctp / denom,
        "recall_h": ctp_h / num_gt,
        "precision_h": ctp_h / denom,
    }


def envelope_area(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope (all-points interpolation)."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def ap(results: Sequence[MatchResult]) -> float:
    curves = _curves(results)
    return envelope_area(curves["recall"], curves["precision"])


def aph(results: Sequence[MatchResult]) -> float:
    """AP with every TP weighted by max(0, 1 - |heading error| / pi)."""
    curves = _curves(results)
    return envelope_area(curves["recall_h"], curves["precision_h"])


def pr_curve(results: Sequence[MatchResult]) -> pd.DataFrame:
    return pd.DataFrame(_curves(results), columns=["score", "recall", "precision", "recall_h", "precision_h"])


def _bev_range(box: Box3D) -> float:
    return math.hypot(box.center[0], box.center[1])


def match_scene(dets: Sequence[Box3D], gts: Sequence[Box3D], label: int, level: str, cfg: EvalConfig) -> MatchResult:
    """Class- and level-specific matching for one scene, with the range gate applied."""
    iou_fn = iou_3d if cfg.iou_mode == "3d" else bev_iou
    gt_ignore = [
        (level == "l1" and g.difficulty > 1) or (cfg.max_range > 0 and _bev_range(g) > cfg.max_range)
        for g in gts
    ]
    det_ignore = [cfg.max_range > 0 and _bev_range(d) > cfg.max_range for d in dets]
    return match(dets, gts, cfg.iou_thresholds[label], label=label, iou_fn=iou_fn, gt_ignore=gt_ignore, det_ignore=det_ignore)


@dataclass
class EvalReport:
    """Flat metric values plus the per-class match results they came from"""

    values: Dict[str, float]
    results: Dict[str, List[MatchResult]]

    def to_text(self) -> str:
        lines = []
        for key, value in self.values.items():
            lines.append(f"{key}={value}" if isinstance(value, int) else f"{key}={value:.6f}")
        return "\n".join(lines) + "\n"


def evaluate(
    dets_per_scene: Sequence[Sequence[Box3D]],
    gts_per_scene: Sequence[Sequence[Box3D]],
    cfg: EvalConfig,
) -> EvalReport:
    """
    Per-class AP/APH at L1 and L2, plus means over classes with ground truth

    Args:
        dets_per_scene: Detections, one list per scene
        gts_per_scene: Ground truth, one list per scene (same order)
        cfg: Matching settings

    Returns:
        EvalReport with keys ap.<class>, aph.<class>, ap_l2.<class>, ...
    """
    if len(dets_per_scene) != len(gts_per_scene):
        raise UndefinedMetricError(
            f"{len(dets_per_scene)} detection scenes but {len(gts_per_scene)} ground-truth scenes"
        )
    cfg.validate()
    values: Dict[str, float] = {}
    results: Dict[str, List[MatchResult]] = {}
    means: Dict[str, List[float]] = {key: [] for key in ("map", "maph", "map_l2", "maph_l2")}

    for label in sorted(Config.CLASSES):
        name = Config.class_name(label)
        for level in LEVELS:
            suffix = "" if level == "l1" else "_l2"
            per_scene = [match_scene(d, g, label, level, cfg) for d, g in zip(dets_per_scene, gts_per_scene)]
            results[f"{name}{suffix}"] = per_scene
            num_gt = sum(r.num_gt for r in per_scene)
            values[f"num_gt{suffix}.{name}"] = num_gt
            if level == "l2":
                values[f"num_det.{name}"] = int(sum(len(r.scores) for r in per_scene))
            values[f"tp{suffix}.{name}"] = int(sum(r.num_tp for r in per_scene))
            if num_gt == 0:
                continue
            values[f"ap{suffix}.{name}"] = ap(per_scene)
            values[f"aph{suffix}.{name}"] = aph(per_scene)
            means[f"map{suffix}"].append(values[f"ap{suffix}.{name}"])
            means[f"maph{suffix}"].append(values[f"aph{suffix}.{name}"])

    for key, items in means.items():
        if items:
            values[key] = float(np.mean(items))
    logger.info("evaluated %d scenes", len(gts_per_scene))
    return EvalReport(values=values, results=results)
