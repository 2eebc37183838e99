"""
Oriented 3D boxes: rotated BEV overlap, NMS and the residual box codec
"""

import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

# Add parent directory to path
sys.path.append(str(Path(__file__).parent.parent))

from errors import InputError

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Map an angle to [-pi, pi); angles already inside are returned unchanged."""
    if -math.pi <= theta < math.pi:
        return float(theta)
    wrapped = (theta + math.pi) % TWO_PI - math.pi
    # the modulo can land exactly on +pi through rounding
    return -math.pi if wrapped >= math.pi else wrapped


@dataclass(frozen=True)
class Box3D:
    """Oriented box: center (m), size l/w/h (m), yaw about +z"""

    center: Tuple[float, float, float]
    size: Tuple[float, float, float]
    yaw: float = 0.0
    label: int = 0
    score: float = 1.0
    difficulty: int = 1

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise InputError("box needs 3 center and 3 size values", module="detect")
        if not all(math.isfinite(v) for v in center + size) or not math.isfinite(self.yaw):
            raise InputError("box values must be finite", module="detect")
        if min(size) <= 0:
            raise InputError(f"box sizes must be positive, got {size}", module="detect")
        if not 0.0 <= self.score <= 1.0:
            raise InputError(f"box score {self.score} outside [0, 1]", module="detect")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "score", float(self.score))

    @property
    def volume(self) -> float:
        l, w, h = self.size
        return l * w * h

    @property
    def z_range(self) -> Tuple[float, float]:
        half = self.size[2] / 2.0
        return self.center[2] - half, self.center[2] + half

    def with_score(self, score: float) -> "Box3D":
        return replace(self, score=score)


def rotation_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def box_corners_bev(box: Box3D) -> np.ndarray:
    """Four BEV corners (x, y), counter-clockwise."""
    l, w, _ = box.size
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array(box.center[:2])


def box_corners_3d(box: Box3D) -> np.ndarray:
    """Eight corners (x, y, z): bottom face then top face."""
    bev = box_corners_bev(box)
    z0, z1 = box.z_range
    return np.vstack([np.column_stack([bev, np.full(4, z0)]), np.column_stack([bev, np.full(4, z1)])])


def points_in_box(points: np.ndarray, box: Box3D, tol: float = 0.0) -> np.ndarray:
    """Boolean mask of points (N x >=3) inside the box, faces inclusive."""
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    local = (points[:, :3] - np.array(box.center)) @ rotation_z(box.yaw)
    half = np.array(box.size) / 2.0 + tol
    return np.all(np.abs(local) <= half, axis=1)


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a simple polygon (vertices in order)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip `subject` by the convex counter-clockwise `clip`."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        e0, e1 = clip[i], clip[(i + 1) % n]
        edge = e1 - e0
        points, output = output, []

        def inside(p):
            return edge[0] * (p[1] - e0[1]) - edge[1] * (p[0] - e0[0]) >= 0.0

        def intersect(p, q):
            d = (q[0] - p[0], q[1] - p[1])
            denom = edge[0] * d[1] - edge[1] * d[0]
            t = (edge[1] * (p[0] - e0[0]) - edge[0] * (p[1] - e0[1])) / denom
            return (p[0] + t * d[0], p[1] + t * d[1])

        prev = points[-1]
        for cur in points:
            if inside(cur):
                if not inside(prev):
                    output.append(intersect(prev, cur))
                output.append(cur)
            elif inside(prev):
                output.append(intersect(prev, cur))
            prev = cur
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def _same_footprint(a: Box3D, b: Box3D) -> bool:
    return a.center[:2] == b.center[:2] and a.size[:2] == b.size[:2] and a.yaw == b.yaw


def _far_apart(a: Box3D, b: Box3D) -> bool:
    ra = 0.5 * math.hypot(a.size[0], a.size[1])
    rb = 0.5 * math.hypot(b.size[0], b.size[1])
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) > ra + rb


def bev_intersection(a: Box3D, b: Box3D) -> float:
    if _far_apart(a, b):
        return 0.0
    return polygon_area(clip_polygon(box_corners_bev(a), box_corners_bev(b)))


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Exact rotated-rectangle IoU in bird's-eye view."""
    if _same_footprint(a, b):
        return 1.0
    inter = bev_intersection(a, b)
    if inter <= 0.0:
        return 0.0
    area_a = a.size[0] * a.size[1]
    area_b = b.size[0] * b.size[1]
    return float(min(1.0, max(0.0, inter / (area_a + area_b - inter))))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """BEV intersection times vertical overlap over the union volume."""
    if _same_footprint(a, b) and a.z_range == b.z_range:
        return 1.0
    z_overlap = min(a.z_range[1], b.z_range[1]) - max(a.z_range[0], b.z_range[0])
    if z_overlap <= 0.0:
        return 0.0
    inter = bev_intersection(a, b) * z_overlap
    if inter <= 0.0:
        return 0.0
    return float(min(1.0, max(0.0, inter / (a.volume + b.volume - inter))))


def nms(
    dets: Sequence[Box3D],
    iou_thresh: float,
    top_n: Optional[int] = None,
    iou_fn: Callable[[Box3D, Box3D], float] = bev_iou,
) -> List[Box3D]:
    """Greedy NMS by descending score; equal scores keep input order.

    A box is dropped when its IoU with any kept box exceeds `iou_thresh`.
    """
    if not 0.0 <= iou_thresh <= 1.0:
        raise InputError(f"NMS threshold {iou_thresh} outside [0, 1]", module="detect")
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    limit = len(dets) if top_n is None else top_n
    kept: List[Box3D] = []
    for i in order:
        if len(kept) >= limit:
            break
        candidate = dets[i]
        if all(iou_fn(candidate, k) <= iou_thresh for k in kept):
            kept.append(candidate)
    return kept


# ----------------------------------------------------------------------
# Residual codec
# ----------------------------------------------------------------------
def encode_residuals(box: Box3D, anchor: Box3D) -> np.ndarray:
    """(dx, dy, dz, dl, dw, dh, dyaw) of `box` relative to `anchor`."""
    la, wa, ha = anchor.size
    diag = math.hypot(la, wa)
    return np.array([
        (box.center[0] - anchor.center[0]) / diag,
        (box.center[1] - anchor.center[1]) / diag,
        (box.center[2] - anchor.center[2]) / ha,
        math.log(box.size[0] / la),
        math.log(box.size[1] / wa),
        math.log(box.size[2] / ha),
        wrap_angle(box.yaw - anchor.yaw),
    ])


def decode_residuals(residuals: np.ndarray, anchor: Box3D, score: Optional[float] = None, label: Optional[int] = None) -> Box3D:
    """Inverse of encode_residuals."""
    r = np.asarray(residuals, dtype=np.float64)
    la, wa, ha = anchor.size
    diag = math.hypot(la, wa)
    # keep exp() finite for wild residuals from untrained heads
    log_sizes = np.clip(r[3:6], -20.0, 20.0)
    return Box3D(
        center=(anchor.center[0] + r[0] * diag, anchor.center[1] + r[1] * diag, anchor.center[2] + r[2] * ha),
        size=(la * math.exp(log_sizes[0]), wa * math.exp(log_sizes[1]), ha * math.exp(log_sizes[2])),
        yaw=anchor.yaw + float(r[6]),
        label=anchor.label if label is None else label,
        score=anchor.score if score is None else score,
        difficulty=anchor.difficulty,
    )
