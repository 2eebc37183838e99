"""
Synthetic paired LiDAR/camera scenes and the LiDAR-to-image depth projection
"""

import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError

# Add parent directory to path
sys.path.append(str(Path(__file__).parent.parent))

from config import Config, SceneConfig
from errors import GenerationError, InputError
from model.numerics import Tensor
from utils.box_ops import Box3D, bev_intersection, box_corners_3d, points_in_box, rotation_z

logger = logging.getLogger(__name__)


@dataclass
class PointCloud:
    """LiDAR points as a T x 4 array of (u, v, w, r)"""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(pts)):
            raise InputError("point cloud contains non-finite values", module="scene")
        if len(pts) and (pts[:, 3].min() < 0.0 or pts[:, 3].max() > 1.0):
            raise InputError("reflectance must lie in [0, 1]", module="scene")
        self.points = pts

    @property
    def count(self) -> int:
        return int(len(self.points))

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


@dataclass
class CameraModel:
    """Pinhole camera: p_cam = R p_world + t, pixel = (fx x/z + cx, fy y/z + cy)"""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise InputError("camera focal lengths must be positive", module="scene")
        if self.height <= 0 or self.width <= 0:
            raise InputError("camera image size must be positive", module="scene")
        if np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3))) > 1e-9:
            raise InputError("camera rotation is not orthonormal", module="scene")

    def to_camera(self, xyz: np.ndarray) -> np.ndarray:
        return np.asarray(xyz, dtype=np.float64).reshape(-1, 3) @ self.rotation.T + self.translation

    def project(self, xyz: np.ndarray):
        """Continuous pixel coordinates (u, v) and camera depth for world points."""
        cam = self.to_camera(xyz)
        depth = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[:, 0] / depth + self.cx
            v = self.fy * cam[:, 1] / depth + self.cy
        return u, v, depth

    def backproject(self, u: np.ndarray, v: np.ndarray, depth: np.ndarray) -> np.ndarray:
        cam = np.column_stack([(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth])
        return (cam - self.translation) @ self.rotation


def camera_from_config(cfg: SceneConfig) -> CameraModel:
    """Forward-looking camera at the LiDAR origin (+x forward, +z up in the world)."""
    height, width = cfg.image_hw
    fx = (width / 2.0) / math.tan(math.radians(cfg.fov_deg) / 2.0)
    # world (x fwd, y left, z up) -> camera (x right, y down, z fwd)
    rotation = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    translation = -rotation @ np.asarray(cfg.camera_offset, dtype=np.float64)
    return CameraModel(fx, fx, width / 2.0, height / 2.0, rotation, translation, height, width)


@dataclass
class Projection:
    """Points that land inside the image, one entry per emitted point"""

    rows: np.ndarray
    cols: np.ndarray
    depths: np.ndarray
    index: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def as_tuples(self):
        return [(int(r), int(c), float(d)) for r, c, d in zip(self.rows, self.cols, self.depths)]


def project_points(cloud: PointCloud, cam: CameraModel) -> Projection:
    """Apply the LiDAR-to-image projection; points behind or outside the frustum are dropped."""
    u, v, depth = cam.project(cloud.xyz)
    with np.errstate(invalid="ignore"):
        front = depth > 0
        cols = np.floor(np.where(front, u, -1.0))
        rows = np.floor(np.where(front, v, -1.0))
        keep = front & (cols >= 0) & (cols < cam.width) & (rows >= 0) & (rows < cam.height)
    idx = np.nonzero(keep)[0]
    return Projection(
        rows=rows[idx].astype(np.int64),
        cols=cols[idx].astype(np.int64),
        depths=depth[idx],
        index=idx,
        u=u[idx],
        v=v[idx],
    )


@dataclass
class DepthMap:
    """Single-channel sparse depth image; 0.0 marks an empty pixel.

    `measured` flags pixels hit directly by a LiDAR point, `valid` adds the
    pixels filled by completion. `source` and `subpixel` remember which point
    each valid pixel came from and where exactly it projected.
    """

    depth: np.ndarray
    valid: np.ndarray
    measured: np.ndarray
    source: np.ndarray
    subpixel: np.ndarray

    @property
    def height(self) -> int:
        return int(self.depth.shape[0])

    @property
    def width(self) -> int:
        return int(self.depth.shape[1])

    @property
    def num_valid(self) -> int:
        return int(self.valid.sum())

    def as_channels(self, channels: int = 3) -> np.ndarray:
        """H x W x channels copy of the depth (the image-shaped view of the map)."""
        return np.repeat(self.depth[:, :, None], channels, axis=2)

    @classmethod
    def empty(cls, height: int, width: int) -> "DepthMap":
        return cls(
            depth=np.zeros((height, width)),
            valid=np.zeros((height, width), dtype=bool),
            measured=np.zeros((height, width), dtype=bool),
            source=np.full((height, width), -1, dtype=np.int64),
            subpixel=np.zeros((height, width, 2)),
        )


# 8-neighbourhood in fixed scan order; ties in the completion min go to the first
_NEIGHBOURS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def depth_map(cloud: PointCloud, cam: CameraModel, min_neighbors: int = 4) -> DepthMap:
    """Z-buffered sparse depth plus one pass of 3x3 min-pool hole filling."""
    dm = DepthMap.empty(cam.height, cam.width)
    proj = project_points(cloud, cam)
    if len(proj.index) == 0:
        return dm

    flat = proj.rows * cam.width + proj.cols
    # nearest point wins; equal depths fall back to the lower point index
    order = np.lexsort((proj.index, proj.depths, flat))
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat[order][1:] != flat[order][:-1]
    win = order[first]

    r, c = proj.rows[win], proj.cols[win]
    dm.depth[r, c] = proj.depths[win]
    dm.measured[r, c] = True
    dm.source[r, c] = proj.index[win]
    dm.subpixel[r, c, 0] = proj.u[win]
    dm.subpixel[r, c, 1] = proj.v[win]

    # completion reads only measured pixels
    h, w = cam.height, cam.width
    pad_depth = np.pad(np.where(dm.measured, dm.depth, np.inf), 1, constant_values=np.inf)
    count = np.zeros((h, w), dtype=np.int64)
    best = np.full((h, w), np.inf)
    best_k = np.full((h, w), -1, dtype=np.int64)
    for k, (dr, dc) in enumerate(_NEIGHBOURS):
        shifted = pad_depth[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        finite = np.isfinite(shifted)
        count += finite
        better = shifted < best
        best = np.where(better, shifted, best)
        best_k = np.where(better, k, best_k)

    fill = (~dm.measured) & (count >= min_neighbors)
    dm.valid = dm.measured.copy()
    for rr, cc in zip(*np.nonzero(fill)):
        dr, dc = _NEIGHBOURS[best_k[rr, cc]]
        sr, sc = rr + dr, cc + dc
        dm.depth[rr, cc] = dm.depth[sr, sc]
        dm.source[rr, cc] = dm.source[sr, sc]
        dm.subpixel[rr, cc] = dm.subpixel[sr, sc]
        dm.valid[rr, cc] = True
    logger.debug("depth map: %d measured, %d completed", int(dm.measured.sum()), int(fill.sum()))
    return dm


def backproject(dm: DepthMap, cam: CameraModel) -> np.ndarray:
    """World positions of all valid pixels (row-major order)."""
    rows, cols = np.nonzero(dm.valid)
    u = dm.subpixel[rows, cols, 0]
    v = dm.subpixel[rows, cols, 1]
    return cam.backproject(u, v, dm.depth[rows, cols])


@dataclass
class Scene:
    boxes: List[Box3D]
    cloud: PointCloud
    image: Tensor
    camera: CameraModel
    seed: int = 0


# ----------------------------------------------------------------------
# Generator
# ----------------------------------------------------------------------
def _place_boxes(cfg: SceneConfig, rng: np.random.Generator) -> List[Box3D]:
    probs = np.asarray(cfg.class_probs, dtype=np.float64)
    probs = probs / probs.sum()
    half_fov = math.radians(cfg.fov_deg) / 2.0
    boxes: List[Box3D] = []
    for i in range(cfg.n_boxes):
        for attempt in range(cfg.max_retries):
            label = int(rng.choice(Config.NUM_CLASSES, p=probs))
            size = np.array(Config.CLASSES[label]['anchor']) * rng.uniform(0.9, 1.1, size=3)
            rng_m = rng.uniform(cfg.range_min, cfg.range_max)
            azimuth = rng.uniform(-0.8 * half_fov, 0.8 * half_fov)
            yaw = rng.uniform(-math.pi, math.pi)
            center = (rng_m * math.cos(azimuth), rng_m * math.sin(azimuth), -cfg.sensor_height + size[2] / 2.0)
            candidate = Box3D(center, tuple(size), yaw, label=label)
            if all(bev_intersection(candidate, other) <= 0.0 for other in boxes):
                boxes.append(candidate)
                break
        else:
            raise GenerationError(
                f"could not place box {i + 1} of {cfg.n_boxes} without overlap after {cfg.max_retries} tries"
            )
    return boxes


def _sample_box_surface(box: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the faces of `box` that face the sensor origin."""
    l, w, h = box.size
    center = np.array(box.center)
    rot = rotation_z(box.yaw)
    # (axis, sign, face area) in the box frame; bottom face never visible
    faces = [(0, 1, w * h), (0, -1, w * h), (1, 1, l * h), (1, -1, l * h), (2, 1, l * w)]
    half = np.array([l, w, h]) / 2.0
    visible = []
    for axis, sign, area in faces:
        normal = rot[:, axis] * sign
        face_center = center + normal * half[axis]
        if float(np.dot(normal, -face_center)) > 0.0:
            visible.append((axis, sign, area))
    if not visible:
        visible = [(2, 1, l * w)]

    areas = np.array([f[2] for f in visible])
    choice = rng.choice(len(visible), size=n, p=areas / areas.sum())
    local = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    for k, (axis, sign, _) in enumerate(visible):
        local[choice == k, axis] = sign * half[axis]
    return local @ rot.T + center


def _add_range_noise(xyz: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if len(xyz) == 0 or sigma == 0:
        return xyz
    dist = np.linalg.norm(xyz, axis=1, keepdims=True)
    direction = xyz / np.maximum(dist, 1e-12)
    return xyz + direction * rng.normal(0.0, sigma, size=(len(xyz), 1))


def _box_points(box: Box3D, cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    rng_m = math.hypot(box.center[0], box.center[1])
    expected = cfg.box_points_at_10m * (10.0 / max(rng_m, 1e-3)) ** 2
    n = max(1, int(rng.poisson(expected)))
    xyz = _add_range_noise(_sample_box_surface(box, n, rng), cfg.lidar_noise, rng)
    if not points_in_box(xyz, box).any():
        # guarantee one return: the nearest face centre nudged 1 cm inward
        face = _sample_box_surface(box, 1, np.random.default_rng(0))[0]
        toward = np.array(box.center) - face
        xyz = np.vstack([xyz, face + 0.01 * toward / max(np.linalg.norm(toward), 1e-12)])
    base = 0.55 + 0.1 * box.label
    refl = np.clip(base + rng.uniform(-0.15, 0.15, size=len(xyz)), 0.0, 1.0)
    return np.column_stack([xyz, refl])


def _ground_points(cfg: SceneConfig, boxes: List[Box3D], rng: np.random.Generator) -> np.ndarray:
    n = cfg.ground_points
    if n == 0:
        return np.zeros((0, 4))
    # area density ~ 1/r^2 makes the radius log-uniform
    radius = np.exp(rng.uniform(math.log(2.0), math.log(cfg.range_max * 1.2), size=n))
    azimuth = rng.uniform(-math.pi, math.pi, size=n)
    xyz = np.column_stack([radius * np.cos(azimuth), radius * np.sin(azimuth), np.full(n, -cfg.sensor_height)])
    xyz = _add_range_noise(xyz, cfg.lidar_noise, rng)
    refl = rng.uniform(0.05, 0.3, size=n)
    pts = np.column_stack([xyz, refl])
    if boxes:
        under = np.zeros(n, dtype=bool)
        for box in boxes:
            under |= points_in_box(pts, box, tol=0.05)
        pts = pts[~under]
    return pts


def render_image(boxes: List[Box3D], cam: CameraModel, background) -> np.ndarray:
    """Flat-shaded boxes painted far to near over a constant background."""
    image = np.empty((cam.height, cam.width, 3))
    image[:] = np.asarray(background, dtype=np.float64)
    cols, rows = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
    pix = np.column_stack([cols.ravel(), rows.ravel()])

    for box in sorted(boxes, key=lambda b: -math.hypot(b.center[0], b.center[1])):
        u, v, depth = cam.project(box_corners_3d(box))
        if np.any(depth <= 0.1):
            continue
        try:
            hull = ConvexHull(np.column_stack([u, v]))
        except QhullError:
            continue
        inside = np.all(pix @ hull.equations[:, :2].T + hull.equations[:, 2] <= 0.0, axis=1)
        shade = 0.75 + 0.25 * math.cos(box.yaw)
        color = np.clip(np.array(Config.CLASSES[box.label]['color']) * shade, 0.0, 1.0)
        image.reshape(-1, 3)[inside] = color
    return image


def synth_scene(cfg: SceneConfig, seed: int) -> Scene:
    """Generate a deterministic scene: boxes, LiDAR returns and a rendered image."""
    cfg.validate()
    rng = np.random.default_rng(int(seed) % (2 ** 63))
    boxes = _place_boxes(cfg, rng)

    box_parts = [_box_points(box, cfg, rng) for box in boxes]
    box_pts = np.vstack(box_parts) if box_parts else np.zeros((0, 4))
    ground = _ground_points(cfg, boxes, rng)
    budget = max(0, cfg.max_points - len(box_pts))
    ground = ground[:budget]
    cloud = PointCloud(np.vstack([box_pts, ground]))

    labelled = []
    for box in boxes:
        hits = int(points_in_box(cloud.points, box).sum())
        difficulty = 2 if hits < Config.L2_POINT_THRESHOLD else 1
        labelled.append(Box3D(box.center, box.size, box.yaw, label=box.label, score=1.0, difficulty=difficulty))

    cam = camera_from_config(cfg)
    image = render_image(labelled, cam, cfg.background)
    logger.debug("scene seed=%d: %d boxes, %d points", seed, len(labelled), cloud.count)
    return Scene(boxes=labelled, cloud=cloud, image=Tensor(image), camera=cam, seed=int(seed))
