"""
Scene augmentation: joint rigid transforms of points, boxes and camera, global scaling
and per-box noise
"""

import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

# Add parent directory to path
sys.path.append(str(Path(__file__).parent.parent))

from config import SceneConfig
from errors import ConfigurationError
from model.numerics import Tensor
from utils.box_ops import Box3D, bev_intersection, points_in_box, rotation_z
from utils.scene import CameraModel, PointCloud, Scene, render_image

logger = logging.getLogger(__name__)


def transform_matrix(yaw: float, flip: bool = False) -> np.ndarray:
    """Mirror across the x axis (y -> -y) when `flip`, then rotate by `yaw` about +z."""
    mirror = np.diag([1.0, -1.0, 1.0]) if flip else np.eye(3)
    return Rotation.from_euler("z", yaw).as_matrix() @ mirror


def transform_box(box: Box3D, yaw: float, translation: Sequence[float] = (0.0, 0.0, 0.0), flip: bool = False) -> Box3D:
    center = transform_matrix(yaw, flip) @ np.asarray(box.center) + np.asarray(translation, dtype=np.float64)
    heading = (-box.yaw if flip else box.yaw) + yaw
    return Box3D(tuple(center), box.size, heading, label=box.label, score=box.score, difficulty=box.difficulty)


def transform_camera(cam: CameraModel, yaw: float, translation: Sequence[float] = (0.0, 0.0, 0.0), flip: bool = False) -> CameraModel:
    """Extrinsics that see the transformed world exactly as `cam` saw the original."""
    a = transform_matrix(yaw, flip)
    rotation = cam.rotation @ a.T
    translation = cam.translation - rotation @ np.asarray(translation, dtype=np.float64)
    return CameraModel(cam.fx, cam.fy, cam.cx, cam.cy, rotation, translation, cam.height, cam.width)


def transform_scene(scene: Scene, yaw: float, translation: Sequence[float] = (0.0, 0.0, 0.0), flip: bool = False) -> Scene:
    a = transform_matrix(yaw, flip)
    pts = scene.cloud.points.copy()
    pts[:, :3] = pts[:, :3] @ a.T + np.asarray(translation, dtype=np.float64)
    return Scene(
        boxes=[transform_box(b, yaw, translation, flip) for b in scene.boxes],
        cloud=PointCloud(pts),
        image=scene.image,
        camera=transform_camera(scene.camera, yaw, translation, flip),
        seed=scene.seed,
    )


def augment_scene(
    scene: Scene,
    seed: int,
    max_rotation: float = math.pi / 4,
    allow_flip: bool = True,
    scale_range: Optional[Tuple[float, float]] = None,
    box_noise: bool = False,
) -> Scene:
    """Random global rotation about the vertical axis and optional mirror flip.

    With `box_noise` every box is jittered first; with `scale_range` the rotated scene is
    then scaled by a factor drawn from it. The camera moves with the world, so global steps
    leave the image unchanged.
    """
    rng = np.random.default_rng(int(seed) % (2 ** 63))
    yaw = float(rng.uniform(-max_rotation, max_rotation))
    flip = bool(allow_flip and rng.random() < 0.5)
    if box_noise:
        scene = jitter_boxes(scene, int(rng.integers(2 ** 62)))
    scene = transform_scene(scene, yaw, flip=flip)
    if scale_range is not None:
        scene = scale_scene(scene, float(rng.uniform(*scale_range)))
    return scene


def scale_scene(scene: Scene, factor: float) -> Scene:
    """Uniform scaling about the sensor origin: points, box centres and sizes together.

    The camera translation scales too, so every point keeps its pixel and only depth changes.
    """
    if not factor > 0:
        raise ConfigurationError(f"scale factor must be positive, got {factor}", module="augment")
    pts = scene.cloud.points.copy()
    pts[:, :3] *= factor
    boxes = [
        Box3D(tuple(factor * np.asarray(b.center)), tuple(factor * np.asarray(b.size)), b.yaw,
              label=b.label, score=b.score, difficulty=b.difficulty)
        for b in scene.boxes
    ]
    cam = scene.camera
    camera = CameraModel(cam.fx, cam.fy, cam.cx, cam.cy, cam.rotation, factor * cam.translation, cam.height, cam.width)
    return Scene(boxes=boxes, cloud=PointCloud(pts), image=scene.image, camera=camera, seed=scene.seed)


def jitter_boxes(
    scene: Scene,
    seed: int,
    max_translation: float = 0.25,
    max_rotation: float = math.pi / 20,
    max_tries: int = 10,
    background: Sequence[float] = SceneConfig.background,
) -> Scene:
    """Per-box noise: each box and the points inside it move by a small random yaw and shift.

    A draw that would make a box overlap another in BEV is rejected; after `max_tries`
    rejections the box stays put. The image is re-rendered from the moved boxes.
    """
    rng = np.random.default_rng(int(seed) % (2 ** 63))
    pts = scene.cloud.points.copy()
    inside = [points_in_box(scene.cloud.points, b) for b in scene.boxes]
    boxes = list(scene.boxes)
    for i, box in enumerate(boxes):
        for _ in range(max_tries):
            dyaw = float(rng.uniform(-max_rotation, max_rotation))
            shift = np.append(rng.uniform(-max_translation, max_translation, size=2), 0.0)
            center = np.asarray(box.center) + shift
            moved = Box3D(tuple(center), box.size, box.yaw + dyaw, label=box.label, score=box.score,
                          difficulty=box.difficulty)
            if all(bev_intersection(moved, other) <= 0.0 for j, other in enumerate(boxes) if j != i):
                break
        else:
            logger.debug("box %d kept in place after %d rejected draws", i, max_tries)
            continue
        local = pts[inside[i], :3] - np.asarray(box.center)
        pts[inside[i], :3] = local @ rotation_z(dyaw).T + center
        boxes[i] = moved
    image = Tensor(render_image(boxes, scene.camera, background))
    return Scene(boxes=boxes, cloud=PointCloud(pts), image=image, camera=scene.camera, seed=scene.seed)
