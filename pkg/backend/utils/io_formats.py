"""
On-disk formats: tensor dumps, point clouds, cameras, box lists and scene bundles
"""

import math
import sys
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

# Add parent directory to path
sys.path.append(str(Path(__file__).parent.parent))

from config import Config
from errors import ConfigurationError, InputError, ParseError
from model.numerics import Tensor
from utils.box_ops import Box3D
from utils.scene import CameraModel, PointCloud, Scene

PathLike = Union[str, Path]

BOX_HEADER = "# class cx cy cz l w h yaw score"
CLOUD_FILE = "cloud.txt"
IMAGE_FILE = "image.aydt"
CAMERA_FILE = "camera.txt"
BOXES_FILE = "boxes.txt"


def _fmt(value: float) -> str:
    # shortest repr that round-trips exactly
    return repr(float(value))


# ----------------------------------------------------------------------
# Tensor dumps: b"AYDT", u32 rank, u64 extents, little-endian f64 payload
# ----------------------------------------------------------------------
def tensor_to_bytes(tensor: Union[Tensor, np.ndarray]) -> bytes:
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=np.float64)
    header = Config.TENSOR_MAGIC
    header += np.array([data.ndim], dtype="<u4").tobytes()
    header += np.array(data.shape, dtype="<u8").tobytes()
    return header + np.ascontiguousarray(data, dtype="<f8").tobytes()


def tensor_from_bytes(blob: bytes, path: Optional[str] = None) -> Tensor:
    magic = Config.TENSOR_MAGIC
    if blob[:4] != magic:
        raise ParseError("not a tensor file (bad magic)", path=path)
    if len(blob) < 8:
        raise ParseError("truncated tensor header", path=path)
    rank = int(np.frombuffer(blob, dtype="<u4", count=1, offset=4)[0])
    payload_at = 8 + 8 * rank
    if len(blob) < payload_at:
        raise ParseError("truncated tensor header", path=path)
    shape = tuple(int(x) for x in np.frombuffer(blob, dtype="<u8", count=rank, offset=8))
    count = int(np.prod(shape)) if rank else 1
    if len(blob) != payload_at + 8 * count:
        raise ParseError(f"payload size does not match shape {shape}", path=path)
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=payload_at).reshape(shape)
    return Tensor(data.astype(np.float64))


def save_tensor(tensor: Union[Tensor, np.ndarray], path: PathLike) -> None:
    try:
        Path(path).write_bytes(tensor_to_bytes(tensor))
    except OSError as e:
        raise InputError(f"cannot write {path}: {e}", module="io") from e


def load_tensor(path: PathLike) -> Tensor:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise ParseError(f"cannot read tensor: {e}", path=str(path)) from e
    return tensor_from_bytes(blob, path=str(path))


# ----------------------------------------------------------------------
# Point clouds: "u v w r" per line
# ----------------------------------------------------------------------
def format_cloud(cloud: PointCloud) -> str:
    return "".join(" ".join(_fmt(v) for v in row) + "\n" for row in cloud.points)


def parse_cloud(text: str, path: Optional[str] = None) -> PointCloud:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"expected 4 values, got {len(parts)}", path=path, line=lineno)
        try:
            rows.append([float(p) for p in parts])
        except ValueError as e:
            raise ParseError(f"bad number: {e}", path=path, line=lineno) from e
    try:
        return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 4))
    except InputError as e:
        raise ParseError(str(e), path=path) from e


# ----------------------------------------------------------------------
# Cameras: flat key=value text
# ----------------------------------------------------------------------
def format_camera(cam: CameraModel) -> str:
    lines = [
        f"fx={_fmt(cam.fx)}",
        f"fy={_fmt(cam.fy)}",
        f"cx={_fmt(cam.cx)}",
        f"cy={_fmt(cam.cy)}",
        f"height={cam.height}",
        f"width={cam.width}",
    ]
    for i in range(3):
        for j in range(3):
            lines.append(f"r{i}{j}={_fmt(cam.rotation[i, j])}")
    for i in range(3):
        lines.append(f"t{i}={_fmt(cam.translation[i])}")
    return "\n".join(lines) + "\n"


def parse_camera(text: str, path: Optional[str] = None) -> CameraModel:
    values: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError("expected key=value", path=path, line=lineno)
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    try:
        rotation = np.array([[float(values[f"r{i}{j}"]) for j in range(3)] for i in range(3)])
        translation = np.array([float(values[f"t{i}"]) for i in range(3)])
        return CameraModel(
            fx=float(values["fx"]),
            fy=float(values["fy"]),
            cx=float(values["cx"]),
            cy=float(values["cy"]),
            rotation=rotation,
            translation=translation,
            height=int(values["height"]),
            width=int(values["width"]),
        )
    except KeyError as e:
        raise ParseError(f"missing camera key {e}", path=path) from e
    except (ValueError, InputError) as e:
        raise ParseError(f"bad camera value: {e}", path=path) from e


# ----------------------------------------------------------------------
# Boxes: "class cx cy cz l w h yaw score [difficulty]"
# ----------------------------------------------------------------------
def format_boxes(boxes: List[Box3D], with_difficulty: bool = False) -> str:
    lines = [BOX_HEADER + (" difficulty" if with_difficulty else "")]
    for b in boxes:
        fields = [Config.class_name(b.label), *map(_fmt, b.center), *map(_fmt, b.size), _fmt(b.yaw), _fmt(b.score)]
        if with_difficulty:
            fields.append(str(b.difficulty))
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def _parse_label(token: str) -> int:
    if token.lstrip("-").isdigit():
        label = int(token)
        Config.class_name(label)
        return label
    return Config.class_id(token)


def parse_boxes(text: str, path: Optional[str] = None) -> List[Box3D]:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (9, 10):
            raise ParseError(f"expected 9 or 10 fields, got {len(parts)}", path=path, line=lineno)
        try:
            label = _parse_label(parts[0])
            nums = [float(p) for p in parts[1:9]]
            difficulty = int(parts[9]) if len(parts) == 10 else 1
            if not all(math.isfinite(v) for v in nums):
                raise ValueError("non-finite value")
            boxes.append(Box3D(tuple(nums[0:3]), tuple(nums[3:6]), nums[6], label=label, score=nums[7], difficulty=difficulty))
        except (ValueError, InputError, ConfigurationError) as e:
            raise ParseError(str(e), path=path, line=lineno) from e
    return boxes


def read_boxes(path: PathLike) -> List[Box3D]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read boxes: {e}", path=str(path)) from e
    return parse_boxes(text, path=str(path))


def write_text(path: PathLike, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot write {path}: {e}", module="io") from e


# ----------------------------------------------------------------------
# Scene bundles
# ----------------------------------------------------------------------
def write_bundle(scene: Scene, directory: PathLike) -> Path:
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputError(f"cannot create {out}: {e}", module="io") from e
    write_text(out / CLOUD_FILE, format_cloud(scene.cloud))
    write_text(out / CAMERA_FILE, format_camera(scene.camera))
    write_text(out / BOXES_FILE, format_boxes(scene.boxes, with_difficulty=True))
    save_tensor(scene.image, out / IMAGE_FILE)
    return out


def read_bundle(directory: PathLike, seed: int = 0) -> Scene:
    root = Path(directory)
    for name in (CLOUD_FILE, CAMERA_FILE, BOXES_FILE, IMAGE_FILE):
        if not (root / name).is_file():
            raise ParseError(f"scene bundle is missing {name}", path=str(root))
    cloud = parse_cloud((root / CLOUD_FILE).read_text(encoding="utf-8"), path=str(root / CLOUD_FILE))
    camera = parse_camera((root / CAMERA_FILE).read_text(encoding="utf-8"), path=str(root / CAMERA_FILE))
    boxes = read_boxes(root / BOXES_FILE)
    image = load_tensor(root / IMAGE_FILE)
    if image.shape != (camera.height, camera.width, 3):
        raise ParseError(f"image shape {image.shape} does not match the camera", path=str(root / IMAGE_FILE))
    return Scene(boxes=boxes, cloud=cloud, image=image, camera=camera, seed=seed)


# ----------------------------------------------------------------------
# Sparse grid dumps: header with stride/extents, then "i j k f0 ... f{C-1}"
# ----------------------------------------------------------------------
def format_sparse_grid(grid) -> str:
    extents = " ".join(str(int(e)) for e in grid.extents)
    lines = [f"# stride {grid.stride} extents {extents} channels {grid.channels}"]
    for idx, feat in zip(grid.indices, grid.features):
        lines.append(" ".join([*(str(int(i)) for i in idx), *(_fmt(f) for f in feat)]))
    return "\n".join(lines) + "\n"
