import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from dotenv import load_dotenv

from errors import ConfigurationError

# Load environment variables
load_dotenv()


def _get_setting(key: str) -> str | None:
    """Read a process setting from the environment (a .env file is loaded first)."""
    val = os.getenv(key)
    if val:
        return val
    return None


class Config:
    """Process-level settings and the fixed class table"""

    # Environment overrides
    CONFIG_PATH = _get_setting('AYDIV_CONFIG')
    SEED = _get_setting('AYDIV_SEED')
    OUT_DIR = _get_setting('AYDIV_OUT_DIR')
    JOBS = _get_setting('AYDIV_JOBS')
    LOG_LEVEL = _get_setting('AYDIV_LOG_LEVEL') or 'WARNING'

    # Object classes: id -> name, anchor size (l, w, h), render colour, eval IoU
    CLASSES = {
        0: {'name': 'vehicle', 'anchor': (4.5, 2.0, 1.6), 'color': (0.85, 0.2, 0.15), 'iou': 0.7},
        1: {'name': 'pedestrian', 'anchor': (0.8, 0.7, 1.75), 'color': (0.15, 0.7, 0.25), 'iou': 0.5},
        2: {'name': 'cyclist', 'anchor': (1.8, 0.6, 1.7), 'color': (0.2, 0.3, 0.9), 'iou': 0.5},
    }
    NUM_CLASSES = len(CLASSES)

    # Ground truth with fewer LiDAR points than this is LEVEL_2
    L2_POINT_THRESHOLD = 5

    # Tensor dump format
    TENSOR_MAGIC = b'AYDT'

    @classmethod
    def class_name(cls, label: int) -> str:
        if label not in cls.CLASSES:
            raise ConfigurationError(f"unknown class id {label}")
        return cls.CLASSES[label]['name']

    @classmethod
    def class_id(cls, name: str) -> int:
        for label, info in cls.CLASSES.items():
            if info['name'] == name:
                return label
        raise ConfigurationError(f"unknown class name {name!r}")


@dataclass
class SceneConfig:
    """Synthetic scene generator settings"""

    n_boxes: int = 3
    range_min: float = 8.0
    range_max: float = 36.0
    fov_deg: float = 60.0                       # horizontal camera FOV, boxes are placed inside it
    image_hw: Tuple[int, ...] = (64, 64)
    sensor_height: float = 1.7                  # LiDAR origin above ground
    camera_offset: Tuple[float, ...] = (0.0, 0.0, 0.0)
    ground_points: int = 200
    box_points_at_10m: float = 60.0             # expected surface points for a box 10 m away
    lidar_noise: float = 0.02                   # range noise sigma, m
    max_points: int = 500
    max_retries: int = 200
    class_probs: Tuple[float, ...] = (0.6, 0.25, 0.15)
    background: Tuple[float, ...] = (0.55, 0.62, 0.70)
    completion_min_neighbors: int = 4

    def validate(self) -> None:
        if self.n_boxes < 0:
            raise ConfigurationError("scene.n_boxes must be >= 0", module="scene")
        if not 0 < self.range_min < self.range_max:
            raise ConfigurationError("scene range must satisfy 0 < range_min < range_max", module="scene")
        if not 0 < self.fov_deg < 180:
            raise ConfigurationError("scene.fov_deg must be in (0, 180)", module="scene")
        if len(self.image_hw) != 2 or min(self.image_hw) <= 0:
            raise ConfigurationError("scene.image_hw must be two positive extents", module="scene")
        if len(self.class_probs) != Config.NUM_CLASSES or min(self.class_probs) < 0:
            raise ConfigurationError("scene.class_probs must have one weight per class", module="scene")
        if self.lidar_noise < 0 or self.ground_points < 0 or self.box_points_at_10m <= 0:
            raise ConfigurationError("scene point settings must be positive", module="scene")


@dataclass
class VoxelConfig:
    """Voxelization and sparse backbone settings"""

    voxel_size: Tuple[float, ...] = (0.4, 0.4, 0.3)           # (0.1, 0.1, 0.15) at full scale
    point_range: Tuple[float, ...] = (0.0, -25.6, -2.4, 51.2, 25.6, 1.2)
    stage_widths: Tuple[int, ...] = (16, 32, 64, 64)
    num_keypoints: int = 64                     # 4096 at full scale
    fps_start: int = 0
    bev_reduce: str = 'mean'                    # or 'max'
    bev_out_dim: int = 32                       # BEV neck width, matches the fusion width

    def validate(self) -> None:
        if len(self.voxel_size) != 3 or min(self.voxel_size) <= 0:
            raise ConfigurationError("voxel.voxel_size must be three positive sizes", module="voxel")
        if len(self.point_range) != 6:
            raise ConfigurationError("voxel.point_range needs 6 values", module="voxel")
        for axis in range(3):
            if not self.point_range[axis] < self.point_range[axis + 3]:
                raise ConfigurationError("voxel.point_range min must be < max per axis", module="voxel")
        if len(self.stage_widths) != 4 or min(self.stage_widths) <= 0:
            raise ConfigurationError("voxel.stage_widths needs 4 positive widths", module="voxel")
        if self.num_keypoints < 1:
            raise ConfigurationError("voxel.num_keypoints must be >= 1", module="voxel")
        if self.bev_reduce not in ('mean', 'max'):
            raise ConfigurationError("voxel.bev_reduce must be 'mean' or 'max'", module="voxel")


@dataclass
class GcfatConfig:
    """Image encoder settings (full-scale profile: C=64, 8 heads, window 7)"""

    embed_dim: int = 32
    num_heads: int = 4
    window: Tuple[int, ...] = (4, 4)
    patch_size: int = 4
    depths: Tuple[int, ...] = (2, 2)
    mlp_ratio: int = 2
    attn_drop: float = 0.3
    training: bool = False
    fusion_hw: Tuple[int, ...] = (16, 16)
    depth_scale: float = 80.0                   # metres mapped to 1.0 before embedding
    eps: float = 1e-6
    use_depth_query: bool = True
    enabled: bool = True

    def validate(self) -> None:
        if self.embed_dim <= 0 or self.num_heads <= 0 or self.embed_dim % self.num_heads:
            raise ConfigurationError("gcfat.embed_dim must be divisible by gcfat.num_heads", module="gcfat")
        if len(self.window) != 2 or min(self.window) < 1:
            raise ConfigurationError("gcfat.window must be two extents >= 1", module="gcfat")
        if self.patch_size < 1 or not self.depths or min(self.depths) < 1:
            raise ConfigurationError("gcfat.patch_size and gcfat.depths must be >= 1", module="gcfat")
        if not 0 <= self.attn_drop < 1:
            raise ConfigurationError("gcfat.attn_drop must be in [0, 1)", module="gcfat")
        if len(self.fusion_hw) != 2 or min(self.fusion_hw) < 1:
            raise ConfigurationError("gcfat.fusion_hw must be two positive extents", module="gcfat")


@dataclass
class SffaConfig:
    """LiDAR/image cross attention settings"""

    embed_dim: int = 32
    num_heads: int = 1
    scale: Optional[float] = None               # defaults to 1/sqrt(embed_dim)
    eps: float = 1e-6
    enabled: bool = True

    def validate(self) -> None:
        if self.num_heads != 1:
            raise ConfigurationError("sffa.num_heads must be 1", module="sffa")
        if self.embed_dim <= 0:
            raise ConfigurationError("sffa.embed_dim must be positive", module="sffa")

    @property
    def affinity_scale(self) -> float:
        return self.scale if self.scale is not None else 1.0 / float(self.embed_dim) ** 0.5


@dataclass
class VgaConfig:
    """RoI grid fusion settings"""

    grid_size: int = 6
    gate_hidden: int = 64
    fuse_hidden: int = 64
    out_dim: int = 32
    margin: float = 0.2                         # proposal enlargement before grid placement, m
    lidar_stride: int = 4
    radius: Optional[float] = None              # defaults to one voxel diagonal at lidar_stride
    gate_mode: str = 'channel'                  # or 'roi'
    enabled: bool = True

    def validate(self) -> None:
        if self.grid_size < 1:
            raise ConfigurationError("vga.grid_size must be >= 1", module="vga")
        if self.lidar_stride not in (1, 2, 4, 8):
            raise ConfigurationError("vga.lidar_stride must be 1, 2, 4 or 8", module="vga")
        if self.gate_mode not in ('channel', 'roi'):
            raise ConfigurationError("vga.gate_mode must be 'channel' or 'roi'", module="vga")
        if self.margin < 0 or (self.radius is not None and self.radius <= 0):
            raise ConfigurationError("vga.margin must be >= 0 and vga.radius > 0", module="vga")


@dataclass
class DetectConfig:
    """Proposal, refinement and NMS settings (full scale: top-100, IoU 0.7 / 0.1)"""

    proposal_top_n: int = 8
    proposal_iou: float = 0.7
    final_iou: float = 0.1
    score_threshold: float = 0.0
    refine_hidden: int = 64
    ground_z: float = -1.7                      # anchors stand on this plane
    oracle_proposals: bool = False

    def validate(self) -> None:
        if self.proposal_top_n < 1:
            raise ConfigurationError("detect.proposal_top_n must be >= 1", module="detect")
        for name in ('proposal_iou', 'final_iou', 'score_threshold'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"detect.{name} must be in [0, 1]", module="detect")


@dataclass
class EvalConfig:
    """Matching and metric settings"""

    iou_mode: str = '3d'                        # or 'bev'
    iou_thresholds: Tuple[float, ...] = (0.7, 0.5, 0.5)
    max_range: float = 0.0                      # 0 disables the range gate

    def validate(self) -> None:
        if self.iou_mode not in ('3d', 'bev'):
            raise ConfigurationError("eval.iou_mode must be '3d' or 'bev'", module="eval")
        if len(self.iou_thresholds) != Config.NUM_CLASSES:
            raise ConfigurationError("eval.iou_thresholds needs one value per class", module="eval")
        if self.max_range < 0:
            raise ConfigurationError("eval.max_range must be >= 0", module="eval")


SECTIONS = {
    'scene': SceneConfig,
    'voxel': VoxelConfig,
    'gcfat': GcfatConfig,
    'sffa': SffaConfig,
    'vga': VgaConfig,
    'detect': DetectConfig,
    'eval': EvalConfig,
}


@dataclass
class PipelineConfig:
    """All module configs plus the global seed and output directory"""

    seed: int = 0
    out_dir: str = 'out'
    scene: SceneConfig = field(default_factory=SceneConfig)
    voxel: VoxelConfig = field(default_factory=VoxelConfig)
    gcfat: GcfatConfig = field(default_factory=GcfatConfig)
    sffa: SffaConfig = field(default_factory=SffaConfig)
    vga: VgaConfig = field(default_factory=VgaConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "PipelineConfig":
        for name in SECTIONS:
            getattr(self, name).validate()
        width = self.gcfat.embed_dim
        if self.sffa.embed_dim != width or self.voxel.bev_out_dim != width:
            raise ConfigurationError(
                "sffa.embed_dim and voxel.bev_out_dim must equal gcfat.embed_dim", module="config"
            )
        return self

    @classmethod
    def full_scale_profile(cls) -> "PipelineConfig":
        """Full-scale values from the implementation details (slow at desk scale)."""
        cfg = cls()
        cfg.voxel = dataclasses.replace(cfg.voxel, voxel_size=(0.1, 0.1, 0.15), num_keypoints=4096, bev_out_dim=64)
        cfg.gcfat = dataclasses.replace(cfg.gcfat, embed_dim=64, num_heads=8, window=(7, 7))
        cfg.sffa = dataclasses.replace(cfg.sffa, embed_dim=64)
        cfg.vga = dataclasses.replace(cfg.vga, out_dim=64)
        cfg.detect = dataclasses.replace(cfg.detect, proposal_top_n=100)
        return cfg

    # ------------------------------------------------------------------
    # INI codec
    # ------------------------------------------------------------------
    def to_ini(self) -> str:
        lines = ["[pipeline]", f"seed = {self.seed}", f"out_dir = {self.out_dir}", ""]
        for name in SECTIONS:
            section = getattr(self, name)
            lines.append(f"[{name}]")
            for f in dataclasses.fields(section):
                lines.append(f"{f.name} = {_encode(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str) -> "PipelineConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigurationError(f"malformed config: {e}") from e

        cfg = cls()
        for section_name in parser.sections():
            items = dict(parser.items(section_name))
            if section_name == 'pipeline':
                for key, raw in items.items():
                    if key == 'seed':
                        cfg.seed = _decode(raw, int, section_name, key)
                    elif key == 'out_dir':
                        cfg.out_dir = raw
                    else:
                        raise ConfigurationError(f"unknown key [pipeline] {key}")
                continue
            if section_name not in SECTIONS:
                raise ConfigurationError(f"unknown config section [{section_name}]")
            section_cls = SECTIONS[section_name]
            hints = get_type_hints(section_cls)
            values: Dict[str, Any] = {}
            for key, raw in items.items():
                if key not in hints:
                    raise ConfigurationError(f"unknown key [{section_name}] {key}")
                values[key] = _decode(raw, hints[key], section_name, key)
            setattr(cfg, section_name, dataclasses.replace(getattr(cfg, section_name), **values))
        return cfg.validate()

    @classmethod
    def load(cls, path: Optional[str]) -> "PipelineConfig":
        """Load a config file (or defaults), then apply environment overrides."""
        path = path or Config.CONFIG_PATH
        if path:
            try:
                with open(path, 'r', encoding='utf-8') as fh:
                    cfg = cls.from_ini(fh.read())
            except OSError as e:
                raise ConfigurationError(f"cannot read config {path}: {e}") from e
        else:
            cfg = cls()
        if Config.SEED is not None:
            cfg.seed = _decode(Config.SEED, int, 'env', 'AYDIV_SEED')
        if Config.OUT_DIR is not None:
            cfg.out_dir = Config.OUT_DIR
        return cfg.validate()


def _encode(value: Any) -> str:
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_encode(v) for v in value)
    return str(value)


def _decode(raw: str, hint: Any, section: str, key: str) -> Any:
    raw = raw.strip()
    origin = get_origin(hint)
    try:
        if origin is Union:  # Optional[X]
            if raw.lower() == 'none':
                return None
            inner = [a for a in get_args(hint) if a is not type(None)][0]
            return _decode(raw, inner, section, key)
        if origin in (tuple, Tuple):
            item_type = get_args(hint)[0]
            return tuple(_decode(part, item_type, section, key) for part in raw.split(',') if part.strip())
        if hint is bool:
            lowered = raw.lower()
            if lowered in ('true', 'yes', '1', 'on'):
                return True
            if lowered in ('false', 'no', '0', 'off'):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except (ValueError, IndexError) as e:
        raise ConfigurationError(f"bad value for [{section}] {key}: {raw!r}") from e
