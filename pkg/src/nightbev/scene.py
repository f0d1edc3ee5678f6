"""Synthetic night-scene generator: raycast boxes, point lights, occupancy truth.

World frame: x forward (into the BEV grid), y left, z up. The camera sits
behind the grid's near edge looking along +x. Scene appearance is albedo
times an additive light field, clamped, so strong lights genuinely saturate
and low ambient genuinely underexposes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Tensor3, read_raw_tensor, write_raw_tensor
from .formats import read_ppm, write_pgm, write_ppm
from .geometry import BevSpec, CameraMatrix
from .illumination import ILLUMINATION_FLOOR
from .metrics import OccupancyGrid

# Albedo palette cycled by class id; index 0 is the free-space background.
ALBEDO = (
    (0.18, 0.18, 0.20),
    (0.85, 0.30, 0.25),
    (0.30, 0.80, 0.30),
    (0.30, 0.42, 0.90),
    (0.85, 0.80, 0.35),
    (0.78, 0.35, 0.80),
    (0.35, 0.80, 0.80),
    (0.90, 0.60, 0.30),
)

SCENE_FILE = "scene.json"
_RAY_EPS = 1e-9


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: center/size in meters, class id into the scene table."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    cls: int

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=np.float64)
        half = np.asarray(self.size, dtype=np.float64) / 2.0
        if (half <= 0).any():
            raise ValueError("box size must be positive")
        return c - half, c + half


@dataclass(frozen=True)
class Light:
    """Point light in image space: pixel position, peak intensity, falloff radius."""

    u: float
    v: float
    intensity: float
    radius: float

    def __post_init__(self) -> None:
        if self.intensity < 0 or self.radius <= 0:
            raise ValueError("light needs intensity >= 0 and radius > 0")


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    height: int = 64
    width: int = 96
    bev: BevSpec = field(
        default_factory=lambda: BevSpec(
            x_range=(0.0, 8.0), y_range=(-4.0, 4.0), z_range=(-1.0, 2.2), voxel=0.4
        )
    )
    classes: tuple[str, ...] = ("free", "crate", "pillar", "barrier")
    boxes: tuple[Box, ...] = ()
    random_boxes: int = 0
    lights: tuple[Light, ...] = ()
    ambient: float = 0.05
    camera_height: float = 1.4
    focal: float | None = None

    def __post_init__(self) -> None:
        if self.height < 4 or self.width < 4:
            raise ValueError("image dims must be >= 4")
        if len(self.classes) < 1:
            raise ValueError("at least one class is required")
        if not 0.0 < self.ambient <= 1.0:
            raise ValueError("ambient must lie in (0, 1]")
        for box in self.boxes:
            if not 1 <= box.cls < len(self.classes):
                raise ValueError(f"box class {box.cls} outside 1..{len(self.classes) - 1}")
        if self.random_boxes and len(self.classes) < 2:
            raise ValueError("random boxes need at least one non-background class")

    @classmethod
    def from_json_file(cls, path) -> "SceneConfig":
        with open(path, "r", encoding="ascii") as fh:
            obj = json.load(fh)
        return cls.from_dict(obj)

    @classmethod
    def from_dict(cls, obj: dict) -> "SceneConfig":
        kwargs: dict = {}
        for key in ("seed", "height", "width", "random_boxes"):
            if key in obj:
                kwargs[key] = int(obj[key])
        if "bev" in obj:
            kwargs["bev"] = BevSpec.from_dict(obj["bev"])
        if "classes" in obj:
            kwargs["classes"] = tuple(str(n) for n in obj["classes"])
        if "boxes" in obj:
            kwargs["boxes"] = tuple(
                Box(tuple(b["center"]), tuple(b["size"]), int(b["cls"]))
                for b in obj["boxes"]
            )
        if "lights" in obj:
            kwargs["lights"] = tuple(
                Light(
                    float(l["u"]), float(l["v"]),
                    float(l["intensity"]), float(l["radius"]),
                )
                for l in obj["lights"]
            )
        for key in ("ambient", "camera_height", "focal"):
            if key in obj and obj[key] is not None:
                kwargs[key] = float(obj[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class SceneBundle:
    """Everything one pipeline run consumes, plus the ground truth."""

    image: Tensor3
    camera: CameraMatrix
    occupancy: OccupancyGrid
    illumination_gt: Tensor3
    bev: BevSpec
    classes: tuple[str, ...]


def default_camera(cfg: SceneConfig) -> CameraMatrix:
    """Pinhole camera 1m behind the grid's near x edge, looking along +x."""
    focal = cfg.focal if cfg.focal is not None else cfg.width / 2.0
    cx = cfg.width / 2.0
    cy = cfg.height / 2.0
    k = np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])
    # Camera frame: right = -y_world, down = -z_world, forward = +x_world.
    r = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    center = np.array(
        [
            cfg.bev.x_range[0] - 1.0,
            (cfg.bev.y_range[0] + cfg.bev.y_range[1]) / 2.0,
            cfg.camera_height,
        ]
    )
    rt = np.concatenate([r, (-r @ center)[:, None]], axis=1)
    return CameraMatrix(k @ rt)


def _uniform_in(rng: np.random.Generator, lo: float, hi: float) -> float:
    # Boxes larger than the range collapse onto the range midpoint.
    if hi <= lo:
        return (lo + hi) / 2.0
    return float(rng.uniform(lo, hi))


def _resolve_boxes(cfg: SceneConfig, rng: np.random.Generator) -> list[Box]:
    boxes = list(cfg.boxes)
    spans = (cfg.bev.x_range, cfg.bev.y_range, cfg.bev.z_range)
    for _ in range(cfg.random_boxes):
        size = rng.uniform(0.5, 1.8, size=3)
        center = tuple(
            _uniform_in(rng, lo + size[a] / 2.0, hi - size[a] / 2.0)
            for a, (lo, hi) in enumerate(spans)
        )
        cls = int(rng.integers(1, len(cfg.classes)))
        boxes.append(Box(center, tuple(size), cls))
    return boxes


def _raycast_classes(
    cfg: SceneConfig, camera: CameraMatrix, boxes: list[Box]
) -> tuple[np.ndarray, bool]:
    """Per-pixel class id of the nearest box hit (0 where no box is hit)."""
    h, w = cfg.height, cfg.width
    m = camera.matrix
    a_inv = np.linalg.inv(m[:, :3])
    center = -a_inv @ m[:, 3]

    us, vs = np.meshgrid(
        np.arange(w, dtype=np.float64) + 0.5,
        np.arange(h, dtype=np.float64) + 0.5,
        indexing="xy",
    )
    pix = np.stack([us, vs, np.ones_like(us)], axis=0)
    dirs = np.einsum("ij,jhw->ihw", a_inv, pix)  # world-space ray directions

    best_t = np.full((h, w), np.inf)
    classes = np.zeros((h, w), dtype=np.int64)
    for box in boxes:
        lo, hi = box.bounds()
        t_near = np.full((h, w), -np.inf)
        t_far = np.full((h, w), np.inf)
        miss = np.zeros((h, w), dtype=bool)
        for axis in range(3):
            d = dirs[axis]
            parallel = np.abs(d) < _RAY_EPS
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo[axis] - center[axis]) / d
                t2 = (hi[axis] - center[axis]) / d
            near = np.where(parallel, -np.inf, np.minimum(t1, t2))
            far = np.where(parallel, np.inf, np.maximum(t1, t2))
            inside = (center[axis] >= lo[axis]) & (center[axis] <= hi[axis])
            miss |= parallel & ~inside
            t_near = np.maximum(t_near, near)
            t_far = np.minimum(t_far, far)
        hit_t = np.where(t_near > _RAY_EPS, t_near, t_far)
        hit = ~miss & (t_near <= t_far) & (hit_t > _RAY_EPS) & (hit_t < best_t)
        best_t[hit] = hit_t[hit]
        classes[hit] = box.cls
    return classes, bool(np.isfinite(best_t).any())


def _light_field(cfg: SceneConfig) -> np.ndarray:
    """Ambient plus inverse-square falloff of each light, unclamped."""
    h, w = cfg.height, cfg.width
    cols, rows = np.meshgrid(
        np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64), indexing="xy"
    )
    raw = np.full((h, w), cfg.ambient, dtype=np.float64)
    for light in cfg.lights:
        d2 = (cols - light.u) ** 2 + (rows - light.v) ** 2
        raw += light.intensity / (1.0 + d2 / (light.radius**2))
    return raw


def _occupancy_labels(cfg: SceneConfig, boxes: list[Box]) -> np.ndarray:
    spec = cfg.bev
    gx, gy, gz = np.meshgrid(
        spec.x_centers(), spec.y_centers(), spec.z_centers(), indexing="ij"
    )
    labels = np.zeros(gx.shape, dtype=np.int64)
    for box in boxes:  # later boxes overwrite earlier ones
        lo, hi = box.bounds()
        inside = (
            (gx >= lo[0]) & (gx <= hi[0])
            & (gy >= lo[1]) & (gy <= hi[1])
            & (gz >= lo[2]) & (gz <= hi[2])
        )
        labels[inside] = box.cls
    return labels


def gen_scene(cfg: SceneConfig) -> SceneBundle:
    """Deterministically rasterize a night scene from its config and seed."""
    rng = np.random.default_rng(cfg.seed)
    boxes = _resolve_boxes(cfg, rng)
    camera = default_camera(cfg)

    classes, any_hit = _raycast_classes(cfg, camera, boxes)
    if boxes and not any_hit:
        raise ValueError("degenerate camera: no configured box is visible")

    raw_light = _light_field(cfg)
    illumination = Tensor3(np.clip(raw_light, ILLUMINATION_FLOOR, 1.0)[None])

    palette = np.array([ALBEDO[c % len(ALBEDO)] for c in range(len(cfg.classes))])
    albedo = palette[classes].transpose(2, 0, 1)  # (3, H, W)
    image = Tensor3(np.clip(albedo * raw_light[None], 0.0, 1.0))

    occupancy = OccupancyGrid(_occupancy_labels(cfg, boxes), cfg.classes)
    return SceneBundle(
        image=image,
        camera=camera,
        occupancy=occupancy,
        illumination_gt=illumination,
        bev=cfg.bev,
        classes=cfg.classes,
    )


def save_scene(bundle: SceneBundle, out_dir) -> dict:
    """Write a scene directory; returns the manifest written to scene.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(bundle.image, out / "image.ppm")
    with open(out / "camera.json", "w", encoding="ascii") as fh:
        json.dump({"matrix": bundle.camera.to_list()}, fh, indent=2)
        fh.write("\n")
    grid = bundle.occupancy.labels.transpose(2, 0, 1).astype(np.float64)
    write_raw_tensor(Tensor3(grid), out / "occupancy_gt.rt", dtype="f32")
    write_raw_tensor(bundle.illumination_gt, out / "illumination_gt.rt", dtype="f32")
    write_pgm(bundle.illumination_gt, out / "illumination_gt.pgm")
    manifest = {
        "height": bundle.image.height,
        "width": bundle.image.width,
        "bev": bundle.bev.to_dict(),
        "classes": list(bundle.classes),
        "files": {
            "image": "image.ppm",
            "camera": "camera.json",
            "occupancy": "occupancy_gt.rt",
            "illumination": "illumination_gt.rt",
            "illumination_preview": "illumination_gt.pgm",
        },
    }
    with open(out / SCENE_FILE, "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


def load_scene(scene_dir) -> SceneBundle:
    """Load a scene directory written by `save_scene`."""
    root = Path(scene_dir)
    with open(root / SCENE_FILE, "r", encoding="ascii") as fh:
        manifest = json.load(fh)
    files = manifest["files"]
    image = read_ppm(root / files["image"])
    camera = CameraMatrix.from_json_file(root / files["camera"])
    spec = BevSpec.from_dict(manifest["bev"])
    classes = tuple(str(n) for n in manifest["classes"])
    grid_t = read_raw_tensor(root / files["occupancy"])
    labels = np.rint(grid_t.data.astype(np.float64)).astype(np.int64).transpose(1, 2, 0)
    illumination = read_raw_tensor(root / files["illumination"])
    return SceneBundle(
        image=image,
        camera=camera,
        occupancy=OccupancyGrid(labels, classes),
        illumination_gt=Tensor3(illumination.data.astype(np.float64)),
        bev=spec,
        classes=classes,
    )
