"""Procedural labeled scenes built from exact SDF primitives.

A scene is a min-union of spheres, axis-aligned boxes, and planes inside an
axis-aligned bounding box, each carrying a class id. Sphere tracing against
the exact SDF provides ground-truth depth, labels, and Lambert-shaded RGB;
those rendered views stand in for a real 2D segmentor, with an optional
per-pixel label-flip noise model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .cameras import Camera, intersect_aabb, look_at_rotation

LABEL_SMOOTHING = 0.05

# Fixed per-class albedos. Several foreground classes intentionally share a
# color so appearance alone cannot identify the class; only the semantic
# maps can. Index 0 is the background.
_BASE_ALBEDOS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.85, 0.25, 0.20],
        [0.20, 0.70, 0.30],
        [0.20, 0.70, 0.30],
        [0.25, 0.35, 0.80],
        [0.25, 0.35, 0.80],
    ]
)

_LIGHT_DIR = np.array([0.45, 0.35, 0.82])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)
_AMBIENT = 0.35
_DIFFUSE = 0.65


def albedo_table(num_classes: int) -> np.ndarray:
    if num_classes <= len(_BASE_ALBEDOS):
        return _BASE_ALBEDOS[:num_classes].copy()
    reps = -(-(num_classes - 1) // (len(_BASE_ALBEDOS) - 1))
    fg = np.tile(_BASE_ALBEDOS[1:], (reps, 1))[: num_classes - 1]
    return np.vstack([_BASE_ALBEDOS[:1], fg])


@dataclass
class Primitive:
    shape: str  # sphere | box | plane
    class_id: int
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 0.5
    half_extents: np.ndarray = field(default_factory=lambda: np.ones(3) * 0.5)
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    offset: float = 0.0

    def sdf(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        if self.shape == "sphere":
            return np.linalg.norm(points - self.center, axis=-1) - self.radius
        if self.shape == "box":
            q = np.abs(points - self.center) - self.half_extents
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        if self.shape == "plane":
            return points @ self.normal - self.offset
        raise ValueError(f"unknown primitive shape '{self.shape}'")

    def to_json(self) -> dict:
        out = {"shape": self.shape, "class_id": int(self.class_id)}
        if self.shape == "sphere":
            out.update(center=self.center.tolist(), radius=float(self.radius))
        elif self.shape == "box":
            out.update(center=self.center.tolist(), half_extents=self.half_extents.tolist())
        else:
            out.update(normal=self.normal.tolist(), offset=float(self.offset))
        return out

    @staticmethod
    def from_json(data: dict) -> "Primitive":
        kind = data["shape"]
        prim = Primitive(shape=kind, class_id=int(data["class_id"]))
        if kind == "sphere":
            prim.center = np.asarray(data["center"], dtype=np.float64)
            prim.radius = float(data["radius"])
        elif kind == "box":
            prim.center = np.asarray(data["center"], dtype=np.float64)
            prim.half_extents = np.asarray(data["half_extents"], dtype=np.float64)
        elif kind == "plane":
            prim.normal = np.asarray(data["normal"], dtype=np.float64)
            prim.offset = float(data["offset"])
        else:
            raise ValueError(f"unknown primitive shape '{kind}'")
        return prim


@dataclass
class Scene:
    primitives: list[Primitive]
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        self.bounds_lo = np.asarray(self.bounds_lo, dtype=np.float64)
        self.bounds_hi = np.asarray(self.bounds_hi, dtype=np.float64)
        if np.any(self.bounds_hi <= self.bounds_lo):
            raise ValueError("degenerate scene bounds")
        for prim in self.primitives:
            if not 1 <= prim.class_id < self.num_classes:
                raise ValueError("primitive class id outside [1, c-1]")

    def sdf(self, points: np.ndarray) -> np.ndarray:
        values = np.stack([p.sdf(points) for p in self.primitives], axis=-1)
        return values.min(axis=-1)

    def class_of_nearest(self, points: np.ndarray) -> np.ndarray:
        values = np.stack([p.sdf(points) for p in self.primitives], axis=-1)
        ids = np.array([p.class_id for p in self.primitives], dtype=np.int64)
        return ids[values.argmin(axis=-1)]

    def normals(self, points: np.ndarray, h: float = 1e-5) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        grad = np.empty_like(points)
        for axis in range(3):
            step = np.zeros(3)
            step[axis] = h
            grad[..., axis] = (self.sdf(points + step) - self.sdf(points - step)) / (2 * h)
        norm = np.linalg.norm(grad, axis=-1, keepdims=True)
        return grad / np.where(norm < 1e-12, 1.0, norm)

    def to_json(self) -> dict:
        return {
            "bounds": {"lo": self.bounds_lo.tolist(), "hi": self.bounds_hi.tolist()},
            "num_classes": self.num_classes,
            "primitives": [p.to_json() for p in self.primitives],
        }

    @staticmethod
    def from_json(data: dict) -> "Scene":
        return Scene(
            primitives=[Primitive.from_json(p) for p in data["primitives"]],
            bounds_lo=np.asarray(data["bounds"]["lo"], dtype=np.float64),
            bounds_hi=np.asarray(data["bounds"]["hi"], dtype=np.float64),
            num_classes=int(data["num_classes"]),
        )


def scene_sdf(scene: Scene, points: np.ndarray) -> np.ndarray:
    """Exact signed distance of the min-union; negative inside."""
    return scene.sdf(points)


def sphere_trace(
    scene: Scene,
    origins: np.ndarray,
    directions: np.ndarray,
    tol: float = 1e-5,
    max_steps: int = 384,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First intersection inside scene bounds.

    Returns (hit, depth, class_id); depth is 0 and class 0 on a miss.
    Directions must be unit-norm: the SDF step size is a world distance.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n = len(origins)
    t_near, t_far = intersect_aabb(origins, directions, scene.bounds_lo, scene.bounds_hi)
    t = np.maximum(t_near, 0.0)
    limit = t_far + 1e-6
    active = t <= limit
    hit = np.zeros(n, dtype=bool)
    depth = np.zeros(n, dtype=np.float64)

    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        pts = origins[idx] + t[idx, None] * directions[idx]
        dist = scene.sdf(pts)
        arrived = dist < tol
        hit_idx = idx[arrived]
        hit[hit_idx] = True
        depth[hit_idx] = t[hit_idx]
        active[hit_idx] = False
        move_idx = idx[~arrived]
        t[move_idx] += np.maximum(dist[~arrived], tol * 0.5)
        escaped = t[move_idx] > limit[move_idx]
        active[move_idx[escaped]] = False

    classes = np.zeros(n, dtype=np.int64)
    if hit.any():
        surf = origins[hit] + depth[hit, None] * directions[hit]
        classes[hit] = scene.class_of_nearest(surf)
    return hit, depth, classes


def ray_march_trace(
    scene: Scene,
    origin: np.ndarray,
    direction: np.ndarray,
    num_steps: int = 100_000,
) -> tuple[bool, float]:
    """Dense uniform ray march; slow reference used to cross-check tracing."""
    t_near, t_far = intersect_aabb(
        origin[None], direction[None], scene.bounds_lo, scene.bounds_hi
    )
    t0, t1 = max(float(t_near[0]), 0.0), float(t_far[0])
    if t0 > t1:
        return False, 0.0
    ts = np.linspace(t0, t1, num_steps)
    values = scene.sdf(origin[None] + ts[:, None] * direction[None])
    below = np.flatnonzero(values <= 0.0)
    if below.size == 0:
        return False, 0.0
    i = below[0]
    if i == 0:
        return True, ts[0]
    # linear root between the bracketing samples
    a, b = values[i - 1], values[i]
    frac = a / (a - b)
    return True, float(ts[i - 1] + frac * (ts[i] - ts[i - 1]))


@dataclass
class OracleView:
    camera: Camera
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 where no hit
    semantic_gt: np.ndarray  # (H, W) class ids
    semantic_prob: np.ndarray  # (H, W, c) rows on the simplex


def smoothed_onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    eps = LABEL_SMOOTHING
    out = np.full(labels.shape + (num_classes,), eps / (num_classes - 1))
    np.put_along_axis(out, labels[..., None], 1.0 - eps, axis=-1)
    return out


def render_oracle_view(
    scene: Scene,
    camera: Camera,
    noise_rate: float = 0.0,
    seed: int = 0,
) -> OracleView:
    """Ground-truth RGB/depth/labels plus a noisy 2D-segmentor stand-in.

    Each pixel's class distribution is the smoothed one-hot of its true
    label; with probability ``noise_rate`` it is re-centered on a uniformly
    chosen wrong class. Deterministic for a given seed.
    """
    if not 0.0 <= noise_rate <= 1.0:
        raise ValueError("noise_rate must lie in [0, 1]")
    h, w = camera.height, camera.width
    c = scene.num_classes
    origins, dirs = camera.pixel_rays()
    hit, depth, classes = sphere_trace(scene, origins, dirs)

    rgb = np.zeros((h * w, 3))
    if hit.any():
        surf = origins[hit] + depth[hit, None] * dirs[hit]
        normals = scene.normals(surf)
        lambert = _AMBIENT + _DIFFUSE * np.maximum(normals @ _LIGHT_DIR, 0.0)
        rgb[hit] = albedo_table(c)[classes[hit]] * lambert[:, None]

    labels = np.where(hit, classes, 0).astype(np.int64)
    prob = smoothed_onehot(labels, c)

    if noise_rate > 0.0:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        flip = rng.random(h * w) < noise_rate
        wrong_shift = rng.integers(1, c, size=h * w)
        wrong = (labels + wrong_shift) % c
        flipped = smoothed_onehot(wrong, c)
        prob = np.where(flip[:, None], flipped, prob)

    return OracleView(
        camera=camera,
        rgb=np.clip(rgb, 0.0, 1.0).reshape(h, w, 3),
        depth=np.where(hit, depth, 0.0).reshape(h, w),
        semantic_gt=labels.reshape(h, w).astype(np.uint8),
        semantic_prob=prob.reshape(h, w, c),
    )


@dataclass
class SceneSetConfig:
    num_classes: int = 6
    views_per_scene: int = 12
    image_size: int = 64
    bounds_extent: float = 1.5
    min_primitives: int = 2
    max_primitives: int = 4
    camera_radius_factor: float = 1.9
    elevation_range: tuple[float, float] = (12.0, 55.0)
    fov_degrees: float = 36.0


def _sample_scene(rng: np.random.Generator, cfg: SceneSetConfig) -> Scene:
    b = cfg.bounds_extent
    count = int(rng.integers(cfg.min_primitives, cfg.max_primitives + 1))
    prims: list[Primitive] = []
    plane_used = False
    for _ in range(count):
        kind = rng.choice(["sphere", "box", "plane"], p=[0.45, 0.4, 0.15])
        if kind == "plane" and plane_used:
            kind = "sphere"
        class_id = int(rng.integers(1, cfg.num_classes))
        if kind == "sphere":
            prims.append(
                Primitive(
                    "sphere",
                    class_id,
                    center=rng.uniform(-0.55 * b, 0.55 * b, size=3),
                    radius=float(rng.uniform(0.2 * b, 0.45 * b)),
                )
            )
        elif kind == "box":
            prims.append(
                Primitive(
                    "box",
                    class_id,
                    center=rng.uniform(-0.55 * b, 0.55 * b, size=3),
                    half_extents=rng.uniform(0.16 * b, 0.38 * b, size=3),
                )
            )
        else:
            plane_used = True
            prims.append(
                Primitive(
                    "plane",
                    class_id,
                    normal=np.array([0.0, 0.0, 1.0]),
                    offset=float(rng.uniform(-0.85 * b, -0.5 * b)),
                )
            )
    return Scene(
        primitives=prims,
        bounds_lo=np.array([-b, -b, -b]),
        bounds_hi=np.array([b, b, b]),
        num_classes=cfg.num_classes,
    )


def _sample_cameras(rng: np.random.Generator, cfg: SceneSetConfig) -> list[Camera]:
    b = cfg.bounds_extent
    radius = cfg.camera_radius_factor * np.sqrt(3.0) * b
    size = cfg.image_size
    focal = size / (2.0 * np.tan(np.radians(cfg.fov_degrees) / 2.0))
    center = (size - 1) / 2.0
    cams = []
    v = cfg.views_per_scene
    for k in range(v):
        azimuth = 2.0 * np.pi * (k + rng.uniform(-0.3, 0.3)) / v
        elevation = np.radians(rng.uniform(*cfg.elevation_range))
        r = radius * rng.uniform(0.95, 1.05)
        origin = r * np.array(
            [
                np.cos(elevation) * np.cos(azimuth),
                np.cos(elevation) * np.sin(azimuth),
                np.sin(elevation),
            ]
        )
        cams.append(
            Camera(
                fx=focal,
                fy=focal,
                cx=center,
                cy=center,
                width=size,
                height=size,
                rotation=look_at_rotation(origin, np.zeros(3)),
                origin=origin,
            )
        )
    return cams


def sample_scene_set(
    num_scenes: int, seed: int, config: SceneSetConfig | None = None
) -> list[tuple[Scene, list[Camera]]]:
    """Reproducible scenes plus inward-facing camera rings."""
    if num_scenes < 1:
        raise ValueError("need at least one scene")
    cfg = config or SceneSetConfig()
    out = []
    for index in range(num_scenes):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))
        out.append((_sample_scene(rng, cfg), _sample_cameras(rng, cfg)))
    return out


@dataclass
class SceneRecord:
    scene_id: int
    scene: Scene
    views: list[OracleView]


@dataclass
class Dataset:
    records: list[SceneRecord]
    num_classes: int
    noise_rate: float
    seed: int

    def __len__(self) -> int:
        return len(self.records)


def generate_dataset(
    num_scenes: int,
    seed: int,
    noise_rate: float,
    config: SceneSetConfig | None = None,
) -> Dataset:
    cfg = config or SceneSetConfig()
    records = []
    for scene_id, (scene, cams) in enumerate(sample_scene_set(num_scenes, seed, cfg)):
        views = [
            render_oracle_view(
                scene,
                cam,
                noise_rate=noise_rate,
                seed=_view_seed(seed, scene_id, k),
            )
            for k, cam in enumerate(cams)
        ]
        records.append(SceneRecord(scene_id, scene, views))
    return Dataset(records, cfg.num_classes, noise_rate, seed)


def _view_seed(seed: int, scene_id: int, view_id: int) -> int:
    return int(np.random.SeedSequence([seed, scene_id, view_id]).generate_state(1)[0])


def save_dataset(dataset: Dataset, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "num_classes": dataset.num_classes,
        "noise_rate": dataset.noise_rate,
        "seed": dataset.seed,
        "scene_ids": [rec.scene_id for rec in dataset.records],
    }
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2))
    for rec in dataset.records:
        scene_dir = root / "scenes" / f"{rec.scene_id:04d}"
        (scene_dir / "views").mkdir(parents=True, exist_ok=True)
        (scene_dir / "scene.json").write_text(json.dumps(rec.scene.to_json(), indent=2))
        for k, view in enumerate(rec.views):
            tensors = {
                "rgb": view.rgb,
                "depth": view.depth,
                "semantic_gt": view.semantic_gt,
                "semantic_prob": view.semantic_prob,
            }
            tensors.update(view.camera.to_arrays())
            tensorio.write_container(scene_dir / "views" / f"{k:03d}.gnt", tensors)


def load_scene_dir(scene_dir: str | Path, scene_id: int = 0) -> SceneRecord:
    """Read one scene directory (scene.json plus views/*.gnt)."""
    scene_dir = Path(scene_dir)
    scene = Scene.from_json(json.loads((scene_dir / "scene.json").read_text()))
    views = []
    for view_path in sorted((scene_dir / "views").glob("*.gnt")):
        tensors = tensorio.read_container(view_path)
        views.append(
            OracleView(
                camera=Camera.from_arrays(
                    tensors["camera_pose"], tensors["camera_intrinsics"]
                ),
                rgb=tensors["rgb"],
                depth=tensors["depth"],
                semantic_gt=tensors["semantic_gt"],
                semantic_prob=tensors["semantic_prob"],
            )
        )
    if not views:
        raise FileNotFoundError(f"no views found under {scene_dir / 'views'}")
    return SceneRecord(scene_id, scene, views)


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "dataset.json").read_text())
    records = [
        load_scene_dir(root / "scenes" / f"{scene_id:04d}", int(scene_id))
        for scene_id in manifest["scene_ids"]
    ]
    return Dataset(
        records,
        int(manifest["num_classes"]),
        float(manifest["noise_rate"]),
        int(manifest["seed"]),
    )
