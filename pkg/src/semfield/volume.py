"""Multi-view feature volume, 3D aggregation, and per-point geometry.

Every grid vertex is projected into each source view and its features are
bilinearly sampled; the per-vertex mean and population variance over the
views with a valid projection form the raw feature volume. A small 3D conv
stack turns that into the geometry encoding volume, which is trilinearly
interpolated at query points and decoded by an MLP into density or a
bounded signed distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, no_grad, weighted_rows
from .cameras import Camera
from .encoder import bilinear_coefficients
from .nn import ConvStack, Mlp, MlpSpec
from .scenes import Scene

MIN_VALID_VIEWS = 2
SDF_OUTPUT_SCALE = 4.0  # tanh bound on predicted SDF, in truncation units


@dataclass
class VolumeGrid:
    lo: np.ndarray
    hi: np.ndarray
    resolution: tuple[int, int, int]

    def __post_init__(self) -> None:
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if any(r < 2 for r in self.resolution):
            raise ValueError("grid needs at least 2 vertices per axis")
        if np.any(self.hi <= self.lo):
            raise ValueError("degenerate grid bounds")

    @staticmethod
    def for_scene(scene: Scene, resolution: int, padding: float = 0.05) -> "VolumeGrid":
        span = scene.bounds_hi - scene.bounds_lo
        lo = scene.bounds_lo - padding * span
        hi = scene.bounds_hi + padding * span
        return VolumeGrid(lo, hi, (resolution, resolution, resolution))

    @property
    def num_vertices(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.array(self.resolution) - 1)

    def vertex_positions(self) -> np.ndarray:
        axes = [
            np.linspace(self.lo[a], self.hi[a], self.resolution[a]) for a in range(3)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    def trilinear_coefficients(
        self, points: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flat vertex rows (K, 8), weights (K, 8), inside mask (K,).

        Outside points get zero weights, so interpolating them yields zeros.
        """
        points = np.asarray(points, dtype=np.float64)
        nx, ny, nz = self.resolution
        coords = (points - self.lo) / self.spacing
        inside = np.all(
            (points >= self.lo - 1e-12) & (points <= self.hi + 1e-12), axis=-1
        )
        coords = np.clip(coords, 0.0, np.array(self.resolution) - 1.0)
        base = np.minimum(np.floor(coords).astype(np.int64), np.array(self.resolution) - 2)
        frac = coords - base
        rows = np.empty(points.shape[:-1] + (8,), dtype=np.int64)
        weights = np.empty(points.shape[:-1] + (8,), dtype=np.float64)
        corner = 0
        for dx in (0, 1):
            wx = frac[..., 0] if dx else 1.0 - frac[..., 0]
            for dy in (0, 1):
                wy = frac[..., 1] if dy else 1.0 - frac[..., 1]
                for dz in (0, 1):
                    wz = frac[..., 2] if dz else 1.0 - frac[..., 2]
                    rows[..., corner] = (
                        (base[..., 0] + dx) * ny + (base[..., 1] + dy)
                    ) * nz + (base[..., 2] + dz)
                    weights[..., corner] = wx * wy * wz
                    corner += 1
        weights = weights * inside[..., None]
        return rows, weights, inside


def view_projection_tables(
    cameras: list[Camera], points: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project points into each view; bilinear tables ready for gathering.

    Returns (rows, weights, valid) shaped (V, K, 4) / (V, K, 4) / (V, K).
    Row indices are offset per view so they index a (V*H*W, C) flattening;
    weights are zeroed wherever the projection is invalid.
    """
    v = len(cameras)
    k = len(points)
    rows = np.empty((v, k, 4), dtype=np.int64)
    weights = np.empty((v, k, 4), dtype=np.float64)
    valid = np.empty((v, k), dtype=bool)
    offset = 0
    for i, cam in enumerate(cameras):
        u, vv, z = cam.project(points)
        ok = cam.in_image(u, vv, z)
        r, w = bilinear_coefficients(u, vv, cam.width, cam.height)
        rows[i] = r + offset
        weights[i] = w * ok[:, None]
        valid[i] = ok
        offset += cam.width * cam.height
    return rows, weights, valid


def masked_mean_variance(
    samples: Tensor, valid: np.ndarray
) -> tuple[Tensor, Tensor, np.ndarray]:
    """Mean and population variance over axis 0 restricted to valid entries.

    ``samples`` is (V, K, C) with invalid slots already exactly zero.
    Returns (mean, variance, valid_count); slots with no valid view get 0.
    """
    counts = valid.sum(axis=0).astype(np.float64)  # (K,)
    denom = (1.0 / np.maximum(counts, 1.0))[:, None]
    mean = samples.sum(axis=0) * denom
    sq = (samples * samples).sum(axis=0) * denom
    var = (sq - mean * mean).clamp(0.0, np.inf)
    return mean, var, counts


def build_feature_volume(
    features_flat: Tensor,
    cameras: list[Camera],
    grid: VolumeGrid,
) -> tuple[Tensor, np.ndarray]:
    """Per-vertex [mean, variance] of projected view features.

    Returns the (num_vertices, 2d) volume plus a per-vertex count of valid
    views. Vertices seen by fewer than two views keep zero statistics.
    """
    if len(cameras) < MIN_VALID_VIEWS:
        raise ValueError("feature volume needs at least two source views")
    vertices = grid.vertex_positions()
    rows, weights, valid = view_projection_tables(cameras, vertices)
    v = len(cameras)
    k = len(vertices)
    gathered = weighted_rows(
        features_flat, rows.reshape(v * k, 4), weights.reshape(v * k, 4)
    ).reshape(v, k, -1)
    counts = valid.sum(axis=0)
    if counts.max() < MIN_VALID_VIEWS:
        raise ValueError("no grid vertex is covered by two or more views")
    covered = (counts >= MIN_VALID_VIEWS).astype(np.float64)
    mean, var, _ = masked_mean_variance(gathered, valid)
    volume = concat([mean, var], axis=-1) * covered[:, None]
    return volume, counts


class GeometryAggregator:
    """3D conv stack H: two 3x3x3 + relu, then a 1x1x1 projection."""

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int,
        hidden: tuple[int, int] = (8, 16),
        out_channels: int = 16,
    ):
        self.out_channels = out_channels
        self.stack = ConvStack(
            rng, [in_channels, hidden[0], hidden[1], out_channels], [3, 3, 1], ndim=3
        )

    def __call__(self, volume: Tensor, grid: VolumeGrid) -> Tensor:
        nx, ny, nz = grid.resolution
        x = volume.reshape(1, nx, ny, nz, volume.shape[-1])
        return self.stack(x).reshape(grid.num_vertices, self.out_channels)

    def parameters(self):
        return self.stack.parameters()


def interpolate_encoding(
    encoding_flat: Tensor, grid: VolumeGrid, points: np.ndarray
) -> tuple[Tensor, np.ndarray]:
    """Trilinear lookup of the encoding volume; zeros + flag outside."""
    rows, weights, inside = grid.trilinear_coefficients(points)
    return weighted_rows(encoding_flat, rows, weights), inside


class GeometryHead:
    """MLP decoding an interpolated encoding into density or signed distance.

    Density mode squashes through softplus (sigma >= 0). SDF mode bounds the
    output to +-4*tr with tanh so downstream truncation weights stay well
    conditioned. ``coverage`` in [0, 1] blends toward the empty value
    (density 0, SDF +tr) where too few views observed the volume.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        in_dim: int,
        hidden: int = 32,
        mode: str = "density",
        truncation: float = 0.15,
    ):
        if mode not in ("density", "sdf"):
            raise ValueError(f"unknown geometry mode '{mode}'")
        if mode == "sdf" and truncation <= 0:
            raise ValueError("truncation must be positive in sdf mode")
        self.mode = mode
        self.truncation = truncation
        self.mlp = Mlp(rng, MlpSpec([in_dim, hidden, hidden, 1]))

    def __call__(self, encoding: Tensor, coverage: np.ndarray | None = None) -> Tensor:
        raw = self.mlp(encoding).reshape(encoding.shape[0])
        if self.mode == "density":
            sigma = raw.softplus()
            empty = 0.0
        else:
            sigma = raw.tanh() * (SDF_OUTPUT_SCALE * self.truncation)
            empty = self.truncation
        if coverage is not None:
            cov = np.asarray(coverage, dtype=np.float64)
            sigma = sigma * cov + (1.0 - cov) * empty
        return sigma

    def parameters(self):
        return self.mlp.parameters()


def oracle_geometry(scene: Scene, points: np.ndarray, mode: str) -> np.ndarray:
    """Ground-truth SDF bypass for the learned geometry path (sdf mode only)."""
    if mode != "sdf":
        raise ValueError("oracle geometry is only defined in sdf mode")
    return scene.sdf(points)


def vertex_sigma_field(
    head: GeometryHead, encoding_flat: Tensor, coverage: np.ndarray
) -> np.ndarray:
    """Geometry evaluated at every grid vertex (used by the visibility test)."""
    with no_grad():
        sigma = head(Tensor(encoding_flat.data), coverage)
    return sigma.data
