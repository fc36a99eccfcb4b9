"""Pinhole cameras: projection, unprojection, per-pixel rays, pose helpers.

Convention: camera x right, y down, z forward (OpenCV style). Poses are
world-from-camera, so ``x_world = R @ x_cam + origin``. Continuous pixel
coordinates put integer values at pixel centers, matching the bilinear
samplers downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) world-from-camera
    origin: np.ndarray  # (3,) meters

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World points -> (u, v, depth). Depth is the camera-frame z.

        Callers decide validity from ``depth > 0`` plus the image bounds;
        points in the camera plane get clamped depths so u, v stay finite.
        """
        points = np.asarray(points, dtype=np.float64)
        rel = points.reshape(-1, 3) - self.origin
        if np.any(np.linalg.norm(rel, axis=-1) < 1e-12):
            raise ValueError("cannot project a point at the camera origin")
        cam = rel @ self.rotation  # R.T applied to rows
        z = cam[:, 2]
        safe_z = np.where(np.abs(z) < 1e-12, 1e-12, z)
        u = self.fx * cam[:, 0] / safe_z + self.cx
        v = self.fy * cam[:, 1] / safe_z + self.cy
        lead = points.shape[:-1]
        return u.reshape(lead), v.reshape(lead), z.reshape(lead)

    def in_image(self, u: np.ndarray, v: np.ndarray, depth: np.ndarray) -> np.ndarray:
        return (
            (depth > 0.0)
            & (u >= 0.0)
            & (u <= self.width - 1.0)
            & (v >= 0.0)
            & (v <= self.height - 1.0)
        )

    def unproject(self, u: np.ndarray, v: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Continuous pixels + camera-frame depth -> world points."""
        u = np.asarray(u, dtype=np.float64)
        x = (u - self.cx) / self.fx * depth
        y = (np.asarray(v, dtype=np.float64) - self.cy) / self.fy * depth
        cam = np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)
        return cam @ self.rotation.T + self.origin

    def pixel_rays(
        self, pixels: np.ndarray | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Unit-norm world rays through pixel centers.

        ``pixels`` is an ``(K, 2)`` array of (u, v); None means every pixel
        in row-major order. Returns (origins, directions), both ``(K, 3)``.
        """
        if pixels is None:
            v, u = np.mgrid[0 : self.height, 0 : self.width]
            pixels = np.stack([u.reshape(-1), v.reshape(-1)], axis=-1).astype(np.float64)
        pixels = np.asarray(pixels, dtype=np.float64)
        d_cam = np.stack(
            [
                (pixels[:, 0] - self.cx) / self.fx,
                (pixels[:, 1] - self.cy) / self.fy,
                np.ones(len(pixels)),
            ],
            axis=-1,
        )
        d_world = d_cam @ self.rotation.T
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.origin, d_world.shape).copy()
        return origins, d_world

    def to_arrays(self) -> dict[str, np.ndarray]:
        pose = np.eye(4)
        pose[:3, :3] = self.rotation
        pose[:3, 3] = self.origin
        intr = np.array(
            [self.fx, self.fy, self.cx, self.cy, self.width, self.height], dtype=np.float64
        )
        return {"camera_pose": pose, "camera_intrinsics": intr}

    @staticmethod
    def from_arrays(pose: np.ndarray, intrinsics: np.ndarray) -> "Camera":
        return Camera(
            fx=float(intrinsics[0]),
            fy=float(intrinsics[1]),
            cx=float(intrinsics[2]),
            cy=float(intrinsics[3]),
            width=int(round(intrinsics[4])),
            height=int(round(intrinsics[5])),
            rotation=np.asarray(pose)[:3, :3],
            origin=np.asarray(pose)[:3, 3],
        )


def look_at_rotation(origin: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera rotation with +z toward ``target`` and y pointing down."""
    forward = np.asarray(target, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera origin coincides with look-at target")
    forward = forward / norm
    up = np.asarray(up, dtype=np.float64)
    if np.linalg.norm(np.cross(forward, up)) < 1e-8:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    down /= np.linalg.norm(down)
    return np.stack([right, down, forward], axis=-1)


def intersect_aabb(
    origins: np.ndarray,
    directions: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Slab test: entry/exit distances of rays against a box; entry > exit means miss."""
    inv = 1.0 / np.where(np.abs(directions) < 1e-12, 1e-12, directions)
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    t_near = np.minimum(t0, t1).max(axis=-1)
    t_far = np.maximum(t0, t1).min(axis=-1)
    return t_near, t_far
