"""Per-view image features and semantic maps, plus bilinear lookups.

The encoder is a small stride-1 conv stack (3x3 -> 3x3 -> 1x1) that keeps
the input resolution, so projected points can be sampled continuously from
its output. Semantic maps come from the scene oracle or from GNSF tensor
files and travel through the pipeline either as probabilities or as
clamped log-probabilities, depending on the representation flag.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .autodiff import Tensor, weighted_rows
from .cameras import Camera
from .nn import ConvStack
from .scenes import OracleView

LOGIT_FLOOR = 1e-6
SIMPLEX_TOL = 1e-9


class FeatureEncoder:
    """conv3x3(3->16) -> relu -> conv3x3(16->16) -> relu -> conv1x1(16->d)."""

    def __init__(self, rng: np.random.Generator, feature_dim: int = 16):
        self.feature_dim = feature_dim
        self.stack = ConvStack(rng, [3, 16, 16, feature_dim], [3, 3, 1], ndim=2)

    def __call__(self, rgb: Tensor | np.ndarray) -> Tensor:
        """(V, H, W, 3) in [0, 1] -> (V, H, W, d)."""
        if not isinstance(rgb, Tensor):
            rgb = Tensor(rgb)
        return self.stack(rgb)

    def parameters(self):
        return self.stack.parameters()


def bilinear_coefficients(
    u: np.ndarray, v: np.ndarray, width: int, height: int
) -> tuple[np.ndarray, np.ndarray]:
    """Flat row indices and blend weights of the 4 neighbors of (u, v).

    Coordinates are clamped to the image, so callers must zero out
    contributions from out-of-bounds samples via their own validity mask.
    """
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, width - 1.0)
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, height - 1.0)
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = u - x0
    fy = v - y0
    rows = np.stack(
        [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
        axis=-1,
    )
    weights = np.stack(
        [(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=-1
    )
    return rows, weights


def sample_bilinear(map_data: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear lookup on an (H, W, C) array at continuous pixel coords."""
    h, w = map_data.shape[:2]
    uu = np.asarray(u, dtype=np.float64)
    vv = np.asarray(v, dtype=np.float64)
    if np.any(uu < 0) or np.any(uu > w - 1) or np.any(vv < 0) or np.any(vv > h - 1):
        raise ValueError("bilinear sample coordinates out of image bounds")
    rows, weights = bilinear_coefficients(uu, vv, w, h)
    flat = map_data.reshape(h * w, -1)
    return np.einsum("kj,kjc->kc", weights, flat[rows])


def sample_semantic_bilinear(
    semantic_map: np.ndarray, u: np.ndarray, v: np.ndarray
) -> np.ndarray:
    """Bilinear lookup renormalized onto the simplex (guards fp drift)."""
    out = sample_bilinear(semantic_map, u, v)
    return out / out.sum(axis=-1, keepdims=True)


def sample_features(
    features_flat: Tensor, rows: np.ndarray, weights: np.ndarray
) -> Tensor:
    """Differentiable bilinear gather from flattened (V*H*W, d) features."""
    return weighted_rows(features_flat, rows, weights)


def to_logits(prob_map: np.ndarray) -> np.ndarray:
    """Probability map -> log-probabilities with a clamp floor."""
    return np.log(np.clip(prob_map, LOGIT_FLOOR, None))


def load_semantic_map(path: str | Path, num_classes: int) -> np.ndarray:
    """Read an externally produced (H, W, c) semantic map in GNSF format."""
    data = tensorio.read_tensor(path)
    if data.ndim != 3 or data.shape[2] != num_classes:
        raise ValueError(f"semantic map must be (H, W, {num_classes}), got {data.shape}")
    sums = data.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > SIMPLEX_TOL) or np.any(data < 0):
        raise ValueError("semantic map rows must be distributions")
    return data.astype(np.float64)


@dataclass
class SourceViews:
    """The per-scene bundle the field conditions on: cameras, RGB, semantics."""

    cameras: list[Camera]
    rgb: np.ndarray  # (V, H, W, 3)
    semantics: np.ndarray  # (V, H, W, c), prob or logits per representation
    representation: str  # "prob" | "logits"

    @property
    def count(self) -> int:
        return len(self.cameras)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.rgb.shape[1], self.rgb.shape[2]

    @property
    def origins(self) -> np.ndarray:
        return np.stack([cam.origin for cam in self.cameras])

    @staticmethod
    def from_oracle_views(
        views: list[OracleView], representation: str = "prob"
    ) -> "SourceViews":
        if representation not in ("prob", "logits"):
            raise ValueError(f"unknown semantic representation '{representation}'")
        prob = np.stack([v.semantic_prob for v in views])
        semantics = to_logits(prob) if representation == "logits" else prob
        return SourceViews(
            cameras=[v.camera for v in views],
            rgb=np.stack([v.rgb for v in views]),
            semantics=semantics,
            representation=representation,
        )
