"""Soft voting over source-view semantics, with SDF-based occlusion masking.

Per query point, each valid view contributes its sampled semantic
distribution; a small MLP scores every view from its fused feature, the
interpolated volume encoding, and the view displacement, and the scores
are softmax-normalized over the valid views only. Occluded views are
detected by marching the SDF along the segment from the view origin to the
point: any sign dip into negative territory before the point's own
truncation band means some other surface is crossed first.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Tensor, concat, masked_softmax, softmax
from .cameras import intersect_aabb
from .nn import Mlp, MlpSpec
from .volume import VolumeGrid


class FeatureFuser:
    """MLP([F_i, mean, variance]) -> per-view fused feature."""

    def __init__(
        self, rng: np.random.Generator, feature_dim: int, hidden: int = 32, out_dim: int = 16
    ):
        self.out_dim = out_dim
        self.mlp = Mlp(rng, MlpSpec([3 * feature_dim, hidden, out_dim]))

    def __call__(self, features: Tensor, mean: Tensor, var: Tensor) -> Tensor:
        """(V, K, d), (K, d), (K, d) -> (V, K, out_dim)."""
        v, k, d = features.shape
        stacked = concat(
            [features, mean.tile_leading(v), var.tile_leading(v)], axis=-1
        )
        out = self.mlp(stacked.reshape(v * k, 3 * d))
        return out.reshape(v, k, self.out_dim)

    def parameters(self):
        return self.mlp.parameters()


class VotingHead:
    """MLP(F'_i, M(x), displacement) -> one unbounded score per view."""

    def __init__(
        self,
        rng: np.random.Generator,
        fused_dim: int,
        encoding_dim: int,
        hidden: tuple[int, int] = (32, 16),
    ):
        self.in_dim = fused_dim + encoding_dim + 4
        self.mlp = Mlp(rng, MlpSpec([self.in_dim, hidden[0], hidden[1], 1]))

    def __call__(
        self, fused: Tensor, encoding: Tensor, displacement: np.ndarray
    ) -> Tensor:
        """(V, K, f), (K, g), (V, K, 4) -> scores (V, K).

        The displacement carries the raw point-minus-origin vector plus its
        norm, so view distance is directly available to the score.
        """
        v, k, f = fused.shape
        stacked = concat(
            [fused, encoding.tile_leading(v), Tensor(displacement)], axis=-1
        )
        out = self.mlp(stacked.reshape(v * k, self.in_dim))
        return out.reshape(v, k)

    def parameters(self):
        return self.mlp.parameters()


class DirectHead:
    """Ablation arm: regress class logits from [mean fused feature, M(x)]."""

    def __init__(
        self,
        rng: np.random.Generator,
        fused_dim: int,
        encoding_dim: int,
        num_classes: int,
        hidden: int = 32,
    ):
        self.mlp = Mlp(
            rng, MlpSpec([fused_dim + encoding_dim, hidden, hidden, num_classes])
        )

    def __call__(self, fused_mean: Tensor, encoding: Tensor) -> Tensor:
        """(K, f), (K, g) -> distributions (K, c)."""
        logits = self.mlp(concat([fused_mean, encoding], axis=-1))
        return softmax(logits, axis=-1)

    def parameters(self):
        return self.mlp.parameters()


def soft_vote(
    scores: Tensor,
    semantics: np.ndarray,
    valid: np.ndarray,
    representation: str = "prob",
) -> tuple[Tensor, np.ndarray]:
    """Blend per-view semantics with softmax(scores) over valid views.

    ``semantics`` is (V, K, c) holding distributions (prob mode) or clamped
    log-probabilities (logits mode, softmaxed after fusion). Points with no
    valid view return the uniform distribution and are flagged unsupported.
    """
    weights = masked_softmax(scores, valid.astype(np.float64), axis=0)
    v, k = weights.shape
    fused = (weights.reshape(v, k, 1) * semantics).sum(axis=0)
    if representation == "logits":
        fused = softmax(fused, axis=-1)
    unsupported = ~valid.any(axis=0)
    if unsupported.any():
        c = semantics.shape[-1]
        keep = (~unsupported).astype(np.float64)[:, None]
        fused = fused * keep + unsupported[:, None].astype(np.float64) / c
    return fused, unsupported


def visibility(
    sdf_evaluator: Callable[[np.ndarray], np.ndarray],
    origin: np.ndarray,
    target: np.ndarray,
    step: float,
) -> bool:
    """March the SDF from a view origin to a point; single-pair form.

    Visible when the sign sequence along the segment shows at most one
    positive-to-negative transition and never returns to positive before
    the point: crossing into the point's own surface is fine, but dipping
    through some other surface and coming back out is an occlusion. An
    origin inside geometry invalidates the view outright.
    """
    if step <= 0:
        raise ValueError("march step must be positive")
    mask = visibility_mask(
        sdf_evaluator,
        np.asarray(origin, dtype=np.float64)[None],
        np.asarray(target, dtype=np.float64)[None],
        step,
    )
    return bool(mask[0, 0])


def visibility_mask(
    sdf_evaluator: Callable[[np.ndarray], np.ndarray],
    origins: np.ndarray,
    points: np.ndarray,
    step: float,
    clip_lo: np.ndarray | None = None,
    clip_hi: np.ndarray | None = None,
    chunk: int = 4_000_000,
) -> np.ndarray:
    """Batched sign-transition test; (V, K) True where the point is visible.

    A second positive-to-negative transition requires an intervening
    negative-to-positive one, so the whole rule reduces to: occluded iff
    the marched SDF ever goes negative and later positive again before
    reaching the point. ``clip_lo``/``clip_hi`` optionally restrict
    evaluation to an axis-aligned box outside of which the field is known
    positive (empty space); skipped samples cannot flip the test because a
    positive prefix or suffix only matters after a negative sample, which
    can only occur inside the box.
    """
    if step <= 0:
        raise ValueError("march step must be positive")
    origins = np.atleast_2d(origins)
    points = np.atleast_2d(points)
    v, k = len(origins), len(points)
    bad_origin = sdf_evaluator(origins) < 0.0

    diff = points[None, :, :] - origins[:, None, :]  # (V, K, 3)
    dist = np.linalg.norm(diff, axis=-1)
    unit = diff / np.maximum(dist, 1e-12)[..., None]
    limit = dist - 0.5 * step  # transitions strictly before the point

    t_lo = np.zeros((v, k))
    t_hi = limit.copy()
    if clip_lo is not None:
        flat_o = np.broadcast_to(origins[:, None, :], (v, k, 3)).reshape(-1, 3)
        enter, leave = intersect_aabb(
            flat_o, unit.reshape(-1, 3), np.asarray(clip_lo), np.asarray(clip_hi)
        )
        t_lo = np.maximum(enter.reshape(v, k), 0.0)
        t_hi = np.minimum(leave.reshape(v, k), limit)

    max_steps = max(int(np.ceil(t_hi.max() / step)), 0)
    seen_negative = np.zeros((v, k), dtype=bool)
    occluded = np.zeros((v, k), dtype=bool)
    occluded[bad_origin, :] = True

    t_values = (np.arange(1, max_steps + 1)) * step
    samples_per_chunk = max(chunk // max(v * k, 1), 1)
    for start in range(0, max_steps, samples_per_chunk):
        ts = t_values[start : start + samples_per_chunk]  # (S,) ascending
        in_range = (ts[None, None, :] >= t_lo[..., None]) & (
            ts[None, None, :] <= t_hi[..., None]
        )
        active = in_range & ~occluded[..., None]
        if not active.any():
            continue
        pos = (
            origins[:, None, None, :]
            + ts[None, None, :, None] * unit[:, :, None, :]
        )  # (V, K, S, 3)
        flat_active = active.reshape(-1)
        values = np.full(flat_active.shape, np.inf)
        values[flat_active] = sdf_evaluator(pos.reshape(-1, 3)[flat_active])
        negative = values.reshape(v, k, -1) < 0.0
        # positive sample after an earlier negative one -> occluded
        neg_before = np.concatenate(
            [
                seen_negative[..., None],
                np.logical_or.accumulate(negative, axis=-1)[..., :-1],
            ],
            axis=-1,
        )
        evaluated = active
        flipped = (~negative & neg_before & evaluated).any(axis=-1)
        occluded |= flipped
        seen_negative |= negative.any(axis=-1)
    return ~occluded


def grid_sdf_evaluator(
    sigma_vertices: np.ndarray, grid: VolumeGrid, empty_value: float
) -> Callable[[np.ndarray], np.ndarray]:
    """Trilinear SDF lookup on a precomputed vertex field; empty outside."""

    def evaluate(points: np.ndarray) -> np.ndarray:
        rows, weights, inside = grid.trilinear_coefficients(points)
        vals = (sigma_vertices[rows] * weights).sum(axis=-1)
        return np.where(inside, vals, empty_value)

    return evaluate
