"""Ray sampling and volume rendering of semantics and color.

Two weighting schemes share the compositing path: density mode uses the
standard transmittance quadrature (with explicit inter-sample distances),
and SDF mode uses the symmetric sigmoid-product bell around the zero
crossing, masked beyond the first truncation region and normalized to
sum 1. Rays that never cross a surface keep all-zero weights, which routes
their pixels to the background class at labeling time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .cameras import Camera, intersect_aabb


def sample_ray_depths(
    near: np.ndarray,
    far: np.ndarray,
    count: int,
    stratified: bool,
    rng: np.random.Generator | None = None,
    jitter: np.ndarray | None = None,
) -> np.ndarray:
    """Per-ray sample depths on uniform bins over [near, far].

    Bin centers when not stratified; one uniform draw inside each bin when
    stratified (``jitter`` may supply the draws for reproducible streams).
    Depths are strictly increasing along every ray.
    """
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    if count < 2:
        raise ValueError("need at least two samples per ray")
    if np.any(near >= far):
        raise ValueError("near must be strictly less than far")
    if stratified:
        if jitter is None:
            if rng is None:
                raise ValueError("stratified sampling needs an rng or jitter")
            jitter = rng.random(near.shape + (count,))
    else:
        jitter = np.full(near.shape + (count,), 0.5)
    offsets = (np.arange(count) + jitter) / count
    return near[..., None] + (far[..., None] - near[..., None]) * offsets


def ray_near_far(
    origins: np.ndarray,
    directions: np.ndarray,
    bounds_lo: np.ndarray,
    bounds_hi: np.ndarray,
    eps: float = 1e-4,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clip rays to the scene bounds; ``ok`` is False for rays that miss."""
    t_near, t_far = intersect_aabb(origins, directions, bounds_lo, bounds_hi)
    t_near = np.maximum(t_near, eps)
    ok = t_near + eps < t_far
    safe_near = np.where(ok, t_near, 1.0)
    safe_far = np.where(ok, t_far, 2.0)
    return safe_near, safe_far, ok


def depth_deltas(depths: np.ndarray, far: np.ndarray) -> np.ndarray:
    """Inter-sample distances; the last bin extends to the far plane."""
    return np.concatenate(
        [np.diff(depths, axis=-1), (far[..., None] - depths[..., -1:])], axis=-1
    )


def density_weights(
    sigma: Tensor, deltas: np.ndarray
) -> tuple[Tensor, Tensor, Tensor]:
    """Transmittance-based weights: w_m = T_m (1 - exp(-sigma_m delta_m)).

    Returns (weights, transmittance, final transmittance); the telescoping
    identity sum(w) + T_final = 1 holds to float64 roundoff.
    """
    if np.any(sigma.data < 0):
        raise ValueError("densities must be nonnegative")
    deltas = np.asarray(deltas, dtype=np.float64)
    tau = sigma * deltas  # (R, M)
    exclusive = tau.cumsum(axis=-1) - tau
    transmittance = (-exclusive).exp()
    alpha = 1.0 - (-tau).exp()
    weights = transmittance * alpha
    final = (-tau.sum(axis=-1)).exp()  # T past the last sample
    return weights, transmittance, final


def first_truncation_mask(
    sigma: np.ndarray, depths: np.ndarray, truncation: float
) -> np.ndarray:
    """Zero-one mask keeping samples up to the first +to- crossing plus tr.

    No crossing anywhere on a ray means no surface: the whole ray is masked
    out and the pixel will composite to zero opacity.
    """
    pos = sigma >= 0.0
    crossing = pos[..., :-1] & ~pos[..., 1:]  # between m and m+1
    starts_inside = ~pos[..., :1]
    any_crossing = crossing.any(axis=-1) | starts_inside[..., 0]
    first = np.argmax(
        np.concatenate([starts_inside, crossing], axis=-1), axis=-1
    )  # index of the first negative sample
    crossing_depth = np.take_along_axis(depths, first[..., None], axis=-1)
    keep = depths <= crossing_depth + truncation
    return (keep & any_crossing[..., None]).astype(np.float64)


def sdf_weights(
    sigma: Tensor, depths: np.ndarray, truncation: float
) -> tuple[Tensor, np.ndarray]:
    """Normalized truncation-band weights for signed-distance geometry.

    Raw weight sigmoid(s/tr) * sigmoid(-s/tr) peaks (at 0.25) on the
    surface and is symmetric in the sign of s. Samples past the first
    truncation region are zeroed before normalizing to sum 1; rays with
    no crossing stay all-zero.
    """
    if truncation <= 0:
        raise ValueError("truncation must be positive")
    scaled = sigma * (1.0 / truncation)
    raw = scaled.sigmoid() * (scaled * -1.0).sigmoid()
    mask = first_truncation_mask(sigma.data, depths, truncation)
    masked = raw * mask
    total = masked.sum(axis=-1, keepdims=True)
    fix = np.where(total.data <= 0.0, 1.0, 0.0)
    weights = masked / (total + fix)
    return weights, mask


def composite(weights: Tensor, values: Tensor | np.ndarray) -> Tensor:
    """Weighted sum over the sample axis: (R, M) x (R, M, C) -> (R, C)."""
    r, m = weights.shape
    if values.shape[:2] != (r, m):
        raise ValueError("weights and per-sample values are misaligned")
    return (weights.reshape(r, m, 1) * values).sum(axis=1)


def labels_from_semantics(semantic: np.ndarray, opacity: np.ndarray) -> np.ndarray:
    """Argmax labeling with 1 - opacity appended as the background score."""
    scores = np.concatenate([(1.0 - opacity)[..., None], semantic], axis=-1)
    winner = scores.argmax(axis=-1)
    return np.where(winner == 0, 0, winner - 1).astype(np.int64)


@dataclass
class RenderedView:
    semantic: np.ndarray  # (H, W, c)
    labels: np.ndarray  # (H, W)
    rgb: np.ndarray  # (H, W, 3)
    opacity: np.ndarray  # (H, W)


def render_view(
    field,
    camera: Camera,
    mode: str,
    samples_per_ray: int = 64,
    stratified: bool = False,
    seed: int = 0,
    chunk_rays: int = 2048,
    weight_floor: float = 1e-4,
) -> RenderedView:
    """Render every pixel of ``camera`` through a prepared scene field.

    ``field`` must expose ``query_sigma`` / ``query_appearance`` plus
    ``bounds_lo``/``bounds_hi``/``truncation``/``num_classes``. Geometry is
    queried at every ray sample; the much heavier multi-view voting runs
    only where the rendering weight exceeds ``weight_floor`` (the skipped
    mass is bounded by M * weight_floor per ray). Jitter is drawn per pixel
    up front, so results do not depend on chunking.
    """
    h, w = camera.height, camera.width
    origins, dirs = camera.pixel_rays()
    near, far, ok = ray_near_far(origins, dirs, field.bounds_lo, field.bounds_hi)
    n_rays = h * w
    c = field.num_classes

    jitter = None
    if stratified:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
        jitter = rng.random((n_rays, samples_per_ray))

    semantic = np.zeros((n_rays, c))
    rgb = np.zeros((n_rays, 3))
    opacity = np.zeros(n_rays)

    for start in range(0, n_rays, chunk_rays):
        stop = min(start + chunk_rays, n_rays)
        live = ok[start:stop]
        if not live.any():
            continue
        idx = np.arange(start, stop)[live]
        depths = sample_ray_depths(
            near[idx],
            far[idx],
            samples_per_ray,
            stratified,
            jitter=jitter[idx] if jitter is not None else None,
        )
        points = origins[idx, None, :] + depths[..., None] * dirs[idx, None, :]
        r, m = depths.shape
        sigma = field.query_sigma(points.reshape(-1, 3)).reshape(r, m)
        if mode == "density":
            weights, _, _ = density_weights(
                Tensor(sigma), depth_deltas(depths, far[idx])
            )
        elif mode == "sdf":
            weights, _ = sdf_weights(Tensor(sigma), depths, field.truncation)
        else:
            raise ValueError(f"unknown rendering mode '{mode}'")
        w_arr = weights.data
        opacity[idx] = w_arr.sum(axis=-1)

        keep = w_arr > weight_floor
        if keep.any():
            flat_keep = keep.reshape(-1)
            sem_k, rgb_k = field.query_appearance(points.reshape(-1, 3)[flat_keep])
            wk = w_arr.reshape(-1)[flat_keep][:, None]
            ray_ids = np.broadcast_to(np.arange(r)[:, None], (r, m)).reshape(-1)[flat_keep]
            for ch in range(c):
                semantic[idx, ch] += np.bincount(
                    ray_ids, weights=(wk[:, 0] * sem_k[:, ch]), minlength=r
                )
            for ch in range(3):
                rgb[idx, ch] += np.bincount(
                    ray_ids, weights=(wk[:, 0] * rgb_k[:, ch]), minlength=r
                )

    labels = labels_from_semantics(semantic, opacity)
    return RenderedView(
        semantic=semantic.reshape(h, w, c),
        labels=labels.reshape(h, w),
        rgb=rgb.reshape(h, w, 3),
        opacity=opacity.reshape(h, w),
    )
