"""Ray-batch training: cross-entropy on rendered semantics plus photometric MSE.

Each iteration picks one training scene, one target view, and the nearest
source views; a batch of random target pixels is rendered through the full
pipeline and both losses are backpropagated into every head. All sampling
comes from generators seeded by the config, so reruns are bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .config import TrainConfig
from .model import SceneContext, SemanticFieldModel, evaluate_points
from .nn import adam_step, zero_grads
from .renderer import (
    composite,
    density_weights,
    depth_deltas,
    ray_near_far,
    sample_ray_depths,
    sdf_weights,
)
from .scenes import Dataset, SceneRecord


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; diagnostics are written before raising."""


def semantic_loss(predicted: Tensor, target: np.ndarray) -> Tensor:
    """Mean cross-entropy  -1/|R| sum target . log(clamp(pred, 1e-8, 1))."""
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ValueError(
            f"prediction shape {predicted.shape} != target shape {target.shape}"
        )
    if np.any(predicted.data < 0):
        raise ValueError("semantic predictions must be nonnegative")
    log_pred = predicted.clamp(1e-8, 1.0).log()
    return (log_pred * target).sum(axis=-1).mean() * -1.0


def photometric_loss(predicted: Tensor, target: np.ndarray) -> Tensor:
    diff = predicted - np.asarray(target, dtype=np.float64)
    return (diff * diff).mean()


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros(labels.shape + (num_classes,))
    np.put_along_axis(out, labels[..., None].astype(np.int64), 1.0, axis=-1)
    return out


def nearest_source_indices(
    record: SceneRecord, target_index: int, count: int, allowed: list[int]
) -> list[int]:
    """The ``count`` source views nearest to the target camera origin."""
    target_origin = record.views[target_index].camera.origin
    candidates = [i for i in allowed if i != target_index]
    distances = [
        (np.linalg.norm(record.views[i].camera.origin - target_origin), i)
        for i in candidates
    ]
    distances.sort()
    return [i for _, i in distances[:count]]


def train_view_indices(record: SceneRecord, holdout: int) -> list[int]:
    """Views usable during training; the last ``holdout`` are novel-view eval."""
    total = len(record.views)
    return list(range(total - holdout))


@dataclass
class TrainResult:
    model: SemanticFieldModel
    losses: list[float]
    semantic_losses: list[float]
    photometric_losses: list[float]
    checkpoints: list[str] = field(default_factory=list)


def render_ray_batch(
    model: SemanticFieldModel,
    ctx: SceneContext,
    origins: np.ndarray,
    directions: np.ndarray,
    rng: np.random.Generator | None,
    apply_visibility: bool,
    stratified: bool = True,
) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable render of a ray batch -> (semantics, rgb, opacity)."""
    cfg = model.config
    near, far, ok = ray_near_far(origins, directions, ctx.bounds_lo, ctx.bounds_hi)
    if not ok.all():
        raise ValueError("ray batch contains rays that miss the scene bounds")
    depths = sample_ray_depths(near, far, cfg.samples_per_ray, stratified, rng=rng)
    r, m = depths.shape
    points = (origins[:, None, :] + depths[..., None] * directions[:, None, :]).reshape(-1, 3)
    out = evaluate_points(model.heads, cfg, ctx, points, apply_visibility)
    sigma = out.sigma.reshape(r, m)
    if cfg.mode == "density":
        weights, _, _ = density_weights(sigma, depth_deltas(depths, far))
    else:
        weights, _ = sdf_weights(sigma, depths, cfg.truncation)
    num_classes = out.semantics.shape[-1]
    rendered_sem = composite(weights, out.semantics.reshape(r, m, num_classes))
    rendered_rgb = composite(weights, out.rgb.reshape(r, m, 3))
    opacity = weights.sum(axis=-1)
    return rendered_sem, rendered_rgb, opacity


def sample_pixel_batch(
    rng: np.random.Generator,
    record: SceneRecord,
    view_index: int,
    batch_size: int,
    bounds_lo: np.ndarray,
    bounds_hi: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random in-bounds pixels of a view -> (origins, directions, pixel ids)."""
    view = record.views[view_index]
    h, w = view.semantic_gt.shape
    pix = rng.integers(0, h * w, size=batch_size)
    uv = np.stack([pix % w, pix // w], axis=-1).astype(np.float64)
    origins, dirs = view.camera.pixel_rays(uv)
    _, _, ok = ray_near_far(origins, dirs, bounds_lo, bounds_hi)
    keep = np.flatnonzero(ok)
    return origins[keep], dirs[keep], pix[keep]


def train(
    dataset: Dataset,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    log_every: int = 100,
    log_fn=None,
) -> TrainResult:
    """Optimize all heads on the dataset's training split."""
    if config.train_scenes < 2:
        raise ValueError("generalization training needs at least two scenes")
    if config.train_scenes > len(dataset.records):
        raise ValueError("not enough scenes in the dataset for the requested split")
    config = config.with_overrides(num_classes=dataset.num_classes)
    model = SemanticFieldModel(config)
    batch_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([config.seed, 0xB42]))
    )

    train_records = dataset.records[: config.train_scenes]
    params = model.named_parameters()
    trainable = list(model.trainable_parameters().values())
    losses: list[float] = []
    sem_losses: list[float] = []
    rgb_losses: list[float] = []
    checkpoints: list[str] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    for iteration in range(config.iterations):
        record = train_records[int(batch_rng.integers(len(train_records)))]
        usable = train_view_indices(record, config.holdout_views)
        target = usable[int(batch_rng.integers(len(usable)))]
        sources = nearest_source_indices(record, target, config.source_views, usable)
        views = [record.views[i] for i in sources]

        ctx = model.prepare_scene(
            views,
            record.scene.bounds_lo,
            record.scene.bounds_hi,
            scene=record.scene if config.geometry_source == "oracle" else None,
            on_tape=True,
        )
        apply_visibility = (
            config.mode == "sdf"
            and config.visibility == "on"
            and iteration >= config.warmup_iterations
        )

        origins, dirs, pix = sample_pixel_batch(
            batch_rng,
            record,
            target,
            config.batch_size,
            ctx.bounds_lo,
            ctx.bounds_hi,
        )
        gt_labels = record.views[target].semantic_gt.reshape(-1)[pix]
        gt_sem = one_hot(gt_labels, config.num_classes)
        gt_rgb = record.views[target].rgb.reshape(-1, 3)[pix]

        rendered_sem, rendered_rgb, _ = render_ray_batch(
            model, ctx, origins, dirs, batch_rng, apply_visibility, config.stratified
        )
        loss_s = semantic_loss(rendered_sem, gt_sem)
        loss_rgb = photometric_loss(rendered_rgb, gt_rgb)
        loss = loss_s * config.lambda_sem + loss_rgb * config.lambda_rgb

        value = loss.item()
        if not np.isfinite(value):
            _dump_divergence(out_path, iteration, losses, config)
            raise TrainingDiverged(f"loss became non-finite at iteration {iteration}")
        losses.append(value)
        sem_losses.append(loss_s.item())
        rgb_losses.append(loss_rgb.item())

        zero_grads(params.values())
        loss.backward()
        adam_step(
            trainable,
            lr=config.learning_rate,
            betas=(config.adam_beta1, config.adam_beta2),
            eps=config.adam_eps,
        )

        if log_fn is not None and (iteration % log_every == 0 or iteration == config.iterations - 1):
            log_fn(iteration, value)
        if (
            out_path is not None
            and config.checkpoint_every > 0
            and (iteration + 1) % config.checkpoint_every == 0
        ):
            ckpt = out_path / f"checkpoint_{iteration + 1:06d}.gnsf"
            model.save(ckpt)
            checkpoints.append(str(ckpt))

    if out_path is not None:
        final = out_path / "checkpoint_final.gnsf"
        model.save(final)
        checkpoints.append(str(final))
        (out_path / "loss_curve.json").write_text(
            json.dumps(
                {
                    "total": losses,
                    "semantic": sem_losses,
                    "photometric": rgb_losses,
                }
            )
        )
    return TrainResult(model, losses, sem_losses, rgb_losses, checkpoints)


def _dump_divergence(out_path, iteration, losses, config) -> None:
    payload = {
        "iteration": iteration,
        "recent_losses": losses[-20:],
        "config": config.to_dict(),
    }
    target = (out_path or Path(".")) / "divergence_dump.json"
    try:
        target.write_text(json.dumps(payload, indent=2))
    except OSError:
        pass
