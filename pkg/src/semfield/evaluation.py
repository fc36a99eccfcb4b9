"""Confusion-matrix metrics, 2D/3D evaluation protocols, ablation runner.

2D evaluation renders held-out views and scores argmax labels against the
oracle ground truth. 3D evaluation queries the voted semantics at grid
points inside the truncation band of the true surface (a near-surface
approximation of mesh-vertex protocols; no meshing happens here) and
scores them against the class of the nearest primitive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import no_grad
from .config import TrainConfig
from .model import PreparedField, SemanticFieldModel, evaluate_points
from .renderer import render_view
from .scenes import Dataset, SceneRecord
from .training import (
    TrainingDiverged,
    nearest_source_indices,
    train,
    train_view_indices,
)

EVAL_3D_NOTE = (
    "3D protocol: near-surface grid points within the truncation band, "
    "labels voted per point; approximates surface-sampled evaluation."
)


class ConfusionMatrix:
    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, predicted: np.ndarray, target: np.ndarray) -> None:
        predicted = np.asarray(predicted).reshape(-1).astype(np.int64)
        target = np.asarray(target).reshape(-1).astype(np.int64)
        if predicted.shape != target.shape:
            raise ValueError("prediction/target shapes differ")
        ok = (target >= 0) & (target < self.num_classes)
        flat = target[ok] * self.num_classes + predicted[ok]
        self.counts += np.bincount(flat, minlength=self.num_classes**2).reshape(
            self.num_classes, self.num_classes
        )

    def merge(self, other: "ConfusionMatrix") -> None:
        self.counts += other.counts

    def per_class_iou(self) -> np.ndarray:
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / np.where(union == 0, 1, union), np.nan)

    def present(self) -> np.ndarray:
        return self.counts.sum(axis=1) > 0

    def miou(self) -> float:
        iou = self.per_class_iou()
        mask = self.present()
        return float(np.nanmean(iou[mask])) if mask.any() else float("nan")

    def macc(self) -> float:
        mask = self.present()
        if not mask.any():
            return float("nan")
        tp = np.diag(self.counts).astype(np.float64)
        totals = self.counts.sum(axis=1).astype(np.float64)
        acc = tp[mask] / totals[mask]
        return float(acc.mean())


@dataclass
class MetricsReport:
    confusion: np.ndarray
    per_class_iou: list[float]
    miou: float
    macc: float
    pixel_counts: list[int]
    protocol: str = ""

    @staticmethod
    def from_confusion(cm: ConfusionMatrix, protocol: str = "") -> "MetricsReport":
        return MetricsReport(
            confusion=cm.counts.copy(),
            per_class_iou=[float(x) for x in cm.per_class_iou()],
            miou=cm.miou(),
            macc=cm.macc(),
            pixel_counts=[int(x) for x in cm.counts.sum(axis=1)],
            protocol=protocol,
        )

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "macc": self.macc,
            "per_class_iou": self.per_class_iou,
            "pixel_counts": self.pixel_counts,
            "confusion": self.confusion.tolist(),
            "protocol": self.protocol,
        }

    def table(self) -> str:
        lines = [f"{'class':>8} {'IoU':>8} {'pixels':>10}"]
        for k, (iou, count) in enumerate(zip(self.per_class_iou, self.pixel_counts)):
            iou_text = f"{iou:8.4f}" if np.isfinite(iou) else "     n/a"
            lines.append(f"{k:>8} {iou_text} {count:>10}")
        lines.append(f"mIoU = {self.miou:.4f}   mAcc = {self.macc:.4f}")
        return "\n".join(lines)


def novel_view_targets(dataset: Dataset, config: TrainConfig, num_scenes: int = 4):
    """Held-out views of the first training scenes."""
    targets = []
    for scene_index in range(min(num_scenes, config.train_scenes)):
        record = dataset.records[scene_index]
        total = len(record.views)
        for view_index in range(total - config.holdout_views, total):
            targets.append((scene_index, view_index))
    return targets


def novel_scene_targets(
    dataset: Dataset, config: TrainConfig, num_scenes: int = 4, views_per_scene: int = 3
):
    """Evenly spaced target views of scenes outside the training split."""
    targets = []
    stop = min(config.train_scenes + num_scenes, len(dataset.records))
    for scene_index in range(config.train_scenes, stop):
        total = len(dataset.records[scene_index].views)
        step = max(total // views_per_scene, 1)
        for view_index in range(0, total, step)[:views_per_scene]:
            targets.append((scene_index, view_index))
    return targets


def _eval_sources(
    record: SceneRecord, target: int, config: TrainConfig, policy: str
) -> list[int]:
    if policy == "train":
        allowed = train_view_indices(record, config.holdout_views)
    elif policy == "all":
        allowed = list(range(len(record.views)))
    else:
        raise ValueError(f"unknown source policy '{policy}'")
    return nearest_source_indices(record, target, config.source_views, allowed)


def eval_2d(
    model: SemanticFieldModel,
    dataset: Dataset,
    targets: list[tuple[int, int]],
    source_policy: str = "train",
    samples_per_ray: int | None = None,
) -> MetricsReport:
    """Render each target view, accumulate confusion against the oracle GT."""
    if not targets:
        raise ValueError("no evaluation views given")
    cfg = model.config
    cm = ConfusionMatrix(dataset.num_classes)
    for scene_index, view_index in targets:
        record = dataset.records[scene_index]
        sources = _eval_sources(record, view_index, cfg, source_policy)
        views = [record.views[i] for i in sources]
        ctx = model.prepare_scene(
            views,
            record.scene.bounds_lo,
            record.scene.bounds_hi,
            scene=record.scene if cfg.geometry_source == "oracle" else None,
        )
        field = PreparedField(model.heads, cfg, ctx)
        rendered = render_view(
            field,
            record.views[view_index].camera,
            mode=cfg.mode,
            samples_per_ray=samples_per_ray or cfg.samples_per_ray,
            stratified=False,
        )
        cm.add(rendered.labels, record.views[view_index].semantic_gt)
    return MetricsReport.from_confusion(cm, protocol="2d-render")


def single_view_baseline(dataset: Dataset, targets: list[tuple[int, int]]) -> MetricsReport:
    """mIoU of one noisy oracle view's own argmax labels (no fusion at all)."""
    cm = ConfusionMatrix(dataset.num_classes)
    for scene_index, view_index in targets:
        view = dataset.records[scene_index].views[view_index]
        cm.add(view.semantic_prob.argmax(axis=-1), view.semantic_gt)
    return MetricsReport.from_confusion(cm, protocol="single-view-baseline")


def near_surface_points(
    record: SceneRecord, resolution: int, truncation: float
) -> np.ndarray:
    """Grid points within one truncation distance of the true surface."""
    axes = [
        np.linspace(record.scene.bounds_lo[a], record.scene.bounds_hi[a], resolution)
        for a in range(3)
    ]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    points = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    keep = np.abs(record.scene.sdf(points)) < truncation
    return points[keep]


def eval_3d(
    model: SemanticFieldModel,
    dataset: Dataset,
    scene_indices: list[int],
    grid_resolution: int = 32,
    geometry_source: str | None = None,
    chunk: int = 4096,
) -> MetricsReport:
    """Vote semantics at near-surface grid points, score vs nearest primitive."""
    cfg = model.config
    if cfg.mode != "sdf":
        raise ValueError("3D evaluation requires an sdf-mode checkpoint")
    if geometry_source is not None:
        cfg = cfg.with_overrides(geometry_source=geometry_source)
    cm = ConfusionMatrix(dataset.num_classes)
    for scene_index in scene_indices:
        record = dataset.records[scene_index]
        ctx = model.prepare_scene(
            [record.views[i] for i in range(len(record.views))],
            record.scene.bounds_lo,
            record.scene.bounds_hi,
            scene=record.scene,
        )
        # detach the oracle scene unless oracle geometry was asked for;
        # visibility then runs on the predicted sigma field
        if cfg.geometry_source != "oracle":
            ctx.scene = None
        points = near_surface_points(record, grid_resolution, cfg.truncation)
        apply_visibility = cfg.visibility == "on"
        preds = np.empty(len(points), dtype=np.int64)
        for start in range(0, len(points), chunk):
            block = points[start : start + chunk]
            with no_grad():
                out = evaluate_points(model.heads, cfg, ctx, block, apply_visibility)
            preds[start : start + chunk] = out.semantics.data.argmax(axis=-1)
        gt = record.scene.class_of_nearest(points)
        cm.add(preds, gt)
    return MetricsReport.from_confusion(cm, protocol=EVAL_3D_NOTE)


ABLATION_ARMS: dict[str, dict] = {
    "predict_directly": {
        "semantic_head": "direct",
        "semantic_representation": "prob",
        "visibility": "off",
    },
    "vote_logits": {
        "semantic_head": "vote",
        "semantic_representation": "logits",
        "visibility": "off",
    },
    "vote_prob": {
        "semantic_head": "vote",
        "semantic_representation": "prob",
        "visibility": "off",
    },
    "vote_prob_visibility": {
        "semantic_head": "vote",
        "semantic_representation": "prob",
        "visibility": "on",
    },
}


@dataclass
class AblationResult:
    arm: str
    seed: int
    miou: float
    macc: float
    diverged: bool = False
    checkpoint: str | None = None


@dataclass
class AblationTable:
    results: list[AblationResult] = field(default_factory=list)

    def median_miou(self, arm: str) -> float:
        values = [r.miou for r in self.results if r.arm == arm and not r.diverged]
        return float(np.median(values)) if values else float("nan")

    def to_dict(self) -> dict:
        return {
            "runs": [
                {
                    "arm": r.arm,
                    "seed": r.seed,
                    "miou": r.miou,
                    "macc": r.macc,
                    "diverged": r.diverged,
                    "checkpoint": r.checkpoint,
                }
                for r in self.results
            ],
            "median_miou": {arm: self.median_miou(arm) for arm in ABLATION_ARMS},
        }

    def table(self) -> str:
        lines = [f"{'arm':<24} {'median mIoU':>12}"]
        for arm in ABLATION_ARMS:
            lines.append(f"{arm:<24} {self.median_miou(arm):>12.4f}")
        diverged = [r for r in self.results if r.diverged]
        for r in diverged:
            lines.append(f"DIVERGED: {r.arm} seed={r.seed}")
        return "\n".join(lines)


def run_ablations(
    dataset: Dataset,
    base_config: TrainConfig,
    seeds: list[int],
    eval_scenes: list[int] | None = None,
    out_dir: str | Path | None = None,
    grid_resolution: int = 32,
    log_fn=None,
) -> AblationTable:
    """Train and 3D-evaluate the four voting-design arms on shared seeds.

    Every arm of a seed sees identical data and batch streams; only the
    flagged heads differ. Divergent runs are reported in the table rather
    than dropped.
    """
    if eval_scenes is None:
        eval_scenes = list(
            range(
                base_config.train_scenes,
                min(base_config.train_scenes + 4, len(dataset.records)),
            )
        )
    out_path = Path(out_dir) if out_dir is not None else None
    table = AblationTable()
    for seed in seeds:
        for arm, flags in ABLATION_ARMS.items():
            config = base_config.with_overrides(mode="sdf", seed=seed, **flags)
            arm_dir = None
            if out_path is not None:
                arm_dir = out_path / f"{arm}_seed{seed}"
            try:
                result = train(dataset, config, out_dir=arm_dir)
            except TrainingDiverged:
                table.results.append(
                    AblationResult(arm, seed, float("nan"), float("nan"), diverged=True)
                )
                continue
            report = eval_3d(result.model, dataset, eval_scenes, grid_resolution)
            checkpoint = result.checkpoints[-1] if result.checkpoints else None
            table.results.append(
                AblationResult(arm, seed, report.miou, report.macc, checkpoint=checkpoint)
            )
            if log_fn is not None:
                log_fn(arm, seed, report.miou)
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "ablations.json").write_text(json.dumps(table.to_dict(), indent=2))
    return table
