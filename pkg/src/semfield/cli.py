"""Command-line surface: dataset generation, training, rendering, evaluation.

Every training-related flag mirrors a TrainConfig field; a ``--config``
key=value file sets defaults and explicit flags override it. Reports are
written both as JSON and as a printed table. The exit code is nonzero on
divergence or failed preconditions.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensorio
from .config import TrainConfig, load_config
from .evaluation import (
    eval_2d,
    eval_3d,
    novel_scene_targets,
    novel_view_targets,
    run_ablations,
    single_view_baseline,
)
from .model import PreparedField, SemanticFieldModel, oracle_field
from .renderer import render_view
from .volume import vertex_sigma_field
from .scenes import (
    SceneSetConfig,
    generate_dataset,
    load_dataset,
    load_scene_dir,
    save_dataset,
)
from .training import TrainingDiverged, nearest_source_indices, train

LABEL_PALETTE = [
    (0, 0, 0),
    (214, 69, 65),
    (63, 156, 53),
    (154, 206, 90),
    (52, 101, 164),
    (121, 87, 166),
    (240, 180, 60),
    (90, 200, 200),
]


def write_label_png(path: Path, labels: np.ndarray) -> None:
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    palette = []
    for k in range(256):
        palette.extend(LABEL_PALETTE[k % len(LABEL_PALETTE)] if k < len(LABEL_PALETTE) else (0, 0, 0))
    img.putpalette(palette)
    img.save(path)


def write_rgb_png(path: Path, rgb: np.ndarray) -> None:
    Image.fromarray((np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)).save(path)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="key=value config file")
    parser.add_argument("--mode", choices=["density", "sdf"])
    parser.add_argument("--semantic-head", dest="semantic_head", choices=["vote", "direct"])
    parser.add_argument(
        "--semantic-representation",
        dest="semantic_representation",
        choices=["prob", "logits"],
    )
    parser.add_argument("--visibility", choices=["on", "off"])
    parser.add_argument(
        "--geometry-source", dest="geometry_source", choices=["predicted", "oracle"]
    )
    parser.add_argument("--iterations", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--samples-per-ray", dest="samples_per_ray", type=int)
    parser.add_argument("--source-views", dest="source_views", type=int)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float)
    parser.add_argument("--lambda-sem", dest="lambda_sem", type=float)
    parser.add_argument("--lambda-rgb", dest="lambda_rgb", type=float)
    parser.add_argument("--truncation", type=float)
    parser.add_argument("--grid-resolution", dest="grid_resolution", type=int)
    parser.add_argument("--train-scenes", dest="train_scenes", type=int)
    parser.add_argument("--holdout-views", dest="holdout_views", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--freeze-encoder", dest="freeze_encoder", action="store_const", const=True)
    parser.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    parser.add_argument("--visibility-warmup", dest="visibility_warmup", type=int)


_CONFIG_KEYS = [
    "mode",
    "semantic_head",
    "semantic_representation",
    "visibility",
    "geometry_source",
    "iterations",
    "batch_size",
    "samples_per_ray",
    "source_views",
    "learning_rate",
    "lambda_sem",
    "lambda_rgb",
    "truncation",
    "grid_resolution",
    "train_scenes",
    "holdout_views",
    "seed",
    "freeze_encoder",
    "checkpoint_every",
    "visibility_warmup",
]


def _config_from_args(args: argparse.Namespace) -> TrainConfig:
    overrides = {key: getattr(args, key, None) for key in _CONFIG_KEYS}
    return load_config(args.config, overrides)


def _write_report(report_dict: dict, table: str, out: str | None) -> None:
    print(table)
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report_dict, indent=2))
        print(f"report written to {path}")


def cmd_gen_scenes(args: argparse.Namespace) -> int:
    cfg = SceneSetConfig(
        num_classes=args.classes,
        views_per_scene=args.views,
        image_size=args.image_size,
    )
    dataset = generate_dataset(args.count, args.seed, args.noise_rate, cfg)
    save_dataset(dataset, args.out)
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    dataset = load_dataset(args.data)
    def log(iteration, value):
        print(f"iter {iteration:6d}  loss {value:.5f}")

    result = train(dataset, config, out_dir=args.out, log_fn=log)
    print(f"final loss {result.losses[-1]:.5f}; checkpoints: {result.checkpoints}")
    return 0


def _prepare_render_field(args, record):
    if args.checkpoint:
        model = SemanticFieldModel.load(args.checkpoint)
        cfg = model.config
        if args.mode and args.mode != cfg.mode:
            raise ValueError(
                f"checkpoint was trained in {cfg.mode} mode, cannot render {args.mode}"
            )
        allowed = [i for i in range(len(record.views)) if i != args.view]
        sources = nearest_source_indices(record, args.view, cfg.source_views, allowed)
        ctx = model.prepare_scene(
            [record.views[i] for i in sources],
            record.scene.bounds_lo,
            record.scene.bounds_hi,
            scene=record.scene if cfg.geometry_source == "oracle" else None,
        )
        return PreparedField(model.heads, cfg, ctx), cfg.mode
    mode = args.mode or "sdf"
    source_views = [v for i, v in enumerate(record.views) if i != args.view]
    return oracle_field(source_views, record.scene), mode


def cmd_render(args: argparse.Namespace) -> int:
    record = load_scene_dir(args.scene)
    if not 0 <= args.view < len(record.views):
        raise ValueError(f"view index {args.view} out of range")
    field, mode = _prepare_render_field(args, record)
    rendered = render_view(
        field,
        record.views[args.view].camera,
        mode=mode,
        samples_per_ray=args.samples,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_label_png(out / f"view{args.view:03d}_labels.png", rendered.labels)
    write_rgb_png(out / f"view{args.view:03d}_rgb.png", rendered.rgb)
    tensorio.write_tensor(out / f"view{args.view:03d}_semantic.gnsf", rendered.semantic)
    print(f"rendered view {args.view} ({mode} mode) into {out}")
    return 0


def cmd_eval_2d(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    model = SemanticFieldModel.load(args.checkpoint)
    if args.split == "novel-view":
        targets = novel_view_targets(dataset, model.config)
        policy = "train"
    else:
        targets = novel_scene_targets(dataset, model.config)
        policy = "all"
    report = eval_2d(model, dataset, targets, source_policy=policy)
    payload = {"split": args.split, "model": report.to_dict()}
    if args.baseline:
        base = single_view_baseline(dataset, targets)
        payload["single_view_baseline"] = base.to_dict()
        print("single-view baseline:")
        print(base.table())
    _write_report(payload, report.table(), args.out)
    return 0


def cmd_eval_3d(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    model = SemanticFieldModel.load(args.checkpoint)
    if args.scenes:
        scene_indices = [int(tok) for tok in args.scenes.split(",")]
    else:
        start = model.config.train_scenes
        scene_indices = list(range(start, min(start + 4, len(dataset.records))))
    report = eval_3d(
        model,
        dataset,
        scene_indices,
        grid_resolution=args.grid_resolution,
        geometry_source=args.geometry_source,
    )
    payload = {"scenes": scene_indices, "model": report.to_dict()}
    _write_report(payload, report.table(), args.out)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    config = _config_from_args(args)
    seeds = [int(tok) for tok in args.seeds.split(",")]
    table = run_ablations(
        dataset,
        config,
        seeds,
        out_dir=args.out,
        grid_resolution=args.grid_resolution,
        log_fn=lambda arm, seed, miou: print(f"{arm} seed={seed}: mIoU {miou:.4f}"),
    )
    print(table.table())
    if any(r.diverged for r in table.results):
        return 1
    return 0


def cmd_dump_volume(args: argparse.Namespace) -> int:
    record = load_scene_dir(args.scene)
    model = SemanticFieldModel.load(args.checkpoint)
    cfg = model.config
    ctx = model.prepare_scene(
        record.views,
        record.scene.bounds_lo,
        record.scene.bounds_hi,
        scene=record.scene if cfg.geometry_source == "oracle" else None,
    )
    n = cfg.grid_resolution
    encoding = ctx.encoding_flat.data.reshape(n, n, n, cfg.geo_dim)
    sigma = vertex_sigma_field(model.heads.geometry, ctx.encoding_flat, ctx.coverage)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor(out / "encoding_volume.gnsf", encoding)
    tensorio.write_tensor(out / "sigma_volume.gnsf", sigma.reshape(n, n, n))
    print(f"volume tensors written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semfield",
        description="Generalizable neural semantic fields: data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="generate a labeled synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--noise-rate", dest="noise_rate", type=float, default=0.0)
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--image-size", dest="image_size", type=int, default=64)
    p.add_argument("--classes", type=int, default=6)
    p.set_defaults(fn=cmd_gen_scenes)

    p = sub.add_parser("train", help="train the field on a dataset")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="render one view of a scene directory")
    p.add_argument("--scene", type=str, required=True, help="scene directory")
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--mode", choices=["density", "sdf"], default=None)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--checkpoint", type=str, default=None, help="omit for the oracle pipeline")
    p.add_argument("--samples", type=int, default=64)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval-2d", help="render and score evaluation views")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--split", choices=["novel-view", "novel-scene"], default="novel-scene")
    p.add_argument("--baseline", action="store_true", help="also report the single-view baseline")
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(fn=cmd_eval_2d)

    p = sub.add_parser("eval-3d", help="score voted semantics at near-surface points")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--scenes", type=str, default=None, help="comma-separated indices")
    p.add_argument("--grid-resolution", dest="grid_resolution", type=int, default=32)
    p.add_argument(
        "--geometry-source", dest="geometry_source", choices=["predicted", "oracle"], default=None
    )
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(fn=cmd_eval_3d)

    p = sub.add_parser("ablate", help="run the four voting-design arms")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--seeds", type=str, default="0,1,2")
    p.add_argument("--grid-resolution", dest="grid_resolution", type=int, default=32)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("dump-volume", help="write the encoding volume and sigma grid")
    p.add_argument("--scene", type=str, required=True, help="scene directory")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(fn=cmd_dump_volume)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
