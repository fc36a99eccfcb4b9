"""Model assembly: learned heads, per-scene state, per-point evaluation.

A prepared ``SceneContext`` bundles everything the field needs for one
scene: source views, encoded feature maps, the aggregated geometry
encoding volume, and (in SDF mode) a vertex-level sigma field for the
occlusion test. ``evaluate_points`` runs the full per-point pipeline on a
tape during training and under ``no_grad`` for inference; the oracle
configuration (ground-truth SDF, uniform votes, noise-free maps) flows
through the same code path with the learned pieces switched off.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .autodiff import Tensor, masked_softmax, no_grad, softmax, weighted_rows  # noqa: F401
from .config import TrainConfig
from .encoder import FeatureEncoder, SourceViews
from .nn import Parameter
from .scenes import OracleView, Scene
from .volume import (
    GeometryAggregator,
    GeometryHead,
    VolumeGrid,
    build_feature_volume,
    interpolate_encoding,
    masked_mean_variance,
    vertex_sigma_field,
    view_projection_tables,
)
from .voting import (
    DirectHead,
    FeatureFuser,
    VotingHead,
    grid_sdf_evaluator,
    visibility_mask,
)


class FieldHeads:
    """All learned components; construction order fixes the init stream."""

    def __init__(self, rng: np.random.Generator, config: TrainConfig):
        d = config.feature_dim
        g = config.geo_dim
        self.encoder = FeatureEncoder(rng, d)
        self.aggregator = GeometryAggregator(
            rng, 2 * d, (config.hg_hidden1, config.hg_hidden2), g
        )
        self.geometry = GeometryHead(
            rng, g, config.geom_hidden, config.mode, config.truncation
        )
        self.fuser = FeatureFuser(rng, d, config.fuse_hidden, config.fuse_dim)
        self.vote: VotingHead | None = None
        self.direct: DirectHead | None = None
        if config.semantic_head == "vote":
            self.vote = VotingHead(
                rng, config.fuse_dim, g, (config.vote_hidden1, config.vote_hidden2)
            )
        else:
            self.direct = DirectHead(
                rng, config.fuse_dim, g, config.num_classes, config.direct_hidden
            )

    def named_parameters(self) -> dict[str, Parameter]:
        groups = {
            "encoder": self.encoder.parameters(),
            "aggregator": self.aggregator.parameters(),
            "geometry": self.geometry.parameters(),
            "fuser": self.fuser.parameters(),
        }
        if self.vote is not None:
            groups["vote"] = self.vote.parameters()
        if self.direct is not None:
            groups["direct"] = self.direct.parameters()
        out: dict[str, Parameter] = {}
        for prefix, params in groups.items():
            for name, p in params.items():
                out[f"{prefix}.{name}"] = p
        return out


@dataclass
class SceneContext:
    views: SourceViews
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    semantics_flat: np.ndarray  # (V*H*W, c)
    rgb_flat: np.ndarray  # (V*H*W, 3)
    features_flat: Tensor | None  # (V*H*W, d)
    grid: VolumeGrid | None
    encoding_flat: Tensor | None  # (num_vertices, g)
    coverage: np.ndarray | None  # (num_vertices,) in {0, 1}
    sigma_vertices: np.ndarray | None
    scene: Scene | None  # oracle geometry / oracle visibility source
    uniform_votes: bool = False


@dataclass
class AppearanceOutputs:
    semantics: Tensor  # (K, c)
    rgb: Tensor  # (K, 3)
    unsupported: np.ndarray  # (K,) no valid view anywhere
    valid: np.ndarray  # (V, K) view validity after masking


@dataclass
class PointOutputs:
    sigma: Tensor  # (K,)
    semantics: Tensor  # (K, c)
    rgb: Tensor  # (K, 3)
    unsupported: np.ndarray  # (K,) no valid view anywhere
    valid: np.ndarray  # (V, K) view validity after masking


class SemanticFieldModel:
    def __init__(self, config: TrainConfig, init_seed: int | None = None):
        self.config = config
        seed = config.seed if init_seed is None else init_seed
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xA11])))
        self.heads = FieldHeads(rng, config)

    # -- persistence ------------------------------------------------------

    def named_parameters(self) -> dict[str, Parameter]:
        return self.heads.named_parameters()

    def trainable_parameters(self) -> dict[str, Parameter]:
        params = self.named_parameters()
        if self.config.freeze_encoder:
            params = {k: v for k, v in params.items() if not k.startswith("encoder.")}
        return params

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tensorio.write_checkpoint(
            path, {name: p.data for name, p in self.named_parameters().items()}
        )
        sidecar = {"config": self.config.to_dict(), "format_version": 1}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))

    @staticmethod
    def load(path: str | Path) -> "SemanticFieldModel":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        config = TrainConfig(**sidecar["config"])
        model = SemanticFieldModel(config)
        stored = tensorio.read_checkpoint(path)
        params = model.named_parameters()
        if set(stored) != set(params):
            raise ValueError("checkpoint parameter names do not match the model")
        for name, p in params.items():
            if stored[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for '{name}'")
            p.value.data = stored[name]
        return model

    # -- scene preparation ---------------------------------------------------

    def prepare_scene(
        self,
        views: list[OracleView],
        bounds_lo: np.ndarray,
        bounds_hi: np.ndarray,
        scene: Scene | None = None,
        on_tape: bool = False,
    ) -> SceneContext:
        """Encode source views and build the geometry encoding volume.

        ``on_tape`` keeps the computation differentiable for training;
        inference runs it under ``no_grad``. ``scene`` is attached only for
        oracle-geometry arms and ground-truth evaluation.
        """
        if on_tape:
            return self._prepare(views, bounds_lo, bounds_hi, scene)
        with no_grad():
            return self._prepare(views, bounds_lo, bounds_hi, scene)

    def _prepare(self, views, bounds_lo, bounds_hi, scene) -> SceneContext:
        cfg = self.config
        bundle = SourceViews.from_oracle_views(views, cfg.semantic_representation)
        v, h, w = bundle.rgb.shape[:3]
        c = bundle.semantics.shape[-1]
        features = self.heads.encoder(bundle.rgb)
        features_flat = features.reshape(v * h * w, cfg.feature_dim)

        grid = VolumeGrid(
            np.asarray(bounds_lo) - cfg.grid_padding * (np.asarray(bounds_hi) - np.asarray(bounds_lo)),
            np.asarray(bounds_hi) + cfg.grid_padding * (np.asarray(bounds_hi) - np.asarray(bounds_lo)),
            (cfg.grid_resolution,) * 3,
        )
        volume, counts = build_feature_volume(features_flat, bundle.cameras, grid)
        encoding = self.heads.aggregator(volume, grid)
        coverage = (counts >= 2).astype(np.float64)

        sigma_vertices = None
        if cfg.mode == "sdf":
            if cfg.geometry_source == "oracle":
                if scene is None:
                    raise ValueError("oracle geometry requires the scene")
                sigma_vertices = scene.sdf(grid.vertex_positions())
            else:
                sigma_vertices = vertex_sigma_field(self.heads.geometry, encoding, coverage)

        return SceneContext(
            views=bundle,
            bounds_lo=np.asarray(bounds_lo, dtype=np.float64),
            bounds_hi=np.asarray(bounds_hi, dtype=np.float64),
            semantics_flat=bundle.semantics.reshape(v * h * w, c),
            rgb_flat=bundle.rgb.reshape(v * h * w, 3),
            features_flat=features_flat,
            grid=grid,
            encoding_flat=encoding,
            coverage=coverage,
            sigma_vertices=sigma_vertices,
            scene=scene,
        )


def oracle_scene_context(
    views: list[OracleView],
    scene: Scene,
    representation: str = "prob",
) -> SceneContext:
    """Pure-oracle field: ground-truth SDF, uniform votes over visible views."""
    bundle = SourceViews.from_oracle_views(views, representation)
    v, h, w = bundle.rgb.shape[:3]
    c = bundle.semantics.shape[-1]
    return SceneContext(
        views=bundle,
        bounds_lo=scene.bounds_lo,
        bounds_hi=scene.bounds_hi,
        semantics_flat=bundle.semantics.reshape(v * h * w, c),
        rgb_flat=bundle.rgb.reshape(v * h * w, 3),
        features_flat=None,
        grid=None,
        encoding_flat=None,
        coverage=None,
        sigma_vertices=None,
        scene=scene,
        uniform_votes=True,
    )


def _interp_encoding(heads, config, ctx, points):
    """Trilinear encoding + view-coverage blend factor at the points."""
    encoding, inside = interpolate_encoding(ctx.encoding_flat, ctx.grid, points)
    tri_rows, tri_weights, _ = ctx.grid.trilinear_coefficients(points)
    coverage = (ctx.coverage[tri_rows] * tri_weights).sum(axis=-1) * inside
    return encoding, coverage


def evaluate_sigma(
    heads: FieldHeads | None,
    config: TrainConfig,
    ctx: SceneContext,
    points: np.ndarray,
) -> Tensor:
    """Geometry only: density or signed distance at the points."""
    points = np.asarray(points, dtype=np.float64)
    if config.geometry_source == "oracle" or ctx.uniform_votes:
        if ctx.scene is None:
            raise ValueError("oracle geometry requires a scene in the context")
        if config.mode != "sdf":
            raise ValueError("oracle geometry is only defined in sdf mode")
        return Tensor(ctx.scene.sdf(points))
    encoding, coverage = _interp_encoding(heads, config, ctx, points)
    return heads.geometry(encoding, coverage)


def evaluate_appearance(
    heads: FieldHeads | None,
    config: TrainConfig,
    ctx: SceneContext,
    points: np.ndarray,
    apply_visibility: bool,
) -> AppearanceOutputs:
    """Voting path: project, sample maps, fuse features, blend semantics/color."""
    points = np.asarray(points, dtype=np.float64)
    k = len(points)
    cameras = ctx.views.cameras
    v = len(cameras)
    rows, weights, valid = view_projection_tables(cameras, points)

    if apply_visibility:
        evaluator, clip_lo, clip_hi = _visibility_evaluator(config, ctx)
        step = config.truncation / 2.0
        vis = visibility_mask(
            evaluator, ctx.views.origins, points, step, clip_lo, clip_hi
        )
        valid = valid & vis
        weights = weights * valid[:, :, None]

    flat_rows = rows.reshape(v * k, 4)
    flat_weights = weights.reshape(v * k, 4)

    # constant per-view samples of semantics and color
    sem_samples = np.einsum(
        "kj,kjc->kc", flat_weights, ctx.semantics_flat[flat_rows]
    ).reshape(v, k, -1)
    if ctx.views.representation == "prob":
        sums = sem_samples.sum(axis=-1, keepdims=True)
        sem_samples = sem_samples / np.where(sums <= 0.0, 1.0, sums)
    rgb_samples = np.einsum(
        "kj,kjc->kc", flat_weights, ctx.rgb_flat[flat_rows]
    ).reshape(v, k, 3)

    encoding = None
    if ctx.encoding_flat is not None:
        encoding, _ = _interp_encoding(heads, config, ctx, points)

    if ctx.uniform_votes:
        scores = Tensor(np.zeros((v, k)))
        fused = None
    else:
        feats = weighted_rows(ctx.features_flat, flat_rows, flat_weights).reshape(
            v, k, config.feature_dim
        )
        mean, var, _ = masked_mean_variance(feats, valid)
        fused = heads.fuser(feats, mean, var)
        if heads.vote is not None:
            disp = points[None, :, :] - ctx.views.origins[:, None, :]
            disp = np.concatenate(
                [disp, np.linalg.norm(disp, axis=-1, keepdims=True)], axis=-1
            )
            scores = heads.vote(fused, encoding, disp)
        else:
            scores = Tensor(np.zeros((v, k)))

    blend = masked_softmax(scores, valid.astype(np.float64), axis=0)
    blend3 = blend.reshape(v, k, 1)
    unsupported = ~valid.any(axis=0)

    if heads is not None and heads.direct is not None and not ctx.uniform_votes:
        counts = np.maximum(valid.sum(axis=0), 1.0)[:, None]
        fused_mean = (fused * valid[:, :, None]).sum(axis=0) * (1.0 / counts)
        semantics = heads.direct(fused_mean, encoding)
    else:
        semantics = (blend3 * sem_samples).sum(axis=0)
        if ctx.views.representation == "logits":
            semantics = softmax(semantics, axis=-1)
        if unsupported.any():
            c = sem_samples.shape[-1]
            keep = (~unsupported).astype(np.float64)[:, None]
            semantics = semantics * keep + unsupported[:, None].astype(np.float64) / c

    rgb = (blend3 * rgb_samples).sum(axis=0)
    return AppearanceOutputs(semantics, rgb, unsupported, valid)


def evaluate_points(
    heads: FieldHeads | None,
    config: TrainConfig,
    ctx: SceneContext,
    points: np.ndarray,
    apply_visibility: bool,
) -> PointOutputs:
    """Full per-point pipeline (geometry plus appearance at every point)."""
    sigma = evaluate_sigma(heads, config, ctx, points)
    app = evaluate_appearance(heads, config, ctx, points, apply_visibility)
    return PointOutputs(sigma, app.semantics, app.rgb, app.unsupported, app.valid)


def _visibility_evaluator(config: TrainConfig, ctx: SceneContext):
    """SDF callable plus the box outside which it is known nonnegative.

    The clip box is safe for the scene family here: bounded primitives live
    inside the bounds, and a half-space restricted to a straight segment is
    a linear function, so once negative it stays negative and can never
    produce a negative-to-positive flip outside the box.
    """
    if config.geometry_source == "oracle" or ctx.uniform_votes:
        return ctx.scene.sdf, ctx.bounds_lo, ctx.bounds_hi
    if ctx.sigma_vertices is None:
        raise ValueError("visibility requires a prepared sigma field in sdf mode")
    evaluator = grid_sdf_evaluator(ctx.sigma_vertices, ctx.grid, config.truncation)
    return evaluator, ctx.grid.lo, ctx.grid.hi


class PreparedField:
    """Inference adapter feeding ``renderer.render_view`` from a context."""

    def __init__(
        self,
        heads: FieldHeads | None,
        config: TrainConfig,
        ctx: SceneContext,
        apply_visibility: bool | None = None,
    ):
        self.heads = heads
        self.config = config
        self.ctx = ctx
        if apply_visibility is None:
            apply_visibility = config.mode == "sdf" and config.visibility == "on"
        self.apply_visibility = apply_visibility

    @property
    def bounds_lo(self) -> np.ndarray:
        return self.ctx.bounds_lo

    @property
    def bounds_hi(self) -> np.ndarray:
        return self.ctx.bounds_hi

    @property
    def truncation(self) -> float:
        return self.config.truncation

    @property
    def num_classes(self) -> int:
        return self.ctx.semantics_flat.shape[-1]

    def query_sigma(self, points: np.ndarray) -> np.ndarray:
        with no_grad():
            return evaluate_sigma(self.heads, self.config, self.ctx, points).data

    def query_appearance(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        with no_grad():
            out = evaluate_appearance(
                self.heads, self.config, self.ctx, points, self.apply_visibility
            )
        return out.semantics.data, out.rgb.data

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        with no_grad():
            out = evaluate_points(
                self.heads, self.config, self.ctx, points, self.apply_visibility
            )
        return out.sigma.data, out.semantics.data, out.rgb.data


def oracle_field(
    views: list[OracleView], scene: Scene, visibility_on: bool = True
) -> PreparedField:
    """Ground-truth geometry + uniform voting over noise-free source maps."""
    ctx = oracle_scene_context(views, scene)
    config = TrainConfig(
        mode="sdf",
        geometry_source="oracle",
        visibility="on" if visibility_on else "off",
        num_classes=scene.num_classes,
    )
    return PreparedField(None, config, ctx, apply_visibility=visibility_on)
