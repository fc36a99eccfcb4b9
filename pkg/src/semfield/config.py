"""Flat training/evaluation configuration, file parsing, CLI overrides.

Config files are plain ``key = value`` lines (``#`` comments allowed);
every field of ``TrainConfig`` is addressable by name, and command-line
flags override file values.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


@dataclass
class TrainConfig:
    # data / split
    num_classes: int = 6
    train_scenes: int = 16
    holdout_views: int = 2
    # model dimensions
    feature_dim: int = 16
    geo_dim: int = 16
    fuse_dim: int = 16
    fuse_hidden: int = 32
    hg_hidden1: int = 8
    hg_hidden2: int = 16
    geom_hidden: int = 32
    vote_hidden1: int = 32
    vote_hidden2: int = 16
    direct_hidden: int = 32
    grid_resolution: int = 32
    grid_padding: float = 0.05
    truncation: float = 0.15
    # task / ablation flags
    mode: str = "density"  # density | sdf
    semantic_head: str = "vote"  # vote | direct
    semantic_representation: str = "prob"  # prob | logits
    visibility: str = "off"  # on | off
    geometry_source: str = "predicted"  # predicted | oracle
    # optimization
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    iterations: int = 2000
    samples_per_ray: int = 64
    source_views: int = 8
    lambda_sem: float = 1.0
    lambda_rgb: float = 1.0
    seed: int = 0
    stratified: bool = True
    freeze_encoder: bool = False
    visibility_warmup: int = -1  # -1 means iterations // 4
    checkpoint_every: int = 500

    def __post_init__(self) -> None:
        if self.mode not in ("density", "sdf"):
            raise ValueError(f"mode must be density or sdf, got '{self.mode}'")
        if self.semantic_head not in ("vote", "direct"):
            raise ValueError("semantic_head must be vote or direct")
        if self.semantic_representation not in ("prob", "logits"):
            raise ValueError("semantic_representation must be prob or logits")
        if self.visibility not in ("on", "off"):
            raise ValueError("visibility must be on or off")
        if self.geometry_source not in ("predicted", "oracle"):
            raise ValueError("geometry_source must be predicted or oracle")
        for name in ("learning_rate", "truncation", "lambda_sem", "lambda_rgb"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.learning_rate == 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.iterations < 1 or self.samples_per_ray < 2:
            raise ValueError("batch_size/iterations/samples_per_ray out of range")
        if self.source_views < 2:
            raise ValueError("need at least two source views")

    @property
    def warmup_iterations(self) -> int:
        if self.visibility_warmup >= 0:
            return self.visibility_warmup
        return self.iterations // 4

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    text = raw.strip()
    if kind == "bool" or kind is bool:
        lowered = text.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean '{text}' for {name}")
    if kind == "int" or kind is int:
        return int(text)
    if kind == "float" or kind is float:
        return float(text)
    return text


def parse_config_file(path: str | Path) -> dict:
    """Read ``key = value`` lines into typed overrides for TrainConfig."""
    overrides: dict = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"{path}:{line_no}: expected 'key = value'")
        key, value = (part.strip() for part in body.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ValueError(f"{path}:{line_no}: unknown config key '{key}'")
        overrides[key] = _coerce(key, value)
    return overrides


def load_config(path: str | Path | None, cli_overrides: dict | None = None) -> TrainConfig:
    """Defaults, then file values, then CLI overrides (last one wins)."""
    values: dict = {}
    if path is not None:
        values.update(parse_config_file(path))
    if cli_overrides:
        values.update({k: v for k, v in cli_overrides.items() if v is not None})
    return TrainConfig(**values)
