"""Flat ``key=value`` run configuration shared by every CLI command."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .pipeline import VARIANTS, ModelConfig, TrainConfig
from .synth import SceneConfig

PROFILES = ("full", "fast")
FAST_EPOCHS = 5
FAST_COUNT = 32


@dataclass
class RunConfig:
    # scene
    image_size: int = 64
    n_categories: int = 5
    objects_min: int = 3
    objects_max: int = 5
    size_min: int = 10
    size_max: int = 18
    shift_y: int = 0
    shift_x: int = 0
    jitter: int = 0
    noise_sigma: float = 0.05
    seed: int = 0
    count: int = 128
    # optimisation
    epochs: int = 50
    batch_size: int = 4
    lr_stage1: float = 0.035
    lr_stage2: float = 0.02
    momentum: float = 0.843
    weight_decay: float = 0.00036
    w_det: float = 1.0
    w_sa: float = 1.0
    w_sc: float = 1.0
    # model
    d_vis: int = 32
    d_shared: int = 256
    d_text: int = 768
    gate: str = "max"
    text_scale: float = 8.0
    variant: str = "+ESM"
    # run
    embeddings: str = ""
    holdout: int = 32
    profile: str = "full"

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.gate not in ("max", "mean"):
            raise ConfigError(f"gate must be 'max' or 'mean', got {self.gate!r}")
        if self.epochs < 0 or self.count < 0 or self.holdout < 0:
            raise ConfigError("epochs, count and holdout must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        for name in ("lr_stage1", "lr_stage2", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        self.scene().validate()

    def scene(self) -> SceneConfig:
        names = {f.name for f in fields(SceneConfig)}
        return SceneConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def model(self, variant: str | None = None) -> ModelConfig:
        return ModelConfig.for_variant(variant or self.variant, **self.model_kwargs())

    def model_kwargs(self) -> dict:
        return dict(n_categories=self.n_categories, d_vis=self.d_vis, d_shared=self.d_shared,
                    d_text=self.d_text, gate=self.gate, text_scale=self.text_scale,
                    seed=self.seed)

    def train(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           lr_stage1=self.lr_stage1, lr_stage2=self.lr_stage2,
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           w_det=self.w_det, w_sa=self.w_sa, w_sc=self.w_sc, seed=self.seed)


def keys() -> list[str]:
    return [f.name for f in fields(RunConfig)]


def _types() -> dict[str, type]:
    defaults = RunConfig()
    return {k: type(getattr(defaults, k)) for k in keys()}


def parse_value(key: str, raw: str):
    kind = _types().get(key)
    if kind is None:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> dict:
    """``key=value`` lines; ``#`` starts a comment. Returns only the keys present."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key = key.strip().replace("-", "_")
        try:
            out[key] = parse_value(key, value.strip())
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- config file <- explicit overrides; the fast profile only fills
    epochs/count when neither source set them."""
    merged = {**(file_values or {}), **(overrides or {})}
    for key in merged:
        if key not in _types():
            raise ConfigError(f"unknown config key {key!r}")
    cfg = RunConfig(**merged)
    if cfg.profile == "fast":
        if "epochs" not in merged:
            cfg.epochs = FAST_EPOCHS
        if "count" not in merged:
            cfg.count = FAST_COUNT
    cfg.validate()
    return cfg


def format_value(value) -> str:
    # repr keeps floats round-trippable (0.00036 stays 0.00036)
    return repr(value) if isinstance(value, float) else str(value)


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k}={format_value(getattr(cfg, k))}\n" for k in keys())
