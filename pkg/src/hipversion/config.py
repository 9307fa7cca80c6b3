"""Declarative run configuration: TOML in, resolved TOML back out.

Every run writes its fully resolved configuration (defaults applied) into
the run directory; feeding that file back reproduces the identical run
for a fixed seed.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .errors import ConfigError
from .model import AttentionHeadSpec, BackboneSpec, config_digest_of
from .preprocess import AugmentationPolicy
from .training import TrainRunConfig

ENV_OUTPUT_ROOT = "HIPVERSION_OUTPUT_ROOT"
ENV_DEVICE = "HIPVERSION_DEVICE"


@dataclass
class DatasetConfig:
    metadata: str = ""
    image_root: str = ""
    age_bounds: tuple[float, float] = (0.0, 100.0)
    age_bins: tuple[float, ...] = (45.0, 65.0)
    age_range: tuple[float, float] = (0.0, 120.0)
    angle_range: tuple[float, float] = (-10.0, 50.0)


@dataclass
class ImageConfig:
    side: int = 1024
    channel_mean: tuple[float, float, float] | None = None
    channel_std: tuple[float, float, float] | None = None


@dataclass
class CvConfig:
    seed: int = 0
    stratify_by_gender: bool = True


@dataclass
class PhantomSection:
    population: int = 300
    side: int = 256
    noise_level: float = 0.02
    seed: int = 0
    age_angle_drift: float = 0.09
    gender_ratio: tuple[int, int] = (244, 56)


@dataclass
class OutputConfig:
    root: str = "runs"
    name: str = ""


@dataclass
class TrainingSection:
    epochs: int = 1000
    batch_size: int = 8
    seed: int = 0
    base_lr: float = 1e-3
    lr_factor: float = 0.8
    lr_patience: int = 30
    lr_min_delta: float = 1e-4
    lr_floor: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    cache_images: bool = True
    val_fraction: float = 0.2


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    image: ImageConfig = field(default_factory=ImageConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    head: AttentionHeadSpec = field(default_factory=AttentionHeadSpec)
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    training: TrainingSection = field(default_factory=TrainingSection)
    cv: CvConfig = field(default_factory=CvConfig)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    output: OutputConfig = field(default_factory=OutputConfig)

    def train_run_config(self) -> TrainRunConfig:
        t = self.training
        return TrainRunConfig(
            epochs=t.epochs, batch_size=t.batch_size, seed=t.seed,
            base_lr=t.base_lr, lr_factor=t.lr_factor, lr_patience=t.lr_patience,
            lr_min_delta=t.lr_min_delta, lr_floor=t.lr_floor,
            beta1=t.beta1, beta2=t.beta2, eps=t.eps,
            augmentation=self.augment, cache_images=t.cache_images)

    def digest(self) -> str:
        return config_digest_of(self.to_dict())

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            section = getattr(self, f.name)
            sec_dict = {}
            for sf in fields(section):
                if sf.init:
                    sec_dict[sf.name] = getattr(section, sf.name)
            out[f.name] = sec_dict
        return out


_SECTION_TYPES = {
    "dataset": DatasetConfig,
    "image": ImageConfig,
    "backbone": BackboneSpec,
    "head": AttentionHeadSpec,
    "augment": AugmentationPolicy,
    "training": TrainingSection,
    "cv": CvConfig,
    "phantom": PhantomSection,
    "output": OutputConfig,
}

# Fields where an empty TOML array stands for "unset".
_NULLABLE_LIST_FIELDS = {
    ("image", "channel_mean"), ("image", "channel_std"), ("backbone", "blocks"),
}
_NULLABLE_STR_FIELDS = {("backbone", "pretrained_path")}


def config_from_dict(data: dict) -> RunConfig:
    sections = {}
    unknown = set(data) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    for name, cls in _SECTION_TYPES.items():
        raw = dict(data.get(name, {}))
        allowed = {f.name for f in fields(cls) if f.init}
        bad = set(raw) - allowed
        if bad:
            raise ConfigError(f"unknown key(s) in [{name}]: {sorted(bad)}")
        kwargs = {}
        for key, value in raw.items():
            if (name, key) in _NULLABLE_LIST_FIELDS and value in ([], ()):
                value = None
            if (name, key) in _NULLABLE_STR_FIELDS and value == "":
                value = None
            if isinstance(value, list):
                value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
            kwargs[key] = value
        try:
            sections[name] = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"bad [{name}] section: {exc}") from exc
    return RunConfig(**sections)


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    return config_from_dict(data)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if value is None:
        raise ConfigError("internal: None must be mapped before TOML dump")
    raise ConfigError(f"cannot serialize {type(value).__name__} to TOML")


def dump_toml(config: RunConfig) -> str:
    lines = []
    for section, payload in config.to_dict().items():
        lines.append(f"[{section}]")
        for key, value in payload.items():
            if value is None:
                value = "" if (section, key) in _NULLABLE_STR_FIELDS else []
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def save_resolved(config: RunConfig, run_dir: str | Path) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.resolved.toml"
    path.write_text(dump_toml(config))
    return path


def resolve_run_dir(config: RunConfig, explicit: str | None = None) -> Path:
    if explicit:
        return Path(explicit)
    root = os.environ.get(ENV_OUTPUT_ROOT, config.output.root)
    name = config.output.name or "run"
    return Path(root) / name
