"""Experiment configuration: YAML-backed, strict keys, lossless round trip.

A config file has three sections (data, model, train). CLI flags override
file keys; the fully resolved config is snapshotted next to every produced
artifact together with its content hash. Version-controlled presets carry
the full-scale and desk-scale hyper-parameters.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .bptt import TrainSettings
from .model import ConditionSpec, ModelSpec


class ConfigError(ValueError):
    """Raised for unknown keys or malformed config files."""


@dataclass(frozen=True)
class DataConfig:
    train_dir: str = "data/train"
    sigma: float = 1.5
    scale: int = 4


@dataclass(frozen=True)
class ModelConfig:
    scale: int = 4
    image_channels: int = 3
    flow_widths: tuple[int, ...] = (16, 16, 16)
    flow_max: float = 10.0
    sr_width: int = 16
    sr_blocks: int = 3
    global_residual: bool = False
    condition_frame_number: bool = False
    t_max_norm: int = 300

    def to_model_spec(self) -> ModelSpec:
        return ModelSpec(
            scale=self.scale,
            image_channels=self.image_channels,
            flow_widths=tuple(self.flow_widths),
            flow_max=self.flow_max,
            sr_width=self.sr_width,
            sr_blocks=self.sr_blocks,
            global_residual=self.global_residual,
            condition=ConditionSpec(
                enabled=self.condition_frame_number, t_max_norm=self.t_max_norm
            ),
        )


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "ri"
    iterations: int = 500_000
    clip_len: int = 15
    crop_size: int = 64
    batch_size: int = 4
    repeats: int = 2
    lr: float = 1e-4
    lr_schedule: str = "piecewise"
    lr_milestones: tuple[int, ...] = (150_000, 300_000)
    lr_gamma: float = 0.5
    lambda_w: float = 1.0
    init_kind: str = "uniform_noise"
    seed: int = 0
    checkpoint_every: int = 0

    def to_settings(self) -> TrainSettings:
        return TrainSettings(
            strategy=self.strategy,
            iterations=self.iterations,
            clip_len=self.clip_len,
            crop_size=self.crop_size,
            batch_size=self.batch_size,
            repeats=self.repeats,
            lr=self.lr,
            lr_schedule=self.lr_schedule,
            lr_milestones=tuple(self.lr_milestones),
            lr_gamma=self.lr_gamma,
            lambda_w=self.lambda_w,
            init_kind=self.init_kind,
            seed=self.seed,
            checkpoint_every=self.checkpoint_every,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    out_dir: str = "runs/experiment"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"]["flow_widths"] = list(d["model"]["flow_widths"])
        d["train"]["lr_milestones"] = list(d["train"]["lr_milestones"])
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_yaml().encode()).hexdigest()

    def replace(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)

    def with_overrides(self, overrides: dict[str, object]) -> "ExperimentConfig":
        """Apply dotted-key overrides, e.g. {'train.repeats': 64}."""
        merged = self.to_dict()
        for key, value in overrides.items():
            parts = key.split(".")
            node = merged
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config key: {key}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key: {key}")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(merged)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw or {})
        sections = {}
        for name, section_cls in (("data", DataConfig), ("model", ModelConfig),
                                  ("train", TrainConfig)):
            block = raw.pop(name, {}) or {}
            if not isinstance(block, dict):
                raise ConfigError(f"config section {name!r} must be a mapping")
            known = {f.name for f in dataclasses.fields(section_cls)}
            for key in block:
                if key not in known:
                    raise ConfigError(f"unknown config key: {name}.{key}")
            coerced = dict(block)
            for f in dataclasses.fields(section_cls):
                if f.name in coerced and isinstance(coerced[f.name], list):
                    coerced[f.name] = tuple(coerced[f.name])
            try:
                sections[name] = section_cls(**coerced)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid config section {name!r}: {exc}") from exc
        out_dir = raw.pop("out_dir", cls.out_dir)
        for key in raw:
            raise ConfigError(f"unknown config key: {key}")
        return cls(out_dir=out_dir, **sections)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML config: {exc}") from exc
        return cls.from_dict(raw or {})

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_yaml(Path(path).read_text())


def load_preset(name: str) -> ExperimentConfig:
    """Load a named preset shipped with the package (e.g. 'desk-scale')."""
    ref = resources.files("vsrlab").joinpath("presets", f"{name}.cfg")
    if not ref.is_file():
        available = sorted(
            p.name.removesuffix(".cfg")
            for p in resources.files("vsrlab").joinpath("presets").iterdir()
        )
        raise ConfigError(f"unknown preset {name!r}; available: {available}")
    return ExperimentConfig.from_yaml(ref.read_text())


def snapshot_config(cfg: ExperimentConfig, out_dir: str | Path) -> str:
    """Write the resolved config and its hash into an artifact directory;
    returns the hash."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = cfg.config_hash()
    (out_dir / "config.yaml").write_text(cfg.to_yaml())
    (out_dir / "config_hash.txt").write_text(digest + "\n")
    return digest
