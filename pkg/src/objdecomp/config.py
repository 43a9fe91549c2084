"""Declarative run configuration (YAML) with strict key checking.

Top-level sections: ``version``, ``scene`` (SceneSpec), ``train`` (TrainConfig,
with nested ``weights``, ``fg_reg``, ``sampling`` and ``fields``), ``maskgen``
and ``eval``. Omitted keys take the dataclass defaults; unknown keys are errors.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .fields import FieldConfig
from .rendering import SamplingConfig
from .scenes import SceneSpec
from .trainer import TrainConfig

SCHEMA_VERSION = 1


class ConfigFileError(ValueError):
    pass


@dataclass(frozen=True)
class MaskgenConfig:
    k: int = 16
    seed: int = 0
    vote_threshold: float = 0.5
    seg_noise: float = 0.0
    cls_noise: float = 0.0
    noise_seed: int = 0
    erase_fg: float = 0.0


@dataclass(frozen=True)
class EvalConfig:
    mesh_n: int = 128
    threshold: float = 0.5
    n_points: int = 20000
    two_class: bool = False


@dataclass(frozen=True)
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    maskgen: MaskgenConfig = field(default_factory=MaskgenConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "scene": self.scene.to_dict(),
            "train": self.train.to_dict(),
            "maskgen": asdict(self.maskgen),
            "eval": asdict(self.eval),
        }


# Desk preset: the configuration the acceptance suite trains with on one CPU core.
DESK_TRAIN = replace(
    TrainConfig(),
    rays=64,
    fields=FieldConfig(sdf_width=32, color_width=32, bg_width=32, feature_dim=8),
    sampling=SamplingConfig(n_uniform=16, n_importance=8, importance_iters=2, n_outside=8),
)

PRESETS = {"paper": TrainConfig(), "desk": DESK_TRAIN}


def _strict(cls, section: str, data) -> object:
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigFileError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigFileError(f"unknown key {section}.{unknown[0]}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as err:
        raise ConfigFileError(f"invalid {section} section: {err}") from err


def config_from_dict(data: dict, preset: str | None = None) -> RunConfig:
    data = dict(data or {})
    version = data.pop("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigFileError(f"unsupported config schema version {version}")
    unknown = sorted(set(data) - {"scene", "train", "maskgen", "eval"})
    if unknown:
        raise ConfigFileError(f"unknown key {unknown[0]}")
    try:
        scene = SceneSpec.from_dict(data.get("scene") or {})
    except (TypeError, ValueError) as err:
        raise ConfigFileError(f"scene: {err}") from err
    base = PRESETS[preset] if preset else TrainConfig()
    train_data = base.to_dict()
    for k, v in (data.get("train") or {}).items():
        if isinstance(v, dict) and isinstance(train_data.get(k), dict):
            bad = sorted(set(v) - set(train_data[k]))
            if bad:
                raise ConfigFileError(f"unknown key train.{k}.{bad[0]}")
            train_data[k] = {**train_data[k], **v}
        elif k not in train_data:
            raise ConfigFileError(f"unknown key train.{k}")
        else:
            train_data[k] = v
    try:
        train = TrainConfig.from_dict(train_data)
    except (TypeError, ValueError) as err:
        raise ConfigFileError(f"train: {err}") from err
    return RunConfig(scene, train, _strict(MaskgenConfig, "maskgen", data.get("maskgen")),
                     _strict(EvalConfig, "eval", data.get("eval")))


def load_config(path: str | Path | None, preset: str | None = None) -> RunConfig:
    if path is None:
        return config_from_dict({}, preset)
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as err:
        raise ConfigFileError(f"{path}: {err}") from err
    if data is not None and not isinstance(data, dict):
        raise ConfigFileError(f"{path}: top level must be a mapping")
    return config_from_dict(data or {}, preset)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
