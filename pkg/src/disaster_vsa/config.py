"""Training configuration, its JSON form, and the Run 1 / Run 2 presets."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import jsonschema

from .augment import AugmentConfig
from .balance import BalanceConfig
from .manifest import TaskSpec, builtin_task_spec
from .model import BACKBONES, HEAD_MODES, ModelConfig

CONFIG_VERSION = 1
OPTIMIZERS = ("adam",)
PRESETS = {"run1": "inception_v3", "run2": "vgg19"}


class ConfigError(ValueError):
    pass


def derive_seed(seed: int, stream: str) -> int:
    """Independent 32-bit seed for a named random stream."""
    digest = hashlib.sha256(f"{seed}:{stream}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class TrainConfig:
    task: TaskSpec
    model: ModelConfig
    epochs: int = 50
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 32
    seed: int = 0
    balance: BalanceConfig = field(default_factory=BalanceConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dev_fraction: float = 0.0
    threshold: float = 0.5
    deterministic: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if self.epochs < 1:
            raise ConfigError(f"at least one epoch required, got epochs={self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0 <= self.dev_fraction < 1:
            raise ConfigError(f"dev_fraction must be in [0, 1), got {self.dev_fraction}")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.model.num_outputs != self.task.num_labels:
            raise ConfigError(
                f"model has {self.model.num_outputs} outputs but {self.task.task_id} has {self.task.num_labels} labels"
            )
        expected_head = "sigmoid" if self.task.is_multi_label else "softmax"
        if self.model.head_mode != expected_head:
            raise ConfigError(f"{self.task.task_id} needs head_mode {expected_head!r}")

    def to_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload["task"] = self.task.to_dict()
        payload["adam_betas"] = list(self.adam_betas)
        payload["augment"]["rotation_degrees"] = list(self.augment.rotation_degrees)
        return {"version": CONFIG_VERSION, **payload}

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "TrainConfig":
        try:
            jsonschema.validate(dict(payload), CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"invalid config at {where}: {exc.message}") from None
        data = dict(payload)
        data.pop("version")
        try:
            return cls(
                task=TaskSpec.from_dict(data.pop("task")),
                model=ModelConfig(**data.pop("model")),
                balance=BalanceConfig(**data.pop("balance")),
                augment=AugmentConfig(**data.pop("augment")),
                **data,
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(payload)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def with_seed(self, seed: int) -> "TrainConfig":
        """Re-seed the run and every derived stream."""
        return replace(
            self,
            seed=seed,
            balance=replace(self.balance, seed=derive_seed(seed, "balance")),
            augment=replace(self.augment, seed=derive_seed(seed, "augment")),
        )


def default_config(task: TaskSpec, backbone: str = "inception_v3", seed: int = 0, **model_overrides) -> TrainConfig:
    cfg = TrainConfig(task=task, model=ModelConfig.for_task(task, backbone, **model_overrides))
    return cfg.with_seed(seed)


def make_run_pair(task: TaskSpec, seed: int = 0) -> tuple[TrainConfig, TrainConfig]:
    """Run 1 (Inception-v3) and Run 2 (VGG-19); everything else identical."""
    return default_config(task, PRESETS["run1"], seed), default_config(task, PRESETS["run2"], seed)


def preset_config(preset: str, task_id: str, seed: int = 0, extra_label: str | None = None) -> TrainConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    task = builtin_task_spec(task_id) if extra_label is None else builtin_task_spec(task_id, extra_label)
    return default_config(task, PRESETS[preset], seed)


_NUMBER = {"type": "number"}
_SEED = {"type": "integer"}

CONFIG_SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": [
        "version", "task", "model", "epochs", "learning_rate", "optimizer", "adam_betas", "adam_eps",
        "batch_size", "seed", "balance", "augment", "dev_fraction", "threshold", "deterministic",
    ],
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "task": {
            "type": "object",
            "additionalProperties": False,
            "required": ["task_id", "labels", "mode"],
            "properties": {
                "task_id": {"enum": ["task1", "task2", "task3"]},
                "labels": {"type": "array", "items": {"type": "string", "minLength": 1}, "uniqueItems": True},
                "mode": {"enum": ["single_label", "multi_label"]},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["backbone", "pretrained", "head_mode", "num_outputs", "freeze_backbone", "head_hidden_units"],
            "properties": {
                "backbone": {"enum": sorted(BACKBONES)},
                "pretrained": {"type": "boolean"},
                "head_mode": {"enum": list(HEAD_MODES)},
                "num_outputs": {"type": "integer", "minimum": 1},
                "freeze_backbone": {"type": "boolean"},
                "head_hidden_units": {"type": "integer", "minimum": 0},
            },
        },
        "epochs": {"type": "integer", "minimum": 1},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "optimizer": {"enum": list(OPTIMIZERS)},
        "adam_betas": {"type": "array", "items": _NUMBER, "minItems": 2, "maxItems": 2},
        "adam_eps": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "seed": _SEED,
        "balance": {
            "type": "object",
            "additionalProperties": False,
            "required": ["enabled", "seed", "max_replication_factor", "target"],
            "properties": {
                "enabled": {"type": "boolean"},
                "seed": _SEED,
                "max_replication_factor": {"type": "number", "minimum": 1},
                "target": {"enum": ["match_max", "match_median"]},
            },
        },
        "augment": {
            "type": "object",
            "additionalProperties": False,
            "required": ["enabled", "crop_fraction", "rotation_degrees", "horizontal_flip", "copies_per_record", "seed"],
            "properties": {
                "enabled": {"type": "boolean"},
                "crop_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "rotation_degrees": {"type": "array", "items": {"type": "number", "minimum": -180, "maximum": 180}},
                "horizontal_flip": {"type": "boolean"},
                "copies_per_record": {"type": "integer", "minimum": 0},
                "seed": _SEED,
            },
        },
        "dev_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "deterministic": {"type": "boolean"},
    },
}
