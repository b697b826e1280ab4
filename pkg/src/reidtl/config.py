"""Experiment configuration: sectioned dataclasses addressed by flat dotted keys.

A config file (YAML or JSON) may use flat keys (``train.initial_lr: 0.01``) or
nested mappings; both flatten to the same keys. Unknown keys are rejected
with the key named. Command-line ``--set key=value`` overrides are applied
after the file.

Randomness: every module seed defaults to ``seed + SEED_OFFSETS[module]``
unless set explicitly.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from reidtl.data import SyntheticSpec
from reidtl.model import LossConfig
from reidtl.train import AugmentBounds, TrainConfig

SEED_OFFSETS = {"synth": 0, "batch": 1, "train": 2, "eval": 3, "adapt": 4}


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    manifests: list[str] = field(default_factory=list)  # staged transfer order, last is the target
    split: str = "train"  # manifest split used for training; "" keeps every row
    validation: str = "hyperparameters"  # what a "val" split is used for: hyperparameters | ignore


@dataclass
class SynthSection:
    num_identities: int = 20
    images_per_identity_per_camera: int = 2
    num_cameras: int = 2
    image_size: list[int] = field(default_factory=lambda: [16, 8, 3])
    cross_view_noise: float = 0.0
    camera_shift: float = 1.0
    id_offset: int = 0
    name: str = "synth"
    num_test_identities: int = 0
    num_val_identities: int = 0
    image_format: str = "png"
    seed: int | None = None


@dataclass
class BatchSection:
    k: int = 8
    m: int = 4
    seed: int | None = None


@dataclass
class TrainSection:
    initial_lr: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_interval: int = 1500
    step1_iters: int = 200
    step2_iters: int = 2000
    momentum: float = 0.9
    weight_decay: float = 0.0
    head_init_scale: float = 0.01
    two_stepped: bool = True
    seed: int | None = None


@dataclass
class BoundsSection:
    max_translation: float = 0.05
    min_scale: float = 0.95
    max_scale: float = 1.05
    max_rotation_deg: float = 5.0


@dataclass
class AugmentSection:
    count: int = 5
    bounds: BoundsSection = field(default_factory=BoundsSection)


@dataclass
class ModelSection:
    backbone: str = "toy"
    out_dim: int = 32
    keep_prob: float = 0.5
    verif_hidden: int = 1024
    pretrained: bool = False


@dataclass
class LossSection:
    verification_weight: float = 3.0
    classification_weight: float = 1.0
    num_aux_heads: int = 0


@dataclass
class EvalSection:
    protocol: str = "single_shot"
    split: str = "test"
    plot: bool = False
    batch_size: int = 512
    seed: int | None = None


@dataclass
class AdaptSection:
    method: str = "co_train"  # co_train | self_train
    rounds: int = 3
    lambda_: float = field(default=1.0, metadata={"key": "lambda"})
    lambda_candidates: list[float] = field(default_factory=list)
    k_atoms: int | None = None
    knn_k: int = 3
    anchor_camera: int | None = None
    solver_iters: int = 100
    seed: int | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/experiment"
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    batch: BatchSection = field(default_factory=BatchSection)
    train: TrainSection = field(default_factory=TrainSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    eval: EvalSection = field(default_factory=EvalSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)

    def module_seed(self, module: str) -> int:
        explicit = getattr(getattr(self, module), "seed", None)
        return explicit if explicit is not None else self.seed + SEED_OFFSETS[module]

    # builders for the library-level configs
    def synthetic_spec(self) -> SyntheticSpec:
        s = self.synth
        return SyntheticSpec(num_identities=s.num_identities,
                             images_per_identity_per_camera=s.images_per_identity_per_camera,
                             num_cameras=s.num_cameras, image_size=tuple(s.image_size),
                             cross_view_noise=s.cross_view_noise, seed=self.module_seed("synth"), name=s.name,
                             id_offset=s.id_offset, camera_shift=s.camera_shift)

    def train_config(self) -> TrainConfig:
        t, b = self.train, self.augment.bounds
        return TrainConfig(initial_lr=t.initial_lr, lr_decay_factor=t.lr_decay_factor,
                           lr_decay_interval=t.lr_decay_interval, step1_iters=t.step1_iters,
                           step2_iters=t.step2_iters, augmentations_per_image=self.augment.count,
                           seed=self.module_seed("train"), momentum=t.momentum, weight_decay=t.weight_decay,
                           batch_k=self.batch.k, batch_m=self.batch.m, head_init_scale=t.head_init_scale,
                           batch_seed=self.module_seed("batch"),
                           bounds=AugmentBounds(b.max_translation, b.min_scale, b.max_scale, b.max_rotation_deg))

    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss.verification_weight, self.loss.classification_weight, self.loss.num_aux_heads)

    def validate(self) -> ExperimentConfig:
        """Build every derived config once so bad values fail early, naming their section."""
        builders = (("synth", self.synthetic_spec), ("train", self.train_config), ("loss", self.loss_config))
        for section, build in builders:
            try:
                build()
            except ConfigError:
                raise
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"[{section}] {exc}") from exc
        if self.data.validation not in ("hyperparameters", "ignore"):
            raise ConfigError(f"data.validation must be 'hyperparameters' or 'ignore', got {self.data.validation!r}")
        if self.adapt.method not in ("co_train", "self_train"):
            raise ConfigError(f"adapt.method must be 'co_train' or 'self_train', got {self.adapt.method!r}")
        if len(self.synth.image_size) != 3:
            raise ConfigError(f"synth.image_size must be [H, W, C], got {self.synth.image_size}")
        return self

    def to_flat(self) -> dict:
        return _flatten_obj(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_flat(), sort_keys=True)


def _key(f: dataclasses.Field) -> str:
    return f.metadata.get("key", f.name)


def _flatten_obj(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + _key(f)
        if dataclasses.is_dataclass(value):
            out.update(_flatten_obj(value, key + "."))
        else:
            out[key] = list(value) if isinstance(value, (list, tuple)) else value
    return out


def flatten_mapping(mapping: dict, prefix: str = "") -> dict:
    """Nested mappings to flat dotted keys; already-flat keys pass through."""
    out = {}
    for k, v in mapping.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten_mapping(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(key, value, inner[0])
    if origin is list:
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return [_coerce(key, v, args[0]) for v in value]
    if hint is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported type {hint}")


def _set(obj, parts: list[str], full_key: str, value) -> None:
    fields = {_key(f): f for f in dataclasses.fields(obj)}
    head = parts[0]
    if head not in fields:
        raise ConfigError(f"unknown config key {full_key!r}")
    f = fields[head]
    hint = typing.get_type_hints(type(obj))[f.name]
    current = getattr(obj, f.name)
    if dataclasses.is_dataclass(current):
        if len(parts) == 1:
            raise ConfigError(f"config key {full_key!r} names a section, not a value")
        _set(current, parts[1:], full_key, value)
        return
    if len(parts) > 1:
        raise ConfigError(f"unknown config key {full_key!r}")
    setattr(obj, f.name, _coerce(full_key, value, hint))


def apply_overrides(cfg: ExperimentConfig, values: dict) -> ExperimentConfig:
    for key, value in flatten_mapping(values).items():
        _set(cfg, key.split("."), key, value)
    return cfg


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with the value parsed as YAML (so numbers, booleans and lists work)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw) if raw.strip() else ""


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"{path}: config file not found")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: cannot parse config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        try:
            apply_overrides(cfg, data)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    apply_overrides(cfg, dict(parse_override(o) for o in overrides))
    return cfg.validate()
