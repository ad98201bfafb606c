"""Experiment configuration: one YAML file per experiment.

Two built-in profiles: ``paper`` carries the full published protocol
(224 px input, 16 px patches, 300 pretraining epochs, etc.) and ``quick``
shrinks everything to run on a laptop CPU against phantom data.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from age_kit.attnmap import HeadSelectionConfig
from age_kit.dino import DinoConfig
from age_kit.erase import AugmentationPolicy
from age_kit.errors import ConfigError
from age_kit.vit import ViTConfig

PROBABILITIES = (0.2, 0.4, 0.6, 0.8)
DEFAULT_SWEEP = (("none", 0.0),) + tuple((m, p) for m in ("RE", "AGE") for p in PROBABILITIES)


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 0
    image_size: int = 128
    mlo_fraction: float = 0.5
    train: int = 600
    val: int = 200
    test: int = 200
    min_per_class: int = 5


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "phantom"        # "phantom" or "manifest"
    manifest: str | None = None
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def __post_init__(self):
        if self.source not in ("phantom", "manifest"):
            raise ConfigError(f"dataset.source must be 'phantom' or 'manifest', got {self.source!r}")
        if self.source == "manifest" and not self.manifest:
            raise ConfigError("dataset.manifest is required when dataset.source is 'manifest'")


@dataclass(frozen=True)
class MaskConfig:
    threshold: float = 0.5
    dilation_cells: int = 1
    # Phantom runs only: mean recall of the truth mask that build-masks reports against.
    recall_floor: float = 0.5


@dataclass(frozen=True)
class DownstreamConfig:
    """TrainConfig fields shared by every sweep entry (policy and seed vary)."""

    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 5e-6
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    patience: int = 10
    loss: str = "softmax"
    fill_value: float = 0.0
    re_area: tuple = (0.02, 0.33)
    re_aspect: tuple = (0.3, 3.3)
    standard_augs: tuple = AugmentationPolicy().standard_augs


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "paper"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    vit: ViTConfig = field(default_factory=ViTConfig)
    dino: DinoConfig = field(default_factory=DinoConfig)
    head_selection: HeadSelectionConfig = field(default_factory=HeadSelectionConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)
    sweep: tuple = DEFAULT_SWEEP
    seeds: tuple = (0, 1, 2, 3, 4)
    pretrain_seed: int = 0
    ttest_variant: str = "pooled"
    output_dir: str = "age-output"

    def __post_init__(self):
        keys = [(m, float(p)) for m, p in self.sweep]
        if len(set(keys)) != len(keys):
            raise ConfigError("sweep entries must be unique")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be unique")
        for m, p in keys:
            AugmentationPolicy(mode=m, probability=p)
        if self.dino.global_crop_size != self.vit.image_size:
            raise ConfigError("dino.global_crop_size must equal vit.image_size")

    def policy(self, mode, probability):
        d = self.downstream
        return AugmentationPolicy(mode=mode, probability=float(probability), fill_value=d.fill_value,
                                  re_area=tuple(d.re_area), re_aspect=tuple(d.re_aspect),
                                  standard_augs=d.standard_augs)


def paper_profile():
    return ExperimentConfig()


def quick_profile():
    """Tiny ViT on phantoms; finishes on one CPU core in minutes."""
    vit = ViTConfig(image_size=64, patch_size=8, embed_dim=48, depth=2, num_heads=6)
    return ExperimentConfig(
        name="quick",
        dataset=DatasetConfig(phantom=PhantomConfig(image_size=64)),
        vit=vit,
        dino=DinoConfig(global_crop_size=64, local_crop_size=32, num_local_crops=4,
                        projection_dim=256, head_hidden_dim=128, head_bottleneck_dim=32,
                        epochs=30, batch_size=32, learning_rate=5e-4, warmup_steps=20,
                        # A model this small collapses under the full photometric recipe within a few
                        # hundred steps; geometric crops alone still give a learning signal.
                        flip_p=0.0, jitter_p=0.0, blur_p=(0.0, 0.0, 0.0), solarize_p=(0.0, 0.0, 0.0),
                        ema_momentum_start=0.99, center_init="first_batch"),
        # 50 of 196 cells at 14x14 is ~25%; the same share of an 8x8 grid is 16.
        head_selection=HeadSelectionConfig(count_ceiling=16),
        # A from-scratch tiny backbone needs a far larger step than fine-tuning pretrained weights.
        downstream=DownstreamConfig(learning_rate=3e-4),
        sweep=(("none", 0.0), ("RE", 0.6), ("AGE", 0.6)),
        seeds=(0, 1),
        output_dir="age-output-quick",
    )


PROFILES = {"paper": paper_profile, "quick": quick_profile}


# --- (de)serialisation ----------------------------------------------------------

def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def to_dict(config):
    return _plain(config)


def _tupleize(value):
    if isinstance(value, list):
        return tuple(_tupleize(v) for v in value)
    if isinstance(value, dict):
        return {k: _tupleize(v) for k, v in value.items()}
    return value


def from_dict(cls, data):
    """Build dataclass ``cls`` from plain data, recursing into nested configs."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = from_dict(hint, value)
        else:
            kwargs[key] = _tupleize(value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(config: ExperimentConfig, path=None):
    text = yaml.safe_dump(to_dict(config), sort_keys=False, default_flow_style=None)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def load_config(path=None, profile="paper", overrides=None):
    """Profile defaults, then the YAML file (if any), then dotted overrides."""
    base = to_dict(PROFILES[profile]())
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        base = _merge(base, loaded)
    for dotted, value in (overrides or {}).items():
        node = base
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return from_dict(ExperimentConfig, base)


def _merge(base, update):
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out
