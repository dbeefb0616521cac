"""Flat ``key = value`` run configuration.

Every field of :class:`RunConfig` may appear once; ``#`` starts a comment and
unknown keys are rejected so a typo cannot silently fall back to a default.
Tuples are written comma-separated, booleans as ``true``/``false`` and floats
with ``repr`` so that parse -> serialize -> parse is the identity.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Tuple, Union

from .data import SHAPE_KINDS, SceneSpec
from .model import EPTConfig
from .training import LossWeights, OptimizerState


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # network
    d_model: int = 256
    n_heads: int = 8
    d_head: int = 32
    n_points: int = 16
    n_levels: int = 3
    encoder_layers: int = 2
    decoder_layers: int = 2
    ff_dim: int = 2048
    dropout: float = 0.1
    direction_bins: int = 8
    strides: Tuple[int, ...] = (8, 16, 32)
    num_classes: int = 4
    stem_channels: Tuple[int, ...] = (32, 64)
    backbone_channels: Tuple[int, ...] = (64, 128, 256)
    spatial_channels: Tuple[int, ...] = (64, 128, 256)
    head_channels: int = 256
    # loss weights
    lambda_coarse: float = 1.0
    lambda_refined: float = 1.5
    lambda_boundary: float = 3.0
    lambda_direction: float = 0.7
    # optimizer and schedule
    lr: float = 1e-4
    backbone_lr: float = 1e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 1500
    batch_size: int = 4
    eval_every: int = 100
    checkpoint_every: int = 500
    # data
    dataset: str = ""                 # directory written by gen-data; empty = generate in memory
    train_samples: int = 512
    val_samples: int = 64
    scene_size: int = 64
    scene_min_shapes: int = 2
    scene_max_shapes: int = 5
    scene_kinds: Tuple[str, ...] = SHAPE_KINDS
    scene_noise: float = 0.05
    scene_min_extent: int = 14
    scene_max_extent: int = 32
    scene_seed: int = 0
    augment: bool = True
    gamma: float = 2.0
    refine: bool = True
    refine_threshold: float = 0.5
    # run
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.model_config()
        self.scene_spec()
        self.loss_weights()
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.eval_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("eval_every and checkpoint_every must be >= 1")
        if self.train_samples < 1 or self.val_samples < 0:
            raise ConfigError("need train_samples >= 1 and val_samples >= 0")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def model_config(self) -> EPTConfig:
        names = [f.name for f in fields(EPTConfig)]
        try:
            return EPTConfig(**{n: getattr(self, n) for n in names})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def scene_spec(self) -> SceneSpec:
        try:
            return SceneSpec(size=self.scene_size, min_shapes=self.scene_min_shapes,
                             max_shapes=self.scene_max_shapes, kinds=self.scene_kinds,
                             num_classes=self.num_classes, noise=self.scene_noise,
                             min_extent=self.scene_min_extent, max_extent=self.scene_max_extent,
                             seed=self.scene_seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights(self.lambda_coarse, self.lambda_refined,
                               self.lambda_boundary, self.lambda_direction)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def optimizer(self) -> OptimizerState:
        return OptimizerState(lr=self.lr, backbone_lr=self.backbone_lr, weight_decay=self.weight_decay,
                              beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_HINTS = typing.get_type_hints(RunConfig)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def _parse_value(key: str, text: str):
    kind = _HINTS[key]
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("true", "1", "yes", "on")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        inner = typing.get_args(kind)[0]
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(inner(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key not in _HINTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, value)
    return RunConfig(**values)


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def load_config(path: Union[str, Path]) -> RunConfig:
    return parse_config(Path(path).read_text())


def save_config(path: Union[str, Path], cfg: RunConfig) -> None:
    Path(path).write_text(serialize_config(cfg))
