"""Flat ``key = value`` experiment configuration.

Lists are comma separated, booleans are ``true``/``false``, ``#`` starts a
comment.  Unknown keys are an error so typos cannot silently fall back to
defaults.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import get_type_hints

from ..featmap import BlockSpec, FeatMapConfig
from ..graph import relations_from_names
from ..infer import RefineParams
from ..potentials import PotentialNetsConfig
from ..train import TrainConfig
from .synthetic import SyntheticSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    # data
    image_size: int = 64
    num_classes: int = 5
    noise_sigma: float = 8.0
    count: int = 250
    # feature trunk
    scales: tuple[float, ...] = (1.2, 0.8, 0.4)
    pool_windows: tuple[int, ...] = (5, 9)
    block_channels: tuple[int, ...] = (8, 16, 16, 16, 16)
    block_strides: tuple[int, ...] = (2, 2, 2, 2, 1)
    block_kernel: int = 1
    scale_block_channels: int = 16
    share_trunk: bool = False
    input_shift: float = -0.5
    input_scale: float = 16.0
    reflect_average: bool = True
    # heads and graph
    unary_hidden: tuple[int, ...] = (32,)
    pairwise_hidden: tuple[int, ...] = (32,)
    relations: tuple[str, ...] = ("surround", "above_below")
    box_ratio: float = 0.4
    # training
    lr: float = 1e-3
    weight_decay: float = 1e-4
    momentum: float = 0.9
    epochs: int = 24
    batch_size: int = 10
    augment: bool = False
    flip: bool = True
    scale_min: float = 0.7
    scale_max: float = 1.2
    clip_norm: float = 100.0  # 0 disables clipping
    # inference
    mf_iterations: int = 3
    refine: bool = True
    potts_weight: float = 3.0
    appearance_weight: float = 10.0
    spatial_sigma: float = 3.0
    color_sigma: float = 20.0
    refine_iterations: int = 5

    # -- derived configs ---------------------------------------------------

    def featmap(self) -> FeatMapConfig:
        if len(self.block_channels) != len(self.block_strides):
            raise ConfigError("block_channels and block_strides must have equal length")
        blocks = tuple(BlockSpec(c, 1, s, self.block_kernel) for c, s in zip(self.block_channels, self.block_strides))
        factor = 1
        for s in self.block_strides:
            factor *= max(s, 1)
        return FeatMapConfig(
            scales=tuple(self.scales),
            shared_blocks=blocks,
            scale_block=BlockSpec(self.scale_block_channels, 1, 0, self.block_kernel),
            pool_windows=tuple(self.pool_windows),
            downsample_factor=factor,
            input_shift=self.input_shift,
            input_scale=self.input_scale,
            reflect_average=self.reflect_average,
        )

    def nets(self) -> PotentialNetsConfig:
        return PotentialNetsConfig(
            num_classes=self.num_classes,
            unary_hidden=tuple(self.unary_hidden),
            pairwise_hidden=tuple(self.pairwise_hidden),
            featmap=self.featmap(),
            relations=tuple(relations_from_names(self.relations, self.box_ratio)),
            share_trunk=self.share_trunk,
        )

    def training(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            momentum=self.momentum,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            augment=self.augment,
            scale_range=(self.scale_min, self.scale_max),
            flip=self.flip,
            clip_norm=self.clip_norm or None,
        )

    def data(self) -> SyntheticSpec:
        return SyntheticSpec(self.image_size, self.num_classes, self.noise_sigma, self.count, self.seed)

    def refinement(self) -> RefineParams | None:
        if not self.refine:
            return None
        return RefineParams(
            self.potts_weight, self.appearance_weight, self.spatial_sigma, self.color_sigma, self.refine_iterations
        )

    # -- serialisation -----------------------------------------------------

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def model_digest(self) -> bytes:
        """SHA-256 over the keys that shape the networks' parameters."""
        keys = MODEL_KEYS
        text = "".join(f"{k}={_format(getattr(self, k))};" for k in keys)
        return hashlib.sha256(text.encode()).digest()


MODEL_KEYS = (
    "num_classes",
    "scales",
    "pool_windows",
    "block_channels",
    "block_strides",
    "block_kernel",
    "scale_block_channels",
    "share_trunk",
    "input_shift",
    "input_scale",
    "reflect_average",
    "unary_hidden",
    "pairwise_hidden",
    "relations",
    "box_ratio",
)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_scalar(raw: str, typ):
    if typ is bool:
        low = raw.lower()
        if low not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return low == "true"
    return typ(raw)


def _parse_value(raw: str, hint):
    origin = getattr(hint, "__origin__", None)
    if origin is tuple:
        item = hint.__args__[0]
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(_parse_scalar(p, item) for p in parts)
    return _parse_scalar(raw.strip(), hint)


def parse_config(text: str, source: str = "<config>", base: ExperimentConfig | None = None) -> ExperimentConfig:
    hints = get_type_hints(ExperimentConfig)
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in hints:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            changes[key] = _parse_value(raw, hints[key])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    cfg = dataclasses.replace(base or ExperimentConfig(), **changes)
    try:
        cfg.nets().validate()
        cfg.training().validate()
        cfg.data().validate()
        refine = cfg.refinement()
        if refine is not None:
            refine.validate()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))
