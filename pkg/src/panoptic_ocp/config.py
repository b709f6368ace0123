"""Configuration dataclasses.

Every tunable constant of the pipeline lives here. ``load_config`` reads a
YAML (or JSON) file whose top-level keys mirror the field names of
:class:`Config` and overrides only what it names.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml


@dataclass(frozen=True)
class DilationConfig:
    ratio: float = 0.1
    cap: float = 2.0  # pixels
    # "min" caps the margin at `cap`; "max" makes `cap` a floor.
    mode: str = "min"


@dataclass(frozen=True)
class LossWeights:
    lambda_obj: float = 5.0
    lambda_reg: float = 5.0
    lambda_center: float = 5.0
    lambda_cls: float = 4.0
    lambda_mask: float = 5.0
    lambda_box: float = 5.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")


@dataclass(frozen=True)
class LossConfig:
    # Focal constants and DICE smoothing are conventional choices, not published values.
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    prob_clamp: float = 1e-6
    dice_smooth: float = 1.0


@dataclass(frozen=True)
class TargetConfig:
    sigma2: float = 1.0  # Gaussian variance, in level-grid cells squared
    truncate_sigmas: float = 4.0


@dataclass(frozen=True)
class DecodeConfig:
    nms_window: int = 3
    prob_floor: float = 0.05
    n_thing: int = 250
    n_stuff: int = 50
    theta_frac: float = 0.02  # voting radius as a fraction of the level width
    normalize_content: bool = False


@dataclass(frozen=True)
class MaskConfig:
    threshold: float = 0.5
    upsample: str = "nearest"  # or "bilinear"


@dataclass(frozen=True)
class MatchConfig:
    theta_fp: float = 0.25
    theta_fn: float = 0.80
    stage2_overlap: str = "box"  # or "mask"
    nms_iou: float = 0.7
    n_dn: int = 100
    box_shift: float = 0.4
    box_scale: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.theta_fp < self.theta_fn <= 1.0:
            raise ValueError("need 0 <= theta_fp < theta_fn <= 1")


@dataclass(frozen=True)
class FusionConfig:
    confidence_floor: float = 0.3
    retention: float = 0.5
    stuff_min_area: int = 0
    mask_threshold: float = 0.5


@dataclass(frozen=True)
class MetricConfig:
    size_bins: tuple = (0.0, 32.0, 64.0, 128.0, 256.0, 512.0, math.inf)
    match_iou: float = 0.5


@dataclass(frozen=True)
class AugmentConfig:
    max_retries: int = 50


@dataclass(frozen=True)
class Config:
    dilation: DilationConfig = field(default_factory=DilationConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    loss: LossConfig = field(default_factory=LossConfig)
    targets: TargetConfig = field(default_factory=TargetConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)


def config_from_dict(data: dict | None) -> Config:
    data = data or {}
    sections = {f.name: f for f in dataclasses.fields(Config)}
    unknown = set(data) - set(sections)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        section_type = sections[name].default_factory
        known = {f.name for f in dataclasses.fields(section_type)}
        bad = set(value) - known
        if bad:
            raise ValueError(f"unknown keys in config section {name!r}: {sorted(bad)}")
        if name == "metrics" and "size_bins" in value:
            value = dict(value, size_bins=tuple(float(v) for v in value["size_bins"]))
        kwargs[name] = section_type(**value)
    return Config(**kwargs)


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh))
