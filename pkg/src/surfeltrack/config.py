"""Run configuration: one nested key-value file drives every stage.

A config file is YAML whose sections mirror the stage config dataclasses
(weights, optimizer, fusion, render, synth, eval, markers). Unknown keys
are rejected rather than ignored so typos fail loudly. Presets bundle
the loss/association toggles of the standard method variants and are
applied before explicit file keys, which therefore win.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .fusion import FusionConfig
from .losses import LossWeights
from .markers import MarkerConfig
from .metrics import EvalConfig
from .optimizer import OptimizerConfig
from .renderer import RenderConfig
from .synthetic import SynthConfig

# Method variants: full semantic pipeline, the same with hard labels,
# and the semantics-free geometric baseline (point-to-plane only).
PRESETS = {
    "semantic-super": {},
    "nosoftlabel": {"weights": {"semantic_mode": "hard"}},
    "super": {"weights": {"semantic_mode": "off", "enable_morph": False,
                          "enable_render": False}},
}

# Single-switch ablations for A/B runs on top of the current preset.
ABLATIONS = {
    "no-morph": {"weights": {"enable_morph": False}},
    "no-render": {"weights": {"enable_render": False}},
    "nosoftlabel": PRESETS["nosoftlabel"],
    "super": PRESETS["super"],
}


@dataclass
class PipelineConfig:
    sequence: str | None = None   # input sequence directory (track)
    out: str = "run"              # output directory
    seed: int = 0
    deterministic: bool = False   # zero recorded timings so reruns diff clean
    preset: str = "semantic-super"
    snapshot_every: int = 10      # PLY cadence in frames; 0 = final only
    save_renders: bool = False
    max_frames: int | None = None
    dist_thresh_m: float = 0.05   # association gates and SSIM window feed
    angle_thresh_deg: float = 45.0  # build_solve_context directly
    ssim_window: int = 11
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    markers: MarkerConfig = field(default_factory=MarkerConfig)


def _apply(obj, overrides: dict, path: str = ""):
    """Set override keys on a (possibly nested) config dataclass.

    Returns a reconstructed instance so dataclass __post_init__
    validation reruns on the merged values.
    """
    names = {f.name for f in fields(obj)}
    for key, value in overrides.items():
        if key not in names:
            raise ValueError(f"unknown config key: {path}{key}")
        current = getattr(obj, key)
        if is_dataclass(current) and isinstance(value, dict):
            value = _apply(current, value, path=f"{path}{key}.")
        elif isinstance(current, tuple) and isinstance(value, (list, tuple)):
            value = tuple(value)
        setattr(obj, key, value)
    return replace(obj)


def apply_preset(cfg: PipelineConfig, name: str) -> PipelineConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset: {name!r} "
                         f"(expected one of {sorted(PRESETS)})")
    cfg = _apply(cfg, copy.deepcopy(PRESETS[name]))
    cfg.preset = name
    return cfg


def apply_ablation(cfg: PipelineConfig, name: str) -> PipelineConfig:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation: {name!r} "
                         f"(expected one of {sorted(ABLATIONS)})")
    return _apply(cfg, copy.deepcopy(ABLATIONS[name]))


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then preset, then file keys, then explicit overrides."""
    data: dict = {}
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config root must be a mapping: {path}")
        data = loaded
    if overrides:
        data = {**data, **overrides}
    cfg = apply_preset(PipelineConfig(), data.pop("preset", "semantic-super"))
    return _apply(cfg, data)


def _plain(value):
    """Recursively turn tuples into lists for YAML/JSON serialization."""
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_dict(cfg: PipelineConfig) -> dict:
    return _plain(asdict(cfg))


def config_hash(cfg: PipelineConfig) -> str:
    """Stable digest of the full effective configuration."""
    blob = json.dumps(config_dict(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_config(cfg: PipelineConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(config_dict(cfg), fh, sort_keys=True)
