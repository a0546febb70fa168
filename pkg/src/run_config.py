"""
Resolved run configuration: dataclass defaults, then a JSON file, then flags.

The resolved configuration is written into every output directory as
run_config.json and can be replayed with --config.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Optional, Tuple

from .config import get_output_dir
from .errors import ConfigurationError
from .follower_net import NetConfig
from .trainer import FIELD_MAX_EPOCHS, SIM_MAX_EPOCHS, TrainConfig
from .trajectory import DEFAULT_GAP_THRESHOLD, DEFAULT_HORIZON, DEFAULT_SPLIT_RATIOS

RUN_CONFIG_FILE = 'run_config.json'
DESK_HIDDEN = 32
DESK_WINDOWS = 200
DESK_EPOCHS = 30


@dataclass(frozen=True)
class RunConfig:
    """Every setting a pipeline command reads."""
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    preset: str = 'sim'
    desk: bool = False
    max_windows: Optional[int] = None
    seed: int = 0
    data_seed: int = 0
    n_scenarios: int = 1000
    duration: float = 60.0
    stride: int = DEFAULT_HORIZON
    gap_threshold: float = DEFAULT_GAP_THRESHOLD
    split_ratios: Tuple[float, float, float] = DEFAULT_SPLIT_RATIOS
    noise_level: str = 'middle'
    idm_preset: str = 'sumo'
    mus: Tuple[float, ...] = (1.0, 0.7, 0.5, 0.3, 0.0)
    noise_levels: Tuple[str, ...] = ('small', 'middle')
    idm_presets: Tuple[str, ...] = ('sumo',)
    data_dir: Optional[str] = None
    out_dir: str = field(default_factory=get_output_dir)
    checkpoint: Optional[str] = None
    calibration_budget: int = 600
    noise_report: bool = False
    noise_samples: int = 1_000_000
    run_dir: Optional[str] = None
    hybrid_checkpoint: Optional[str] = None
    window: int = 0

    def __post_init__(self):
        if self.preset not in ('sim', 'field'):
            raise ConfigurationError(f"preset must be 'sim' or 'field', got {self.preset!r}")
        if self.n_scenarios < 1 or self.stride < 1:
            raise ConfigurationError("n_scenarios and stride must be >= 1")
        if self.max_windows is not None and self.max_windows < 1:
            raise ConfigurationError(f"max_windows must be >= 1, got {self.max_windows}")
        if self.noise_samples < 1 or self.window < 0:
            raise ConfigurationError("noise_samples must be >= 1 and window >= 0")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data

    def save(self, directory: str) -> str:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, RUN_CONFIG_FILE)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path


_TOP_LEVEL = {f.name for f in fields(RunConfig)}
_NESTED = {'net': NetConfig, 'train': TrainConfig}


def _unknown_keys(data: Dict[str, Any]) -> list:
    unknown = [key for key in data if key not in _TOP_LEVEL]
    for key, cls in _NESTED.items():
        nested = data.get(key)
        if nested is None:
            continue
        if not isinstance(nested, dict):
            raise ConfigurationError(f"config key {key!r} must be an object")
        names = {f.name for f in fields(cls)}
        unknown.extend(f"{key}.{inner}" for inner in nested if inner not in names)
    return sorted(unknown)


def run_config_from_dict(data: Dict[str, Any], base: Optional[RunConfig] = None) -> RunConfig:
    """
    Overlay a (possibly partial) dict onto a base config.

    Raises:
        ConfigurationError: Listing every unknown key
    """
    unknown = _unknown_keys(data)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    base = base or RunConfig()
    updates: Dict[str, Any] = {}
    for key, value in data.items():
        if key in _NESTED:
            updates[key] = replace(getattr(base, key), **value)
        elif isinstance(value, list):
            updates[key] = tuple(value)
        else:
            updates[key] = value
    try:
        return replace(base, **updates)
    except TypeError as e:
        raise ConfigurationError(f"invalid config value: {e}") from None


def load_run_config(path: str, base: Optional[RunConfig] = None) -> RunConfig:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path} must hold a JSON object")
    return run_config_from_dict(data, base)


def preset_defaults(preset: str) -> RunConfig:
    """Defaults of the sim or field training regime."""
    if preset == 'field':
        return RunConfig(preset='field', train=TrainConfig(max_epochs=FIELD_MAX_EPOCHS),
                         noise_levels=('small', 'middle', 'big'))
    if preset == 'sim':
        return RunConfig(preset='sim', train=TrainConfig(max_epochs=SIM_MAX_EPOCHS))
    raise ConfigurationError(f"preset must be 'sim' or 'field', got {preset!r}")


def apply_desk(config: RunConfig) -> RunConfig:
    """Small, fast settings: h=32, 200 windows, 30 epochs."""
    return replace(
        config,
        desk=True,
        net=replace(config.net, hidden=DESK_HIDDEN),
        train=replace(config.train, max_epochs=DESK_EPOCHS),
        max_windows=DESK_WINDOWS,
    )


def resolve(config_path: Optional[str] = None, preset: Optional[str] = None,
            overrides: Optional[Dict[str, Any]] = None, desk: bool = False) -> RunConfig:
    """
    Flags > config file > preset defaults.

    Args:
        config_path: JSON config file (optional)
        preset: 'sim' or 'field' defaults underneath the file
        overrides: Flag values in config-dict form; None values are ignored
        desk: Apply the desk preset before flag overrides
    """
    config = preset_defaults(preset or 'sim')
    if config_path:
        config = load_run_config(config_path, config)
    if desk:
        config = apply_desk(config)
    if overrides:
        cleaned = {}
        for key, value in overrides.items():
            if value is None:
                continue
            if key in _NESTED:
                value = {k: v for k, v in value.items() if v is not None}
                if not value:
                    continue
            cleaned[key] = value
        config = run_config_from_dict(cleaned, config)
    return config
