"""
Experiment configuration: YAML file -> frozen dataclasses.

The domain modules own their settings types (SplitSpec, GeneratorSettings,
TrainConfig); this module only composes and validates them.
"""
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from errors import ConfigError
from marketdata import ANNUALIZATION, MAX_MISSING, VOL_WINDOW, WINDOW_LEN, GeneratorSettings, SplitSpec
from tcn import TrainConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = "config.yaml"
DATA_SOURCES = ("synthetic", "prices", "volatility")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    path: Optional[str] = None
    max_missing: int = MAX_MISSING
    vol_window: int = VOL_WINDOW
    annualization: float = ANNUALIZATION
    window_len: int = WINDOW_LEN

    def __post_init__(self):
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {DATA_SOURCES}, got {self.source!r}")
        if self.source != "synthetic" and not self.path:
            raise ConfigError(f"data.path is required when data.source is {self.source!r}")
        if self.max_missing < 0:
            raise ConfigError("data.max_missing must be >= 0")
        if self.vol_window < 2:
            raise ConfigError("data.vol_window must be >= 2")
        if not self.annualization > 0:
            raise ConfigError("data.annualization must be positive")
        if self.window_len < 2:
            raise ConfigError("data.window_len must be >= 2")


@dataclass(frozen=True)
class CnnConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    n_hidden: int = 6
    filters: int = 8
    kernel: int = 2

    def __post_init__(self):
        if self.n_hidden < 1 or self.filters < 1 or self.kernel < 1:
            raise ConfigError("cnn.n_hidden, cnn.filters and cnn.kernel must be >= 1")


@dataclass(frozen=True)
class ArimaConfig:
    enabled: bool = True
    max_p: int = 3
    max_q: int = 3
    max_d: int = 2

    def __post_init__(self):
        if not (0 <= self.max_p <= 3 and 0 <= self.max_q <= 3 and 0 <= self.max_d <= 2):
            raise ConfigError("arima orders are bounded by p, q <= 3 and d <= 2")


@dataclass(frozen=True)
class TrackingConfig:
    enabled: bool = False
    experiment: str = "volatility-forecasting"
    tracking_uri: Optional[str] = None


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    generator: GeneratorSettings = field(default_factory=GeneratorSettings)
    split: SplitSpec = field(default_factory=SplitSpec)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    arima: ArimaConfig = field(default_factory=ArimaConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    holdout_count: int = 10
    output_dir: str = "output"
    seed: int = 42
    n_jobs: int = 1
    allow_partial: bool = False

    def __post_init__(self):
        if self.holdout_count < 1 and not self.split.holdout_tickers:
            raise ConfigError("holdout_count must be >= 1")
        if self.n_jobs == 0:
            raise ConfigError("n_jobs must be non-zero (use -1 for all cores)")


def _build(cls, mapping, section):
    """Instantiate a config dataclass from a mapping, rejecting unknown keys."""
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {', '.join(unknown)}")
    try:
        return cls(**mapping)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{section}' settings: {e}") from e


def config_from_dict(raw):
    raw = dict(raw or {})
    data = _build(DataConfig, raw.pop("data", None), "data")
    generator = _build(GeneratorSettings, raw.pop("generator", None), "generator")

    split_raw = dict(raw.pop("split", None) or {})
    if "holdout_tickers" in split_raw:
        split_raw["holdout_tickers"] = frozenset(split_raw["holdout_tickers"] or ())
    split_raw.setdefault("seed", raw.get("seed", ExperimentConfig.seed))
    split = _build(SplitSpec, split_raw, "split")

    cnn_raw = dict(raw.pop("cnn", None) or {})
    train = _build(TrainConfig, cnn_raw.pop("train", None), "cnn.train")
    cnn = _build(CnnConfig, {**cnn_raw, "train": train}, "cnn")

    arima = _build(ArimaConfig, raw.pop("arima", None), "arima")
    tracking = _build(TrackingConfig, raw.pop("tracking", None), "tracking")
    return _build(
        ExperimentConfig,
        {
            **raw,
            "data": data,
            "generator": generator,
            "split": split,
            "cnn": cnn,
            "arima": arima,
            "tracking": tracking,
        },
        "experiment",
    )


def load_config(path=None):
    """Read a YAML config file; a missing default path yields the built-in defaults."""
    if path is None:
        path = DEFAULT_CONFIG_PATH
        if not Path(path).exists():
            logger.info("No %s found, using built-in defaults", path)
            return ExperimentConfig()
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    return config_from_dict(raw)


def override(cfg, seed=None, output_dir=None, allow_partial=None):
    """Apply CLI flag overrides; the master seed also seeds the split."""
    changes = {}
    if seed is not None:
        changes["seed"] = seed
        changes["split"] = dataclasses.replace(cfg.split, seed=seed)
    if output_dir is not None:
        changes["output_dir"] = str(output_dir)
    if allow_partial:
        changes["allow_partial"] = True
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    return value


def config_to_dict(cfg):
    return _plain(cfg)


def config_to_yaml(cfg):
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def config_digest(cfg):
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
