"""Pipeline configuration file: INI sections merged under command-line overrides.

Sections map onto the component configs::

    [clip]     window_length
    [mfcc]     MfccConfig fields
    [network]  NetworkConfig fields (input_dim and vocab_size are set by training)
    [train]    TrainConfig fields
    [decode]   beam_width, greedy
    [paths]    data_dir, manifest, features_dir, checkpoint_dir

Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .features import MfccConfig
from .network import NetworkConfig
from .preprocess import ClipConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DecodeConfig:
    beam_width: int = 50
    greedy: bool = False

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = ""
    manifest: str = ""
    features_dir: str = ""
    checkpoint_dir: str = ""


@dataclass(frozen=True)
class PipelineConfig:
    clip: ClipConfig = field(default_factory=ClipConfig)
    mfcc: MfccConfig = field(default_factory=MfccConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def override(self, section: str, **values) -> "PipelineConfig":
        """Copy with non-None `values` replaced in `section`."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        try:
            updated = replace(getattr(self, section), **values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc
        return replace(self, **{section: updated})


def _convert(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return type(default)(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive field names
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    config = PipelineConfig()
    for section in parser.sections():
        if section not in {f.name for f in fields(PipelineConfig)}:
            raise ConfigError(f"{source}: unknown section [{section}]")
        current = getattr(config, section)
        known = {f.name for f in fields(current)}
        values = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[key] = _convert(raw, getattr(current, key), f"{source} [{section}] {key}")
        config = config.override(section, **values)
    return config


def load_config(path=None) -> PipelineConfig:
    """Defaults when `path` is None, else the parsed file."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
