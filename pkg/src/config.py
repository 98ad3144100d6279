"""
Configuration module for the space-time enhancer.

Process-level settings (output directory, log level, default seed) come from
environment variables with sensible defaults. Model and training settings are
a flat table of dotted keys with documented defaults, loaded from presets, a
JSON file and ``key=value`` overrides.
"""

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class Config:
    """Process configuration with environment variable support."""

    def __init__(self):
        self.project_root = Path(__file__).parent.parent

    @property
    def output_dir(self) -> Path:
        """Default output directory for every subcommand."""
        output_dir_str = os.getenv('OUTPUT_DIR', 'output')
        path = Path(output_dir_str)
        return path if path.is_absolute() else Path.cwd() / path

    @property
    def logs_dir(self) -> Path:
        """Get logs directory path."""
        return self.output_dir / 'logs'

    @property
    def log_level(self) -> str:
        """Get logging level."""
        return os.getenv('LOG_LEVEL', 'INFO').upper()

    @property
    def seed(self) -> int:
        """Default seed when --seed is not given."""
        try:
            return int(os.getenv('SEED', '1234'))
        except ValueError:
            return 1234

    @property
    def templates_dir(self) -> Path:
        return self.project_root / 'templates'

    def ensure_directories(self) -> None:
        """Create necessary directories if they don't exist."""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.logs_dir.mkdir(parents=True, exist_ok=True)

    def validate(self) -> List[str]:
        """Validate configuration and return list of issues."""
        issues = []
        if self.log_level not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            issues.append(f"Invalid LOG_LEVEL: {self.log_level}")
        return issues


@dataclass(frozen=True)
class ConfigKey:
    """One documented settings key."""
    default: Any
    kind: type
    help: str
    choices: Optional[tuple] = None


CONFIG_KEYS: Dict[str, ConfigKey] = {
    'model.channels': ConfigKey(64, int, "encoder and synthesis channel width C"),
    'model.num_segments': ConfigKey(7, int, "number of event segments M"),
    'model.frame_blocks': ConfigKey(5, int, "residual blocks in the frame encoder"),
    'model.event_blocks': ConfigKey(5, int, "residual blocks in the event encoder"),
    'ema.direction': ConfigKey('fwd_bwd', str, "alignment directions", ('fwd', 'fwd_bwd')),
    'ema.levels': ConfigKey(3, int, "alignment pyramid levels (1..3, 'multi' = 3)"),
    'ema.offset_groups': ConfigKey(9, int, "per-position offset groups"),
    'brc.enabled': ConfigKey(True, bool, "recurrent compensation on/off"),
    'brc.attention.enabled': ConfigKey(True, bool, "channel attention gates in the recurrence"),
    'brc.direction': ConfigKey('bidirectional', str, "recurrence directions",
                               ('fwd', 'bwd', 'bidirectional')),
    'brc.residual': ConfigKey(True, bool, "add the compensation input to its output"),
    'livt.local_grid': ConfigKey([3, 3, 3], list, "local grid [T_G, H_G, W_G]"),
    'livt.channels': ConfigKey(64, int, "implicit representation channel width"),
    'livt.pos_encoding': ConfigKey('cosine', str, "positional encoding", ('cosine', 'learnable')),
    'livt.pos_frequencies': ConfigKey(10, int, "positional encoding frequency count L"),
    'livt.attention': ConfigKey('cross_scale', str, "attention variant",
                                ('cross_scale', 'neighborhood')),
    'livt.mlp_hidden': ConfigKey([256, 256, 256, 256], list, "decoder hidden widths"),
    'livt.cell_decode': ConfigKey(True, bool, "feed the decoding cell to the decoder"),
    'livt.prev_query': ConfigKey(True, bool, "feed the sampled query to the decoder"),
    'livt.query_chunk': ConfigKey(0, int, "queries per decoder chunk (0 = all at once)"),
    'events.threshold': ConfigKey(0.15, float, "simulator contrast threshold"),
    'events.log_eps': ConfigKey(1e-3, float, "log-intensity guard"),
    'data.t': ConfigKey(8, int, "temporal scale of training clips"),
    'data.crop': ConfigKey(32, int, "LR crop size"),
    'data.augment': ConfigKey(True, bool, "random crop, rotation and flip"),
    'data.stage2_scales': ConfigKey([1, 1.5, 2, 2.5, 3, 3.5, 4], list, "allowed stage-2 spatial scales"),
    'data.batch_size': ConfigKey(2, int, "clips per optimization step"),
    'data.workers': ConfigKey(0, int, "sample prefetch threads (0 = inline)"),
    'train.stage1_iters': ConfigKey(2000, int, "stage-1 iterations"),
    'train.stage2_iters': ConfigKey(1000, int, "stage-2 iterations"),
    'train.stage1_scale': ConfigKey(4.0, float, "fixed spatial scale of stage 1"),
    'train.lr_max': ConfigKey(1e-4, float, "initial learning rate"),
    'train.lr_min': ConfigKey(1e-7, float, "final learning rate"),
    'train.beta1': ConfigKey(0.9, float, "Adam beta1"),
    'train.beta2': ConfigKey(0.999, float, "Adam beta2"),
    'train.charbonnier_eps2': ConfigKey(1e-6, float, "Charbonnier epsilon squared"),
    'train.val_every': ConfigKey(200, int, "validation period in steps"),
    'train.log_every': ConfigKey(10, int, "log period in steps"),
    'train.seed': ConfigKey(1234, int, "training seed"),
}

PRESETS: Dict[str, Dict[str, Any]] = {
    'full': {},
    'light': {'model.num_segments': 5, 'livt.channels': 16},
    'toy': {
        'model.channels': 8,
        'model.num_segments': 3,
        'model.frame_blocks': 2,
        'model.event_blocks': 2,
        'livt.channels': 8,
    },
}


def _coerce(key: str, value: Any) -> Any:
    spec = CONFIG_KEYS[key]
    if key == 'ema.levels' and value == 'multi':
        return 3
    if spec.kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ('true', 'false', '1', '0', 'yes', 'no'):
            return value.lower() in ('true', '1', 'yes')
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if spec.kind is int:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        try:
            number = float(value)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
        if number != int(number):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(number)
    if spec.kind is float:
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if spec.kind is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    value = str(value)
    if spec.choices and value not in spec.choices:
        raise ConfigError(f"{key}: expected one of {', '.join(spec.choices)}, got {value!r}")
    return value


def _flatten(tree: Dict[str, Any], prefix: str = '') -> Dict[str, Any]:
    flat = {}
    for name, value in tree.items():
        key = f"{prefix}{name}"
        if key in CONFIG_KEYS or key == 'preset':
            flat[key] = value
        elif isinstance(value, dict):
            flat.update(_flatten(value, prefix=f"{key}."))
        else:
            flat[key] = value
    return flat


def parse_override(text: str) -> tuple:
    """Split ``key=value``; the value is parsed as JSON when possible."""
    if '=' not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split('=', 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


class Settings:
    """Flat, typed table of model and training settings."""

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self.values: Dict[str, Any] = {key: spec.default for key, spec in CONFIG_KEYS.items()}
        if values:
            self.update(values)

    def update(self, values: Dict[str, Any]) -> None:
        flat = _flatten(values)
        preset = flat.pop('preset', None)
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"preset: expected one of {', '.join(PRESETS)}, got {preset!r}")
            for key, value in PRESETS[preset].items():
                self.values[key] = _coerce(key, value)
        for key, value in flat.items():
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key: {key}")
            self.values[key] = _coerce(key, value)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.values)

    @classmethod
    def load(cls, path: Optional[Path] = None, overrides: Iterable[str] = (),
             preset: Optional[str] = None, base: Optional[Dict[str, Any]] = None) -> 'Settings':
        """
        Build settings from defaults, a preset, a JSON file and overrides.

        Args:
            path: Optional JSON config file (nested or flat keys)
            overrides: ``key=value`` strings, applied last
            preset: Optional preset name applied before the file
            base: Optional table (e.g. from a checkpoint) to start from instead of the defaults

        Returns:
            Settings instance
        """
        settings = cls(base)
        if preset:
            settings.update({'preset': preset})
        if path is not None:
            path = Path(path)
            try:
                with open(path, 'r', encoding='utf-8') as f:
                    data = json.load(f)
            except FileNotFoundError:
                raise FileNotFoundError(f"config file not found: {path}") from None
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
            if not isinstance(data, dict):
                raise ConfigError(f"config file {path} must hold a JSON object")
            settings.update(data)
        parsed = dict(parse_override(item) for item in overrides)
        if 'preset' in parsed:
            settings.update({'preset': parsed.pop('preset')})
        settings.update(parsed)
        return settings

    def validate(self) -> List[str]:
        """Validate settings and return list of issues."""
        issues = []
        v = self.values

        for key in ('model.channels', 'model.num_segments', 'livt.channels', 'livt.pos_frequencies',
                    'data.t', 'data.crop', 'data.batch_size', 'train.stage1_iters',
                    'train.stage2_iters', 'ema.offset_groups'):
            if v[key] < 1:
                issues.append(f"{key} must be >= 1")
        if v['model.frame_blocks'] < 0 or v['model.event_blocks'] < 0:
            issues.append("residual block counts must be non-negative")
        if not 1 <= v['ema.levels'] <= 3:
            issues.append("ema.levels must be between 1 and 3")

        grid = v['livt.local_grid']
        if len(grid) != 3 or not all(isinstance(g, int) and g >= 1 for g in grid):
            issues.append("livt.local_grid must be three positive integers")
        else:
            t_g, h_g, w_g = grid
            if t_g > v['model.num_segments'] + 2:
                issues.append("livt.local_grid T_G must be <= model.num_segments + 2")
            if h_g % 2 == 0 or w_g % 2 == 0:
                issues.append("livt.local_grid H_G and W_G must be odd")

        if not v['livt.mlp_hidden'] or not all(isinstance(h, int) and h > 0 for h in v['livt.mlp_hidden']):
            issues.append("livt.mlp_hidden must be a list of positive integers")
        if v['livt.query_chunk'] < 0:
            issues.append("livt.query_chunk must be non-negative")
        if v['events.threshold'] <= 0:
            issues.append("events.threshold must be positive")
        if v['events.log_eps'] <= 0:
            issues.append("events.log_eps must be positive")
        if not v['data.stage2_scales'] or any(float(s) < 1 for s in v['data.stage2_scales']):
            issues.append("data.stage2_scales must be a non-empty list of scales >= 1")
        if v['train.stage1_scale'] < 1:
            issues.append("train.stage1_scale must be >= 1")
        if not v['train.lr_min'] < v['train.lr_max']:
            issues.append("train.lr_min must be smaller than train.lr_max")
        if v['train.charbonnier_eps2'] <= 0:
            issues.append("train.charbonnier_eps2 must be positive")
        if v['data.workers'] < 0:
            issues.append("data.workers must be non-negative")

        return issues

    def check(self) -> 'Settings':
        """Raise ConfigError listing every issue, if any."""
        issues = self.validate()
        if issues:
            raise ConfigError("; ".join(issues))
        return self


def describe_keys() -> str:
    """Help text listing every settings key with its default."""
    lines = ["config keys (override with key=value):"]
    for key, spec in CONFIG_KEYS.items():
        default = json.dumps(spec.default)
        lines.append(f"  {key:<24} {default:<28} {spec.help}")
    lines.append(f"  {'preset':<24} {'-':<28} one of: {', '.join(PRESETS)}")
    return "\n".join(lines)


# Global configuration instance
config = Config()
