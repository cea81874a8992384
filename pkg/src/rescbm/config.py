"""Flat key = value run configuration with flag overrides.

Precedence: command-line flags > config file > defaults.  Every validation
failure names the file and line it came from.
"""

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .residual_trainer import TrainingConfig


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 1 in the command-line tool."""


_PATH_KEYS = (
    "features",
    "labels",
    "classes",
    "bank",
    "candidates",
    "class_embeddings",
    "output_dir",
)
_INT_KEYS = (
    "n_residual",
    "batch_size",
    "epochs",
    "patience",
    "top_m",
    "seed",
    "discovery_epochs",
)
_FLOAT_KEYS = (
    "lam",
    "l1_ratio",
    "learning_rate",
    "epsilon",
    "val_fraction",
    "alpha",
    "noise_scale",
    "discovery_learning_rate",
)


@dataclass
class RunConfig:
    """Paths plus training hyperparameters for one command invocation."""

    features: Path | None = None
    labels: Path | None = None
    classes: Path | None = None
    bank: Path | None = None
    candidates: Path | None = None
    class_embeddings: Path | None = None
    output_dir: Path = Path(".")
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def require(self, *names):
        for name in names:
            if getattr(self, name) is None:
                raise ConfigError(f"config is missing required path {name!r}")
            path = getattr(self, name)
            if not Path(path).exists():
                raise ConfigError(f"{name} = {path}: file does not exist")

    def snapshot(self) -> dict:
        """Flat dict of every hyperparameter, for reports."""
        out = {}
        for f in fields(TrainingConfig):
            out[f.name] = getattr(self.training, f.name)
        return out


def _parse_value(key: str, raw: str, where: str):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _PATH_KEYS:
            return Path(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {raw!r} ({exc})") from None
    raise ConfigError(f"{where}: unknown key {key!r}")


def load_config_file(path) -> dict:
    """Parse a flat key = value file into a raw {key: parsed value} dict."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if not raw:
                raise ConfigError(f"{path}:{lineno}: empty value for {key!r}")
            values[key] = _parse_value(key, raw, f"{path}:{lineno}")
    return values


def build_run_config(file_path=None, overrides=None) -> RunConfig:
    """Merge defaults, an optional config file, and flag overrides in order."""
    merged = {}
    if file_path is not None:
        merged.update(load_config_file(file_path))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        merged[key] = _parse_value(key, str(value), "command line")

    paths = {k: merged.pop(k) for k in list(merged) if k in _PATH_KEYS}
    try:
        training = TrainingConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training configuration: {exc}") from None
    config = RunConfig(training=training, **paths)
    return config


def save_config_file(config: RunConfig, path) -> None:
    lines = []
    for key in _PATH_KEYS:
        value = getattr(config, key)
        if value is not None:
            lines.append(f"{key} = {value}")
    for f in fields(TrainingConfig):
        lines.append(f"{f.name} = {getattr(config.training, f.name)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
