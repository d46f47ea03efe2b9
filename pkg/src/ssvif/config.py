"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Unknown keys are rejected so a
typo never silently falls back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .gdwa import SCHEDULERS

CE_NORMALIZATIONS = ("mean", "sum")
DEFAULT_N_CLASSES = 15


@dataclass(frozen=True)
class Config:
    dataset_root: str = ""
    test_root: str = ""
    out_dir: str = "runs/ssvif"
    seed: int = 0
    # 0 means: the synthetic generator's class count if the dataset has one, else 15
    n_classes: int = 0
    lambda1: float = 20.0
    lambda2: float = 20.0
    lambda3: float = 10.0
    lambda4: float = 20.0
    lr: float = 1e-4
    batch_size: int = 10
    crop: int = 64
    max_epochs: int = 60
    patience: int = 10
    stage1_cap: int = 20
    scheduler: str = "gdwa"
    gdwa_temperature: float = 2.0
    fixed_wcsc: float = 0.1
    gdwa_norm_sample_every: int = 4
    deterministic: bool = True
    dice_eps: float = 1e-6
    ce_normalization: str = "mean"
    use_csc: bool = True
    save_checkpoints: bool = True

    def __post_init__(self):
        self.validate()

    @property
    def fusion_weights(self) -> tuple[float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def validate(self) -> None:
        for name in ("lr", "batch_size", "crop", "max_epochs", "patience", "stage1_cap",
                     "gdwa_temperature", "fixed_wcsc", "gdwa_norm_sample_every", "dice_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)!r}")
        if self.n_classes < 0 or self.n_classes == 1:
            raise ConfigError(f"n_classes must be >= 2 (or 0 for automatic), got {self.n_classes}")
        if self.crop % 4:
            raise ConfigError(f"crop must be a multiple of 4 for the segmentation model, got {self.crop}")
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"scheduler must be one of {', '.join(SCHEDULERS)}, got {self.scheduler!r}")
        if self.ce_normalization not in CE_NORMALIZATIONS:
            raise ConfigError(f"ce_normalization must be one of {', '.join(CE_NORMALIZATIONS)}")

    def with_overrides(self, **kwargs) -> "Config":
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def as_meta(self, prefix: str = "config.") -> dict[str, str]:
        return {prefix + f.name: _format(getattr(self, f.name)) for f in fields(self)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _convert(kind: str, raw: str, key: str, lineno: int | None):
    where = f"line {lineno}: " if lineno is not None else ""
    try:
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}{key} expects {kind}, got {raw!r}") from None


_FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def config_from_mapping(values: dict[str, str], base: Config | None = None, lines: dict[str, int] | None = None) -> Config:
    lines = lines or {}
    kwargs = {}
    for key, raw in values.items():
        if key not in _FIELD_TYPES:
            where = f"line {lines[key]}: " if key in lines else ""
            raise ConfigError(f"{where}unknown config key {key!r}")
        kwargs[key] = _convert(_FIELD_TYPES[key], raw, key, lines.get(key))
    try:
        return replace(base or Config(), **kwargs)
    except ConfigError as exc:
        bad = next((k for k in kwargs if k in str(exc)), None)
        if bad is not None and bad in lines:
            raise ConfigError(f"line {lines[bad]}: {exc}") from None
        raise


def parse_config_text(text: str) -> Config:
    values: dict[str, str] = {}
    lines: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: missing key")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = raw
        lines[key] = lineno
    return config_from_mapping(values, lines=lines)


def parse_config(path) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config_text(text)
