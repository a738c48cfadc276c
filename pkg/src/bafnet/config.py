"""Plain-text ``key = value`` run configuration.

Every tunable default lives in one of the sections below; a config file
overrides any subset, unknown keys are rejected, and the fully resolved
configuration is written next to each command's outputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datasim import DataConfig
from .dsp import ConfigError, StftConfig
from .losses import DEFAULT_RESOLUTIONS, format_resolutions, parse_resolutions
from .models import FcConfig, MappingConfig, MaskingConfig
from .train import TrainConfig


@dataclass(frozen=True)
class MetricsConfig:
    si_sdr_cap: float = 60.0
    segsnr_frame_ms: float = 32.0
    lsd_floor: float = 1e-8


# section prefix -> RunConfig attribute
_SECTIONS = {
    "stft": "stft",
    "model.map": "map",
    "model.mask": "mask",
    "model.fc": "fc",
    "train": "train",
    "data": "data",
    "metrics": "metrics",
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    stft: StftConfig = field(default_factory=StftConfig)
    map: MappingConfig = field(default_factory=MappingConfig)
    mask: MaskingConfig = field(default_factory=MaskingConfig)
    fc: FcConfig = field(default_factory=FcConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss_resolutions: str = format_resolutions(DEFAULT_RESOLUTIONS)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        self.stft.check_cola()
        self.resolutions()
        if self.mask.n_bins != self.stft.n_bins:
            raise ConfigError(f"model.mask.n_bins {self.mask.n_bins} != stft bins {self.stft.n_bins}")

    def resolutions(self):
        return parse_resolutions(self.loss_resolutions)

    def items(self) -> list[tuple[str, object]]:
        out = [("seed", self.seed), ("out_dir", self.out_dir), ("train.loss_resolutions", self.loss_resolutions)]
        for prefix, attr in _SECTIONS.items():
            section = getattr(self, attr)
            for f in fields(section):
                if prefix == "model.mask" and f.name == "n_bins":
                    continue  # derived from stft.nfft
                out.append((f"{prefix}.{f.name}", getattr(section, f.name)))
        return sorted(out)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def write(self, directory) -> Path:
        path = Path(directory) / "resolved_config.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key: str, text: str, default):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def build(overrides: dict[str, str] | None = None) -> RunConfig:
    """Merge string overrides into the defaults, rejecting unknown keys."""
    overrides = dict(overrides or {})
    base = RunConfig()
    top: dict[str, object] = {}
    for key in ("seed", "out_dir", "train.loss_resolutions"):
        if key in overrides:
            attr = "loss_resolutions" if key == "train.loss_resolutions" else key
            top[attr] = _coerce(key, overrides.pop(key), getattr(base, attr))
    sections: dict[str, dict] = {}
    for key, value in overrides.items():
        prefix, _, name = key.rpartition(".")
        attr = _SECTIONS.get(prefix)
        section = getattr(base, attr) if attr else None
        if section is None or name not in {f.name for f in fields(section)} or key == "model.mask.n_bins":
            raise ConfigError(f"unknown configuration key {key!r}")
        sections.setdefault(attr, {})[name] = _coerce(key, value, getattr(section, name))
    try:
        stft = replace(base.stft, **sections.pop("stft", {}))
        mask_kw = sections.pop("mask", {})
        mask_kw["n_bins"] = stft.n_bins
        built = {attr: replace(getattr(base, attr), **kw) for attr, kw in sections.items()}
        return RunConfig(stft=stft, mask=replace(base.mask, **mask_kw), **built, **top)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    values: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        values = parse_text(path.read_text(), str(path))
    values.update(overrides or {})
    return build(values)
