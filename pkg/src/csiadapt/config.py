"""Experiment configuration: defaults, file parsing, and overrides.

Config files are plain text with dotted keys:

    # comment
    sim.rate_hz = 100
    run.seeds = 1,2,3,4,5
    teacher.precision = 0.703

Values are coerced to the type of the dataclass default they target.
Environment variables override file values (prefix CSIADAPT_, dots become
double underscores: CSIADAPT_SIM__RATE_HZ). Explicit --set key=value pairs
override both. Validation failures name the offending field path.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "flatten_config",
]

ENV_PREFIX = "CSIADAPT_"


class ConfigError(Exception):
    """Invalid configuration value or key; message carries the field path."""


@dataclass(frozen=True)
class SimSection:
    subcarriers: int = 52
    rate_hz: float = 100.0
    window: int = 128
    segment_s: float = 2.56
    segments_per_class: int = 125  # baseline dataset: 2 windows per segment
    profile_seed: int = 0
    snr_db: float = 41.0


@dataclass(frozen=True)
class ModelSection:
    hidden: tuple = (32, 32, 32)
    baseline_epochs: int = 8
    baseline_learning_rate: float = 2e-3
    baseline_batch_size: int = 128


@dataclass(frozen=True)
class AdaptSection:
    epochs: int = 50
    learning_rate: float = 1e-4
    batch_size: int = 4


@dataclass(frozen=True)
class PolicySection:
    confidence_threshold: float = 0.80
    window: int = 50
    cooldown_s: float = 120.0
    min_labeled_samples: int = 12
    collection_s: float = 60.0
    collection_stride: int = 32


@dataclass(frozen=True)
class TeacherSection:
    kind: str = "oracle"  # oracle | attention
    precision: float = 0.703
    label_rate_hz: float = 30.0
    error_hold_ms: float = 2000.0


@dataclass(frozen=True)
class ShiftSection:
    preset: str = "severe"  # severe | none | custom
    attenuation_delta_db: float = 0.0
    reseed: int = -1  # -1 means "no tap regeneration" in custom presets
    phase_delta: float = 0.0
    snr_delta_db: float = 0.0
    gain_perturb_scale: float = 0.0


@dataclass(frozen=True)
class RunSection:
    seeds: tuple = (1, 2, 3, 4, 5)
    out_dir: str = "runs"
    eval_windows_per_class: int = 50
    monitor_s: float = 80.0
    n_nodes: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimSection = field(default_factory=SimSection)
    model: ModelSection = field(default_factory=ModelSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    policy: PolicySection = field(default_factory=PolicySection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    shift: ShiftSection = field(default_factory=ShiftSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> None:
        checks = [
            ("sim.subcarriers", self.sim.subcarriers >= 1),
            ("sim.rate_hz", self.sim.rate_hz > 0),
            ("sim.window", self.sim.window >= 1),
            ("sim.segment_s", self.sim.segment_s > 0),
            ("sim.segments_per_class", self.sim.segments_per_class >= 1),
            ("sim.snr_db", 0.0 <= self.sim.snr_db <= 60.0),
            ("model.hidden", len(self.model.hidden) == 3 and all(h >= 1 for h in self.model.hidden)),
            ("model.baseline_epochs", self.model.baseline_epochs >= 1),
            ("model.baseline_learning_rate", self.model.baseline_learning_rate > 0),
            ("model.baseline_batch_size", self.model.baseline_batch_size >= 1),
            ("adapt.epochs", self.adapt.epochs >= 1),
            ("adapt.learning_rate", self.adapt.learning_rate > 0),
            ("adapt.batch_size", self.adapt.batch_size >= 1),
            ("policy.confidence_threshold", 0.0 < self.policy.confidence_threshold < 1.0),
            ("policy.window", self.policy.window >= 1),
            ("policy.cooldown_s", self.policy.cooldown_s >= self.policy.collection_s > 0),
            ("policy.min_labeled_samples", self.policy.min_labeled_samples >= 1),
            ("policy.collection_stride", self.policy.collection_stride >= 1),
            ("teacher.kind", self.teacher.kind in ("oracle", "attention")),
            ("teacher.precision", 0.0 <= self.teacher.precision <= 1.0),
            ("teacher.label_rate_hz", self.teacher.label_rate_hz > 0),
            ("teacher.error_hold_ms", self.teacher.error_hold_ms >= 0),
            ("shift.preset", self.shift.preset in ("severe", "none", "custom")),
            ("run.seeds", len(self.run.seeds) >= 1),
            ("run.eval_windows_per_class", self.run.eval_windows_per_class >= 1),
            ("run.monitor_s", self.run.monitor_s > 0),
            ("run.n_nodes", self.run.n_nodes >= 1),
        ]
        for path, ok in checks:
            if not ok:
                raise ConfigError(f"invalid value for {path}")


_SECTIONS = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(path: str, text: str, sample):
    text = text.strip()
    try:
        if isinstance(sample, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(sample, int):
            return int(text)
        if isinstance(sample, float):
            return float(text)
        if isinstance(sample, tuple):
            parts = [p for p in text.replace("[", "").replace("]", "").split(",") if p.strip()]
            inner = sample[0] if sample else 0
            return tuple(type(inner)(p.strip()) for p in parts)
        return text
    except ValueError as exc:
        raise ConfigError(f"cannot parse value for {path}: {text!r}") from exc


def _set_key(cfg: ExperimentConfig, path: str, raw: str) -> ExperimentConfig:
    parts = path.split(".")
    if len(parts) != 2:
        raise ConfigError(f"config keys are section.field, got {path!r}")
    section_name, field_name = parts
    section = getattr(cfg, section_name, None)
    if section is None or section_name not in _SECTIONS:
        raise ConfigError(f"unknown config section {section_name!r} in {path!r}")
    if not hasattr(section, field_name):
        raise ConfigError(f"unknown config field {path!r}")
    sample = getattr(section, field_name)
    value = _coerce(path, raw, sample)
    return replace(cfg, **{section_name: replace(section, **{field_name: value})})


def _parse_file(path: str) -> list[tuple[str, str]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, value = stripped.partition("=")
            out.append((key.strip(), value.split("#", 1)[0].strip()))
    return out


def _env_overrides(environ) -> list[tuple[str, str]]:
    out = []
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX) :].lower().replace("__", ".")
        out.append((key, value))
    return out


def load_config(
    path: str | None = None,
    sets: list[str] | None = None,
    environ=None,
) -> ExperimentConfig:
    """Defaults <- file <- environment <- explicit key=value pairs."""
    cfg = ExperimentConfig()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        for key, value in _parse_file(path):
            cfg = _set_key(cfg, key, value)
    for key, value in _env_overrides(os.environ if environ is None else environ):
        cfg = _set_key(cfg, key, value)
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        cfg = _set_key(cfg, key.strip(), value.strip())
    cfg.validate()
    return cfg


def flatten_config(cfg: ExperimentConfig) -> dict:
    """Dotted-key view of a config, for reports and reproducibility dumps."""
    flat = {}
    for section_field in fields(cfg):
        section = getattr(cfg, section_field.name)
        for f in fields(section):
            value = getattr(section, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            flat[f"{section_field.name}.{f.name}"] = value
    return flat
