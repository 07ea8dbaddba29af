"""
Configuration module for the SAMI toolkit
Parses and prints the line-based RunConfig format:

    [model]
    latent_dim = 3
    encoder_multipliers = 2, 2

Defaults are the disks-scale architecture and training settings.
"""

import hashlib
from dataclasses import dataclass, field, fields, replace
from typing import List, Tuple

SECTIONS = ("model", "schedule", "training", "data", "analysis")

NONLINEARITIES = ("relu", "silu")
ENCODER_ARCHS = ("convnet", "half-unet")
SCHEDULE_KINDS = ("linear", "cosine")
KL_ANNEALS = ("exponential", "constant")
T_DISTRIBUTIONS = ("uniform", "increasing", "zero")
TRAIN_MODES = ("joint", "frozen-denoiser")
LOSS_WEIGHTINGS = ("simple", "noise-level")
GUIDANCE_SIGNS = ("positive", "negative")
COEFFICIENT_RULES = ("derived", "algorithm")


class ConfigError(ValueError):
    """Raised for malformed config text, unknown keys, or out-of-range values."""


@dataclass
class ModelConfig:
    image_size: int = 32
    latent_dim: int = 3
    encoder_arch: str = "convnet"
    encoder_base_channels: int = 48
    encoder_multipliers: List[int] = field(default_factory=lambda: [2, 2])
    encoder_nonlinearity: str = "relu"
    encoder_bias: bool = False
    denoiser_base_channels: int = 128
    denoiser_multipliers: List[int] = field(default_factory=lambda: [1, 1, 1, 1, 1, 1])
    denoiser_nonlinearity: str = "silu"


@dataclass
class ScheduleConfig:
    kind: str = "linear"
    levels: int = 400
    beta_min: float = 1e-4
    beta_max: float = 0.02
    cosine_offset: float = 0.008


@dataclass
class TrainConfig:
    kl_weight: float = 5e-6
    kl_anneal: str = "exponential"
    kl_anneal_epochs: int = 1000
    kl_start_factor: float = 1e-6
    learning_rate: float = 6e-3
    batch_size: int = 512
    epochs: int = 1000
    t_distribution: str = "uniform"
    mode: str = "joint"
    loss_weighting: str = "simple"
    guidance_sign: str = "positive"
    guidance_samples: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class DataConfig:
    train_size: int = 2000
    test_size: int = 200
    radius: float = 8.0
    edge_width: float = 1.0
    foreground: float = 0.5


@dataclass
class AnalysisConfig:
    variance_draws: int = 8
    variance_buckets: int = 10
    reference_level: int = -1  # -1: a quarter of the schedule levels
    probes: int = 8
    coherence_eps: float = 1e-8
    sequence_count: int = 50
    sequence_length: int = 8
    samples: int = 16
    coefficient_rule: str = "derived"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)


# ---------- value conversion ----------
def _parse_value(text: str, template, where: str):
    text = text.strip()
    try:
        if isinstance(template, bool):
            lowered = text.lower()
            if lowered not in ("true", "false"):
                raise ValueError(text)
            return lowered == "true"
        if isinstance(template, int):
            return int(text)
        if isinstance(template, float):
            return float(text)
        if isinstance(template, list):
            return [int(part) for part in text.split(",") if part.strip()]
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse value '{text}'") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    return str(value)


# ---------- parse / print ----------
def parse_config(text: str) -> RunConfig:
    """
    Parse RunConfig text. Keys not set keep their defaults.

    Raises:
        ConfigError: unknown section or key, malformed line, invalid value
    """
    config = RunConfig()
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{raw.strip()}'")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside of any section")
        key, value = (part.strip() for part in line.split("=", 1))
        block = getattr(config, section)
        known = {f.name for f in fields(block)}
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key '{key}' in [{section}]")
        setattr(block, key, _parse_value(value, getattr(block, key), f"line {lineno}"))
    validate_config(config)
    return config


def format_config(config: RunConfig) -> str:
    """Print a RunConfig; parse_config(format_config(c)) == c."""
    lines = []
    for section in SECTIONS:
        block = getattr(config, section)
        lines.append(f"[{section}]")
        for f in fields(block):
            lines.append(f"{f.name} = {_format_value(getattr(block, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as handle:
        return parse_config(handle.read())


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(format_config(config).encode("utf-8")).hexdigest()


def with_overrides(config: RunConfig, section: str, **changes) -> RunConfig:
    """Copy of config with some keys of one section replaced."""
    block = replace(getattr(config, section), **changes)
    return replace(config, **{section: block})


# ---------- validation ----------
def _choice(value: str, allowed: Tuple[str, ...], name: str):
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {', '.join(allowed)}; got '{value}'")


def validate_config(config: RunConfig) -> None:
    m, s, t, d, a = config.model, config.schedule, config.training, config.data, config.analysis
    if m.image_size < 4 or m.latent_dim < 1:
        raise ConfigError("image_size must be >= 4 and latent_dim >= 1")
    if m.encoder_base_channels < 1 or m.denoiser_base_channels < 1:
        raise ConfigError("base channel counts must be positive")
    if not m.encoder_multipliers or not m.denoiser_multipliers:
        raise ConfigError("channel multiplier lists must not be empty")
    if any(v < 1 for v in m.encoder_multipliers + m.denoiser_multipliers):
        raise ConfigError("channel multipliers must be positive")
    _choice(m.encoder_arch, ENCODER_ARCHS, "encoder_arch")
    _choice(m.encoder_nonlinearity, NONLINEARITIES, "encoder_nonlinearity")
    _choice(m.denoiser_nonlinearity, NONLINEARITIES, "denoiser_nonlinearity")

    _choice(s.kind, SCHEDULE_KINDS, "schedule kind")
    if s.levels < 2:
        raise ConfigError("schedule levels must be >= 2")

    if t.kl_weight <= 0:
        raise ConfigError("kl_weight must be positive")
    _choice(t.kl_anneal, KL_ANNEALS, "kl_anneal")
    _choice(t.t_distribution, T_DISTRIBUTIONS, "t_distribution")
    _choice(t.mode, TRAIN_MODES, "mode")
    _choice(t.loss_weighting, LOSS_WEIGHTINGS, "loss_weighting")
    _choice(t.guidance_sign, GUIDANCE_SIGNS, "guidance_sign")
    if t.learning_rate <= 0 or t.batch_size < 1 or t.epochs < 1 or t.guidance_samples < 1:
        raise ConfigError("learning_rate, batch_size, epochs and guidance_samples must be positive")
    if not 0 < t.kl_start_factor <= 1:
        raise ConfigError("kl_start_factor must lie in (0, 1]")

    if d.train_size < 1 or d.test_size < 1:
        raise ConfigError("train_size and test_size must be positive")
    if d.radius <= 0 or d.edge_width < 0 or not 0 <= d.foreground <= 1:
        raise ConfigError("radius must be positive, edge_width non-negative, foreground in [0, 1]")
    if 2 * d.radius > m.image_size:
        raise ConfigError(f"a disk of radius {d.radius} does not fit a {m.image_size}px image")

    _choice(a.coefficient_rule, COEFFICIENT_RULES, "coefficient_rule")
    if a.variance_draws < 1 or a.variance_buckets < 2 or a.probes < 1 or a.samples < 1:
        raise ConfigError("analysis draw/bucket/probe/sample counts must be positive")
    if a.reference_level != -1 and not 0 <= a.reference_level < s.levels:
        raise ConfigError(f"reference_level must be -1 or lie in [0, {s.levels})")


def reference_level(config: RunConfig) -> int:
    """The analysis reference level, with -1 resolved to levels // 4."""
    level = config.analysis.reference_level
    return config.schedule.levels // 4 if level == -1 else level
