"""Run configuration and its plain-text ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


MODES = ("weak", "unsupervised", "beta-mix")
MATCH_MODES = ("cross", "self")


@dataclass
class RunConfig:
    # data
    data_seed: int = 0
    image_count: int = 200
    class_count: int = 5
    image_size: int = 48
    patch_size: int = 8
    data_dir: str = ""
    holdout: float = 0.2
    # model
    embed_dim: int = 64
    temperature: float = 0.1
    # optimization
    seed: int = 0
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: float = 0.1
    warmup_epochs: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    # area model and transport
    gamma: float = 0.02
    epsilon: float = 1.0
    epsilon_start: float = 0.0
    nu_b_indicator: bool = False
    strict_density: bool = True
    per_image_ot: bool = False
    sinkhorn_tol: float = 1e-6
    sinkhorn_max_iter: int = 500
    # experiment
    mode: str = "weak"
    beta: float = 0.0
    use_ot: bool = True
    match_mode: str = "cross"
    # unsupervised labels
    spectral_k_e: int = 3
    spectral_regions: int = 3
    spectral_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.image_count >= 2, "image_count must be >= 2"),
            (self.class_count >= 2, "class_count must be >= 2"),
            (self.image_size % self.patch_size == 0, "image_size must be divisible by patch_size"),
            (0.0 < self.holdout < 1.0, "holdout must lie in (0, 1)"),
            (self.embed_dim >= 1, "embed_dim must be >= 1"),
            (self.temperature > 0, "temperature must be positive"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr > 0, "lr must be positive"),
            (0 < self.lr_decay <= 1, "lr_decay must lie in (0, 1]"),
            (0 <= self.warmup_epochs < self.epochs or self.epochs == 1, "warmup_epochs must be < epochs"),
            (0.0 <= self.gamma <= 1.0, "gamma must lie in [0, 1]"),
            (self.epsilon > 0, "epsilon must be positive"),
            (self.epsilon_start >= 0, "epsilon_start must be nonnegative (0 disables the schedule)"),
            (self.sinkhorn_tol > 0, "sinkhorn_tol must be positive"),
            (self.sinkhorn_max_iter >= 1, "sinkhorn_max_iter must be >= 1"),
            (self.mode in MODES, f"mode must be one of {MODES}"),
            (0.0 <= self.beta <= 1.0, "beta must lie in [0, 1]"),
            (self.match_mode in MATCH_MODES, f"match_mode must be one of {MATCH_MODES}"),
            (self.spectral_k_e >= 2, "spectral_k_e must be >= 2"),
            (self.spectral_regions >= 1, "spectral_regions must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def epsilon_schedule(self) -> tuple[float, float] | None:
        return (self.epsilon_start, self.epsilon) if self.epsilon_start > 0 else None

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def field_types() -> dict[str, str]:
    return {f.name: f.type if isinstance(f.type, str) else f.type.__name__ for f in fields(RunConfig)}


def parse_overrides(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Apply string overrides, rejecting unknown keys."""
    types = field_types()
    changes = {}
    for key, raw in pairs.items():
        key = key.strip().replace("-", "_")
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _coerce(key, types[key], raw)
    return dataclasses.replace(base or RunConfig(), **changes)


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        if key.strip() in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key.strip()!r}")
        pairs[key.strip()] = value
    return parse_overrides(pairs, base)


def load(path, base: RunConfig | None = None) -> RunConfig:
    return loads(Path(path).read_text(), base)
