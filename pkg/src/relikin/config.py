"""Key-value run config files.

One ``section.field = value`` assignment per line; ``#`` starts a comment.
Sections map onto the config dataclasses:

    model.*       ModelConfig      e.g. ``model.hidden_size = 128``
    train.*       TrainingConfig   e.g. ``train.loss_weights.vel = 1.0``
    generator.*   GeneratorConfig  e.g. ``generator.obs_noise_mm = 1.0, 4.0``
    sampler.*     SamplerConfig    e.g. ``sampler.num_samples = 50``
    split.*       ``ratios`` (three floats)

Values: ``true``/``false``, ``none``, integers, floats, comma-separated
numbers (tuples), JSON for anything starting with ``[`` or ``{``, and bare
strings otherwise. Unknown keys are errors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data_io import GeneratorConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainingConfig
from .uncertainty import SamplerConfig

SECTIONS = {
    "model": ModelConfig,
    "train": TrainingConfig,
    "generator": GeneratorConfig,
    "sampler": SamplerConfig,
}


def parse_value(text: str):
    s = text.strip()
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    if s[:1] in "[{":
        try:
            return json.loads(s)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad JSON value {s!r}: {exc}") from None
    if "," in s:
        return tuple(parse_value(p) for p in s.split(","))
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


@dataclass
class RunConfig:
    """Raw overrides per section; materialized into dataclasses on demand."""

    values: dict[str, dict] = field(default_factory=lambda: {k: {} for k in (*SECTIONS, "split")})

    def set(self, key: str, value) -> None:
        section, _, name = key.partition(".")
        if not name:
            raise ConfigError(f"config key {key!r} must look like section.field")
        if section == "split":
            if name != "ratios":
                raise ConfigError(f"unknown split field {name!r}")
            self.values["split"]["ratios"] = value
            return
        cls = SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"unknown config section {section!r}")
        top, _, sub = name.partition(".")
        known = {f.name for f in fields(cls)}
        if top not in known:
            raise ConfigError(f"unknown {section} field {top!r}")
        if sub:
            if top != "loss_weights":
                raise ConfigError(f"{section}.{top} has no sub-fields")
            self.values[section].setdefault(top, {})[sub] = value
        else:
            self.values[section][top] = value

    def update(self, pairs: dict) -> None:
        for k, v in pairs.items():
            self.set(k, v)

    def build(self, section: str):
        try:
            return SECTIONS[section](**self.values[section])
        except TypeError as exc:
            raise ConfigError(f"{section}: {exc}") from None

    def ratios(self) -> tuple[float, float, float]:
        r = self.values["split"].get("ratios", (0.8, 0.1, 0.1))
        if len(r) != 3 or any(float(v) < 0 for v in r) or sum(r) <= 0:
            raise ConfigError(f"split.ratios must be three non-negative numbers, got {r}")
        return tuple(float(v) for v in r)


def parse_text(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}, line {lineno}: expected 'key = value'")
        try:
            cfg.set(key.strip(), parse_value(value))
        except ConfigError as exc:
            raise ConfigError(f"{source}, line {lineno}: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_text(p.read_text(encoding="utf-8"), str(p))
