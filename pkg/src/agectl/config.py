"""Experiment configuration and its flat ``key = value`` text format.

Keys are ``section.field`` for the policy, channel and fault sections and bare
names for run-level settings::

    # comments and blank lines are ignored
    policy.kind = acp+mod
    policy.kappa = 0.1
    channel.base_delay_ns = 10ms
    packets = 10000
    seeds = 1,2,3,4,5

Durations (keys ending in ``_ns``) accept plain integer nanoseconds or a
number with one of the units ns, us, ms, s. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import re
import typing
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable

from .netsim import ChannelModel, CoalesceFault, ConfigError
from .policies import PolicyConfig, PolicyError, PolicyKind

SECTIONS = {"policy": PolicyConfig, "channel": ChannelModel, "fault": CoalesceFault}
UNITS = {"ns": 1, "us": 1_000, "ms": 1_000_000, "s": 1_000_000_000}
_DURATION = re.compile(r"^\s*([0-9][0-9_]*(?:\.[0-9]*)?)\s*(ns|us|ms|s)?\s*$")


def parse_duration(text: str) -> int:
    m = _DURATION.match(str(text))
    if not m:
        raise ConfigError(f"not a duration: {text!r}")
    value = Fraction(m.group(1).replace("_", "")) * UNITS[m.group(2) or "ns"]
    if value.denominator != 1:
        raise ConfigError(f"duration {text!r} is not a whole number of nanoseconds")
    return int(value)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    channel: ChannelModel = field(default_factory=ChannelModel)
    fault: CoalesceFault = field(default_factory=CoalesceFault)
    packets: int = 10_000
    runs: int = 5
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    max_sim_time_ns: int = 0  # 0: run until the packet budget is spent
    label: str = ""

    def __post_init__(self):
        if self.packets < 0:
            raise ConfigError("packets must be non-negative")
        if self.runs < 1:
            raise ConfigError("runs must be at least 1")
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            raise ConfigError("need at least one seed")
        object.__setattr__(self, "seeds", seeds)
        if self.max_sim_time_ns < 0:
            raise ConfigError("max_sim_time_ns must be non-negative")

    def run_seeds(self) -> tuple[int, ...]:
        if len(self.seeds) >= self.runs:
            return self.seeds[: self.runs]
        # extend deterministically past the listed seeds
        extra = tuple(range(max(self.seeds) + 1, max(self.seeds) + 1 + self.runs - len(self.seeds)))
        return self.seeds + extra

    def replace(self, **changes: Any) -> "ExperimentConfig":
        """Copy with changes; dotted keys (``policy.kappa``) reach into sections."""
        return from_items({**to_items(self), **{k: _render(v) for k, v in changes.items()}})


def _field_types(cls) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _convert(name: str, tp: Any, raw: str) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if raw.lower() in ("", "none", "default"):
            return None
        tp = next(a for a in args if a is not type(None))
    if name.endswith("_ns"):
        if raw.startswith("-"):
            return -parse_duration(raw[1:])
        return parse_duration(raw)
    if tp is bool:
        return _parse_bool(raw)
    if tp is int:
        return int(raw.replace("_", ""))
    if tp is float:
        return float(raw)
    if tp is PolicyKind:
        return PolicyKind(raw)
    if origin is tuple:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, PolicyKind):
        return value.value
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "default"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_items(config: ExperimentConfig) -> dict[str, str]:
    """Canonical flat rendering; every key, sorted within each section."""
    out: dict[str, str] = {}
    for section in SECTIONS:
        obj = getattr(config, section)
        for f in dataclasses.fields(obj):
            out[f"{section}.{f.name}"] = _render(getattr(obj, f.name))
    for f in dataclasses.fields(config):
        if f.name not in SECTIONS:
            out[f.name] = _render(getattr(config, f.name))
    return out


def from_items(items: dict[str, str]) -> ExperimentConfig:
    sections: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    top: dict[str, Any] = {}
    top_types = {k: v for k, v in _field_types(ExperimentConfig).items() if k not in SECTIONS}
    for key, raw in items.items():
        try:
            if "." in key:
                section, name = key.split(".", 1)
                if section not in SECTIONS:
                    raise ConfigError(f"unknown config key {key!r}")
                types = _field_types(SECTIONS[section])
                if name not in types:
                    raise ConfigError(f"unknown config key {key!r}")
                sections[section][name] = _convert(name, types[name], raw)
            else:
                if key not in top_types:
                    raise ConfigError(f"unknown config key {key!r}")
                top[key] = _convert(key, top_types[key], raw)
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError) and "unknown config key" in str(exc):
                raise
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc
    try:
        return ExperimentConfig(
            policy=PolicyConfig(**sections["policy"]),
            channel=ChannelModel(**sections["channel"]),
            fault=CoalesceFault(**sections["fault"]),
            **top,
        )
    except PolicyError as exc:
        raise ConfigError(str(exc)) from exc


def parse_lines(lines: Iterable[str], prefix: str = "") -> dict[str, str]:
    items: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        if prefix:
            if not line.startswith(prefix):
                continue
            line = line[len(prefix):]
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in items:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        items[key] = value.strip()
    return items


def loads(text: str) -> ExperimentConfig:
    return from_items(parse_lines(text.splitlines()))


def load(path: str | Path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def dumps(config: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_items(config).items())


KEYS = sorted(to_items(ExperimentConfig()))
