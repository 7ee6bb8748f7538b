"""Physical parameters, spacing modes and configuration loading.

Everything is stored in SI units (m, s, veh/m).  Configuration files may use
km/h and veh/km; conversion happens once, in :func:`traffic_from_mapping`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

KMH = 1.0 / 3.6
PER_KM = 1.0e-3


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration input."""


@dataclass(frozen=True)
class TrafficParams:
    V1: float
    V2: float
    iota1: float
    iota2: float
    gamma1: float
    gamma2: float
    AObar1: float
    AObar2: float
    a1: float
    d: float
    l: float
    s1: float
    rho1_star: float
    rho2_star: float
    L: float
    W: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ConfigError(f"traffic.{f.name} must be finite, got {v}")
        # l = 0 is what the reference setup implies (a1 = 10 m^2 with d = 2 m, s1 = 5 m)
        for name in ("V1", "V2", "iota1", "iota2", "a1", "d", "s1", "L", "W"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"traffic.{name} must be > 0")
        if self.l < 0:
            raise ConfigError("traffic.l must be >= 0")
        if self.rho1_star < 0 or self.rho2_star < 0:
            raise ConfigError("equilibrium densities must be >= 0")
        for name in ("AObar1", "AObar2"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"traffic.{name} must lie in (0, 1]")
        for name in ("gamma1", "gamma2"):
            if getattr(self, name) < 1:
                raise ConfigError(f"traffic.{name} must be >= 1")

    def impact_area(self, spacing: float) -> float:
        return self.d * (self.l + spacing)

    def with_densities(self, rho1: float, rho2: float) -> "TrafficParams":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(rho1_star=rho1, rho2_star=rho2)
        return TrafficParams(**kw)


@dataclass(frozen=True)
class SpacingModeSet:
    states: tuple[float, ...]
    nominal: float
    lower: float
    upper: float

    def __post_init__(self):
        s = self.states
        if len(s) == 0:
            raise ConfigError("modes.states must not be empty")
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ConfigError("modes.states must be strictly ascending")
        if not (self.lower <= s[0] and s[-1] <= self.upper):
            raise ConfigError("modes.states must lie within [lower, upper]")
        if not self.lower < self.nominal < self.upper:
            raise ConfigError("modes.nominal must lie strictly inside (lower, upper)")

    @property
    def r(self) -> int:
        return len(self.states)


# Unit suffixes accepted in configuration files.  Bare keys are SI.
_SPEED_KEYS = ("V1", "V2")
_DENSITY_KEYS = ("rho1_star", "rho2_star")


def _convert(section: Mapping[str, Any], key: str) -> float | None:
    """Look up ``key`` in SI or any accepted unit-suffixed variant."""
    if key in section:
        return float(section[key])
    if key in _SPEED_KEYS:
        if f"{key}_kmh" in section:
            return float(section[f"{key}_kmh"]) * KMH
        if f"{key}_ms" in section:
            return float(section[f"{key}_ms"])
    if key in _DENSITY_KEYS:
        if f"{key}_vehkm" in section:
            return float(section[f"{key}_vehkm"]) * PER_KM
        if f"{key}_vehm" in section:
            return float(section[f"{key}_vehm"])
    return None


def traffic_from_mapping(section: Mapping[str, Any]) -> TrafficParams:
    values = {}
    for f in fields(TrafficParams):
        v = _convert(section, f.name)
        if v is None and f.name == "a1":
            continue
        if v is None:
            raise ConfigError(f"[traffic] missing field '{f.name}'")
        values[f.name] = v
    derived = values["d"] * (values["l"] + values["s1"])
    if "a1" not in values:
        values["a1"] = derived
    elif abs(values["a1"] - derived) > 1e-9 * max(1.0, derived):
        raise ConfigError(
            f"[traffic] a1 = {values['a1']} inconsistent with d*(l+s1) = {derived}")
    return TrafficParams(**values)


def modes_from_mapping(section: Mapping[str, Any]) -> SpacingModeSet:
    try:
        states = tuple(float(s) for s in section["states"])
        nominal = float(section["nominal"])
    except KeyError as exc:
        raise ConfigError(f"[modes] missing field {exc}") from None
    lower = float(section.get("lower", states[0]))
    upper = float(section.get("upper", states[-1]))
    return SpacingModeSet(states, nominal, lower, upper)


@dataclass
class Config:
    traffic: TrafficParams
    modes: SpacingModeSet
    raw: dict = field(default_factory=dict)
    path: Path | None = None

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name, {}))


def parse_config_text(text: str, suffix: str) -> dict:
    try:
        if suffix == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML parse error: {exc}") from None


def config_from_dict(raw: dict, path: Path | None = None) -> Config:
    if "traffic" not in raw:
        raise ConfigError("missing [traffic] section")
    if "modes" not in raw:
        raise ConfigError("missing [modes] section")
    try:
        traffic = traffic_from_mapping(raw["traffic"])
        modes = modes_from_mapping(raw["modes"])
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return Config(traffic, modes, raw, path)


def load_config(path: str | Path) -> Config:
    """Load a ``.toml`` or ``.json`` configuration document."""
    path = Path(path)
    if path.name == "paper_s5" or str(path) == "paper_s5":
        path = bundled_config_path()
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return config_from_dict(parse_config_text(text, path.suffix.lower()), path)


def bundled_config_path() -> Path:
    return Path(__file__).parent / "data" / "paper_s5.toml"


def paper_config() -> Config:
    return load_config(bundled_config_path())
