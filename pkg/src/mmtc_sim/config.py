"""Scenario configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, fields
from pathlib import Path


class PilotKind(str, enum.Enum):
    BERNOULLI = "bernoulli"
    GAUSSIAN = "gaussian"


class PowerPolicy(str, enum.Enum):
    NPC = "npc"  # every device at max power
    SCI = "sci"  # statistical channel inversion


class ConfigError(ValueError):
    """Invalid or inconsistent scenario configuration."""


# default physical constants
NOISE_POWER_W = 2e-13
MAX_UL_POWER_W = 0.1
CELL_EDGE_KM = 0.25
MIN_DISTANCE_KM = 0.025


@dataclass(frozen=True)
class SystemConfig:
    """All scalars describing one uplink scenario.

    Powers are in W and distances in km. ``pilot_len`` is the number of
    symbols spent on pilots; for the non-coherent scheme it equals
    ``coherence_len``.
    """

    n_devices: int = 200
    n_antennas: int = 20
    pilot_len: int = 10
    coherence_len: int = 500
    activity_prob: float = 0.05
    max_ul_power: float = MAX_UL_POWER_W
    noise_power: float = NOISE_POWER_W
    info_bits: int = 0
    cell_edge: float = CELL_EDGE_KM
    min_distance: float = MIN_DISTANCE_KM
    pilot_kind: PilotKind = PilotKind.BERNOULLI
    power_policy: PowerPolicy = PowerPolicy.NPC
    # fixed number of active devices; None means Bernoulli(activity_prob) per device
    n_active: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "pilot_kind", PilotKind(self.pilot_kind))
        object.__setattr__(self, "power_policy", PowerPolicy(self.power_policy))
        for name in ("n_devices", "n_antennas", "pilot_len", "coherence_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.pilot_len > self.coherence_len:
            raise ConfigError("pilot_len must not exceed coherence_len")
        if not 0.0 <= self.activity_prob <= 1.0:
            raise ConfigError("activity_prob must lie in [0, 1]")
        if self.max_ul_power <= 0 or self.noise_power <= 0:
            raise ConfigError("powers and noise must be strictly positive")
        if self.info_bits < 0:
            raise ConfigError("info_bits must be non-negative")
        if not 0 <= self.min_distance < self.cell_edge / 2:
            raise ConfigError("min_distance must be below half the cell edge")
        if self.n_active is not None and not 0 <= self.n_active <= self.n_devices:
            raise ConfigError("n_active must lie in [0, n_devices]")

    @property
    def columns_per_device(self) -> int:
        return 2 ** self.info_bits

    @property
    def n_columns(self) -> int:
        return self.n_devices * self.columns_per_device

    @property
    def noise_var_effective(self) -> float:
        """Noise variance after normalising the pilot observation by sqrt(tau_p * rho_max)."""
        return self.noise_power / (self.max_ul_power * self.pilot_len)

    def replace(self, **changes) -> "SystemConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_file(cls, path) -> "SystemConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), source=str(path))

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "SystemConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(key, value, source, lineno)
        return cls(**values)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, enum.Enum):
                value = value.value
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_INT_KEYS = {"n_devices", "n_antennas", "pilot_len", "coherence_len", "info_bits", "n_active"}
_FLOAT_KEYS = {"activity_prob", "max_ul_power", "noise_power", "cell_edge", "min_distance"}


def _coerce(key: str, value: str, source: str, lineno: int):
    try:
        if key in _INT_KEYS:
            return None if value.lower() == "none" else int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        if key == "pilot_kind":
            return PilotKind(value.lower())
        if key == "power_policy":
            return PowerPolicy(value.lower())
    except ValueError as exc:
        raise ConfigError(f"{source}:{lineno}: bad value for {key}: {value!r}") from exc
    return value
