"""System configuration, unit conversion and the YAML spec-file schema.

All powers are held in milliwatts inside the package.  The on-disk schema
uses dBm; conversion happens once, in :func:`system_from_dict`.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration."""


def dbm_to_mw(dbm: float) -> float:
    return float(10.0 ** (dbm / 10.0))


def mw_to_dbm(mw: float) -> float:
    return float(10.0 * np.log10(mw))


@dataclass(frozen=True)
class UserRegion:
    """Axis-aligned box in meters; users are placed uniformly inside it."""

    low: tuple[float, float, float] = (5.0, -35.0, -20.0)
    high: tuple[float, float, float] = (35.0, 35.0, -20.0)

    def __post_init__(self):
        if len(self.low) != 3 or len(self.high) != 3:
            raise ConfigError("user region corners must be 3-vectors")
        if any(lo > hi for lo, hi in zip(self.low, self.high)):
            raise ConfigError(f"empty user region {self.low} .. {self.high}")

    def contains(self, points, atol: float = 1e-9) -> bool:
        p = np.asarray(points, dtype=float)
        return bool(np.all(p >= np.asarray(self.low) - atol) and np.all(p <= np.asarray(self.high) + atol))


@dataclass(frozen=True)
class SystemConfig:
    """Dimensions, geometry and link budget of one IRS-assisted downlink."""

    num_bs_antennas: int = 8
    num_irs_elements: int = 100
    irs_rows: int = 10
    irs_cols: int = 10
    num_users: int = 3
    downlink_power: float = dbm_to_mw(20.0)   # P_d, mW
    uplink_power: float = dbm_to_mw(15.0)     # P_u, mW
    downlink_noise: float = dbm_to_mw(-85.0)  # sigma_0^2, mW
    uplink_noise: float = dbm_to_mw(-100.0)   # sigma_1^2, mW
    rician_factor: float = 10.0
    bs_location: tuple[float, float, float] = (100.0, 100.0, 0.0)
    irs_location: tuple[float, float, float] = (0.0, 0.0, 0.0)
    user_region: UserRegion = field(default_factory=UserRegion)

    def __post_init__(self):
        for name in ("num_bs_antennas", "num_irs_elements", "irs_rows", "irs_cols", "num_users"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.irs_rows * self.irs_cols != self.num_irs_elements:
            raise ConfigError(
                f"irs_rows*irs_cols = {self.irs_rows * self.irs_cols} != N = {self.num_irs_elements}"
            )
        for name in ("downlink_power", "uplink_power", "downlink_noise", "uplink_noise"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be strictly positive")
        if self.rician_factor < 0:
            raise ConfigError("rician_factor must be >= 0")
        if np.allclose(self.bs_location, self.irs_location):
            raise ConfigError("BS and IRS cannot be co-located")

    # short aliases used throughout the numerics
    @property
    def M(self) -> int:
        return self.num_bs_antennas

    @property
    def N(self) -> int:
        return self.num_irs_elements

    @property
    def K(self) -> int:
        return self.num_users

    def with_(self, **changes) -> "SystemConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        """File-level representation (powers in dBm)."""
        return {
            "num_bs_antennas": self.num_bs_antennas,
            "num_irs_elements": self.num_irs_elements,
            "irs_rows": self.irs_rows,
            "irs_cols": self.irs_cols,
            "num_users": self.num_users,
            "downlink_power_dbm": round(mw_to_dbm(self.downlink_power), 12),
            "uplink_power_dbm": round(mw_to_dbm(self.uplink_power), 12),
            "downlink_noise_dbm": round(mw_to_dbm(self.downlink_noise), 12),
            "uplink_noise_dbm": round(mw_to_dbm(self.uplink_noise), 12),
            "rician_factor": self.rician_factor,
            "bs_location": list(self.bs_location),
            "irs_location": list(self.irs_location),
            "user_region": {"low": list(self.user_region.low), "high": list(self.user_region.high)},
        }

    def config_hash(self) -> str:
        return stable_hash(asdict(self))


def stable_hash(obj: Any) -> str:
    """Short sha256 of a canonical JSON rendering."""
    blob = json.dumps(obj, sort_keys=True, default=_json_default).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return repr(float(o))
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot hash {type(o)!r}")


_SYSTEM_KEYS = {
    "num_bs_antennas", "num_irs_elements", "irs_rows", "irs_cols", "num_users",
    "downlink_power_dbm", "uplink_power_dbm", "downlink_noise_dbm", "uplink_noise_dbm",
    "rician_factor", "bs_location", "irs_location", "user_region",
}


def system_from_dict(d: dict[str, Any], base: SystemConfig | None = None) -> SystemConfig:
    """Build a :class:`SystemConfig` from the file schema, overriding ``base``."""
    unknown = set(d) - _SYSTEM_KEYS
    if unknown:
        raise ConfigError(f"unknown system keys: {sorted(unknown)}")
    base = base or SystemConfig()
    kw: dict[str, Any] = {}
    for key in ("num_bs_antennas", "num_irs_elements", "irs_rows", "irs_cols", "num_users"):
        if key in d:
            kw[key] = int(d[key])
    for key, attr in (
        ("downlink_power_dbm", "downlink_power"),
        ("uplink_power_dbm", "uplink_power"),
        ("downlink_noise_dbm", "downlink_noise"),
        ("uplink_noise_dbm", "uplink_noise"),
    ):
        if key in d:
            kw[attr] = dbm_to_mw(float(d[key]))
    if "rician_factor" in d:
        kw["rician_factor"] = float(d["rician_factor"])
    for key in ("bs_location", "irs_location"):
        if key in d:
            kw[key] = _vec3(d[key], key)
    if "user_region" in d:
        r = d["user_region"]
        kw["user_region"] = UserRegion(low=_vec3(r["low"], "user_region.low"),
                                       high=_vec3(r["high"], "user_region.high"))
    return replace(base, **kw)


def _vec3(v, name) -> tuple[float, float, float]:
    try:
        t = tuple(float(x) for x in v)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a list of three numbers") from exc
    if len(t) != 3:
        raise ConfigError(f"{name} must have exactly three entries")
    return t  # type: ignore[return-value]


def load_yaml(path: str | Path) -> dict[str, Any]:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


# Named layouts.  "paper" is the full-scale sum-rate layout (BS at (100, 100, 0));
# "interpretation" places the BS at (100, -100, 0) for the array-response study.
def paper_system(**overrides) -> SystemConfig:
    return SystemConfig().with_(**overrides)


def desk_system(**overrides) -> SystemConfig:
    base = SystemConfig(num_bs_antennas=4, num_irs_elements=16, irs_rows=4, irs_cols=4, num_users=2)
    return base.with_(**overrides)


def interpretation_system(**overrides) -> SystemConfig:
    base = SystemConfig(bs_location=(100.0, -100.0, 0.0), num_users=1)
    return base.with_(**overrides)


def maxmin_system(**overrides) -> SystemConfig:
    """Max-min fairness layout: small IRS, users in a narrower box."""
    base = SystemConfig(num_bs_antennas=4, num_irs_elements=20, irs_rows=4, irs_cols=5, num_users=3,
                        user_region=UserRegion(low=(5.0, -15.0, -20.0), high=(15.0, 15.0, -20.0)))
    return base.with_(**overrides)


PROFILES = {"paper": paper_system, "desk": desk_system, "interpretation": interpretation_system,
            "maxmin": maxmin_system}
