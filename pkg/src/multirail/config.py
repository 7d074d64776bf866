"""Parsing of sizes and rail configuration files."""
from __future__ import annotations

import re
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .core import InvalidArgument, ProtocolKind, RailProfile

_UNITS = {"": 1, "B": 1, "K": 1 << 10, "KB": 1 << 10, "KIB": 1 << 10, "M": 1 << 20, "MB": 1 << 20,
          "MIB": 1 << 20, "G": 1 << 30, "GB": 1 << 30, "GIB": 1 << 30}


class ConfigError(InvalidArgument):
    pass


def parse_size(text: str | int) -> int:
    """'64KB' -> 65536 (binary units)."""
    if isinstance(text, int):
        return text
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([A-Za-z]*)\s*", str(text))
    if not m or m.group(2).upper() not in _UNITS:
        raise ConfigError(f"bad size {text!r}")
    value = float(m.group(1)) * _UNITS[m.group(2).upper()]
    if value <= 0 or value != int(value):
        raise ConfigError(f"bad size {text!r}")
    return int(value)


def parse_sizes(text: str) -> list[int]:
    """'2KB:64MB' (powers of two between) or '1KB,8MB,64MB'."""
    if ":" in text:
        lo_s, hi_s = text.split(":", 1)
        lo, hi = parse_size(lo_s), parse_size(hi_s)
        if lo > hi:
            raise ConfigError(f"empty size range {text!r}")
        out, s = [], lo
        while s <= hi:
            out.append(s)
            s *= 2
        return out
    return [parse_size(x) for x in text.split(",") if x.strip()]


def format_size(n: int) -> str:
    for unit, mult in (("GB", 1 << 30), ("MB", 1 << 20), ("KB", 1 << 10)):
        if n >= mult and n % mult == 0:
            return f"{n // mult}{unit}"
    return f"{n}B"


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def rail_from_table(rail_id: int, d: Mapping[str, Any]):
    """One ``[[rails]]`` entry. With ``calibration`` samples the result is a
    calibrated profile (whose ``.profile`` carries the samples for shaping);
    otherwise a plain two-parameter profile."""
    from .simnet.calibration import calibrate
    unknown = set(d) - {"protocol", "t_setup_us", "bandwidth_bps", "calibration", "calibration_nodes",
                        "cpu_sensitivity", "max_frame_payload", "id"}
    if unknown:
        raise ConfigError(f"rail {rail_id}: unknown keys {sorted(unknown)}")
    try:
        kind = ProtocolKind.parse(d.get("protocol", "tcp"))
        rid = int(d.get("id", rail_id))
        sens = d.get("cpu_sensitivity")
        if "calibration" in d:
            samples = [(parse_size(s), float(l)) for s, l in d["calibration"]]
            return calibrate(samples, rid, kind, int(d.get("calibration_nodes", 4)),
                             None if sens is None else float(sens))
        if "t_setup_us" not in d or "bandwidth_bps" not in d:
            raise ConfigError(f"rail {rail_id}: need t_setup_us and bandwidth_bps, or calibration")
        return RailProfile(rid, kind, float(d["t_setup_us"]), float(d["bandwidth_bps"]),
                           max_frame_payload=int(d.get("max_frame_payload", 64 * 1024)),
                           cpu_sensitivity=None if sens is None else float(sens))
    except ConfigError:
        raise
    except (InvalidArgument, TypeError, ValueError) as exc:
        raise ConfigError(f"rail {rail_id}: {exc}") from None


def rails_from_config(data: Mapping[str, Any]) -> list:
    rails = data.get("rails")
    if not rails:
        raise ConfigError("no [[rails]] entries")
    return [rail_from_table(i, d) for i, d in enumerate(rails)]


def load_rails(path) -> list:
    return rails_from_config(load_toml(path))


def live_profile(rail) -> RailProfile:
    """The profile used for shaping and scheduling a live rail."""
    return rail.profile if hasattr(rail, "profile") else rail


def default_rails(count: int = 2, t_setup: float = 200.0, bandwidth: float = 100e6) -> list[RailProfile]:
    """Identical shaped TCP rails; a desk-scale stand-in for real NICs."""
    return [RailProfile(i, ProtocolKind.TCP, t_setup, bandwidth) for i in range(count)]
