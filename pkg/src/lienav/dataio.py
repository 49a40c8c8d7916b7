"""CSV ingestion and export, unit handling, and the flat config format.

All files are plain CSV with a mandatory header and ``#`` comment lines.
Numbers are serialized with 12 significant digits so that write/parse
roundtrips preserve values. Config files are ``key = value [unit]`` lines
with units from a closed enumeration.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .ins import GnssFix, ImuSample

_DEG = math.pi / 180.0
_G0 = 9.80665

# unit token -> (dimension, factor to SI)
UNITS = {
    "rad": ("angle", 1.0),
    "deg": ("angle", _DEG),
    "m": ("length", 1.0),
    "m/s": ("velocity", 1.0),
    "m/s^2": ("acceleration", 1.0),
    "g": ("acceleration", _G0),
    "mg": ("acceleration", 1e-3 * _G0),
    "ug": ("acceleration", 1e-6 * _G0),
    "rad/s": ("angular-rate", 1.0),
    "deg/s": ("angular-rate", _DEG),
    "deg/h": ("angular-rate", _DEG / 3600.0),
    "deg/sqrt(h)": ("gyro-noise-density", _DEG / 60.0),
    "(m/s)/sqrt(h)": ("accel-noise-density", 1.0 / 60.0),
    "s": ("time", 1.0),
    "1/s": ("rate", 1.0),
    "hz": ("frequency", 1.0),
}

_ALIASES = {
    "µg": "ug",
    "°/h": "deg/h",
    "°/s": "deg/s",
    "°/√h": "deg/sqrt(h)",
    "(m/s)/√h": "(m/s)/sqrt(h)",
}


class DataError(ValueError):
    """Malformed input data; carries file and line context in the message."""


def _normalize_unit(token: str) -> str:
    token = token.strip()
    return _ALIASES.get(token, token.lower())


def parse_quantity(text: str, default_unit: Optional[str] = None) -> np.ndarray:
    """Parse "v1 [v2 ...] [unit]" into SI values.

    The trailing token may be a unit from the closed enumeration; otherwise
    default_unit applies (None means dimensionless).
    """
    tokens = text.split()
    if not tokens:
        raise DataError("empty quantity")
    unit = default_unit
    candidate = _normalize_unit(tokens[-1])
    if candidate in UNITS:
        unit = candidate
        tokens = tokens[:-1]
        if not tokens:
            raise DataError(f"quantity {text!r} has a unit but no value")
    try:
        values = np.array([float(tok) for tok in tokens])
    except ValueError as exc:
        raise DataError(f"cannot parse number in {text!r}") from exc
    if unit is None:
        return values
    norm = _normalize_unit(unit)
    if norm not in UNITS:
        raise DataError(f"unknown unit {unit!r}")
    return values * UNITS[norm][1]


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def _read_rows(path, expected_min_cols: int):
    """Yield (line_number, fields) for data rows; header returned first."""
    header = None
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = [f.strip() for f in line.split(",")]
            if header is None:
                header = (lineno, fields)
                continue
            if len(fields) < expected_min_cols:
                raise DataError(
                    f"{path}:{lineno}: expected at least {expected_min_cols} columns, "
                    f"got {len(fields)}"
                )
            rows.append((lineno, fields))
    if header is None:
        raise DataError(f"{path}: missing header row")
    return header, rows


def _column_units(header_fields, expected_names, path, header_line):
    """Split optional "name[unit]" header tokens into names and unit map."""
    names = []
    units = {}
    for tok in header_fields:
        if "[" in tok and tok.endswith("]"):
            name, unit = tok[:-1].split("[", 1)
            names.append(name.strip())
            units[name.strip()] = _normalize_unit(unit)
        else:
            names.append(tok)
    if names[: len(expected_names)] != list(expected_names):
        raise DataError(
            f"{path}:{header_line}: header must start with {','.join(expected_names)}, "
            f"got {','.join(names)}"
        )
    return names, units


def parse_imu_csv(path, gyro_unit: str = "rad/s", accel_unit: str = "m/s^2") -> list[ImuSample]:
    """Read t,gx,gy,gz,ax,ay,az rows into IMU samples.

    Header column names may carry "[unit]" suffixes overriding the defaults;
    timestamps must be strictly increasing.
    """
    (header_line, header), rows = _read_rows(path, 7)
    names, units = _column_units(header, ("t", "gx", "gy", "gz", "ax", "ay", "az"),
                                 path, header_line)
    g_unit = units.get("gx", _normalize_unit(gyro_unit))
    a_unit = units.get("ax", _normalize_unit(accel_unit))
    for unit, kind in ((g_unit, "angular-rate"), (a_unit, "acceleration")):
        if unit not in UNITS or UNITS[unit][0] != kind:
            raise DataError(f"{path}: unit {unit!r} is not a valid {kind} unit")
    g_scale = UNITS[g_unit][1]
    a_scale = UNITS[a_unit][1]

    samples = []
    prev_t = -math.inf
    for lineno, fields in rows:
        try:
            vals = [float(f) for f in fields[:7]]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: malformed number") from exc
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"{path}:{lineno}: non-finite value")
        if vals[0] <= prev_t:
            raise DataError(f"{path}:{lineno}: timestamps must be strictly increasing")
        prev_t = vals[0]
        samples.append(
            ImuSample(vals[0], g_scale * np.array(vals[1:4]), a_scale * np.array(vals[4:7]))
        )
    return samples


def parse_gnss_csv(path, default_sigma=(0.01, 0.01, 0.03)) -> list[GnssFix]:
    """Read t,x,y,z[,sx,sy,sz] ECEF rows; missing sigmas fall back to defaults."""
    (header_line, header), rows = _read_rows(path, 4)
    names, _ = _column_units(header, ("t", "x", "y", "z"), path, header_line)
    default_sigma = np.asarray(default_sigma, dtype=float)
    fixes = []
    prev_t = -math.inf
    for lineno, fields in rows:
        try:
            vals = [float(f) for f in fields]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: malformed number") from exc
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"{path}:{lineno}: non-finite value")
        if vals[0] <= prev_t:
            raise DataError(f"{path}:{lineno}: timestamps must be strictly increasing")
        prev_t = vals[0]
        if len(vals) >= 7:
            sigma = np.array(vals[4:7])
        else:
            sigma = default_sigma.copy()
        if np.any(sigma <= 0.0):
            raise DataError(f"{path}:{lineno}: GNSS sigma must be positive")
        fixes.append(GnssFix(vals[0], np.array(vals[1:4]), sigma))
    return fixes


def write_imu_csv(path, samples: Sequence[ImuSample]):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,gx,gy,gz,ax,ay,az\n")
        for s in samples:
            fields = [s.t, *s.gyro, *s.accel]
            fh.write(",".join(_fmt(v) for v in fields) + "\n")


def write_gnss_csv(path, fixes: Sequence[GnssFix]):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,x,y,z,sx,sy,sz\n")
        for f in fixes:
            fields = [f.t, *f.pos, *f.sigma]
            fh.write(",".join(_fmt(v) for v in fields) + "\n")


TRAJECTORY_COLUMNS = (
    "t,lat,lon,alt,vn,ve,vd,roll,pitch,yaw,"
    "bax,bay,baz,bgx,bgy,bgz"
)

_VAR_COLUMNS = ",".join(
    f"var_{fam}_{ax}" for fam in ("att", "vel", "pos", "ba", "bg") for ax in "xyz"
)


def write_trajectory_csv(path, table: np.ndarray, with_variances: bool):
    """Write a trajectory table; columns follow TRAJECTORY_COLUMNS (+variances)."""
    header = TRAJECTORY_COLUMNS + ("," + _VAR_COLUMNS if with_variances else "")
    expected = 16 + (15 if with_variances else 0)
    if table.shape[1] != expected:
        raise ValueError(f"trajectory table must have {expected} columns")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in table:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def parse_trajectory_csv(path) -> np.ndarray:
    """Read a trajectory or truth table back into a float matrix."""
    (header_line, header), rows = _read_rows(path, 16)
    names, _ = _column_units(header, tuple(TRAJECTORY_COLUMNS.split(",")),
                             path, header_line)
    out = np.empty((len(rows), len(header)))
    for i, (lineno, fields) in enumerate(rows):
        if len(fields) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} columns")
        try:
            out[i] = [float(f) for f in fields]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: malformed number") from exc
    if np.any(np.diff(out[:, 0]) <= 0.0):
        raise DataError(f"{path}: timestamps must be strictly increasing")
    return out


def read_config(path) -> dict[str, str]:
    """Flat "key = value" file; comments with '#', duplicate keys rejected."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            key = key.strip()
            if key in out:
                raise DataError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out
