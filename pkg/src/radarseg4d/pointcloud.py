"""Radar point clouds: ASCII PCD I/O and Cartesian to spherical conversion."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

FIELDS = ("x", "y", "z", "doppler", "power")

# observed sensor power interval; values outside are accepted but counted
POWER_MIN = 63.0
POWER_MAX = 132.6

_HEADER_KEYS = (
    "VERSION", "FIELDS", "SIZE", "TYPE", "COUNT",
    "WIDTH", "HEIGHT", "VIEWPOINT", "POINTS", "DATA",
)
_EXPECTED = {
    "VERSION": ["0.7"],
    "FIELDS": list(FIELDS),
    "SIZE": ["4"] * 5,
    "TYPE": ["F"] * 5,
    "COUNT": ["1"] * 5,
    "HEIGHT": ["1"],
    "DATA": ["ascii"],
}


class PCDParseError(ValueError):
    """Malformed PCD input. ``line`` is 1-based, or None for whole-file problems."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class RadarPoint:
    x: float
    y: float
    z: float
    doppler: float
    power: float


@dataclass(frozen=True)
class SphericalPoint:
    range: float
    azimuth: float
    elevation: float
    doppler: float
    power: float


class PointCloud:
    """Timestamped radar returns, stored as an (n, 5) float32 array.

    Columns follow ``FIELDS``: x, y, z (m, x forward, y left, z up),
    doppler (m/s, signed radial) and power.
    """

    def __init__(self, timestamp: int, data: np.ndarray | None = None):
        if timestamp < 0:
            raise ValueError(f"timestamp must be >= 0, got {timestamp}")
        if data is None:
            data = np.zeros((0, 5), dtype=np.float32)
        data = np.asarray(data, dtype=np.float32).reshape(-1, 5)
        if not np.all(np.isfinite(data)):
            raise ValueError("point cloud contains non-finite values")
        self.timestamp = int(timestamp)
        self.data = data

    @classmethod
    def from_points(cls, timestamp: int, points: Sequence[RadarPoint]) -> "PointCloud":
        rows = [(p.x, p.y, p.z, p.doppler, p.power) for p in points]
        return cls(timestamp, np.array(rows, dtype=np.float32).reshape(-1, 5))

    @property
    def points(self) -> list[RadarPoint]:
        return [RadarPoint(*map(float, row)) for row in self.data]

    def __len__(self) -> int:
        return self.data.shape[0]

    def __iter__(self) -> Iterator[RadarPoint]:
        return iter(self.points)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self) -> str:
        return f"PointCloud(timestamp={self.timestamp}, n={len(self)})"

    def power_warnings(self) -> int:
        """Number of points whose power lies outside the observed sensor interval."""
        p = self.data[:, 4]
        return int(np.count_nonzero((p < POWER_MIN) | (p > POWER_MAX)))


def _fmt(v: np.float32) -> str:
    # shortest decimal that round-trips the float32 value
    return np.format_float_positional(v, unique=True, trim="-")


def serialize_pcd(cloud: PointCloud) -> bytes:
    n = len(cloud)
    lines = [
        "# .PCD v0.7 - Point Cloud Data file format",
        "VERSION 0.7",
        "FIELDS " + " ".join(FIELDS),
        "SIZE 4 4 4 4 4",
        "TYPE F F F F F",
        "COUNT 1 1 1 1 1",
        f"WIDTH {n}",
        "HEIGHT 1",
        "VIEWPOINT 0 0 0 1 0 0 0",
        f"POINTS {n}",
        "DATA ascii",
    ]
    for row in cloud.data:
        lines.append(" ".join(_fmt(v) for v in row))
    return ("\n".join(lines) + "\n").encode("ascii")


def _parse_int(tok: str, key: str, lineno: int) -> int:
    if not re.fullmatch(r"\d+", tok):
        raise PCDParseError(f"{key} must be a non-negative integer, got {tok!r}", lineno)
    return int(tok)


def parse_pcd(raw: bytes, timestamp: int = 0) -> PointCloud:
    """Parse an ASCII PCD v0.7 file with fields ``x y z doppler power``.

    Raises PCDParseError (naming the offending line) for any deviation from
    the expected header or for malformed/non-finite data rows.
    """
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise PCDParseError(f"non-ASCII byte at offset {exc.start}") from None

    lines = text.splitlines()
    header: dict[str, list[str]] = {}
    lineno = 0
    key_iter = iter(_HEADER_KEYS)
    expected_key = next(key_iter)
    data_start = None
    while lineno < len(lines):
        line = lines[lineno].strip()
        lineno += 1
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if tokens[0] != expected_key:
            raise PCDParseError(f"expected {expected_key} header, got {tokens[0]!r}", lineno)
        values = tokens[1:]
        want = _EXPECTED.get(expected_key)
        if want is not None and values != want:
            raise PCDParseError(
                f"{expected_key} must be {' '.join(want)!r}, got {' '.join(values)!r}", lineno
            )
        if expected_key in ("WIDTH", "POINTS"):
            if len(values) != 1:
                raise PCDParseError(f"{expected_key} takes one value", lineno)
            _parse_int(values[0], expected_key, lineno)
        if expected_key == "VIEWPOINT" and len(values) != 7:
            raise PCDParseError("VIEWPOINT takes seven values", lineno)
        header[expected_key] = values
        if expected_key == "DATA":
            data_start = lineno
            break
        expected_key = next(key_iter)

    if data_start is None:
        missing = [k for k in _HEADER_KEYS if k not in header]
        raise PCDParseError(f"truncated header, missing {', '.join(missing)}", lineno or None)

    n = int(header["POINTS"][0])
    if int(header["WIDTH"][0]) != n:
        raise PCDParseError("WIDTH * HEIGHT does not match POINTS")
    if n > len(lines) - data_start:
        raise PCDParseError(f"POINTS declares {n} rows, file has {len(lines) - data_start} lines")

    data = np.empty((n, 5), dtype=np.float32)
    row = 0
    for idx in range(data_start, len(lines)):
        line = lines[idx].strip()
        if not line:
            continue
        if row >= n:
            raise PCDParseError(f"more data rows than POINTS {n}", idx + 1)
        tokens = line.split()
        if len(tokens) != 5:
            raise PCDParseError(f"expected 5 fields, got {len(tokens)}", idx + 1)
        try:
            values = [float(t) for t in tokens]
        except ValueError:
            raise PCDParseError(f"unparseable number in {line!r}", idx + 1) from None
        if not all(math.isfinite(v) for v in values):
            raise PCDParseError("non-finite value", idx + 1)
        with np.errstate(over="ignore"):
            data[row] = values
        if not np.all(np.isfinite(data[row])):
            raise PCDParseError("value overflows float32", idx + 1)
        row += 1
    if row != n:
        raise PCDParseError(f"POINTS declares {n} rows, found {row}")
    return PointCloud(timestamp, data)


def timestamp_from_path(path: str | Path) -> int:
    stem = Path(path).stem
    if not stem.isdigit():
        raise ValueError(f"PCD filename must be <nanoseconds>.pcd, got {Path(path).name}")
    return int(stem)


def read_pcd(path: str | Path) -> PointCloud:
    path = Path(path)
    return parse_pcd(path.read_bytes(), timestamp_from_path(path))


def write_pcd(cloud: PointCloud, directory: str | Path) -> Path:
    path = Path(directory) / f"{cloud.timestamp}.pcd"
    path.write_bytes(serialize_pcd(cloud))
    return path


def to_spherical(p: RadarPoint) -> SphericalPoint:
    """Range, azimuth (positive left) and elevation (positive up) of one return.

    A point at the origin gets azimuth = elevation = 0.
    """
    horiz = math.hypot(p.x, p.y)
    rng = math.sqrt(p.x * p.x + p.y * p.y + p.z * p.z)
    az = math.atan2(p.y, p.x)
    el = math.atan2(p.z, horiz)
    return SphericalPoint(rng, az, el, p.doppler, p.power)


def from_spherical(s: SphericalPoint) -> RadarPoint:
    c = math.cos(s.elevation)
    return RadarPoint(
        s.range * c * math.cos(s.azimuth),
        s.range * c * math.sin(s.azimuth),
        s.range * math.sin(s.elevation),
        s.doppler,
        s.power,
    )


@dataclass
class SphericalCloud:
    """Column arrays (float64) of the spherical quantities of a whole cloud."""

    range: np.ndarray
    azimuth: np.ndarray
    elevation: np.ndarray
    doppler: np.ndarray
    power: np.ndarray

    def __len__(self) -> int:
        return self.range.shape[0]

    def axis(self, name: str) -> np.ndarray:
        return getattr(self, name)

    @classmethod
    def from_points(cls, points: Sequence[SphericalPoint]) -> "SphericalCloud":
        cols = np.array(
            [(p.range, p.azimuth, p.elevation, p.doppler, p.power) for p in points],
            dtype=np.float64,
        ).reshape(-1, 5)
        return cls(*(cols[:, i].copy() for i in range(5)))


def cloud_to_spherical(cloud: PointCloud) -> SphericalCloud:
    d = cloud.data.astype(np.float64)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    horiz = np.hypot(x, y)
    # atan2(0, 0) is 0, which gives the origin convention for free
    return SphericalCloud(
        range=np.sqrt(x * x + y * y + z * z),
        azimuth=np.arctan2(y, x),
        elevation=np.arctan2(z, horiz),
        doppler=d[:, 3].copy(),
        power=d[:, 4].copy(),
    )


@dataclass
class ValidationReport:
    """Per-axis and per-view inside/outside counts for one cloud."""

    n_points: int
    axis_outside: dict[str, int]
    view_inside: dict[str, int]
    view_outside: dict[str, int]
    power_warnings: int


def validate_cloud(cloud: PointCloud, fov=None) -> ValidationReport:
    """Count points inside/outside each view's value intervals; never mutates."""
    from .views import VIEW_AXES, FovConfig

    fov = fov or FovConfig()
    sc = cloud_to_spherical(cloud)
    inside = {}
    for name in ("elevation", "azimuth", "range", "doppler"):
        ax = fov.axis(name)
        v = sc.axis(name)
        if name == "doppler" and not fov.doppler_signed:
            v = np.abs(v)
        inside[name] = (v >= ax.lo) & (v < ax.hi)
    n = len(cloud)
    view_inside = {
        vid: int(np.count_nonzero(inside[a] & inside[b])) for vid, (a, b) in VIEW_AXES.items()
    }
    return ValidationReport(
        n_points=n,
        axis_outside={k: int(n - np.count_nonzero(m)) for k, m in inside.items()},
        view_inside=view_inside,
        view_outside={vid: n - c for vid, c in view_inside.items()},
        power_warnings=cloud.power_warnings(),
    )
