"""Field-of-view configuration and the five heatmap view definitions."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

VIEW_IDS = ("EA", "ER", "ED", "RA", "DA")

# (vertical axis, horizontal axis) per view
VIEW_AXES = {
    "EA": ("elevation", "azimuth"),
    "ER": ("elevation", "range"),
    "ED": ("elevation", "doppler"),
    "RA": ("range", "azimuth"),
    "DA": ("doppler", "azimuth"),
}


@dataclass(frozen=True)
class AxisSpec:
    name: str
    lo: float
    hi: float
    bins: int
    coarse_bins: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"axis {self.name}: lo must be < hi, got [{self.lo}, {self.hi})")
        if self.bins < 1 or self.coarse_bins < 1:
            raise ValueError(f"axis {self.name}: bin counts must be >= 1")


@dataclass(frozen=True)
class ViewSpec:
    view_id: str
    vertical: AxisSpec
    horizontal: AxisSpec

    @property
    def shape(self) -> tuple[int, int]:
        return (self.vertical.bins, self.horizontal.bins)

    @property
    def coarse_shape(self) -> tuple[int, int]:
        return (self.vertical.coarse_bins, self.horizontal.coarse_bins)


@dataclass(frozen=True)
class FovConfig:
    """Physical axis intervals and bin counts shared by all views.

    Angles are given in degrees here and converted to radians in ``axis``.
    Intervals are half-open ``[lo, hi)``.
    """

    azimuth_deg: tuple[float, float] = (-60.0, 60.0)
    elevation_deg: tuple[float, float] = (-20.0, 20.0)
    range_m: tuple[float, float] = (0.0, 42.0)
    doppler_mps: tuple[float, float] = (-16.0, 16.0)
    azimuth_bins: int = 128
    elevation_bins: int = 128
    range_bins: int = 256
    doppler_bins: int = 256
    azimuth_coarse_bins: int = 44
    elevation_coarse_bins: int = 28
    doppler_signed: bool = True

    def __post_init__(self):
        for name in ("azimuth", "elevation", "range", "doppler"):
            self.axis(name)

    def axis(self, name: str) -> AxisSpec:
        if name == "azimuth":
            lo, hi = self.azimuth_deg
            return AxisSpec(name, math.radians(lo), math.radians(hi),
                            self.azimuth_bins, self.azimuth_coarse_bins)
        if name == "elevation":
            lo, hi = self.elevation_deg
            return AxisSpec(name, math.radians(lo), math.radians(hi),
                            self.elevation_bins, self.elevation_coarse_bins)
        if name == "range":
            return AxisSpec(name, *self.range_m, self.range_bins, self.range_bins)
        if name == "doppler":
            return AxisSpec(name, *self.doppler_mps, self.doppler_bins, self.doppler_bins)
        raise KeyError(name)

    def view(self, view_id: str) -> ViewSpec:
        v, h = VIEW_AXES[view_id]
        return ViewSpec(view_id, self.axis(v), self.axis(h))

    def views(self) -> dict[str, ViewSpec]:
        return {vid: self.view(vid) for vid in VIEW_IDS}

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "FovConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown fov keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)
