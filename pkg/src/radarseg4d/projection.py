"""Rasterization of radar point clouds into the five heatmap views.

Each populated cell holds the highest shifted power (``power - 62``) of the
points falling into it; empty cells hold 0. Elevation and azimuth are first
binned coarsely (28 and 44 bins by default) and then linearly resized to the
final view resolution, range and Doppler are binned at full resolution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .pointcloud import PointCloud, SphericalCloud, cloud_to_spherical
from .views import VIEW_IDS, FovConfig, ViewSpec

POWER_SHIFT = np.float32(62.0)


def bin_index(value: float, lo: float, hi: float, n_bins: int) -> int | None:
    """Half-open binning of one value; None when outside ``[lo, hi)``."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if not (lo <= value < hi):
        return None
    return min(math.floor((value - lo) / (hi - lo) * n_bins), n_bins - 1)


def bin_indices(values: np.ndarray, lo: float, hi: float, n_bins: int) -> np.ndarray:
    """Vectorized ``bin_index``; outside values map to -1."""
    values = np.asarray(values, dtype=np.float64)
    inside = (values >= lo) & (values < hi)
    idx = np.full(values.shape, -1, dtype=np.int64)
    scaled = (values[inside] - lo) / (hi - lo) * n_bins
    idx[inside] = np.minimum(np.floor(scaled).astype(np.int64), n_bins - 1)
    return idx


def axis_values(sc: SphericalCloud, axis: str, doppler_signed: bool = True) -> np.ndarray:
    v = sc.axis(axis)
    if axis == "doppler" and not doppler_signed:
        v = np.abs(v)
    return v


def shifted_power(power: np.ndarray) -> np.ndarray:
    return (np.asarray(power, dtype=np.float32) - POWER_SHIFT).astype(np.float32)


def rasterize_view(
    sc: SphericalCloud, spec: ViewSpec, doppler_signed: bool = True, coarse: bool = True
) -> np.ndarray:
    """Max shifted power per cell on the (coarse) grid spanned by two axes.

    Cells start at 0, so a point whose shifted power is negative leaves its
    cell empty. Points outside either interval are dropped.
    """
    vertical, horizontal = spec.vertical, spec.horizontal
    n_r = vertical.coarse_bins if coarse else vertical.bins
    n_c = horizontal.coarse_bins if coarse else horizontal.bins
    ri = bin_indices(axis_values(sc, vertical.name, doppler_signed), vertical.lo, vertical.hi, n_r)
    ci = bin_indices(axis_values(sc, horizontal.name, doppler_signed), horizontal.lo, horizontal.hi, n_c)
    keep = (ri >= 0) & (ci >= 0)
    grid = np.zeros(n_r * n_c, dtype=np.float32)
    np.maximum.at(grid, ri[keep] * n_c + ci[keep], shifted_power(sc.power[keep]))
    return grid.reshape(n_r, n_c)


def _interp_weights(n_src: int, n_dst: int) -> tuple[np.ndarray, np.ndarray]:
    if n_src == 1:
        if n_dst > 1:
            raise ValueError("cannot upsample an axis of length 1")
        return np.zeros(1, dtype=np.int64), np.zeros(1)
    if n_dst == 1:
        return np.zeros(1, dtype=np.int64), np.zeros(1)
    pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    i0 = np.minimum(np.floor(pos).astype(np.int64), n_src - 2)
    return i0, pos - i0


def _resize_axis(a: np.ndarray, n_dst: int, axis: int) -> np.ndarray:
    n_src = a.shape[axis]
    if n_src == n_dst:
        return a
    i0, frac = _interp_weights(n_src, n_dst)
    if n_src == 1:
        return np.take(a, i0, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = n_dst
    frac = frac.reshape(shape)
    return np.take(a, i0, axis=axis) * (1.0 - frac) + np.take(a, i0 + 1, axis=axis) * frac


def resize_linear(matrix: np.ndarray, new_rows: int, new_cols: int) -> np.ndarray:
    """Separable corner-aligned linear resize of the last two axes.

    Computed in float64; the result has the input dtype when it is floating.
    """
    m = np.asarray(matrix)
    out_dtype = m.dtype if np.issubdtype(m.dtype, np.floating) else np.float64
    out = _resize_axis(m.astype(np.float64), new_rows, m.ndim - 2)
    out = _resize_axis(out, new_cols, m.ndim - 1)
    return out.astype(out_dtype)


@dataclass
class Heatmap:
    view_id: str
    matrix: np.ndarray
    frame_id: str = ""


def project_coarse(cloud: PointCloud | SphericalCloud, fov: FovConfig) -> dict[str, np.ndarray]:
    """Coarse-grid rasters of every view, before the elevation/azimuth resize."""
    sc = cloud_to_spherical(cloud) if isinstance(cloud, PointCloud) else cloud
    out = {}
    for vid, spec in fov.views().items():
        out[vid] = rasterize_view(sc, spec, fov.doppler_signed)
    return out


def project_frame(
    cloud: PointCloud | SphericalCloud, fov: FovConfig | None = None, frame_id: str = ""
) -> dict[str, Heatmap]:
    fov = fov or FovConfig()
    views = fov.views()
    out = {}
    for vid, coarse in project_coarse(cloud, fov).items():
        rows, cols = views[vid].shape
        out[vid] = Heatmap(vid, resize_linear(coarse, rows, cols), frame_id)
    return out


@dataclass
class NormStats:
    """Per-view global (min, max) over every heatmap cell in a dataset."""

    bounds: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __getitem__(self, view_id: str) -> tuple[float, float]:
        return self.bounds[view_id]

    def to_dict(self) -> dict:
        return {v: {"min": lo, "max": hi} for v, (lo, hi) in self.bounds.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormStats":
        return cls({v: (float(b["min"]), float(b["max"])) for v, b in d.items()})


class StatsAccumulator:
    """One-pass running min/max per view."""

    def __init__(self):
        self._lo: dict[str, float] = {}
        self._hi: dict[str, float] = {}

    def update(self, view_id: str, matrix: np.ndarray) -> None:
        lo, hi = float(np.min(matrix)), float(np.max(matrix))
        self._lo[view_id] = min(lo, self._lo.get(view_id, lo))
        self._hi[view_id] = max(hi, self._hi.get(view_id, hi))

    def result(self, view_ids: Iterable[str] = VIEW_IDS) -> NormStats:
        missing = [v for v in view_ids if v not in self._lo]
        if missing:
            raise ValueError(f"no heatmaps for views {missing}")
        return NormStats({v: (self._lo[v], self._hi[v]) for v in view_ids})


def compute_global_stats(
    frames: Iterable[Mapping[str, Heatmap | np.ndarray]], view_ids: Iterable[str] = VIEW_IDS
) -> NormStats:
    acc = StatsAccumulator()
    for frame in frames:
        for vid, h in frame.items():
            acc.update(vid, h.matrix if isinstance(h, Heatmap) else h)
    return acc.result(view_ids)


def normalize(matrix: np.ndarray, bounds: tuple[float, float]) -> np.ndarray:
    """Min-max scale to [0, 1]; a degenerate range (max == min) maps to zeros."""
    lo, hi = bounds
    m = np.asarray(matrix, dtype=np.float64)
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.float32)
    return np.clip((m - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)


def denormalize(matrix: np.ndarray, bounds: tuple[float, float]) -> np.ndarray:
    lo, hi = bounds
    return (np.asarray(matrix, dtype=np.float64) * (hi - lo) + lo).astype(np.float32)


def write_heatmap(directory: Path, heatmap: Heatmap, timestamp_ns: int) -> Path:
    """Raw little-endian float32 matrix plus a JSON sidecar."""
    directory.mkdir(parents=True, exist_ok=True)
    m = np.ascontiguousarray(heatmap.matrix, dtype="<f4")
    path = directory / f"{heatmap.frame_id}.bin"
    path.write_bytes(m.tobytes())
    meta = {
        "frame_id": heatmap.frame_id,
        "view": heatmap.view_id,
        "rows": int(m.shape[0]),
        "cols": int(m.shape[1]),
        "timestamp_ns": int(timestamp_ns),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return path


def read_heatmap(path: Path, shape: tuple[int, int]) -> np.ndarray:
    raw = Path(path).read_bytes()
    expected = shape[0] * shape[1] * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def view_specs(fov: FovConfig | None = None) -> dict[str, ViewSpec]:
    return (fov or FovConfig()).views()
