"""Synthetic labeled radar scenes: walking person clusters over static clutter.

Frames are grouped into sequences of ``frames_per_sequence``. The persons of a
sequence (count, start position, walking velocity, visible interval) come from
a per-sequence random stream, and the points of each frame from a per-frame
stream, so a frame is fully determined by ``(seed, frame index)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import ndtr

from .dataset import write_mask
from .pointcloud import PointCloud, cloud_to_spherical, write_pcd
from .projection import bin_indices, resize_linear
from .views import FovConfig

_EPOCH_NS = 1_600_000_000_000_000_000


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    frames: int = 500
    frames_per_sequence: int = 10
    frame_period_ms: float = 100.0
    mask_jitter_ms: float = 20.0
    persons: tuple[int, int] = (1, 3)
    visible_fraction: tuple[float, float] = (0.1, 0.7)
    person_distance_m: tuple[float, float] = (4.0, 22.0)
    person_azimuth_deg: tuple[float, float] = (-40.0, 40.0)
    person_height_m: float = -0.6
    person_std_m: tuple[float, float, float] = (0.2, 0.25, 0.45)
    person_points: tuple[int, int] = (30, 80)
    person_speed_mps: tuple[float, float] = (0.0, 1.5)
    person_doppler_noise: float = 0.2
    person_power: tuple[float, float] = (85.0, 132.6)
    clutter_rate: float = 150.0
    clutter_range_m: tuple[float, float] = (1.0, 42.0)
    clutter_doppler_std: float = 0.1
    clutter_power: tuple[float, float] = (63.0, 85.0)

    def validate(self, fov: FovConfig | None = None) -> None:
        fov = fov or FovConfig()
        if self.frames < 1:
            raise ValueError("frame count must be positive")
        if self.frames_per_sequence < 1:
            raise ValueError("frames_per_sequence must be positive")
        if not 0 <= self.persons[0] <= self.persons[1]:
            raise ValueError("persons must be 0 <= min <= max")
        if not 0 < self.visible_fraction[0] <= self.visible_fraction[1] <= 1:
            raise ValueError("visible_fraction must lie in (0, 1]")
        if not 1 <= self.person_points[0] <= self.person_points[1]:
            raise ValueError("person_points must be 1 <= min <= max")
        if 2 * self.mask_jitter_ms >= self.frame_period_ms:
            raise ValueError("mask jitter must stay below half the frame period")
        az_lo, az_hi = fov.azimuth_deg
        if not az_lo <= self.person_azimuth_deg[0] <= self.person_azimuth_deg[1] < az_hi:
            raise ValueError("person azimuths must lie inside the azimuth field of view")
        r_lo, r_hi = fov.range_m
        if not r_lo <= self.person_distance_m[0] <= self.person_distance_m[1] < r_hi:
            raise ValueError("person distances must lie inside the range interval")
        if not r_lo <= self.clutter_range_m[0] <= self.clutter_range_m[1] <= r_hi:
            raise ValueError("clutter ranges must lie inside the range interval")
        if self.clutter_rate < 0:
            raise ValueError("clutter_rate must be >= 0")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class _Person:
    x0: float
    y0: float
    vx: float
    vy: float
    first: int
    last: int  # exclusive


def _sequence_persons(cfg: SynthConfig, seq: int) -> list[_Person]:
    rng = np.random.default_rng([cfg.seed, seq, 0])
    n = int(rng.integers(cfg.persons[0], cfg.persons[1] + 1))
    fps = cfg.frames_per_sequence
    out = []
    for _ in range(n):
        dist = rng.uniform(*cfg.person_distance_m)
        az = math.radians(rng.uniform(*cfg.person_azimuth_deg))
        speed = rng.uniform(*cfg.person_speed_mps)
        heading = rng.uniform(0.0, 2.0 * math.pi)
        length = max(1, int(round(fps * rng.uniform(*cfg.visible_fraction))))
        first = int(rng.integers(0, fps - length + 1))
        out.append(_Person(dist * math.cos(az), dist * math.sin(az),
                           speed * math.cos(heading), speed * math.sin(heading),
                           first, first + length))
    return out


def frame_timestamp(cfg: SynthConfig, index: int) -> int:
    seq, k = divmod(index, cfg.frames_per_sequence)
    return _EPOCH_NS + seq * 1_000_000_000_000 + int(round(k * cfg.frame_period_ms * 1e6))


def mask_timestamp(cfg: SynthConfig, index: int) -> int:
    rng = np.random.default_rng([cfg.seed, index, 2])
    jitter = int(rng.integers(-int(cfg.mask_jitter_ms * 1e6), int(cfg.mask_jitter_ms * 1e6) + 1))
    return frame_timestamp(cfg, index) + jitter


def _person_points(cfg: SynthConfig, person: _Person, k: int, rng: np.random.Generator) -> np.ndarray:
    t = k * cfg.frame_period_ms / 1000.0
    center = np.array([person.x0 + person.vx * t, person.y0 + person.vy * t, cfg.person_height_m])
    n = int(rng.integers(cfg.person_points[0], cfg.person_points[1] + 1))
    xyz = center + rng.normal(size=(n, 3)) * np.asarray(cfg.person_std_m)
    radial = float(np.dot([person.vx, person.vy, 0.0], center / np.linalg.norm(center)))
    doppler = radial + rng.normal(scale=cfg.person_doppler_noise, size=n)
    power = rng.uniform(*cfg.person_power, size=n)
    return np.column_stack([xyz, doppler, power])


def _clutter_points(cfg: SynthConfig, fov: FovConfig, rng: np.random.Generator) -> np.ndarray:
    n = int(rng.poisson(cfg.clutter_rate))
    r = rng.uniform(*cfg.clutter_range_m, size=n)
    az = np.radians(rng.uniform(*fov.azimuth_deg, size=n))
    el = np.radians(rng.uniform(*fov.elevation_deg, size=n))
    doppler = rng.normal(scale=cfg.clutter_doppler_std, size=n)
    power = rng.uniform(*cfg.clutter_power, size=n)
    return np.column_stack([
        r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el), doppler, power,
    ])


def ea_mask_from_points(points: np.ndarray, fov: FovConfig) -> np.ndarray:
    """Coarse EA cells hit by ``points``, resized like a heatmap and thresholded at 0.5."""
    spec = fov.view("EA")
    sc = cloud_to_spherical(PointCloud(0, points))
    ri = bin_indices(sc.elevation, spec.vertical.lo, spec.vertical.hi, spec.vertical.coarse_bins)
    ci = bin_indices(sc.azimuth, spec.horizontal.lo, spec.horizontal.hi, spec.horizontal.coarse_bins)
    keep = (ri >= 0) & (ci >= 0)
    coarse = np.zeros(spec.coarse_shape)
    coarse[ri[keep], ci[keep]] = 1.0
    return (resize_linear(coarse, *spec.shape) > 0.5).astype(np.uint8)


def generate_synthetic_scene(cfg: SynthConfig, index: int, fov: FovConfig | None = None) -> tuple[PointCloud, np.ndarray]:
    """Point cloud and 128x128 person mask of frame ``index``."""
    fov = fov or FovConfig()
    seq, k = divmod(index, cfg.frames_per_sequence)
    rng = np.random.default_rng([cfg.seed, index, 1])
    person_parts = [
        _person_points(cfg, p, k, rng) for p in _sequence_persons(cfg, seq) if p.first <= k < p.last
    ]
    persons = np.concatenate(person_parts).astype(np.float32) if person_parts else np.zeros((0, 5), np.float32)
    clutter = _clutter_points(cfg, fov, rng).astype(np.float32)
    cloud = PointCloud(frame_timestamp(cfg, index), np.concatenate([persons, clutter]))
    return cloud, ea_mask_from_points(persons, fov)


def write_synthetic_raw(cfg: SynthConfig, raw_dir: str | Path, fov: FovConfig | None = None) -> list[str]:
    """Write ``cfg.frames`` frames as raw PCD files and mask PNGs; returns sequence names."""
    cfg.validate(fov)
    raw_dir = Path(raw_dir)
    names = []
    for index in range(cfg.frames):
        seq = index // cfg.frames_per_sequence
        name = f"synth_{seq:04d}"
        if not names or names[-1] != name:
            names.append(name)
            (raw_dir / name / "pointclouds").mkdir(parents=True, exist_ok=True)
        cloud, mask = generate_synthetic_scene(cfg, index, fov)
        write_pcd(cloud, raw_dir / name / "pointclouds")
        write_mask(raw_dir / name / "masks" / f"{mask_timestamp(cfg, index)}.png", mask)
    return names


def expected_person_fraction(cfg: SynthConfig, fov: FovConfig | None = None,
                             n_distance: int = 16, n_azimuth: int = 24) -> float:
    """Person-pixel fraction implied by the config, by quadrature instead of sampling.

    Per person, the probability that each coarse EA cell is hit follows from the
    Gaussian angular spread (small-angle approximation) and the point count;
    each output pixel is positive when the bilinear blend of its four source
    cells exceeds 0.5, evaluated over all 16 occupancy patterns assuming
    independent cells. Overlap between persons is ignored.
    """
    fov = fov or FovConfig()
    spec = fov.view("EA")
    el_ax, az_ax = spec.vertical, spec.horizontal
    el_edges = np.linspace(el_ax.lo, el_ax.hi, el_ax.coarse_bins + 1)
    az_edges = np.linspace(az_ax.lo, az_ax.hi, az_ax.coarse_bins + 1)

    def blend(n_src, n_dst):
        pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
        i0 = np.minimum(np.floor(pos).astype(int), n_src - 2)
        return i0, pos - i0

    r0, fr = blend(el_ax.coarse_bins, el_ax.bins)
    c0, fc = blend(az_ax.coarse_bins, az_ax.bins)
    R0, C0 = np.meshgrid(r0, c0, indexing="ij")
    FR, FC = np.meshgrid(fr, fc, indexing="ij")
    corner_w = [(1 - FR) * (1 - FC), (1 - FR) * FC, FR * (1 - FC), FR * FC]
    corner_idx = [(R0, C0), (R0, C0 + 1), (R0 + 1, C0), (R0 + 1, C0 + 1)]

    counts = np.arange(cfg.person_points[0], cfg.person_points[1] + 1)
    _, s_lat, s_vert = cfg.person_std_m
    d_lo, d_hi = cfg.person_distance_m
    d_nodes = d_lo + (np.arange(n_distance) + 0.5) / n_distance * (d_hi - d_lo)
    a_lo, a_hi = np.radians(cfg.person_azimuth_deg)
    a_nodes = a_lo + (np.arange(n_azimuth) + 0.5) / n_azimuth * (a_hi - a_lo)

    pixels = 0.0
    for d in d_nodes:
        el = math.atan2(cfg.person_height_m, d)
        rng_3d = math.hypot(d, cfg.person_height_m)
        p_el = np.diff(ndtr((el_edges - el) / (s_vert / rng_3d)))
        for a in a_nodes:
            p_az = np.diff(ndtr((az_edges - a) / (s_lat / d)))
            p_cell = np.outer(p_el, p_az)
            miss = np.mean((1.0 - p_cell[None]) ** counts[:, None, None], axis=0)
            q = [(1.0 - miss)[idx] for idx in corner_idx]
            prob = np.zeros_like(FR)
            for pattern in range(16):
                bits = [(pattern >> b) & 1 for b in range(4)]
                value = sum(w * b for w, b in zip(corner_w, bits))
                weight = np.ones_like(FR)
                for qi, b in zip(q, bits):
                    weight = weight * (qi if b else 1.0 - qi)
                prob += weight * (value > 0.5)
            pixels += prob.sum()
    pixels /= len(d_nodes) * len(a_nodes)

    fps = cfg.frames_per_sequence
    u = np.linspace(*cfg.visible_fraction, 2001)
    visible = np.mean(np.maximum(1, np.round(fps * u))) / fps
    persons = 0.5 * (cfg.persons[0] + cfg.persons[1])
    return persons * visible * pixels / (el_ax.bins * az_ax.bins)
