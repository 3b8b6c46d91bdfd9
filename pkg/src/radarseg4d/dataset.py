"""Dataset compilation, pairing, splits, class statistics and loading.

Raw input layout::

    raw/<sequence>/pointclouds/<timestamp_ns>.pcd
    raw/<sequence>/masks/<timestamp_ns>.png

Compiled layout::

    dataset/<sequence>/{ea,er,ed,ra,da}/<frame_id>.bin  (+ .json sidecars)
    dataset/<sequence>/annotations/<frame_id>.png
    dataset/<sequence>/frames.json
    dataset/stats.json, dataset/splits.json, dataset/config.json
"""

from __future__ import annotations

import bisect
import json
import logging
import shutil
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence, TypeVar

import numpy as np
from PIL import Image

from .pointcloud import PCDParseError, read_pcd
from .projection import (
    NormStats,
    StatsAccumulator,
    normalize,
    project_frame,
    read_heatmap,
    write_heatmap,
)
from .views import VIEW_IDS, FovConfig

log = logging.getLogger(__name__)

MASK_SHAPE = (128, 128)
SPLITS = ("train", "val", "test")

T = TypeVar("T")
U = TypeVar("U")


class DatasetError(ValueError):
    pass


# masks ---------------------------------------------------------------------

def write_mask(path: Path, mask: np.ndarray) -> None:
    """8-bit grayscale PNG: 0 = background, 255 = person."""
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L")
    img.save(path, format="PNG", optimize=False)


def read_mask(path: Path, shape: tuple[int, int] = MASK_SHAPE) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    if arr.shape != tuple(shape):
        raise DatasetError(f"{path}: mask must be {shape[0]}x{shape[1]}, got {arr.shape[0]}x{arr.shape[1]}")
    return (arr >= 128).astype(np.uint8)


# pairing and splitting -------------------------------------------------------

def pair_annotations(
    clouds: Sequence[tuple[int, T]],
    masks: Sequence[tuple[int, U]],
    threshold_ns: int | None = 100_000_000,
) -> list[tuple[T, U]]:
    """Pair each cloud with the temporally closest mask (ties go to the earlier mask).

    Both inputs are ``(timestamp_ns, item)`` sorted by timestamp. Pairs whose
    gap exceeds ``threshold_ns`` are dropped with a warning.
    """
    if not masks:
        return []
    mask_ts = [t for t, _ in masks]
    out = []
    for ts, cloud in clouds:
        i = bisect.bisect_left(mask_ts, ts)
        best = None
        for j in (i - 1, i):
            if 0 <= j < len(masks):
                d = abs(mask_ts[j] - ts)
                if best is None or d < best[0]:
                    best = (d, j)
        gap, j = best
        if threshold_ns is not None and gap > threshold_ns:
            log.warning("dropping cloud %d: nearest mask is %.1f ms away", ts, gap / 1e6)
            continue
        out.append((cloud, masks[j][1]))
    return out


def _allocate(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder allocation; every nonzero ratio gets at least one item."""
    exact = [r * n for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    for i, r in enumerate(ratios):
        if r > 0 and counts[i] == 0:
            donor = max(range(len(counts)), key=lambda k: (counts[k], -k))
            counts[donor] -= 1
            counts[i] += 1
    return counts


def split_sequences(
    names: Iterable[str], ratios: Sequence[float] = (0.7, 0.15, 0.15), seed: int = 0
) -> dict[str, str]:
    """Assign whole sequences to train/val/test, deterministically in ``seed``."""
    names = sorted(names)
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != len(SPLITS) or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    needed = sum(r > 0 for r in ratios)
    if len(names) < needed:
        raise ValueError(f"{len(names)} sequences cannot fill {needed} non-empty splits")
    perm = np.random.default_rng(seed).permutation(len(names))
    counts = _allocate(len(names), ratios)
    out, start = {}, 0
    for split, c in zip(SPLITS, counts):
        for idx in perm[start:start + c]:
            out[names[idx]] = split
        start += c
    return out


# statistics --------------------------------------------------------------------

@dataclass
class DatasetStats:
    person_fraction: float
    nonempty_fraction: float
    n_masks: int
    class_weights: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetStats":
        return cls(**d)


def class_weights(masks: Iterable[np.ndarray], n_classes: int = 2) -> list[float]:
    """w_k = 1 - (fraction of mask elements belonging to class k)."""
    counts = np.zeros(n_classes, dtype=np.int64)
    total = 0
    for m in masks:
        m = np.asarray(m)
        counts += np.bincount(m.ravel().astype(np.int64), minlength=n_classes)[:n_classes]
        total += m.size
    if total == 0:
        raise ValueError("class_weights needs at least one mask")
    return [1.0 - c / total for c in counts.tolist()]


def class_stats(masks: Iterable[np.ndarray]) -> DatasetStats:
    person = total = nonempty = n = 0
    for m in masks:
        m = np.asarray(m)
        k = int(np.count_nonzero(m))
        person += k
        total += m.size
        nonempty += k > 0
        n += 1
    if n == 0:
        raise ValueError("class_stats needs at least one mask")
    weights = [1.0 - (total - person) / total, 1.0 - person / total]
    return DatasetStats(person / total, nonempty / n, n, {"EA": weights})


# compilation -------------------------------------------------------------------

@dataclass
class DatasetConfig:
    fov: FovConfig = field(default_factory=FovConfig)
    pairing_threshold_ms: float = 100.0
    split_ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    split_seed: int = 0
    max_sequence_frames: int | None = None
    drop_empty_sequences: bool = True
    synth: dict[str, Any] | None = None

    def to_dict(self) -> dict:
        return {
            "fov": self.fov.to_dict(),
            "pairing_threshold_ms": self.pairing_threshold_ms,
            "split_ratios": list(self.split_ratios),
            "split_seed": self.split_seed,
            "max_sequence_frames": self.max_sequence_frames,
            "drop_empty_sequences": self.drop_empty_sequences,
            "synth": self.synth,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dataset keys: {sorted(unknown)}")
        kw = dict(d)
        if "fov" in kw:
            kw["fov"] = FovConfig.from_dict(kw["fov"])
        if "split_ratios" in kw:
            kw["split_ratios"] = tuple(kw["split_ratios"])
        return cls(**kw)


@dataclass
class CompileSummary:
    sequences: list[str]
    n_frames: int
    failures: list[tuple[str, str]]
    dropped_sequences: list[str]
    unpaired: int
    stats: DatasetStats
    norm: NormStats


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare_out(out: Path) -> None:
    if out.exists():
        if any(out.iterdir()) and not (out / "config.json").exists():
            raise DatasetError(f"{out} is not empty and is not a compiled dataset")
        shutil.rmtree(out)
    out.mkdir(parents=True)


def _load_raw_sequence(seq_dir: Path, failures: list) -> tuple[list, list]:
    clouds, masks = [], []
    pcd_dir, mask_dir = seq_dir / "pointclouds", seq_dir / "masks"
    for p in sorted(pcd_dir.glob("*.pcd")) if pcd_dir.is_dir() else []:
        try:
            c = read_pcd(p)
        except (PCDParseError, ValueError, OSError) as exc:
            failures.append((str(p), str(exc)))
            continue
        clouds.append((c.timestamp, c))
    if not mask_dir.is_dir():
        failures.append((str(mask_dir), "missing masks directory"))
        return sorted(clouds, key=lambda t: t[0]), []
    for p in sorted(mask_dir.glob("*.png")):
        try:
            if not p.stem.isdigit():
                raise DatasetError(f"mask filename must be <nanoseconds>.png, got {p.name}")
            masks.append((int(p.stem), (int(p.stem), read_mask(p))))
        except (DatasetError, OSError) as exc:
            failures.append((str(p), str(exc)))
    return sorted(clouds, key=lambda t: t[0]), sorted(masks, key=lambda t: t[0])


def compile_dataset(raw_dir: str | Path, out_dir: str | Path, config: DatasetConfig | None = None) -> CompileSummary:
    """Compile raw PCD files and masks into the on-disk training layout.

    Unreadable files are recorded in ``failures`` and skipped. Re-running on
    identical inputs produces identical bytes.
    """
    config = config or DatasetConfig()
    raw_dir, out = Path(raw_dir), Path(out_dir)
    seq_dirs = sorted(p for p in raw_dir.iterdir() if p.is_dir()) if raw_dir.is_dir() else []
    if not seq_dirs:
        raise DatasetError(f"no sequences in {raw_dir}")
    threshold = None if config.pairing_threshold_ms is None else int(round(config.pairing_threshold_ms * 1e6))

    failures: list[tuple[str, str]] = []
    chunks: list[tuple[str, list]] = []
    unpaired = 0
    for seq_dir in seq_dirs:
        clouds, masks = _load_raw_sequence(seq_dir, failures)
        pairs = pair_annotations(clouds, masks, threshold)
        unpaired += len(clouds) - len(pairs) if masks else 0
        if not pairs:
            continue
        size = config.max_sequence_frames or len(pairs)
        parts = [pairs[i:i + size] for i in range(0, len(pairs), size)]
        for k, part in enumerate(parts):
            name = seq_dir.name if len(parts) == 1 else f"{seq_dir.name}_{k:03d}"
            chunks.append((name, part))

    dropped = []
    if config.drop_empty_sequences:
        kept = []
        for name, part in chunks:
            if any(m.any() for _, (_, m) in part):
                kept.append((name, part))
            else:
                dropped.append(name)
        chunks = kept
    if not chunks:
        raise DatasetError("no sequences with paired frames")

    splits = split_sequences([n for n, _ in chunks], config.split_ratios, config.split_seed)
    _prepare_out(out)
    acc = StatsAccumulator()
    all_masks = []
    n_frames = 0
    for name, part in chunks:
        seq_out = out / name
        index = []
        for i, (cloud, (mask_ts, mask)) in enumerate(part):
            frame_id = f"{i:06d}"
            heatmaps = project_frame(cloud, config.fov, frame_id)
            for vid, h in heatmaps.items():
                write_heatmap(seq_out / vid.lower(), h, cloud.timestamp)
                acc.update(vid, h.matrix)
            write_mask(seq_out / "annotations" / f"{frame_id}.png", mask)
            all_masks.append(mask)
            index.append({"frame_id": frame_id, "cloud_timestamp_ns": cloud.timestamp,
                          "mask_timestamp_ns": mask_ts})
            n_frames += 1
        _write_json(seq_out / "frames.json", index)

    norm = acc.result()
    stats = class_stats(all_masks)
    _write_json(out / "stats.json", {"norm": norm.to_dict(), "classes": stats.to_dict()})
    by_split = {s: sorted(n for n, sp in splits.items() if sp == s) for s in SPLITS}
    _write_json(out / "splits.json", by_split)
    _write_json(out / "config.json", config.to_dict())
    for f, msg in failures:
        log.warning("skipped %s: %s", f, msg)
    return CompileSummary([n for n, _ in chunks], n_frames, failures, dropped, unpaired, stats, norm)


# loading -----------------------------------------------------------------------

class CompiledDataset:
    """Read-only access to a compiled dataset directory."""

    def __init__(self, root: str | Path, cache_frames: int = 512):
        self.root = Path(root)
        if not (self.root / "config.json").is_file():
            raise DatasetError(f"{self.root} is not a compiled dataset (no config.json)")
        self.config = DatasetConfig.from_dict(json.loads((self.root / "config.json").read_text()))
        stats = json.loads((self.root / "stats.json").read_text())
        self.norm = NormStats.from_dict(stats["norm"])
        self.stats = DatasetStats.from_dict(stats["classes"])
        self.splits: dict[str, list[str]] = json.loads((self.root / "splits.json").read_text())
        self.view_shapes = {vid: spec.shape for vid, spec in self.config.fov.views().items()}
        self.frames: dict[str, list[dict]] = {}
        for names in self.splits.values():
            for name in names:
                self.frames[name] = json.loads((self.root / name / "frames.json").read_text())
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_frames

    def sequences(self, split: str) -> list[str]:
        if split not in self.splits:
            raise DatasetError(f"unknown split {split!r}")
        return list(self.splits[split])

    def frame_ids(self, seq: str) -> list[str]:
        return [f["frame_id"] for f in self.frames[seq]]

    def heatmap_path(self, seq: str, frame_id: str, view: str) -> Path:
        return self.root / seq / view.lower() / f"{frame_id}.bin"

    def mask_path(self, seq: str, frame_id: str) -> Path:
        return self.root / seq / "annotations" / f"{frame_id}.png"

    def load_heatmap(self, seq: str, frame_id: str, view: str) -> np.ndarray:
        return read_heatmap(self.heatmap_path(seq, frame_id, view), self.view_shapes[view])

    def load_mask(self, seq: str, frame_id: str) -> np.ndarray:
        return read_mask(self.mask_path(seq, frame_id), self.view_shapes["EA"])

    def _normalized(self, seq: str, frame_id: str) -> dict[str, np.ndarray]:
        key = (seq, frame_id)
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        frame = {v: normalize(self.load_heatmap(seq, frame_id, v), self.norm[v]) for v in VIEW_IDS}
        self._cache[key] = frame
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return frame

    def windows(self, split: str, n_frames: int = 5) -> list[tuple[str, int]]:
        """Every (sequence, t) with a full history of ``n_frames`` frames."""
        return [
            (seq, t)
            for seq in self.sequences(split)
            for t in range(n_frames - 1, len(self.frames[seq]))
        ]

    def load_window(self, seq: str, t: int, n_frames: int = 5) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Normalized frames t-n+1..t stacked per view as (n, rows, cols), plus the mask at t."""
        ids = self.frame_ids(seq)
        if not (n_frames - 1 <= t < len(ids)):
            raise IndexError(f"window end {t} out of range for {seq} ({len(ids)} frames, window {n_frames})")
        frames = [self._normalized(seq, ids[k]) for k in range(t - n_frames + 1, t + 1)]
        stacked = {v: np.stack([f[v] for f in frames]) for v in VIEW_IDS}
        return stacked, self.load_mask(seq, ids[t])

    def missing_files(self, split: str) -> list[str]:
        missing = []
        for seq in self.sequences(split):
            for fid in self.frame_ids(seq):
                paths = [self.heatmap_path(seq, fid, v) for v in VIEW_IDS] + [self.mask_path(seq, fid)]
                if not all(p.is_file() for p in paths):
                    missing.append(f"{seq}/{fid}")
        return missing

    def split_masks(self, split: str) -> list[np.ndarray]:
        return [self.load_mask(seq, fid) for seq in self.sequences(split) for fid in self.frame_ids(seq)]
