"""PNG rendering of heatmaps (viridis) and masks (black background, red person)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .views import VIEW_AXES

PERSON_RGB = (255, 0, 0)


def display_orientation(matrix: np.ndarray, view_id: str) -> np.ndarray:
    """Put high elevation/range/Doppler at the top and positive (left) azimuth on the left."""
    out = np.flipud(matrix)
    if VIEW_AXES[view_id][1] == "azimuth":
        out = np.fliplr(out)
    return np.ascontiguousarray(out)


def colorize(values: np.ndarray, cmap: str = "viridis") -> np.ndarray:
    """Values in [0, 1] -> uint8 RGB through a 256-entry colormap lookup."""
    lut = (colormaps[cmap](np.linspace(0.0, 1.0, 256))[:, :3] * 255).round().astype(np.uint8)
    idx = np.clip(np.round(np.asarray(values, dtype=np.float64) * 255), 0, 255).astype(np.int64)
    return lut[idx]


def mask_rgb(mask: np.ndarray) -> np.ndarray:
    rgb = np.zeros((*mask.shape, 3), dtype=np.uint8)
    rgb[np.asarray(mask) > 0] = PERSON_RGB
    return rgb


def _upscale(rgb: np.ndarray, scale: int) -> np.ndarray:
    if scale == 1:
        return rgb
    return rgb.repeat(scale, axis=0).repeat(scale, axis=1)


def save_heatmap_png(path: Path, normalized: np.ndarray, view_id: str,
                     cmap: str = "viridis", scale: int = 1) -> None:
    rgb = colorize(display_orientation(normalized, view_id), cmap)
    Image.fromarray(_upscale(rgb, scale), mode="RGB").save(path)


def save_mask_png(path: Path, mask: np.ndarray, scale: int = 1) -> None:
    rgb = mask_rgb(display_orientation(mask, "EA"))
    Image.fromarray(_upscale(rgb, scale), mode="RGB").save(path)


def save_overlay_png(path: Path, normalized_ea: np.ndarray, mask: np.ndarray,
                     cmap: str = "viridis", scale: int = 1, alpha: float = 0.5) -> None:
    """EA heatmap with person pixels blended towards red."""
    rgb = colorize(display_orientation(normalized_ea, "EA"), cmap).astype(np.float64)
    person = display_orientation(np.asarray(mask) > 0, "EA")
    rgb[person] = (1 - alpha) * rgb[person] + alpha * np.array(PERSON_RGB, dtype=np.float64)
    Image.fromarray(_upscale(rgb.round().astype(np.uint8), scale), mode="RGB").save(path)
