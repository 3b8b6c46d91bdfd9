"""Segmentation losses, flip augmentation and IoU/Dice metrics for the EA output view."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .views import VIEW_AXES

CLASS_NAMES = ("background", "person")
LOG_EPS = 1e-7
DICE_EPS = 1e-6


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def _check(P: torch.Tensor, Y: torch.Tensor) -> None:
    if P.shape != Y.shape:
        raise ValueError(f"prediction shape {tuple(P.shape)} != target shape {tuple(Y.shape)}")
    if P.dim() not in (3, 4):
        raise ValueError("expected (K, H, W) or (B, K, H, W) tensors")


def one_hot(labels, n_classes: int = 2) -> torch.Tensor:
    """(..., H, W) integer labels -> (..., K, H, W) float one-hot."""
    lab = _as_tensor(labels).long()
    oh = torch.nn.functional.one_hot(lab, n_classes)
    return oh.movedim(-1, -3).to(torch.get_default_dtype())


def weighted_cross_entropy(P, Y, class_weights: Sequence[float]) -> torch.Tensor:
    """-(1/K) sum_k w_k sum_ij y log p, summed over pixels; batch frames are averaged."""
    P, Y = _as_tensor(P), _as_tensor(Y)
    _check(P, Y)
    k = P.shape[-3]
    w = torch.as_tensor(class_weights, dtype=P.dtype).reshape(k, 1, 1)
    logp = torch.log(P.clamp(LOG_EPS, 1.0))
    per_frame = -(w * Y.to(P.dtype) * logp).sum(dim=(-3, -2, -1)) / k
    return per_frame.mean()


def soft_dice(P, Y, eps: float = DICE_EPS) -> torch.Tensor:
    """Class-averaged 1 - 2 sum(yp) / (sum(y^2) + sum(p^2) + eps); batch frames are averaged."""
    P, Y = _as_tensor(P), _as_tensor(Y)
    _check(P, Y)
    Y = Y.to(P.dtype)
    inter = (Y * P).sum(dim=(-2, -1))
    denom = (Y * Y).sum(dim=(-2, -1)) + (P * P).sum(dim=(-2, -1)) + eps
    per_frame = (1.0 - 2.0 * inter / denom).mean(dim=-1)
    return per_frame.mean()


@dataclass(frozen=True)
class LossWeights:
    wce: float = 1.0
    sdice: float = 10.0


@dataclass
class LossValue:
    total: torch.Tensor
    wce: torch.Tensor
    sdice: torch.Tensor


def combined_loss(P, Y, class_weights: Sequence[float], lambdas: LossWeights = LossWeights()) -> LossValue:
    wce = weighted_cross_entropy(P, Y, class_weights)
    sd = soft_dice(P, Y)
    return LossValue(lambdas.wce * wce + lambdas.sdice * sd, wce, sd)


def flip_window(
    window: Mapping[str, np.ndarray], mask: np.ndarray | None, azimuth: bool, elevation: bool
) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    """Reverse the azimuth and/or elevation axis everywhere it appears.

    View arrays end in (rows, cols); the mask is an EA-shaped (rows, cols) array.
    Range and Doppler axes are never touched.
    """
    flipped_axes = {name for name, on in (("azimuth", azimuth), ("elevation", elevation)) if on}
    out = {}
    for vid, arr in window.items():
        vert, horiz = VIEW_AXES[vid]
        axes = [a for a, name in ((-2, vert), (-1, horiz)) if name in flipped_axes]
        out[vid] = np.ascontiguousarray(np.flip(arr, axis=axes)) if axes else arr
    if mask is not None:
        m_axes = [a for a, name in ((-2, "elevation"), (-1, "azimuth")) if name in flipped_axes]
        if m_axes:
            mask = np.ascontiguousarray(np.flip(mask, axis=m_axes))
    return out, mask


def augment_flip(window, mask, rng: np.random.Generator):
    """Flip azimuth with probability 0.5, then elevation with probability 0.5."""
    az = bool(rng.random() < 0.5)
    el = bool(rng.random() < 0.5)
    w, m = flip_window(window, mask, az, el)
    return w, m, (az, el)


def hard_prediction(P) -> np.ndarray:
    """Per-pixel argmax over the class axis (-3); ties go to the lower class index."""
    arr = P.detach().cpu().numpy() if isinstance(P, torch.Tensor) else np.asarray(P)
    return np.argmax(arr, axis=-3)


@dataclass
class ClassCounts:
    """Pixel counts per class, additive across frames."""

    intersection: np.ndarray
    pred: np.ndarray
    gt: np.ndarray

    @classmethod
    def zeros(cls, n_classes: int = 2) -> "ClassCounts":
        z = np.zeros(n_classes, dtype=np.int64)
        return cls(z.copy(), z.copy(), z.copy())

    def __add__(self, other: "ClassCounts") -> "ClassCounts":
        return ClassCounts(
            self.intersection + other.intersection, self.pred + other.pred, self.gt + other.gt
        )

    @property
    def union(self) -> np.ndarray:
        return self.pred + self.gt - self.intersection

    def iou(self) -> np.ndarray:
        u = self.union
        return np.where(u > 0, self.intersection / np.maximum(u, 1), 1.0)

    def dice(self) -> np.ndarray:
        s = self.pred + self.gt
        return np.where(s > 0, 2 * self.intersection / np.maximum(s, 1), 1.0)

    def to_dict(self) -> dict:
        return {
            "intersection": self.intersection.tolist(),
            "pred": self.pred.tolist(),
            "gt": self.gt.tolist(),
        }


def class_counts(pred: np.ndarray, gt: np.ndarray, n_classes: int = 2) -> ClassCounts:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    inter, p, g = (np.zeros(n_classes, dtype=np.int64) for _ in range(3))
    for c in range(n_classes):
        pc, gc = pred == c, gt == c
        inter[c] = np.count_nonzero(pc & gc)
        p[c] = np.count_nonzero(pc)
        g[c] = np.count_nonzero(gc)
    return ClassCounts(inter, p, g)


def iou_dice(pred: np.ndarray, gt: np.ndarray, n_classes: int = 2) -> dict:
    """Per-class IoU and Dice of hard label maps, plus unweighted class means.

    A class absent from both prediction and ground truth scores 1.0.
    """
    c = class_counts(pred, gt, n_classes)
    iou, dice = c.iou(), c.dice()
    return {"iou": iou, "dice": dice, "mean_iou": float(iou.mean()), "mean_dice": float(dice.mean())}


@dataclass
class MetricsReport:
    """Dataset-aggregated metrics (pixel counts summed over frames, then divided)."""

    counts: ClassCounts
    loss: dict[str, float] = field(default_factory=dict)
    n_frames: int = 0
    per_frame_mean_iou: float = float("nan")
    per_frame_mean_dice: float = float("nan")
    class_names: tuple[str, ...] = CLASS_NAMES

    @property
    def iou(self) -> np.ndarray:
        return self.counts.iou()

    @property
    def dice(self) -> np.ndarray:
        return self.counts.dice()

    @property
    def mean_iou(self) -> float:
        return float(self.iou.mean())

    @property
    def mean_dice(self) -> float:
        return float(self.dice.mean())

    def to_dict(self) -> dict:
        iou, dice = self.iou, self.dice
        return {
            "per_class": {
                name: {"iou": float(iou[i]), "dice": float(dice[i])}
                for i, name in enumerate(self.class_names)
            },
            "mean_iou": self.mean_iou,
            "mean_dice": self.mean_dice,
            "loss": dict(self.loss),
            "n_frames": self.n_frames,
            "per_frame": {"mean_iou": self.per_frame_mean_iou, "mean_dice": self.per_frame_mean_dice},
            "counts": self.counts.to_dict(),
        }
