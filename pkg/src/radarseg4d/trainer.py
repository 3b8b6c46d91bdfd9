"""Training loop: Adam with stepped LR decay, flip augmentation, best-val-mDice checkpointing."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .dataset import CompiledDataset, DatasetError, class_weights, read_mask, write_mask
from .losses import (
    ClassCounts,
    LossWeights,
    MetricsReport,
    augment_flip,
    class_counts,
    combined_loss,
    hard_prediction,
    one_hot,
)
from .network import NetworkConfig, TMVA4D, save_checkpoint, to_tensors
from .views import VIEW_IDS

log = logging.getLogger(__name__)


@dataclass
class Hyperparams:
    n_frames: int = 5
    batch_size: int = 6
    learning_rate: float = 1e-4
    lr_step_epochs: int = 2
    epochs: int = 24
    gamma: float = 0.9
    eval_every_steps: int | None = None  # None: once per epoch
    augment: bool = True
    val_split: str = "val"
    seed: int = 0
    loss_wce: float = 1.0
    loss_sdice: float = 10.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Hyperparams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyperparameter keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def lr_schedule(epoch: int, base: float = 1e-4, gamma: float = 0.9, step: int = 2) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base * gamma ** (epoch // step)


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@torch.no_grad()
def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: AdamState,
    lr: float,
) -> None:
    """Bias-corrected Adam update, applied in place."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name!r}")
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))


def _batch(dataset: CompiledDataset, items, n_frames: int, rng: np.random.Generator | None):
    views = {v: [] for v in VIEW_IDS}
    masks = []
    for seq, t in items:
        window, mask = dataset.load_window(seq, t, n_frames)
        if rng is not None:
            window, mask, _ = augment_flip(window, mask, rng)
        for v in VIEW_IDS:
            views[v].append(window[v])
        masks.append(mask)
    return to_tensors({v: np.stack(a) for v, a in views.items()}), np.stack(masks)


def split_class_weights(dataset: CompiledDataset, split: str = "train") -> list[float]:
    masks = dataset.split_masks(split) if dataset.sequences(split) else []
    if not masks:
        return list(dataset.stats.class_weights["EA"])
    return class_weights(masks)


@dataclass
class FrameResult:
    sequence: str
    frame_id: str
    counts: ClassCounts
    prediction: np.ndarray | None = None


@torch.no_grad()
def evaluate(
    model: TMVA4D,
    dataset: CompiledDataset,
    split: str,
    weights: list[float] | None = None,
    batch_size: int = 6,
    keep_frames: bool = False,
) -> tuple[MetricsReport, list[FrameResult]]:
    """Metrics over every window of ``split``; parameters are left untouched."""
    missing = dataset.missing_files(split)
    if missing:
        raise FileNotFoundError(f"missing files for frames: {', '.join(missing)}")
    n_frames = model.cfg.window
    items = dataset.windows(split, n_frames)
    weights = weights or split_class_weights(dataset)
    was_training = model.training
    model.eval()
    total = ClassCounts.zeros(model.cfg.n_classes)
    frames: list[FrameResult] = []
    loss_sums = np.zeros(3)
    per_frame_iou, per_frame_dice = [], []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        views, masks = _batch(dataset, chunk, n_frames, None)
        probs = model.predict_proba(views)
        target = one_hot(masks, model.cfg.n_classes)
        for i, (seq, t) in enumerate(chunk):
            lv = combined_loss(probs[i], target[i], weights)
            loss_sums += [lv.total.item(), lv.wce.item(), lv.sdice.item()]
        preds = hard_prediction(probs)
        for i, (seq, t) in enumerate(chunk):
            c = class_counts(preds[i], masks[i], model.cfg.n_classes)
            total = total + c
            per_frame_iou.append(c.iou().mean())
            per_frame_dice.append(c.dice().mean())
            frames.append(FrameResult(seq, dataset.frame_ids(seq)[t], c,
                                      preds[i].astype(np.uint8) if keep_frames else None))
    model.train(was_training)
    n = len(items)
    loss = dict(zip(("total", "wce", "sdice"), (loss_sums / max(n, 1)).tolist()))
    report = MetricsReport(
        total, loss, n,
        float(np.mean(per_frame_iou)) if n else float("nan"),
        float(np.mean(per_frame_dice)) if n else float("nan"),
    )
    return report, frames


def evaluate_predictions(dataset: CompiledDataset, split: str, pred_dir: str | Path,
                         n_frames: int = 5, n_classes: int = 2) -> MetricsReport:
    """Metrics from exported prediction PNGs (``<pred_dir>/<sequence>/<frame_id>.png``)."""
    pred_dir = Path(pred_dir)
    total = ClassCounts.zeros(n_classes)
    ious, dices = [], []
    items = dataset.windows(split, n_frames)
    for seq, t in items:
        fid = dataset.frame_ids(seq)[t]
        path = pred_dir / seq / f"{fid}.png"
        if not path.is_file():
            raise FileNotFoundError(f"missing prediction {path}")
        c = class_counts(read_mask(path), dataset.load_mask(seq, fid), n_classes)
        total = total + c
        ious.append(c.iou().mean())
        dices.append(c.dice().mean())
    n = len(items)
    return MetricsReport(total, {}, n, float(np.mean(ious)) if n else float("nan"),
                         float(np.mean(dices)) if n else float("nan"))


def predict(model: TMVA4D, dataset: CompiledDataset, split: str, out_dir: str | Path,
            frame: str | None = None) -> list[Path]:
    """Write hard predictions as 0/255 PNG masks for a split, or one ``sequence/frame_id``."""
    out_dir = Path(out_dir)
    n_frames = model.cfg.window
    if frame is not None:
        seq, fid = frame.split("/", 1)
        if seq not in dataset.frames or fid not in dataset.frame_ids(seq):
            raise DatasetError(f"unknown frame {frame}")
        t = dataset.frame_ids(seq).index(fid)
        if t < n_frames - 1:
            raise DatasetError(f"frame {frame} has fewer than {n_frames - 1} predecessors")
        items = [(seq, t)]
    else:
        items = dataset.windows(split, n_frames)
    paths = []
    model.eval()
    with torch.no_grad():
        for seq, t in items:
            window, _ = dataset.load_window(seq, t, n_frames)
            pred = hard_prediction(model.predict_proba(to_tensors(window)))[0]
            path = out_dir / seq / f"{dataset.frame_ids(seq)[t]}.png"
            write_mask(path, pred)
            paths.append(path)
    return paths


@dataclass
class TrainResult:
    best_checkpoint: Path
    best_mean_dice: float
    best_eval: int | None
    log_path: Path
    evals: list[dict]


def train(
    dataset: CompiledDataset,
    net_cfg: NetworkConfig,
    hp: Hyperparams,
    out_dir: str | Path,
) -> TrainResult:
    """Train from scratch; keep the checkpoint with the highest validation mDice.

    Writes ``train_log.jsonl``, ``best.ckpt`` and ``last.ckpt`` into ``out_dir``.
    """
    if hp.n_frames != net_cfg.window:
        raise ValueError(f"n_frames {hp.n_frames} != network window {net_cfg.window}")
    train_items = dataset.windows("train", hp.n_frames)
    val_items = dataset.windows(hp.val_split, hp.n_frames)
    if len(train_items) < hp.batch_size:
        raise DatasetError(f"train split has {len(train_items)} windows, fewer than batch size {hp.batch_size}")
    if not val_items:
        raise DatasetError(f"{hp.val_split} split has no windows")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    best_path = out / "best.ckpt"

    torch.manual_seed(hp.seed)
    model = TMVA4D(net_cfg, seed=hp.seed)
    weights = split_class_weights(dataset, "train")
    lambdas = LossWeights(hp.loss_wce, hp.loss_sdice)
    state = AdamState(beta1=hp.adam_betas[0], beta2=hp.adam_betas[1], eps=hp.adam_eps)
    params = dict(model.named_parameters())
    rng = np.random.default_rng(hp.seed)
    save_checkpoint(model, best_path)

    evals: list[dict] = []
    best = (-1.0, None)
    step = 0
    n_batches = len(train_items) // hp.batch_size
    t0 = time.perf_counter()

    def run_eval(epoch: int) -> None:
        nonlocal best
        report, _ = evaluate(model, dataset, hp.val_split, weights, hp.batch_size)
        d = report.to_dict()
        rec = {"eval": len(evals), "epoch": epoch, "step": step, "mean_iou": d["mean_iou"],
               "mean_dice": d["mean_dice"], "per_class": d["per_class"], "loss": d["loss"]}
        evals.append(rec)
        logf.write(json.dumps(rec, sort_keys=True) + "\n")
        if report.mean_dice > best[0]:
            best = (report.mean_dice, rec["eval"])
            save_checkpoint(model, best_path)

    with open(log_path, "w") as logf:
        for epoch in range(hp.epochs):
            lr = lr_schedule(epoch, hp.learning_rate, hp.gamma, hp.lr_step_epochs)
            order = rng.permutation(len(train_items))
            for b in range(n_batches):
                chunk = [train_items[i] for i in order[b * hp.batch_size:(b + 1) * hp.batch_size]]
                views, masks = _batch(dataset, chunk, hp.n_frames, rng if hp.augment else None)
                model.zero_grad(set_to_none=False)
                probs = model.predict_proba(views)
                lv = combined_loss(probs, one_hot(masks, net_cfg.n_classes), weights, lambdas)
                lv.total.backward()
                adam_step(params, {n: p.grad for n, p in params.items()}, state, lr)
                step += 1
                logf.write(json.dumps({"step": step, "epoch": epoch, "lr": lr,
                                       "loss_total": lv.total.item(), "loss_wce": lv.wce.item(),
                                       "loss_sdice": lv.sdice.item()}, sort_keys=True) + "\n")
                if hp.eval_every_steps and step % hp.eval_every_steps == 0:
                    run_eval(epoch)
            if not hp.eval_every_steps:
                run_eval(epoch)
            log.info("epoch %d done (%.1fs), lr=%.3g", epoch, time.perf_counter() - t0, lr)
    save_checkpoint(model, out / "last.ckpt")
    return TrainResult(best_path, best[0], best[1], log_path, evals)
