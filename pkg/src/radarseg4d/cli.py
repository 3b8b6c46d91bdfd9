"""Command-line entry point: ``radarseg4d {synth|compile|stats|train|eval|predict|render}``.

Exit codes: 0 success, 1 internal failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, resolve_network
from .dataset import CompiledDataset, DatasetError, class_stats, compile_dataset, read_mask
from .network import CheckpointError, load_checkpoint
from .pointcloud import PCDParseError
from .projection import normalize
from .render import save_heatmap_png, save_mask_png, save_overlay_png
from .synthetic import write_synthetic_raw
from .trainer import evaluate, evaluate_predictions, predict, train
from .views import VIEW_IDS

log = logging.getLogger("radarseg4d")


class UsageError(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _dataset(path) -> CompiledDataset:
    if path is None:
        raise UsageError("--dataset is required")
    if not Path(path).is_dir():
        raise UsageError(f"dataset directory {path} does not exist")
    return CompiledDataset(path)


def _out_dir(path) -> Path:
    """Check that ``path`` can be created and written before any work starts."""
    if path is None:
        raise UsageError("--out is required")
    out = Path(path)
    parent = next((p for p in [out, *out.parents] if p.exists()), None)
    if parent is None or not parent.is_dir() or not os.access(parent, os.W_OK | os.X_OK):
        raise UsageError(f"output directory {path} is not writable")
    return out


def _model(args, cfg: RunConfig | None):
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    expected = cfg.network if cfg is not None and args.config is not None else None
    return load_checkpoint(args.checkpoint, expected)


def cmd_synth(args) -> int:
    cfg = RunConfig.load(args.config)
    synth = cfg.synth
    if args.frames is not None:
        synth = replace(synth, frames=args.frames)
    if args.seed is not None:
        synth = replace(synth, seed=args.seed)
    synth.validate(cfg.fov)
    _out_dir(args.out)
    if args.raw_out:
        _out_dir(args.raw_out)
    ds_cfg = replace(cfg.dataset, synth=synth.to_dict())
    with tempfile.TemporaryDirectory() as tmp:
        raw = Path(args.raw_out) if args.raw_out else Path(tmp) / "raw"
        write_synthetic_raw(synth, raw, cfg.fov)
        summary = compile_dataset(raw, args.out, ds_cfg)
    ds = CompiledDataset(args.out)
    masks = [m for split in ds.splits for m in ds.split_masks(split)]
    check = class_stats(masks)
    print(_dump({
        "frames": summary.n_frames,
        "sequences": len(summary.sequences),
        "dropped_sequences": summary.dropped_sequences,
        "person_pixel_fraction": check.person_fraction,
        "nonempty_mask_fraction": check.nonempty_fraction,
    }))
    return 0


def cmd_compile(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.raw is None or not Path(args.raw).is_dir():
        raise UsageError("--raw must name an existing directory")
    _out_dir(args.out)
    summary = compile_dataset(args.raw, args.out, cfg.dataset)
    print(_dump({
        "frames": summary.n_frames,
        "sequences": summary.sequences,
        "dropped_sequences": summary.dropped_sequences,
        "unpaired_clouds": summary.unpaired,
        "failures": [{"file": f, "error": e} for f, e in summary.failures],
        "person_pixel_fraction": summary.stats.person_fraction,
    }))
    return 0


def cmd_stats(args) -> int:
    ds = _dataset(args.dataset)
    print(_dump({
        "norm": ds.norm.to_dict(),
        "classes": ds.stats.to_dict(),
        "splits": {s: len(names) for s, names in ds.splits.items()},
        "frames": sum(len(f) for f in ds.frames.values()),
    }))
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    ds = _dataset(args.dataset)
    _out_dir(args.out)
    net = resolve_network(args.network) if args.network else cfg.network
    hp = cfg.hyperparams
    if args.seed is not None:
        hp = replace(hp, seed=args.seed)
    if args.epochs is not None:
        hp = replace(hp, epochs=args.epochs)
    if hp.n_frames != net.window:
        hp = replace(hp, n_frames=net.window)
    t0 = time.perf_counter()
    result = train(ds, net, hp, args.out)
    print(f"training took {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    print(_dump({
        "best_checkpoint": str(result.best_checkpoint),
        "best_val_mean_dice": result.best_mean_dice,
        "best_eval": result.best_eval,
        "evaluations": len(result.evals),
        "log": str(result.log_path),
    }))
    return 0


def cmd_eval(args) -> int:
    ds = _dataset(args.dataset)
    if args.predictions:
        window = 5
        if args.checkpoint:
            window = _model(args, RunConfig.load(args.config)).cfg.window
        report = evaluate_predictions(ds, args.split, args.predictions, n_frames=window)
    else:
        cfg = RunConfig.load(args.config) if args.config else None
        model = _model(args, cfg)
        t0 = time.perf_counter()
        report, _ = evaluate(model, ds, args.split)
        if report.n_frames:
            per = (time.perf_counter() - t0) / report.n_frames
            print(f"{report.n_frames} windows, {1000 * per:.1f} ms per window", file=sys.stderr)
    text = _dump(report.to_dict())
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_predict(args) -> int:
    ds = _dataset(args.dataset)
    _out_dir(args.out)
    model = _model(args, RunConfig.load(args.config) if args.config else None)
    paths = predict(model, ds, args.split, args.out, frame=args.frame)
    print(_dump({"written": len(paths), "out": str(args.out)}))
    return 0


def cmd_render(args) -> int:
    ds = _dataset(args.dataset)
    if args.frame is None:
        raise UsageError("--frame is required")
    _out_dir(args.out)
    seq, _, fid = args.frame.partition("/")
    if seq not in ds.frames or fid not in ds.frame_ids(seq):
        raise UsageError(f"unknown frame {args.frame}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{seq}_{fid}"
    written = []
    for vid in VIEW_IDS:
        h = normalize(ds.load_heatmap(seq, fid, vid), ds.norm[vid])
        path = out / f"{stem}_{vid.lower()}.png"
        save_heatmap_png(path, h, vid, args.colormap, args.scale)
        written.append(path)
    gt = out / f"{stem}_gt.png"
    save_mask_png(gt, ds.load_mask(seq, fid), args.scale)
    written.append(gt)
    if args.overlay:
        ov = out / f"{stem}_overlay.png"
        ea = normalize(ds.load_heatmap(seq, fid, "EA"), ds.norm["EA"])
        save_overlay_png(ov, ea, ds.load_mask(seq, fid), args.colormap, args.scale)
        written.append(ov)
    if args.checkpoint:
        model = _model(args, RunConfig.load(args.config) if args.config else None)
        with tempfile.TemporaryDirectory() as tmp:
            (path,) = predict(model, ds, "", tmp, frame=args.frame)
            pred = out / f"{stem}_pred.png"
            save_mask_png(pred, read_mask(path), args.scale)
            written.append(pred)
    print(_dump({"written": [str(p) for p in written]}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="radarseg4d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--out")
        if dataset:
            sp.add_argument("--dataset")

    sp = sub.add_parser("synth", help="generate and compile a synthetic dataset")
    common(sp, dataset=False)
    sp.add_argument("--frames", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--raw-out", help="keep the raw PCD/mask files here")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("compile", help="compile raw PCD files and masks")
    common(sp, dataset=False)
    sp.add_argument("--raw")
    sp.set_defaults(func=cmd_compile)

    sp = sub.add_parser("stats", help="print dataset statistics")
    common(sp)
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("train", help="train TMVA4D")
    common(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--network", help="network preset (reference, tiny, gradcheck)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint or exported predictions")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", default="test")
    sp.add_argument("--predictions", help="directory of predicted PNG masks")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="write predicted masks as PNG")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", default="test")
    sp.add_argument("--frame", help="single frame as <sequence>/<frame_id>")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("render", help="render heatmaps and masks of one frame")
    common(sp)
    sp.add_argument("--frame")
    sp.add_argument("--checkpoint")
    sp.add_argument("--colormap", default="viridis")
    sp.add_argument("--scale", type=int, default=1)
    sp.add_argument("--overlay", action="store_true",
                    help="also write the ground-truth mask over the EA heatmap")
    sp.set_defaults(func=cmd_render)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DatasetError, CheckpointError, PCDParseError, OSError, ValueError) as exc:
        print(f"radarseg4d {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal failure")
        print(f"radarseg4d {args.command}: internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
