import json
import shutil

import numpy as np
import pytest
import torch

from radarseg4d.dataset import CompiledDataset, DatasetConfig, DatasetError, compile_dataset
from radarseg4d.network import NetworkConfig, TMVA4D, load_checkpoint, save_checkpoint
from radarseg4d.synthetic import SynthConfig, write_synthetic_raw
from radarseg4d.trainer import (
    AdamState,
    Hyperparams,
    adam_step,
    evaluate,
    evaluate_predictions,
    lr_schedule,
    predict,
    train,
)


def test_lr_schedule_values():
    assert lr_schedule(0) == 1e-4
    assert lr_schedule(1) == 1e-4
    assert lr_schedule(2) == 9e-5
    assert lr_schedule(4) == 8.1e-5
    assert lr_schedule(23) == 1e-4 * 0.9 ** 11
    assert lr_schedule(23) == pytest.approx(3.138e-5, rel=1e-3)
    with pytest.raises(ValueError):
        lr_schedule(-1)


def test_adam_zero_gradient_first_step():
    p = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
    adam_step(p, {"w": torch.zeros(2, dtype=torch.float64)}, AdamState(), lr=0.1)
    assert p["w"].tolist() == [1.0, -2.0]


@pytest.mark.parametrize("g", [0.5, -3.0, 1e-3])
def test_adam_first_step_magnitude(g):
    p = {"w": torch.tensor([0.0], dtype=torch.float64)}
    adam_step(p, {"w": torch.tensor([g], dtype=torch.float64)}, AdamState(), lr=0.01)
    # bias-corrected m/sqrt(v) is sign(g), up to eps
    assert p["w"].item() == pytest.approx(-0.01 * np.sign(g), rel=1e-5)


def test_adam_matches_handwritten_recurrence():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((6, 3))
    p = {"w": torch.zeros(3, dtype=torch.float64)}
    state = AdamState()
    m = v = np.zeros(3)
    w = np.zeros(3)
    for t, g in enumerate(grads, start=1):
        adam_step(p, {"w": torch.as_tensor(g)}, state, lr=0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"].numpy(), w, rtol=1e-12)


def test_adam_deterministic_ten_steps():
    def run():
        torch.manual_seed(0)
        p = {"w": torch.randn(5, 5)}
        state = AdamState()
        gen = torch.Generator().manual_seed(1)
        for _ in range(10):
            adam_step(p, {"w": torch.randn(5, 5, generator=gen)}, state, lr=1e-3)
        return p["w"]
    assert torch.equal(run(), run())


def test_adam_nan_names_parameter():
    p = {"enc.w": torch.zeros(2)}
    with pytest.raises(FloatingPointError, match="enc.w"):
        adam_step(p, {"enc.w": torch.tensor([0.0, float("nan")])}, AdamState(), lr=1e-3)


def test_zero_epochs_returns_init(small_dataset, tmp_path):
    cfg = NetworkConfig.tiny()
    result = train(small_dataset, cfg, Hyperparams(epochs=0, seed=2), tmp_path / "run")
    save_checkpoint(TMVA4D(cfg, seed=2), tmp_path / "init.ckpt")
    assert result.best_checkpoint.read_bytes() == (tmp_path / "init.ckpt").read_bytes()
    assert result.log_path.read_text() == ""
    assert result.evals == []


def test_train_rejects_small_split(small_dataset, tmp_path):
    with pytest.raises(DatasetError):
        train(small_dataset, NetworkConfig.tiny(), Hyperparams(batch_size=1000), tmp_path)
    with pytest.raises(ValueError):
        train(small_dataset, NetworkConfig.tiny(), Hyperparams(n_frames=3), tmp_path)


@pytest.fixture(scope="module")
def short_run(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("short")
    hp = Hyperparams(epochs=4, learning_rate=1e-3, seed=1)
    return train(small_dataset, NetworkConfig.tiny(), hp, out)


def test_training_loss_trends_down(short_run):
    records = [json.loads(line) for line in short_run.log_path.read_text().splitlines()]
    steps = [r for r in records if "loss_total" in r]
    first = np.mean([r["loss_total"] for r in steps if r["epoch"] == 0])
    last = np.mean([r["loss_total"] for r in steps if r["epoch"] == 3])
    assert last < first
    assert len([r for r in records if "eval" in r]) == 4
    assert {r["lr"] for r in steps if r["epoch"] == 2} == {1e-3 * 0.9}


def test_best_checkpoint_tracks_best_eval(short_run):
    best = max(short_run.evals, key=lambda e: e["mean_dice"])
    assert short_run.best_mean_dice == best["mean_dice"]
    assert short_run.evals[short_run.best_eval] == best


def test_evaluate_twice_identical_and_aggregates(short_run, small_dataset):
    model = load_checkpoint(short_run.best_checkpoint)
    a, frames = evaluate(model, small_dataset, "val", keep_frames=True)
    b, _ = evaluate(model, small_dataset, "val")
    assert a.to_dict() == b.to_dict()
    inter = sum(f.counts.intersection for f in frames)
    gt = sum(f.counts.gt for f in frames)
    assert inter.tolist() == a.counts.intersection.tolist() and gt.tolist() == a.counts.gt.tolist()
    assert a.n_frames == len(frames) == len(small_dataset.windows("val", 5))


def test_predict_then_reevaluate(short_run, small_dataset, tmp_path):
    model = load_checkpoint(short_run.best_checkpoint)
    report, _ = evaluate(model, small_dataset, "test")
    paths = predict(model, small_dataset, "test", tmp_path)
    assert len(paths) == report.n_frames
    again = evaluate_predictions(small_dataset, "test", tmp_path)
    assert again.iou.tolist() == report.iou.tolist()
    assert again.dice.tolist() == report.dice.tolist()
    one = predict(model, small_dataset, "", tmp_path / "one", frame=paths[0].parent.name + "/" + paths[0].stem)
    assert one[0].read_bytes() == paths[0].read_bytes()
    with pytest.raises(DatasetError):
        predict(model, small_dataset, "", tmp_path, frame=paths[0].parent.name + "/000001")


def test_all_background_split_scores_one(tmp_path):
    synth = SynthConfig(seed=0, frames=5, frames_per_sequence=5, persons=(0, 0))
    write_synthetic_raw(synth, tmp_path / "raw")
    compile_dataset(tmp_path / "raw", tmp_path / "ds",
                    DatasetConfig(split_ratios=(1, 0, 0), drop_empty_sequences=False))
    ds = CompiledDataset(tmp_path / "ds")
    model = TMVA4D(NetworkConfig.tiny())
    with torch.no_grad():
        model.decoder.head.weight.zero_()
        model.decoder.head.bias.copy_(torch.tensor([5.0, -5.0]))
    report, _ = evaluate(model, ds, "train", weights=[0.0, 1.0])
    assert report.mean_iou == 1.0 and report.mean_dice == 1.0


def test_missing_frame_is_reported(small_dataset, tmp_path):
    shutil.copytree(small_dataset.root, tmp_path / "ds")
    ds = CompiledDataset(tmp_path / "ds")
    seq = ds.sequences("val")[0]
    (tmp_path / "ds" / seq / "annotations" / "000007.png").unlink()
    with pytest.raises(FileNotFoundError, match=f"{seq}/000007"):
        evaluate(TMVA4D(NetworkConfig.tiny()), ds, "val")


def test_hyperparams_roundtrip():
    hp = Hyperparams(epochs=3, adam_betas=(0.8, 0.99))
    assert Hyperparams.from_dict(hp.to_dict()) == hp
