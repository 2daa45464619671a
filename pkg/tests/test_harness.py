import csv
import json
import math

import numpy as np
import pytest

from cloudrecon import checkpoint as C
from cloudrecon import data as D
from cloudrecon import harness as H
from cloudrecon.config import ModelConfig, SynthConfig, TrainConfig
from cloudrecon.errors import ConfigError, TrainingError

SYNTH = SynthConfig(h=16, w=16, n_train=8, n_val=2, n_test=3)
MODEL = ModelConfig(d_m=16, n_e=1, n_d=2, n_head=4, c_in=6, k=4, low_res=8, out_scale=1.0)
TRAIN = TrainConfig(epochs=2, seed=3)


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    return D.write_dataset(SYNTH, tmp_path_factory.mktemp("ds"))


@pytest.fixture(scope="module")
def run(root, tmp_path_factory):
    return H.train(MODEL, TRAIN, root, tmp_path_factory.mktemp("run"))


def test_training_outputs(run):
    assert run.best.exists() and run.latest.exists() and run.log.exists()
    log = H.read_log(run.log)
    assert [r["epoch"] for r in log] == [0, 1]
    assert all(math.isfinite(r["train_loss"]) and math.isfinite(r["val_loss"]) for r in log)
    with run.log.open() as fh:
        assert next(csv.reader(fh)) == ["epoch", "train_loss", "val_loss", "lr", "wall_time"]
    assert (run.log.parent / "config.txt").exists()


def test_learning_rate_schedule(run):
    log = H.read_log(run.log)
    for r in log:
        assert r["lr"] == pytest.approx(1e-3 * 0.8 ** r["epoch"], rel=1e-12)
    assert H.lr_at(TrainConfig(), 10) == pytest.approx(1e-3 * 0.107374, rel=1e-5)


def test_best_checkpoint_holds_the_minimum_validation_loss(run):
    log = H.read_log(run.log)
    best = C.load(run.best)
    assert best.best_val_loss == min(r["val_loss"] for r in log)
    assert best.best_epoch == int(np.argmin([r["val_loss"] for r in log]))
    assert C.load(run.latest).epoch == 2


def test_training_is_reproducible(root, run, tmp_path):
    again = H.train(MODEL, TRAIN, root, tmp_path / "again")
    a, b = H.read_log(run.log), H.read_log(again.log)
    for ra, rb in zip(a, b):
        assert (ra["train_loss"], ra["val_loss"], ra["lr"]) == (rb["train_loss"], rb["val_loss"], rb["lr"])
    wa, wb = C.load(run.latest).weights, C.load(again.latest).weights
    assert all(np.array_equal(wa[k].numpy(), wb[k].numpy()) for k in wa)


def test_l2_training_without_variance_head(root, tmp_path):
    cfg = ModelConfig(**{**MODEL.__dict__, "cov_mode": "none"})
    result = H.train(cfg, TrainConfig(epochs=1, loss="l2"), root, tmp_path / "l2")
    report = H.evaluate(result.best, root, plots=False)
    assert report.pixel_calibration is None and "rmse" in report.aggregate
    assert "uce" not in report.aggregate


def test_no_sar_training(root, tmp_path):
    cfg = ModelConfig(**{**MODEL.__dict__, "c_in": 4})
    result = H.train(cfg, TrainConfig(epochs=1, use_sar=False), root, tmp_path / "nosar")
    assert H.evaluate(result.best, root, plots=False).meta["T"] == 3


def test_incompatible_model_is_rejected(root, tmp_path):
    with pytest.raises(ConfigError, match="c_in"):
        H.train(ModelConfig(**{**MODEL.__dict__, "c_in": 5}), TRAIN, root, tmp_path / "bad")


def test_non_finite_loss_aborts_with_a_dump(root, tmp_path, monkeypatch):
    import torch

    def boom(model, objective, xb, yb):
        return torch.tensor(float("nan"), requires_grad=True), 1

    monkeypatch.setattr(H, "_batch_loss", boom)
    with pytest.raises(TrainingError, match="epoch 0, batch 0"):
        H.train(MODEL, TRAIN, root, tmp_path / "nan")
    assert list((tmp_path / "nan").glob("nonfinite_epoch0_batch0.npz"))


def test_evaluation_directory(run, root, tmp_path):
    out = tmp_path / "eval"
    report = H.evaluate(run.best, root, "test", out_dir=out, plots=True)
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert len(rows) == SYNTH.n_test + 1 and rows[-1]["scene_id"] == "ALL"
    assert {"rmse", "mae", "psnr", "ssim", "sam", "baseline_rmse", "rmv"} <= set(rows[0])
    for name in ("calibration_pixel.csv", "calibration_image.csv", "discard_curve.csv", "summary.json", "panels.npz"):
        assert (out / name).exists(), name
    assert len(list(csv.reader((out / "calibration_pixel.csv").open()))) == 21
    summary = json.loads((out / "summary.json").read_text())
    assert summary["uce"] == report.aggregate["uce"] and summary["meta"]["split"] == "test"
    assert list(out.glob("*.png"))


def test_evaluation_is_bitwise_stable(run, root, tmp_path):
    H.evaluate(run.best, root, out_dir=tmp_path / "a", plots=False)
    H.evaluate(run.best, root, out_dir=tmp_path / "b", plots=False)
    for name in ("metrics.csv", "calibration_pixel.csv", "calibration_image.csv", "discard_curve.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_oracle_predictor_scores_perfectly(run, root):
    def oracle(x, y):
        return y.copy(), np.zeros_like(y)

    report = H.evaluate(run.best, root, predictor=oracle, plots=False)
    agg = report.aggregate
    assert agg["rmse"] == 0.0 and agg["mae"] == 0.0 and agg["psnr"] == 100.0
    assert agg["ssim"] == pytest.approx(1.0) and agg["sam"] == pytest.approx(0.0, abs=1e-5)
    assert agg["uce"] == 0.0 and agg["uce_im"] == 0.0


def test_calibrated_oracle_has_zero_uce(run, root):
    rng = np.random.default_rng(0)

    def noisy(x, y):
        mean = y + 0.01 * rng.standard_normal(y.shape).astype(np.float32)
        return mean, ((mean - y) ** 2).astype(np.float64)

    report = H.evaluate(run.best, root, predictor=noisy, plots=False)
    assert report.aggregate["uce"] == pytest.approx(0.0, abs=1e-9)


def test_sequence_length_override(run, root):
    assert H.evaluate(run.best, root, t_override=2, plots=False).meta["T"] == 2
    with pytest.raises(Exception):
        H.evaluate(run.best, root, t_override=5, plots=False)


def test_ensemble_of_identical_members_matches_single_model(run, root):
    single = H.evaluate(run.best, root, plots=False)
    fused = H.evaluate_ensemble([run.best, run.best], root, plots=False)
    assert fused.meta["members"] == 2
    for key in ("rmse", "ssim", "sam", "uce", "uce_im"):
        assert fused.aggregate[key] == pytest.approx(single.aggregate[key], rel=1e-6, abs=1e-9)


def test_ensemble_training(root, tmp_path):
    paths = H.train_ensemble(MODEL, TrainConfig(epochs=1, seed=1), root, members=2, out_dir=tmp_path / "ens")
    assert [p.parent.name for p in paths] == ["member_0", "member_1"]
    assert [C.load(p).train_cfg.seed for p in paths] == [1, 2]
    same = H.train_ensemble(MODEL, TrainConfig(epochs=1, seed=1), root, members=2, out_dir=tmp_path / "same",
                            same_seed=True)
    w0, w1 = C.load(same[0]).weights, C.load(same[1]).weights
    assert all(np.array_equal(w0[k].numpy(), w1[k].numpy()) for k in w0)
    with pytest.raises(ConfigError):
        H.train_ensemble(MODEL, TRAIN, root, members=1)


def test_incompatible_ensemble_is_rejected(run, root, tmp_path):
    other = H.train(ModelConfig(**{**MODEL.__dict__, "cov_mode": "isotropic"}), TrainConfig(epochs=1), root,
                    tmp_path / "iso")
    with pytest.raises(ConfigError, match="member 1"):
        H.evaluate_ensemble([run.best, other.best], root, plots=False)
    with pytest.raises(ConfigError):
        H.evaluate_ensemble([run.best], root, plots=False)


def test_run_dir_lives_under_the_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(H.HOME_ENV, str(tmp_path))
    path = H.run_dir("train", MODEL)
    assert path.parent == tmp_path / "train" and path.is_dir()
