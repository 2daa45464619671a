"""Training, evaluation and ensemble orchestration."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint as ckptio
from . import config as cfgio
from . import data as dataio
from . import metrics as M
from . import uncertainty as U
from .config import ModelConfig, TrainConfig
from .errors import ConfigError, InputError, NumericalError, TrainingError
from .losses import loss_for, to_pixels
from .model import CloudRemovalNet

log = logging.getLogger(__name__)

HOME_ENV = "CLOUDRECON_HOME"
EVAL_BATCH = 8
N_PANELS = 4

# (x [N, T, C, H, W], y [N, K, H, W]) -> (mean [N, K, H, W], variance [N, K or 1, H, W] or None);
# receives the targets so that test oracles can be plugged in
Predictor = Callable[[np.ndarray, np.ndarray], "tuple[np.ndarray, np.ndarray | None]"]


def output_root() -> Path:
    return Path(os.environ.get(HOME_ENV, Path.home() / ".cache" / "cloudrecon"))


def run_dir(kind: str, *configs) -> Path:
    """Fresh ``$CLOUDRECON_HOME/<kind>/<timestamp>-<config hash>`` directory."""
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    path = output_root() / kind / f"{stamp}-{cfgio.fingerprint(*configs)}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def lr_at(train_cfg: TrainConfig, epoch: int) -> float:
    return train_cfg.lr * train_cfg.lr_decay**epoch


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def _load_xy(root, split: str, use_sar: bool, t: int | None = None):
    samples = dataio.read_split(root, split)
    x, y, masks = dataio.stack_split(samples, t=t, use_sar=use_sar)
    return samples, x, y, masks


def _check_compat(model_cfg: ModelConfig, x: np.ndarray, y: np.ndarray) -> None:
    if x.shape[2] != model_cfg.c_in:
        raise ConfigError(f"dataset provides {x.shape[2]} input channels, model expects c_in={model_cfg.c_in}")
    if y.shape[1] != model_cfg.k:
        raise ConfigError(f"dataset has {y.shape[1]} target bands, model expects k={model_cfg.k}")


def _batch_loss(model: CloudRemovalNet, objective, xb: torch.Tensor, yb: torch.Tensor) -> tuple[torch.Tensor, int]:
    pred = model(xb)
    var = None if pred.variance is None else to_pixels(pred.variance)
    return objective(to_pixels(pred.mean), to_pixels(yb), var), yb.shape[0] * yb.shape[2] * yb.shape[3]


@torch.no_grad()
def _mean_loss(model, objective, x: np.ndarray, y: np.ndarray, batch_size: int) -> float:
    model.eval()
    total, count = 0.0, 0
    for i in range(0, len(x), batch_size):
        loss, n = _batch_loss(model, objective, torch.from_numpy(x[i : i + batch_size]), torch.from_numpy(y[i : i + batch_size]))
        total += float(loss) * n
        count += n
    return total / count


def _dump_batch(out_dir: Path, epoch: int, batch: int, xb, yb, model) -> Path:
    path = out_dir / f"nonfinite_epoch{epoch}_batch{batch}.npz"
    params = {f"param/{k}": v.detach().numpy() for k, v in model.state_dict().items()}
    np.savez(path, x=xb.numpy(), y=yb.numpy(), **params)
    return path


@dataclass
class TrainResult:
    best: Path
    latest: Path
    log: Path
    history: list[dict] = field(default_factory=list)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset_root: str | Path,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train one model; returns the best-validation and latest checkpoint paths.

    The same seed gives the same initialisation, batch order, dropout
    draws and therefore bitwise identical loss logs.
    """
    out = Path(out_dir or train_cfg.checkpoint_dir or run_dir("train", model_cfg, train_cfg))
    out.mkdir(parents=True, exist_ok=True)
    _, x_tr, y_tr, _ = _load_xy(dataset_root, "train", train_cfg.use_sar)
    _, x_va, y_va, _ = _load_xy(dataset_root, "val", train_cfg.use_sar)
    _check_compat(model_cfg, x_tr, y_tr)
    if len(x_tr) == 0:
        raise InputError(f"{dataset_root}: empty training split")
    objective = loss_for(model_cfg.cov_mode, train_cfg.loss)

    _seed_everything(train_cfg.seed)
    model = CloudRemovalNet(model_cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=train_cfg.lr_decay)
    order_rng = np.random.default_rng(train_cfg.seed)
    cfgio.write(out / "config.txt", model_cfg, train_cfg)

    best_path, latest_path, log_path = out / "best.ckpt", out / "latest.ckpt", out / "log.csv"
    best_val, best_epoch = float("inf"), -1
    history: list[dict] = []
    bs = train_cfg.batch_size
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        lr = optimizer.param_groups[0]["lr"]
        model.train()
        perm = order_rng.permutation(len(x_tr))
        running, seen = 0.0, 0
        for b, i in enumerate(range(0, len(perm), bs)):
            idx = perm[i : i + bs]
            xb, yb = torch.from_numpy(x_tr[idx]), torch.from_numpy(y_tr[idx])
            try:
                loss, n = _batch_loss(model, objective, xb, yb)
                if not torch.isfinite(loss):
                    raise NumericalError("loss is not finite")
            except NumericalError as exc:
                dump = _dump_batch(out, epoch, b, xb, yb, model)
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: {exc}; batch dumped to {dump}") from exc
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            running += float(loss.detach()) * n
            seen += n
        scheduler.step()

        val_loss = float("nan")
        if (epoch + 1) % train_cfg.eval_every == 0 or epoch + 1 == train_cfg.epochs:
            val_loss = _mean_loss(model, objective, x_va, y_va, EVAL_BATCH) if len(x_va) else running / seen
        row = {"epoch": epoch, "train_loss": running / seen, "val_loss": val_loss, "lr": lr,
               "wall_time": time.perf_counter() - t0}
        history.append(row)
        improved = val_loss < best_val
        if improved:
            best_val, best_epoch = val_loss, epoch
        ckpt = ckptio.Checkpoint(
            model_cfg=model_cfg,
            train_cfg=train_cfg,
            weights={k: v.detach().clone() for k, v in model.state_dict().items()},
            epoch=epoch + 1,
            best_val_loss=best_val,
            best_epoch=best_epoch,
            optimizer=optimizer.state_dict(),
            scheduler=scheduler.state_dict(),
        )
        ckptio.save(latest_path, ckpt)
        if improved:
            ckptio.save(best_path, ckpt)
        _write_log(log_path, history)
        log.info("epoch %d train %.6f val %.6f lr %.2e", epoch, row["train_loss"], val_loss, lr)
    return TrainResult(best=best_path, latest=latest_path, log=log_path, history=history)


def _write_log(path: Path, history: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr", "wall_time"])
        for r in history:
            writer.writerow([r["epoch"], repr(r["train_loss"]), repr(r["val_loss"]), repr(r["lr"]), f"{r['wall_time']:.3f}"])


def read_log(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def train_ensemble(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset_root: str | Path,
    members: int = 5,
    out_dir: str | Path | None = None,
    same_seed: bool = False,
) -> list[Path]:
    """Train ``members`` models with seeds ``seed + m`` (or all with ``seed`` if ``same_seed``)."""
    if members < 2:
        raise ConfigError(f"an ensemble needs at least 2 members, got {members}")
    out = Path(out_dir or run_dir("ensemble", model_cfg, train_cfg))
    paths = []
    for m in range(members):
        seed = train_cfg.seed if same_seed else train_cfg.seed + m
        member_cfg = cfgio.replace(train_cfg, seed=seed, checkpoint_dir="")
        try:
            paths.append(train(model_cfg, member_cfg, dataset_root, out / f"member_{m}").best)
        except Exception as exc:
            raise TrainingError(f"ensemble member {m} failed: {exc}") from exc
    return paths


# -- evaluation --------------------------------------------------------------------


@torch.no_grad()
def predict(model: CloudRemovalNet, x: np.ndarray, batch_size: int = EVAL_BATCH):
    model.eval()
    means, variances = [], []
    for i in range(0, len(x), batch_size):
        pred = model(torch.from_numpy(np.ascontiguousarray(x[i : i + batch_size])))
        means.append(pred.mean.numpy())
        if pred.variance is not None:
            variances.append(pred.variance.numpy())
    return np.concatenate(means), (np.concatenate(variances) if variances else None)


@dataclass
class EvalReport:
    rows: list[dict]
    aggregate: dict
    pixel_calibration: U.CalibrationReport | None
    image_calibration: U.CalibrationReport | None
    discard: U.DiscardCurve | None
    meta: dict
    panels: dict = field(default_factory=dict, repr=False)

    @property
    def has_uncertainty(self) -> bool:
        return self.pixel_calibration is not None

    def write(self, out_dir: str | Path, plots: bool = True) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fields = list(self.rows[0].keys())
        with (out / "metrics.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for r in self.rows + [self.aggregate]:
                writer.writerow({k: _fmt(r.get(k, "")) for k in fields})
        if self.pixel_calibration is not None:
            self.pixel_calibration.to_csv(out / "calibration_pixel.csv")
            self.image_calibration.to_csv(out / "calibration_image.csv")
            self.discard.to_csv(out / "discard_curve.csv")
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        if self.panels:
            np.savez(out / "panels.npz", **self.panels)
        if plots:
            from . import plots as P

            P.render_eval_dir(out)
        return out

    def summary(self) -> dict:
        out = {"meta": self.meta, "aggregate": {k: v for k, v in self.aggregate.items() if k != "scene_id"}}
        if self.pixel_calibration is not None:
            out["uce"] = self.pixel_calibration.uce
            out["uce_im"] = self.image_calibration.uce
            out["discard_rmse_at_50pct"] = self.discard.at(0.5)
        return out


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def build_report(
    y: np.ndarray,
    mean: np.ndarray,
    variance: np.ndarray | None,
    x: np.ndarray,
    masks: np.ndarray,
    scene_ids: Sequence[int],
    metric_cfg: M.MetricConfig,
    meta: dict | None = None,
    n_bins: int = U.DEFAULT_BINS,
) -> EvalReport:
    """Per-image metrics, calibration and discard curve for a set of predictions.

    ``variance`` may be per band ``[N, K, H, W]``, shared ``[N, 1, H, W]`` or
    ``None`` (calibration sections are then omitted).
    """
    k = y.shape[1]
    rows = []
    for i in range(len(y)):
        row = {"scene_id": int(scene_ids[i])}
        row.update(M.image_metrics(mean[i], y[i], metric_cfg))
        baseline = dataio.least_cloudy_baseline(dataio.MultiTempSample(x=x[i], y=y[i], masks=masks[i], scene_id=scene_ids[i]))
        row["baseline_rmse"] = M.rmse(baseline[:k], y[i])
        row["cloud_fraction"] = float(masks[i].mean())
        if variance is not None:
            v = np.broadcast_to(np.asarray(variance[i], dtype=np.float64), y[i].shape)
            row["mean_var"] = float(v.mean())
            row["rmv"] = float(np.sqrt(v.mean()))
        rows.append(row)
    aggregate = {"scene_id": "ALL"}
    for key in rows[0]:
        if key != "scene_id":
            aggregate[key] = float(np.mean([r[key] for r in rows]))

    pix = img = curve = None
    if variance is not None:
        sq, mv = U.pixel_errors(mean, y, variance)
        pix = U.uce(sq, mv, n_bins)
        e = np.array([r["rmse"] for r in rows])
        u = np.array([r["rmv"] for r in rows])
        img = U.uce_image(e, u, n_bins)
        curve = U.discard_curve(e, u)
        aggregate["uce"] = pix.uce
        aggregate["uce_im"] = img.uce
    n = min(N_PANELS, len(y))
    panels = {"input": x[:n, :, :k], "prediction": mean[:n], "target": y[:n], "masks": masks[:n]}
    if variance is not None:
        panels["variance"] = np.broadcast_to(variance[:n], mean[:n].shape).copy()
    return EvalReport(rows, aggregate, pix, img, curve, dict(meta or {}), panels)


def _t_tag(t_override, stored):
    return t_override if t_override is not None else stored


def evaluate(
    checkpoint: str | Path,
    dataset_root: str | Path,
    split: str = "test",
    t_override: int | None = None,
    out_dir: str | Path | None = None,
    predictor: Predictor | None = None,
    plots: bool = True,
) -> EvalReport:
    """Evaluate a checkpoint on a split; ``predictor`` replaces the network (test hook)."""
    model, ckpt = ckptio.load_model(checkpoint)
    samples, x, y, masks = _load_xy(dataset_root, split, ckpt.train_cfg.use_sar, t_override)
    _check_compat(ckpt.model_cfg, x, y)
    mean, var = predictor(x, y) if predictor is not None else predict(model, x)
    meta = {
        "split": split,
        "T": _t_tag(t_override, x.shape[1]),
        "members": 1,
        "cov_mode": ckpt.model_cfg.cov_mode,
        "model_config": cfgio.fingerprint(ckpt.model_cfg),
        "train_config": cfgio.fingerprint(ckpt.train_cfg),
        "checkpoint_epoch": ckpt.best_epoch,
    }
    report = build_report(
        y, mean, var, x, masks, [s.scene_id for s in samples], M.MetricConfig(data_max=ckpt.model_cfg.out_scale), meta
    )
    if out_dir is not None:
        report.write(out_dir, plots=plots)
    return report


def evaluate_ensemble(
    checkpoints: Sequence[str | Path],
    dataset_root: str | Path,
    split: str = "test",
    t_override: int | None = None,
    out_dir: str | Path | None = None,
    plots: bool = True,
) -> EvalReport:
    """Run every member, fuse means and variances, and report on the fused output."""
    if len(checkpoints) < 2:
        raise ConfigError("ensemble evaluation needs at least 2 checkpoints")
    loaded = [ckptio.load_model(p) for p in checkpoints]
    ref_model, ref_train = loaded[0][1].model_cfg, loaded[0][1].train_cfg
    for i, (_, c) in enumerate(loaded[1:], start=1):
        if c.model_cfg != ref_model or c.train_cfg.use_sar != ref_train.use_sar:
            raise ConfigError(f"ensemble member {i} ({checkpoints[i]}) is incompatible with member 0")
    samples, x, y, masks = _load_xy(dataset_root, split, ref_train.use_sar, t_override)
    _check_compat(ref_model, x, y)
    means, variances = [], []
    for model, _ in loaded:
        m, v = predict(model, x)
        means.append(m.astype(np.float64))
        variances.append(np.zeros_like(means[-1]) if v is None else np.broadcast_to(v, m.shape).astype(np.float64))
    fused = U.ensemble_fuse(np.stack(means), np.stack(variances))
    meta = {
        "split": split,
        "T": _t_tag(t_override, x.shape[1]),
        "members": fused.member_count,
        "cov_mode": ref_model.cov_mode,
        "model_config": cfgio.fingerprint(ref_model),
        "train_config": [cfgio.fingerprint(c.train_cfg) for _, c in loaded],
    }
    report = build_report(
        y, fused.mean, fused.total_variance, x, masks, [s.scene_id for s in samples],
        M.MetricConfig(data_max=ref_model.out_scale), meta,
    )
    if out_dir is not None:
        report.write(out_dir, plots=plots)
    return report
