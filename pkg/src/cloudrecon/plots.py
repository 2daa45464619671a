"""Figures rendered from an evaluation directory.

Plotting never fails an evaluation: a missing backend or a drawing error
is logged and skipped.
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


def _read_csv(path: Path) -> dict[str, np.ndarray]:
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_discard_curve(eval_dir: Path) -> Path:
    plt = _pyplot()
    d = _read_csv(eval_dir / "discard_curve.csv")
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(d["fraction_kept"], d["cumulative_rmse"], marker=".")
    ax.set_xlabel("fraction of images kept (least uncertain first)")
    ax.set_ylabel("cumulative RMSE")
    ax.invert_xaxis()
    fig.tight_layout()
    out = eval_dir / "discard_curve.png"
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_calibration(eval_dir: Path, name: str = "calibration_pixel") -> Path:
    plt = _pyplot()
    d = _read_csv(eval_dir / f"{name}.csv")
    keep = d["count"] > 0
    fig, ax = plt.subplots(figsize=(4, 4))
    lim = max(d["rmse"][keep].max(), d["rmv"][keep].max()) * 1.05
    ax.plot([0, lim], [0, lim], "k--", lw=0.8)
    ax.scatter(d["rmv"][keep], d["rmse"][keep], s=8 + 60 * d["count"][keep] / d["count"].max())
    ax.set_xlabel("RMV (predicted)")
    ax.set_ylabel("RMSE (empirical)")
    fig.tight_layout()
    out = eval_dir / f"{name}.png"
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def _rgb(img: np.ndarray) -> np.ndarray:
    bands = img[[min(2, len(img) - 1), min(1, len(img) - 1), 0]] if len(img) >= 3 else np.repeat(img[:1], 3, 0)
    rgb = bands.transpose(1, 2, 0)
    hi = np.percentile(rgb, 99) or 1.0
    return np.clip(rgb / hi, 0, 1)


def plot_panels(eval_dir: Path) -> Path:
    """Rows of input dates | prediction | target | error map | uncertainty map."""
    plt = _pyplot()
    p = np.load(eval_dir / "panels.npz")
    n, t = p["input"].shape[:2]
    has_var = "variance" in p.files
    cols = t + 3 + int(has_var)
    fig, axes = plt.subplots(n, cols, figsize=(1.6 * cols, 1.6 * n), squeeze=False)
    for i in range(n):
        ims = [(_rgb(p["input"][i, j]), f"input t={j}") for j in range(t)]
        ims += [(_rgb(p["prediction"][i]), "prediction"), (_rgb(p["target"][i]), "target")]
        err = np.sqrt(((p["prediction"][i] - p["target"][i]) ** 2).mean(axis=0))
        ims.append((err, "error"))
        if has_var:
            ims.append((np.sqrt(p["variance"][i].mean(axis=0)), "uncertainty"))
        for ax, (im, title) in zip(axes[i], ims):
            ax.imshow(im, cmap=None if im.ndim == 3 else "magma")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(title, fontsize=7)
    fig.tight_layout()
    out = eval_dir / "panels.png"
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def render_eval_dir(eval_dir: str | Path) -> list[Path]:
    eval_dir = Path(eval_dir)
    jobs = []
    if (eval_dir / "discard_curve.csv").exists():
        jobs += [lambda: plot_discard_curve(eval_dir), lambda: plot_calibration(eval_dir, "calibration_pixel"),
                 lambda: plot_calibration(eval_dir, "calibration_image")]
    if (eval_dir / "panels.npz").exists():
        jobs.append(lambda: plot_panels(eval_dir))
    written = []
    for job in jobs:
        try:
            written.append(job())
        except Exception as exc:  # plotting is best-effort
            log.warning("skipping plot: %s", exc)
    return written
