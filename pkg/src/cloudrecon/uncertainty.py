"""Uncertainty calibration, deep-ensemble fusion and uncertainty-ranked filtering.

Everything here is plain float64 numpy.  Reductions run in a fixed order
(``np.bincount`` over the input order, prefix sums over a stable sort,
member-sorted ensemble sums) so results are bit-reproducible.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, NumericalError

DEFAULT_BINS = 20


@dataclass
class CalibrationReport:
    bin_edges: np.ndarray  # [P + 1], on the RMV (standard deviation) scale
    bin_counts: np.ndarray  # [P]
    bin_rmse: np.ndarray  # [P], 0 for empty bins
    bin_rmv: np.ndarray  # [P], 0 for empty bins
    uce: float
    total_count: int

    def rows(self) -> list[dict]:
        return [
            {"bin_lo": float(lo), "bin_hi": float(hi), "count": int(n), "rmse": float(e), "rmv": float(u)}
            for lo, hi, n, e, u in zip(
                self.bin_edges[:-1], self.bin_edges[1:], self.bin_counts, self.bin_rmse, self.bin_rmv
            )
        ]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["bin_lo", "bin_hi", "count", "rmse", "rmv"])
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return path


@dataclass
class EnsembleOutput:
    mean: np.ndarray
    total_variance: np.ndarray
    member_count: int
    aleatoric: np.ndarray  # mean of member variances
    epistemic: np.ndarray  # population variance of member means


@dataclass
class DiscardCurve:
    fraction_kept: np.ndarray  # k / N for k = 1..N
    cumulative_rmse: np.ndarray  # RMSE over the k least uncertain units
    order: np.ndarray  # indices sorted by increasing uncertainty

    def __iter__(self):
        return iter(zip(self.fraction_kept.tolist(), self.cumulative_rmse.tolist()))

    def __len__(self):
        return len(self.fraction_kept)

    def at(self, fraction: float) -> float:
        """Cumulative RMSE at the largest kept fraction not exceeding ``fraction``."""
        n = len(self.fraction_kept)
        k = max(1, int(np.floor(fraction * n + 1e-9)))
        return float(self.cumulative_rmse[k - 1])

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fraction_kept", "cumulative_rmse"])
            for f, e in self:
                writer.writerow([repr(f), repr(e)])
        return path


def rmv(uncertainties) -> float:
    """Root mean variance of a ``[n_p, K]`` set of predicted variances."""
    u = np.asarray(uncertainties, dtype=np.float64)
    if u.size == 0:
        raise InputError("RMV of an empty set")
    if (u < 0).any():
        raise InputError("variances must be non-negative")
    return float(np.sqrt(u.mean()))


def pixel_errors(pred, target, variance):
    """Channel-averaged squared error and variance per pixel.

    ``pred``/``target`` are ``[..., K, H, W]``; ``variance`` is broadcastable
    to them (a shared isotropic variance ``[..., 1, H, W]`` works).  Returns
    two flat float64 arrays of length ``prod(...) * H * W``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    var = np.broadcast_to(np.asarray(variance, dtype=np.float64), pred.shape)
    sq = ((pred - target) ** 2).mean(axis=-3)
    mv = var.mean(axis=-3)
    return sq.reshape(-1), mv.reshape(-1)


def _bin_index(scale: np.ndarray, n_bins: int, binning: str) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = float(scale.min()), float(scale.max())
    if binning == "uniform":
        edges = np.linspace(lo, hi, n_bins + 1)
    elif binning == "quantile":
        edges = np.quantile(scale, np.linspace(0.0, 1.0, n_bins + 1))
    else:
        raise ConfigError(f"unknown binning {binning!r}")
    if hi == lo:
        return edges, np.zeros(scale.shape, dtype=np.int64)
    # half-open bins [lo, hi) except the last, which includes the maximum
    idx = np.searchsorted(edges, scale, side="right") - 1
    return edges, np.clip(idx, 0, n_bins - 1)


def uce(per_pixel_sq_error, per_pixel_mean_var, n_bins: int = DEFAULT_BINS, binning: str = "uniform") -> CalibrationReport:
    """Uncertainty calibration error.

    Units are binned by their predicted standard deviation
    ``sqrt(per_pixel_mean_var)``; per bin the RMSE of the unit errors is
    compared with the RMV of the unit variances and the absolute gaps are
    averaged with weights ``N_p / N``.  Empty bins are reported with count 0
    and contribute nothing.
    """
    if n_bins <= 0:
        raise ConfigError(f"bin count must be positive, got {n_bins}")
    sq = np.asarray(per_pixel_sq_error, dtype=np.float64).reshape(-1)
    var = np.asarray(per_pixel_mean_var, dtype=np.float64).reshape(-1)
    if sq.shape != var.shape:
        raise InputError(f"length mismatch: {sq.shape[0]} errors vs {var.shape[0]} variances")
    if sq.size == 0:
        raise InputError("UCE of an empty set")
    if (var < 0).any() or (sq < 0).any():
        raise InputError("squared errors and variances must be non-negative")

    edges, idx = _bin_index(np.sqrt(var), n_bins, binning)
    counts = np.bincount(idx, minlength=n_bins)
    sum_sq = np.bincount(idx, weights=sq, minlength=n_bins)
    sum_var = np.bincount(idx, weights=var, minlength=n_bins)
    filled = counts > 0
    rmse_b = np.zeros(n_bins)
    rmv_b = np.zeros(n_bins)
    rmse_b[filled] = np.sqrt(sum_sq[filled] / counts[filled])
    rmv_b[filled] = np.sqrt(sum_var[filled] / counts[filled])
    n = sq.size
    value = float(np.sum(counts[filled] / n * np.abs(rmse_b[filled] - rmv_b[filled])))
    return CalibrationReport(edges, counts, rmse_b, rmv_b, value, int(n))


def uce_image(per_image_rmse, per_image_rmv, n_bins: int = DEFAULT_BINS, binning: str = "uniform") -> CalibrationReport:
    """Image-level UCE: each image is one unit carrying its RMSE and RMV."""
    e = np.asarray(per_image_rmse, dtype=np.float64)
    u = np.asarray(per_image_rmv, dtype=np.float64)
    return uce(e**2, u**2, n_bins, binning)


def ensemble_fuse(means, variances) -> EnsembleOutput:
    """Moment-matched fusion of ``M`` members, inputs ``[M, ...]``.

    The fused mean is the member average and the total variance the mean
    aleatoric variance plus the population variance of the member means.
    Members are sorted elementwise before summation, which makes the
    result exactly invariant to member order; sums are taken relative to
    the smallest member so that identical members fuse to themselves
    bit-for-bit.
    """
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if means.ndim == 0 or means.shape[0] == 0:
        raise InputError("ensemble needs at least one member")
    variances = np.broadcast_to(variances, means.shape)
    if (variances < 0).any():
        raise InputError("member variances must be non-negative")
    m = means.shape[0]

    def _avg(a):
        s = np.sort(a, axis=0)
        return s[0] + (s - s[0]).sum(axis=0) / m

    mu = _avg(means)
    aleatoric = _avg(variances)
    epistemic = (np.sort(means, axis=0) - mu) ** 2
    epistemic = epistemic.sum(axis=0) / m
    total = aleatoric + epistemic
    if (total < -1e-12).any():
        raise NumericalError("fused variance is negative")
    total = np.maximum(total, 0.0)
    return EnsembleOutput(mean=mu, total_variance=total, member_count=m, aleatoric=aleatoric, epistemic=epistemic)


def discard_curve(per_image_error, per_image_uncertainty) -> DiscardCurve:
    """Cumulative RMSE of units kept in order of increasing uncertainty.

    ``per_image_error`` holds per-unit RMSEs; the aggregate over ``k`` kept
    units is ``sqrt(mean(error**2))``.  Ties in uncertainty keep their input
    order.
    """
    err = np.asarray(per_image_error, dtype=np.float64).reshape(-1)
    unc = np.asarray(per_image_uncertainty, dtype=np.float64).reshape(-1)
    if err.shape != unc.shape:
        raise InputError(f"length mismatch: {err.size} errors vs {unc.size} uncertainties")
    if err.size == 0:
        raise InputError("discard curve of an empty set")
    order = np.argsort(unc, kind="stable")
    k = np.arange(1, err.size + 1)
    cum = np.sqrt(np.cumsum(err[order] ** 2) / k)
    return DiscardCurve(fraction_kept=k / err.size, cumulative_rmse=cum, order=order)
