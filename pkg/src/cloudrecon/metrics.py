"""Reconstruction quality metrics on ``[K, H, W]`` images (float64)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InputError

PSNR_CAP = 100.0
_MSE_EPS = 1e-12


@dataclass(frozen=True)
class MetricConfig:
    data_max: float = 1.0
    ssim_window: int = 7
    ssim_gaussian: bool = False  # 11x11, sigma 1.5 Gaussian weights instead of a uniform window
    ssim_c1: float | None = None  # default (0.01 * data_max) ** 2
    ssim_c2: float | None = None  # default (0.03 * data_max) ** 2
    sam_units: str = "degrees"

    def __post_init__(self):
        if not self.data_max > 0:
            raise ConfigError("data_max must be positive")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ConfigError(f"ssim_window must be a positive odd integer, got {self.ssim_window}")
        if self.sam_units not in ("degrees", "radians"):
            raise ConfigError(f"sam_units must be 'degrees' or 'radians', got {self.sam_units!r}")

    @property
    def c1(self) -> float:
        return (0.01 * self.data_max) ** 2 if self.ssim_c1 is None else self.ssim_c1

    @property
    def c2(self) -> float:
        return (0.03 * self.data_max) ** 2 if self.ssim_c2 is None else self.ssim_c2

    @property
    def window(self) -> int:
        return 11 if self.ssim_gaussian else self.ssim_window


def _pair(pred, target):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise InputError(f"shape mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise InputError("empty images")
    return p, t


def mae(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.abs(p - t).mean())


def mse(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(((p - t) ** 2).mean())


def rmse(pred, target) -> float:
    return float(np.sqrt(mse(pred, target)))


def psnr(pred, target, cfg: MetricConfig = MetricConfig()) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for near-zero MSE."""
    err = mse(pred, target)
    if err < _MSE_EPS:
        return PSNR_CAP
    return float(10.0 * np.log10(cfg.data_max**2 / err))


def _gaussian_weights(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(pred, target, cfg: MetricConfig = MetricConfig()) -> np.ndarray:
    """Per-window SSIM values ``[K, H - w + 1, W - w + 1]`` (valid windows only)."""
    p, t = _pair(pred, target)
    if p.ndim == 2:
        p, t = p[None], t[None]
    win = cfg.window
    if win > min(p.shape[-2:]):
        raise ConfigError(f"SSIM window {win} does not fit into a {p.shape[-2]}x{p.shape[-1]} image")
    pw = sliding_window_view(p, (win, win), axis=(-2, -1))
    tw = sliding_window_view(t, (win, win), axis=(-2, -1))
    if cfg.ssim_gaussian:
        wts = _gaussian_weights(win)
    else:
        wts = np.full((win, win), 1.0 / win**2)

    def wmean(a):
        return np.einsum("...ij,ij->...", a, wts)

    mu_p, mu_t = wmean(pw), wmean(tw)
    var_p = wmean((pw - mu_p[..., None, None]) ** 2)
    var_t = wmean((tw - mu_t[..., None, None]) ** 2)
    cov = wmean((pw - mu_p[..., None, None]) * (tw - mu_t[..., None, None]))
    c1, c2 = cfg.c1, cfg.c2
    return ((2 * mu_p * mu_t + c1) * (2 * cov + c2)) / ((mu_p**2 + mu_t**2 + c1) * (var_p + var_t + c2))


def ssim(pred, target, cfg: MetricConfig = MetricConfig()) -> float:
    """Mean structural similarity over all windows and channels."""
    return float(ssim_map(pred, target, cfg).mean())


def spectral_angles(pred, target) -> np.ndarray:
    """Per-pixel angle in radians between spectra along axis 0; NaN where a norm is zero.

    Uses the half-angle form ``2 atan2(|a - b|, |a + b|)`` of unit vectors,
    which stays accurate for nearly parallel spectra.
    """
    p, t = _pair(pred, target)
    pn = np.linalg.norm(p, axis=0)
    tn = np.linalg.norm(t, axis=0)
    ok = (pn > 0) & (tn > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        a = p / pn
        b = t / tn
        ang = 2.0 * np.arctan2(np.linalg.norm(a - b, axis=0), np.linalg.norm(a + b, axis=0))
    return np.where(ok, ang, np.nan)


def sam_details(pred, target, cfg: MetricConfig = MetricConfig()) -> tuple[float, int]:
    """Mean spectral angle over valid pixels and the number of excluded pixels."""
    ang = spectral_angles(pred, target)
    valid = ~np.isnan(ang)
    excluded = int(ang.size - valid.sum())
    if not valid.any():
        return float("nan"), excluded
    value = float(ang[valid].mean())
    if cfg.sam_units == "degrees":
        value = float(np.degrees(value))
    return value, excluded


def sam(pred, target, cfg: MetricConfig = MetricConfig()) -> float:
    return sam_details(pred, target, cfg)[0]


def image_metrics(pred, target, cfg: MetricConfig = MetricConfig()) -> dict[str, float]:
    s, excluded = sam_details(pred, target, cfg)
    return {
        "rmse": rmse(pred, target),
        "mae": mae(pred, target),
        "psnr": psnr(pred, target, cfg),
        "ssim": ssim(pred, target, cfg),
        "sam": s,
        "sam_excluded": excluded,
    }
