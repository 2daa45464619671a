"""Pixel-wise training objectives.

All losses take tensors in pixel layout ``[n, K]`` (one row per pixel);
:func:`to_pixels` converts ``[B, K, H, W]`` images.  Losses are means over
pixels.  The Gaussian NLLs drop the constant ``(K / 2) log(2 pi)`` and the
overall factor 1/2, so a pixel contributes ``log|Sigma| + Mahalanobis``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DomainError, InputError, NumericalError

VAR_CLAMP = (1e-6, 1e3)


@dataclass
class PixelBatch:
    pred_mean: torch.Tensor  # [n, K]
    target: torch.Tensor  # [n, K]
    pred_var: torch.Tensor | None = None  # [n, K] or [n, 1]

    @classmethod
    def from_images(cls, mean, target, var=None) -> "PixelBatch":
        return cls(to_pixels(mean), to_pixels(target), None if var is None else to_pixels(var))


def to_pixels(x: torch.Tensor) -> torch.Tensor:
    """``[B, C, H, W]`` (or ``[C, H, W]``) to ``[B*H*W, C]``."""
    x = torch.as_tensor(x)
    if x.dim() == 3:
        x = x[None]
    if x.dim() == 2:
        return x
    return x.movedim(1, -1).reshape(-1, x.shape[1])


def _check(pred_mean, target, pred_var=None):
    pred_mean, target = torch.as_tensor(pred_mean), torch.as_tensor(target)
    if pred_mean.dim() != 2 or pred_mean.shape != target.shape:
        raise InputError(f"expected matching [n, K] arrays, got {tuple(pred_mean.shape)} and {tuple(target.shape)}")
    if pred_mean.shape[0] == 0:
        raise InputError("empty pixel batch")
    if pred_var is not None:
        pred_var = torch.as_tensor(pred_var)
        if pred_var.dim() != 2 or pred_var.shape[0] != pred_mean.shape[0]:
            raise InputError(f"variance shape {tuple(pred_var.shape)} does not match {tuple(pred_mean.shape)}")
    return pred_mean, target, pred_var


def l2_loss(pred_mean, target) -> torch.Tensor:
    """Mean over pixels of the squared Euclidean residual norm."""
    pred_mean, target, _ = _check(pred_mean, target)
    return ((pred_mean - target) ** 2).sum(dim=1).mean()


def mahalanobis_diagonal(residual, var) -> torch.Tensor:
    """``sum_k residual_k**2 / var_k`` over the last axis."""
    residual, var = torch.as_tensor(residual), torch.as_tensor(var)
    if (var <= 0).any():
        raise DomainError("variances must be strictly positive")
    return (residual**2 / var).sum(dim=-1)


def _reduce(per_pixel: torch.Tensor) -> torch.Tensor:
    loss = per_pixel.mean()
    if not torch.isfinite(loss):
        bad = torch.nonzero(~torch.isfinite(per_pixel.detach()))
        idx = int(bad[0, 0]) if len(bad) else -1
        raise NumericalError(f"non-finite NLL; first offending pixel index {idx}")
    return loss


def nll_diagonal(pred_mean, target, pred_var) -> torch.Tensor:
    """Gaussian NLL with per-channel variances ``pred_var`` ``[n, K]``."""
    pred_mean, target, pred_var = _check(pred_mean, target, pred_var)
    if pred_var.shape != pred_mean.shape:
        raise InputError(f"diagonal variance must be [n, K], got {tuple(pred_var.shape)}")
    var = pred_var.clamp(*VAR_CLAMP)
    per_pixel = torch.log(var).sum(dim=1) + mahalanobis_diagonal(pred_mean - target, var)
    return _reduce(per_pixel)


def nll_isotropic(pred_mean, target, pred_var) -> torch.Tensor:
    """Gaussian NLL with one shared variance per pixel, ``pred_var`` ``[n, 1]``."""
    pred_mean, target, pred_var = _check(pred_mean, target, pred_var)
    if pred_var.shape[1] != 1:
        raise InputError(f"isotropic variance must be [n, 1], got {tuple(pred_var.shape)}")
    var = pred_var.clamp(*VAR_CLAMP)
    k = pred_mean.shape[1]
    per_pixel = k * torch.log(var[:, 0]) + ((pred_mean - target) ** 2).sum(dim=1) / var[:, 0]
    return _reduce(per_pixel)


def loss_for(cov_mode: str, loss: str):
    """Pick the objective for a covariance mode / loss-name pair.

    Returns a callable ``(mean, target, var) -> scalar`` on pixel tensors.
    """
    if loss == "l2":
        return lambda m, y, v=None: l2_loss(m, y)
    if cov_mode == "diagonal":
        return nll_diagonal
    if cov_mode == "isotropic":
        return nll_isotropic
    raise InputError("the NLL loss needs a variance head (cov_mode isotropic or diagonal)")
