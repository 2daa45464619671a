"""Multi-temporal reconstruction network with an aleatoric variance head.

The network has three stages applied along one main branch:

1. a shared per-date encoder (pointwise stem + ``n_e`` group-normalised
   MBConv blocks) working at full resolution,
2. a lightweight temporal attention module that computes per-pixel
   attention masks over the dates on a max-pooled grid, upsamples them
   bilinearly and uses them to aggregate the full-resolution features
   (channel-grouped, one group per head),
3. a decoder of ``n_d`` batch-normalised MBConv blocks and a pointwise head
   emitting ``k`` sigmoid-bounded reconstruction channels plus zero, one or
   ``k`` softplus variance channels depending on ``cov_mode``.

Batched tensors are ``[B, T, C, H, W]``; unbatched ``[T, C, H, W]`` inputs
are accepted everywhere and get a leading batch axis added.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import VAR_FLOOR, ModelConfig
from .errors import ConfigError, InputError

# sigmoid outputs are kept this far from the interval ends so that the
# reconstruction stays strictly inside (0, out_scale) in float32
_SIGMOID_EPS = 1e-6
# softplus(_UNIT_VAR_BIAS) == 1
_UNIT_VAR_BIAS = math.log(math.e - 1.0)


@dataclass
class FeatureSequence:
    values: torch.Tensor  # [B, T, d_m, H, W]
    positions: torch.Tensor  # [B, T]


@dataclass
class AttentionMasks:
    """Temporal attention masks.

    In eval mode both arrays sum to one over the date axis at every pixel
    and head.  In train mode dropout is applied to ``full_res`` (kept
    entries are rescaled by ``1 / (1 - p)``), so its sums are not one.
    """

    low_res: torch.Tensor  # [B, n_head, T, H_low, W_low]
    full_res: torch.Tensor  # [B, n_head, T, H, W]


@dataclass
class Prediction:
    mean: torch.Tensor  # [B, K, H, W]
    variance: torch.Tensor | None  # [B, K, H, W], [B, 1, H, W] or None

    def per_channel_variance(self) -> torch.Tensor | None:
        """Variance broadcast to ``[B, K, H, W]`` (isotropic mode repeats the shared value)."""
        if self.variance is None:
            return None
        return self.variance.expand_as(self.mean)


def _norm(kind: str, channels: int, groups: int) -> nn.Module:
    if kind == "group":
        return nn.GroupNorm(groups, channels)
    return nn.BatchNorm2d(channels)


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, rd_channels: int):
        super().__init__()
        self.conv_reduce = nn.Conv2d(channels, rd_channels, 1)
        self.act = nn.ReLU(inplace=True)
        self.conv_expand = nn.Conv2d(rd_channels, channels, 1)

    def forward(self, x):
        s = x.mean((2, 3), keepdim=True)
        s = self.conv_expand(self.act(self.conv_reduce(s)))
        return x * torch.sigmoid(s)


class MBConv(nn.Module):
    """Inverted residual block ``dim -> 2*dim -> dim`` with squeeze-excitation.

    Layout: pointwise expand, norm, SiLU; 3x3 depthwise, norm, SiLU;
    squeeze-excitation; pointwise project, norm; identity shortcut.  The SE
    bottleneck width is ``round(dim * se_ratio)``, i.e. relative to the block
    input rather than the expanded width.
    """

    def __init__(self, dim: int, se_ratio: float = 0.25, norm: str = "batch", groups: int = 4):
        super().__init__()
        hidden = 2 * dim
        self.conv_pw = nn.Conv2d(dim, hidden, 1, bias=False)
        self.norm1 = _norm(norm, hidden, groups)
        self.conv_dw = nn.Conv2d(hidden, hidden, 3, padding=1, padding_mode="reflect", groups=hidden, bias=False)
        self.norm2 = _norm(norm, hidden, groups)
        self.act = nn.SiLU(inplace=True)
        self.se = SqueezeExcite(hidden, max(1, round(dim * se_ratio)))
        self.conv_pwl = nn.Conv2d(hidden, dim, 1, bias=False)
        self.norm3 = _norm(norm, dim, groups)

    def forward(self, x):
        shortcut = x
        x = self.act(self.norm1(self.conv_pw(x)))
        x = self.act(self.norm2(self.conv_dw(x)))
        x = self.se(x)
        x = self.norm3(self.conv_pwl(x))
        return x + shortcut


def sinusoid_table(positions: torch.Tensor, d: int, period: float = 1000.0) -> torch.Tensor:
    """Sinusoidal encoding of ``positions`` ``[..., T]`` into ``[..., T, d]``."""
    i = torch.arange(d, dtype=torch.float32, device=positions.device)
    denom = torch.pow(torch.tensor(period, dtype=torch.float32), 2 * torch.div(i, 2, rounding_mode="floor") / d)
    table = positions.to(torch.float32)[..., None] / denom
    return torch.where(i.long() % 2 == 0, torch.sin(table), torch.cos(table))


class TemporalAttention(nn.Module):
    """Mask-only lightweight temporal attention.

    Each low-resolution pixel's sequence is group-normalised, re-projected
    ``d_m -> 2*d_m``, given a positional encoding, and scored against one
    learnt master query per head.  Only the softmax masks are returned; the
    attention-weighted low-resolution features are never formed.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d_model = 2 * cfg.d_m
        self.in_norm = nn.GroupNorm(cfg.n_head, cfg.d_m)
        self.inconv = nn.Linear(cfg.d_m, d_model)
        self.query = nn.Parameter(torch.empty(cfg.n_head, cfg.d_k))
        self.fc_k = nn.Linear(d_model, cfg.n_head * cfg.d_k)
        self.dropout = nn.Dropout(cfg.attn_dropout)
        nn.init.normal_(self.query, std=math.sqrt(2.0 / cfg.d_k))
        nn.init.xavier_normal_(self.fc_k.weight, gain=0.1)
        nn.init.zeros_(self.fc_k.bias)

    def pool_stride(self, h: int, w: int) -> int:
        r = self.cfg.low_res
        if r > min(h, w):
            raise ConfigError(f"low_res={r} exceeds the feature map size {h}x{w}")
        if h % r or w % r or h // r != w // r:
            raise ConfigError(f"feature map {h}x{w} cannot be max-pooled onto a {r}x{r} grid with an integer stride")
        return h // r

    def forward(self, f: FeatureSequence) -> AttentionMasks:
        x = f.values
        b, t, d, h, w = x.shape
        if t == 0:
            raise InputError("cannot attend over an empty time series")
        stride = self.pool_stride(h, w)
        low = x.reshape(b * t, d, h, w)
        if stride > 1:
            low = F.max_pool2d(low, stride)
        hl, wl = low.shape[-2:]
        # [B*hl*wl, T, d]
        seq = low.reshape(b, t, d, hl, wl).permute(0, 3, 4, 1, 2).reshape(b * hl * wl, t, d)
        seq = self.in_norm(seq.transpose(1, 2)).transpose(1, 2)
        seq = self.inconv(seq)
        if self.cfg.positional_encoding:
            n = self.cfg.n_head
            pe = sinusoid_table(f.positions, seq.shape[-1] // n, self.cfg.pe_period).repeat(1, 1, n)
            pe = pe[:, None, None].expand(b, hl, wl, t, -1).reshape(b * hl * wl, t, -1)
            seq = seq + pe
        keys = self.fc_k(seq).view(-1, t, self.cfg.n_head, self.cfg.d_k)
        scores = torch.einsum("nthd,hd->nht", keys, self.query) / math.sqrt(self.cfg.d_k)
        attn = torch.softmax(scores, dim=-1)
        low_res = attn.view(b, hl, wl, self.cfg.n_head, t).permute(0, 3, 4, 1, 2).contiguous()
        if (hl, wl) == (h, w):
            full = low_res
        else:
            full = F.interpolate(
                low_res.view(b, -1, hl, wl), size=(h, w), mode="bilinear", align_corners=False
            ).view(b, self.cfg.n_head, t, h, w)
        return AttentionMasks(low_res=low_res, full_res=self.dropout(full))


def aggregate(f: FeatureSequence | torch.Tensor, masks: AttentionMasks | torch.Tensor, n_head: int) -> torch.Tensor:
    """Channel-grouped weighted sum over dates.

    Channels are split into ``n_head`` contiguous groups; group ``g`` is
    summed over time with head ``g``'s full-resolution mask.
    """
    x = f.values if isinstance(f, FeatureSequence) else f
    m = masks.full_res if isinstance(masks, AttentionMasks) else masks
    b, t, d, h, w = x.shape
    if d % n_head:
        raise ConfigError(f"{d} channels cannot be split into {n_head} equal groups")
    if m.shape != (b, n_head, t, h, w):
        raise ConfigError(f"mask shape {tuple(m.shape)} does not match features {tuple(x.shape)} with {n_head} heads")
    grouped = x.view(b, t, n_head, d // n_head, h, w)
    out = (grouped * m.transpose(1, 2)[:, :, :, None]).sum(dim=1)
    return out.reshape(b, d, h, w)


class CloudRemovalNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Conv2d(cfg.c_in, cfg.d_m, 1)
        self.encoder = nn.Sequential(
            *[MBConv(cfg.d_m, cfg.se_expansion, "group", cfg.norm_groups) for _ in range(cfg.n_e)]
        )
        self.attention = TemporalAttention(cfg)
        self.decoder = nn.Sequential(*[MBConv(cfg.d_m, cfg.se_expansion, "batch") for _ in range(cfg.n_d)])
        self.head = nn.Conv2d(cfg.d_m, cfg.c_out, 1)
        if cfg.var_channels:
            with torch.no_grad():
                self.head.bias[cfg.k:] = _UNIT_VAR_BIAS

    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 4:
            x = x[None]
        if x.dim() != 5:
            raise ConfigError(f"expected input [B, T, C, H, W] or [T, C, H, W], got shape {tuple(x.shape)}")
        if x.shape[1] == 0:
            raise InputError("input time series is empty")
        if x.shape[2] != self.cfg.c_in:
            raise ConfigError(f"input has {x.shape[2]} channels, model expects c_in={self.cfg.c_in}")
        if not torch.isfinite(x).all():
            raise InputError("input contains non-finite values")
        return x

    def encode_shared(self, x: torch.Tensor, positions: torch.Tensor | None = None) -> FeatureSequence:
        x = self._check_input(x)
        b, t, c, h, w = x.shape
        # all dates go through the same weights as independent batch items
        feats = self.encoder(self.stem(x.reshape(b * t, c, h, w)))
        if positions is None:
            positions = torch.arange(t, device=x.device).expand(b, t)
        elif positions.dim() == 1:
            positions = positions.expand(b, t)
        return FeatureSequence(values=feats.view(b, t, self.cfg.d_m, h, w), positions=positions)

    def temporal_attention(self, f: FeatureSequence) -> AttentionMasks:
        return self.attention(f)

    def aggregate(self, f: FeatureSequence, masks: AttentionMasks) -> torch.Tensor:
        return aggregate(f, masks, self.cfg.n_head)

    def decode(self, fhat: torch.Tensor) -> Prediction:
        if fhat.dim() == 3:
            fhat = fhat[None]
        out = self.head(self.decoder(fhat))
        k = self.cfg.k
        # affine squash instead of a clamp keeps gradients alive at saturation
        mean = self.cfg.out_scale * (_SIGMOID_EPS + (1.0 - 2.0 * _SIGMOID_EPS) * torch.sigmoid(out[:, :k]))
        variance = F.softplus(out[:, k:]) + VAR_FLOOR if self.cfg.var_channels else None
        return Prediction(mean=mean, variance=variance)

    def forward(self, x: torch.Tensor, positions: torch.Tensor | None = None) -> Prediction:
        f = self.encode_shared(x, positions)
        masks = self.temporal_attention(f)
        return self.decode(self.aggregate(f, masks))


def count_parameters(cfg: ModelConfig | nn.Module) -> int:
    """Number of trainable scalars of the network built from ``cfg``."""
    model = cfg if isinstance(cfg, nn.Module) else CloudRemovalNet(cfg)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
