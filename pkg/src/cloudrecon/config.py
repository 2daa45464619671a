"""Configuration dataclasses and their key = value file format.

All configs are frozen dataclasses.  They serialise to INI-style text
(``[section]`` headers, ``key = value`` lines) via :func:`dumps` and parse
back with :func:`loads`; every field round-trips exactly, floats included.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, TypeVar

from .errors import ConfigError

COV_MODES = ("none", "isotropic", "diagonal")
LOSSES = ("l2", "nll")

# variance floor added after the softplus of the variance head
VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``c_in`` is the number of input channels per date (optical + SAR) and
    ``k`` the number of reconstructed optical bands.  The number of head
    output channels is derived from ``cov_mode`` (see :attr:`c_out`).
    """

    n_e: int = 1
    n_d: int = 5
    d_m: int = 128
    n_head: int = 16
    d_k: int = 4
    c_in: int = 15
    k: int = 13
    cov_mode: str = "diagonal"
    low_res: int = 32
    attn_dropout: float = 0.1
    se_expansion: float = 0.25
    out_scale: float = 5.0
    norm_groups: int = 4
    positional_encoding: bool = True
    pe_period: float = 1000.0

    def __post_init__(self):
        if self.n_e < 0:
            raise ConfigError(f"n_e must be >= 0, got {self.n_e}")
        if self.n_d < 1:
            raise ConfigError(f"n_d must be >= 1, got {self.n_d}")
        if min(self.d_m, self.n_head, self.d_k, self.c_in, self.k, self.low_res) < 1:
            raise ConfigError("d_m, n_head, d_k, c_in, k and low_res must be positive")
        if self.d_m % self.n_head:
            raise ConfigError(f"d_m={self.d_m} is not divisible by n_head={self.n_head}")
        if self.d_m % self.norm_groups:
            raise ConfigError(f"d_m={self.d_m} is not divisible by norm_groups={self.norm_groups}")
        if self.cov_mode not in COV_MODES:
            raise ConfigError(f"cov_mode must be one of {COV_MODES}, got {self.cov_mode!r}")
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ConfigError(f"attn_dropout must lie in [0, 1), got {self.attn_dropout}")
        if not self.se_expansion > 0:
            raise ConfigError("se_expansion must be positive")
        if not self.out_scale > 0:
            raise ConfigError("out_scale must be positive")

    @property
    def c_out(self) -> int:
        if self.cov_mode == "none":
            return self.k
        if self.cov_mode == "isotropic":
            return self.k + 1
        return 2 * self.k

    @property
    def var_channels(self) -> int:
        return self.c_out - self.k


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic scene generator.

    ``cloud_prob`` is the expected cloud-masked fraction of each date; each
    scene draws a cloudiness level around it and each date's coverage is
    drawn around the scene level.  ``n_train``/``n_val``/
    ``n_test`` are the number of scenes per split.
    """

    t: int = 3
    k: int = 4
    c_s1: int = 2
    h: int = 32
    w: int = 32
    cloud_prob: float = 0.5
    haze_opacity_range: tuple[float, float] = (0.6, 0.9)
    opaque_fraction: float = 0.5
    shadow_offset: tuple[int, int] = (3, 4)
    out_scale: float = 1.0
    seed: int = 7
    n_train: int = 200
    n_val: int = 25
    n_test: int = 25

    def __post_init__(self):
        if min(self.t, self.k, self.h, self.w) < 1 or self.c_s1 < 0:
            raise ConfigError("t, k, h, w must be positive and c_s1 non-negative")
        for name in ("cloud_prob", "opaque_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.haze_opacity_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"haze_opacity_range must be a sub-interval of [0, 1], got {self.haze_opacity_range}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split sizes must be non-negative")
        if not self.out_scale > 0:
            raise ConfigError("out_scale must be positive")

    @property
    def c_in(self) -> int:
        return self.k + self.c_s1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 4
    epochs: int = 20
    lr_decay: float = 0.8
    seed: int = 0
    loss: str = "nll"
    checkpoint_dir: str = ""
    eval_every: int = 1
    use_sar: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs, batch_size and eval_every must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")


SECTION_NAMES = {ModelConfig: "model", SynthConfig: "synth", TrainConfig: "train"}

C = TypeVar("C")


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse(text: str, tp: Any) -> Any:
    origin = typing.get_origin(tp)
    if origin is tuple:
        parts = [p.strip() for p in text.split(",") if p.strip()]
        args = typing.get_args(tp)
        if len(parts) != len(args):
            raise ConfigError(f"expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_parse(p, a) for p, a in zip(parts, args))
    if tp is bool:
        low = text.strip().lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text.strip()


def _field_types(cls) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def dumps(*configs: Any, extra: Mapping[str, Mapping[str, Any]] | None = None) -> str:
    """Serialise one or more configs (and optional plain sections) to text."""
    lines: list[str] = []
    for cfg in configs:
        lines.append(f"[{SECTION_NAMES[type(cfg)]}]")
        for f in dataclasses.fields(cfg):
            lines.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
        lines.append("")
    for name, values in (extra or {}).items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_format(v)}" for k, v in values.items())
        lines.append("")
    return "\n".join(lines)


def _parser(text: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config text: {exc}") from exc
    return parser


def loads(text: str, cls: type[C], section: str | None = None) -> C:
    """Parse the section for ``cls`` out of ``text``.

    Missing keys take their dataclass defaults; unknown keys are an error.
    """
    section = section or SECTION_NAMES[cls]
    parser = _parser(text)
    if not parser.has_section(section):
        raise ConfigError(f"config has no [{section}] section")
    types = _field_types(cls)
    values = {}
    for key, raw in parser.items(section):
        if key not in types:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        try:
            values[key] = _parse(raw, types[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
    return cls(**values)


def load_section(text: str, section: str) -> dict[str, str]:
    parser = _parser(text)
    if not parser.has_section(section):
        raise ConfigError(f"config has no [{section}] section")
    return dict(parser.items(section))


def read(path: str | Path, cls: type[C]) -> C:
    return loads(Path(path).read_text(), cls)


def write(path: str | Path, *configs: Any) -> Path:
    path = Path(path)
    path.write_text(dumps(*configs))
    return path


def fingerprint(*configs: Any) -> str:
    """Short stable hash of the serialised configs."""
    return hashlib.sha256(dumps(*configs).encode()).hexdigest()[:12]


def replace(cfg: C, **changes: Any) -> C:
    return dataclasses.replace(cfg, **changes)


__all__ = [
    "COV_MODES", "LOSSES", "VAR_FLOOR", "ModelConfig", "SynthConfig", "TrainConfig",
    "dumps", "loads", "read", "write", "fingerprint", "replace", "load_section",
]
