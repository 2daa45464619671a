"""Synthetic multi-temporal scenes, preprocessing conventions and dataset files.

Scenes
------
A clear target ``y`` ``[K, H, W]`` is built from a piecewise land-cover map
(argmax of smooth random fields) with per-class spectra, smooth
within-class variation and fine texture.  Each date is the target with a
small drift (per-band gain and offset jitter of up to 2% plus a smooth
field), darkened under cast shadows and alpha-blended with a procedural
cloud: opaque clouds (opacity 1, whitening) or haze (opacity below 1, band
dependent transmission).  Every scene has its own cloudiness level drawn
around ``cloud_prob`` and the coverage of each date is drawn around that
level, so some scenes are persistently cloudy and others mostly clear.
SAR-like channels are derived from the target structure with
multiplicative speckle and never see clouds.  ``masks`` mark pixels with
cloud opacity above 0.5.

Randomness comes from independent substreams keyed on
``(seed, scene_id, date, purpose)``, so a scene is a pure function of the
config and its id, a longer series extends a shorter one date by date,
and changing cloud settings leaves drift and SAR untouched.

Files
-----
``root/synthconfig.txt``  generator config (``[synth]`` section)
``root/manifest.txt``     one ``split<TAB>path<TAB>scene_id`` line per sample
``root/<split>/scene_<id>.bin``  ASCII header ending in ``end\\n``, then the
raw little-endian arrays in header order (see :func:`write_sample`).
"""
from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import betaincinv

from . import config as cfgio
from .config import SynthConfig
from .errors import InputError, LoadError

SPLITS = ("train", "val", "test")
FORMAT_VERSION = 1
MAGIC = "CLOUDRECON-SAMPLE"
MANIFEST_MAGIC = "# cloudrecon manifest v1"

S1_CLIP_DB = ((-25.0, 0.0), (-32.5, 0.0))  # VV, VH
S2_SCALE = 1000.0
S2_VISIBLE = (1, 2, 3)  # B2, B3, B4 of the 13-band layout

DRIFT_GAIN = 0.02
DRIFT_OFFSET = 0.02
DRIFT_FIELD = 0.01
SHADOW_FACTOR = 0.6
HAZE_BLUE_BOOST = 0.4  # haze opacity falls off by this fraction from first to last band
_COVERAGE_CONCENTRATION = 8.0
_SCENE_CONCENTRATION = 8.0
_EDGE_WIDTH = 0.3


class SampleNotFound(LoadError, IndexError):
    pass


@dataclass
class MultiTempSample:
    x: np.ndarray  # [T, K + C_S1, H, W] float32, optical bands first
    y: np.ndarray  # [K, H, W] float32
    masks: np.ndarray  # [T, H, W] uint8
    scene_id: int
    split: str = ""
    dates: tuple[int, ...] = ()
    channels: tuple[str, ...] = ()

    @property
    def k(self) -> int:
        return self.y.shape[0]

    @property
    def optical(self) -> np.ndarray:
        return self.x[:, : self.k]


@dataclass
class SceneLayers:
    """Generator internals for a scene, for testing and diagnostics."""

    opacity: np.ndarray  # [T, H, W]
    shadow: np.ndarray  # [T, H, W], darkening weight in [0, 1]
    clear: np.ndarray  # [T, K, H, W] drifted target before shadows and clouds
    sar_db: np.ndarray  # [T, C_S1, H, W]
    coverage: np.ndarray = field(default_factory=lambda: np.zeros(0))  # requested per-date coverage


def drift_bound(cfg: SynthConfig) -> float:
    """Upper bound on ``|clear - y|`` for any pixel, band and date."""
    return (DRIFT_GAIN + DRIFT_OFFSET + DRIFT_FIELD) * cfg.out_scale


# -- preprocessing -----------------------------------------------------------------


def preprocess_s2(raw, out_scale: float = 5.0) -> np.ndarray:
    """Digital numbers to model range: divide by 1000, clip to ``[0, out_scale]``."""
    raw = np.asarray(raw, dtype=np.float64)
    return np.clip(raw / S2_SCALE, 0.0, out_scale)


def preprocess_s1(raw_db) -> np.ndarray:
    """Clip VV to [-25, 0] dB and VH to [-32.5, 0] dB, then rescale each to [0, 1]."""
    raw_db = np.asarray(raw_db, dtype=np.float64)
    if raw_db.shape[0] != 2:
        raise InputError(f"expected [2, H, W] VV/VH backscatter, got {raw_db.shape}")
    out = np.empty_like(raw_db)
    for c, (lo, hi) in enumerate(S1_CLIP_DB):
        out[c] = (np.clip(raw_db[c], lo, hi) - lo) / (hi - lo)
    return out


def synth_cloud_mask(optical, threshold: float, bands=None) -> np.ndarray:
    """Brightness-threshold cloud mask: 1 where the mean over ``bands`` exceeds ``threshold``."""
    optical = np.asarray(optical, dtype=np.float64)
    sel = optical if bands is None else optical[list(bands)]
    return (sel.mean(axis=0) > threshold).astype(np.uint8)


def least_cloudy_baseline(sample: MultiTempSample) -> np.ndarray:
    """Optical frame of the date with the fewest masked pixels (earliest on ties)."""
    t = int(np.argmin(sample.masks.reshape(sample.masks.shape[0], -1).sum(axis=1)))
    return sample.optical[t]


# -- generator ---------------------------------------------------------------------


def _rng(cfg: SynthConfig, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=key))


def _smooth(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(a)
    h, w = a.shape[-2:]
    if abs(dy) >= h or abs(dx) >= w:
        return out
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd] = a[..., ys, xs]
    return out


def _target(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    h, w, k = cfg.h, cfg.w, cfg.k
    n_classes = 4
    scale = max(h, w)
    cover = np.stack([_smooth(rng, (h, w), scale / 8) for _ in range(n_classes)]).argmax(axis=0)
    spectra = rng.uniform(0.08, 0.6, size=(n_classes, k))
    band_gain = rng.uniform(0.5, 1.5, size=k)
    variation = 0.06 * band_gain[:, None, None] * _smooth(rng, (h, w), scale / 16)[None]
    texture = 0.03 * rng.uniform(0.3, 1.0, size=k)[:, None, None] * _smooth(rng, (k, h, w), (0, 1.0, 1.0))
    y = spectra[cover].transpose(2, 0, 1) + variation + texture
    return np.clip(y, 0.02, 0.95) * cfg.out_scale


def _sar_db(cfg: SynthConfig, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    unit = y / cfg.out_scale
    brightness = unit.mean(axis=0)
    gy, gx = np.gradient(unit.mean(axis=0))
    edges = np.hypot(gx, gy)
    edges = edges / (edges.max() + 1e-12)
    channels = []
    for c in range(cfg.c_s1):
        if c % 2 == 0:
            db = -21.0 + 25.0 * brightness + 6.0 * edges
        else:
            db = -28.0 + 30.0 * unit[min(cfg.k - 1, c)] + 10.0 * edges
        # multiplicative 4-look speckle in the linear power domain
        speckle = rng.gamma(4.0, 0.25, size=db.shape)
        channels.append(10.0 * np.log10(10 ** (db / 10.0) * speckle))
    return np.stack(channels) if channels else np.zeros((0,) + y.shape[1:])


def _sar_unit(sar_db: np.ndarray) -> np.ndarray:
    out = np.empty_like(sar_db)
    for c in range(sar_db.shape[0]):
        lo, hi = S1_CLIP_DB[c % 2]
        out[c] = (np.clip(sar_db[c], lo, hi) - lo) / (hi - lo)
    return out


def _beta_quantile(mean: float, concentration: float, u: float) -> float:
    if mean <= 0.0:
        return 0.0
    if mean >= 1.0:
        return 1.0
    return float(betaincinv(concentration * mean, concentration * (1.0 - mean), u))


def _scene_cloudiness(cfg: SynthConfig, scene_id: int) -> float:
    """Scene-level mean coverage; some places are simply cloudier than others."""
    u = _rng(cfg, scene_id, 0, 1).random()
    return _beta_quantile(cfg.cloud_prob, _SCENE_CONCENTRATION, u)


def _coverage(level: float, rng: np.random.Generator) -> float:
    u = rng.random()  # always drawn so the stream layout does not depend on the level
    return _beta_quantile(level, _COVERAGE_CONCENTRATION, u)


def _cloud(cfg: SynthConfig, level: float, rng: np.random.Generator):
    """Opacity field, its peak opacity and the band-wise cloud reflectance of one date."""
    h, w, k = cfg.h, cfg.w, cfg.k
    coverage = _coverage(level, rng)
    opaque = rng.random() < cfg.opaque_fraction
    lo, hi = cfg.haze_opacity_range
    alpha = 1.0 if opaque else float(rng.uniform(lo, hi))
    field_ = _smooth(rng, (h, w), max(h, w) / 10) + 0.15 * _smooth(rng, (h, w), 1.5)
    color = rng.uniform(0.8, 0.95) + 0.05 * _smooth(rng, (k, h, w), (0, 2.0, 2.0))
    if coverage <= 0.0:
        opacity = np.zeros((h, w))
    elif coverage >= 1.0:
        opacity = np.full((h, w), alpha)
    else:
        # place the soft edge so that exactly the requested fraction has opacity > 0.5
        thr = np.quantile(field_, 1.0 - coverage)
        if alpha > 0.5:
            thr -= _EDGE_WIDTH * (0.5 / alpha - 0.5)
        opacity = alpha * np.clip(0.5 + (field_ - thr) / _EDGE_WIDTH, 0.0, 1.0)
    return opacity, opaque, np.clip(color, 0.0, 1.0) * cfg.out_scale, coverage


def generate_layers(cfg: SynthConfig, scene_id: int) -> tuple[MultiTempSample, SceneLayers]:
    y = _target(cfg, _rng(cfg, scene_id, 0, 0))
    level = _scene_cloudiness(cfg, scene_id)
    k = cfg.k
    band = np.linspace(0.0, 1.0, k) if k > 1 else np.zeros(1)
    xs, masks, ops, shadows, clears, sars, covs = [], [], [], [], [], [], []
    for t in range(cfg.t):
        drift_rng = _rng(cfg, scene_id, t + 1, 0)
        gain = drift_rng.uniform(-DRIFT_GAIN, DRIFT_GAIN, size=(k, 1, 1))
        offset = drift_rng.uniform(-DRIFT_OFFSET, DRIFT_OFFSET, size=(k, 1, 1)) * cfg.out_scale
        smooth = _smooth(drift_rng, (cfg.h, cfg.w), max(cfg.h, cfg.w) / 6)
        smooth = DRIFT_FIELD * cfg.out_scale * smooth / (np.abs(smooth).max() + 1e-12)
        clear = y * (1.0 + gain) + offset + smooth[None]

        opacity, opaque, color, cov = _cloud(cfg, level, _rng(cfg, scene_id, t + 1, 1))
        shadow = _shift(opacity, *cfg.shadow_offset)
        ground = clear * (1.0 - (1.0 - SHADOW_FACTOR) * shadow)[None]
        band_opacity = opacity[None] * (1.0 if opaque else (1.0 - HAZE_BLUE_BOOST * band)[:, None, None])
        optical = np.clip((1.0 - band_opacity) * ground + band_opacity * color, 0.0, cfg.out_scale)

        sar_db = _sar_db(cfg, y, _rng(cfg, scene_id, t + 1, 2))
        xs.append(np.concatenate([optical, _sar_unit(sar_db)]))
        masks.append(opacity > 0.5)
        ops.append(opacity)
        shadows.append(shadow)
        clears.append(clear)
        sars.append(sar_db)
        covs.append(cov)
    names = tuple(f"B{i + 1}" for i in range(k)) + tuple(
        ("VV", "VH")[c] if c < 2 else f"S1_{c}" for c in range(cfg.c_s1)
    )
    sample = MultiTempSample(
        x=np.stack(xs).astype(np.float32),
        y=y.astype(np.float32),
        masks=np.stack(masks).astype(np.uint8),
        scene_id=int(scene_id),
        split=split_of(scene_id),
        dates=tuple(range(cfg.t)),
        channels=names,
    )
    layers = SceneLayers(np.stack(ops), np.stack(shadows), np.stack(clears), np.stack(sars), np.asarray(covs))
    return sample, layers


def generate_scene(cfg: SynthConfig, scene_id: int) -> MultiTempSample:
    return generate_layers(cfg, scene_id)[0]


# -- splits ------------------------------------------------------------------------


def split_of(scene_id: int) -> str:
    """Deterministic 80/10/10 split assignment from a hash of the scene id."""
    digest = hashlib.blake2b(f"scene-{int(scene_id)}".encode(), digest_size=8).digest()
    bucket = int.from_bytes(digest, "little") % 10
    return "train" if bucket < 8 else ("val" if bucket == 8 else "test")


def scene_ids(cfg: SynthConfig) -> dict[str, list[int]]:
    """First ``n_<split>`` scene ids (in increasing order) that hash into each split."""
    want = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    out: dict[str, list[int]] = {s: [] for s in SPLITS}
    sid = 0
    while any(len(out[s]) < want[s] for s in SPLITS):
        s = split_of(sid)
        if len(out[s]) < want[s]:
            out[s].append(sid)
        sid += 1
    return out


# -- files -------------------------------------------------------------------------


def _header(sample: MultiTempSample, arrays: list[tuple[str, np.ndarray]], crc: int) -> bytes:
    lines = [
        MAGIC,
        f"version = {FORMAT_VERSION}",
        f"scene_id = {sample.scene_id}",
        f"split = {sample.split}",
        f"dates = {','.join(map(str, sample.dates))}",
        f"channels = {','.join(sample.channels)}",
    ]
    for name, arr in arrays:
        lines.append(f"array = {name} {arr.dtype.str} {','.join(map(str, arr.shape))}")
    lines.append(f"crc32 = {crc}")
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("ascii")


def write_sample(sample: MultiTempSample, path: str | Path) -> Path:
    """Write one sample: ASCII header, then x (<f4), y (<f4), masks (|u1)."""
    path = Path(path)
    arrays = [
        ("x", np.ascontiguousarray(sample.x, dtype="<f4")),
        ("y", np.ascontiguousarray(sample.y, dtype="<f4")),
        ("masks", np.ascontiguousarray(sample.masks, dtype="|u1")),
    ]
    payload = b"".join(a.tobytes() for _, a in arrays)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_header(sample, arrays, zlib.crc32(payload)) + payload)
    return path


def read_sample_file(path: str | Path) -> MultiTempSample:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as exc:
        raise SampleNotFound(f"{path}: no such sample file") from exc
    end = blob.find(b"\nend\n")
    if not blob.startswith(MAGIC.encode()) or end < 0:
        raise LoadError(f"{path}: not a sample file")
    meta: dict[str, str] = {}
    arrays = []
    for line in blob[:end].decode("ascii").splitlines()[1:]:
        key, _, value = line.partition(" = ")
        if key == "array":
            name, dtype, shape = value.split()
            arrays.append((name, np.dtype(dtype), tuple(int(s) for s in shape.split(","))))
        else:
            meta[key] = value
    if int(meta.get("version", -1)) != FORMAT_VERSION:
        raise LoadError(f"{path}: unsupported sample format version {meta.get('version')}")
    payload = blob[end + len(b"\nend\n"):]
    if zlib.crc32(payload) != int(meta["crc32"]):
        raise LoadError(f"{path}: payload checksum mismatch (corrupt file)")
    out, offset = {}, 0
    for name, dtype, shape in arrays:
        n = int(np.prod(shape)) * dtype.itemsize
        if offset + n > len(payload):
            raise LoadError(f"{path}: truncated payload")
        out[name] = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape)
        offset += n
    dates = tuple(int(d) for d in meta["dates"].split(",") if d)
    return MultiTempSample(
        x=out["x"].astype(np.float32),
        y=out["y"].astype(np.float32),
        masks=out["masks"].astype(np.uint8),
        scene_id=int(meta["scene_id"]),
        split=meta["split"],
        dates=dates,
        channels=tuple(c for c in meta["channels"].split(",") if c),
    )


def write_dataset(cfg: SynthConfig, root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfgio.write(root / "synthconfig.txt", cfg)
    lines = [MANIFEST_MAGIC]
    for split, ids in scene_ids(cfg).items():
        for sid in ids:
            rel = f"{split}/scene_{sid}.bin"
            write_sample(generate_scene(cfg, sid), root / rel)
            lines.append(f"{split}\t{rel}\t{sid}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return root


def read_manifest(root: str | Path) -> dict[str, list[str]]:
    root = Path(root)
    path = root / "manifest.txt"
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise LoadError(f"{path}: dataset manifest not found") from exc
    lines = text.splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise LoadError(f"{path}: not a version {FORMAT_VERSION} manifest")
    out: dict[str, list[str]] = {s: [] for s in SPLITS}
    for line in lines[1:]:
        if not line.strip():
            continue
        split, rel, _ = line.split("\t")
        out.setdefault(split, []).append(rel)
    return out


def read_synth_config(root: str | Path) -> SynthConfig:
    path = Path(root) / "synthconfig.txt"
    try:
        return cfgio.read(path, SynthConfig)
    except FileNotFoundError as exc:
        raise LoadError(f"{path}: generator config not found") from exc


def read_sample(root: str | Path, split: str, index: int) -> MultiTempSample:
    paths = read_manifest(root).get(split, [])
    if not 0 <= index < len(paths):
        raise SampleNotFound(f"{root}: split {split!r} has no sample {index} ({len(paths)} samples)")
    return read_sample_file(Path(root) / paths[index])


def read_split(root: str | Path, split: str) -> list[MultiTempSample]:
    paths = read_manifest(root).get(split)
    if paths is None:
        raise SampleNotFound(f"{root}: no split {split!r}")
    return [read_sample_file(Path(root) / p) for p in paths]


def stack_split(samples: list[MultiTempSample], t: int | None = None, use_sar: bool = True):
    """Stack samples into ``x [N, T, C, H, W]``, ``y [N, K, H, W]``, ``masks [N, T, H, W]``.

    ``t`` keeps the first ``t`` dates (it may not exceed the stored length);
    ``use_sar=False`` drops the SAR channels.
    """
    if not samples:
        raise InputError("no samples to stack")
    stored = samples[0].x.shape[0]
    t = stored if t is None else t
    if not 1 <= t <= stored:
        raise InputError(f"requested {t} dates but the dataset stores {stored}")
    k = samples[0].k
    x = np.stack([s.x[:t] if use_sar else s.x[:t, :k] for s in samples])
    y = np.stack([s.y for s in samples])
    masks = np.stack([s.masks[:t] for s in samples])
    return x, y, masks
