"""Wireless-sample preprocessing and patch geometry.

Covers the three normalization pipelines (pretraining, image-style
fine-tuning, OFDM-grid fine-tuning), bicubic resizing, patch extraction and
reassembly, fixed 2-D sine-cosine positional codes, and the crop/flip
augmentation used to rebalance small corpora.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from .rng import RngState

MODALITIES = ("spectrogram", "csi", "ofdm-grid")


@dataclass
class GridSample:
    """One image-like wireless sample plus its metadata."""

    data: np.ndarray                      # H x W x C
    modality: str
    label: Optional[int] = None
    position: Optional[np.ndarray] = None  # meters, shape (3,)
    snr_db: Optional[float] = None
    sample_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"sample data must be H x W x C, got shape {self.data.shape}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality: {self.modality}")


@dataclass
class PatchSeq:
    """Flattened patch rows in row-major grid order."""

    patches: np.ndarray                   # N x (P*P*C)
    grid: tuple                           # (rows, cols)
    patch_size: int
    channels: int = 1


@dataclass
class DatasetStats:
    """Dataset-wide range and per-channel moments.

    mean/std may be absent for stats that only feed min-max scaling
    (e.g. channel-estimation targets); standardize() demands them.
    """

    vmin: float
    vmax: float
    mean: Optional[np.ndarray] = None     # (C,)
    std: Optional[np.ndarray] = None      # (C,)

    def __post_init__(self):
        if not self.vmax > self.vmin:
            raise ValueError(f"degenerate stats: max {self.vmax} <= min {self.vmin}")
        if self.std is not None:
            self.std = np.asarray(self.std, dtype=np.float64)
            if (self.std <= 0).any():
                raise ValueError("zero or negative channel std")
        if self.mean is not None:
            self.mean = np.asarray(self.mean, dtype=np.float64)


# -- scalar value transforms -------------------------------------------------


def log_scale(x: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """log10 with a positive floor so zero bins stay finite."""
    x = np.asarray(x)
    if (x < 0).any():
        raise ValueError("log_scale expects nonnegative input")
    return np.log10(np.maximum(x, floor))


def minmax_normalize(x: np.ndarray, stats: DatasetStats, out_range=(0.0, 1.0)) -> np.ndarray:
    """Affine map of [stats.vmin, stats.vmax] onto out_range, clamped."""
    lo, hi = out_range
    y = (np.asarray(x, dtype=np.float64) - stats.vmin) / (stats.vmax - stats.vmin)
    return np.clip(lo + (hi - lo) * y, min(lo, hi), max(lo, hi))


def minmax_invert(y: np.ndarray, stats: DatasetStats, out_range=(0.0, 1.0)) -> np.ndarray:
    lo, hi = out_range
    return stats.vmin + (np.asarray(y, dtype=np.float64) - lo) * (stats.vmax - stats.vmin) / (hi - lo)


def standardize(x: np.ndarray, stats: DatasetStats) -> np.ndarray:
    """Channel-wise (x - mean) / std using dataset statistics."""
    if stats.mean is None or stats.std is None:
        raise ValueError("stats carry no channel moments; fit them first")
    return (np.asarray(x, dtype=np.float64) - stats.mean) / stats.std


def standardize_invert(y: np.ndarray, stats: DatasetStats) -> np.ndarray:
    return np.asarray(y, dtype=np.float64) * stats.std + stats.mean


# -- bicubic resize ------------------------------------------------------------


def _catmull_rom(d: float) -> float:
    # a = -0.5 kernel
    d = abs(d)
    if d <= 1.0:
        return (1.5 * d - 2.5) * d * d + 1.0
    if d < 2.0:
        return ((-0.5 * d + 2.5) * d - 4.0) * d + 2.0
    return 0.0


@lru_cache(maxsize=64)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense row-interpolation matrix (n_out x n_in) for one axis."""
    w = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        # pixel-center convention (align_corners false)
        src = (i + 0.5) * scale - 0.5
        i0 = math.floor(src)
        t = src - i0
        for k in range(-1, 3):
            j = min(max(i0 + k, 0), n_in - 1)  # edge clamp
            w[i, j] += _catmull_rom(t - k)
    return w


def bicubic_resize(x: np.ndarray, out_hw) -> np.ndarray:
    """Separable Catmull-Rom resize of an H x W x C grid.

    An axis already at its target extent is passed through untouched, so an
    identity-size call returns a bit-equal copy.
    """
    x = np.asarray(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
    h, w, _ = x.shape
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if oh < 1 or ow < 1:
        raise ValueError("output extents must be >= 1")
    if (h, w) == (oh, ow):
        out = x.copy()
        return out[:, :, 0] if squeeze else out
    if h < 2 or w < 2:
        raise ValueError("bicubic resize needs at least 2 samples per axis")
    out = x.astype(np.float64, copy=False)
    if oh != h:
        out = np.tensordot(_resize_matrix(h, oh), out, axes=(1, 0))
    if ow != w:
        out = np.tensordot(_resize_matrix(w, ow), out, axes=(1, 1)).transpose(1, 0, 2)
    out = out.astype(x.dtype, copy=False)
    return out[:, :, 0] if squeeze else out


# -- patch geometry -----------------------------------------------------------


def patchify(x: np.ndarray, patch: int) -> PatchSeq:
    """Split H x W x C into non-overlapping P x P tiles, row-major order."""
    x = np.asarray(x)
    h, w, c = x.shape
    if h % patch or w % patch:
        raise ValueError(f"patch size {patch} does not divide grid {h}x{w}")
    rows, cols = h // patch, w // patch
    tiles = x.reshape(rows, patch, cols, patch, c).transpose(0, 2, 1, 3, 4)
    return PatchSeq(tiles.reshape(rows * cols, patch * patch * c), (rows, cols), patch, c)


def unpatchify(seq: PatchSeq) -> np.ndarray:
    rows, cols = seq.grid
    p, c = seq.patch_size, seq.channels
    tiles = seq.patches.reshape(rows, cols, p, p, c).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(rows * p, cols * p, c)


def posembed_2d(rows: int, cols: int, dim: int) -> np.ndarray:
    """Fixed sine-cosine position code: first half row index, second half column."""
    if dim % 4:
        raise ValueError("embedding dim must be divisible by 4")
    half = dim // 2

    def axis_code(pos):
        k = np.arange(half // 2, dtype=np.float64)
        omega = 10000.0 ** (-2.0 * k / half)
        args = pos[:, None] * omega[None, :]
        return np.concatenate([np.sin(args), np.cos(args)], axis=1)

    rr, cc = np.meshgrid(np.arange(rows, dtype=np.float64),
                         np.arange(cols, dtype=np.float64), indexing="ij")
    return np.concatenate([axis_code(rr.reshape(-1)), axis_code(cc.reshape(-1))], axis=1)


# -- augmentation --------------------------------------------------------------


@dataclass
class AugmentPolicy:
    enabled: bool = True
    area_range: tuple = (0.70, 1.0)
    hflip_prob: float = 0.5               # spectrograms only
    target_size: int = 224


def augment(sample: GridSample, rng: RngState, policy: Optional[AugmentPolicy]) -> GridSample:
    """Random area crop plus optional time flip, resized back to target.

    Runs on raw (pre-pipeline) samples and preserves all metadata.  A
    disabled policy is a bit-equal passthrough.
    """
    if policy is None or not policy.enabled:
        return sample
    h, w, _ = sample.data.shape
    area = rng.uniform(lo=policy.area_range[0], hi=policy.area_range[1])
    ch = min(h, max(2, int(round(h * math.sqrt(area)))))
    cw = min(w, max(2, int(round(w * math.sqrt(area)))))
    top = rng.randbelow(h - ch + 1)
    left = rng.randbelow(w - cw + 1)
    data = sample.data[top:top + ch, left:left + cw]
    if sample.modality == "spectrogram" and policy.hflip_prob > 0:
        if rng.uniform() < policy.hflip_prob:
            data = data[:, ::-1]
    data = bicubic_resize(np.ascontiguousarray(data), (policy.target_size, policy.target_size))
    return replace(sample, data=data)


# -- assembled pipelines --------------------------------------------------------

PIPELINE_ORDERS = {
    "pretrain": ("log_scale", "minmax_01", "resize", "standardize"),
    "finetune_image": ("resize", "minmax_01", "standardize"),
    "finetune_ofdm": ("minmax_pm1", "standardize", "resize"),
}


class Pipeline:
    """An ordered, named chain of preprocessing steps over GridSamples."""

    def __init__(self, kind: str, steps, image_size: int):
        self.kind = kind
        self._steps = steps                # list of (name, fn(data, modality) -> data)
        self.image_size = image_size

    @property
    def descriptor(self) -> tuple:
        return tuple(name for name, _ in self._steps)

    def __call__(self, sample: GridSample) -> GridSample:
        data = sample.data
        for _, fn in self._steps:
            data = fn(data, sample.modality)
        return replace(sample, data=data.astype(np.float32))


def make_pipeline(kind: str, stats: DatasetStats, image_size: int,
                  log_floor: float = 1e-12) -> Pipeline:
    size = (image_size, image_size)
    if kind == "pretrain":
        steps = [
            ("log_scale", lambda x, m: log_scale(x, log_floor) if m == "spectrogram" else x),
            ("minmax_01", lambda x, m: minmax_normalize(x, stats, (0.0, 1.0))),
            ("resize", lambda x, m: bicubic_resize(x, size)),
            ("standardize", lambda x, m: standardize(x, stats)),
        ]
    elif kind == "finetune_image":
        steps = [
            ("resize", lambda x, m: bicubic_resize(x, size)),
            ("minmax_01", lambda x, m: minmax_normalize(x, stats, (0.0, 1.0))),
            ("standardize", lambda x, m: standardize(x, stats)),
        ]
    elif kind == "finetune_ofdm":
        steps = [
            ("minmax_pm1", lambda x, m: minmax_normalize(x, stats, (-1.0, 1.0))),
            ("standardize", lambda x, m: standardize(x, stats)),
            ("resize", lambda x, m: bicubic_resize(x, size)),
        ]
    else:
        raise ValueError(f"unknown pipeline kind: {kind}")
    assert tuple(n for n, _ in steps) == PIPELINE_ORDERS[kind]
    return Pipeline(kind, steps, image_size)


def fit_stats(samples, kind: str, image_size: int, log_floor: float = 1e-12) -> DatasetStats:
    """Two-pass statistics fit for one pipeline kind over a training split.

    Pass one runs every step ahead of the min-max stage and takes the global
    range; pass two runs everything ahead of standardization (with the
    fitted range) and takes per-channel moments, so standardized training
    data comes out with mean 0 and unit variance by construction.
    """
    if not samples:
        raise ValueError("cannot fit statistics on an empty split")
    size = (image_size, image_size)

    def pre_range(s: GridSample) -> np.ndarray:
        x = s.data
        if kind == "pretrain" and s.modality == "spectrogram":
            x = log_scale(x, log_floor)
        elif kind == "finetune_image":
            x = bicubic_resize(x, size)
        return np.asarray(x, dtype=np.float64)

    vmin = math.inf
    vmax = -math.inf
    for s in samples:
        x = pre_range(s)
        vmin = min(vmin, float(x.min()))
        vmax = max(vmax, float(x.max()))
    if not vmax > vmin:
        raise ValueError("degenerate dataset: constant values")
    ranged = DatasetStats(vmin, vmax)

    def pre_moments(s: GridSample) -> np.ndarray:
        if kind == "pretrain":
            x = pre_range(s)
            x = minmax_normalize(x, ranged, (0.0, 1.0))
            return bicubic_resize(x, size)
        if kind == "finetune_image":
            return minmax_normalize(pre_range(s), ranged, (0.0, 1.0))
        return minmax_normalize(s.data, ranged, (-1.0, 1.0))

    total = None
    total_sq = None
    count = 0
    for s in samples:
        x = pre_moments(s)
        flat = x.reshape(-1, x.shape[-1]).astype(np.float64)
        if total is None:
            total = flat.sum(axis=0)
            total_sq = (flat * flat).sum(axis=0)
        else:
            total += flat.sum(axis=0)
            total_sq += (flat * flat).sum(axis=0)
        count += flat.shape[0]
    mean = total / count
    var = total_sq / count - mean * mean
    std = np.sqrt(np.maximum(var, 0.0))
    if (std <= 1e-12).any():
        raise ValueError("a channel is constant over the split; refusing zero std")
    return DatasetStats(vmin, vmax, mean, std)
