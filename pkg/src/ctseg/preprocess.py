"""CT preprocessing chain: percentile windowing, sampled z-score
normalization, slice reduction to a fixed depth, and in-plane
downsampling.

Windowing quantiles are computed per volume; normalization statistics are
pooled over a random sample of the dataset. All stochastic steps are pure
functions of (input, seed) via numpy's PCG64 generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateWindowError,
    EmptyInputError,
    NoForegroundError,
    StatsError,
    UpsampleRefusedError,
)
from .volume import CtVolume, LabelVolume, UnitState, load_volume

DEFAULT_SLICES = 16
DEFAULT_TARGET = 128
DEFAULT_SAMPLE_FRACTION = 0.2

# Only the organ preset carries values used in this work; bone/lung are
# named configuration stubs for other body parts.
WINDOW_PRESETS = {
    "organ": (0.60, 0.99),
    "bone": (0.85, 0.999),
    "lung": (0.02, 0.65),
}


@dataclass(frozen=True)
class WindowConfig:
    q_low: float = 0.60
    q_high: float = 0.99
    preset: str = "custom"

    def __post_init__(self):
        if not (0.0 <= self.q_low < self.q_high <= 1.0):
            raise ValueError(
                f"require 0 <= q_low < q_high <= 1, got ({self.q_low}, {self.q_high})"
            )

    @classmethod
    def from_preset(cls, name):
        lo, hi = WINDOW_PRESETS[name]
        return cls(q_low=lo, q_high=hi, preset=name)


@dataclass(frozen=True)
class IntensityStats:
    mean: float
    std: float
    sample_fraction: float
    seed: int
    n_volumes_sampled: int

    def __post_init__(self):
        if not self.std > 0:
            raise StatsError(f"std must be positive, got {self.std}")
        if self.n_volumes_sampled < 1:
            raise StatsError("n_volumes_sampled must be >= 1")

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"mean={self.mean!r}\n")
            fh.write(f"std={self.std!r}\n")
            fh.write(f"sample_fraction={self.sample_fraction!r}\n")
            fh.write(f"seed={self.seed}\n")
            fh.write(f"n_volumes_sampled={self.n_volumes_sampled}\n")

    @classmethod
    def load(cls, path):
        kv = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                key, _, value = line.partition("=")
                kv[key] = value
        return cls(
            mean=float(kv["mean"]),
            std=float(kv["std"]),
            sample_fraction=float(kv["sample_fraction"]),
            seed=int(kv["seed"]),
            n_volumes_sampled=int(kv["n_volumes_sampled"]),
        )


def quantile(values, q) -> float:
    """Linear-interpolation quantile over the flattened input.

    With sorted values v[0..n-1] and position p = q*(n-1), returns
    v[floor(p)] + frac(p) * (v[floor(p)+1] - v[floor(p)]).
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise EmptyInputError("quantile of empty input")
    if not (0.0 <= q <= 1.0):
        raise ValueError(f"q must lie in [0, 1], got {q}")
    return float(np.quantile(flat, q, method="linear"))


def window_bounds(volume: CtVolume, cfg: WindowConfig):
    """Per-volume (lo, hi) clamp bounds from the configured quantiles."""
    lo = quantile(volume.voxels, cfg.q_low)
    hi = quantile(volume.voxels, cfg.q_high)
    if not lo < hi:
        raise DegenerateWindowError(
            f"window collapsed: lo == hi == {lo} "
            f"for quantiles ({cfg.q_low}, {cfg.q_high})"
        )
    return lo, hi


def window(volume: CtVolume, cfg: WindowConfig) -> CtVolume:
    """Clamp intensities to the per-volume quantile range."""
    if volume.unit_state is not UnitState.HOUNSFIELD:
        raise ValueError("window expects a HOUNSFIELD volume")
    lo, hi = window_bounds(volume, cfg)
    out = np.clip(volume.voxels.astype(np.float32), lo, hi)
    return volume.with_voxels(out, unit_state=UnitState.WINDOWED)


def sample_stats(manifest, cfg: WindowConfig, sample_fraction=DEFAULT_SAMPLE_FRACTION,
                 seed=0, loader=None) -> IntensityStats:
    """Pooled windowed-intensity mean and population std over a random,
    seeded sample of the dataset, drawn without replacement.

    `manifest` is any sequence of records with a `volume_path` attribute;
    `loader` maps a record to a CtVolume (defaults to reading CTV1 files).
    """
    records = list(manifest)
    if not records:
        raise EmptyInputError("sample_stats on empty manifest")
    if not (0.0 < sample_fraction <= 1.0):
        raise ValueError(f"sample_fraction must lie in (0, 1], got {sample_fraction}")
    if loader is None:
        loader = lambda rec: load_volume(rec.volume_path)
    n_pick = math.ceil(sample_fraction * len(records))
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(records), size=n_pick, replace=False)

    count = 0
    total = 0.0
    total_sq = 0.0
    n_used = 0
    for idx in picked:
        vol = loader(records[int(idx)])
        try:
            win = window(vol, cfg)
        except DegenerateWindowError:
            continue
        vals = win.voxels.astype(np.float64)
        count += vals.size
        total += float(vals.sum())
        total_sq += float(np.square(vals).sum())
        n_used += 1
    if n_used == 0:
        raise StatsError("every sampled volume had a degenerate window")
    mean = total / count
    var = total_sq / count - mean * mean
    std = math.sqrt(max(var, 0.0))
    if not std > 0:
        raise StatsError("pooled standard deviation is zero")
    return IntensityStats(
        mean=mean,
        std=std,
        sample_fraction=sample_fraction,
        seed=int(seed),
        n_volumes_sampled=n_used,
    )


def normalize(volume: CtVolume, stats: IntensityStats) -> CtVolume:
    """z-score the windowed intensities with dataset-sample statistics."""
    if volume.unit_state is not UnitState.WINDOWED:
        raise ValueError("normalize expects a WINDOWED volume")
    out = (volume.voxels.astype(np.float64) - stats.mean) / stats.std
    return volume.with_voxels(out.astype(np.float32), unit_state=UnitState.NORMALIZED)


def foreground_slices(labels: LabelVolume):
    """z indices of slices containing at least one non-background label."""
    return np.flatnonzero(labels.labels.reshape(labels.nz, -1).any(axis=1))


def select_slices(volume: CtVolume, labels=None, k=DEFAULT_SLICES,
                  training=False, seed=0):
    """Reduce the volume to exactly k slices.

    Training mode draws from slices with foreground labels, without
    replacement when enough exist and with replacement otherwise;
    inference mode draws from all slices. Output is in ascending z order.
    """
    if training and labels is None:
        raise ValueError("training-mode slice selection requires labels")
    if training:
        candidates = foreground_slices(labels)
        if candidates.size == 0:
            raise NoForegroundError("no slice contains foreground labels")
    else:
        candidates = np.arange(volume.nz)
    rng = np.random.default_rng(seed)
    if candidates.size >= k:
        chosen = rng.choice(candidates, size=k, replace=False)
    else:
        chosen = rng.choice(candidates, size=k, replace=True)
    chosen = np.sort(chosen)

    nx, ny, _ = volume.dims
    out_vol = CtVolume(
        (nx, ny, k), volume.spacing, volume.voxels[chosen], volume.unit_state
    )
    out_lab = None
    if labels is not None:
        out_lab = LabelVolume(
            (nx, ny, k), labels.spacing, labels.labels[chosen], labels.num_classes
        )
    return out_vol, out_lab


def _resample_coords(n, target):
    """Pixel-center source coordinates for resampling n -> target."""
    scale = n / target
    return (np.arange(target) + 0.5) * scale - 0.5


def bilinear_resize_slices(stack, target):
    """Bilinearly resample each (ny, nx) plane of a (nz, ny, nx) stack to
    (target, target), sampling at pixel centers with edge clamping."""
    nz, ny, nx = stack.shape
    cy = _resample_coords(ny, target)
    cx = _resample_coords(nx, target)
    y0 = np.clip(np.floor(cy).astype(int), 0, ny - 1)
    y1 = np.clip(y0 + 1, 0, ny - 1)
    fy = np.clip(cy - np.floor(cy), 0.0, 1.0)
    fy[cy < 0] = 0.0
    x0 = np.clip(np.floor(cx).astype(int), 0, nx - 1)
    x1 = np.clip(x0 + 1, 0, nx - 1)
    fx = np.clip(cx - np.floor(cx), 0.0, 1.0)
    fx[cx < 0] = 0.0

    arr = stack.astype(np.float64)
    rows = arr[:, y0, :] * (1.0 - fy)[None, :, None] + arr[:, y1, :] * fy[None, :, None]
    out = rows[:, :, x0] * (1.0 - fx)[None, None, :] + rows[:, :, x1] * fx[None, None, :]
    return out


def nearest_resize_slices(stack, target):
    """Nearest-neighbor plane resampling (for label volumes)."""
    nz, ny, nx = stack.shape
    iy = np.clip(np.floor(_resample_coords(ny, target) + 0.5).astype(int), 0, ny - 1)
    ix = np.clip(np.floor(_resample_coords(nx, target) + 0.5).astype(int), 0, nx - 1)
    return stack[:, iy[:, None], ix[None, :]]


def downsample(volume: CtVolume, labels=None, target=DEFAULT_TARGET):
    """Downsample every slice to target x target; intensities bilinear,
    labels nearest neighbor, in-plane spacing scaled by nx/target."""
    nx, ny, nz = volume.dims
    if nx != ny:
        raise ValueError(f"downsample requires square slices, got {nx}x{ny}")
    if target > nx:
        raise UpsampleRefusedError(f"target {target} exceeds in-plane size {nx}")
    if target == nx:
        return volume, labels
    sx, sy, sz = volume.spacing
    scale = nx / target
    spacing = (sx * scale, sy * scale, sz)
    out = bilinear_resize_slices(volume.voxels, target)
    out_vol = CtVolume(
        (target, target, nz), spacing, out.astype(np.float32)
        if volume.unit_state is not UnitState.HOUNSFIELD
        else np.rint(out).astype(np.int16),
        volume.unit_state,
    )
    out_lab = None
    if labels is not None:
        out_lab = LabelVolume(
            (target, target, nz), spacing,
            nearest_resize_slices(labels.labels, target),
            labels.num_classes,
        )
    return out_vol, out_lab
