"""CT-specific augmentations: Gaussian noise map, slice skipping, slice
interpolation, global range shift, and in-plane rotation, plus the
batch-level application policy.

All operations are pure functions of (input, seed). Fixed application
order inside the chain: noise -> skip -> interpolate -> rotate, then the
optional range shift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import TooFewSlicesError
from .volume import CtVolume, LabelVolume, UnitState

CHAIN_OPS = ("noise", "skip", "interpolate", "rotate")


@dataclass(frozen=True)
class AugmentConfig:
    noise_sigma: float = 0.05
    skip_rate: float = 0.1
    interp_insert_rate: float = 0.1
    shift_max: float = 0.1
    rot_max_deg: float = 16.0
    policy_3d: float = 0.8
    policy_2d: float = 0.9
    shift_prob: float = 0.2

    def __post_init__(self):
        for name in ("skip_rate", "interp_insert_rate", "policy_3d",
                     "policy_2d", "shift_prob"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.rot_max_deg < 0:
            raise ValueError("rot_max_deg must be >= 0")
        if self.noise_sigma < 0 or self.shift_max < 0:
            raise ValueError("noise_sigma and shift_max must be >= 0")

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for key in self.__dataclass_fields__:
                fh.write(f"{key}={getattr(self, key)!r}\n")

    @classmethod
    def load(cls, path):
        kv = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    key, _, value = line.partition("=")
                    kv[key] = float(value)
        return cls(**kv)


@dataclass
class AugmentTrace:
    """What apply_policy actually did to one batch."""
    applied: tuple[str, ...] = ()
    angle_deg: float | None = None
    shifts: tuple[float | None, ...] = ()

    def as_line(self, batch_id):
        ops = ",".join(self.applied) if self.applied else "-"
        angle = f"{self.angle_deg:.6g}" if self.angle_deg is not None else "-"
        shifts = ";".join(
            "-" if s is None else f"{s:.6g}" for s in self.shifts
        ) or "-"
        return f"{batch_id}\t{ops}\t{angle}\t{shifts}"


def gaussian_noise(volume: CtVolume, sigma, seed) -> CtVolume:
    """Add an independent Normal(0, sigma^2) draw to every voxel."""
    if volume.unit_state is not UnitState.NORMALIZED:
        raise ValueError("gaussian_noise expects a NORMALIZED volume")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return volume
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=volume.voxels.shape)
    return volume.with_voxels((volume.voxels + noise).astype(np.float32))


def skip_slices(volume: CtVolume, labels, skip_rate, seed):
    """Drop floor(skip_rate * nz) uniformly chosen interior slices,
    simulating a thicker-slice acquisition; slice thickness metadata is
    scaled to preserve the covered extent."""
    nz = volume.nz
    if nz < 2:
        raise TooFewSlicesError(f"skip_slices needs >= 2 slices, got {nz}")
    n_drop = min(int(skip_rate * nz), nz - 2)
    if n_drop <= 0:
        return volume, labels
    rng = np.random.default_rng(seed)
    interior = np.arange(1, nz - 1)
    dropped = rng.choice(interior, size=n_drop, replace=False)
    keep = np.setdiff1d(np.arange(nz), dropped)

    nx, ny, _ = volume.dims
    sx, sy, sz = volume.spacing
    spacing = (sx, sy, sz * nz / keep.size)
    out_vol = CtVolume(
        (nx, ny, keep.size), spacing, volume.voxels[keep], volume.unit_state
    )
    out_lab = None
    if labels is not None:
        out_lab = LabelVolume(
            (nx, ny, keep.size), spacing, labels.labels[keep], labels.num_classes
        )
    return out_vol, out_lab


def interpolate_slices(volume: CtVolume, labels, insert_rate, seed):
    """Insert the voxelwise mean slice into floor(insert_rate * (nz - 1))
    chosen adjacent gaps, simulating thinner slices. Inserted label
    slices copy the lower-index neighbor (the tie-break for the midpoint)."""
    nz = volume.nz
    if nz < 2:
        raise TooFewSlicesError(f"interpolate_slices needs >= 2 slices, got {nz}")
    n_insert = int(insert_rate * (nz - 1))
    if n_insert <= 0:
        return volume, labels
    rng = np.random.default_rng(seed)
    gaps = np.sort(rng.choice(np.arange(nz - 1), size=n_insert, replace=False))

    vox = volume.voxels
    vol_out = []
    lab_out = [] if labels is not None else None
    gapset = set(int(g) for g in gaps)
    for z in range(nz):
        vol_out.append(vox[z])
        if labels is not None:
            lab_out.append(labels.labels[z])
        if z in gapset:
            mean = (vox[z].astype(np.float64) + vox[z + 1].astype(np.float64)) / 2.0
            vol_out.append(mean.astype(vox.dtype))
            if labels is not None:
                lab_out.append(labels.labels[z])

    nx, ny, _ = volume.dims
    new_nz = nz + n_insert
    sx, sy, sz = volume.spacing
    spacing = (sx, sy, sz * nz / new_nz)
    out_vol = CtVolume(
        (nx, ny, new_nz), spacing, np.stack(vol_out), volume.unit_state
    )
    out_lab = None
    if labels is not None:
        out_lab = LabelVolume(
            (nx, ny, new_nz), spacing, np.stack(lab_out), labels.num_classes
        )
    return out_vol, out_lab


def range_shift(volume: CtVolume, delta, seed) -> CtVolume:
    """Add a single scalar drawn uniformly from [-delta, +delta] to all voxels."""
    if volume.unit_state is not UnitState.NORMALIZED:
        raise ValueError("range_shift expects a NORMALIZED volume")
    if delta == 0:
        return volume, 0.0
    rng = np.random.default_rng(seed)
    shift = float(rng.uniform(-delta, delta))
    return volume.with_voxels((volume.voxels + shift).astype(np.float32)), shift


def _rotate_planes_bilinear(stack, theta_deg, fill):
    nz, ny, nx = stack.shape
    theta = math.radians(theta_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (ny - 1) / 2.0, (nx - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(ny) - cy, np.arange(nx) - cx, indexing="ij")
    # inverse mapping: sample source at R(-theta) applied to output coords
    xs = cos * xx + sin * yy + cx
    ys = -sin * xx + cos * yy + cy

    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = xs - x0
    fy = ys - y0
    valid = (xs >= 0) & (xs <= nx - 1) & (ys >= 0) & (ys <= ny - 1)
    x0c = np.clip(x0, 0, nx - 1)
    x1c = np.clip(x0 + 1, 0, nx - 1)
    y0c = np.clip(y0, 0, ny - 1)
    y1c = np.clip(y0 + 1, 0, ny - 1)

    arr = stack.astype(np.float64)
    v00 = arr[:, y0c, x0c]
    v01 = arr[:, y0c, x1c]
    v10 = arr[:, y1c, x0c]
    v11 = arr[:, y1c, x1c]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    out = top * (1 - fy) + bot * fy
    out = np.where(valid[None, :, :], out, fill)
    return out


def _rotate_planes_nearest(stack, theta_deg, fill):
    nz, ny, nx = stack.shape
    theta = math.radians(theta_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (ny - 1) / 2.0, (nx - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(ny) - cy, np.arange(nx) - cx, indexing="ij")
    xs = cos * xx + sin * yy + cx
    ys = -sin * xx + cos * yy + cy
    xi = np.floor(xs + 0.5).astype(int)
    yi = np.floor(ys + 0.5).astype(int)
    valid = (xi >= 0) & (xi <= nx - 1) & (yi >= 0) & (yi <= ny - 1)
    xi = np.clip(xi, 0, nx - 1)
    yi = np.clip(yi, 0, ny - 1)
    out = stack[:, yi, xi]
    return np.where(valid[None, :, :], out, fill)


def rotate_by(volume: CtVolume, labels, theta_deg):
    """Rotate every slice in-plane by a fixed angle about the slice
    center; intensities bilinear with minimum-value fill, labels nearest
    neighbor with background fill."""
    if theta_deg == 0:
        return volume, labels
    fill = float(volume.voxels.min())
    vox = _rotate_planes_bilinear(volume.voxels, theta_deg, fill)
    out_vol = volume.with_voxels(vox.astype(volume.voxels.dtype, copy=False)
                                 if volume.unit_state is UnitState.HOUNSFIELD
                                 else vox.astype(np.float32))
    out_lab = None
    if labels is not None:
        lab = _rotate_planes_nearest(labels.labels, theta_deg, 0)
        out_lab = LabelVolume(
            labels.dims, labels.spacing, lab.astype(np.uint8), labels.num_classes
        )
    return out_vol, out_lab


def rotate(volume: CtVolume, labels, max_deg, seed):
    """Rotate by an angle drawn uniformly from [-max_deg, +max_deg]."""
    if not (0.0 <= max_deg <= 45.0):
        raise ValueError(f"max_deg must lie in [0, 45], got {max_deg}")
    if max_deg == 0:
        return volume, labels, 0.0
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-max_deg, max_deg)
    out_vol, out_lab = rotate_by(volume, labels, theta)
    return out_vol, out_lab, theta


def apply_policy(batch, cfg: AugmentConfig, mode="2D", seed=0):
    """Apply the augmentation chain to a batch of (volume, labels) pairs.

    The noise/skip/interpolate/rotate chain fires for the whole batch
    with probability policy_2d or policy_3d depending on mode; the range
    shift fires independently per volume with probability shift_prob.
    All draws come from one generator seeded with `seed`.
    """
    if not batch:
        raise ValueError("apply_policy on empty batch")
    if mode not in ("2D", "3D"):
        raise ValueError(f"mode must be '2D' or '3D', got {mode!r}")
    rng = np.random.default_rng(seed)
    gate_p = cfg.policy_2d if mode == "2D" else cfg.policy_3d
    chain_on = rng.random() < gate_p

    angle = None
    if chain_on and cfg.rot_max_deg > 0:
        angle = float(rng.uniform(-cfg.rot_max_deg, cfg.rot_max_deg))

    out = []
    shifts = []
    for vol, lab in batch:
        if chain_on:
            vol = gaussian_noise(vol, cfg.noise_sigma, rng.integers(2**63))
            if vol.nz >= 2:
                vol, lab = skip_slices(vol, lab, cfg.skip_rate, rng.integers(2**63))
                vol, lab = interpolate_slices(
                    vol, lab, cfg.interp_insert_rate, rng.integers(2**63)
                )
            if angle is not None:
                vol, lab = rotate_by(vol, lab, angle)
        if rng.random() < cfg.shift_prob and cfg.shift_max > 0:
            vol, shift = range_shift(vol, cfg.shift_max, rng.integers(2**63))
            shifts.append(shift)
        else:
            shifts.append(None)
        out.append((vol, lab))

    applied = []
    if chain_on:
        applied.extend(CHAIN_OPS if angle is not None else CHAIN_OPS[:3])
    if any(s is not None for s in shifts):
        applied.append("shift")
    trace = AugmentTrace(
        applied=tuple(applied), angle_deg=angle, shifts=tuple(shifts)
    )
    return out, trace
