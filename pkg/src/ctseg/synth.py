"""Synthetic CT phantoms for desk-scale testing.

Each phantom is a body ellipse of soft tissue in air with rib-like bone
arcs near its boundary, an organ ellipsoid (class 1) and a tumor
ellipsoid (class 2) strictly inside the organ. Gaussian HU noise is added to the
intensities and clamped to the valid HU range; labels follow the clean
geometry only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Manifest, ManifestRecord
from .errors import GeometryError
from .volume import (
    HU_MAX,
    HU_MIN,
    CtVolume,
    LabelVolume,
    UnitState,
    save_labels,
    save_volume,
)

NUM_CLASSES = 3


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 64, 24)
    spacing: tuple[float, float, float] = (1.0, 1.0, 5.0)
    hu_air: float = -1000.0
    hu_soft: float = 40.0
    hu_organ: float = 100.0
    hu_tumor: float = 55.0
    hu_bone: float = 700.0
    # in-plane semi-axis ranges, as fractions of the half-extent
    organ_frac: tuple[float, float] = (0.20, 0.32)
    tumor_frac: tuple[float, float] = (0.35, 0.50)  # relative to the organ axes
    organ_z_frac: tuple[float, float] = (0.55, 0.85)
    noise_std: float = 10.0
    body_radius: float = 0.92   # body ellipse, normalized in-plane radius
    bone_inner: float = 0.87    # bone arcs occupy [bone_inner, body_radius]
    bone_arcs: int = 8          # rib-like arc segments along the ring
    bone_arc_half_rad: float = 0.034

    def __post_init__(self):
        for mean in (self.hu_air, self.hu_soft, self.hu_organ,
                     self.hu_tumor, self.hu_bone):
            if not (HU_MIN <= mean <= HU_MAX):
                raise ValueError(f"HU mean {mean} outside [{HU_MIN}, {HU_MAX}]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not (0 < self.tumor_frac[0] <= self.tumor_frac[1] < 1):
            raise ValueError("tumor_frac must keep the tumor inside the organ")


def _ellipsoid_mask(shape, center, axes):
    """Boolean mask of an axis-aligned ellipsoid in voxel coordinates.

    shape is (nz, ny, nx); center and axes are (cx, cy, cz) / (ax, ay, az).
    """
    nz, ny, nx = shape
    z = np.arange(nz)[:, None, None]
    y = np.arange(ny)[None, :, None]
    x = np.arange(nx)[None, None, :]
    cx, cy, cz = center
    ax, ay, az = axes
    return (((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2
            + ((z - cz) / az) ** 2) <= 1.0


def _draw_geometry(cfg: PhantomConfig, rng):
    nx, ny, nz = cfg.dims
    half_x, half_y = (nx - 1) / 2.0, (ny - 1) / 2.0
    half_z = (nz - 1) / 2.0

    o_ax = rng.uniform(*cfg.organ_frac) * half_x
    o_ay = rng.uniform(*cfg.organ_frac) * half_y
    o_az = rng.uniform(*cfg.organ_z_frac) * half_z
    if min(o_ax, o_ay, o_az) < 1.0:
        raise GeometryError(
            f"dims {cfg.dims} too small for an organ of at least one voxel radius"
        )
    # organ center: keep the whole organ inside the bone ring
    margin_x = (cfg.bone_inner - 0.02) * half_x - o_ax
    margin_y = (cfg.bone_inner - 0.02) * half_y - o_ay
    margin_z = half_z - o_az
    if margin_x < 0 or margin_y < 0 or margin_z < 0:
        raise GeometryError("organ does not fit inside the body")
    o_cx = half_x + rng.uniform(-margin_x, margin_x) * 0.6
    o_cy = half_y + rng.uniform(-margin_y, margin_y) * 0.6
    o_cz = half_z + rng.uniform(-margin_z, margin_z) * 0.5

    lam = rng.uniform(*cfg.tumor_frac)
    t_ax, t_ay, t_az = lam * o_ax, lam * o_ay, lam * o_az
    if min(t_ax, t_ay, t_az) < 0.5:
        raise GeometryError("tumor collapses below half a voxel")
    # offset bound keeps the tumor bounding box inside the organ ellipsoid:
    # sum over axes of ((|off| + t) / o)^2 <= 3 * limit^2 <= 0.95
    limit = 0.95 / math.sqrt(3.0)
    if lam >= limit:
        raise GeometryError("tumor_frac too large for guaranteed containment")
    t_cx = o_cx + rng.uniform(-1, 1) * (limit - lam) * o_ax
    t_cy = o_cy + rng.uniform(-1, 1) * (limit - lam) * o_ay
    t_cz = o_cz + rng.uniform(-1, 1) * (limit - lam) * o_az
    return (o_cx, o_cy, o_cz), (o_ax, o_ay, o_az), (t_cx, t_cy, t_cz), (t_ax, t_ay, t_az)


def generate_phantom(cfg: PhantomConfig, seed):
    """Deterministic labeled phantom for the given seed."""
    rng = np.random.default_rng(seed)
    nx, ny, nz = cfg.dims
    shape = (nz, ny, nx)
    half_x, half_y = (nx - 1) / 2.0, (ny - 1) / 2.0

    yy, xx = np.meshgrid(
        (np.arange(ny) - half_y) / half_y,
        (np.arange(nx) - half_x) / half_x,
        indexing="ij",
    )
    r2 = xx ** 2 + yy ** 2
    body = r2 <= cfg.body_radius ** 2
    # rib-like bone arcs: keeping bone under ~1% of the voxels lets the
    # 0.99-quantile window clamp it out of the soft-tissue/organ range
    band = body & (r2 >= cfg.bone_inner ** 2)
    theta = np.arctan2(yy, xx)
    centers = np.linspace(-np.pi, np.pi, cfg.bone_arcs, endpoint=False)
    ang_dist = np.abs(
        (theta[..., None] - centers[None, None, :] + np.pi) % (2 * np.pi) - np.pi
    ).min(axis=-1)
    bone = band & (ang_dist <= cfg.bone_arc_half_rad)

    o_c, o_a, t_c, t_a = _draw_geometry(cfg, rng)
    organ = _ellipsoid_mask(shape, o_c, o_a)
    tumor = _ellipsoid_mask(shape, t_c, t_a)

    hu = np.full(shape, cfg.hu_air, dtype=np.float64)
    hu[:, body] = cfg.hu_soft
    hu[:, bone] = cfg.hu_bone
    hu[organ] = cfg.hu_organ
    hu[tumor] = cfg.hu_tumor
    if cfg.noise_std > 0:
        hu += rng.normal(0.0, cfg.noise_std, size=shape)
    hu = np.clip(np.rint(hu), HU_MIN, HU_MAX).astype(np.int16)

    labels = np.zeros(shape, dtype=np.uint8)
    labels[organ] = 1
    labels[tumor] = 2

    volume = CtVolume(cfg.dims, cfg.spacing, hu, UnitState.HOUNSFIELD)
    label_volume = LabelVolume(cfg.dims, cfg.spacing, labels, NUM_CLASSES)
    return volume, label_volume


def generate_dataset(n, out_dir, slice_range=(12, 32), thickness_range=(1.0, 5.0),
                     seed=0, base_cfg: PhantomConfig = PhantomConfig()):
    """Write n phantom volume/label pairs plus a manifest under out_dir.

    Slice counts and thicknesses vary across the given ranges so that
    fold assignment by slice count is exercised. Returns the Manifest;
    the manifest file itself is written as out_dir/manifest.tsv.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = slice_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad slice_range {slice_range}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        nz = int(rng.integers(lo, hi + 1))
        thickness = float(rng.uniform(*thickness_range))
        cfg = PhantomConfig(
            dims=(base_cfg.dims[0], base_cfg.dims[1], nz),
            spacing=(base_cfg.spacing[0], base_cfg.spacing[1], thickness),
            hu_air=base_cfg.hu_air, hu_soft=base_cfg.hu_soft,
            hu_organ=base_cfg.hu_organ, hu_tumor=base_cfg.hu_tumor,
            hu_bone=base_cfg.hu_bone, organ_frac=base_cfg.organ_frac,
            tumor_frac=base_cfg.tumor_frac, organ_z_frac=base_cfg.organ_z_frac,
            noise_std=base_cfg.noise_std, body_radius=base_cfg.body_radius,
            bone_inner=base_cfg.bone_inner,
        )
        vol, lab = generate_phantom(cfg, int(rng.integers(2**63)))
        vid = f"ph{i:03d}"
        vol_path = out / f"{vid}.ctv"
        lab_path = out / f"{vid}.lbl"
        save_volume(vol, vol_path)
        save_labels(lab, lab_path)
        records.append(ManifestRecord(
            id=vid,
            volume_path=str(vol_path),
            label_path=str(lab_path),
            slice_count=nz,
            slice_thickness=thickness,
        ))
    manifest = Manifest(records)
    manifest.save(out / "manifest.tsv")
    return manifest
