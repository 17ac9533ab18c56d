"""Volumetric data model and the CTV1/LBL1/PRB1 binary interchange formats.

All three formats share a fixed 48-byte header followed by a raw
little-endian payload in x-fastest, then y, then z order (a slice is a
contiguous plane). Probability maps are class-major: the payload holds
class 0 for every voxel, then class 1, and so on.

Header layout (all multibyte values little-endian):

    offset  size  field
    0       4     magic ("CTV1", "LBL1" or "PRB1")
    4       2     format version (u16, currently 1)
    6       1     unit_state (u8)
    7       1     reserved
    8       12    nx, ny, nz (u32 each)
    20      12    sx, sy, sz (f32 each, millimeters)
    32      1     element code (0 = int16 HU, 1 = float32, 2 = uint8)
    33      1     num_classes (u8; 0 for CTV1)
    34      14    reserved

File size is exactly 48 + nx*ny*nz*element_width (times num_classes for
probability maps).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import (
    FormatError,
    NormalizationError,
    RangeError,
    TruncationError,
    VolumeIOError,
)

HU_MIN = -1024
HU_MAX = 3071

HEADER_SIZE = 48
FORMAT_VERSION = 1
PROB_SUM_TOL = 1e-5

_HEADER = struct.Struct("<4sHBBIIIfffBB14x")

ELEM_INT16 = 0
ELEM_FLOAT32 = 1
ELEM_UINT8 = 2

_ELEM_DTYPE = {
    ELEM_INT16: np.dtype("<i2"),
    ELEM_FLOAT32: np.dtype("<f4"),
    ELEM_UINT8: np.dtype("u1"),
}


class UnitState(IntEnum):
    HOUNSFIELD = 0
    WINDOWED = 1
    NORMALIZED = 2


def _check_dims(dims):
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise FormatError(f"dims must be three counts >= 1, got {dims!r}")
    return tuple(int(d) for d in dims)


def _check_spacing(spacing):
    if len(spacing) != 3 or any(not (float(s) > 0) for s in spacing):
        raise FormatError(f"spacing must be three positive values, got {spacing!r}")
    return tuple(float(s) for s in spacing)


@dataclass(frozen=True)
class CtVolume:
    """3D intensity grid.

    voxels has shape (nz, ny, nx); dims is (nx, ny, nz). HOUNSFIELD
    volumes store int16 in [-1024, 3071], windowed/normalized volumes
    store float32.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    voxels: np.ndarray
    unit_state: UnitState

    def __post_init__(self):
        dims = _check_dims(self.dims)
        spacing = _check_spacing(self.spacing)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        nx, ny, nz = dims
        vox = np.asarray(self.voxels)
        if vox.shape != (nz, ny, nx):
            raise FormatError(
                f"voxel array shape {vox.shape} != (nz, ny, nx) = {(nz, ny, nx)}"
            )
        state = UnitState(self.unit_state)
        object.__setattr__(self, "unit_state", state)
        if state is UnitState.HOUNSFIELD:
            if vox.min(initial=0) < HU_MIN or vox.max(initial=0) > HU_MAX:
                raise RangeError(
                    f"HU values outside [{HU_MIN}, {HU_MAX}]: "
                    f"min={vox.min()} max={vox.max()}"
                )
            vox = vox.astype(np.int16, copy=False)
        else:
            vox = vox.astype(np.float32, copy=False)
        vox = np.ascontiguousarray(vox)
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)

    @property
    def nx(self):
        return self.dims[0]

    @property
    def ny(self):
        return self.dims[1]

    @property
    def nz(self):
        return self.dims[2]

    @property
    def n_voxels(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    def with_voxels(self, voxels, unit_state=None):
        """Copy of this volume with new voxel data (same dims/spacing)."""
        return CtVolume(
            self.dims,
            self.spacing,
            voxels,
            self.unit_state if unit_state is None else unit_state,
        )


@dataclass(frozen=True)
class LabelVolume:
    """Per-voxel class ids (0 = background); shape (nz, ny, nx)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        dims = _check_dims(self.dims)
        spacing = _check_spacing(self.spacing)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        if int(self.num_classes) < 2:
            raise FormatError(f"num_classes must be >= 2, got {self.num_classes}")
        object.__setattr__(self, "num_classes", int(self.num_classes))
        nx, ny, nz = dims
        lab = np.asarray(self.labels)
        if lab.shape != (nz, ny, nx):
            raise FormatError(
                f"label array shape {lab.shape} != (nz, ny, nx) = {(nz, ny, nx)}"
            )
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise RangeError(
                f"labels must lie in [0, {self.num_classes - 1}], "
                f"got min={lab.min()} max={lab.max()}"
            )
        lab = np.ascontiguousarray(lab.astype(np.uint8, copy=False))
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def nz(self):
        return self.dims[2]


@dataclass(frozen=True)
class ProbMap:
    """Per-voxel class probabilities; probs has shape (num_classes, nz, ny, nx)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    probs: np.ndarray
    num_classes: int

    def __post_init__(self):
        dims = _check_dims(self.dims)
        spacing = _check_spacing(self.spacing)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        if int(self.num_classes) < 2:
            raise FormatError(f"num_classes must be >= 2, got {self.num_classes}")
        object.__setattr__(self, "num_classes", int(self.num_classes))
        nx, ny, nz = dims
        p = np.asarray(self.probs, dtype=np.float32)
        if p.shape != (self.num_classes, nz, ny, nx):
            raise FormatError(
                f"prob array shape {p.shape} != {(self.num_classes, nz, ny, nx)}"
            )
        if p.size:
            if p.min() < 0.0 or p.max() > 1.0:
                raise NormalizationError(
                    f"probabilities outside [0, 1]: min={p.min()} max={p.max()}"
                )
            sums = p.sum(axis=0, dtype=np.float64)
            err = np.abs(sums - 1.0).max()
            if err > PROB_SUM_TOL:
                raise NormalizationError(
                    f"per-voxel probability sums deviate from 1 by {err:.3g}"
                )
        p = np.ascontiguousarray(p)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def argmax_labels(self):
        """Hard labels by per-voxel argmax; ties resolve to the lower class id."""
        return LabelVolume(
            self.dims,
            self.spacing,
            np.argmax(self.probs, axis=0).astype(np.uint8),
            self.num_classes,
        )


# --- serialization ---


def _pack_header(magic, unit_state, dims, spacing, elem_code, num_classes):
    nx, ny, nz = dims
    sx, sy, sz = spacing
    return _HEADER.pack(
        magic, FORMAT_VERSION, int(unit_state), 0, nx, ny, nz,
        sx, sy, sz, elem_code, num_classes,
    )


def _write(sink, data):
    try:
        sink.write(data)
    except OSError as exc:
        raise VolumeIOError(f"write failed: {exc}", offset=0) from exc
    return len(data)


def write_volume(volume: CtVolume, sink) -> int:
    """Serialize a CtVolume as CTV1 to a binary sink; returns bytes written."""
    elem = ELEM_INT16 if volume.unit_state is UnitState.HOUNSFIELD else ELEM_FLOAT32
    header = _pack_header(
        b"CTV1", volume.unit_state, volume.dims, volume.spacing, elem, 0
    )
    payload = np.ascontiguousarray(volume.voxels.astype(_ELEM_DTYPE[elem])).tobytes()
    n = _write(sink, header)
    try:
        sink.write(payload)
    except OSError as exc:
        raise VolumeIOError(f"write failed: {exc}", offset=n) from exc
    return n + len(payload)


def write_labels(labels: LabelVolume, sink) -> int:
    header = _pack_header(
        b"LBL1", 0, labels.dims, labels.spacing, ELEM_UINT8, labels.num_classes
    )
    payload = labels.labels.tobytes()
    n = _write(sink, header)
    try:
        sink.write(payload)
    except OSError as exc:
        raise VolumeIOError(f"write failed: {exc}", offset=n) from exc
    return n + len(payload)


def write_probmap(pm: ProbMap, sink) -> int:
    header = _pack_header(
        b"PRB1", 0, pm.dims, pm.spacing, ELEM_FLOAT32, pm.num_classes
    )
    payload = pm.probs.astype("<f4", copy=False).tobytes()
    n = _write(sink, header)
    try:
        sink.write(payload)
    except OSError as exc:
        raise VolumeIOError(f"write failed: {exc}", offset=n) from exc
    return n + len(payload)


def _read_header(source, expected_magic):
    try:
        raw = source.read(HEADER_SIZE)
    except OSError as exc:
        raise VolumeIOError(f"read failed: {exc}", offset=0) from exc
    if len(raw) < HEADER_SIZE:
        raise TruncationError(
            f"header truncated: got {len(raw)} of {HEADER_SIZE} bytes"
        )
    (magic, version, unit_state, _res, nx, ny, nz,
     sx, sy, sz, elem, num_classes) = _HEADER.unpack(raw)
    if magic != expected_magic:
        raise FormatError(f"bad magic {magic!r}, expected {expected_magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if elem not in _ELEM_DTYPE:
        raise FormatError(f"unknown element code {elem}")
    dims = _check_dims((nx, ny, nz))
    spacing = _check_spacing((sx, sy, sz))
    return dims, spacing, unit_state, elem, num_classes


def _read_payload(source, dims, elem, factor=1):
    nx, ny, nz = dims
    dtype = _ELEM_DTYPE[elem]
    expected = nx * ny * nz * factor * dtype.itemsize
    try:
        raw = source.read()
    except OSError as exc:
        raise VolumeIOError(f"read failed: {exc}", offset=HEADER_SIZE) from exc
    if len(raw) != expected:
        raise TruncationError(
            f"payload length {len(raw)} != expected {expected} for dims {dims}"
        )
    return np.frombuffer(raw, dtype=dtype)


def read_volume(source) -> CtVolume:
    """Parse a CTV1 stream; raises typed errors on any malformation."""
    dims, spacing, unit_state, elem, _nc = _read_header(source, b"CTV1")
    try:
        state = UnitState(unit_state)
    except ValueError:
        raise FormatError(f"unknown unit_state {unit_state}") from None
    if state is UnitState.HOUNSFIELD and elem != ELEM_INT16:
        raise FormatError("HOUNSFIELD volumes must use int16 payload")
    if state is not UnitState.HOUNSFIELD and elem != ELEM_FLOAT32:
        raise FormatError("windowed/normalized volumes must use float32 payload")
    flat = _read_payload(source, dims, elem)
    nx, ny, nz = dims
    vox = flat.reshape(nz, ny, nx)
    if elem == ELEM_FLOAT32 and not np.all(np.isfinite(vox)):
        raise RangeError("non-finite intensity values in payload")
    return CtVolume(dims, spacing, vox, state)


def read_labels(source) -> LabelVolume:
    dims, spacing, _state, elem, num_classes = _read_header(source, b"LBL1")
    if elem != ELEM_UINT8:
        raise FormatError(f"LBL1 requires element code {ELEM_UINT8}, got {elem}")
    if num_classes < 2:
        raise FormatError(f"LBL1 num_classes must be >= 2, got {num_classes}")
    flat = _read_payload(source, dims, elem)
    nx, ny, nz = dims
    return LabelVolume(dims, spacing, flat.reshape(nz, ny, nx), num_classes)


def read_probmap(source) -> ProbMap:
    dims, spacing, _state, elem, num_classes = _read_header(source, b"PRB1")
    if elem != ELEM_FLOAT32:
        raise FormatError(f"PRB1 requires element code {ELEM_FLOAT32}, got {elem}")
    if num_classes < 2:
        raise FormatError(f"PRB1 num_classes must be >= 2, got {num_classes}")
    flat = _read_payload(source, dims, elem, factor=num_classes)
    nx, ny, nz = dims
    if not np.all(np.isfinite(flat)):
        raise NormalizationError("non-finite probability values in payload")
    return ProbMap(dims, spacing, flat.reshape(num_classes, nz, ny, nx), num_classes)


# --- path convenience wrappers ---


def save_volume(volume, path):
    with open(path, "wb") as fh:
        return write_volume(volume, fh)


def load_volume(path):
    with open(path, "rb") as fh:
        return read_volume(fh)


def save_labels(labels, path):
    with open(path, "wb") as fh:
        return write_labels(labels, fh)


def load_labels(path):
    with open(path, "rb") as fh:
        return read_labels(fh)


def save_probmap(pm, path):
    with open(path, "wb") as fh:
        return write_probmap(pm, fh)


def load_probmap(path):
    with open(path, "rb") as fh:
        return read_probmap(fh)
