import io
import struct

import numpy as np
import pytest

from ctseg.errors import (
    FormatError,
    NormalizationError,
    RangeError,
    TruncationError,
)
from ctseg.volume import (
    HEADER_SIZE,
    CtVolume,
    LabelVolume,
    ProbMap,
    UnitState,
    read_labels,
    read_probmap,
    read_volume,
    write_labels,
    write_probmap,
    write_volume,
)


def roundtrip_volume(vol):
    buf = io.BytesIO()
    write_volume(vol, buf)
    buf.seek(0)
    return read_volume(buf)


def test_write_volume_bytes_match_hand_composed_header():
    vol = CtVolume((2, 2, 1), (1.0, 1.0, 5.0),
                   np.array([[[-1000, 0], [40, 700]]], dtype=np.int16),
                   UnitState.HOUNSFIELD)
    buf = io.BytesIO()
    n = write_volume(vol, buf)
    expected_header = struct.pack(
        "<4sHBBIIIfffBB14x",
        b"CTV1", 1, 0, 0, 2, 2, 1, 1.0, 1.0, 5.0, 0, 0,
    )
    expected_payload = struct.pack("<4h", -1000, 0, 40, 700)
    assert buf.getvalue() == expected_header + expected_payload
    assert n == HEADER_SIZE + 8


def test_volume_roundtrip_identity():
    vol = CtVolume((2, 2, 1), (1.0, 1.0, 5.0),
                   np.array([[[-1000, 0], [40, 700]]], dtype=np.int16),
                   UnitState.HOUNSFIELD)
    back = roundtrip_volume(vol)
    assert back.dims == vol.dims
    assert back.spacing == vol.spacing
    assert back.unit_state == vol.unit_state
    assert np.array_equal(back.voxels, vol.voxels)


def test_single_voxel_zero_payload():
    vol = CtVolume((1, 1, 1), (1.0, 1.0, 1.0),
                   np.zeros((1, 1, 1), dtype=np.int16), UnitState.HOUNSFIELD)
    buf = io.BytesIO()
    write_volume(vol, buf)
    assert buf.getvalue()[HEADER_SIZE:] == b"\x00\x00"


def test_bad_magic_rejected():
    vol = CtVolume((1, 1, 1), (1.0, 1.0, 1.0),
                   np.zeros((1, 1, 1), dtype=np.int16), UnitState.HOUNSFIELD)
    buf = io.BytesIO()
    write_volume(vol, buf)
    data = bytearray(buf.getvalue())
    data[:4] = b"XXXX"
    with pytest.raises(FormatError):
        read_volume(io.BytesIO(bytes(data)))


def test_truncated_payload_rejected():
    # header declares 2x2x2 but carries a 2x2x1 payload (8 bytes)
    header = struct.pack(
        "<4sHBBIIIfffBB14x", b"CTV1", 1, 0, 0, 2, 2, 2, 1.0, 1.0, 1.0, 0, 0
    )
    payload = struct.pack("<4h", 1, 2, 3, 4)
    with pytest.raises(TruncationError):
        read_volume(io.BytesIO(header + payload))


def test_out_of_range_hu_rejected():
    header = struct.pack(
        "<4sHBBIIIfffBB14x", b"CTV1", 1, 0, 0, 1, 1, 1, 1.0, 1.0, 1.0, 0, 0
    )
    payload = struct.pack("<h", 3500)
    with pytest.raises(RangeError):
        read_volume(io.BytesIO(header + payload))


def test_labels_roundtrip():
    lab = LabelVolume((3, 2, 2), (1.0, 1.0, 2.0),
                      np.arange(12).reshape(2, 2, 3) % 3, 3)
    buf = io.BytesIO()
    write_labels(lab, buf)
    buf.seek(0)
    back = read_labels(buf)
    assert back.dims == lab.dims
    assert back.num_classes == 3
    assert np.array_equal(back.labels, lab.labels)


def test_probmap_unnormalized_voxel_rejected():
    header = struct.pack(
        "<4sHBBIIIfffBB14x", b"PRB1", 1, 0, 0, 1, 1, 1, 1.0, 1.0, 1.0, 1, 2
    )
    payload = struct.pack("<2f", 0.9, 0.6)  # sums to 1.5
    with pytest.raises(NormalizationError):
        read_probmap(io.BytesIO(header + payload))


def test_probmap_roundtrip_bit_exact():
    pm = ProbMap((1, 1, 1), (1.0, 1.0, 1.0),
                 np.array([0.2, 0.3, 0.5], dtype=np.float32).reshape(3, 1, 1, 1), 3)
    buf = io.BytesIO()
    write_probmap(pm, buf)
    raw = buf.getvalue()
    assert raw[HEADER_SIZE:] == np.array([0.2, 0.3, 0.5], dtype="<f4").tobytes()
    buf.seek(0)
    back = read_probmap(buf)
    assert back.probs.tobytes() == pm.probs.tobytes()


def test_file_size_is_header_plus_payload():
    rng = np.random.default_rng(0)
    for _ in range(10):
        nx, ny, nz = rng.integers(1, 8, size=3)
        vol = CtVolume(
            (int(nx), int(ny), int(nz)), (1.0, 1.0, 1.0),
            rng.integers(-1024, 3072, size=(nz, ny, nx)).astype(np.int16),
            UnitState.HOUNSFIELD,
        )
        buf = io.BytesIO()
        n = write_volume(vol, buf)
        assert n == len(buf.getvalue()) == HEADER_SIZE + 2 * nx * ny * nz


def test_randomized_roundtrips_all_types():
    rng = np.random.default_rng(1)
    for _ in range(50):
        nx, ny, nz = (int(v) for v in rng.integers(1, 6, size=3))
        spacing = tuple(float(s) for s in rng.uniform(0.5, 5.0, size=3).astype(np.float32))
        vol = CtVolume((nx, ny, nz), spacing,
                       rng.integers(-1024, 3072, size=(nz, ny, nx)).astype(np.int16),
                       UnitState.HOUNSFIELD)
        back = roundtrip_volume(vol)
        assert np.array_equal(back.voxels, vol.voxels)
        assert back.spacing == vol.spacing

        lab = LabelVolume((nx, ny, nz), spacing,
                          rng.integers(0, 3, size=(nz, ny, nx)), 3)
        buf = io.BytesIO()
        write_labels(lab, buf)
        buf.seek(0)
        assert np.array_equal(read_labels(buf).labels, lab.labels)

        raw = rng.random(size=(3, nz, ny, nx))
        raw /= raw.sum(axis=0, keepdims=True)
        pm = ProbMap((nx, ny, nz), spacing, raw.astype(np.float32), 3)
        buf = io.BytesIO()
        write_probmap(pm, buf)
        buf.seek(0)
        assert read_probmap(buf).probs.tobytes() == pm.probs.tobytes()


def test_header_fuzzing_never_yields_invalid_objects():
    vol = CtVolume((2, 3, 2), (1.0, 1.0, 1.0),
                   np.zeros((2, 3, 2), dtype=np.int16), UnitState.HOUNSFIELD)
    buf = io.BytesIO()
    write_volume(vol, buf)
    base = buf.getvalue()
    rng = np.random.default_rng(7)
    for _ in range(300):
        data = bytearray(base)
        for _ in range(rng.integers(1, 4)):
            pos = int(rng.integers(0, len(data)))
            data[pos] = int(rng.integers(0, 256))
        try:
            out = read_volume(io.BytesIO(bytes(data)))
        except Exception as exc:
            from ctseg.errors import CtsegError
            assert isinstance(exc, CtsegError), type(exc)
        else:
            # successful parse must satisfy every invariant
            nx, ny, nz = out.dims
            assert out.voxels.shape == (nz, ny, nx)
            assert all(s > 0 for s in out.spacing)
            if out.unit_state == UnitState.HOUNSFIELD:
                assert out.voxels.min() >= -1024 and out.voxels.max() <= 3071


def test_constructor_rejects_bad_shapes_and_ranges():
    with pytest.raises(FormatError):
        CtVolume((2, 2, 2), (1, 1, 1), np.zeros((1, 2, 2)), UnitState.HOUNSFIELD)
    with pytest.raises(FormatError):
        CtVolume((1, 1, 1), (0, 1, 1), np.zeros((1, 1, 1)), UnitState.HOUNSFIELD)
    with pytest.raises(RangeError):
        CtVolume((1, 1, 1), (1, 1, 1),
                 np.full((1, 1, 1), 4000), UnitState.HOUNSFIELD)
    with pytest.raises(RangeError):
        LabelVolume((1, 1, 1), (1, 1, 1), np.full((1, 1, 1), 5), 3)
    with pytest.raises(NormalizationError):
        ProbMap((1, 1, 1), (1, 1, 1),
                np.array([0.9, 0.6], dtype=np.float32).reshape(2, 1, 1, 1), 2)
