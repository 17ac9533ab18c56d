import math

import numpy as np
import pytest

from ctseg.augment import (
    AugmentConfig,
    apply_policy,
    gaussian_noise,
    interpolate_slices,
    range_shift,
    rotate,
    rotate_by,
    skip_slices,
)
from ctseg.errors import TooFewSlicesError
from ctseg.volume import CtVolume, LabelVolume, UnitState


def norm_volume(arr, spacing=(1.0, 1.0, 1.0)):
    arr = np.asarray(arr, dtype=np.float32)
    nz, ny, nx = arr.shape
    return CtVolume((nx, ny, nz), spacing, arr, UnitState.NORMALIZED)


def label_volume(arr, spacing=(1.0, 1.0, 1.0)):
    arr = np.asarray(arr, dtype=np.uint8)
    nz, ny, nx = arr.shape
    return LabelVolume((nx, ny, nz), spacing, arr, 3)


class TestGaussianNoise:
    def test_zero_sigma_identity(self):
        vol = norm_volume(np.random.default_rng(0).normal(size=(2, 4, 4)))
        assert gaussian_noise(vol, 0.0, seed=1) is vol

    def test_matches_prng_trace(self):
        arr = np.zeros((2, 4, 4), dtype=np.float32)
        out = gaussian_noise(norm_volume(arr), 0.05, seed=42)
        expected = np.random.default_rng(42).normal(0.0, 0.05, size=(2, 4, 4))
        assert np.allclose(out.voxels, expected.astype(np.float32))

    def test_deterministic_per_seed(self):
        vol = norm_volume(np.ones((2, 3, 3)))
        a = gaussian_noise(vol, 0.1, seed=7).voxels
        b = gaussian_noise(vol, 0.1, seed=7).voxels
        c = gaussian_noise(vol, 0.1, seed=8).voxels
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_large_sample_statistics(self):
        vol = norm_volume(np.zeros((20, 64, 64)))
        out = gaussian_noise(vol, 0.05, seed=0)
        assert abs(float(out.voxels.mean())) < 1e-3
        assert float(out.voxels.std()) == pytest.approx(0.05, rel=0.02)

    def test_rejects_hounsfield_input(self):
        vol = CtVolume((2, 2, 1), (1, 1, 1),
                       np.zeros((1, 2, 2), dtype=np.int16), UnitState.HOUNSFIELD)
        with pytest.raises(ValueError):
            gaussian_noise(vol, 0.05, seed=0)


class TestSkipSlices:
    def test_drop_count_and_endpoints(self):
        nz = 20
        arr = np.arange(nz, dtype=np.float32)[:, None, None] * np.ones((1, 3, 3))
        vol = norm_volume(arr, spacing=(1, 1, 2.0))
        lab = label_volume(np.zeros((nz, 3, 3)))
        out_vol, out_lab = skip_slices(vol, lab, 0.1, seed=0)
        assert out_vol.nz == 18
        # first and last slices are never dropped
        assert out_vol.voxels[0, 0, 0] == 0
        assert out_vol.voxels[-1, 0, 0] == nz - 1
        # relative order preserved
        kept = out_vol.voxels[:, 0, 0]
        assert np.all(np.diff(kept) > 0)
        assert out_lab.nz == 18

    def test_thickness_scaled_to_preserve_extent(self):
        vol = norm_volume(np.zeros((20, 2, 2)), spacing=(1, 1, 2.0))
        out, _ = skip_slices(vol, None, 0.1, seed=0)
        assert out.spacing[2] == pytest.approx(2.0 * 20 / 18)

    def test_rate_below_one_slice_is_identity(self):
        vol = norm_volume(np.zeros((5, 2, 2)))
        out, _ = skip_slices(vol, None, 0.1, seed=0)
        assert out is vol

    def test_never_drops_below_two_slices(self):
        vol = norm_volume(np.zeros((4, 2, 2)))
        out, _ = skip_slices(vol, None, 0.99, seed=0)
        assert out.nz == 2

    def test_single_slice_rejected(self):
        with pytest.raises(TooFewSlicesError):
            skip_slices(norm_volume(np.zeros((1, 2, 2))), None, 0.5, seed=0)


class TestInterpolateSlices:
    def test_inserted_slice_is_neighbor_mean(self):
        arr = np.stack([np.full((2, 2), 0.0), np.full((2, 2), 4.0)])
        vol = norm_volume(arr)
        lab = label_volume(np.stack([np.full((2, 2), 1), np.full((2, 2), 2)]))
        out_vol, out_lab = interpolate_slices(vol, lab, 1.0, seed=0)
        assert out_vol.nz == 3
        assert np.all(out_vol.voxels[1] == 2.0)
        # inserted labels copy the lower neighbor
        assert np.all(out_lab.labels[1] == 1)
        assert out_vol.spacing[2] == pytest.approx(2.0 / 3.0)

    def test_insert_count(self):
        vol = norm_volume(np.random.default_rng(0)
                          .normal(size=(21, 2, 2)).astype(np.float32))
        out, _ = interpolate_slices(vol, None, 0.1, seed=1)
        assert out.nz == 23  # floor(0.1 * 20) = 2 insertions

    def test_zero_rate_identity(self):
        vol = norm_volume(np.zeros((5, 2, 2)))
        out, lab = interpolate_slices(vol, None, 0.0, seed=0)
        assert out is vol and lab is None


class TestRangeShift:
    def test_uniform_scalar_applied_everywhere(self):
        arr = np.random.default_rng(0).normal(size=(2, 3, 3)).astype(np.float32)
        vol = norm_volume(arr)
        out, shift = range_shift(vol, 0.1, seed=5)
        assert -0.1 <= shift <= 0.1
        assert np.allclose(out.voxels - arr, np.float32(shift), atol=1e-7)

    def test_matches_prng_trace(self):
        _, shift = range_shift(norm_volume(np.zeros((1, 2, 2))), 0.1, seed=9)
        expected = float(np.random.default_rng(9).uniform(-0.1, 0.1))
        assert shift == expected

    def test_zero_delta(self):
        vol = norm_volume(np.zeros((1, 2, 2)))
        out, shift = range_shift(vol, 0.0, seed=0)
        assert out is vol and shift == 0.0


class TestRotate:
    def test_zero_angle_identity(self):
        vol = norm_volume(np.random.default_rng(0)
                          .normal(size=(2, 8, 8)).astype(np.float32))
        lab = label_volume(np.zeros((2, 8, 8)))
        out_vol, out_lab = rotate_by(vol, lab, 0.0)
        assert out_vol is vol and out_lab is lab

    def test_90_degrees_permutes_pixels(self):
        # odd grid so the center lands on a pixel; 90 degrees maps the
        # grid onto itself exactly even through bilinear weights
        arr = np.arange(25, dtype=np.float32).reshape(1, 5, 5)
        vol = norm_volume(arr)
        out, _ = rotate_by(vol, None, 90.0)
        assert np.allclose(out.voxels[0], np.rot90(arr[0], k=-1), atol=1e-5)

    def test_rotation_preserves_center_value(self):
        arr = np.zeros((1, 9, 9), dtype=np.float32)
        arr[0, 4, 4] = 7.0
        for theta in (5.0, 13.0, -16.0):
            out, _ = rotate_by(norm_volume(arr), None, theta)
            assert out.voxels[0, 4, 4] == pytest.approx(7.0, abs=1e-5)

    def test_back_and_forth_small_angle_residual(self):
        y, x = np.meshgrid(np.linspace(0, 1, 32), np.linspace(0, 1, 32),
                           indexing="ij")
        arr = np.sin(3 * x + 2 * y)[None].astype(np.float32)
        vol = norm_volume(arr)
        fwd, _ = rotate_by(vol, None, 10.0)
        back, _ = rotate_by(fwd, None, -10.0)
        core = (slice(0, 1), slice(8, 24), slice(8, 24))
        # bilinear smoothing keeps this approximate, not exact
        assert float(np.abs(back.voxels[core] - arr[core]).mean()) < 0.02

    def test_labels_keep_value_set(self):
        rng = np.random.default_rng(2)
        lab = label_volume(rng.integers(0, 3, size=(2, 16, 16)))
        vol = norm_volume(rng.normal(size=(2, 16, 16)).astype(np.float32))
        _, out_lab = rotate_by(vol, lab, 12.5)
        assert set(np.unique(out_lab.labels)) <= {0, 1, 2}

    def test_out_of_support_filled_with_minimum(self):
        arr = np.full((1, 8, 8), 3.0, dtype=np.float32)
        arr[0, 0, 0] = -1.0
        out, _ = rotate_by(norm_volume(arr), None, 45.0)
        # corners leave the support under a 45 degree rotation
        assert out.voxels.min() == pytest.approx(-1.0)

    def test_random_angle_within_bounds(self):
        vol = norm_volume(np.zeros((1, 8, 8)))
        for seed in range(20):
            _, _, theta = rotate(vol, None, 16.0, seed=seed)
            assert -16.0 <= theta <= 16.0

    def test_max_angle_validated(self):
        with pytest.raises(ValueError):
            rotate(norm_volume(np.zeros((1, 4, 4))), None, 90.0, seed=0)


class TestApplyPolicy:
    def _batch(self, n=4, nz=10):
        rng = np.random.default_rng(0)
        batch = []
        for _ in range(n):
            vol = norm_volume(rng.normal(size=(nz, 12, 12)).astype(np.float32))
            lab = label_volume(rng.integers(0, 3, size=(nz, 12, 12)))
            batch.append((vol, lab))
        return batch

    def test_deterministic(self):
        cfg = AugmentConfig()
        a, ta = apply_policy(self._batch(), cfg, mode="2D", seed=3)
        b, tb = apply_policy(self._batch(), cfg, mode="2D", seed=3)
        assert ta == tb
        for (va, la), (vb, lb) in zip(a, b):
            assert np.array_equal(va.voxels, vb.voxels)
            assert np.array_equal(la.labels, lb.labels)

    def test_gate_rates_over_many_seeds(self):
        cfg = AugmentConfig()
        hits_2d = sum(
            "noise" in apply_policy(self._batch(1, 4), cfg, "2D", seed=s)[1].applied
            for s in range(300)
        )
        hits_3d = sum(
            "noise" in apply_policy(self._batch(1, 4), cfg, "3D", seed=s)[1].applied
            for s in range(300)
        )
        assert abs(hits_2d / 300 - 0.9) < 0.06
        assert abs(hits_3d / 300 - 0.8) < 0.08
        assert hits_2d > hits_3d

    def test_shift_rate_over_many_seeds(self):
        cfg = AugmentConfig(policy_2d=0.0)  # isolate the shift gate
        n = 0
        for s in range(400):
            _, trace = apply_policy(self._batch(1, 4), cfg, "2D", seed=s)
            n += sum(x is not None for x in trace.shifts)
        assert abs(n / 400 - 0.2) < 0.06

    def test_batchwide_rotation_angle(self):
        cfg = AugmentConfig(policy_2d=1.0, shift_prob=0.0)
        _, trace = apply_policy(self._batch(3), cfg, "2D", seed=1)
        assert trace.angle_deg is not None
        assert abs(trace.angle_deg) <= cfg.rot_max_deg
        assert trace.applied == ("noise", "skip", "interpolate", "rotate")

    def test_chain_off_leaves_volumes_untouched(self):
        cfg = AugmentConfig(policy_2d=0.0, shift_prob=0.0)
        batch = self._batch(2)
        out, trace = apply_policy(batch, cfg, "2D", seed=0)
        assert trace.applied == ()
        for (vi, _), (vo, _) in zip(batch, out):
            assert np.array_equal(vi.voxels, vo.voxels)

    def test_single_slice_volume_survives(self):
        cfg = AugmentConfig(policy_2d=1.0)
        vol = norm_volume(np.zeros((1, 6, 6)))
        lab = label_volume(np.zeros((1, 6, 6)))
        out, _ = apply_policy([(vol, lab)], cfg, "2D", seed=0)
        assert out[0][0].nz == 1

    def test_trace_line_format(self):
        cfg = AugmentConfig(policy_2d=1.0, shift_prob=0.0)
        _, trace = apply_policy(self._batch(2), cfg, "2D", seed=1)
        line = trace.as_line("b007")
        fields = line.split("\t")
        assert fields[0] == "b007"
        assert fields[1].startswith("noise,")
        assert len(fields) == 4

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            apply_policy([], AugmentConfig(), "2D", seed=0)


def test_config_roundtrip(tmp_path):
    cfg = AugmentConfig(noise_sigma=0.07, rot_max_deg=12.0, shift_prob=0.3)
    path = tmp_path / "aug.cfg"
    cfg.save(path)
    assert AugmentConfig.load(path) == cfg


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(policy_2d=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(noise_sigma=-0.1)
