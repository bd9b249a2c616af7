import numpy as np
import pytest

import qsmkit as qk
from qsmkit.volume import (adjoint_difference, forward_difference,
                           masked_mean, wrap_phase)

VS = (1.0, 1.0, 1.0)


def rand_volume(dims, seed, voxel_size=VS):
    rng = np.random.default_rng(seed)
    return qk.ScalarVolume(rng.normal(size=dims), voxel_size)


class TestFourierPair:
    def test_delta_gives_flat_spectrum(self):
        data = np.zeros((8, 8, 8))
        data[0, 0, 0] = 1.0
        spec = qk.fourier_forward(qk.ScalarVolume(data, VS))
        np.testing.assert_allclose(np.abs(spec.data), 1.0, atol=1e-12)

    def test_constant_is_dc_only(self):
        spec = qk.fourier_forward(qk.ScalarVolume(np.full((6, 6, 6), 3.5), VS))
        assert spec.data[0, 0, 0] == pytest.approx(3.5 * 6 ** 3)
        off_dc = np.abs(spec.data).ravel()[1:]
        assert off_dc.max() < 1e-10

    def test_parseval(self):
        # direct evaluation of both sums under the backward normalization
        v = rand_volume((8, 8, 8), seed=0)
        spec = qk.fourier_forward(v)
        lhs = np.sum(v.data ** 2)
        rhs = np.sum(np.abs(spec.data) ** 2) / v.data.size
        assert lhs == pytest.approx(rhs, rel=1e-12)

    @pytest.mark.parametrize("dims", [(8, 8, 8), (17, 13, 9), (64, 64, 64)])
    def test_round_trip(self, dims):
        v = rand_volume(dims, seed=sum(dims))
        back = qk.fourier_inverse(qk.fourier_forward(v))
        err = np.linalg.norm(back.data - v.data) / np.linalg.norm(v.data)
        assert err < 1e-10

    def test_linearity(self):
        a = rand_volume((8, 8, 8), seed=1)
        b = rand_volume((8, 8, 8), seed=2)
        lhs = qk.fourier_forward(a.with_data(2.0 * a.data - 3.0 * b.data))
        rhs = 2.0 * qk.fourier_forward(a).data - 3.0 * qk.fourier_forward(b).data
        np.testing.assert_allclose(lhs.data, rhs, atol=1e-10)

    def test_anisotropic_voxmemory_preserved(self):
        v = rand_volume((8, 8, 8), seed=3, voxel_size=(0.5, 0.5, 2.0))
        back = qk.fourier_inverse(qk.fourier_forward(v))
        assert back.voxel_size == (0.5, 0.5, 2.0)


class TestVolumeTypes:
    def test_rejects_nan(self):
        data = np.zeros((4, 4, 4))
        data[1, 2, 3] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            qk.ScalarVolume(data, VS)

    def test_rejects_nonpositive_voxels(self):
        with pytest.raises(ValueError):
            qk.ScalarVolume(np.zeros((4, 4, 4)), (1.0, 0.0, 1.0))

    def test_rejects_bad_unit(self):
        with pytest.raises(ValueError):
            qk.ScalarVolume(np.zeros((4, 4, 4)), VS, unit="furlongs")

    def test_data_is_immutable(self):
        v = rand_volume((4, 4, 4), seed=4)
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1.0

    def test_grid_mismatch_raises(self):
        a = rand_volume((4, 4, 4), seed=5)
        b = rand_volume((4, 4, 5), seed=6)
        with pytest.raises(qk.GridMismatchError):
            qk.volume.require_same_grid(a, b)

    def test_meta_requires_unit_direction(self):
        with pytest.raises(ValueError):
            qk.AcquisitionMeta(3.0, b0_dir=(0.0, 0.0, 2.0))

    def test_phase_scale_value(self):
        # 2*pi * 42.577478 MHz/T * 3 T * 10.4 ms * 1e-6
        expected = 2 * np.pi * 42.577478e6 * 3.0 * 0.0104 * 1e-6
        assert qk.phase_scale(3.0, 0.0104) == pytest.approx(expected)


class TestWrapPhase:
    def test_range(self):
        rng = np.random.default_rng(7)
        w = wrap_phase(rng.uniform(-50, 50, size=1000))
        assert w.max() <= np.pi and w.min() > -np.pi

    def test_pi_maps_to_pi(self):
        assert wrap_phase(np.array([np.pi]))[0] == pytest.approx(np.pi)
        assert wrap_phase(np.array([-np.pi]))[0] == pytest.approx(np.pi)

    def test_wrap_is_2pi_periodic(self):
        x = np.linspace(-3, 3, 101)
        np.testing.assert_allclose(wrap_phase(x + 2 * np.pi), wrap_phase(x),
                                   atol=1e-12)


class TestErodeMask:
    def test_radius_zero_is_identity(self):
        rng = np.random.default_rng(8)
        m = qk.Mask(rng.random((10, 10, 10)) > 0.4, VS)
        out = qk.erode_mask(m, 0.0)
        np.testing.assert_array_equal(out.data, m.data)

    def test_single_voxel_vanishes(self):
        data = np.zeros((9, 9, 9), dtype=bool)
        data[4, 4, 4] = True
        out = qk.erode_mask(qk.Mask(data, VS), 1.0)
        assert out.count == 0

    def test_negative_radius_rejected(self):
        m = qk.Mask(np.ones((4, 4, 4), dtype=bool), VS)
        with pytest.raises(ValueError):
            qk.erode_mask(m, -1.0)

    def test_all_true_cube_against_face_distance(self):
        # 32^3 all-true, 1 mm voxels, radius 4: the survivors are exactly
        # the voxels whose centres are farther than 4 mm from every
        # outside-voxel centre, i.e. indices 4..27 per axis
        m = qk.Mask(np.ones((32, 32, 32), dtype=bool), VS)
        out = qk.erode_mask(m, 4.0)
        expected = np.zeros((32, 32, 32), dtype=bool)
        expected[4:28, 4:28, 4:28] = True
        np.testing.assert_array_equal(out.data, expected)

    def test_random_blob_against_distance_scan(self):
        # brute-force oracle: a voxel survives iff no complement voxel
        # (grid complement plus the one-voxel outside rim) sits within r
        rng = np.random.default_rng(9)
        dims = (16, 16, 16)
        vs = (1.0, 1.2, 0.8)
        blob = rng.random(dims) > 0.35
        radius = 2.1
        padded = np.pad(blob, 1)
        out_idx = np.argwhere(~padded) - 1
        in_idx = np.argwhere(blob)
        scale = np.array(vs)
        diff = (in_idx[:, None, :] - out_idx[None, :, :]) * scale
        dist = np.sqrt((diff ** 2).sum(axis=2)).min(axis=1)
        expected = np.zeros(dims, dtype=bool)
        expected[tuple(in_idx[dist > radius].T)] = True
        got = qk.erode_mask(qk.Mask(blob, vs), radius)
        np.testing.assert_array_equal(got.data, expected)

    def test_monotone_in_radius(self):
        rng = np.random.default_rng(10)
        m = qk.Mask(rng.random((14, 14, 14)) > 0.3, VS)
        prev = m.data
        for r in (0.5, 1.0, 2.0, 3.0):
            cur = qk.erode_mask(m, r).data
            assert not (cur & ~prev).any()  # shrinks only
            prev = cur

    def test_subset_of_input(self):
        rng = np.random.default_rng(11)
        m = qk.Mask(rng.random((12, 12, 12)) > 0.5, VS)
        out = qk.erode_mask(m, 1.5)
        assert not (out.data & ~m.data).any()


class TestGradients:
    def test_constant_gives_zero(self):
        v = qk.ScalarVolume(np.full((6, 6, 6), 2.5), VS)
        for ax in "xyz":
            assert np.abs(qk.gradient_forward(v, ax).data).max() == 0

    def test_linear_ramp(self):
        data = np.broadcast_to(np.arange(8.0)[:, None, None], (8, 8, 8)).copy()
        g = qk.gradient_forward(qk.ScalarVolume(data, VS), "x").data
        assert np.all(g[:-1] == 1.0)
        assert np.all(g[-1] == 0.0)

    @pytest.mark.parametrize("axis", ["x", "y", "z"])
    def test_adjoint_identity(self, axis):
        rng = np.random.default_rng(12)
        u = rng.normal(size=(8, 8, 8))
        v = rng.normal(size=(8, 8, 8))
        lhs = np.sum(forward_difference(u, axis) * v)
        rhs = np.sum(u * adjoint_difference(v, axis))
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)

    def test_bad_axis(self):
        v = rand_volume((4, 4, 4), seed=13)
        with pytest.raises(ValueError):
            qk.gradient_forward(v, "w")


def test_masked_mean_empty_mask_raises():
    with pytest.raises(ValueError):
        masked_mean(np.ones((3, 3, 3)), np.zeros((3, 3, 3), dtype=bool))
