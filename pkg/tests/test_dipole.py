import numpy as np
import pytest

import qsmkit as qk
from qsmkit.phantom import grid_coordinates

VS = (1.0, 1.0, 1.0)


class TestKernelValues:
    def test_parallel_axis_hits_minus_two_thirds(self):
        k = qk.dipole_kernel((8, 8, 8), VS, (0, 0, 1))
        # pure-kz frequencies: (k.b)^2/|k|^2 = 1
        np.testing.assert_allclose(k.values[0, 0, 1:], -2.0 / 3.0, atol=1e-14)

    def test_perpendicular_hits_one_third(self):
        k = qk.dipole_kernel((8, 8, 8), VS, (0, 0, 1))
        np.testing.assert_allclose(k.values[1:, 0, 0], 1.0 / 3.0, atol=1e-14)
        np.testing.assert_allclose(k.values[0, 1:, 0], 1.0 / 3.0, atol=1e-14)

    def test_magic_angle_zero(self):
        # direction with (k.b)^2/|k|^2 = 1/3 exactly: k = (1,1,1)/sqrt(3), b=z
        k = qk.dipole_kernel((9, 9, 9), VS, (0, 0, 1))
        assert k.values[1, 1, 1] == pytest.approx(0.0, abs=1e-14)
        assert k.values[2, 2, 2] == pytest.approx(0.0, abs=1e-14)

    def test_dc_is_exactly_zero(self):
        k = qk.dipole_kernel((6, 7, 8), (0.5, 0.5, 2.0), (0, 0, 1))
        assert k.values[0, 0, 0] == 0.0

    def test_range_invariant(self):
        rng = np.random.default_rng(0)
        b = rng.normal(size=3)
        b /= np.linalg.norm(b)
        k = qk.dipole_kernel((12, 11, 10), (0.5, 0.7, 1.3), tuple(b))
        assert k.values.min() >= -2.0 / 3.0 - 1e-12
        assert k.values.max() <= 1.0 / 3.0 + 1e-12

    def test_even_symmetry(self):
        k = qk.dipole_kernel((8, 8, 8), VS, (0, 0.6, 0.8)).values
        flipped = k[(-np.arange(8)) % 8][:, (-np.arange(8)) % 8][:, :, (-np.arange(8)) % 8]
        np.testing.assert_allclose(k, flipped, atol=1e-14)

    def test_nonunit_direction_rejected(self):
        with pytest.raises(ValueError, match="unit"):
            qk.dipole_kernel((8, 8, 8), VS, (0, 0, 1.001))


class TestForwardField:
    def test_zero_susceptibility(self):
        k = qk.dipole_kernel((8, 8, 8), VS)
        out = qk.forward_field(qk.ScalarVolume(np.zeros((8, 8, 8)), VS, "ppm"), k)
        assert np.abs(out.data).max() == 0.0

    def test_constant_susceptibility_gives_zero_field(self):
        k = qk.dipole_kernel((8, 8, 8), VS)
        chi = qk.ScalarVolume(np.full((8, 8, 8), 2.0), VS, "ppm")
        out = qk.forward_field(chi, k)
        assert np.abs(out.data).max() < 1e-12

    def test_output_zero_mean(self):
        rng = np.random.default_rng(1)
        k = qk.dipole_kernel((16, 16, 16), VS)
        chi = qk.ScalarVolume(rng.normal(size=(16, 16, 16)), VS, "ppm")
        assert abs(qk.forward_field(chi, k).data.mean()) < 1e-12

    def test_linearity(self):
        rng = np.random.default_rng(2)
        k = qk.dipole_kernel((12, 12, 12), VS)
        a = qk.ScalarVolume(rng.normal(size=(12, 12, 12)), VS, "ppm")
        b = qk.ScalarVolume(rng.normal(size=(12, 12, 12)), VS, "ppm")
        lhs = qk.forward_field(a.with_data(a.data + 0.5 * b.data), k).data
        rhs = qk.forward_field(a, k).data + 0.5 * qk.forward_field(b, k).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_self_adjoint(self):
        rng = np.random.default_rng(3)
        k = qk.dipole_kernel((10, 10, 10), VS)
        u = qk.ScalarVolume(rng.normal(size=(10, 10, 10)), VS, "ppm")
        v = qk.ScalarVolume(rng.normal(size=(10, 10, 10)), VS, "ppm")
        du = qk.forward_field(u, k).data
        dv = qk.forward_field(v, k).data
        lhs = np.sum(du * v.data)
        rhs = np.sum(u.data * dv)
        assert abs(lhs - rhs) / abs(lhs) < 1e-10

    def test_dimension_mismatch(self):
        k = qk.dipole_kernel((8, 8, 8), VS)
        chi = qk.ScalarVolume(np.zeros((8, 8, 9)), VS, "ppm")
        with pytest.raises(ValueError, match="mismatch"):
            qk.forward_field(chi, k)

    def test_rotation_consistency_90deg(self):
        # rotating the sources and the field direction by the same quarter
        # turn permutes the field volume exactly (the grid maps onto itself)
        rng = np.random.default_rng(4)
        chi = rng.normal(size=(12, 12, 12))
        kz = qk.dipole_kernel((12, 12, 12), VS, (0, 0, 1))
        ky = qk.dipole_kernel((12, 12, 12), VS, (0, 1, 0))
        f_z = qk.forward_field(qk.ScalarVolume(chi, VS, "ppm"), kz).data
        # rotate x->x, y->z, z->-y: in index space swap axes 1,2 then flip
        chi_rot = np.flip(np.swapaxes(chi, 1, 2), axis=1)
        f_y = qk.forward_field(qk.ScalarVolume(chi_rot, VS, "ppm"), ky).data
        f_z_rot = np.flip(np.swapaxes(f_z, 1, 2), axis=1)
        np.testing.assert_allclose(f_y, np.roll(f_z_rot, 0), atol=1e-11)

    def test_padding_reduces_wrap_error(self):
        # a source near the volume edge wraps; padding suppresses it
        dims = (32, 32, 32)
        occ = qk.phantom.sphere_occupancy(dims, VS, (12.0, 0.0, 0.0), 3.0)
        chi = qk.ScalarVolume(occ, VS, "ppm")
        k = qk.dipole_kernel(dims, VS)
        ana = qk.analytic_sphere_field((12.0, 0.0, 0.0), 3.0, 1.0, (0, 0, 1),
                                       dims, VS)
        x, y, z = grid_coordinates(dims, VS)
        far = np.sqrt((x - 12.0) ** 2 + y * y + z * z) > 5.0
        err_plain = np.linalg.norm(
            (qk.forward_field(chi, k).data - ana.data)[far])
        err_padded = np.linalg.norm(
            (qk.forward_field(chi, k, pad=True).data - ana.data)[far])
        assert err_padded < err_plain


def test_sphere_field_matches_analytic_oracle():
    # magnetostatics oracle: 10% NRMSE outside a 2-voxel shell at 64^3
    dims = (64, 64, 64)
    spec = qk.PhantomSpec(dims, VS, brain_mask_radius_mm=20.0,
                          spheres=(qk.Sphere((0.0, 0.0, 0.0), 8.0, 1.0),))
    chi, _, _ = qk.build_phantom(spec)
    kernel = qk.dipole_kernel(dims, VS, (0, 0, 1))
    num = qk.forward_field(chi, kernel)
    ana = qk.analytic_sphere_field((0.0, 0.0, 0.0), 8.0, 1.0, (0, 0, 1),
                                   dims, VS)
    x, y, z = grid_coordinates(dims, VS)
    r = np.sqrt(x * x + y * y + z * z)
    outside = r > 10.0
    err = np.linalg.norm((num.data - ana.data)[outside]) \
        / np.linalg.norm(ana.data[outside])
    assert err < 0.10
    assert np.abs(num.data[r < 8.0]).mean() < 0.02
