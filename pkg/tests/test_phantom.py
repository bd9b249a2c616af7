import math

import numpy as np
import pytest

import qsmkit as qk
from qsmkit.phantom import grid_coordinates, sphere_occupancy

VS = (1.0, 1.0, 1.0)
DIMS = (32, 32, 32)


class TestBuildPhantom:
    def test_empty_spec(self):
        spec = qk.PhantomSpec(DIMS, VS, brain_mask_radius_mm=10.0)
        chi, chi_bg, m2 = qk.build_phantom(spec)
        assert np.abs(chi.data).max() == 0.0
        assert np.abs(chi_bg.data).max() == 0.0
        assert m2.count > 0

    def test_unit_sphere_indicator(self):
        spec = qk.PhantomSpec(DIMS, VS, brain_mask_radius_mm=14.0,
                              spheres=(qk.Sphere((0, 0, 0), 8.0, 1.0),))
        chi, _, _ = qk.build_phantom(spec)
        x, y, z = grid_coordinates(DIMS, VS)
        r = np.sqrt(x * x + y * y + z * z)
        assert np.all(chi.data[r < 7.0] == 1.0)
        assert np.all(chi.data[r > 9.0] == 0.0)
        edge = chi.data[(r >= 7.0) & (r <= 9.0)]
        assert np.all((edge >= 0.0) & (edge <= 1.0))

    def test_determinism(self):
        spec = qk.PhantomSpec(DIMS, VS, brain_mask_radius_mm=12.0,
                              spheres=(qk.Sphere((2, -1, 3), 4.0, 0.7),),
                              rng_seed=11)
        a = qk.build_phantom(spec)
        b = qk.build_phantom(spec)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.data, y.data)

    def test_chi_supported_inside_mask(self):
        spec = qk.PhantomSpec(DIMS, VS, brain_mask_radius_mm=10.0,
                              spheres=(qk.Sphere((0, 0, 0), 9.9, 1.0),),
                              background_spheres=(
                                  qk.Sphere((13.0, 0, 0), 2.0, 9.0),))
        chi, chi_bg, m2 = qk.build_phantom(spec)
        assert np.all(chi.data[~m2.data] == 0.0)
        assert np.all(chi_bg.data[m2.data] == 0.0)

    def test_internal_source_outside_mask_rejected(self):
        spec = qk.PhantomSpec(DIMS, VS, brain_mask_radius_mm=10.0,
                              spheres=(qk.Sphere((8, 0, 0), 4.0, 1.0),))
        with pytest.raises(ValueError, match="outside the brain mask"):
            qk.build_phantom(spec)

    def test_background_source_inside_mask_rejected(self):
        spec = qk.PhantomSpec(
            DIMS, VS, brain_mask_radius_mm=10.0,
            background_spheres=(qk.Sphere((11.0, 0, 0), 2.0, 9.0),))
        with pytest.raises(ValueError, match="intrudes"):
            qk.build_phantom(spec)

    def test_cylinder_volume(self):
        spec = qk.PhantomSpec(
            DIMS, VS, brain_mask_radius_mm=14.0,
            cylinders=(qk.Cylinder((0, 0, 0), (0, 0, 1), 3.0, 0.5),))
        chi, _, m2 = qk.build_phantom(spec)
        x, y, z = grid_coordinates(DIMS, VS)
        rho = np.sqrt(x * x + y * y)
        core = (rho < 2.0) & m2.data & (np.abs(z) < 8)
        assert np.all(chi.data[core] == 0.5)

    def test_occupancy_matches_sphere_volume(self):
        occ = sphere_occupancy((24, 24, 24), VS, (0.0, 0.0, 0.0), 6.0)
        expected = 4.0 / 3.0 * math.pi * 6.0 ** 3
        assert occ.sum() == pytest.approx(expected, rel=0.01)

    def test_forward_field_linearity_through_phantom(self, bfr_phantom):
        ph = bfr_phantom
        combined = ph["chi"].with_data(ph["chi"].data + ph["chi_bg"].data)
        total = qk.forward_field(combined, ph["kernel"])
        np.testing.assert_allclose(total.data,
                                   ph["f_local"].data + ph["f_bg"].data,
                                   atol=1e-12)


class TestAnalyticSphereField:
    def test_interior_is_zero(self):
        f = qk.analytic_sphere_field((0, 0, 0), 5.0, 1.0, (0, 0, 1), DIMS, VS)
        x, y, z = grid_coordinates(DIMS, VS)
        r = np.sqrt(x * x + y * y + z * z)
        assert np.all(f.data[r <= 5.0] == 0.0)

    def test_on_axis_point(self):
        # r = 2a along b0: (dchi/3) * (1/8) * 2 = dchi/12
        dims = (9, 9, 9)
        f = qk.analytic_sphere_field((0, 0, 0), 2.0, 1.0, (0, 0, 1), dims, VS)
        assert f.data[4, 4, 8] == pytest.approx(1.0 / 12.0)

    def test_equatorial_point(self):
        dims = (9, 9, 9)
        f = qk.analytic_sphere_field((0, 0, 0), 2.0, 1.0, (0, 0, 1), dims, VS)
        assert f.data[8, 4, 4] == pytest.approx(-1.0 / 24.0)

    def test_oracle_cross_checks_forward_model(self):
        # the same two closed-form values, measured through the FFT model on
        # a fine grid (numerical dipole field at r = 2a, sphere radius 8)
        dims = (64, 64, 64)
        spec = qk.PhantomSpec(dims, VS, brain_mask_radius_mm=20.0,
                              spheres=(qk.Sphere((0, 0, 0), 8.0, 1.0),))
        chi, _, _ = qk.build_phantom(spec)
        kernel = qk.dipole_kernel(dims, VS, (0, 0, 1))
        num = qk.forward_field(chi, kernel)
        x, y, z = grid_coordinates(dims, VS)
        on_axis = (np.abs(x) < 0.6) & (np.abs(y) < 0.6) & (np.abs(np.abs(z) - 16.0) < 0.6)
        equator = (np.abs(np.sqrt(x * x + y * y) - 16.0) < 0.6) & (np.abs(z) < 0.6)
        assert num.data[on_axis].mean() == pytest.approx(1.0 / 12.0, rel=0.05)
        assert num.data[equator].mean() == pytest.approx(-1.0 / 24.0, rel=0.05)

    def test_interior_zero_through_forward_model(self):
        dims = (64, 64, 64)
        spec = qk.PhantomSpec(dims, VS, brain_mask_radius_mm=20.0,
                              spheres=(qk.Sphere((0, 0, 0), 8.0, 1.0),))
        chi, _, _ = qk.build_phantom(spec)
        num = qk.forward_field(chi, qk.dipole_kernel(dims, VS, (0, 0, 1)))
        x, y, z = grid_coordinates(dims, VS)
        deep = np.sqrt(x * x + y * y + z * z) < 6.0
        assert np.abs(num.data[deep]).mean() < 0.005

    def test_bad_radius(self):
        with pytest.raises(ValueError):
            qk.analytic_sphere_field((0, 0, 0), -1.0, 1.0, (0, 0, 1), DIMS, VS)


class TestSynthesizeEchoes:
    def meta(self, tes=(10.4e-3, 17.4e-3, 24.4e-3, 31.4e-3)):
        return qk.AcquisitionMeta(3.0, (0, 0, 1), tes, VS)

    def test_zero_field_zero_phase(self):
        field = qk.ScalarVolume(np.zeros((8, 8, 8)), VS, "ppm")
        series = qk.synthesize_echoes(field, self.meta(), noise_sd=0.0)
        for p in series.wrapped_phases:
            assert np.abs(p.data).max() == 0.0

    def test_wrap_value_against_hand_calculation(self):
        # 1 ppm at 3 T, TE 10.4 ms: phase = 2*pi*42.577478e6*3*0.0104*1e-6,
        # which exceeds pi and wraps down by 2*pi
        field = qk.ScalarVolume(np.ones((4, 4, 4)), VS, "ppm")
        meta = qk.AcquisitionMeta(3.0, (0, 0, 1), (10.4e-3,), VS)
        series = qk.synthesize_echoes(field, meta, noise_sd=0.0)
        raw = 2 * math.pi * 42.577478e6 * 3.0 * 10.4e-3 * 1e-6
        expected = raw - 2 * math.pi
        assert expected == pytest.approx(2.0635, abs=5e-4)
        np.testing.assert_allclose(series.wrapped_phases[0].data, expected,
                                   atol=1e-12)

    def test_noise_determinism(self):
        rng = np.random.default_rng(5)
        field = qk.ScalarVolume(rng.normal(size=(8, 8, 8)), VS, "ppm")
        a = qk.synthesize_echoes(field, self.meta(), noise_sd=0.1, rng_seed=3)
        b = qk.synthesize_echoes(field, self.meta(), noise_sd=0.1, rng_seed=3)
        for pa, pb in zip(a.wrapped_phases, b.wrapped_phases):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_phases_in_range(self):
        rng = np.random.default_rng(6)
        field = qk.ScalarVolume(3.0 * rng.normal(size=(8, 8, 8)), VS, "ppm")
        series = qk.synthesize_echoes(field, self.meta(), noise_sd=0.05,
                                      rng_seed=1)
        for p in series.wrapped_phases:
            assert p.data.max() <= np.pi
            assert p.data.min() > -np.pi

    def test_magnitudes_are_rician(self):
        field = qk.ScalarVolume(np.zeros((16, 16, 16)), VS, "ppm")
        series = qk.synthesize_echoes(field, self.meta((20e-3,)),
                                      noise_sd=0.1, rng_seed=7)
        # complex noise inflates the mean magnitude above the clean value
        assert series.magnitudes[0].data.mean() > 1.0

    def test_negative_noise_rejected(self):
        field = qk.ScalarVolume(np.zeros((4, 4, 4)), VS, "ppm")
        with pytest.raises(ValueError):
            qk.synthesize_echoes(field, self.meta(), noise_sd=-0.1)

    def test_echo_count_invariant(self):
        field = qk.ScalarVolume(np.zeros((4, 4, 4)), VS, "ppm")
        series = qk.synthesize_echoes(field, self.meta())
        assert len(series) == 4
        assert len(series.magnitudes) == len(series.meta.echo_times_s)
