"""Synthetic susceptibility phantoms, analytic field oracles, and echo data.

Phantoms are built from spheres and cylinders with partial-volume
anti-aliased boundaries (3x3x3 subvoxel occupancy sampling). Background
("external") sources are ordinary susceptibility spheres placed outside the
brain mask, so background fields are generated by the same physics as tissue
fields rather than an ad-hoc polynomial. The analytic sphere field provides
an oracle that is independent of the FFT forward model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import (AcquisitionMeta, Mask, ScalarVolume, _as_voxel_size,
                     phase_scale, wrap_phase)


@dataclass(frozen=True)
class Sphere:
    """center_mm is relative to the volume centre."""

    center_mm: tuple
    radius_mm: float
    delta_chi_ppm: float

    def __post_init__(self):
        if self.radius_mm <= 0:
            raise ValueError("sphere radius must be positive")
        object.__setattr__(self, "center_mm",
                           tuple(float(c) for c in self.center_mm))


@dataclass(frozen=True)
class Cylinder:
    """Infinite cylinder through point_mm along axis (clipped to the mask)."""

    point_mm: tuple
    axis: tuple
    radius_mm: float
    delta_chi_ppm: float

    def __post_init__(self):
        if self.radius_mm <= 0:
            raise ValueError("cylinder radius must be positive")
        a = np.asarray(self.axis, dtype=float)
        n = np.linalg.norm(a)
        if n == 0:
            raise ValueError("cylinder axis must be nonzero")
        object.__setattr__(self, "axis", tuple(a / n))
        object.__setattr__(self, "point_mm",
                           tuple(float(c) for c in self.point_mm))


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple
    voxel_size: tuple
    brain_mask_radius_mm: float
    spheres: tuple = ()
    cylinders: tuple = ()
    background_spheres: tuple = ()
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "voxel_size", _as_voxel_size(self.voxel_size))
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        if self.brain_mask_radius_mm <= 0:
            raise ValueError("brain mask radius must be positive")
        object.__setattr__(self, "spheres", tuple(self.spheres))
        object.__setattr__(self, "cylinders", tuple(self.cylinders))
        object.__setattr__(self, "background_spheres",
                           tuple(self.background_spheres))


def grid_coordinates(dims, voxel_size):
    """Voxel-centre coordinates in mm, origin at the volume centre.

    Returns three broadcastable arrays (x, y, z).
    """
    ax = [(np.arange(n) - (n - 1) / 2.0) * d for n, d in zip(dims, voxel_size)]
    return (ax[0][:, None, None], ax[1][None, :, None], ax[2][None, None, :])


def sphere_occupancy(dims, voxel_size, center_mm, radius_mm, supersample=3):
    """Fraction of each voxel covered by a sphere, via subvoxel sampling."""
    occ = np.zeros(dims)
    lo, hi = _bounding_box(dims, voxel_size, center_mm, radius_mm)
    if any(l >= h for l, h in zip(lo, hi)):
        return occ
    sub = dims, voxel_size, center_mm, lo, hi
    box = _subvoxel_fraction(*sub, supersample,
                             lambda dx, dy, dz: dx * dx + dy * dy + dz * dz
                             <= radius_mm ** 2)
    occ[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = box
    return occ


def cylinder_occupancy(dims, voxel_size, point_mm, axis, radius_mm,
                       supersample=3):
    """Fraction of each voxel covered by an infinite cylinder."""
    a = np.asarray(axis, dtype=float)

    def inside(dx, dy, dz):
        dot = dx * a[0] + dy * a[1] + dz * a[2]
        r2 = dx * dx + dy * dy + dz * dz - dot * dot
        return r2 <= radius_mm ** 2

    lo = (0, 0, 0)
    hi = dims
    return _subvoxel_fraction(dims, voxel_size, point_mm, lo, hi,
                              supersample, inside)


def _bounding_box(dims, voxel_size, center_mm, radius_mm):
    lo, hi = [], []
    for n, d, c in zip(dims, voxel_size, center_mm):
        # voxel centre i sits at (i - (n-1)/2) * d; keep one voxel of margin
        i_lo = int(np.floor((c - radius_mm) / d + (n - 1) / 2.0)) - 1
        i_hi = int(np.ceil((c + radius_mm) / d + (n - 1) / 2.0)) + 2
        lo.append(max(0, i_lo))
        hi.append(min(n, i_hi))
    return tuple(lo), tuple(hi)


def _subvoxel_fraction(dims, voxel_size, origin_mm, lo, hi, supersample,
                       inside):
    shape = tuple(h - l for l, h in zip(lo, hi))
    frac = np.zeros(shape)
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    centers = []
    for axis_i, (n, d) in enumerate(zip(dims, voxel_size)):
        coords = (np.arange(lo[axis_i], hi[axis_i]) - (n - 1) / 2.0) * d
        centers.append(coords - origin_mm[axis_i])
    for ox in offsets:
        for oy in offsets:
            for oz in offsets:
                dx = (centers[0] + ox * voxel_size[0])[:, None, None]
                dy = (centers[1] + oy * voxel_size[1])[None, :, None]
                dz = (centers[2] + oz * voxel_size[2])[None, None, :]
                frac += inside(dx, dy, dz)
    return frac / supersample ** 3


def build_phantom(spec):
    """Rasterize a phantom spec into (chi, chi_background, brain_mask).

    chi is supported strictly inside the brain mask, chi_background strictly
    outside. Internal spheres must fit inside the brain sphere and background
    spheres must sit entirely outside it; violations raise ValueError.
    Deterministic: no randomness enters rasterization.
    """
    dims, vs = spec.dims, spec.voxel_size
    x, y, z = grid_coordinates(dims, vs)
    r = np.sqrt(x * x + y * y + z * z)
    brain = r <= spec.brain_mask_radius_mm
    if not brain.any():
        raise ValueError("brain mask radius smaller than one voxel")

    chi = np.zeros(dims)
    for s in spec.spheres:
        dist = float(np.linalg.norm(s.center_mm))
        if dist + s.radius_mm > spec.brain_mask_radius_mm:
            raise ValueError(
                f"internal sphere at {s.center_mm} extends outside the brain mask")
        chi += s.delta_chi_ppm * sphere_occupancy(dims, vs, s.center_mm,
                                                  s.radius_mm)
    for c in spec.cylinders:
        if float(np.linalg.norm(c.point_mm)) > spec.brain_mask_radius_mm:
            raise ValueError(
                f"cylinder through {c.point_mm} anchored outside the brain mask")
        chi += c.delta_chi_ppm * cylinder_occupancy(dims, vs, c.point_mm,
                                                    c.axis, c.radius_mm)
    chi *= brain

    chi_bg = np.zeros(dims)
    for s in spec.background_spheres:
        dist = float(np.linalg.norm(s.center_mm))
        if dist - s.radius_mm < spec.brain_mask_radius_mm:
            raise ValueError(
                f"background sphere at {s.center_mm} intrudes into the brain mask")
        chi_bg += s.delta_chi_ppm * sphere_occupancy(dims, vs, s.center_mm,
                                                     s.radius_mm)
    chi_bg *= ~brain

    return (ScalarVolume(chi, vs, "ppm"), ScalarVolume(chi_bg, vs, "ppm"),
            Mask(brain, vs))


def analytic_sphere_field(center_mm, radius_mm, delta_chi_ppm, b0_dir, dims,
                          voxel_size):
    """Closed-form field of a uniformly susceptible sphere (ppm).

    Lorentz-corrected magnetostatics: zero inside the sphere (the 1/3
    demagnetizing factor cancels the Lorentz term), and

        (delta_chi / 3) * (a / r)^3 * (3 cos^2 theta - 1)

    outside, with theta the angle between the offset from the sphere centre
    and the main-field direction. Independent of the FFT forward model.
    """
    if radius_mm <= 0:
        raise ValueError("sphere radius must be positive")
    b = np.asarray(b0_dir, dtype=float)
    if abs(np.linalg.norm(b) - 1.0) > 1e-9:
        raise ValueError("b0_dir must have unit norm")
    vs = _as_voxel_size(voxel_size)
    x, y, z = grid_coordinates(dims, vs)
    dx = x - center_mm[0]
    dy = y - center_mm[1]
    dz = z - center_mm[2]
    r2 = dx * dx + dy * dy + dz * dz
    rb = dx * b[0] + dy * b[1] + dz * b[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        cos2 = (rb * rb) / r2
        outside = (delta_chi_ppm / 3.0) * (radius_mm ** 2 / r2) ** 1.5 \
            * (3.0 * cos2 - 1.0)
    fld = np.where(r2 <= radius_mm ** 2, 0.0, outside)
    return ScalarVolume(np.nan_to_num(fld, copy=False), vs, "ppm")


@dataclass(frozen=True, eq=False)
class EchoSeries:
    """Per-echo magnitude and wrapped-phase volumes plus scan metadata."""

    magnitudes: tuple
    wrapped_phases: tuple
    meta: AcquisitionMeta

    def __post_init__(self):
        mags = tuple(self.magnitudes)
        phases = tuple(self.wrapped_phases)
        n = len(self.meta.echo_times_s)
        if len(mags) != n or len(phases) != n:
            raise ValueError("echo volume count must match echo_times_s")
        for p in phases:
            if p.data.max() > np.pi + 1e-12 or p.data.min() <= -np.pi - 1e-12:
                raise ValueError("wrapped phases must lie in (-pi, pi]")
        object.__setattr__(self, "magnitudes", mags)
        object.__setattr__(self, "wrapped_phases", phases)

    def __len__(self):
        return len(self.magnitudes)


def synthesize_echoes(total_field, meta, magnitude=None, noise_sd=0.0,
                      rng_seed=0):
    """Simulate wrapped multi-echo phase data from a field map.

    The ideal phase at echo e is  2*pi*gamma*B0*TE_e*f*1e-6  (f in ppm).
    Complex Gaussian noise of standard deviation `noise_sd` is added per
    channel to magnitude * exp(i*phase), which gives Rician magnitudes and
    realistic phase noise. Deterministic given rng_seed.
    """
    if noise_sd < 0:
        raise ValueError("noise_sd must be nonnegative")
    if not meta.echo_times_s:
        raise ValueError("meta.echo_times_s is empty")
    if magnitude is None:
        magnitude = total_field.with_data(np.ones(total_field.dims),
                                          unit="arbitrary")
    rng = np.random.default_rng(rng_seed)
    mags, phases = [], []
    for te in meta.echo_times_s:
        phi = phase_scale(meta.b0_tesla, te) * total_field.data
        signal = magnitude.data * np.exp(1j * phi)
        if noise_sd > 0:
            signal = signal + rng.normal(0.0, noise_sd, signal.shape) \
                + 1j * rng.normal(0.0, noise_sd, signal.shape)
        mags.append(ScalarVolume(np.abs(signal), total_field.voxel_size,
                                 "arbitrary"))
        wrapped = np.angle(signal)
        wrapped = np.where(wrapped <= -np.pi, np.pi, wrapped)
        phases.append(ScalarVolume(wrapped, total_field.voxel_size, "radians"))
    return EchoSeries(tuple(mags), tuple(phases), meta)
