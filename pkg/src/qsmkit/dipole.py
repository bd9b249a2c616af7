"""Unit dipole response in k-space and the susceptibility-to-field model.

A susceptibility distribution chi (ppm) induces a Larmor frequency offset
along the main field; in the frequency domain the map is pointwise
multiplication by D(k) = 1/3 - (k.b)^2/|k|^2 with b the unit main-field
direction. D is singular at k = 0: the mean susceptibility shifts every
frequency equally and is unobservable, so D(0) := 0 and both fields and
susceptibilities are treated as zero-mean throughout the toolkit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import (ScalarVolume, _as_voxel_size, fftn, frequency_grid,
                     ifftn)


@dataclass(frozen=True, eq=False)
class DipoleKernel:
    """Real, even k-space filter with values in [-2/3, 1/3] and D(0) = 0."""

    values: np.ndarray
    voxel_size: tuple
    b0_dir: tuple

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError("kernel values must be a 3D array")
        if arr[0, 0, 0] != 0.0:
            raise ValueError("kernel DC term must be exactly zero")
        if arr.min() < -2.0 / 3.0 - 1e-12 or arr.max() > 1.0 / 3.0 + 1e-12:
            raise ValueError("kernel values outside [-2/3, 1/3]")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "voxel_size", _as_voxel_size(self.voxel_size))
        object.__setattr__(self, "b0_dir", tuple(float(v) for v in self.b0_dir))

    @property
    def dims(self):
        return self.values.shape


def dipole_kernel(dims, voxel_size, b0_dir=(0.0, 0.0, 1.0)):
    """Sample the continuous dipole response on the discrete frequency grid.

    Parameters
    ----------
    dims : (nx, ny, nz)
    voxel_size : (dx, dy, dz) in mm. Frequencies are cycles/mm, so only the
        dimensionless ratio (k.b)^2/|k|^2 enters and any consistent grid
        convention gives the same kernel.
    b0_dir : unit 3-vector of the main-field direction.
    """
    b = np.asarray(b0_dir, dtype=float)
    if b.shape != (3,) or abs(np.linalg.norm(b) - 1.0) > 1e-9:
        raise ValueError("b0_dir must have unit norm")
    vs = _as_voxel_size(voxel_size)
    kx, ky, kz = frequency_grid(dims, vs)
    k2 = kx * kx + ky * ky + kz * kz
    kb = kx * b[0] + ky * b[1] + kz * b[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        d = 1.0 / 3.0 - (kb * kb) / k2
    d[0, 0, 0] = 0.0
    # On even grids the Nyquist planes alias +-k_nyq to one bin, which makes
    # the sampled kernel slightly uneven for oblique field directions.
    # Averaging with the index-negated copy restores exact evenness (and so
    # real fields and a self-adjoint operator); only Nyquist bins change.
    flipped = d
    for ax in range(3):
        flipped = np.roll(np.flip(flipped, axis=ax), 1, axis=ax)
    d = 0.5 * (d + flipped)
    return DipoleKernel(d, vs, tuple(b))


def forward_field(chi, kernel, pad=False):
    """Field offset (ppm) induced by a susceptibility map (ppm).

    Computes the inverse transform of X(k)*D(k). The convolution is
    circular; `pad=True` zero-pads to twice the grid before convolving to
    suppress wrap-around from sources near the volume edge.
    """
    if chi.dims != kernel.dims:
        raise ValueError(f"shape mismatch: {chi.dims} vs {kernel.dims}")
    arr = chi.data
    if pad:
        padded = np.zeros([2 * n for n in arr.shape])
        padded[: arr.shape[0], : arr.shape[1], : arr.shape[2]] = arr
        big = dipole_kernel(padded.shape, kernel.voxel_size, kernel.b0_dir)
        out = ifftn(fftn(padded) * big.values).real
        out = out[: arr.shape[0], : arr.shape[1], : arr.shape[2]]
    else:
        out = ifftn(fftn(arr) * kernel.values).real
    return ScalarVolume(out, chi.voxel_size, "ppm")
