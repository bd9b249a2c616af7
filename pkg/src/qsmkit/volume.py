"""Grid value types and the numerics shared by every reconstruction stage.

Volumes are immutable value objects wrapping float64 arrays together with
their physical voxel spacing, so every operation in the toolkit is a pure
function: safe to call from concurrent workers, deterministic, and easy to
test. Anisotropic voxels are supported throughout; all physical lengths are
in millimetres.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.fft
from scipy import ndimage

# Proton gyromagnetic ratio over 2*pi, in Hz per tesla.
GYROMAGNETIC_RATIO_HZ_PER_T = 42.577478e6

TWO_PI = 2.0 * np.pi

UNITS = ("ppm", "radians", "dimensionless", "arbitrary")

_AXIS_INDEX = {"x": 0, "y": 1, "z": 2, 0: 0, 1: 1, 2: 2}


class GridMismatchError(ValueError):
    """Operands live on different grids (shape or voxel size differ)."""


def fft_workers():
    """Worker count for FFT calls, capped by the QSM_THREADS env var."""
    n = os.cpu_count() or 1
    cap = os.environ.get("QSM_THREADS")
    if cap:
        n = max(1, min(n, int(cap)))
    return n


def fftn(arr):
    return scipy.fft.fftn(arr, workers=fft_workers())


def ifftn(arr):
    return scipy.fft.ifftn(arr, workers=fft_workers())


def _as_voxel_size(voxel_size):
    vs = tuple(float(v) for v in voxel_size)
    if len(vs) != 3:
        raise ValueError("voxel_size must have three components")
    if any(not np.isfinite(v) or v <= 0 for v in vs):
        raise ValueError("voxel dimensions must be strictly positive")
    return vs


def _freeze(arr):
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """3D real-valued voxel grid with physical voxel spacing.

    Parameters
    ----------
    data : array_like
        Real values, shape (nx, ny, nz). Copied to float64 and frozen.
    voxel_size : tuple of float
        (dx, dy, dz) in millimetres, strictly positive.
    unit : str
        One of "ppm", "radians", "dimensionless", "arbitrary".
    """

    data: np.ndarray
    voxel_size: tuple
    unit: str = "dimensionless"

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.size == 0:
            raise ValueError("volume data must be a non-empty 3D array")
        if not np.isfinite(arr).all():
            raise ValueError("volume data contains NaN or Inf")
        if self.unit not in UNITS:
            raise ValueError(f"unknown unit {self.unit!r}; expected one of {UNITS}")
        object.__setattr__(self, "data", _freeze(arr))
        object.__setattr__(self, "voxel_size", _as_voxel_size(self.voxel_size))

    @property
    def dims(self):
        return self.data.shape

    def with_data(self, data, unit=None):
        """New volume on the same grid, optionally retagged."""
        return ScalarVolume(data, self.voxel_size, self.unit if unit is None else unit)


@dataclass(frozen=True, eq=False)
class SpectralVolume:
    """3D complex grid in the spatial-frequency domain, DC at index (0,0,0).

    `unit` records the spatial-domain unit the spectrum transforms back to.
    """

    data: np.ndarray
    voxel_size: tuple
    unit: str = "dimensionless"

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.complex128)
        if arr.ndim != 3 or arr.size == 0:
            raise ValueError("spectral data must be a non-empty 3D array")
        if not np.isfinite(arr).all():
            raise ValueError("spectral data contains NaN or Inf")
        object.__setattr__(self, "data", _freeze(arr))
        object.__setattr__(self, "voxel_size", _as_voxel_size(self.voxel_size))

    @property
    def dims(self):
        return self.data.shape


@dataclass(frozen=True, eq=False)
class Mask:
    """3D binary volume."""

    data: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=bool)
        if arr.ndim != 3 or arr.size == 0:
            raise ValueError("mask data must be a non-empty 3D array")
        object.__setattr__(self, "data", _freeze(arr))
        object.__setattr__(self, "voxel_size", _as_voxel_size(self.voxel_size))

    @property
    def dims(self):
        return self.data.shape

    @property
    def count(self):
        return int(self.data.sum())


@dataclass(frozen=True)
class AcquisitionMeta:
    """Scan parameters needed to map fields (ppm) to phase (radians).

    b0_tesla : main field strength in tesla
    b0_dir : unit vector of the main field direction
    echo_times_s : echo times in seconds
    voxel_size : (dx, dy, dz) in millimetres
    """

    b0_tesla: float
    b0_dir: tuple = (0.0, 0.0, 1.0)
    echo_times_s: tuple = ()
    voxel_size: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.b0_tesla <= 0:
            raise ValueError("b0_tesla must be positive")
        d = np.asarray(self.b0_dir, dtype=float)
        if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("b0_dir must be a unit 3-vector")
        tes = tuple(float(t) for t in self.echo_times_s)
        if any(t <= 0 for t in tes):
            raise ValueError("echo times must be positive")
        object.__setattr__(self, "b0_dir", tuple(float(v) for v in d))
        object.__setattr__(self, "echo_times_s", tes)
        object.__setattr__(self, "voxel_size", _as_voxel_size(self.voxel_size))

    def rad_per_ppm(self, echo_time_s):
        """Radians of phase accrued per ppm of field offset at one echo."""
        return phase_scale(self.b0_tesla, echo_time_s)


def phase_scale(b0_tesla, echo_time_s):
    """Phase (radians) per ppm field offset: 2*pi*gamma*B0*TE*1e-6."""
    return TWO_PI * GYROMAGNETIC_RATIO_HZ_PER_T * b0_tesla * echo_time_s * 1e-6


def require_same_grid(a, b):
    """Raise GridMismatchError unless a and b share dims and voxel size."""
    if a.dims != b.dims:
        raise GridMismatchError(f"shape mismatch: {a.dims} vs {b.dims}")
    if not np.allclose(a.voxel_size, b.voxel_size, rtol=0.0, atol=1e-9):
        raise GridMismatchError(
            f"voxel size mismatch: {a.voxel_size} vs {b.voxel_size}")


def fourier_forward(volume):
    """Forward FFT of a ScalarVolume (numpy convention, DC at index 0)."""
    return SpectralVolume(fftn(volume.data), volume.voxel_size, volume.unit)


def fourier_inverse(spectrum):
    """Inverse FFT back to a real ScalarVolume.

    The spectrum is assumed Hermitian-symmetric (it came from real data);
    residual imaginary parts from rounding are discarded.
    """
    return ScalarVolume(ifftn(spectrum.data).real, spectrum.voxel_size,
                        spectrum.unit)


def frequency_grid(dims, voxel_size):
    """Spatial-frequency coordinates in cycles/mm, FFT layout, DC at index 0.

    Returns three broadcastable arrays (kx, ky, kz).
    """
    ax = [np.fft.fftfreq(n, d=d) for n, d in zip(dims, voxel_size)]
    return (ax[0][:, None, None], ax[1][None, :, None], ax[2][None, None, :])


def wrap_phase(phase):
    """Wrap angles into (-pi, pi]."""
    w = np.mod(np.asarray(phase, dtype=float) + np.pi, TWO_PI) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def erode_mask(mask, radius_mm, voxel_size=None):
    """Erode a mask by a Euclidean radius in millimetres.

    A voxel survives iff every voxel whose centre lies within `radius_mm`
    of it (physical distance, so anisotropic grids behave correctly) is
    inside the mask. Voxels beyond the grid count as outside.
    """
    if radius_mm < 0:
        raise ValueError("erosion radius must be nonnegative")
    vs = mask.voxel_size if voxel_size is None else _as_voxel_size(voxel_size)
    if radius_mm == 0:
        return Mask(mask.data, vs)
    padded = np.pad(mask.data, 1)
    dist = ndimage.distance_transform_edt(padded, sampling=vs)
    keep = dist[1:-1, 1:-1, 1:-1] > radius_mm
    return Mask(keep & mask.data, vs)


def _axis(axis):
    try:
        return _AXIS_INDEX[axis]
    except KeyError:
        raise ValueError(f"axis must be one of x, y, z (got {axis!r})") from None


def _sl(axis, s):
    idx = [slice(None)] * 3
    idx[axis] = s
    return tuple(idx)


def forward_difference(arr, axis):
    """Forward difference v[i+1]-v[i] in voxel units, zero at the far face."""
    ax = _axis(axis)
    out = np.zeros_like(arr)
    out[_sl(ax, slice(0, -1))] = (arr[_sl(ax, slice(1, None))]
                                  - arr[_sl(ax, slice(0, -1))])
    return out


def adjoint_difference(arr, axis):
    """Adjoint of forward_difference: <Gu, v> == <u, G*v> exactly."""
    ax = _axis(axis)
    out = np.zeros_like(arr)
    head = _sl(ax, slice(0, -1))
    out[head] -= arr[head]
    out[_sl(ax, slice(1, None))] += arr[head]
    return out


def gradient_forward(volume, axis):
    """Forward-difference spatial gradient of a volume along x, y, or z."""
    return volume.with_data(forward_difference(volume.data, axis))


def gradient_adjoint(volume, axis):
    """Adjoint gradient (negative divergence component) along one axis."""
    return volume.with_data(adjoint_difference(volume.data, axis))


def masked_mean(arr, mask_arr):
    n = int(np.count_nonzero(mask_arr))
    if n == 0:
        raise ValueError("mask is empty")
    return float(arr[mask_arr].sum() / n)
