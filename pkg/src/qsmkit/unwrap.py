"""Laplacian phase unwrapping and multi-echo field fitting.

The unwrapped phase is recovered from sin/cos of the wrapped phase via

    lap(phi) = cos(w) * lap(sin(w)) - sin(w) * lap(cos(w))

with the Laplacian applied and inverted spectrally. The result is defined
only up to an additive harmonic component; at desk scale the constant
dominates, and it is fixed by matching the (masked) mean of the wrapped
input. Field fitting is a per-voxel weighted least-squares slope of phase
against echo time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import (Mask, ScalarVolume, fftn, frequency_grid, ifftn,
                     masked_mean, phase_scale, require_same_grid)


def laplacian_unwrap(wrapped, mask=None):
    """Unwrap a (-pi, pi] phase volume by the spectral Laplacian method.

    Parameters
    ----------
    wrapped : ScalarVolume in radians, values in (-pi, pi]
    mask : optional Mask; the output mean is matched to the mean of the
        wrapped input over this region (whole volume when omitted).
    """
    w = wrapped.data
    if w.max() > np.pi + 1e-9 or w.min() <= -np.pi - 1e-9:
        raise ValueError("input phase must lie in (-pi, pi]")
    kx, ky, kz = frequency_grid(wrapped.dims, wrapped.voxel_size)
    lap = -(kx * kx + ky * ky + kz * kz)  # spectral Laplacian up to 4*pi^2
    sin_w, cos_w = np.sin(w), np.cos(w)
    rhs = cos_w * ifftn(lap * fftn(sin_w)).real \
        - sin_w * ifftn(lap * fftn(cos_w)).real
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(lap != 0.0, 1.0 / lap, 0.0)
    phi = ifftn(fftn(rhs) * inv).real
    sel = np.ones(wrapped.dims, dtype=bool) if mask is None else mask.data
    phi += masked_mean(w, sel) - masked_mean(phi, sel)
    return ScalarVolume(phi, wrapped.voxel_size, "radians")


@dataclass(frozen=True, eq=False)
class FieldFitResult:
    """Fitted field map plus the voxels where the fit was solvable."""

    field: ScalarVolume
    valid: Mask
    offset: ScalarVolume | None = None


def fit_field(unwrapped, meta, weights=None, fit_offset=False):
    """Fit a field map (ppm) from unwrapped multi-echo phases.

    Per voxel, the phase is modelled as phi_e = slope * TE_e (through the
    origin by default; `fit_offset=True` adds a constant phase term for data
    with a coil offset). The weighted least-squares slope in rad/s converts
    to ppm through 2*pi*gamma*B0*1e-6. Voxels whose weights are all zero
    (or whose offset fit is singular) get field 0 and are flagged invalid.

    Parameters
    ----------
    unwrapped : sequence of ScalarVolume, one per echo, radians
    meta : AcquisitionMeta with matching echo_times_s
    weights : optional sequence of nonnegative ScalarVolume (e.g. squared
        magnitudes); uniform when omitted
    """
    echoes = list(unwrapped)
    tes = meta.echo_times_s
    if len(echoes) == 0:
        raise ValueError("need at least one echo")
    if len(echoes) != len(tes):
        raise ValueError("echo count does not match meta.echo_times_s")
    if fit_offset and len(echoes) < 2:
        raise ValueError("offset fitting needs at least two echoes")
    first = echoes[0]
    for e in echoes[1:]:
        require_same_grid(first, e)
    if weights is None:
        w_arrs = [np.ones(first.dims)] * len(echoes)
    else:
        w_arrs = []
        for w in weights:
            require_same_grid(first, w)
            if w.data.min() < 0:
                raise ValueError("weights must be nonnegative")
            w_arrs.append(w.data)
        if len(w_arrs) != len(echoes):
            raise ValueError("one weight volume per echo required")

    ppm_per_slope = 1.0 / phase_scale(meta.b0_tesla, 1.0)
    if not fit_offset:
        num = np.zeros(first.dims)
        den = np.zeros(first.dims)
        for phi, w, te in zip(echoes, w_arrs, tes):
            num += w * te * phi.data
            den += w * te * te
        valid = den > 0
        slope = np.divide(num, den, out=np.zeros_like(num), where=valid)
        offset_vol = None
    else:
        s_w = np.zeros(first.dims)
        s_t = np.zeros(first.dims)
        s_tt = np.zeros(first.dims)
        s_y = np.zeros(first.dims)
        s_ty = np.zeros(first.dims)
        for phi, w, te in zip(echoes, w_arrs, tes):
            s_w += w
            s_t += w * te
            s_tt += w * te * te
            s_y += w * phi.data
            s_ty += w * te * phi.data
        det = s_w * s_tt - s_t * s_t
        valid = det > 1e-30
        slope = np.divide(s_w * s_ty - s_t * s_y, det,
                          out=np.zeros_like(det), where=valid)
        offset = np.divide(s_tt * s_y - s_t * s_ty, det,
                           out=np.zeros_like(det), where=valid)
        offset_vol = ScalarVolume(offset, first.voxel_size, "radians")

    field = ScalarVolume(slope * ppm_per_slope, first.voxel_size, "ppm")
    return FieldFitResult(field, Mask(valid, first.voxel_size), offset_vol)
