"""Background field removal: SHARP, RESHARP, PDF, and LBV.

All four methods split the measured total field into a local part (sources
inside the brain mask) and a background part (air cavities, skull). The SMV
methods exploit that background fields are harmonic inside the mask and so
invariant under spherical-mean filtering; PDF fits explicit external
susceptibility sources; LBV solves the harmonic boundary-value problem
directly. The mean of each local field over its output mask is removed:
the DC level is unobservable, and fixing it makes methods comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dipole import dipole_kernel
from .optim import conjugate_gradient
from .phantom import sphere_occupancy
from .volume import Mask, ScalarVolume, erode_mask, fftn, ifftn, masked_mean

SMV_RADIUS_MM = 4.0


@dataclass(frozen=True, eq=False)
class BfrResult:
    """Local field plus the mask it is valid on and solver diagnostics."""

    local_field: ScalarVolume
    mask_out: Mask
    method: str
    iterations_used: int = 0
    residual_norm: float = 0.0
    converged: bool = True


def _sphere_kernel_hat(dims, voxel_size, radius_mm):
    """Spectrum of the unit-integral sphere indicator, centred at the origin."""
    if radius_mm < max(voxel_size):
        raise ValueError(
            f"SMV radius {radius_mm} mm is smaller than a voxel {voxel_size}")
    center = tuple(((n // 2) - (n - 1) / 2.0) * d
                   for n, d in zip(dims, voxel_size))
    sphere = sphere_occupancy(dims, voxel_size, center, radius_mm)
    sphere /= sphere.sum()
    # the centre voxel is index n//2, which ifftshift moves to index 0
    return fftn(np.fft.ifftshift(sphere)).real


def smv_convolve(volume, radius_mm):
    """Spherical mean value: convolution with a normalized sphere."""
    rho = _sphere_kernel_hat(volume.dims, volume.voxel_size, radius_mm)
    return volume.with_data(ifftn(fftn(volume.data) * rho).real)


def _finish(local, mask_out, method, iters=0, resid=0.0, tol=np.inf):
    m = mask_out.data
    local = local * m
    local -= masked_mean(local, m) * m
    return BfrResult(ScalarVolume(local, mask_out.voxel_size, "ppm"),
                     mask_out, method, iters, resid, resid <= tol)


def sharp(total_field, brain_mask, radius_mm=SMV_RADIUS_MM,
          tsvd_threshold=0.05):
    """SMV-based removal with truncated spectral deconvolution.

    Applies (delta - sphere) to the masked field, which annihilates the
    harmonic background, then deconvolves by thresholded division. The
    output lives on the brain mask eroded by the sphere radius.
    """
    if not 0.0 < tsvd_threshold < 1.0:
        raise ValueError("tsvd_threshold must be in (0, 1)")
    h = 1.0 - _sphere_kernel_hat(total_field.dims, total_field.voxel_size,
                                 radius_mm)
    eroded = erode_mask(brain_mask, radius_mm)
    if eroded.count == 0:
        raise ValueError("mask vanished after erosion; radius too large")
    highpass = ifftn(fftn(brain_mask.data * total_field.data) * h).real
    inv = np.where(np.abs(h) >= tsvd_threshold, 1.0 / np.where(h == 0, 1, h),
                   0.0)
    local = ifftn(fftn(eroded.data * highpass) * inv).real
    return _finish(local, eroded, "sharp")


def resharp(total_field, brain_mask, radius_mm=SMV_RADIUS_MM,
            lambda_tik=1e-3, cg_tol=1e-6, cg_maxiter=100):
    """Tikhonov-regularized SMV deconvolution solved by conjugate gradient.

    Minimizes  || M1 ((delta-sphere)*x - (delta-sphere)*f) ||^2
               + lambda_tik ||x||^2
    over the whole volume, with M1 the eroded mask; returns x on M1 with
    its mean removed. Non-convergence within cg_maxiter is reported via
    residual_norm/converged rather than raised.
    """
    if lambda_tik <= 0:
        raise ValueError("lambda_tik must be positive")
    h = 1.0 - _sphere_kernel_hat(total_field.dims, total_field.voxel_size,
                                 radius_mm)
    eroded = erode_mask(brain_mask, radius_mm)
    if eroded.count == 0:
        raise ValueError("mask vanished after erosion; radius too large")
    m1 = eroded.data

    def conv(arr):
        return ifftn(fftn(arr) * h).real

    def op(x):
        return conv(m1 * conv(x)) + lambda_tik * x

    rhs = conv(m1 * conv(total_field.data))
    x, iters, resid = conjugate_gradient(op, rhs, tol=cg_tol,
                                         maxiter=cg_maxiter)
    return _finish(x, eroded, "resharp", iters, resid, cg_tol)


def pdf(total_field, brain_mask, weight=None, cg_tol=1e-6, cg_maxiter=100,
        b0_dir=(0.0, 0.0, 1.0)):
    """Projection onto dipole fields.

    Fits external susceptibility supported outside the brain mask whose
    induced field best explains the measured field inside the mask (weighted
    least squares), then subtracts it. The output mask is the full brain
    mask: no erosion, at the cost of reduced accuracy near the boundary.
    """
    m2 = brain_mask.data.astype(float)
    if weight is None:
        w2 = m2
    else:
        if weight.data.min() < 0:
            raise ValueError("weight must be nonnegative")
        w2 = (weight.data ** 2) * m2
    outside = 1.0 - m2
    d = dipole_kernel(total_field.dims, total_field.voxel_size, b0_dir).values

    def conv(arr):
        return ifftn(fftn(arr) * d).real

    def op(x):
        return outside * conv(w2 * conv(outside * x))

    rhs = outside * conv(w2 * total_field.data)
    chi_ext, iters, resid = conjugate_gradient(op, rhs, tol=cg_tol,
                                               maxiter=cg_maxiter)
    background = conv(outside * chi_ext)
    local = total_field.data - background
    return _finish(local, Mask(brain_mask.data, total_field.voxel_size),
                   "pdf", iters, resid, cg_tol)


def _shift_and(mask):
    """True where a voxel and all six neighbours are inside the mask."""
    inner = mask.copy()
    for ax in range(3):
        plus = np.zeros_like(mask)
        minus = np.zeros_like(mask)
        sl_to = [slice(None)] * 3
        sl_from = [slice(None)] * 3
        sl_to[ax] = slice(0, -1)
        sl_from[ax] = slice(1, None)
        plus[tuple(sl_to)] = mask[tuple(sl_from)]
        minus[tuple(sl_from)] = mask[tuple(sl_to)]
        inner &= plus & minus
    return inner


def lbv(total_field, brain_mask, cg_tol=1e-6, cg_maxiter=500):
    """Laplacian boundary value method.

    Solves laplace(b) = 0 inside the mask with b equal to the measured
    field on the one-voxel boundary shell (7-point stencil, conjugate
    gradient); the harmonic solution is the background, the remainder the
    local field. The output mask is the full brain mask.
    """
    m2 = brain_mask.data
    interior = _shift_and(m2)
    if not interior.any():
        raise ValueError("mask has no interior voxels")
    shell = m2 & ~interior
    vs = total_field.voxel_size
    inv_d2 = [1.0 / (d * d) for d in vs]

    def neg_laplacian(arr):
        out = np.zeros_like(arr)
        for ax in range(3):
            shifted_p = np.zeros_like(arr)
            shifted_m = np.zeros_like(arr)
            sl_to = [slice(None)] * 3
            sl_from = [slice(None)] * 3
            sl_to[ax] = slice(0, -1)
            sl_from[ax] = slice(1, None)
            shifted_p[tuple(sl_to)] = arr[tuple(sl_from)]
            shifted_m[tuple(sl_from)] = arr[tuple(sl_to)]
            out += (2.0 * arr - shifted_p - shifted_m) * inv_d2[ax]
        return out

    def op(u):
        return neg_laplacian(u * interior) * interior

    g = total_field.data * shell
    rhs = -neg_laplacian(g) * interior
    u, iters, resid = conjugate_gradient(op, rhs, tol=cg_tol,
                                         maxiter=cg_maxiter)
    background = u * interior + g
    local = total_field.data - background
    return _finish(local, Mask(m2, vs), "lbv", iters, resid, cg_tol)


METHODS = {"sharp": sharp, "resharp": resharp, "pdf": pdf, "lbv": lbv}


def remove_background(method, total_field, brain_mask, **kwargs):
    """Dispatch to one of the four removal methods by name."""
    try:
        fn = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown BFR method {method!r}; "
                         f"expected one of {sorted(METHODS)}") from None
    return fn(total_field, brain_mask, **kwargs)
