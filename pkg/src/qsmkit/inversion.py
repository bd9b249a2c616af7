"""Field-to-source dipole inversions: TKD, nonlinear TV, and multi-orientation.

The dipole spectrum vanishes on the magic-angle cone, which makes
single-orientation inversion ill-posed. TKD caps the division there;
the nonlinear TV method trades cone amplification against an edge-preserving
regularizer using the complex-exponential data term (robust to the unknown,
spatially varying noise in measured local fields); the multi-orientation
least-squares combination conditions the problem with extra field data and
serves as the reference method.
"""

from __future__ import annotations

import numpy as np

from .dipole import dipole_kernel
from .optim import StepRule, gradient_descent
from .volume import (ScalarVolume, adjoint_difference, fftn,
                     forward_difference, ifftn, phase_scale)

TV_EPSILON = 1e-8

DEFAULT_B0_TESLA = 3.0
DEFAULT_EFFECTIVE_TE_S = 0.020


def default_phase_scale():
    """Radians per ppm at the default 3 T / 20 ms effective echo."""
    return phase_scale(DEFAULT_B0_TESLA, DEFAULT_EFFECTIVE_TE_S)


def tkd(local_field, kernel, threshold=0.2):
    """Thresholded k-space division.

    chi(k) = B(k)/D(k) where |D| >= t, B(k)/(t*sign(D)) where 0 < |D| < t,
    and 0 where D = 0 (the unobservable DC term stays zero).
    """
    if not 0.0 < threshold < 2.0 / 3.0:
        raise ValueError("threshold must lie in (0, 2/3)")
    if local_field.dims != kernel.dims:
        raise ValueError(f"shape mismatch: {local_field.dims} vs {kernel.dims}")
    d = kernel.values
    inv = np.zeros_like(d)
    big = np.abs(d) >= threshold
    small = (~big) & (d != 0.0)
    inv[big] = 1.0 / d[big]
    inv[small] = 1.0 / (threshold * np.sign(d[small]))
    chi = ifftn(fftn(local_field.data) * inv).real
    return ScalarVolume(chi, local_field.voxel_size, "ppm")


def smoothed_tv(arr):
    """Total variation with Charbonnier smoothing, exactly 0 for constants."""
    total = 0.0
    eps2 = TV_EPSILON * TV_EPSILON
    for ax in range(3):
        g = forward_difference(arr, ax)
        total += float(np.sum(np.sqrt(g * g + eps2) - TV_EPSILON))
    return total


def smoothed_tv_gradient(arr):
    eps2 = TV_EPSILON * TV_EPSILON
    out = np.zeros_like(arr)
    for ax in range(3):
        g = forward_difference(arr, ax)
        out += adjoint_difference(g / np.sqrt(g * g + eps2), ax)
    return out


def ntv_objective(chi_arr, field_arr, weight_sq, kernel_values, lambda_tv,
                  rad_per_ppm, want_grad=True):
    """Objective and gradient of the nonlinear TV inversion.

    Data term: || m W (exp(i*s*f) - exp(i*s*(d*chi))) ||^2, evaluated as
    2 * sum(c * (1 - cos(s*(f - d*chi)))) with c = (m*W)^2, which is exact
    for unit-modulus exponentials. The dipole operator is self-adjoint, so
    the gradient back-projects through the same convolution.
    """
    s = rad_per_ppm
    model = ifftn(fftn(chi_arr) * kernel_values).real
    theta = s * (field_arr - model)
    value = 2.0 * float(np.sum(weight_sq * (1.0 - np.cos(theta))))
    value += lambda_tv * smoothed_tv(chi_arr)
    if not want_grad:
        return value, None
    back = -2.0 * s * weight_sq * np.sin(theta)
    grad = ifftn(fftn(back) * kernel_values).real
    if lambda_tv != 0.0:
        grad = grad + lambda_tv * smoothed_tv_gradient(chi_arr)
    return value, grad


def nonlinear_tv_invert(local_field, weight, mask, kernel, lambda_tv=1e-3,
                        iters=100, step_rule=None, rad_per_ppm=None,
                        full_output=False):
    """Nonlinear dipole inversion with total-variation regularization.

    Gradient descent with backtracking line search from zero initialization;
    the accepted objective values are non-increasing by construction and the
    objective rising persistently raises DivergenceError. Deterministic.

    Parameters
    ----------
    local_field : ScalarVolume, ppm
    weight : ScalarVolume or None (uniform); data weighting, e.g. magnitude
    mask : Mask restricting the data term
    lambda_tv : nonnegative TV weight
    rad_per_ppm : field-to-phase scale; defaults to 3 T / 20 ms
    full_output : also return the objective trace
    """
    if lambda_tv < 0:
        raise ValueError("lambda_tv must be nonnegative")
    if iters < 1:
        raise ValueError("iters must be at least 1")
    s = default_phase_scale() if rad_per_ppm is None else float(rad_per_ppm)
    w = np.ones(local_field.dims) if weight is None else weight.data
    c = (mask.data * w) ** 2

    def fg(xs):
        v, g = ntv_objective(xs[0], local_field.data, c, kernel.values,
                             lambda_tv, s)
        return v, (g,)

    def f(xs):
        return ntv_objective(xs[0], local_field.data, c, kernel.values,
                             lambda_tv, s, want_grad=False)[0]

    rule = step_rule or StepRule(initial=0.5 / (s * s * max(c.max(), 1e-30)))
    x0 = (np.zeros(local_field.dims),)
    (chi,), trace, _ = gradient_descent(fg, x0, iters, rule, value_only=f)
    vol = ScalarVolume(chi, local_field.voxel_size, "ppm")
    return (vol, trace) if full_output else vol


def cosmos(local_fields, b0_dirs, voxel_size, epsilon=1e-6):
    """Least-squares inversion from one or more head orientations.

    chi(k) = sum_i D_i(k) B_i(k) / (sum_i D_i(k)^2 + epsilon). With several
    non-collinear orientations the denominator is bounded away from zero
    almost everywhere and epsilon only guards isolated zeros; a single
    orientation degenerates to Tikhonov-regularized direct inversion.
    """
    fields = list(local_fields)
    dirs = [np.asarray(d, dtype=float) for d in b0_dirs]
    if len(fields) == 0 or len(fields) != len(dirs):
        raise ValueError("need one b0 direction per field")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if len(dirs) >= 2:
        sv = np.linalg.svd(np.stack(dirs), compute_uv=False)
        if sv[1] < 1e-6:
            raise ValueError("orientations are collinear; they add no "
                             "information over a single acquisition")
    dims = fields[0].dims
    num = np.zeros(dims, dtype=complex)
    den = np.full(dims, epsilon)
    for f, b in zip(fields, dirs):
        if f.dims != dims:
            raise ValueError("all field volumes must share one grid")
        d = dipole_kernel(dims, voxel_size, b).values
        num += d * fftn(f.data)
        den += d * d
    chi = ifftn(num / den).real
    return ScalarVolume(chi, fields[0].voxel_size, "ppm")
