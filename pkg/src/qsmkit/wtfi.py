"""Weakly-supervised single-step reconstruction from the total field.

Given the total field, the whole-brain mask, the eroded mask left by an
SMV-based background removal, and that method's local field as weak
supervision, four volumes are estimated jointly: a susceptibility map and a
local field on the eroded region, and a second pair covering the whole
brain. Five terms couple them:

  * dipole-model fit of the eroded-region susceptibility against the
    supervision field (complex-exponential data term),
  * direct match of the eroded-region local field to the supervision,
  * whole-brain consistency between the local-field output and the dipole
    model of the whole-brain susceptibility,
  * agreement of the two susceptibility maps on the eroded region,
  * total variation of the whole-brain susceptibility.

Minimizing the weighted sum transfers the trusted interior solution outward,
recovering susceptibility in the boundary shell the erosion removed. Here
the objective is minimized variationally (gradient descent with
backtracking) over the four volumes directly. The L2 data terms are squared
(differentiable at their zeros); reported breakdowns expose both the squared
values and their square roots.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .bfr import SMV_RADIUS_MM, smv_convolve
from .dipole import DipoleKernel
from .inversion import (default_phase_scale, smoothed_tv,
                        smoothed_tv_gradient, tkd)
from .optim import StepRule
from .volume import Mask, ScalarVolume, fftn, ifftn, require_same_grid


@dataclass(frozen=True, eq=False)
class WtfiInputs:
    """Measured data and masks driving the five-term objective.

    total_field : ScalarVolume, ppm
    brain_mask : whole-brain Mask
    eroded_mask : Mask left by the SMV background removal; must be a subset
        of brain_mask
    supervision : ScalarVolume, ppm; the background-removed local field on
        the eroded mask (weak supervision)
    weight : data weighting (e.g. magnitude image) or None for uniform;
        normalized to mean 1 over the brain mask
    kernel : DipoleKernel on the same grid
    rad_per_ppm : field-to-phase scale of the exponential data terms
    """

    total_field: ScalarVolume
    brain_mask: Mask
    eroded_mask: Mask
    supervision: ScalarVolume
    kernel: DipoleKernel
    weight: ScalarVolume | None = None
    rad_per_ppm: float | None = None

    def __post_init__(self):
        require_same_grid(self.total_field, self.supervision)
        if self.total_field.dims != self.brain_mask.dims:
            raise ValueError("mask grid does not match the field grid")
        if self.total_field.dims != self.kernel.dims:
            raise ValueError("kernel grid does not match the field grid")
        m1, m2 = self.eroded_mask.data, self.brain_mask.data
        if m1.shape != m2.shape or (m1 & ~m2).any():
            raise ValueError("eroded_mask must be contained in brain_mask")
        if self.rad_per_ppm is None:
            object.__setattr__(self, "rad_per_ppm", default_phase_scale())
        if self.weight is not None:
            require_same_grid(self.total_field, self.weight)
            w = self.weight.data
            if w.min() < 0:
                raise ValueError("weight must be nonnegative")
            mean = w[m2].mean()
            if mean <= 0:
                raise ValueError("weight vanishes over the brain mask")
            object.__setattr__(self, "weight",
                               self.weight.with_data(w / mean))

    # total field restricted to each mask; always derived, never stored
    @property
    def total_field_eroded(self):
        return self.total_field.with_data(self.total_field.data
                                          * self.eroded_mask.data)

    @property
    def total_field_brain(self):
        return self.total_field.with_data(self.total_field.data
                                          * self.brain_mask.data)

    @cached_property
    def _weight_sq_eroded(self):
        w = 1.0 if self.weight is None else self.weight.data
        return (self.eroded_mask.data * w) ** 2

    @cached_property
    def _weight_sq_brain(self):
        w = 1.0 if self.weight is None else self.weight.data
        return (self.brain_mask.data * w) ** 2


@dataclass(frozen=True, eq=False)
class WtfiState:
    """The four optimization unknowns (all ppm volumes).

    chi_eroded / local_eroded live on the eroded mask, chi_brain /
    local_brain on the brain mask; the solver re-projects after every update
    and the loss evaluation projects defensively as well.
    """

    chi_eroded: ScalarVolume
    local_eroded: ScalarVolume
    chi_brain: ScalarVolume
    local_brain: ScalarVolume

    def arrays(self):
        return (self.chi_eroded.data, self.local_eroded.data,
                self.chi_brain.data, self.local_brain.data)


@dataclass(frozen=True)
class LossWeights:
    """Multipliers of the four weighted terms (the model-fit term is unit)."""

    field_supervision: float = 1.0
    model_consistency: float = 1.0
    chi_consistency: float = 1.0
    tv: float = 1e-3

    def __post_init__(self):
        for name in ("field_supervision", "model_consistency",
                     "chi_consistency", "tv"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    """Squared-norm loss terms; total is their weighted sum exactly.

    The *_norm properties expose the unsquared residual norms.
    """

    model_supervision: float
    field_supervision: float
    model_consistency: float
    chi_consistency: float
    tv: float
    total: float

    @property
    def model_supervision_norm(self):
        return float(np.sqrt(self.model_supervision))

    @property
    def field_supervision_norm(self):
        return float(np.sqrt(self.field_supervision))

    @property
    def model_consistency_norm(self):
        return float(np.sqrt(self.model_consistency))

    @property
    def chi_consistency_norm(self):
        return float(np.sqrt(self.chi_consistency))


def _exp_term(weight_sq, scale, reference, model):
    """|| w (exp(i*s*ref) - exp(i*s*model)) ||^2 via the cosine identity."""
    theta = scale * (reference - model)
    return 2.0 * float(np.sum(weight_sq * (1.0 - np.cos(theta)))), theta


def _losses(arrays, inputs, weights, want_grads):
    m1 = inputs.eroded_mask.data
    m2 = inputs.brain_mask.data
    s = inputs.rad_per_ppm
    c1 = inputs._weight_sq_eroded
    c2 = inputs._weight_sq_brain
    dvals = inputs.kernel.values
    sup = inputs.supervision.data

    chi1 = arrays[0] * m1
    fl1 = arrays[1] * m1
    chi2 = arrays[2] * m2
    fl2 = arrays[3] * m2

    model1 = ifftn(fftn(chi1) * dvals).real
    model2 = ifftn(fftn(chi2) * dvals).real

    l_model_sup, theta1 = _exp_term(c1, s, sup, model1)
    diff_fl1 = m1 * (fl1 - sup)
    l_field_sup = float(np.sum(diff_fl1 * diff_fl1))
    l_model_cons, theta2 = _exp_term(c2, s, fl2, model2)
    diff_chi = m1 * (chi1 - chi2)
    l_chi_cons = float(np.sum(diff_chi * diff_chi))
    l_tv = smoothed_tv(chi2)

    total = (l_model_sup + weights.field_supervision * l_field_sup
             + weights.model_consistency * l_model_cons
             + weights.chi_consistency * l_chi_cons + weights.tv * l_tv)
    breakdown = LossBreakdown(l_model_sup, l_field_sup, l_model_cons,
                              l_chi_cons, l_tv, total)
    if not want_grads:
        return breakdown, None

    g_chi1 = ifftn(fftn(-2.0 * s * c1 * np.sin(theta1)) * dvals).real
    g_chi1 = m1 * (g_chi1 + 2.0 * weights.chi_consistency * diff_chi)

    g_fl1 = 2.0 * weights.field_supervision * diff_fl1

    g_chi2 = ifftn(fftn(-2.0 * s * c2 * np.sin(theta2)
                        * weights.model_consistency) * dvals).real
    g_chi2 = g_chi2 - 2.0 * weights.chi_consistency * diff_chi
    if weights.tv != 0.0:
        g_chi2 = g_chi2 + weights.tv * smoothed_tv_gradient(chi2)
    g_chi2 = m2 * g_chi2

    g_fl2 = m2 * (2.0 * s * c2 * np.sin(theta2) * weights.model_consistency)

    return breakdown, (g_chi1, g_fl1, g_chi2, g_fl2)


def evaluate_losses(state, inputs, weights):
    """All five terms and their weighted total for one state."""
    breakdown, _ = _losses(state.arrays(), inputs, weights, want_grads=False)
    return breakdown


def loss_gradients(state, inputs, weights):
    """Analytic gradients of the total loss w.r.t. the four unknowns.

    Returned in state order (chi_eroded, local_eroded, chi_brain,
    local_brain), each zero outside its variable's mask.
    """
    _, grads = _losses(state.arrays(), inputs, weights, want_grads=True)
    vs = inputs.total_field.voxel_size
    return tuple(ScalarVolume(g, vs, "arbitrary") for g in grads)


@dataclass(frozen=True, eq=False)
class WtfiResult:
    state: WtfiState
    trace: np.ndarray  # accepted total-loss values, non-increasing
    breakdowns: tuple  # LossBreakdown per accepted iterate
    info: dict


def initial_state(inputs, tkd_threshold=0.2, seed_smv_radius_mm=SMV_RADIUS_MM):
    """Cheap deterministic seed for the solver.

    The eroded local field starts at the supervision; the whole-brain local
    field starts at the masked total field minus its spherical-mean low-pass
    (a crude background estimate); both susceptibilities start at the TKD
    inversion of the supervision, restricted to their masks.
    """
    m1 = inputs.eroded_mask.data
    m2 = inputs.brain_mask.data
    vs = inputs.total_field.voxel_size
    fl1 = inputs.supervision.data * m1
    masked_total = inputs.total_field_brain
    radius = max(seed_smv_radius_mm, max(vs))
    fl2 = m2 * (masked_total.data - smv_convolve(masked_total, radius).data)
    chi = tkd(ScalarVolume(fl1, vs, "ppm"), inputs.kernel, tkd_threshold).data
    return WtfiState(ScalarVolume(chi * m1, vs, "ppm"),
                     ScalarVolume(fl1, vs, "ppm"),
                     ScalarVolume(chi * m2, vs, "ppm"),
                     ScalarVolume(fl2, vs, "ppm"))


def wtfi_solve(inputs, weights=None, iters=500, step_rule=None):
    """Minimize the five-term objective over the four volumes.

    Plain gradient descent with a backtracking line search (the accepted
    loss trace is non-increasing by construction; persistent increase raises
    DivergenceError). Deterministic given identical inputs.
    """
    if iters < 1:
        raise ValueError("iters must be at least 1")
    weights = weights or LossWeights()
    m1 = inputs.eroded_mask.data
    m2 = inputs.brain_mask.data
    vs = inputs.total_field.voxel_size

    state0 = initial_state(inputs)
    x = [np.array(a) for a in state0.arrays()]
    breakdown, grads = _losses(x, inputs, weights, want_grads=True)
    trace = [breakdown.total]
    breakdowns = [breakdown]

    s = inputs.rad_per_ppm
    cmax = max(inputs._weight_sq_brain.max(), 1e-30)
    rule = step_rule or StepRule(initial=0.25 / (s * s * cmax))
    step = rule.initial
    gnorm2 = sum(float(np.vdot(g, g).real) for g in grads)
    stalled = False
    it = 0
    for it in range(1, iters + 1):
        if gnorm2 == 0.0:
            break
        a = step * rule.grow
        accepted = False
        for _ in range(rule.max_backtracks):
            trial = [xi - a * gi for xi, gi in zip(x, grads)]
            bd_trial, _ = _losses(trial, inputs, weights, want_grads=False)
            if np.isfinite(bd_trial.total) and \
                    bd_trial.total <= trace[-1] - rule.armijo * a * gnorm2:
                accepted = True
                break
            a *= rule.shrink
        if not accepted:
            stalled = True
            break
        step = a
        # keep iterates on their masks
        x = [trial[0] * m1, trial[1] * m1, trial[2] * m2, trial[3] * m2]
        breakdown, grads = _losses(x, inputs, weights, want_grads=True)
        assert breakdown.total <= trace[-1] + 1e-12, \
            "loss increased after an accepted step"
        trace.append(breakdown.total)
        breakdowns.append(breakdown)
        gnorm2 = sum(float(np.vdot(g, g).real) for g in grads)

    state = WtfiState(ScalarVolume(x[0], vs, "ppm"),
                      ScalarVolume(x[1], vs, "ppm"),
                      ScalarVolume(x[2], vs, "ppm"),
                      ScalarVolume(x[3], vs, "ppm"))
    return WtfiResult(state, np.asarray(trace), tuple(breakdowns),
                      {"iterations": it, "stalled": stalled, "step": step})
