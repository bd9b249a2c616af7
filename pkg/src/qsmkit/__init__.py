"""qsmkit: quantitative susceptibility mapping at desk scale.

Dipole forward physics, synthetic phantoms with analytic oracles, Laplacian
phase unwrapping, four background-field-removal baselines, classical dipole
inversions, a weakly-supervised five-term total-field objective solved
variationally, masked image-quality metrics, minimal NIfTI-1 I/O, and a
config-driven pipeline CLI.
"""

__version__ = "0.1.0"

from .volume import (AcquisitionMeta, GridMismatchError, Mask, ScalarVolume,
                     SpectralVolume, erode_mask, fourier_forward,
                     fourier_inverse, frequency_grid, gradient_adjoint,
                     gradient_forward, phase_scale, wrap_phase)
from .dipole import DipoleKernel, dipole_kernel, forward_field
from .phantom import (Cylinder, EchoSeries, PhantomSpec, Sphere,
                      analytic_sphere_field, build_phantom, synthesize_echoes)
from .unwrap import FieldFitResult, fit_field, laplacian_unwrap
from .bfr import BfrResult, lbv, pdf, remove_background, resharp, sharp, \
    smv_convolve
from .inversion import cosmos, nonlinear_tv_invert, tkd
from .wtfi import (LossBreakdown, LossWeights, WtfiInputs, WtfiResult,
                   WtfiState, evaluate_losses, initial_state, loss_gradients,
                   wtfi_solve)
from .metrics import MetricReport, evaluate_metrics, nrmse
from .nifti import NiftiFormatError, read_mask, read_volume, write_mask, \
    write_volume
from .optim import DivergenceError, StepRule, conjugate_gradient, \
    gradient_descent
from .pipeline import ConfigError, PipelineStageError, RunConfig, run_pipeline

__all__ = [
    "AcquisitionMeta", "BfrResult", "ConfigError", "Cylinder",
    "DipoleKernel", "DivergenceError", "EchoSeries", "FieldFitResult",
    "GridMismatchError", "LossBreakdown", "LossWeights", "Mask",
    "MetricReport", "NiftiFormatError", "PhantomSpec", "PipelineStageError",
    "RunConfig", "ScalarVolume", "SpectralVolume", "Sphere", "StepRule",
    "WtfiInputs", "WtfiResult", "WtfiState", "analytic_sphere_field",
    "build_phantom", "conjugate_gradient", "cosmos", "dipole_kernel",
    "erode_mask", "evaluate_losses", "evaluate_metrics", "fit_field",
    "forward_field", "fourier_forward", "fourier_inverse", "frequency_grid",
    "gradient_adjoint", "gradient_descent", "gradient_forward",
    "initial_state", "laplacian_unwrap", "lbv", "loss_gradients",
    "nonlinear_tv_invert", "nrmse", "pdf", "phase_scale", "read_mask",
    "read_volume", "remove_background", "resharp", "run_pipeline", "sharp",
    "smv_convolve", "synthesize_echoes", "tkd", "wrap_phase", "write_mask",
    "write_volume", "wtfi_solve",
]
