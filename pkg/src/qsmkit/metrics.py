"""Masked image-quality metrics: pSNR, NRMSE, HFEN, SSIM.

Conventions (frozen; the literature leaves them implementation-defined):

  * all statistics are computed over masked voxels only;
  * HFEN filters the raw volumes with an explicit 15^3 Laplacian-of-Gaussian
    kernel (sigma 1.5 voxels, zero-sum) before taking the masked norm ratio,
    so adding one constant to both inputs changes nothing;
  * SSIM uses an 11^3 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
    dynamic range max(ref) - min(ref) over the mask; windows centred on
    masked voxels may include zero-filled unmasked neighbours.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import require_same_grid

PSNR_DISPLAY_CAP_DB = 99.9
CSV_COLUMNS = ("psnr_db", "nrmse_pct", "hfen_pct", "ssim")

_SSIM_SIGMA = 1.5
_SSIM_RADIUS = 5  # 11^3 support
_LOG_SIZE = 15
_LOG_SIGMA = 1.5


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    nrmse_pct: float
    hfen_pct: float
    ssim: float

    def __post_init__(self):
        if self.nrmse_pct < 0 or self.hfen_pct < 0:
            raise ValueError("error norms cannot be negative")
        if self.ssim > 1.0 + 1e-9:
            raise ValueError("ssim cannot exceed 1")

    def csv_row(self):
        """Values in CSV_COLUMNS order; infinite pSNR is capped for display."""
        psnr = min(self.psnr_db, PSNR_DISPLAY_CAP_DB)
        return (f"{psnr:.6g}", f"{self.nrmse_pct:.6g}",
                f"{self.hfen_pct:.6g}", f"{self.ssim:.6g}")


def nrmse(pred_arr, ref_arr, mask_arr, demean=False):
    """Percent normalized RMSE over a mask; raises if the reference is zero."""
    p = pred_arr[mask_arr].astype(float)
    r = ref_arr[mask_arr].astype(float)
    if demean:
        p = p - p.mean()
        r = r - r.mean()
    denom = np.linalg.norm(r)
    if denom == 0:
        raise ValueError("reference is identically zero over the mask; "
                         "NRMSE is undefined")
    return 100.0 * float(np.linalg.norm(p - r) / denom)


def log_kernel(size=_LOG_SIZE, sigma=_LOG_SIGMA):
    """Discrete 3D Laplacian-of-Gaussian kernel, adjusted to zero sum."""
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=float)
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    r2 = x * x + y * y + z * z
    g = np.exp(-r2 / (2.0 * sigma * sigma))
    k = g * (r2 - 3.0 * sigma * sigma) / sigma ** 4
    return k - k.mean()


def _ssim_mean(x, y, mask_arr, data_range):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    blur = lambda a: ndimage.gaussian_filter(
        a, _SSIM_SIGMA, mode="constant",
        truncate=_SSIM_RADIUS / _SSIM_SIGMA)
    mu_x = blur(x)
    mu_y = blur(y)
    var_x = np.maximum(blur(x * x) - mu_x * mu_x, 0.0)
    var_y = np.maximum(blur(y * y) - mu_y * mu_y, 0.0)
    cov = blur(x * y) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) \
        / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
    return float(ssim_map[mask_arr].mean())


def evaluate_metrics(pred, ref, mask):
    """Score a reconstruction against a reference within a mask.

    pSNR uses peak = max|ref| over the mask and the masked RMSE; an exact
    match reports +inf (capped at 99.9 dB for display). NRMSE and HFEN are
    percentages of the reference norm; HFEN compares Laplacian-of-Gaussian
    filtered volumes. Raises ValueError when a reference norm vanishes.
    """
    require_same_grid(pred, ref)
    if pred.dims != mask.dims:
        raise ValueError("mask grid does not match the volumes")
    m = mask.data
    if not m.any():
        raise ValueError("mask is empty")

    nrmse_pct = nrmse(pred.data, ref.data, m)

    diff = pred.data[m] - ref.data[m]
    rmse = float(np.sqrt(np.mean(diff * diff)))
    peak = float(np.abs(ref.data[m]).max())
    psnr_db = math.inf if rmse == 0.0 else 20.0 * math.log10(peak / rmse)

    k = log_kernel()
    log_pred = ndimage.convolve(pred.data, k, mode="constant")
    log_ref = ndimage.convolve(ref.data, k, mode="constant")
    hfen_pct = nrmse(log_pred, log_ref, m)

    lo = float(ref.data[m].min())
    hi = float(ref.data[m].max())
    if hi == lo:
        raise ValueError("reference has zero dynamic range over the mask; "
                         "SSIM is undefined")
    ssim = _ssim_mean(pred.data * m, ref.data * m, m, hi - lo)

    return MetricReport(psnr_db, nrmse_pct, hfen_pct, ssim)
