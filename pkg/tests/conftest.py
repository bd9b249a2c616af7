"""Shared fixtures: phantoms and reconstruction runs reused across modules.

The expensive 64^3 runs (background removal, the noisy inversion pair, the
weakly-supervised solve) are session-scoped so the per-operation tests and
the acceptance suite measure the same frozen computations.
"""

import numpy as np
import pytest

import qsmkit as qk

VS = (1.0, 1.0, 1.0)
DIMS64 = (64, 64, 64)
Z_DIR = (0.0, 0.0, 1.0)


def masked_nrmse(pred, ref, sel, demean=True):
    """Percent NRMSE over a boolean selection, demeaned by default.

    The DC level of fields and susceptibilities is unobservable (the dipole
    spectrum is zeroed at k=0), so accuracy comparisons remove the mean of
    both operands over the evaluation region.
    """
    p = np.asarray(pred)[sel].astype(float)
    r = np.asarray(ref)[sel].astype(float)
    if demean:
        p = p - p.mean()
        r = r - r.mean()
    return 100.0 * np.linalg.norm(p - r) / np.linalg.norm(r)


@pytest.fixture(scope="session")
def bfr_phantom():
    """Internal 1 ppm sphere plus a 9 ppm external source at 64^3."""
    spec = qk.PhantomSpec(
        DIMS64, VS, brain_mask_radius_mm=20.0,
        spheres=(qk.Sphere((-6.0, 0.0, 0.0), 3.0, 1.0),),
        background_spheres=(qk.Sphere((26.0, 0.0, 0.0), 4.0, 9.0),))
    chi, chi_bg, m2 = qk.build_phantom(spec)
    kernel = qk.dipole_kernel(DIMS64, VS, Z_DIR)
    f_local = qk.forward_field(chi, kernel)
    f_bg = qk.forward_field(chi_bg, kernel)
    f_total = f_local.with_data(f_local.data + f_bg.data)
    return {
        "chi": chi, "chi_bg": chi_bg, "m2": m2,
        "m1": qk.erode_mask(m2, 4.0),
        "f_local": f_local, "f_bg": f_bg, "f_total": f_total,
        "kernel": kernel,
    }


@pytest.fixture(scope="session")
def bfr_results(bfr_phantom):
    """Every method applied to the combined, internal-only, and
    background-only fields."""
    ph = bfr_phantom
    kwargs = {"pdf": {"cg_maxiter": 300}}
    out = {}
    for method in ("sharp", "resharp", "pdf", "lbv"):
        kw = kwargs.get(method, {})
        out[method] = {
            "combined": qk.remove_background(method, ph["f_total"], ph["m2"],
                                             **kw),
            "internal": qk.remove_background(method, ph["f_local"], ph["m2"],
                                             **kw),
            "background": qk.remove_background(method, ph["f_bg"], ph["m2"],
                                               **kw),
        }
    return out


@pytest.fixture(scope="session")
def sphere_phantom():
    """Centered 8 mm sphere at tissue scale (0.1 ppm), 64^3."""
    spec = qk.PhantomSpec(DIMS64, VS, brain_mask_radius_mm=20.0,
                          spheres=(qk.Sphere((0.0, 0.0, 0.0), 8.0, 0.1),))
    chi, _, m2 = qk.build_phantom(spec)
    kernel = qk.dipole_kernel(DIMS64, VS, Z_DIR)
    return {"chi": chi, "m2": m2, "kernel": kernel,
            "f_local": qk.forward_field(chi, kernel)}


@pytest.fixture(scope="session")
def small_grid_masks():
    """12^3 spherical masks for gradient-check style tests."""
    dims = (12, 12, 12)
    x, y, z = np.ogrid[:12, :12, :12]
    r = np.sqrt((x - 5.5) ** 2 + (y - 5.5) ** 2 + (z - 5.5) ** 2)
    m2 = qk.Mask(r <= 5.0, VS)
    m1 = qk.erode_mask(m2, 1.5)
    return dims, m1, m2
