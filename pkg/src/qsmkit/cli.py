"""Command line interface.

    qsm phantom|forward|echoes|unwrap|fit-field|bfr|invert|wtfi|metrics|pipeline

Exit codes: 0 success, 1 validation/usage error, 2 numerical failure.
Any command that writes a volume accepts --dump-slice z=K to also save a
grayscale PNG of that axial slice. QSM_THREADS caps FFT worker count.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import __version__
from .bfr import remove_background
from .dipole import dipole_kernel, forward_field
from .inversion import cosmos, nonlinear_tv_invert, tkd
from .metrics import CSV_COLUMNS, evaluate_metrics
from .nifti import NiftiFormatError, read_mask, read_volume, write_mask, \
    write_volume
from .optim import DivergenceError
from .phantom import PhantomSpec, Sphere, build_phantom, synthesize_echoes
from .pipeline import ConfigError, PipelineStageError, RunConfig, run_pipeline
from .unwrap import fit_field, laplacian_unwrap
from .volume import AcquisitionMeta, Mask
from .wtfi import LossWeights, WtfiInputs, wtfi_solve

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; map those to validation (1)
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit_(EXIT_VALIDATION, f"{self.prog}: error: {message}")


class SystemExit_(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _triple(text):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated values")
    return tuple(parts)


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def _sphere_arg(text):
    v = _floats(text)
    if len(v) != 5:
        raise argparse.ArgumentTypeError("expected cx,cy,cz,radius,delta_chi")
    return v


def _dump_slice(volume, spec, out_base):
    """Write one axial slice as a grayscale PNG (min-max normalized)."""
    from PIL import Image

    if not spec.startswith("z="):
        raise ValueError("--dump-slice expects the form z=K")
    k = int(spec[2:])
    if not 0 <= k < volume.dims[2]:
        raise ValueError(f"slice index {k} outside [0, {volume.dims[2]})")
    sl = volume.data[:, :, k]
    lo, hi = float(sl.min()), float(sl.max())
    scaled = np.zeros_like(sl) if hi == lo else (sl - lo) / (hi - lo)
    img = Image.fromarray((scaled * 255).astype(np.uint8).T, mode="L")
    path = f"{out_base}.z{k}.png"
    img.save(path)
    print(f"wrote {path}")


def _write_out(volume, path, dump=None):
    write_volume(volume, path)
    print(f"wrote {path}")
    if dump:
        _dump_slice(volume, dump, path)


def _acquisition(args):
    tes = tuple(t * 1e-3 for t in args.tes)
    return AcquisitionMeta(args.b0, tuple(args.b0_dir), tes)


def _add_common(p):
    p.add_argument("--seed", type=int, default=0,
                   help="seed for anything stochastic (default 0)")
    p.add_argument("--dump-slice", metavar="z=K", default=None,
                   help="also write a grayscale PNG of axial slice K")


def build_parser():
    parser = _Parser(prog="qsm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version",
                        version=f"qsm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="rasterize a synthetic phantom")
    p.add_argument("--dims", type=lambda s: tuple(int(v) for v in s.split(",")),
                   default=(48, 48, 48))
    p.add_argument("--voxel-size", type=_triple, default=(1.0, 1.0, 1.0))
    p.add_argument("--brain-radius", type=float, required=True,
                   help="brain mask sphere radius in mm")
    p.add_argument("--sphere", type=_sphere_arg, action="append", default=[],
                   metavar="CX,CY,CZ,R,DCHI", help="internal sphere (repeatable)")
    p.add_argument("--background-sphere", type=_sphere_arg, action="append",
                   default=[], metavar="CX,CY,CZ,R,DCHI")
    p.add_argument("--b0-dir", type=_triple, default=(0.0, 0.0, 1.0))
    p.add_argument("--out-dir", required=True)
    _add_common(p)

    p = sub.add_parser("forward", help="susceptibility to field (ppm)")
    p.add_argument("--chi", required=True)
    p.add_argument("--b0-dir", type=_triple, default=(0.0, 0.0, 1.0))
    p.add_argument("--pad", action="store_true",
                   help="zero-pad 2x against wrap-around")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("echoes", help="simulate wrapped multi-echo phases")
    p.add_argument("--field", required=True)
    p.add_argument("--b0", type=float, default=3.0)
    p.add_argument("--b0-dir", type=_triple, default=(0.0, 0.0, 1.0))
    p.add_argument("--tes", type=_floats, default=(10.4, 17.4, 24.4, 31.4),
                   help="echo times in ms")
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.add_argument("--out-dir", required=True)
    _add_common(p)

    p = sub.add_parser("unwrap", help="Laplacian phase unwrapping")
    p.add_argument("--phase", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("fit-field", help="multi-echo field fit (ppm)")
    p.add_argument("--phases", nargs="+", required=True,
                   help="unwrapped phase volumes, one per echo")
    p.add_argument("--mags", nargs="*", default=[],
                   help="magnitude volumes for magnitude^2 weighting")
    p.add_argument("--b0", type=float, default=3.0)
    p.add_argument("--b0-dir", type=_triple, default=(0.0, 0.0, 1.0))
    p.add_argument("--tes", type=_floats, required=True, help="ms")
    p.add_argument("--fit-offset", action="store_true")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("bfr", help="background field removal")
    p.add_argument("--method", required=True,
                   choices=("sharp", "resharp", "pdf", "lbv"))
    p.add_argument("--field", required=True)
    p.add_argument("--mask", required=True, help="brain mask")
    p.add_argument("--radius", type=float, default=4.0, help="SMV radius mm")
    p.add_argument("--lambda", dest="lambda_tik", type=float, default=1e-3)
    p.add_argument("--tsvd-threshold", type=float, default=0.05)
    p.add_argument("--cg-tol", type=float, default=1e-6)
    p.add_argument("--cg-maxiter", type=int, default=None)
    p.add_argument("--b0-dir", type=_triple, default=(0.0, 0.0, 1.0))
    p.add_argument("--out", required=True, help="local field output")
    p.add_argument("--out-mask", default=None, help="output-mask path")
    _add_common(p)

    p = sub.add_parser("invert", help="field-to-source dipole inversion")
    p.add_argument("--method", required=True, choices=("tkd", "ntv", "cosmos"))
    p.add_argument("--field", action="append", required=True,
                   help="local field; repeat for cosmos orientations")
    p.add_argument("--b0-dir", type=_triple, action="append", default=None,
                   help="repeat to match --field for cosmos")
    p.add_argument("--mask", default=None)
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--lambda-tv", type=float, default=1e-3)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("wtfi", help="weakly-supervised total-field inversion")
    p.add_argument("--field", required=True, help="total field (ppm)")
    p.add_argument("--brain-mask", required=True)
    p.add_argument("--eroded-mask", required=True)
    p.add_argument("--supervision", required=True,
                   help="background-removed local field on the eroded mask")
    p.add_argument("--weight", default=None, help="data weighting volume")
    p.add_argument("--b0-dir", type=_triple, default=(0.0, 0.0, 1.0))
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--l1", type=float, default=1.0)
    p.add_argument("--l2", type=float, default=1.0)
    p.add_argument("--l3", type=float, default=1.0)
    p.add_argument("--l4", type=float, default=1e-3)
    p.add_argument("--out-chi", required=True)
    p.add_argument("--out-field", required=True)
    p.add_argument("--trace", default=None, help="loss trace CSV path")
    _add_common(p)

    p = sub.add_parser("metrics", help="pSNR/NRMSE/HFEN/SSIM within a mask")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--demean", action="store_true",
                   help="remove each input's masked mean first")
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    _add_common(p)

    p = sub.add_parser("pipeline", help="run a JSON-configured chain")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    return parser


def _cmd_phantom(args):
    spec = PhantomSpec(
        args.dims, args.voxel_size, args.brain_radius,
        spheres=tuple(Sphere(tuple(s[:3]), s[3], s[4]) for s in args.sphere),
        background_spheres=tuple(Sphere(tuple(s[:3]), s[3], s[4])
                                 for s in args.background_sphere),
        rng_seed=args.seed)
    chi, chi_bg, m2 = build_phantom(spec)
    kernel = dipole_kernel(spec.dims, spec.voxel_size, args.b0_dir)
    total = forward_field(chi.with_data(chi.data + chi_bg.data), kernel)
    import os
    os.makedirs(args.out_dir, exist_ok=True)
    _write_out(chi, f"{args.out_dir}/chi.nii", args.dump_slice)
    _write_out(chi_bg, f"{args.out_dir}/chi_background.nii")
    _write_out(forward_field(chi, kernel), f"{args.out_dir}/field_local.nii")
    _write_out(total, f"{args.out_dir}/field.nii")
    write_mask(m2, f"{args.out_dir}/m2.nii")
    print(f"wrote {args.out_dir}/m2.nii")


def _cmd_forward(args):
    chi = read_volume(args.chi, unit="ppm")
    kernel = dipole_kernel(chi.dims, chi.voxel_size, args.b0_dir)
    _write_out(forward_field(chi, kernel, pad=args.pad), args.out,
               args.dump_slice)


def _cmd_echoes(args):
    field = read_volume(args.field, unit="ppm")
    meta = AcquisitionMeta(args.b0, args.b0_dir,
                           tuple(t * 1e-3 for t in args.tes))
    series = synthesize_echoes(field, meta, noise_sd=args.noise_sd,
                               rng_seed=args.seed)
    import os
    os.makedirs(args.out_dir, exist_ok=True)
    for i, (mag, phase) in enumerate(zip(series.magnitudes,
                                         series.wrapped_phases), start=1):
        write_volume(mag, f"{args.out_dir}/mag_e{i}.nii")
        write_volume(phase, f"{args.out_dir}/phase_e{i}.nii")
    sidecar = {"b0_tesla": args.b0, "b0_dir": list(args.b0_dir),
               "echo_times_ms": list(args.tes)}
    with open(f"{args.out_dir}/acquisition.json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)
    print(f"wrote {len(series)} echoes to {args.out_dir}")


def _cmd_unwrap(args):
    phase = read_volume(args.phase, unit="radians")
    mask = read_mask(args.mask) if args.mask else None
    _write_out(laplacian_unwrap(phase, mask), args.out, args.dump_slice)


def _cmd_fit_field(args):
    phases = [read_volume(p, unit="radians") for p in args.phases]
    meta = AcquisitionMeta(args.b0, args.b0_dir,
                           tuple(t * 1e-3 for t in args.tes))
    weights = None
    if args.mags:
        mags = [read_volume(m) for m in args.mags]
        weights = [m.with_data(m.data ** 2) for m in mags]
    fit = fit_field(phases, meta, weights, fit_offset=args.fit_offset)
    _write_out(fit.field, args.out, args.dump_slice)


def _cmd_bfr(args):
    field = read_volume(args.field, unit="ppm")
    mask = read_mask(args.mask)
    kwargs = {"cg_tol": args.cg_tol}
    if args.cg_maxiter is not None:
        kwargs["cg_maxiter"] = args.cg_maxiter
    if args.method in ("sharp", "resharp"):
        kwargs = {"radius_mm": args.radius}
        if args.method == "sharp":
            kwargs["tsvd_threshold"] = args.tsvd_threshold
        else:
            kwargs["lambda_tik"] = args.lambda_tik
            kwargs["cg_tol"] = args.cg_tol
            if args.cg_maxiter is not None:
                kwargs["cg_maxiter"] = args.cg_maxiter
    elif args.method == "pdf":
        kwargs["b0_dir"] = args.b0_dir
    result = remove_background(args.method, field, mask, **kwargs)
    if not result.converged:
        print(f"warning: residual {result.residual_norm:.3g} above tolerance "
              f"after {result.iterations_used} iterations", file=sys.stderr)
    _write_out(result.local_field, args.out, args.dump_slice)
    if args.out_mask:
        write_mask(result.mask_out, args.out_mask)
        print(f"wrote {args.out_mask}")


def _cmd_invert(args):
    fields = [read_volume(f, unit="ppm") for f in args.field]
    dirs = args.b0_dir or [(0.0, 0.0, 1.0)] * len(fields)
    if args.method == "cosmos":
        chi = cosmos(fields, dirs, fields[0].voxel_size, epsilon=args.epsilon)
    else:
        if len(fields) != 1:
            raise ValueError(f"{args.method} takes exactly one --field")
        kernel = dipole_kernel(fields[0].dims, fields[0].voxel_size, dirs[0])
        if args.method == "tkd":
            chi = tkd(fields[0], kernel, threshold=args.threshold)
        else:
            mask = read_mask(args.mask) if args.mask else \
                Mask(np.ones(fields[0].dims, bool), fields[0].voxel_size)
            chi = nonlinear_tv_invert(fields[0], None, mask, kernel,
                                      lambda_tv=args.lambda_tv,
                                      iters=args.iters)
    _write_out(chi, args.out, args.dump_slice)


def _cmd_wtfi(args):
    field = read_volume(args.field, unit="ppm")
    brain = read_mask(args.brain_mask)
    eroded = read_mask(args.eroded_mask)
    supervision = read_volume(args.supervision, unit="ppm")
    weight = read_volume(args.weight) if args.weight else None
    kernel = dipole_kernel(field.dims, field.voxel_size, args.b0_dir)
    inputs = WtfiInputs(field, brain, eroded, supervision, kernel,
                        weight=weight)
    weights = LossWeights(args.l1, args.l2, args.l3, args.l4)
    result = wtfi_solve(inputs, weights, iters=args.iters)
    _write_out(result.state.chi_brain, args.out_chi, args.dump_slice)
    _write_out(result.state.local_brain, args.out_field)
    if args.trace:
        lines = ["iteration,model_supervision,field_supervision,"
                 "model_consistency,chi_consistency,tv,total"]
        for i, bd in enumerate(result.breakdowns):
            lines.append(f"{i},{bd.model_supervision:.12g},"
                         f"{bd.field_supervision:.12g},"
                         f"{bd.model_consistency:.12g},"
                         f"{bd.chi_consistency:.12g},{bd.tv:.12g},"
                         f"{bd.total:.12g}")
        with open(args.trace, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        print(f"wrote {args.trace}")


def _cmd_metrics(args):
    pred = read_volume(args.pred)
    ref = read_volume(args.ref)
    mask = read_mask(args.mask)
    if args.demean:
        m = mask.data
        pred = pred.with_data(pred.data - pred.data[m].mean() * m)
        ref = ref.with_data(ref.data - ref.data[m].mean() * m)
    report = evaluate_metrics(pred, ref, mask)
    text = ",".join(CSV_COLUMNS) + "\n" + ",".join(report.csv_row()) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)


def _cmd_pipeline(args):
    config = RunConfig.from_file(args.config)
    if args.seed is not None:
        config.seed = args.seed
    out = run_pipeline(config, output_dir=args.out_dir)
    print(f"pipeline complete: {out}")


_COMMANDS = {
    "phantom": _cmd_phantom,
    "forward": _cmd_forward,
    "echoes": _cmd_echoes,
    "unwrap": _cmd_unwrap,
    "fit-field": _cmd_fit_field,
    "bfr": _cmd_bfr,
    "invert": _cmd_invert,
    "wtfi": _cmd_wtfi,
    "metrics": _cmd_metrics,
    "pipeline": _cmd_pipeline,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _COMMANDS[args.command](args)
        return EXIT_OK
    except SystemExit_ as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except (ConfigError, NiftiFormatError, ValueError, FileNotFoundError,
            IsADirectoryError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DivergenceError, PipelineStageError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
