"""Config-driven processing chains: phantom -> echoes -> unwrap -> fit ->
background removal -> inversion -> metrics.

A run is described by a single strict JSON document (unknown keys are
rejected) listing stages. Each stage consumes named artifacts produced by
earlier stages, writes its outputs as NIfTI/CSV files into the output
directory, and drops a provenance sidecar (stage, parameters, input file
hashes, software version) next to every file. Reruns with the same config
and seed are byte-identical except for the sidecar timestamps, which are
excluded from hashing.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .bfr import remove_background
from .dipole import dipole_kernel, forward_field
from .inversion import nonlinear_tv_invert, tkd
from .metrics import CSV_COLUMNS, evaluate_metrics
from .nifti import read_mask, read_volume, write_mask, write_volume
from .phantom import PhantomSpec, Sphere, build_phantom, synthesize_echoes
from .unwrap import fit_field, laplacian_unwrap
from .volume import AcquisitionMeta, Mask, ScalarVolume
from .wtfi import LossWeights, WtfiInputs, wtfi_solve

log = logging.getLogger("qsmkit.pipeline")


class ConfigError(ValueError):
    """The run configuration is malformed."""


class PipelineStageError(RuntimeError):
    """A stage failed; the message names it. Partial outputs are retained."""


_DEFAULT_ECHO_TIMES_MS = (10.4, 17.4, 24.4, 31.4)

_BFR_ALIASES = ("sharp", "resharp", "pdf", "lbv")
_INVERT_ALIASES = ("tkd", "ntv")
STAGE_NAMES = (("phantom", "forward", "echoes", "unwrap", "fit-field",
                "bfr", "invert", "wtfi", "metrics")
               + _BFR_ALIASES + _INVERT_ALIASES)

# stage -> (alternative input requirement groups, produced artifact names)
_STAGE_IO = {
    "phantom": ((), ("chi", "chi_background", "m2", "field", "field_local")),
    "forward": ((("chi",),), ("field",)),
    "echoes": ((("field",),), ("echoes",)),
    "unwrap": ((("echoes",),), ("unwrapped",)),
    "fit-field": ((("unwrapped", "echoes"),), ("field_fit",)),
    "bfr": ((("field_fit", "m2"), ("field", "m2")), ("local_field", "m1")),
    "invert": ((("local_field",), ("field_fit",), ("field",)), None),
    "wtfi": ((("field_fit", "m2", "m1", "local_field"),
              ("field", "m2", "m1", "local_field")),
             ("chi_wtfi", "local_wtfi")),
    "metrics": (None, ("metrics",)),
}

_STAGE_PARAMS = {
    "phantom": {"dims": None, "voxel_size_mm": (1.0, 1.0, 1.0),
                "brain_radius_mm": None, "spheres": None,
                "cylinders": (), "background_spheres": None},
    "forward": {"include_background": True, "pad": False},
    "echoes": {"noise_sd": 0.0, "magnitude": 1.0},
    "unwrap": {},
    "fit-field": {"fit_offset": False, "weighting": "magnitude2"},
    "bfr": {"method": None, "radius_mm": 4.0, "lambda_tik": 1e-3,
            "tsvd_threshold": 0.05, "cg_tol": 1e-6, "cg_maxiter": None},
    "invert": {"method": None, "threshold": 0.2, "lambda_tv": 1e-3,
               "iters": 100},
    "wtfi": {"iters": 200, "l1": 1.0, "l2": 1.0, "l3": 1.0, "l4": 1e-3},
    "metrics": {"pred": None, "ref": "chi", "mask": None, "demean": True},
}


def _check_keys(mapping, allowed, where):
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}; "
                          f"allowed: {sorted(allowed)}")


def _canonical_stage(name):
    if name in _BFR_ALIASES:
        return "bfr", name
    if name in _INVERT_ALIASES:
        return "invert", name
    return name, None


class RunConfig:
    """Validated pipeline description."""

    def __init__(self, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        _check_keys(doc, ("output_dir", "seed", "acquisition", "inputs",
                          "stages"), "config root")
        self.output_dir = doc.get("output_dir")
        self.seed = int(doc.get("seed", 0))
        self.inputs = dict(doc.get("inputs", {}))
        for name, path in self.inputs.items():
            if not isinstance(path, str):
                raise ConfigError(f"inputs[{name!r}] must be a file path")

        acq = dict(doc.get("acquisition", {}))
        _check_keys(acq, ("b0_tesla", "b0_dir", "echo_times_ms"),
                    "acquisition")
        tes_ms = acq.get("echo_times_ms", _DEFAULT_ECHO_TIMES_MS)
        self.acquisition = {
            "b0_tesla": float(acq.get("b0_tesla", 3.0)),
            "b0_dir": tuple(float(v) for v in acq.get("b0_dir", (0, 0, 1))),
            "echo_times_ms": tuple(float(t) for t in tes_ms),
        }

        raw_stages = doc.get("stages")
        if not isinstance(raw_stages, list) or not raw_stages:
            raise ConfigError("config must contain a non-empty 'stages' list")
        self.stages = []
        for i, entry in enumerate(raw_stages):
            if isinstance(entry, str):
                entry = {"name": entry}
            if not isinstance(entry, dict):
                raise ConfigError(f"stage {i} must be a name or an object")
            _check_keys(entry, ("name", "params"), f"stage {i}")
            name = entry.get("name")
            if name not in STAGE_NAMES:
                raise ConfigError(f"unknown stage name {name!r}; "
                                  f"expected one of {sorted(STAGE_NAMES)}")
            kind, alias = _canonical_stage(name)
            params = dict(entry.get("params", {}))
            allowed = _STAGE_PARAMS[kind]
            _check_keys(params, allowed, f"stage {i} ({name}) params")
            merged = dict(allowed)
            merged.update(params)
            if alias is not None:
                merged["method"] = alias
            if kind in ("bfr", "invert") and merged.get("method") is None:
                raise ConfigError(f"stage {i} ({name}) needs a 'method'")
            self.stages.append({"kind": kind, "label": name,
                                "params": merged})
        self._validate_chain()
        self.sha256 = hashlib.sha256(
            json.dumps(doc, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls(doc)

    def _validate_chain(self):
        available = set(self.inputs)
        for i, stage in enumerate(self.stages):
            kind = stage["kind"]
            requires, produces = _STAGE_IO[kind]
            if kind == "metrics":
                pred = stage["params"]["pred"] or self._latest_chi(i)
                mask = stage["params"]["mask"] or \
                    ("m1" if "m1" in available else "m2")
                needed = (pred, stage["params"]["ref"], mask)
                missing = [n for n in needed if n not in available]
                if missing:
                    raise ConfigError(
                        f"stage {i} (metrics) needs artifact(s) {missing} "
                        "not produced upstream")
                stage["resolved"] = {"pred": pred, "mask": mask}
            elif requires:
                group = next((g for g in requires
                              if all(a in available for a in g)), None)
                if group is None:
                    raise ConfigError(
                        f"stage {i} ({stage['label']}) needs one of "
                        f"{[list(g) for g in requires]} produced upstream")
                stage["resolved"] = {"inputs": group}
            if produces is None:  # invert: artifact named after the method
                produces = (f"chi_{stage['params']['method']}",)
            available.update(produces)

    def _latest_chi(self, before):
        for stage in reversed(self.stages[:before]):
            if stage["kind"] == "invert":
                return f"chi_{stage['params']['method']}"
            if stage["kind"] == "wtfi":
                return "chi_wtfi"
        return "chi"


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class _Workspace:
    """Artifact registry plus the files backing each artifact."""

    def __init__(self, out_dir, config):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.objects = {}
        self.files = {}  # artifact -> list of file names

    def add(self, name, obj, stage_label, params, input_names):
        self.objects[name] = obj
        written = []
        if isinstance(obj, ScalarVolume):
            fname = f"{name}.nii"
            write_volume(obj, self.dir / fname)
            written.append(fname)
        elif isinstance(obj, Mask):
            fname = f"{name}.nii"
            write_mask(obj, self.dir / fname)
            written.append(fname)
        elif isinstance(obj, (list, tuple)):
            for j, vol in enumerate(obj, start=1):
                fname = f"{name}_e{j}.nii"
                write_volume(vol, self.dir / fname)
                written.append(fname)
        self.files[name] = written
        for fname in written:
            self._sidecar(fname, stage_label, params, input_names)

    def add_text(self, name, fname, text, stage_label, params, input_names):
        (self.dir / fname).write_text(text)
        self.objects[name] = text
        self.files[name] = [fname]
        self._sidecar(fname, stage_label, params, input_names)

    def _sidecar(self, fname, stage_label, params, input_names):
        hashes = {}
        for artifact in input_names:
            for f in self.files.get(artifact, []):
                hashes[f] = _sha256_file(self.dir / f)
        doc = {
            "file": fname,
            "stage": stage_label,
            "parameters": _jsonable(params),
            "inputs": hashes,
            "software_version": __version__,
            "config_sha256": self.config.sha256,
            "created": datetime.now(timezone.utc).isoformat(),
        }
        (self.dir / f"{fname}.json").write_text(
            json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _jsonable(obj):
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _meta(config, voxel_size):
    acq = config.acquisition
    return AcquisitionMeta(acq["b0_tesla"], acq["b0_dir"],
                           tuple(t * 1e-3 for t in acq["echo_times_ms"]),
                           voxel_size)


def _default_phantom_params(p):
    dims = tuple(int(n) for n in (p["dims"] or (48, 48, 48)))
    vs = tuple(float(v) for v in p["voxel_size_mm"])
    extent = min(n * d for n, d in zip(dims, vs))
    brain = float(p["brain_radius_mm"] or 0.3 * extent)
    if p["spheres"] is None:
        spheres = [(0.0, 0.0, 0.0, 0.3 * brain, 1.0)]
    else:
        spheres = p["spheres"]
    if p["background_spheres"] is None:
        background = [(1.3 * brain, 0.0, 0.0, 0.25 * brain, 9.0)]
    else:
        background = p["background_spheres"]
    return dims, vs, brain, spheres, p["cylinders"], background


def _run_stage(stage, ws, config):
    kind = stage["kind"]
    label = stage["label"]
    p = stage["params"]
    inputs = stage.get("resolved", {}).get("inputs", ())
    acq = config.acquisition

    def vol(name):
        return ws.objects[name]

    if kind == "phantom":
        dims, vs, brain_r, spheres, cylinders, background = \
            _default_phantom_params(p)
        spec = PhantomSpec(
            dims, vs, brain_r,
            spheres=tuple(Sphere(tuple(s[:3]), s[3], s[4]) for s in spheres),
            background_spheres=tuple(Sphere(tuple(s[:3]), s[3], s[4])
                                     for s in background),
            rng_seed=config.seed)
        chi, chi_bg, m2 = build_phantom(spec)
        kernel = dipole_kernel(dims, vs, acq["b0_dir"])
        field_local = forward_field(chi, kernel)
        total = forward_field(chi.with_data(chi.data + chi_bg.data), kernel)
        for name, obj in (("chi", chi), ("chi_background", chi_bg),
                          ("m2", m2), ("field", total),
                          ("field_local", field_local)):
            ws.add(name, obj, label, p, ())
        return

    if kind == "forward":
        chi = vol("chi")
        data = chi.data
        if p["include_background"] and "chi_background" in ws.objects:
            data = data + ws.objects["chi_background"].data
        kernel = dipole_kernel(chi.dims, chi.voxel_size, acq["b0_dir"])
        field = forward_field(chi.with_data(data), kernel, pad=bool(p["pad"]))
        ws.add("field", field, label, p, ("chi", "chi_background"))
        return

    if kind == "echoes":
        field = vol("field")
        meta = _meta(config, field.voxel_size)
        magnitude = field.with_data(
            np.full(field.dims, float(p["magnitude"])), unit="arbitrary")
        series = synthesize_echoes(field, meta, magnitude,
                                   noise_sd=float(p["noise_sd"]),
                                   rng_seed=config.seed)
        ws.add("mag", list(series.magnitudes), label, p, inputs)
        ws.add("phase", list(series.wrapped_phases), label, p, inputs)
        ws.objects["echoes"] = series
        ws.files["echoes"] = ws.files["mag"] + ws.files["phase"]
        return

    if kind == "unwrap":
        series = vol("echoes")
        unwrapped = [laplacian_unwrap(w) for w in series.wrapped_phases]
        ws.add("unwrapped", unwrapped, label, p, ("phase",))
        return

    if kind == "fit-field":
        series = vol("echoes")
        unwrapped = vol("unwrapped")
        if p["weighting"] == "magnitude2":
            weights = [m.with_data(m.data ** 2) for m in series.magnitudes]
        elif p["weighting"] == "uniform":
            weights = None
        else:
            raise ConfigError(f"unknown weighting {p['weighting']!r}")
        fit = fit_field(unwrapped, series.meta, weights,
                        fit_offset=bool(p["fit_offset"]))
        ws.add("field_fit", fit.field, label, p, ("unwrapped", "mag"))
        ws.add("fit_valid", fit.valid, label, p, ("unwrapped", "mag"))
        return

    if kind == "bfr":
        field = vol(inputs[0])
        m2 = vol("m2")
        method = p["method"]
        kwargs = {}
        if method in ("sharp", "resharp"):
            kwargs["radius_mm"] = float(p["radius_mm"])
        if method == "sharp":
            kwargs["tsvd_threshold"] = float(p["tsvd_threshold"])
        if method == "resharp":
            kwargs["lambda_tik"] = float(p["lambda_tik"])
        if method in ("resharp", "pdf", "lbv"):
            kwargs["cg_tol"] = float(p["cg_tol"])
            if p["cg_maxiter"] is not None:
                kwargs["cg_maxiter"] = int(p["cg_maxiter"])
        if method == "pdf":
            kwargs["b0_dir"] = acq["b0_dir"]
        result = remove_background(method, field, m2, **kwargs)
        if not result.converged:
            log.warning("%s did not reach tolerance (residual %.3g after "
                        "%d iterations)", method, result.residual_norm,
                        result.iterations_used)
        ws.add("local_field", result.local_field, label, p, inputs)
        ws.add("m1", result.mask_out, label, p, inputs)
        return

    if kind == "invert":
        field = vol(inputs[0])
        method = p["method"]
        kernel = dipole_kernel(field.dims, field.voxel_size, acq["b0_dir"])
        if method == "tkd":
            chi = tkd(field, kernel, threshold=float(p["threshold"]))
        else:
            mask = ws.objects.get("m1") or ws.objects.get("m2") or \
                Mask(np.ones(field.dims, dtype=bool), field.voxel_size)
            chi = nonlinear_tv_invert(field, None, mask, kernel,
                                      lambda_tv=float(p["lambda_tv"]),
                                      iters=int(p["iters"]))
        ws.add(f"chi_{method}", chi, label, p, inputs)
        return

    if kind == "wtfi":
        field = vol(inputs[0])
        kernel = dipole_kernel(field.dims, field.voxel_size, acq["b0_dir"])
        wtfi_inputs = WtfiInputs(field, vol("m2"), vol("m1"),
                                 vol("local_field"), kernel)
        weights = LossWeights(float(p["l1"]), float(p["l2"]), float(p["l3"]),
                              float(p["l4"]))
        result = wtfi_solve(wtfi_inputs, weights, iters=int(p["iters"]))
        ws.add("chi_wtfi", result.state.chi_brain, label, p, inputs)
        ws.add("local_wtfi", result.state.local_brain, label, p, inputs)
        lines = ["iteration,model_supervision,field_supervision,"
                 "model_consistency,chi_consistency,tv,total"]
        for i, bd in enumerate(result.breakdowns):
            lines.append(f"{i},{bd.model_supervision:.12g},"
                         f"{bd.field_supervision:.12g},"
                         f"{bd.model_consistency:.12g},"
                         f"{bd.chi_consistency:.12g},{bd.tv:.12g},"
                         f"{bd.total:.12g}")
        ws.add_text("wtfi_trace", "wtfi_trace.csv", "\n".join(lines) + "\n",
                    label, p, inputs)
        return

    if kind == "metrics":
        resolved = stage["resolved"]
        pred = vol(resolved["pred"])
        ref = vol(p["ref"])
        mask = vol(resolved["mask"])
        if p["demean"]:
            m = mask.data
            pred = pred.with_data(pred.data - pred.data[m].mean() * m)
            ref = ref.with_data(ref.data - ref.data[m].mean() * m)
        report = evaluate_metrics(pred, ref, mask)
        text = ",".join(CSV_COLUMNS) + "\n" + ",".join(report.csv_row()) + "\n"
        ws.add_text("metrics", "metrics.csv", text, label, p,
                    (resolved["pred"], p["ref"], resolved["mask"]))
        return

    raise ConfigError(f"unhandled stage kind {kind!r}")


def run_pipeline(config, output_dir=None):
    """Execute a validated RunConfig; returns the output directory path.

    Stage failures raise PipelineStageError naming the stage; files written
    by earlier stages are retained for inspection.
    """
    if not isinstance(config, RunConfig):
        config = RunConfig(copy.deepcopy(config))
    out = output_dir or config.output_dir or f"qsm_run_{config.sha256[:8]}"
    ws = _Workspace(out, config)
    for name, path in config.inputs.items():
        # masks by convention; everything else is a scalar volume
        if name in ("m1", "m2", "fit_valid"):
            obj = read_mask(path)
        else:
            obj = read_volume(path, unit="ppm")
        ws.add(name, obj, "inputs", {"path": path}, ())
    for i, stage in enumerate(config.stages):
        log.info("stage %d: %s", i, stage["label"])
        try:
            _run_stage(stage, ws, config)
        except ConfigError:
            raise
        except Exception as exc:
            raise PipelineStageError(
                f"stage {i} ({stage['label']}) failed: {exc}") from exc
    return ws.dir
