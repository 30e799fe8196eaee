"""Batch command-line front end.

Three commands: ``register`` runs the pipeline on a case manifest,
``phantom generate|study`` drives the synthetic-phantom tooling, and
``evaluate`` scores existing results against reference labels. Every
run writes a reproducibility record (resolved configuration, seed,
version) next to its outputs. The default worker count comes from the
RAPSODI_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .engine import RegistrationProfile, profile_by_name
from .evaluation import MetricReport, dice, write_metric_rows
from .image import LabelMask2D, center_of_mass
from .io import read_nifti
from .manifest import ManifestError, parse_manifest
from .phantom import (DEFAULT_OFFSETS, DEFAULT_ROTATIONS, DEFAULT_SHRINKS,
                      DegradationSpec, PhantomGeometry, build_phantom_case,
                      load_reference, persist_case, run_study)
from .pipeline import run_case


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("RAPSODI_THREADS", "1")))
    except ValueError:
        return 1


def _resolve_profile(name: str, overrides: dict) -> RegistrationProfile:
    profile = profile_by_name(name)
    known = {k: v for k, v in overrides.items() if hasattr(profile, k)}
    if known:
        profile = replace(profile, **{k: tuple(v) if isinstance(getattr(profile, k), tuple) else v
                                      for k, v in known.items()})
    return profile


def _write_repro_record(out_dir: Path, command: str, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "version": __version__, "config": config}
    with open(out_dir / "run_config.json", "w") as fh:
        json.dump(record, fh, indent=1, default=str)


def cmd_register(args) -> int:
    try:
        manifest = parse_manifest(args.manifest)
    except (ManifestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    profile = _resolve_profile(args.profile, manifest.profile_overrides)
    out = Path(args.out)
    _write_repro_record(out, "register", {
        "manifest": str(args.manifest), "profile": profile.name,
        "threads": args.threads, "seed": args.seed,
        "overrides": manifest.profile_overrides})
    reference = load_reference(args.reference) if args.reference else None
    try:
        result, report = run_case(manifest, profile, threads=args.threads,
                                  out_dir=out, reference=reference, seed=args.seed)
    except Exception as exc:  # noqa: BLE001 - report with context, not a traceback
        print(f"error: case {manifest.case_id}: {exc}", file=sys.stderr)
        return 1
    print(f"{manifest.case_id}: dice={report.dice:.4f} hausdorff={report.hausdorff_mm:.2f} mm "
          f"({report.n_slices} slices, {sum(result.timings.values()):.1f} s)")
    for warning in result.warnings:
        print(f"  warning: {warning}", file=sys.stderr)
    if result.failed_slices:
        print(f"  failed slices: {result.failed_slices}", file=sys.stderr)
        return 1
    return 0


def _load_spec_doc(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _spec_from_doc(doc: dict, seed: int | None) -> DegradationSpec:
    fields = {k: doc[k] for k in ("rotation_deg", "shrink", "translation_bound",
                                  "noise_sigma", "slice_offset_mm", "seed") if k in doc}
    if seed is not None:
        fields["seed"] = seed
    return DegradationSpec(**fields)


def _geometry_from_doc(doc: dict) -> PhantomGeometry:
    geo = doc.get("geometry", {})
    known = {k: (tuple(v) if isinstance(v, list) else v) for k, v in geo.items()}
    return PhantomGeometry(**known)


def cmd_phantom(args) -> int:
    doc = _load_spec_doc(args.spec)
    geom = _geometry_from_doc(doc)
    spec = _spec_from_doc(doc, args.seed)
    out = Path(args.out)
    if args.action == "generate":
        _write_repro_record(out, "phantom generate", {"spec": vars(args), "degradation": vars(spec) if hasattr(spec, "__dict__") else str(spec)})
        case = build_phantom_case(geom, spec)
        manifest_path, reference_path = persist_case(case, out)
        print(f"wrote {manifest_path} (+ reference {reference_path.name})")
        for w in case.slides.warnings:
            print(f"  warning: {w}", file=sys.stderr)
        return 0

    study = doc.get("study", {})
    rotations = study.get("rotations", list(DEFAULT_ROTATIONS))
    shrinks = study.get("shrinks", list(DEFAULT_SHRINKS))
    offsets = study.get("offsets", list(DEFAULT_OFFSETS))
    reps = args.reps if args.reps is not None else study.get("reps", 10)
    profile = _resolve_profile(args.profile, doc.get("profile", {}))
    _write_repro_record(out, "phantom study", {
        "rotations": rotations, "shrinks": shrinks, "offsets": offsets,
        "reps": reps, "seed": spec.seed, "profile": profile.name,
        "noise_sigma": spec.noise_sigma, "threads": args.threads})
    try:
        run_study(geom, rotations, shrinks, offsets, reps, profile, out,
                  noise_sigma=spec.noise_sigma, base_seed=spec.seed,
                  threads=args.threads, plots=args.plots)
    except Exception as exc:  # noqa: BLE001
        print(f"error: phantom study failed: {exc}", file=sys.stderr)
        return 1
    print(f"study tables written to {out}")
    return 0


def cmd_evaluate(args) -> int:
    results_dir = Path(args.results)
    mapped_path = results_dir / "mapped_prostate.nii.gz"
    if not mapped_path.exists():
        print(f"error: no mapped volumes in {results_dir} (missing {mapped_path.name})",
              file=sys.stderr)
        return 2
    try:
        reference = load_reference(args.reference)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: reference: {exc}", file=sys.stderr)
        return 2
    report = MetricReport(case_id=reference.get("case_id", results_dir.name))

    mapped = read_nifti(mapped_path)
    ref_prostate = reference.get("prostate_volume")
    if ref_prostate is None:
        print("error: reference lacks a prostate mask", file=sys.stderr)
        return 2
    grid = mapped.slice_grid
    dices, hausdorffs = [], []
    from .evaluation import hausdorff_boundary
    for k in range(mapped.n_slices):
        m = LabelMask2D(grid, mapped.values[k])
        r = LabelMask2D(grid, ref_prostate.values[k])
        if not (m.values > 0).any() and not (r.values > 0).any():
            continue
        dices.append(dice(r, m))
        if (m.values > 0).any() and (r.values > 0).any():
            hausdorffs.append(hausdorff_boundary(r, m))
    report.per_slice_dice = dices
    report.n_slices = len(dices)
    report.dice = float(np.mean(dices)) if dices else float("nan")
    report.hausdorff_mm = float(np.mean(hausdorffs)) if hausdorffs else float("nan")

    cancer_path = results_dir / "mapped_cancer.nii.gz"
    ref_cancer = reference.get("cancer_volume")
    if cancer_path.exists() and ref_cancer is not None:
        mapped_cancer = read_nifti(cancer_path)
        cd, coms = [], []
        for k in range(mapped_cancer.n_slices):
            m = LabelMask2D(grid, mapped_cancer.values[k])
            r = LabelMask2D(grid, ref_cancer.values[k])
            if not (m.values > 0).any() and not (r.values > 0).any():
                continue
            cd.append(dice(r, m))
            if (m.values > 0).any() and (r.values > 0).any():
                coms.append(float(np.linalg.norm(np.array(center_of_mass(m)) -
                                                 np.array(center_of_mass(r)))))
        if cd:
            print(f"cancer: dice={np.mean(cd):.4f}"
                  + (f" com_dev={np.mean(coms):.2f} mm" if coms else ""))

    out_csv = results_dir / "evaluation.csv"
    write_metric_rows(out_csv, [report])
    print(f"{report.case_id}: dice={report.dice:.4f} hausdorff={report.hausdorff_mm:.2f} mm "
          f"-> {out_csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radpath",
        description="Histopathology-to-MRI slice registration and phantom validation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    reg = sub.add_parser("register", help="register one case from a manifest")
    reg.add_argument("--manifest", required=True)
    reg.add_argument("--profile", default="standard",
                     choices=["standard", "thorough", "fast", "relaxed-affine"])
    reg.add_argument("--threads", type=int, default=_default_threads())
    reg.add_argument("--out", default="out")
    reg.add_argument("--seed", type=int, default=0)
    reg.add_argument("--reference", default=None,
                     help="optional reference JSON for urethra/landmark scoring")
    reg.set_defaults(func=cmd_register)

    ph = sub.add_parser("phantom", help="generate phantom cases or run the study")
    ph.add_argument("action", choices=["generate", "study"])
    ph.add_argument("--spec", default=None, help="JSON with degradation/geometry/study settings")
    ph.add_argument("--seed", type=int, default=None)
    ph.add_argument("--reps", type=int, default=None)
    ph.add_argument("--out", default="phantom_out")
    ph.add_argument("--profile", default="standard",
                    choices=["standard", "thorough", "fast", "relaxed-affine"])
    ph.add_argument("--threads", type=int, default=_default_threads())
    ph.add_argument("--plots", action="store_true", help="also render SVG curves")
    ph.set_defaults(func=cmd_phantom)

    ev = sub.add_parser("evaluate", help="score existing results against a reference")
    ev.add_argument("--results", required=True)
    ev.add_argument("--reference", required=True)
    ev.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
