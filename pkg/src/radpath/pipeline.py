"""Whole-case orchestration: preprocess, reconstruct the histology stack,
register every slice pair to its MRI slice, and map labels onto the MRI.

Step 0 masks and gross-corrects each slide and resamples everything to a
common working spacing. Step 1 restores 3D consistency by chaining
pairwise rigid registrations outward from the middle slice. Step 2 runs
the rigid/affine/deformable engine per corresponding slice pair. Step 3
composes each slice's transform chain and resamples the histology image,
labels and landmarks onto the native MRI grid.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .engine import (STANDARD, RegistrationProfile, SlicePairResult,
                     register_rigid_masks, register_slice_pair)
from .evaluation import MetricReport, dice, hausdorff_boundary, landmark_deviation, urethra_deviation, write_metric_rows
from .image import (EmptyRegionError, Grid2D, LabelMask2D, PointSet2D, RgbImage2D,
                    ScalarImage2D, ScalarVolume3D, center_of_mass, resample_label,
                    resample_rgb, resample_scalar, rgb_to_gray)
from .io import read_landmarks, read_mask_image, read_nifti, read_rgb_image, write_nifti
from .manifest import CaseManifest
from .transforms import (CompositeTransform2D, FlipLR, RigidTransform2D,
                         inverse_point, transform_from_dict)


@dataclass
class PreparedSlice:
    """One histology slice after masking, gross correction and resampling."""

    mri_slice_index: int
    rgb: RgbImage2D
    gray: ScalarImage2D
    mask: LabelMask2D
    cancer: LabelMask2D | None = None
    urethra: LabelMask2D | None = None
    landmarks: PointSet2D | None = None
    gross: dict | None = None


@dataclass
class PreparedMriSlice:
    mri_slice_index: int
    gray: ScalarImage2D
    mask: LabelMask2D
    native_mask: LabelMask2D


@dataclass
class PreparedCase:
    case_id: str
    slices: list
    mri_slices: list
    mri_shape: tuple
    mri_spacing: tuple
    mri_origin: tuple
    working_spacing: float
    warnings: list = field(default_factory=list)

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    def native_slice_grid(self) -> Grid2D:
        return Grid2D(self.mri_shape[2], self.mri_shape[1],
                      (self.mri_spacing[0], self.mri_spacing[1]),
                      (self.mri_origin[0], self.mri_origin[1]))


@dataclass
class CaseResult:
    case_id: str
    recon_transforms: list
    pair_results: list
    chains: list
    mapped_prostate: ScalarVolume3D | None = None
    mapped_cancer: ScalarVolume3D | None = None
    mapped_urethra: ScalarVolume3D | None = None
    registered_rgb: ScalarVolume3D | None = None
    mapped_landmarks: list = field(default_factory=list)
    stage_dice_native: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def failed_slices(self) -> list:
        return [i for i, r in enumerate(self.pair_results) if r is None]


def _gross_transform(mask: LabelMask2D, rotation_deg: float, flip_lr: bool):
    """Content-motion map for the expert-declared gross correction.

    The flip mirrors about the mask centroid's vertical line, then the
    rotation turns the content about the centroid, so the tissue stays
    in place while its orientation is fixed.
    """
    if rotation_deg == 0.0 and not flip_lr:
        return None
    com = center_of_mass(mask)
    stages = []
    if flip_lr:
        stages.append(FlipLR(com[0]))
    if rotation_deg != 0.0:
        stages.append(RigidTransform2D(np.deg2rad(rotation_deg), (0.0, 0.0), com))
    return CompositeTransform2D(tuple(stages))


def _inverse_chain(transform):
    if transform is None:
        return None
    if isinstance(transform, CompositeTransform2D):
        return CompositeTransform2D(tuple(s.inverse() for s in reversed(transform.stages)))
    return transform.inverse()


def _working_grid_for_mask(mask: LabelMask2D, working_spacing: float) -> Grid2D:
    """Square working grid centered on the mask, sized for any rotation."""
    rows, cols = np.nonzero(mask.values > 0)
    xs, ys = mask.grid.index_to_physical(cols, rows)
    cx, cy = xs.mean(), ys.mean()
    w = xs.max() - xs.min()
    h = ys.max() - ys.min()
    half = 0.5 * float(np.hypot(w, h)) * 1.15 + 5.0
    n = max(int(np.ceil(2 * half / working_spacing)) + 1, 8)
    origin = (cx - (n - 1) / 2 * working_spacing, cy - (n - 1) / 2 * working_spacing)
    return Grid2D(n, n, (working_spacing, working_spacing), origin)


def _prepare_histology_slice(record, working_spacing: float) -> PreparedSlice:
    rgb = read_rgb_image(record.image, record.pixel_spacing_mm)
    mask = read_mask_image(record.prostate_mask, record.pixel_spacing_mm)
    if rgb.grid != mask.grid:
        raise EmptyRegionError(f"slice {record.mri_slice_index}: image and prostate mask sizes differ")
    if not (mask.values > 0).any():
        raise EmptyRegionError(f"slice {record.mri_slice_index}: prostate mask is empty")
    gross = _gross_transform(mask, record.rotation_deg, record.flip_lr)
    sampling = _inverse_chain(gross)

    grid = _working_grid_for_mask(mask, working_spacing)
    mask_w = resample_label(mask, grid, sampling)
    rgb_w = resample_rgb(rgb, grid, sampling)
    keep = mask_w.values > 0
    rgb_vals = rgb_w.values * keep[..., None]
    gray = rgb_to_gray(RgbImage2D(grid, rgb_vals))

    def optional_mask(path):
        if path is None:
            return None
        m = read_mask_image(path, record.pixel_spacing_mm)
        return resample_label(m, grid, sampling)

    landmarks = None
    if record.landmarks is not None:
        lm = read_landmarks(record.landmarks)
        pts = gross.apply(lm.points) if (gross and len(lm)) else lm.points
        landmarks = PointSet2D(pts, lm.labels)

    return PreparedSlice(
        mri_slice_index=record.mri_slice_index,
        rgb=RgbImage2D(grid, rgb_vals),
        gray=ScalarImage2D(grid, gray.values * keep),
        mask=mask_w,
        cancer=optional_mask(record.cancer_mask),
        urethra=optional_mask(record.urethra_mask),
        landmarks=landmarks,
        gross=(gross.to_dict() if gross else None),
    )


def _prepare_mri_slice(volume: ScalarVolume3D, mask_volume: ScalarVolume3D,
                       index: int, working_spacing: float) -> PreparedMriSlice:
    if not 0 <= index < volume.n_slices:
        raise IndexError(f"mri_slice_index {index} out of range [0, {volume.n_slices})")
    image = volume.get_slice(index)
    native_mask = mask_volume.get_mask_slice(index)
    if not (native_mask.values > 0).any():
        raise EmptyRegionError(f"MRI slice {index}: prostate mask is empty")

    rows, cols = np.nonzero(native_mask.values > 0)
    grid = native_mask.grid
    xs, ys = grid.index_to_physical(cols, rows)
    margin_x = max(0.25 * (xs.max() - xs.min()), 8.0)
    margin_y = max(0.25 * (ys.max() - ys.min()), 8.0)
    x0, x1 = xs.min() - margin_x, xs.max() + margin_x
    y0, y1 = ys.min() - margin_y, ys.max() + margin_y
    nw = max(int(np.ceil((x1 - x0) / working_spacing)) + 1, 8)
    nh = max(int(np.ceil((y1 - y0) / working_spacing)) + 1, 8)
    wgrid = Grid2D(nw, nh, (working_spacing, working_spacing), (x0, y0))

    mask_w = resample_label(native_mask, wgrid)
    gray_w = resample_scalar(image, wgrid)
    gray_vals = gray_w.values * (mask_w.values > 0)
    return PreparedMriSlice(index, ScalarImage2D(wgrid, gray_vals), mask_w, native_mask)


def preprocess(manifest: CaseManifest, profile: RegistrationProfile = STANDARD) -> PreparedCase:
    """Step 0: load, mask, gross-correct and resample a whole case.

    Missing files raise FileNotFoundError, empty masks EmptyRegionError
    and bad slice indices IndexError, each naming the offending slice.
    """
    working = float(manifest.profile_overrides.get("working_spacing_mm",
                                                   profile.working_spacing_mm))
    for p in (manifest.mri_t2, manifest.mri_prostate_mask):
        if not Path(p).exists():
            raise FileNotFoundError(f"MRI input not found: {p}")
    volume = read_nifti(manifest.mri_t2)
    mask_volume = read_nifti(manifest.mri_prostate_mask)
    if volume.values.shape != mask_volume.values.shape:
        raise ValueError("MRI volume and prostate mask shapes differ")

    slices = []
    mri_slices = []
    for record in manifest.slices:
        for p in (record.image, record.prostate_mask, record.cancer_mask,
                  record.urethra_mask, record.landmarks):
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"histology input not found: {p}")
        slices.append(_prepare_histology_slice(record, working))
        mri_slices.append(_prepare_mri_slice(volume, mask_volume,
                                             record.mri_slice_index, working))
    return PreparedCase(manifest.case_id, slices, mri_slices,
                        volume.values.shape, volume.spacing, volume.origin, working)


def reconstruct_stack(prepared: PreparedCase,
                      profile: RegistrationProfile = STANDARD) -> list:
    """Step 1: chained pairwise rigids expressing stack consistency.

    The middle slice anchors the stack with the identity; every other
    slice registers to its already-transformed neighbor, walking
    outward. Each returned transform maps reconstructed-stack space
    into that slice's own frame (the resampling direction). A failed
    link degrades to the neighbor's transform with a warning.
    """
    d = prepared.n_slices
    transforms = [None] * d
    middle = d // 2
    transforms[middle] = RigidTransform2D()
    order = [(k, k + 1) for k in range(middle - 1, -1, -1)]
    order += [(k, k - 1) for k in range(middle + 1, d)]
    for k, neighbor in order:
        neighbor_mask = prepared.slices[neighbor].mask
        fixed = resample_label(neighbor_mask, neighbor_mask.grid, transforms[neighbor])
        try:
            transforms[k] = register_rigid_masks(fixed, prepared.slices[k].mask,
                                                 None, profile)
        except Exception as exc:  # noqa: BLE001 - degrade to the neighbor's frame
            prepared.warnings.append(f"reconstruction link {k}->{neighbor} failed: {exc}")
            transforms[k] = transforms[neighbor]
    return transforms


def _precompose_moving(slice_: PreparedSlice, transform) -> tuple:
    if transform is None or _is_identity_rigid(transform):
        return slice_.gray, slice_.mask
    gray = resample_scalar(slice_.gray, slice_.gray.grid, transform)
    mask = resample_label(slice_.mask, slice_.mask.grid, transform)
    return gray, mask


def _is_identity_rigid(t) -> bool:
    return (isinstance(t, RigidTransform2D) and t.angle == 0.0
            and t.translation == (0.0, 0.0))


def register_case(prepared: PreparedCase, recon_transforms: list | None,
                  profile: RegistrationProfile = STANDARD, threads: int = 1) -> list:
    """Step 2: register every histology slice to its MRI slice.

    The moving slice is first resampled through its reconstruction
    rigid (skipped entirely in fast mode). Per-slice failures are
    collected as warnings and leave ``None`` in the result list.
    """
    d = prepared.n_slices
    use_recon = profile.do_reconstruction and not profile.fast_mode and recon_transforms
    results = [None] * d

    def run(k: int):
        slice_ = prepared.slices[k]
        recon = recon_transforms[k] if use_recon else None
        moving_gray, moving_mask = _precompose_moving(slice_, recon)
        mri = prepared.mri_slices[k]
        return register_slice_pair(mri.gray, mri.mask, moving_gray, moving_mask, profile)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {k: pool.submit(run, k) for k in range(d)}
            for k in range(d):
                try:
                    results[k] = futures[k].result()
                except Exception as exc:  # noqa: BLE001
                    prepared.warnings.append(f"slice {k}: registration failed: {exc}")
    else:
        for k in range(d):
            try:
                results[k] = run(k)
            except Exception as exc:  # noqa: BLE001
                prepared.warnings.append(f"slice {k}: registration failed: {exc}")
    return results


def _slice_chain(pair: SlicePairResult, recon, use_recon: bool) -> CompositeTransform2D:
    stages = []
    if pair.ffd is not None:
        stages.append(pair.ffd)
    stages.append(pair.linear_stage())
    if use_recon and recon is not None and not _is_identity_rigid(recon):
        stages.append(recon)
    return CompositeTransform2D(tuple(stages))


def map_labels(prepared: PreparedCase, recon_transforms: list | None,
               pair_results: list, profile: RegistrationProfile = STANDARD) -> CaseResult:
    """Step 3: compose each slice's chain and map everything onto the MRI.

    RGB resamples bilinearly per channel, labels nearest-neighbor, and
    landmarks map as points through the inverse chain. Output volumes
    share the native MRI geometry; slices without a histology
    correspondence stay background.
    """
    use_recon = profile.do_reconstruction and not profile.fast_mode and recon_transforms
    nz, nh, nw = prepared.mri_shape[0], prepared.mri_shape[1], prepared.mri_shape[2]
    grid = prepared.native_slice_grid()
    prostate = np.zeros((nz, nh, nw), dtype=np.int32)
    cancer = np.zeros((nz, nh, nw), dtype=np.int32)
    urethra = np.zeros((nz, nh, nw), dtype=np.int32)
    rgb = np.zeros((nz, nh, nw, 3), dtype=np.float64)
    have_cancer = False
    have_urethra = False

    result = CaseResult(prepared.case_id, list(recon_transforms or []), list(pair_results), [])
    for k, slice_ in enumerate(prepared.slices):
        pair = pair_results[k]
        idx = slice_.mri_slice_index
        if pair is None:
            result.chains.append(None)
            result.mapped_landmarks.append(None)
            result.stage_dice_native.append(None)
            continue
        recon = recon_transforms[k] if use_recon else None
        chain = _slice_chain(pair, recon, bool(use_recon))
        result.chains.append(chain)

        rgb[idx] = resample_rgb(slice_.rgb, grid, chain).values
        prostate[idx] = resample_label(slice_.mask, grid, chain).values
        if slice_.cancer is not None:
            cancer[idx] = resample_label(slice_.cancer, grid, chain).values
            have_cancer = True
        if slice_.urethra is not None:
            urethra[idx] = resample_label(slice_.urethra, grid, chain).values
            have_urethra = True
        if slice_.landmarks is not None and len(slice_.landmarks):
            mapped = inverse_point(chain, slice_.landmarks.points)
            result.mapped_landmarks.append(PointSet2D(mapped, slice_.landmarks.labels))
        else:
            result.mapped_landmarks.append(None)

        native_mask = prepared.mri_slices[k].native_mask
        # "input": centroid-aligned state (plus reconstruction), since raw
        # slide frames are arbitrary relative to the MRI frame.
        com_f = np.asarray(center_of_mass(native_mask))
        com_m = np.asarray(center_of_mass(slice_.mask))
        if use_recon and recon is not None and not _is_identity_rigid(recon):
            t = recon.inverse().apply(com_m[None, :])[0] - com_f
            input_chain = CompositeTransform2D((RigidTransform2D(0.0, tuple(t)), recon))
        else:
            input_chain = RigidTransform2D(0.0, tuple(com_m - com_f))
        stage_chains = {"input": input_chain,
                        "affine": _slice_chain(SlicePairResult(rigid=pair.rigid, affine=pair.affine),
                                               recon, bool(use_recon)),
                        "deformable": chain}
        result.stage_dice_native.append({
            name: dice(native_mask, resample_label(slice_.mask, grid, c))
            for name, c in stage_chains.items()})

    spacing, origin = prepared.mri_spacing, prepared.mri_origin
    result.mapped_prostate = ScalarVolume3D(prostate, spacing, origin)
    result.mapped_cancer = ScalarVolume3D(cancer, spacing, origin) if have_cancer else None
    result.mapped_urethra = ScalarVolume3D(urethra, spacing, origin) if have_urethra else None
    result.registered_rgb = ScalarVolume3D(rgb, spacing, origin)
    result.warnings.extend(prepared.warnings)
    for k, pair in enumerate(pair_results):
        if pair is not None:
            result.warnings.extend(f"slice {k}: {w}" for w in pair.warnings)
    return result


def evaluate_case(prepared: PreparedCase, result: CaseResult,
                  reference: dict | None = None) -> MetricReport:
    """Prostate Dice/Hausdorff against the MRI mask, plus urethra and
    landmark deviations when a reference provides the MRI-side truth."""
    report = MetricReport(case_id=prepared.case_id)
    grid = prepared.native_slice_grid()
    mapped = result.mapped_prostate
    u_hist, u_mri = [], []
    lm_hist, lm_mri = [], []
    for k, slice_ in enumerate(prepared.slices):
        if result.pair_results[k] is None:
            continue
        idx = slice_.mri_slice_index
        mapped_mask = LabelMask2D(grid, mapped.values[idx])
        native = prepared.mri_slices[k].native_mask
        report.per_slice_dice.append(dice(native, mapped_mask))
        try:
            report.per_slice_hausdorff_mm.append(hausdorff_boundary(native, mapped_mask))
        except EmptyRegionError:
            report.per_slice_hausdorff_mm.append(float("nan"))
        if reference:
            ref_urethra = reference.get("urethra_volume")
            if ref_urethra is not None and result.mapped_urethra is not None:
                u_hist.append(LabelMask2D(grid, result.mapped_urethra.values[idx]))
                u_mri.append(LabelMask2D(grid, ref_urethra.values[idx]))
            ref_lm = reference.get("landmarks", {}).get(idx)
            if ref_lm is not None and result.mapped_landmarks[k] is not None:
                lm_hist.append(result.mapped_landmarks[k])
                lm_mri.append(ref_lm)

    report.n_slices = len(report.per_slice_dice)
    if report.per_slice_dice:
        report.dice = float(np.mean(report.per_slice_dice))
        valid_hd = [h for h in report.per_slice_hausdorff_mm if np.isfinite(h)]
        report.hausdorff_mm = float(np.mean(valid_hd)) if valid_hd else float("nan")
    if u_hist:
        try:
            report.urethra_dev_mm, _ = urethra_deviation(u_hist, u_mri)
        except EmptyRegionError:
            pass
    if lm_hist:
        try:
            report.landmark_dev_mm = landmark_deviation(lm_hist, lm_mri)
            report.n_landmarks = sum(len(p) for p in lm_hist)
        except EmptyRegionError:
            pass
    return report


def run_case(manifest: CaseManifest, profile: RegistrationProfile = STANDARD,
             threads: int = 1, out_dir=None, reference: dict | None = None,
             seed: int | None = None) -> tuple:
    """Run the full four-step pipeline on one case.

    Returns (CaseResult, MetricReport); when ``out_dir`` is given, all
    artifacts (mapped volumes, per-slice transform JSON, metrics CSV and
    a machine-readable run log) are written there.
    """
    timings = {}
    t0 = time.perf_counter()
    prepared = preprocess(manifest, profile)
    timings["preprocess_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if profile.do_reconstruction and not profile.fast_mode and prepared.n_slices > 1:
        recon = reconstruct_stack(prepared, profile)
    else:
        recon = [RigidTransform2D() for _ in range(prepared.n_slices)]
    timings["reconstruct_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    pairs = register_case(prepared, recon, profile, threads)
    timings["register_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    result = map_labels(prepared, recon, pairs, profile)
    timings["map_s"] = time.perf_counter() - t0
    result.timings = timings

    report = evaluate_case(prepared, result, reference)
    if out_dir is not None:
        write_case_artifacts(prepared, result, report, out_dir, profile, seed)
    return result, report


def write_case_artifacts(prepared: PreparedCase, result: CaseResult,
                         report: MetricReport, out_dir, profile: RegistrationProfile,
                         seed: int | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if result.mapped_prostate is not None:
        write_nifti(result.mapped_prostate, out / "mapped_prostate.nii.gz")
    if result.mapped_cancer is not None:
        write_nifti(result.mapped_cancer, out / "mapped_cancer.nii.gz")
    if result.mapped_urethra is not None:
        write_nifti(result.mapped_urethra, out / "mapped_urethra.nii.gz")
    if result.registered_rgb is not None:
        write_nifti(result.registered_rgb, out / "registered_histology.nii.gz")

    tdir = out / "transforms"
    tdir.mkdir(exist_ok=True)
    for k, chain in enumerate(result.chains):
        if chain is None:
            continue
        doc = chain.to_dict()
        doc["mri_slice_index"] = prepared.slices[k].mri_slice_index
        with open(tdir / f"slice_{k:02d}.json", "w") as fh:
            json.dump(doc, fh, indent=1)

    landmarks_doc = {}
    for k, pts in enumerate(result.mapped_landmarks):
        if pts is None:
            continue
        labels = pts.labels or [str(i) for i in range(len(pts))]
        landmarks_doc[str(prepared.slices[k].mri_slice_index)] = [
            {"label": lab, "x_mm": float(p[0]), "y_mm": float(p[1])}
            for lab, p in zip(labels, pts.points)]
    with open(out / "mapped_landmarks.json", "w") as fh:
        json.dump(landmarks_doc, fh, indent=1)

    write_metric_rows(out / "metrics.csv", [report])

    log = {
        "case_id": prepared.case_id,
        "version": __version__,
        "profile": profile.name,
        "profile_settings": {k: (list(v) if isinstance(v, tuple) else v)
                             for k, v in vars(profile).items()},
        "seed": seed,
        "working_spacing_mm": prepared.working_spacing,
        "timings_s": result.timings,
        "warnings": result.warnings,
        "failed_slices": result.failed_slices,
        "stage_dice_native": result.stage_dice_native,
        "per_slice_wall_time_s": [r.wall_time if r else None for r in result.pair_results],
    }
    with open(out / "run_log.json", "w") as fh:
        json.dump(log, fh, indent=1)


def load_chain(path) -> CompositeTransform2D:
    """Reload a per-slice transform chain written by the pipeline."""
    with open(path) as fh:
        doc = json.load(fh)
    doc.pop("mri_slice_index", None)
    return transform_from_dict(doc)
