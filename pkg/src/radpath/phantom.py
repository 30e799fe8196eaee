"""Digital phantom: paired synthetic MRI and histology with known truth.

The phantom is an analytic prostate-like geometry (ellipsoidal gland
with a nodular surface bump, posterior peripheral-zone crescent, curved
urethra, one cancer blob). Regions are filled with per-region mean
intensities plus Gaussian noise; histology slices are sampled at the
MRI slice planes, optionally offset along z to simulate imperfect slice
correspondence, then degraded by per-slice random rotation, isotropic
shrinkage and translation. The inverse of every degradation is kept as
ground truth, which makes the registration error directly measurable.

The surface bump matters: a perfect ellipse is mapped onto itself by a
whole family of affine maps, so orientation would be unobservable from
masks alone, unlike the irregular glands the pipeline sees in practice.
"""

from __future__ import annotations

import csv
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .engine import STANDARD, RegistrationProfile
from .evaluation import MetricReport
from .image import (Grid2D, HistologyStack, LabelMask2D, PointSet2D, RgbImage2D,
                    ScalarVolume3D, center_of_mass, resample_label, resample_rgb)
from .io import (read_landmarks, read_nifti, write_landmarks, write_mask_image,
                 write_nifti, write_rgb_image)
from .manifest import CaseManifest, SliceRecord, parse_manifest, write_manifest
from .pipeline import run_case
from .transforms import (AffineTransform2D, BSplineFFD2D, CompositeTransform2D,
                         InverseTransform2D, transform_from_dict)

LABEL_BACKGROUND = 0
LABEL_PROSTATE = 1
LABEL_PZ = 2
LABEL_URETHRA = 3
LABEL_CANCER = 4

MRI_INTENSITIES = {LABEL_BACKGROUND: 10.0, LABEL_PROSTATE: 90.0, LABEL_PZ: 130.0,
                   LABEL_URETHRA: 170.0, LABEL_CANCER: 60.0}
PATH_RGB = {LABEL_BACKGROUND: (255, 255, 255), LABEL_PROSTATE: (233, 180, 200),
            LABEL_PZ: (210, 140, 170), LABEL_URETHRA: (140, 80, 160),
            LABEL_CANCER: (90, 40, 110)}


@dataclass(frozen=True)
class PhantomGeometry:
    """Analytic region geometry, evaluable at any physical point."""

    size_px: tuple = (160, 160, 12)
    spacing: tuple = (0.4, 0.4, 4.0)
    prostate_center: tuple = (0.0, 0.0, 0.0)
    prostate_axes: tuple = (22.0, 18.0, 20.0)
    bump_axes: tuple | None = (7.0, 5.0, 14.0)
    bump_angle_deg: float = 215.0
    pz_inner_axes: tuple = (20.0, 13.0, 18.5)
    pz_inner_shift: tuple = (0.0, -4.0, 0.0)
    urethra_radius: float = 1.5
    urethra_base_y: float = 2.0
    urethra_bend: float = 8.0
    cancer_center: tuple | None = (8.0, 10.0, 2.0)
    cancer_axes: tuple = (6.0, 5.0, 5.0)
    slice_indices: tuple = (3, 4, 5, 6, 7)

    def __post_init__(self):
        for name in ("prostate_axes", "pz_inner_axes", "cancer_axes"):
            if any(a <= 0 for a in getattr(self, name)):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.urethra_radius <= 0:
            raise ValueError("urethra radius must be positive")

    @property
    def origin(self) -> tuple:
        return tuple(-(n - 1) / 2.0 * s for n, s in zip(self.size_px, self.spacing))

    def slice_grid(self) -> Grid2D:
        return Grid2D(self.size_px[0], self.size_px[1],
                      (self.spacing[0], self.spacing[1]), (self.origin[0], self.origin[1]))

    def slice_z(self, index: int) -> float:
        return self.origin[2] + index * self.spacing[2]

    def z_range(self) -> tuple:
        return (self.origin[2], self.origin[2] + (self.size_px[2] - 1) * self.spacing[2])

    def _in_ellipsoid(self, x, y, z, center, axes):
        return (((x - center[0]) / axes[0]) ** 2 + ((y - center[1]) / axes[1]) ** 2 +
                ((z - center[2]) / axes[2]) ** 2) <= 1.0

    def _bump_center(self):
        cx, cy, cz = self.prostate_center
        a, b, _ = self.prostate_axes
        ang = np.deg2rad(self.bump_angle_deg)
        return (cx + a * np.cos(ang), cy + b * np.sin(ang), cz)

    def in_prostate(self, x, y, z):
        inside = self._in_ellipsoid(x, y, z, self.prostate_center, self.prostate_axes)
        if self.bump_axes is not None:
            inside = inside | self._in_ellipsoid(x, y, z, self._bump_center(), self.bump_axes)
        return inside

    def region_labels_at(self, x, y, z: float) -> np.ndarray:
        """Vectorized label lookup (priority cancer > urethra > PZ > prostate)."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        prost = self.in_prostate(x, y, z)
        labels = np.where(prost, LABEL_PROSTATE, LABEL_BACKGROUND).astype(np.int32)
        inner_center = tuple(c + s for c, s in zip(self.prostate_center, self.pz_inner_shift))
        pz = prost & ~self._in_ellipsoid(x, y, z, inner_center, self.pz_inner_axes)
        labels[pz] = LABEL_PZ
        uc = self.urethra_center_at(z)
        if uc is not None:
            ur = prost & ((x - uc[0]) ** 2 + (y - uc[1]) ** 2 <= self.urethra_radius ** 2)
            labels[ur] = LABEL_URETHRA
        if self.cancer_center is not None:
            ca = prost & self._in_ellipsoid(x, y, z, self.cancer_center, self.cancer_axes)
            labels[ca] = LABEL_CANCER
        return labels

    def section_scale(self, z: float) -> float:
        cz = self.prostate_center[2]
        az = self.prostate_axes[2]
        t = (z - cz) / az
        return float(np.sqrt(max(1.0 - t * t, 0.0)))

    def urethra_center_at(self, z: float):
        cz = self.prostate_center[2]
        az = self.prostate_axes[2]
        if abs(z - cz) >= az:
            return None
        t = (z - cz) / az
        return (self.prostate_center[0],
                self.prostate_center[1] + self.urethra_base_y - self.urethra_bend * t * t)

    def cancer_centroid_at(self, z: float):
        if self.cancer_center is None:
            return None
        if abs(z - self.cancer_center[2]) >= self.cancer_axes[2]:
            return None
        return (self.cancer_center[0], self.cancer_center[1])

    def anterior_pole_at(self, z: float):
        s = self.section_scale(z)
        if s <= 0.0:
            return None
        return (self.prostate_center[0], self.prostate_center[1] - self.prostate_axes[1] * s)

    def landmarks_at(self, z: float) -> PointSet2D:
        """The three auto-placed landmarks of a slice plane (when present)."""
        pts, labels = [], []
        for name, p in (("urethra_center", self.urethra_center_at(z)),
                        ("cancer_centroid", self.cancer_centroid_at(z)),
                        ("anterior_pole", self.anterior_pole_at(z))):
            if p is not None:
                pts.append(p)
                labels.append(name)
        return PointSet2D(np.array(pts, dtype=np.float64).reshape(-1, 2), tuple(labels))


@dataclass(frozen=True)
class DegradationSpec:
    """Simulated histology artifacts and the study seed.

    ``warp_amplitude_mm`` adds a random smooth elastic component (a
    coarse B-spline field with coefficients of that scale) to each
    slide, modeling the non-affine tissue deformation of histologic
    processing; it defaults to off, matching the basic rotation /
    shrinkage / translation protocol.
    """

    rotation_deg: float = 0.0
    shrink: float = 0.0
    translation_bound: float = 0.05
    noise_sigma: float = 2.0
    slice_offset_mm: float = 0.0
    warp_amplitude_mm: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.rotation_deg < 0:
            raise ValueError("rotation bound must be >= 0")
        if not 0.0 <= self.shrink < 1.0:
            raise ValueError("shrink fraction must lie in [0, 1)")
        if not 0.0 <= self.translation_bound <= 0.2:
            raise ValueError("translation bound must lie in [0, 0.2]")
        if self.warp_amplitude_mm < 0:
            raise ValueError("warp amplitude must be >= 0")


@dataclass
class PathologySlides:
    """Rendered (possibly degraded) histology side of a phantom case."""

    indices: list
    images: list
    prostate_masks: list
    cancer_masks: list
    urethra_masks: list
    landmarks: list
    warnings: list = field(default_factory=list)

    def as_stack(self) -> HistologyStack:
        return HistologyStack(tuple(self.images), tuple(self.prostate_masks))


@dataclass
class PhantomCase:
    geometry: PhantomGeometry
    spec: DegradationSpec
    regions: ScalarVolume3D
    mri: ScalarVolume3D
    slides: PathologySlides
    true_transforms: list
    mri_landmarks: dict
    case_id: str = "phantom"


def synthesize_regions(geom: PhantomGeometry) -> ScalarVolume3D:
    """Voxelized region labels at the MRI voxel centers."""
    grid = geom.slice_grid()
    pts = grid.pixel_center_points()
    nz = geom.size_px[2]
    labels = np.zeros((nz, grid.height, grid.width), dtype=np.int32)
    for k in range(nz):
        labels[k] = geom.region_labels_at(pts[:, 0], pts[:, 1],
                                          geom.slice_z(k)).reshape(grid.shape)
    if not (labels == LABEL_PROSTATE).any():
        raise ValueError("degenerate phantom geometry: prostate region is empty")
    return ScalarVolume3D(labels, geom.spacing, geom.origin)


def render_mri_phantom(regions: ScalarVolume3D, intensity_table: dict,
                       noise_sigma: float, seed: int) -> ScalarVolume3D:
    """Fill regions with mean intensities and add seeded Gaussian noise."""
    labels = np.unique(regions.values)
    missing = [int(l) for l in labels if int(l) not in intensity_table]
    if missing:
        raise KeyError(f"intensity table lacks entries for labels {missing}")
    lut = np.zeros(int(labels.max()) + 1)
    for lab, val in intensity_table.items():
        if lab <= labels.max():
            lut[lab] = val
    values = lut[regions.values]
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        values = values + rng.normal(0.0, noise_sigma, values.shape)
    return ScalarVolume3D(values, regions.spacing, regions.origin)


def render_path_phantom(geom: PhantomGeometry, rgb_table: dict, noise_sigma: float,
                        seed: int, slice_indices=None,
                        slice_offset_mm: float = 0.0) -> PathologySlides:
    """Sample color histology slices at MRI slice planes (+ optional z offset).

    Slices whose offset position leaves the volume are dropped with a
    warning. Landmarks are placed at the offset plane; their MRI-side
    twins (from the unshifted plane) are produced by ``build_phantom_case``.
    """
    indices = list(slice_indices if slice_indices is not None else geom.slice_indices)
    grid = geom.slice_grid()
    pts = grid.pixel_center_points()
    rng = np.random.default_rng(seed)
    z_lo, z_hi = geom.z_range()
    slides = PathologySlides([], [], [], [], [], [])
    for idx in indices:
        z = geom.slice_z(idx) + slice_offset_mm
        if z < z_lo or z > z_hi:
            slides.warnings.append(f"slice {idx}: offset position z={z:.1f} mm "
                                   "falls outside the volume; dropped")
            continue
        labels = geom.region_labels_at(pts[:, 0], pts[:, 1], z).reshape(grid.shape)
        rgb = np.zeros(grid.shape + (3,))
        for lab, color in rgb_table.items():
            rgb[labels == lab] = color
        if noise_sigma > 0:
            rgb = rgb + rng.normal(0.0, noise_sigma, rgb.shape)
        slides.indices.append(idx)
        slides.images.append(RgbImage2D(grid, np.clip(rgb, 0, 255)))
        slides.prostate_masks.append(LabelMask2D(grid, (labels > 0).astype(np.int32)))
        slides.cancer_masks.append(LabelMask2D(grid, (labels == LABEL_CANCER).astype(np.int32)))
        slides.urethra_masks.append(LabelMask2D(grid, (labels == LABEL_URETHRA).astype(np.int32)))
        slides.landmarks.append(geom.landmarks_at(z))
    if not slides.indices:
        raise ValueError("slice offset dropped every histology slice")
    return slides


def apply_degradations(slides: PathologySlides, spec: DegradationSpec) -> tuple:
    """Rotate, shrink and translate each slide; return the truth chain.

    Per slide: a rotation drawn uniformly within the bound, about the
    slide's mask centroid; isotropic scaling by (1 - shrink) about the
    same centroid; and, only when shrinkage is active, a random
    translation of up to the bound fraction of the image extent per
    axis. The identical map applies to image, masks and landmarks; the
    returned transforms map original (MRI-corresponding) coordinates to
    degraded-slide coordinates, exactly what registration must recover.
    """
    rng = np.random.default_rng(spec.seed)
    degraded = PathologySlides(list(slides.indices), [], [], [], [], [],
                               list(slides.warnings))
    chain = []
    scale = 1.0 - spec.shrink
    for i, image in enumerate(slides.images):
        angle = np.deg2rad(rng.uniform(-spec.rotation_deg, spec.rotation_deg)) \
            if spec.rotation_deg > 0 else 0.0
        if spec.shrink > 0:
            extent = image.grid.extent_mm()
            t = (rng.uniform(-spec.translation_bound, spec.translation_bound) * extent[0],
                 rng.uniform(-spec.translation_bound, spec.translation_bound) * extent[1])
        else:
            t = (0.0, 0.0)
        com = center_of_mass(slides.prostate_masks[i])
        c, s = np.cos(angle), np.sin(angle)
        move = AffineTransform2D(np.array([[c, -s], [s, c]]) * scale, t, com)
        if spec.warp_amplitude_mm > 0:
            grid = image.grid
            ex, ey = grid.extent_mm()
            warp = BSplineFFD2D.for_extent((grid.origin[0], grid.origin[0] + ex),
                                           (grid.origin[1], grid.origin[1] + ey), cells=4)
            coeffs = rng.normal(0.0, spec.warp_amplitude_mm, (2,) + (warp.grid_size[1], warp.grid_size[0]))
            coeffs = np.clip(coeffs, -2 * spec.warp_amplitude_mm, 2 * spec.warp_amplitude_mm)
            warp = warp.with_parameters(coeffs.ravel())
            move = CompositeTransform2D((warp, move))
            sampling = InverseTransform2D(move)
        else:
            sampling = move.inverse()
        grid = image.grid
        degraded.images.append(resample_rgb(image, grid, sampling, fill=255.0))
        degraded.prostate_masks.append(resample_label(slides.prostate_masks[i], grid, sampling))
        degraded.cancer_masks.append(resample_label(slides.cancer_masks[i], grid, sampling))
        degraded.urethra_masks.append(resample_label(slides.urethra_masks[i], grid, sampling))
        lm = slides.landmarks[i]
        degraded.landmarks.append(PointSet2D(move.apply(lm.points), lm.labels) if len(lm) else lm)
        chain.append(move)
    return degraded, chain


def build_phantom_case(geom: PhantomGeometry, spec: DegradationSpec,
                       case_id: str = "phantom") -> PhantomCase:
    """Generate one fully degraded case with its ground truth."""
    seeds = np.random.SeedSequence(spec.seed).generate_state(3)
    regions = synthesize_regions(geom)
    mri = render_mri_phantom(regions, MRI_INTENSITIES, spec.noise_sigma, int(seeds[0]))
    slides = render_path_phantom(geom, PATH_RGB, spec.noise_sigma, int(seeds[1]),
                                 slice_offset_mm=spec.slice_offset_mm)
    degraded, chain = apply_degradations(slides, replace(spec, seed=int(seeds[2])))
    mri_landmarks = {idx: geom.landmarks_at(geom.slice_z(idx)) for idx in degraded.indices}
    return PhantomCase(geom, spec, regions, mri, degraded, chain, mri_landmarks, case_id)


def _gt_affine(t) -> AffineTransform2D:
    """The global linear part of a ground-truth degradation chain."""
    if isinstance(t, CompositeTransform2D):
        for stage in t.stages:
            if isinstance(stage, AffineTransform2D):
                return stage
    return t


def persist_case(case: PhantomCase, directory) -> tuple:
    """Write a case in the manifest format the pipeline consumes.

    Returns (manifest_path, reference_path); the reference JSON carries
    the MRI-side truth (label volumes, landmark twins, induced
    transforms) used for evaluation.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_nifti(case.mri, out / "mri_t2.nii.gz", dtype=np.float32)
    labels = case.regions.values
    spacing, origin = case.regions.spacing, case.regions.origin
    write_nifti(ScalarVolume3D((labels > 0).astype(np.uint8), spacing, origin),
                out / "mri_prostate.nii.gz")
    write_nifti(ScalarVolume3D((labels == LABEL_URETHRA).astype(np.uint8), spacing, origin),
                out / "mri_urethra.nii.gz")
    write_nifti(ScalarVolume3D((labels == LABEL_CANCER).astype(np.uint8), spacing, origin),
                out / "mri_cancer.nii.gz")

    records = []
    slides = case.slides
    for i, idx in enumerate(slides.indices):
        stem = f"hist_{idx:02d}"
        write_rgb_image(slides.images[i], out / f"{stem}.png")
        write_mask_image(slides.prostate_masks[i], out / f"{stem}_prostate.png")
        write_mask_image(slides.cancer_masks[i], out / f"{stem}_cancer.png")
        write_mask_image(slides.urethra_masks[i], out / f"{stem}_urethra.png")
        # PNG slides are read back with their own (0, 0)-origin frame, so
        # landmarks must be written in image coordinates, not phantom ones.
        shift = np.asarray(slides.images[i].grid.origin)
        lm = slides.landmarks[i]
        write_landmarks(PointSet2D(lm.points - shift, lm.labels),
                        out / f"{stem}_landmarks.json")
        records.append(SliceRecord(
            image=out / f"{stem}.png", prostate_mask=out / f"{stem}_prostate.png",
            mri_slice_index=idx, rotation_deg=0.0, flip_lr=False,
            pixel_spacing_mm=(case.geometry.spacing[0], case.geometry.spacing[1]),
            cancer_mask=out / f"{stem}_cancer.png",
            urethra_mask=out / f"{stem}_urethra.png",
            landmarks=out / f"{stem}_landmarks.json"))
    manifest = CaseManifest(case.case_id, out / "mri_t2.nii.gz",
                            out / "mri_prostate.nii.gz", tuple(records))
    manifest_path = out / "manifest.json"
    write_manifest(manifest, manifest_path)

    import json
    reference = {
        "case_id": case.case_id,
        "prostate_mask": "mri_prostate.nii.gz",
        "urethra_mask": "mri_urethra.nii.gz",
        "cancer_mask": "mri_cancer.nii.gz",
        "slice_offset_mm": case.spec.slice_offset_mm,
        "landmarks": {str(idx): [{"label": lab, "x_mm": float(p[0]), "y_mm": float(p[1])}
                                 for lab, p in zip(pts.labels, pts.points)]
                      for idx, pts in case.mri_landmarks.items()},
        "induced": {str(idx): {"angle_deg": float(np.rad2deg(_gt_affine(t).rotation_angle())),
                               "scale": float(np.mean(_gt_affine(t).scales())),
                               "translation": list(_gt_affine(t).translation),
                               "transform": t.to_dict()}
                    for idx, t in zip(case.slides.indices, case.true_transforms)},
    }
    reference_path = out / "reference.json"
    with open(reference_path, "w") as fh:
        json.dump(reference, fh, indent=1)
    return manifest_path, reference_path


def load_reference(path) -> dict:
    """Load a reference JSON into the form ``pipeline.evaluate_case`` uses."""
    import json
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    base = path.parent
    out = {"case_id": doc.get("case_id", ""), "slice_offset_mm": doc.get("slice_offset_mm", 0.0)}
    for key, name in (("prostate_volume", "prostate_mask"),
                      ("urethra_volume", "urethra_mask"),
                      ("cancer_volume", "cancer_mask")):
        if doc.get(name):
            out[key] = read_nifti(base / doc[name])
    out["landmarks"] = {int(idx): PointSet2D(
        np.array([[r["x_mm"], r["y_mm"]] for r in recs]).reshape(-1, 2),
        tuple(r["label"] for r in recs))
        for idx, recs in doc.get("landmarks", {}).items()}
    out["induced"] = {int(idx): rec for idx, rec in doc.get("induced", {}).items()}
    return out


@dataclass
class ConditionResult:
    """Per-repetition metrics plus aggregates for one degradation setting."""

    spec: DegradationSpec
    reports: list = field(default_factory=list)
    recovered: list = field(default_factory=list)
    induced: list = field(default_factory=list)
    stage_dice: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    failures: int = 0

    METRICS = ("dice", "hausdorff_mm", "urethra_dev_mm", "landmark_dev_mm")

    def values(self, metric: str) -> np.ndarray:
        vals = [getattr(r, metric) for r in self.reports]
        return np.array([v for v in vals if np.isfinite(v)])

    def summary(self) -> dict:
        out = {}
        for metric in self.METRICS:
            vals = self.values(metric)
            if len(vals):
                out[metric] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
        return out


def _chain_linear_matrix(chain) -> np.ndarray:
    m = np.eye(2)
    for stage in chain.stages:
        if hasattr(stage, "linear"):
            m = np.asarray(stage.linear) @ m
    return m


def rep_seed(base_seed: int, rep: int) -> int:
    return int(np.random.SeedSequence((base_seed, rep)).generate_state(1)[0])


def run_condition(geom: PhantomGeometry, spec: DegradationSpec,
                  profile: RegistrationProfile = STANDARD, reps: int = 10,
                  workdir=None, threads: int = 1) -> ConditionResult:
    """Generate, degrade, register and score ``reps`` phantom cases.

    Every repetition derives its own seed from the spec seed, is
    persisted in the manifest format and run through the standard
    pipeline entry point, so phantom and real data share one code path.
    A failed repetition is recorded and excluded from the aggregates.
    """
    if reps < 1:
        raise ValueError("need at least one repetition")
    result = ConditionResult(spec)
    for rep in range(reps):
        rep_spec = replace(spec, seed=rep_seed(spec.seed, rep))
        try:
            with tempfile.TemporaryDirectory(dir=workdir) as tmp:
                case = build_phantom_case(geom, rep_spec, case_id=f"phantom_r{rep:02d}")
                manifest_path, reference_path = persist_case(case, tmp)
                manifest = parse_manifest(manifest_path)
                reference = load_reference(reference_path)
                t0 = __import__("time").perf_counter()
                case_result, report = run_case(manifest, profile, threads=threads,
                                               reference=reference)
                result.wall_times.append(__import__("time").perf_counter() - t0)
        except Exception:  # noqa: BLE001 - count and move on
            result.failures += 1
            continue
        result.reports.append(report)
        rec, ind = [], []
        for k, chain in enumerate(case_result.chains):
            if chain is None:
                continue
            m = _chain_linear_matrix(chain)
            u, sv, vt = np.linalg.svd(m)
            r = u @ vt
            rec.append({"angle_deg": float(np.degrees(np.arctan2(r[1, 0], r[0, 0]))),
                        "scale": float(np.mean(sv))})
            idx = manifest.slices[k].mri_slice_index
            ind.append(reference["induced"][idx])
        result.recovered.append(rec)
        result.induced.append(ind)
        result.stage_dice.append(case_result.stage_dice_native)
    return result


DEFAULT_ROTATIONS = (0, 5, 10, 15, 20, 25, 30, 35, 40)
DEFAULT_SHRINKS = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30)
DEFAULT_OFFSETS = (0.0, 2.0)


def run_study(geom: PhantomGeometry | None = None, rotations=DEFAULT_ROTATIONS,
              shrinks=DEFAULT_SHRINKS, offsets=DEFAULT_OFFSETS, reps: int = 10,
              profile: RegistrationProfile = STANDARD, out_dir=None,
              noise_sigma: float = 2.0, base_seed: int = 0, threads: int = 1,
              plots: bool = False) -> list:
    """Cartesian condition sweep; writes long-format and summary CSVs.

    Returns the list of (DegradationSpec, ConditionResult). With
    ``plots=True`` also renders per-metric SVG curves with one standard
    deviation bands.
    """
    rotations, shrinks, offsets = list(rotations), list(shrinks), list(offsets)
    if not rotations or not shrinks or not offsets:
        raise ValueError("study grid must be nonempty on every axis")
    geom = geom or PhantomGeometry()
    results = []
    for off in offsets:
        for s in shrinks:
            for r in rotations:
                spec = DegradationSpec(rotation_deg=r, shrink=s, noise_sigma=noise_sigma,
                                       slice_offset_mm=off, seed=base_seed)
                results.append((spec, run_condition(geom, spec, profile, reps,
                                                    threads=threads)))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_study_tables(results, out)
        if plots:
            plot_study_curves(results, out)
    return results


def _condition_name(spec: DegradationSpec) -> str:
    return f"r{spec.rotation_deg:g}_s{spec.shrink:g}_off{spec.slice_offset_mm:g}"


def write_study_tables(results, out_dir) -> tuple:
    out = Path(out_dir)
    long_path = out / "study_long.csv"
    summary_path = out / "study_summary.csv"
    with open(long_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "rotation_deg", "shrink", "offset_mm", "rep", "metric", "value"])
        for spec, cond in results:
            for rep, report in enumerate(cond.reports):
                for metric in ConditionResult.METRICS:
                    value = getattr(report, metric)
                    if np.isfinite(value):
                        w.writerow([_condition_name(spec), spec.rotation_deg, spec.shrink,
                                    spec.slice_offset_mm, rep, metric, repr(value)])
    with open(summary_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "rotation_deg", "shrink", "offset_mm", "metric", "mean", "std"])
        for spec, cond in results:
            for metric, (mean, std) in cond.summary().items():
                w.writerow([_condition_name(spec), spec.rotation_deg, spec.shrink,
                            spec.slice_offset_mm, metric, repr(mean), repr(std)])
    return long_path, summary_path


def plot_study_curves(results, out_dir) -> list:
    """Line plots (rotation on x, one line per shrink) per metric and offset."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    paths = []
    offsets = sorted({spec.slice_offset_mm for spec, _ in results})
    for metric in ConditionResult.METRICS:
        for off in offsets:
            fig, ax = plt.subplots(figsize=(5, 3.4))
            shrinks = sorted({spec.shrink for spec, _ in results
                              if spec.slice_offset_mm == off})
            drew = False
            for s in shrinks:
                rows = sorted([(spec.rotation_deg, cond.summary().get(metric))
                               for spec, cond in results
                               if spec.slice_offset_mm == off and spec.shrink == s])
                rows = [(r, ms) for r, ms in rows if ms is not None]
                if not rows:
                    continue
                xs = [r for r, _ in rows]
                means = np.array([ms[0] for _, ms in rows])
                stds = np.array([ms[1] for _, ms in rows])
                ax.plot(xs, means, marker="o", label=f"shrink {s:g}")
                ax.fill_between(xs, means - stds, means + stds, alpha=0.2)
                drew = True
            if not drew:
                plt.close(fig)
                continue
            ax.set_xlabel("rotation bound (deg)")
            ax.set_ylabel(metric)
            ax.set_title(f"offset {off:g} mm")
            ax.legend(fontsize=8)
            fig.tight_layout()
            path = out / f"curves_{metric}_off{off:g}.svg"
            fig.savefig(path)
            plt.close(fig)
            paths.append(path)
    return paths
