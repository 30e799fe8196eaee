"""Single slice-pair registration: rigid and affine on prostate masks,
then a B-spline free-form deformation on intensities.

The fixed image is the MRI slice (it defines the output grid); the
histology slice is the moving image. Every stage returns a transform
mapping fixed physical coordinates into moving physical coordinates,
the convention used by resampling. The deformation is defined on the
fixed grid and composed before the linear stage, so the full chain is
``p -> linear(p + ffd(p))``.

Gradient descent drives the mask stages with a fixed learning rate; to
keep that rate meaningful across transforms, stage parameters are
rescaled so one parameter unit moves the mask boundary by about one
pixel of the current pyramid level, and the mask objective is the plain
sum (not mean) of squared differences.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .image import (EmptyRegionError, Grid2D, LabelMask2D, ScalarImage2D,
                    build_pyramid, center_of_mass, mask_area_mm2,
                    resample_label, _sample_linear)
from .optim import ObjectiveHandle, OptimizerReport, gradient_descent, lbfgsb
from .similarity import _bin_indices, finite_difference_steps, metric_gradient, mutual_information_from_counts
from .transforms import (AffineTransform2D, BSplineFFD2D, CompositeTransform2D,
                         RigidTransform2D)
from .evaluation import dice


class RegistrationError(RuntimeError):
    """A registration stage could not run."""


@dataclass(frozen=True)
class RegistrationProfile:
    """All tunables of the registration chain.

    The standard settings use a three-level pyramid (shrink 16/8/4,
    smoothing sigma 4/2/1), gradient descent at learning rate 0.01 with
    250 iterations per level for the mask stages, and 10 bounded
    quasi-Newton iterations per level for the deformation. ``fast_mode``
    drops the finest pyramid level and skips the stack reconstruction.
    """

    name: str = "standard"
    shrink_factors: tuple = (16, 8, 4)
    sigmas: tuple = (4.0, 2.0, 1.0)
    gd_learning_rate: float = 0.01
    gd_iterations: int = 250
    gd_tol: float = 1e-7
    lbfgsb_iterations: int = 10
    lbfgsb_memory: int = 10
    lbfgsb_tol: float = 1e-6
    ffd_gradient_tol: float = 0.0
    ffd_mask_guard: bool = True
    mi_bins: int = 32
    ffd_cells: int = 8
    ffd_bound_factor: float = 2.0
    affine_scale_bounds: tuple = (0.7, 1.4)
    angle_sweep_deg: float = 30.0
    angle_sweep_step_deg: float = 5.0
    region_dilation_px: int = 2
    working_spacing_mm: float = 0.2
    do_reconstruction: bool = True
    do_rigid: bool = True
    do_affine: bool = True
    do_deformable: bool = True
    fast_mode: bool = False
    use_mask_intensities: bool = False

    def __post_init__(self):
        if len(self.shrink_factors) != len(self.sigmas):
            raise ValueError("shrink_factors and sigmas must have equal length")
        if any(a <= b for a, b in zip(self.shrink_factors, self.shrink_factors[1:])):
            raise ValueError("shrink factors must be strictly decreasing")
        if self.affine_scale_bounds[0] <= 0 or self.affine_scale_bounds[0] > self.affine_scale_bounds[1]:
            raise ValueError(f"bad affine scale bounds {self.affine_scale_bounds}")

    def pyramid_levels(self) -> tuple[tuple, tuple]:
        """Effective (shrink_factors, sigmas) after the fast-mode cut."""
        if self.fast_mode and len(self.shrink_factors) > 1:
            return self.shrink_factors[:-1], self.sigmas[:-1]
        return self.shrink_factors, self.sigmas

    def replace(self, **kwargs) -> "RegistrationProfile":
        return dataclasses.replace(self, **kwargs)


STANDARD = RegistrationProfile()
THOROUGH = RegistrationProfile(name="thorough", gd_iterations=500, lbfgsb_iterations=50)
FAST = RegistrationProfile(name="fast", fast_mode=True, do_reconstruction=False)
RELAXED_AFFINE = RegistrationProfile(name="relaxed-affine", affine_scale_bounds=(0.4, 2.5))

_PROFILES = {p.name: p for p in (STANDARD, THOROUGH, FAST, RELAXED_AFFINE)}


def profile_by_name(name: str) -> RegistrationProfile:
    try:
        return _PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(_PROFILES)}") from None


@dataclass
class SlicePairResult:
    """Outcome of one fixed/moving slice registration."""

    rigid: RigidTransform2D | None = None
    affine: AffineTransform2D | None = None
    ffd: BSplineFFD2D | None = None
    stage_reports: dict = field(default_factory=dict)
    stage_dice: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def degraded(self) -> bool:
        return bool(self.warnings)

    def linear_stage(self):
        """The last successful global transform (affine over rigid)."""
        if self.affine is not None:
            return self.affine
        if self.rigid is not None:
            return self.rigid
        return RigidTransform2D()

    def composite(self) -> CompositeTransform2D:
        """Full fixed-to-moving chain (deformation first, then linear)."""
        stages = []
        if self.ffd is not None:
            stages.append(self.ffd)
        stages.append(self.linear_stage())
        return CompositeTransform2D(tuple(stages))

    @property
    def final_dice(self) -> float:
        for key in ("deformable", "affine", "rigid", "input"):
            if key in self.stage_dice:
                return self.stage_dice[key]
        return float("nan")


def _mask_stats(mask: LabelMask2D):
    com = center_of_mass(mask)
    radius = float(np.sqrt(mask_area_mm2(mask) / np.pi))
    return com, max(radius, 1e-6)


class _SumSquaresEvaluator:
    """Squared-difference score of a moving image resampled onto a fixed grid.

    The score is the per-pixel mean times ``norm`` so that its magnitude
    (and hence the fixed-learning-rate step size) does not collapse at
    coarse pyramid levels; ``norm`` is the working-resolution pixel
    count of the stage, constant across its levels.
    """

    def __init__(self, fixed: ScalarImage2D, moving: ScalarImage2D, norm: float = 1.0):
        self.points = fixed.grid.pixel_center_points()
        self.fixed_values = fixed.values.ravel()
        self.moving = moving
        self.scale = norm / self.fixed_values.size

    def __call__(self, transform) -> float:
        q = transform.apply(self.points)
        gx, gy = self.moving.grid.physical_to_index(q[:, 0], q[:, 1])
        warped = _sample_linear(self.moving.values, gx, gy, 0.0)
        d = self.fixed_values - warped
        return float(d @ d) * self.scale


def _parzen_bin_weights(values: np.ndarray, lo: float, hi: float, bins: int):
    """Cubic B-spline Parzen contributions: four (bin index, weight)
    pairs per sample. The wide kernel smooths the joint histogram so
    finite differences of the MI are usable and edge pixels cannot buy
    information by snapping onto bin boundaries."""
    if hi <= lo:
        idx = np.zeros(values.shape, dtype=np.int64)
        one = np.ones_like(values)
        return [(idx, one)]
    c = (np.clip(values, lo, hi) - lo) / (hi - lo) * bins - 0.5
    i0 = np.floor(c).astype(np.int64)
    u = c - i0
    u2 = u * u
    u3 = u2 * u
    w = ((1 - u) ** 3 / 6.0, (3 * u3 - 6 * u2 + 4) / 6.0,
         (-3 * u3 + 3 * u2 + 3 * u + 1) / 6.0, u3 / 6.0)
    return [(np.clip(i0 - 1 + k, 0, bins - 1), w[k]) for k in range(4)]


class _MutualInformationEvaluator:
    """Negated MI over region pixels, with the FFD composed before ``init``.

    The B-spline weights at the (fixed) sample points are precomputed,
    so each evaluation is one matrix product, one bilinear gather and
    one joint histogram. Samples enter the histogram through cubic
    Parzen kernels on both axes and the intensity ranges are frozen at
    the initial alignment, keeping the objective smooth and stationary;
    hard binning proved too quantized to differentiate. The bin count
    shrinks with the sample count so coarse levels keep a populated
    histogram.
    """

    def __init__(self, fixed: ScalarImage2D, moving: ScalarImage2D,
                 region_sel: np.ndarray, init, ffd_template: BSplineFFD2D, bins: int):
        pts = fixed.grid.pixel_center_points()
        sel = region_sel.ravel()
        if not sel.any():
            raise EmptyRegionError("deformable registration region is empty")
        self.points = pts[sel]
        self.n_samples = int(sel.sum())
        self.bins = int(min(bins, max(8, np.sqrt(self.n_samples / 5.0))))
        weights, _ = ffd_template.weight_matrix(self.points)
        self.weights_t = np.ascontiguousarray(weights.T)
        self.coeff_supported = np.tile((weights != 0.0).any(axis=0), 2)
        self.moving = moving
        # the chain is init(p + u(p)); with a linear init this is
        # init(p) + A u(p), so the init applies to the base points once
        self.base = init.apply(self.points)
        self.init_linear = getattr(init, "linear", None)
        self.init = init
        # moving level image padded with the fill value so sampling needs
        # no per-neighbor bounds checks
        self._padded = np.pad(moving.values, 1, constant_values=0.0)
        self._stride = self._padded.shape[1]
        self._rows = np.arange(self.n_samples)
        fixed_values = fixed.values.ravel()[sel]
        self.fixed_dense = self._dense_parzen(fixed_values, float(fixed_values.min()),
                                              float(fixed_values.max())).T.copy()
        warped0 = self._warp(ffd_template.coefficients)
        self.m_lo = float(warped0.min())
        self.m_hi = float(warped0.max())

    def _dense_parzen(self, values: np.ndarray, lo: float, hi: float) -> np.ndarray:
        """Dense (n, bins) Parzen weight matrix with edge bins folded."""
        b = self.bins
        if hi <= lo:
            m = np.zeros((len(values), b))
            m[:, 0] = 1.0
            return m
        c = (np.clip(values, lo, hi) - lo) / (hi - lo) * b - 0.5
        i0 = np.floor(c).astype(np.int64)
        u = c - i0
        u2 = u * u
        u3 = u2 * u
        w4 = np.stack([(1 - u) ** 3 / 6.0, (3 * u3 - 6 * u2 + 4) / 6.0,
                       (-3 * u3 + 3 * u2 + 3 * u + 1) / 6.0, u3 / 6.0], axis=1)
        ext = np.zeros((len(values), b + 4))
        # kernel columns i0-1 .. i0+2 are consecutive; +2 shifts them into ext
        ext[self._rows[:, None], (i0 + 1)[:, None] + np.arange(4)[None, :]] = w4
        m = ext[:, 2:2 + b].copy()
        m[:, 0] += ext[:, 0] + ext[:, 1]
        m[:, b - 1] += ext[:, b + 2] + ext[:, b + 3]
        return m

    def _warp(self, cf: np.ndarray) -> np.ndarray:
        u = (cf.reshape(2, -1) @ self.weights_t).T  # (n, 2) displacement
        if self.init_linear is not None:
            q = self.base + u @ np.asarray(self.init_linear).T
        else:
            q = self.init.apply(self.points + u)
        grid = self.moving.grid
        gx = (q[:, 0] - grid.origin[0]) / grid.spacing[0]
        gy = (q[:, 1] - grid.origin[1]) / grid.spacing[1]
        h, w = self.moving.values.shape
        # clip into the padded-gather range; anything at/inside the clip
        # boundary interpolates against the fill ring, matching the
        # outside-gives-fill convention to within rounding
        gx = np.clip(gx, -1.0, w - 1e-9)
        gy = np.clip(gy, -1.0, h - 1e-9)
        x0 = np.floor(gx)
        y0 = np.floor(gy)
        fx = gx - x0
        fy = gy - y0
        flat = (y0.astype(np.int64) + 1) * self._stride + (x0.astype(np.int64) + 1)
        p = self._padded.ravel()
        v00 = p.take(flat)
        v01 = p.take(flat + 1)
        v10 = p.take(flat + self._stride)
        v11 = p.take(flat + self._stride + 1)
        top = v00 + fx * (v01 - v00)
        bot = v10 + fx * (v11 - v10)
        return top + fy * (bot - top)

    def value_for_coefficients(self, cf: np.ndarray) -> float:
        warped = self._warp(cf)
        moving_dense = self._dense_parzen(warped, self.m_lo, self.m_hi)
        joint = self.fixed_dense @ moving_dense
        return -mutual_information_from_counts(joint)

    def __call__(self, transform: BSplineFFD2D) -> float:
        return self.value_for_coefficients(transform.coefficients)

    def gradient_for_vector(self, vector: np.ndarray, step: float,
                            shape: tuple) -> np.ndarray:
        """Central differences, skipping control points with no support
        in the region (their derivative is exactly zero)."""
        grad = np.zeros_like(vector)
        for i in np.nonzero(self.coeff_supported)[0]:
            plus = vector.copy()
            minus = vector.copy()
            plus[i] += step
            minus[i] -= step
            grad[i] = (self.value_for_coefficients(plus.reshape(shape)) -
                       self.value_for_coefficients(minus.reshape(shape))) / (2 * step)
        return grad


def _linear_stage_scales(transform, level_spacing: tuple, radius_mm: float) -> np.ndarray:
    """Per-parameter scale so one unit is roughly one pixel of boundary motion."""
    px = max(level_spacing)
    if isinstance(transform, RigidTransform2D):
        return np.array([px / radius_mm, px, px])
    if isinstance(transform, AffineTransform2D):
        return np.array([px / radius_mm] * 4 + [px, px])
    raise TypeError(type(transform).__name__)


def _scaled_objective(metric_eval, template, scales, level_spacing) -> ObjectiveHandle:
    steps = finite_difference_steps(template, level_spacing)

    def evaluate(u):
        return metric_eval(template.with_parameters(u * scales))

    def gradient(u):
        t = template.with_parameters(u * scales)
        return metric_gradient(metric_eval, t, level_spacing, steps=steps) * scales

    return ObjectiveHandle(evaluate, gradient, len(scales))


def _scale_clamp_projection(template: AffineTransform2D, scales, bounds):
    """Projection clamping the affine's singular values into ``bounds``."""
    lo, hi = bounds

    def project(u):
        p = u * scales
        m = p[:4].reshape(2, 2)
        uu, sv, vt = np.linalg.svd(m)
        clipped = np.clip(sv, lo, hi)
        if not np.array_equal(sv, clipped):
            p = p.copy()
            p[:4] = (uu @ np.diag(clipped) @ vt).ravel()
        return p / scales

    return project


def _nonempty_indicator(mask: LabelMask2D, what: str) -> ScalarImage2D:
    if not (mask.values > 0).any():
        raise EmptyRegionError(f"{what} mask is empty")
    return mask.indicator()


def area_scale_estimate(fixed_mask: LabelMask2D, moving_mask: LabelMask2D,
                        bounds=(0.0, np.inf)) -> float:
    """Isotropic scale prior from the mask area ratio.

    Starting the affine near sqrt(|moving| / |fixed|) keeps shrunk
    inputs out of the flat valley where rotation trades against
    anisotropic scaling, which mask overlap alone cannot resolve.
    """
    s = float(np.sqrt(mask_area_mm2(moving_mask) / mask_area_mm2(fixed_mask)))
    return float(np.clip(s, bounds[0], bounds[1]))


def _register_linear(fixed_img: ScalarImage2D, moving_img: ScalarImage2D,
                     init, profile: RegistrationProfile, radius_mm: float,
                     project_factory=None, reports: list | None = None):
    """Shared multi-resolution loop for the rigid and affine mask stages."""
    factors, sigmas = profile.pyramid_levels()
    fixed_pyr = build_pyramid(fixed_img, factors, sigmas)
    moving_pyr = build_pyramid(moving_img, factors, sigmas)
    norm = float(fixed_img.grid.width * fixed_img.grid.height)
    t = init
    for fixed_level, moving_level in zip(fixed_pyr, moving_pyr):
        level_spacing = fixed_level.grid.spacing
        scales = _linear_stage_scales(t, level_spacing, radius_mm)
        metric_eval = _SumSquaresEvaluator(fixed_level, moving_level, norm)
        obj = _scaled_objective(metric_eval, t, scales, level_spacing)
        project = project_factory(t, scales) if project_factory else None
        report = gradient_descent(obj, t.parameters() / scales,
                                  profile.gd_learning_rate, profile.gd_iterations,
                                  profile.gd_tol * norm, project=project)
        t = t.with_parameters(report.final_params * scales)
        if reports is not None:
            reports.append(report)
    return t


def _angle_capture_sweep(fixed_ind: ScalarImage2D, moving_ind: ScalarImage2D,
                         init: RigidTransform2D,
                         profile: RegistrationProfile) -> RigidTransform2D:
    """Probe a coarse fan of rotations and restart from the best one.

    Shrunk or noisy masks flatten the rotation gradient near zero, so
    plain descent can stall on a plateau well inside the capture range.
    A 5-degree exhaustive scan at the coarsest level costs a handful of
    evaluations and keeps descent inside the right basin.
    """
    if profile.angle_sweep_deg <= 0:
        return init
    factors, sigmas = profile.pyramid_levels()
    fixed_level = build_pyramid(fixed_ind, factors[:1], sigmas[:1])[0]
    moving_level = build_pyramid(moving_ind, factors[:1], sigmas[:1])[0]
    metric_eval = _SumSquaresEvaluator(fixed_level, moving_level)
    offsets = np.deg2rad(np.arange(-profile.angle_sweep_deg,
                                   profile.angle_sweep_deg + 1e-9,
                                   profile.angle_sweep_step_deg))
    candidates = [RigidTransform2D(init.angle + d, init.translation, init.center)
                  for d in offsets]
    values = [metric_eval(c) for c in candidates]
    return candidates[int(np.argmin(values))]


def register_rigid_masks(fixed_mask: LabelMask2D, moving_mask: LabelMask2D,
                         init: RigidTransform2D | None = None,
                         profile: RegistrationProfile = STANDARD,
                         reports: list | None = None) -> RigidTransform2D:
    """Recover the rigid transform aligning two prostate masks.

    Minimizes the mask-indicator squared difference coarse to fine,
    warm-starting each level. Default initialization translates the
    fixed mask centroid onto the moving one, with zero rotation about
    the fixed centroid.
    """
    fixed_ind = _nonempty_indicator(fixed_mask, "fixed")
    moving_ind = _nonempty_indicator(moving_mask, "moving")
    com_f, radius = _mask_stats(fixed_mask)
    if init is None:
        com_m, _ = _mask_stats(moving_mask)
        init = RigidTransform2D(0.0, (com_m[0] - com_f[0], com_m[1] - com_f[1]), com_f)
    init = _angle_capture_sweep(fixed_ind, moving_ind, init, profile)
    return _register_linear(fixed_ind, moving_ind, init, profile, radius, reports=reports)


def register_affine_masks(fixed_mask: LabelMask2D, moving_mask: LabelMask2D,
                          init: AffineTransform2D | None = None,
                          profile: RegistrationProfile = STANDARD,
                          reports: list | None = None) -> AffineTransform2D:
    """Six-parameter affine refinement of the mask alignment.

    The linear part's singular values are clamped into the profile's
    scale bounds after every accepted descent step.
    """
    fixed_ind = _nonempty_indicator(fixed_mask, "fixed")
    moving_ind = _nonempty_indicator(moving_mask, "moving")
    com_f, radius = _mask_stats(fixed_mask)
    if init is None:
        com_m, _ = _mask_stats(moving_mask)
        scale0 = area_scale_estimate(fixed_mask, moving_mask, profile.affine_scale_bounds)
        init = AffineTransform2D(np.eye(2) * scale0,
                                 (com_m[0] - com_f[0], com_m[1] - com_f[1]), com_f)

    def project_factory(template, scales):
        return _scale_clamp_projection(template, scales, profile.affine_scale_bounds)

    return _register_linear(fixed_ind, moving_ind, init, profile, radius,
                            project_factory=project_factory, reports=reports)


def make_ffd_for_grid(grid: Grid2D, cells: int) -> BSplineFFD2D:
    ex, ey = grid.extent_mm()
    return BSplineFFD2D.for_extent((grid.origin[0], grid.origin[0] + ex),
                                   (grid.origin[1], grid.origin[1] + ey), cells)


def register_deformable(fixed_gray: ScalarImage2D, moving_gray: ScalarImage2D,
                        init, region: LabelMask2D,
                        profile: RegistrationProfile = STANDARD,
                        reports: list | None = None) -> BSplineFFD2D:
    """Optimize B-spline control displacements by mutual information.

    ``init`` must already align the pair globally (typically the affine
    result); the deformation is composed before it. Coefficients are
    box-bounded to +-``ffd_bound_factor`` control spacings, optimized
    level by level with the bounded quasi-Newton method. Convergence
    uses ``ffd_gradient_tol``, calibrated above the MI estimator's noise
    slope so an already-aligned pair is left untouched instead of being
    warped into histogram noise.
    """
    if not (region.values > 0).any():
        raise EmptyRegionError("deformable registration region is empty")
    ffd = make_ffd_for_grid(fixed_gray.grid, profile.ffd_cells)
    n_cp = ffd.grid_size[0] * ffd.grid_size[1]
    bound = np.concatenate([np.full(n_cp, profile.ffd_bound_factor * ffd.spacing[0]),
                            np.full(n_cp, profile.ffd_bound_factor * ffd.spacing[1])])
    factors, sigmas = profile.pyramid_levels()
    fixed_pyr = build_pyramid(fixed_gray, factors, sigmas)
    moving_pyr = build_pyramid(moving_gray, factors, sigmas)
    coeffs = ffd.parameters()
    for fixed_level, moving_level in zip(fixed_pyr, moving_pyr):
        region_level = resample_label(region, fixed_level.grid).values > 0
        if not region_level.any():
            region_level = np.ones(fixed_level.grid.shape, dtype=bool)
        metric_eval = _MutualInformationEvaluator(fixed_level, moving_level,
                                                  region_level, init, ffd, profile.mi_bins)
        level_spacing = fixed_level.grid.spacing
        fd_step = 0.1 * min(level_spacing)
        shape = (2,) + ffd.coefficients.shape[1:]

        def evaluate(v):
            return metric_eval.value_for_coefficients(v.reshape(shape))

        def gradient(v):
            return metric_eval.gradient_for_vector(v, fd_step, shape)

        obj = ObjectiveHandle(evaluate, gradient, ffd.n_parameters)
        report = lbfgsb(obj, coeffs, -bound, bound, profile.lbfgsb_iterations,
                        profile.lbfgsb_memory,
                        max(profile.lbfgsb_tol, profile.ffd_gradient_tol))
        coeffs = report.final_params
        if reports is not None:
            reports.append(report)
    return ffd.with_parameters(coeffs)


def _chain_dice(fixed_mask: LabelMask2D, moving_mask: LabelMask2D, transform) -> float:
    mapped = resample_label(moving_mask, fixed_mask.grid, transform)
    return dice(fixed_mask, mapped)


def register_slice_pair(fixed_gray: ScalarImage2D, fixed_mask: LabelMask2D,
                        moving_gray: ScalarImage2D, moving_mask: LabelMask2D,
                        profile: RegistrationProfile = STANDARD) -> SlicePairResult:
    """Run the full rigid -> affine -> deformable chain on one slice pair.

    Inputs must be preprocessed: masked, gross-rotated/flipped and on a
    common working spacing. Stages are skippable per profile; a failed
    stage leaves the last successful chain in place and records a
    warning instead of raising.
    """
    t0 = time.perf_counter()
    result = SlicePairResult()
    com_f, _ = _mask_stats(fixed_mask)
    com_m, _ = _mask_stats(moving_mask)
    linear = RigidTransform2D(0.0, (com_m[0] - com_f[0], com_m[1] - com_f[1]), com_f)
    if profile.use_mask_intensities:
        rigid_fixed, rigid_moving = fixed_gray, moving_gray
    else:
        rigid_fixed, rigid_moving = None, None  # stages use the masks directly

    # "input" is the chain's starting state: centroid alignment only. A raw
    # overlay would compare arbitrary slide frames, which is meaningless.
    result.stage_dice["input"] = _chain_dice(fixed_mask, moving_mask, linear)

    if profile.do_rigid:
        try:
            reports = []
            if profile.use_mask_intensities:
                com_fg, radius = _mask_stats(fixed_mask)
                result.rigid = _register_linear(rigid_fixed, rigid_moving, linear,
                                                profile, radius, reports=reports)
            else:
                result.rigid = register_rigid_masks(fixed_mask, moving_mask, linear,
                                                    profile, reports=reports)
            result.stage_reports["rigid"] = reports
            linear = result.rigid
        except Exception as exc:  # noqa: BLE001 - degrade, don't kill the case
            result.warnings.append(f"rigid stage failed: {exc}")
        result.stage_dice["rigid"] = _chain_dice(fixed_mask, moving_mask, linear)

    if profile.do_affine:
        try:
            reports = []
            affine_init = linear.as_affine() if isinstance(linear, RigidTransform2D) else linear
            scale0 = area_scale_estimate(fixed_mask, moving_mask, profile.affine_scale_bounds)
            affine_init = AffineTransform2D(affine_init.matrix * scale0,
                                            affine_init.translation, affine_init.center)
            if profile.use_mask_intensities:
                com_fg, radius = _mask_stats(fixed_mask)

                def project_factory(template, scales):
                    return _scale_clamp_projection(template, scales, profile.affine_scale_bounds)

                result.affine = _register_linear(rigid_fixed, rigid_moving, affine_init,
                                                 profile, radius,
                                                 project_factory=project_factory,
                                                 reports=reports)
            else:
                result.affine = register_affine_masks(fixed_mask, moving_mask, affine_init,
                                                      profile, reports=reports)
            result.stage_reports["affine"] = reports
            linear = result.affine
        except Exception as exc:  # noqa: BLE001
            result.warnings.append(f"affine stage failed: {exc}")
        result.stage_dice["affine"] = _chain_dice(fixed_mask, moving_mask, linear)

    if profile.do_deformable:
        try:
            moving_mapped = resample_label(moving_mask, fixed_mask.grid, linear)
            union = (fixed_mask.values > 0) | (moving_mapped.values > 0)
            if profile.region_dilation_px > 0:
                union = ndimage.binary_dilation(union, iterations=profile.region_dilation_px)
            region = LabelMask2D(fixed_mask.grid, union.astype(np.int32))
            reports = []
            result.ffd = register_deformable(fixed_gray, moving_gray, linear, region,
                                             profile, reports=reports)
            result.stage_reports["deformable"] = reports
            if profile.ffd_mask_guard and result.ffd is not None:
                # The MI estimate is noisy at working resolution and a few
                # quasi-Newton steps can wander into histogram noise. The
                # prostate masks are stage inputs, so a deformation that
                # undoes their alignment is rejected in favor of the
                # linear chain.
                before = _chain_dice(fixed_mask, moving_mask, linear)
                after = _chain_dice(fixed_mask, moving_mask, result.composite())
                if after < before - 1e-9:
                    result.ffd = None
                    result.notes.append(
                        f"deformable field rejected: mask overlap {after:.4f} < {before:.4f}")
        except Exception as exc:  # noqa: BLE001
            result.warnings.append(f"deformable stage failed: {exc}")
        result.stage_dice["deformable"] = _chain_dice(fixed_mask, moving_mask,
                                                      result.composite())

    result.wall_time = time.perf_counter() - t0
    return result
