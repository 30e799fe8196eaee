"""Scoring functions that drive the registration optimizers.

Both metrics return a :class:`MetricValue` whose ``value`` is
lower-is-better: plain mean squared difference for masks, and the
negated mutual information of a joint intensity histogram for
multimodal pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .image import EmptyRegionError, Grid2D, GridMismatchError, LabelMask2D, ScalarImage2D, resample_scalar
from .transforms import AffineTransform2D, BSplineFFD2D, RigidTransform2D


@dataclass(frozen=True)
class MetricValue:
    """Score (lower is better) plus the pixel count that produced it."""

    value: float
    n_samples: int

    def __post_init__(self):
        if self.n_samples <= 0:
            raise EmptyRegionError("metric evaluated over an empty region")


def _region_values(fixed: ScalarImage2D, moving: ScalarImage2D, region: LabelMask2D | None):
    if fixed.grid != moving.grid:
        raise GridMismatchError("fixed and moving images must share a grid")
    if region is None:
        return fixed.values.ravel(), moving.values.ravel()
    if region.grid != fixed.grid:
        raise GridMismatchError("region mask must share the image grid")
    sel = region.values > 0
    if not sel.any():
        raise EmptyRegionError("region mask selects no pixels")
    return fixed.values[sel], moving.values[sel]


def ssd(fixed: ScalarImage2D, moving_resampled: ScalarImage2D,
        region: LabelMask2D | None = None) -> MetricValue:
    """Mean of squared intensity differences over the region."""
    f, m = _region_values(fixed, moving_resampled, region)
    d = f - m
    return MetricValue(float(np.mean(d * d)), f.size)


def _bin_indices(values: np.ndarray, bins: int) -> np.ndarray:
    lo = values.min()
    hi = values.max()
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.int64)
    idx = ((values - lo) * (bins / (hi - lo))).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def mutual_information_from_counts(joint: np.ndarray) -> float:
    """Mutual information (nats) of a joint histogram; empty bins contribute 0."""
    total = joint.sum()
    p = joint / total
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    nz = p > 0
    outer = np.outer(px, py)
    return float(np.sum(p[nz] * np.log(p[nz] / outer[nz])))


def mutual_information(fixed: ScalarImage2D, moving_resampled: ScalarImage2D,
                       bins: int = 32, region: LabelMask2D | None = None) -> MetricValue:
    """Negated histogram mutual information, natural log.

    Intensities are binned linearly between each image's own min and
    max inside the region, so the value is invariant to affine
    intensity rescaling. Two constant images have MI = 0 by convention.
    """
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    f, m = _region_values(fixed, moving_resampled, region)
    fi = _bin_indices(f, bins)
    mi_ = _bin_indices(m, bins)
    joint = np.bincount(fi * bins + mi_, minlength=bins * bins).reshape(bins, bins)
    return MetricValue(-mutual_information_from_counts(joint.astype(np.float64)), f.size)


def finite_difference_steps(transform, pixel_spacing) -> np.ndarray:
    """Per-parameter central-difference steps for a transform kind.

    Angles step 1e-3 rad, translations 0.1 pixel, matrix entries 1e-3,
    FFD coefficients 0.1 pixel.
    """
    sx, sy = float(pixel_spacing[0]), float(pixel_spacing[1])
    if isinstance(transform, RigidTransform2D):
        return np.array([1e-3, 0.1 * sx, 0.1 * sy])
    if isinstance(transform, AffineTransform2D):
        return np.array([1e-3] * 4 + [0.1 * sx, 0.1 * sy])
    if isinstance(transform, BSplineFFD2D):
        return np.full(transform.n_parameters, 0.1 * min(sx, sy))
    raise TypeError(f"no finite-difference steps defined for {type(transform).__name__}")


def metric_gradient(metric_eval: Callable, transform, pixel_spacing,
                    steps: np.ndarray | None = None) -> np.ndarray:
    """Central-difference gradient of a metric over transform parameters.

    ``metric_eval`` maps a transform instance to a scalar score; it is
    typically built with :func:`resampling_objective`.
    """
    params = transform.parameters()
    if steps is None:
        steps = finite_difference_steps(transform, pixel_spacing)
    grad = np.zeros_like(params)
    for i, h in enumerate(steps):
        plus = params.copy()
        minus = params.copy()
        plus[i] += h
        minus[i] -= h
        grad[i] = (metric_eval(transform.with_parameters(plus)) -
                   metric_eval(transform.with_parameters(minus))) / (2.0 * h)
    return grad


def resampling_objective(metric_fn: Callable, fixed: ScalarImage2D, moving: ScalarImage2D,
                         region: LabelMask2D | None = None, scale: float = 1.0,
                         **metric_kwargs) -> Callable:
    """Build ``transform -> score`` by resampling the moving image.

    ``scale`` multiplies the metric value (e.g. the region pixel count,
    to turn a mean squared difference into a plain sum).
    """
    def evaluate(transform) -> float:
        warped = resample_scalar(moving, fixed.grid, transform, interp="linear", fill=0.0)
        return metric_fn(fixed, warped, region=region, **metric_kwargs).value * scale

    return evaluate
