"""Geometry-aware 2D/3D image containers, resampling and pyramids.

All images carry a :class:`Grid2D` describing pixel size (mm) and the
physical position of the first pixel center. Physical coordinates are
(x, y) in mm with x along image columns and y along rows; grids are
axis-aligned by construction (gross flips/rotations are modeled as
explicit transforms, never as grid metadata).

Pixel values are stored as double precision and frozen after
construction, so images can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class EmptyRegionError(ValueError):
    """Raised when an operation needs at least one foreground pixel."""


class GridMismatchError(ValueError):
    """Raised when two images that must share a grid do not."""


@dataclass(frozen=True)
class Grid2D:
    """Pixel lattice geometry: size, spacing (mm/px) and origin (mm).

    ``origin`` is the physical coordinate of the center of pixel
    (column 0, row 0).
    """

    width: int
    height: int
    spacing: tuple[float, float] = (1.0, 1.0)
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid size must be >= 1, got {self.width}x{self.height}")
        if not (self.spacing[0] > 0 and self.spacing[1] > 0):
            raise ValueError(f"grid spacing must be positive, got {self.spacing}")
        if not np.all(np.isfinite(self.spacing)) or not np.all(np.isfinite(self.origin)):
            raise ValueError("grid spacing/origin must be finite")
        object.__setattr__(self, "spacing", (float(self.spacing[0]), float(self.spacing[1])))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape (rows, cols) of images on this grid."""
        return (self.height, self.width)

    def index_to_physical(self, ix, iy):
        """Physical (x, y) mm of pixel centers at (column, row) indices."""
        return (self.origin[0] + np.asarray(ix) * self.spacing[0],
                self.origin[1] + np.asarray(iy) * self.spacing[1])

    def physical_to_index(self, x, y):
        """Continuous (column, row) index of physical points."""
        return ((np.asarray(x) - self.origin[0]) / self.spacing[0],
                (np.asarray(y) - self.origin[1]) / self.spacing[1])

    def pixel_center_points(self) -> np.ndarray:
        """All pixel centers as an (H*W, 2) array, row-major order."""
        xs = self.origin[0] + np.arange(self.width) * self.spacing[0]
        ys = self.origin[1] + np.arange(self.height) * self.spacing[1]
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def extent_mm(self) -> tuple[float, float]:
        """Physical span of pixel centers, per axis."""
        return ((self.width - 1) * self.spacing[0], (self.height - 1) * self.spacing[1])


def _freeze(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


@dataclass(frozen=True)
class ScalarImage2D:
    """Single-channel image with real-valued intensities on a grid."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if v.shape != self.grid.shape:
            raise ValueError(f"value shape {v.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("image values must be finite")
        object.__setattr__(self, "values", _freeze(v))


@dataclass(frozen=True)
class RgbImage2D:
    """Three-channel color image; channels ordered red, green, blue."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if v.shape != self.grid.shape + (3,):
            raise ValueError(f"value shape {v.shape} does not match grid {self.grid.shape} + (3,)")
        if not np.all(np.isfinite(v)):
            raise ValueError("image values must be finite")
        if v.min() < 0.0 or v.max() > 255.0:
            raise ValueError("RGB channel values must lie in [0, 255]")
        object.__setattr__(self, "values", _freeze(v))


@dataclass(frozen=True)
class LabelMask2D:
    """Integer label image; 0 is background."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values))
        if not np.issubdtype(v.dtype, np.integer):
            if not np.allclose(v, np.round(v)):
                raise ValueError("label values must be integers")
            v = np.round(v).astype(np.int32)
        else:
            v = v.astype(np.int32)
        if v.shape != self.grid.shape:
            raise ValueError(f"value shape {v.shape} does not match grid {self.grid.shape}")
        if v.min() < 0:
            raise ValueError("label values must be non-negative")
        object.__setattr__(self, "values", _freeze(v))

    def labels(self) -> np.ndarray:
        """Sorted distinct labels present, excluding background."""
        u = np.unique(self.values)
        return u[u > 0]

    def indicator(self, label: int | None = None) -> ScalarImage2D:
        """Binary 0/1 image of one label (or any foreground if None)."""
        if label is None:
            ind = (self.values > 0).astype(np.float64)
        else:
            ind = (self.values == label).astype(np.float64)
        return ScalarImage2D(self.grid, ind)


@dataclass(frozen=True)
class ScalarVolume3D:
    """Stack of axial slices sharing one in-plane grid.

    ``values`` has shape (n_slices, height, width), plus an optional
    trailing channel axis for color volumes; ``spacing`` is (x, y, z)
    mm and ``origin`` the physical position of voxel (0, 0, 0).
    """

    values: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values))
        if v.ndim not in (3, 4):
            raise ValueError("volume values must be (slices, rows, cols[, channels])")
        if not all(s > 0 for s in self.spacing):
            raise ValueError(f"volume spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "values", _freeze(v))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def n_slices(self) -> int:
        return self.values.shape[0]

    @property
    def slice_grid(self) -> Grid2D:
        return Grid2D(self.values.shape[2], self.values.shape[1],
                      (self.spacing[0], self.spacing[1]),
                      (self.origin[0], self.origin[1]))

    def slice_z_mm(self, index: int) -> float:
        return self.origin[2] + index * self.spacing[2]

    def get_slice(self, index: int) -> ScalarImage2D:
        if not 0 <= index < self.n_slices:
            raise IndexError(f"slice index {index} out of range [0, {self.n_slices})")
        return ScalarImage2D(self.slice_grid, np.asarray(self.values[index], dtype=np.float64))

    def get_mask_slice(self, index: int) -> LabelMask2D:
        if not 0 <= index < self.n_slices:
            raise IndexError(f"slice index {index} out of range [0, {self.n_slices})")
        return LabelMask2D(self.slice_grid, self.values[index])


@dataclass(frozen=True)
class HistologyStack:
    """Ordered serial-section color slices with per-slice prostate masks.

    Grids may differ across slices (raw slides are scanned
    independently); within one index the image and mask must agree.
    """

    slices: tuple
    masks: tuple

    def __post_init__(self):
        slices = tuple(self.slices)
        masks = tuple(self.masks)
        if len(slices) < 1:
            raise ValueError("a histology stack needs at least one slice")
        if len(slices) != len(masks):
            raise ValueError("slice and mask counts differ")
        for i, (s, m) in enumerate(zip(slices, masks)):
            if s.grid != m.grid:
                raise GridMismatchError(f"slice {i}: image and mask grids differ")
        object.__setattr__(self, "slices", slices)
        object.__setattr__(self, "masks", masks)

    @property
    def n_slices(self) -> int:
        return len(self.slices)


@dataclass(frozen=True)
class PointSet2D:
    """Labeled physical points (mm), e.g. anatomic landmarks."""

    points: np.ndarray
    labels: tuple | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64)).reshape(-1, 2)
        if pts.size and not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", _freeze(pts))
        if self.labels is not None:
            labels = tuple(str(l) for l in self.labels)
            if len(labels) != len(pts):
                raise ValueError("label count does not match point count")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.points)


# ---------------------------------------------------------------------------
# Sampling


def _sample_linear(values: np.ndarray, gx: np.ndarray, gy: np.ndarray, fill: float) -> np.ndarray:
    """Bilinear sample at continuous (col, row) indices; outside -> fill."""
    h, w = values.shape[:2]
    x0f = np.floor(gx)
    y0f = np.floor(gy)
    fx = gx - x0f
    fy = gy - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    out = np.zeros(gx.shape + values.shape[2:], dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            v = values[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            if values.ndim == 3:
                v = np.where(inside[..., None], v, fill)
                out += wgt[..., None] * v
            else:
                out += wgt * np.where(inside, v, fill)
    return out


def _sample_nearest(values: np.ndarray, gx: np.ndarray, gy: np.ndarray, fill) -> np.ndarray:
    h, w = values.shape[:2]
    xi = np.rint(gx).astype(np.int64)
    yi = np.rint(gy).astype(np.int64)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    v = values[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    if values.ndim == 3:
        return np.where(inside[..., None], v, fill)
    return np.where(inside, v, fill)


def _target_source_indices(source_grid: Grid2D, target: Grid2D, transform):
    """Continuous source indices for every target pixel center."""
    pts = target.pixel_center_points()
    if transform is not None:
        pts = transform.apply(pts)
    gx, gy = source_grid.physical_to_index(pts[:, 0], pts[:, 1])
    return gx.reshape(target.shape), gy.reshape(target.shape)


def resample_scalar(image: ScalarImage2D, target: Grid2D, transform=None,
                    interp: str = "linear", fill: float = 0.0) -> ScalarImage2D:
    """Resample a scalar image onto ``target``.

    ``transform`` maps target physical coordinates into source physical
    coordinates (the usual fixed-to-moving resampling convention);
    ``None`` means identity. Pixels mapping outside the source extent
    take ``fill``.
    """
    gx, gy = _target_source_indices(image.grid, target, transform)
    if interp == "linear":
        out = _sample_linear(image.values, gx, gy, float(fill))
    elif interp == "nearest":
        out = _sample_nearest(image.values, gx, gy, float(fill))
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    return ScalarImage2D(target, out)


def resample_rgb(image: RgbImage2D, target: Grid2D, transform=None,
                 fill: float = 0.0) -> RgbImage2D:
    """Resample a color image (bilinear per channel)."""
    gx, gy = _target_source_indices(image.grid, target, transform)
    out = _sample_linear(image.values, gx, gy, float(fill))
    return RgbImage2D(target, np.clip(out, 0.0, 255.0))


def resample_label(mask: LabelMask2D, target: Grid2D, transform=None) -> LabelMask2D:
    """Nearest-neighbor label resampling; vacated pixels become background."""
    gx, gy = _target_source_indices(mask.grid, target, transform)
    out = _sample_nearest(mask.values, gx, gy, 0)
    return LabelMask2D(target, out)


def rgb_to_gray(image: RgbImage2D) -> ScalarImage2D:
    """Luma conversion 0.299 R + 0.587 G + 0.114 B, kept real-valued."""
    v = image.values
    gray = 0.299 * v[..., 0] + 0.587 * v[..., 1] + 0.114 * v[..., 2]
    return ScalarImage2D(image.grid, gray)


def build_pyramid(image: ScalarImage2D, shrink_factors, sigmas) -> list[ScalarImage2D]:
    """Multi-resolution pyramid: blur then stride-subsample per level.

    ``sigmas`` are in pixels of the input image; the Gaussian kernel is
    truncated at 4 sigma with reflected boundaries. Spacing scales by
    the shrink factor so each level keeps the physical extent.
    """
    shrink_factors = list(shrink_factors)
    sigmas = list(sigmas)
    if len(shrink_factors) != len(sigmas):
        raise ValueError("shrink_factors and sigmas must have equal length")
    levels = []
    for f, sigma in zip(shrink_factors, sigmas):
        f = int(f)
        if f < 1:
            raise ValueError(f"shrink factor must be >= 1, got {f}")
        if f > min(image.grid.width, image.grid.height):
            raise ValueError(f"shrink factor {f} exceeds image size "
                             f"{image.grid.width}x{image.grid.height}")
        if sigma > 0:
            blurred = ndimage.gaussian_filter(image.values, sigma, mode="reflect", truncate=4.0)
        else:
            blurred = image.values
        sub = blurred[::f, ::f]
        grid = Grid2D(sub.shape[1], sub.shape[0],
                      (image.grid.spacing[0] * f, image.grid.spacing[1] * f),
                      image.grid.origin)
        levels.append(ScalarImage2D(grid, sub))
    return levels


def center_of_mass(mask: LabelMask2D, label: int | None = None) -> tuple[float, float]:
    """Mean physical coordinate (mm) of pixels carrying ``label``.

    ``label=None`` uses all foreground pixels.
    """
    if label is None:
        rows, cols = np.nonzero(mask.values > 0)
    else:
        rows, cols = np.nonzero(mask.values == label)
    if rows.size == 0:
        raise EmptyRegionError(f"label {label!r} not present in mask")
    xs, ys = mask.grid.index_to_physical(cols, rows)
    return (float(xs.mean()), float(ys.mean()))


def mask_area_mm2(mask: LabelMask2D, label: int | None = None) -> float:
    """Foreground area in square millimetres."""
    if label is None:
        n = int(np.count_nonzero(mask.values > 0))
    else:
        n = int(np.count_nonzero(mask.values == label))
    return n * mask.grid.spacing[0] * mask.grid.spacing[1]
