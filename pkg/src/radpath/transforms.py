"""2D spatial transforms: rigid, affine, flips, B-spline free-form fields.

Transforms are immutable values mapping physical (x, y) mm points to
physical points. In resampling they map target (fixed) coordinates into
source (moving) coordinates. Composites apply their stages in declared
order, left to right.

Each optimizable kind exposes a flat parameter vector (``parameters`` /
``with_parameters``): rigid is (angle, tx, ty), affine is the row-major
2x2 matrix followed by the translation, and a free-form deformation is
its x-displacement plane followed by its y-displacement plane, each
row-major over the control grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


def _as_points(p) -> np.ndarray:
    pts = np.asarray(p, dtype=np.float64)
    return pts.reshape(-1, 2)


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")


@dataclass(frozen=True)
class RigidTransform2D:
    """Rotation by ``angle`` (radians) about ``center`` plus translation."""

    angle: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        _check_finite("rigid parameters", [self.angle, *self.translation, *self.center])
        object.__setattr__(self, "angle", float(self.angle))
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    @property
    def linear(self) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        return np.array([[c, -s], [s, c]])

    def apply(self, p) -> np.ndarray:
        pts = _as_points(p)
        c = np.asarray(self.center)
        return (pts - c) @ self.linear.T + c + np.asarray(self.translation)

    def inverse(self) -> "RigidTransform2D":
        t = -self.linear.T @ np.asarray(self.translation)
        return RigidTransform2D(-self.angle, (t[0], t[1]), self.center)

    def parameters(self) -> np.ndarray:
        return np.array([self.angle, self.translation[0], self.translation[1]])

    def with_parameters(self, vector) -> "RigidTransform2D":
        v = np.asarray(vector, dtype=np.float64)
        if v.shape != (3,):
            raise ValueError(f"rigid parameter vector must have length 3, got {v.shape}")
        return RigidTransform2D(v[0], (v[1], v[2]), self.center)

    def as_affine(self) -> "AffineTransform2D":
        return AffineTransform2D(self.linear, self.translation, self.center)

    def to_dict(self) -> dict:
        return {"kind": "rigid", "angle": self.angle,
                "translation": list(self.translation), "center": list(self.center)}


@dataclass(frozen=True)
class AffineTransform2D:
    """General 2x2 linear map about ``center`` plus translation."""

    matrix: np.ndarray
    translation: tuple[float, float] = (0.0, 0.0)
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(2, 2).copy()
        _check_finite("affine parameters", m)
        _check_finite("affine parameters", [*self.translation, *self.center])
        if abs(np.linalg.det(m)) < 1e-12:
            raise ValueError("affine matrix is singular")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    @classmethod
    def identity(cls, center=(0.0, 0.0)) -> "AffineTransform2D":
        return cls(np.eye(2), (0.0, 0.0), center)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix

    def apply(self, p) -> np.ndarray:
        pts = _as_points(p)
        c = np.asarray(self.center)
        return (pts - c) @ self.matrix.T + c + np.asarray(self.translation)

    def inverse(self) -> "AffineTransform2D":
        inv = np.linalg.inv(self.matrix)
        t = -inv @ np.asarray(self.translation)
        return AffineTransform2D(inv, (t[0], t[1]), self.center)

    def parameters(self) -> np.ndarray:
        return np.concatenate([self.matrix.ravel(), self.translation])

    def with_parameters(self, vector) -> "AffineTransform2D":
        v = np.asarray(vector, dtype=np.float64)
        if v.shape != (6,):
            raise ValueError(f"affine parameter vector must have length 6, got {v.shape}")
        return AffineTransform2D(v[:4].reshape(2, 2), (v[4], v[5]), self.center)

    def scales(self) -> np.ndarray:
        """Singular values of the linear part (sorted descending)."""
        return np.linalg.svd(self.matrix, compute_uv=False)

    def rotation_angle(self) -> float:
        """Rotation angle (radians) of the polar decomposition."""
        u, _, vt = np.linalg.svd(self.matrix)
        r = u @ vt
        return float(np.arctan2(r[1, 0], r[0, 0]))

    def to_dict(self) -> dict:
        return {"kind": "affine", "matrix": self.matrix.ravel().tolist(),
                "translation": list(self.translation), "center": list(self.center)}


@dataclass(frozen=True)
class FlipLR:
    """Mirror about the vertical line x = ``axis_x``."""

    axis_x: float = 0.0

    def __post_init__(self):
        _check_finite("flip axis", [self.axis_x])
        object.__setattr__(self, "axis_x", float(self.axis_x))

    def apply(self, p) -> np.ndarray:
        pts = _as_points(p).copy()
        pts[:, 0] = 2.0 * self.axis_x - pts[:, 0]
        return pts

    def inverse(self) -> "FlipLR":
        return self

    def to_dict(self) -> dict:
        return {"kind": "flip_lr", "axis_x": self.axis_x}


def bspline3_weights(u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """The four cubic B-spline basis values at fractional offset u in [0, 1)."""
    u2 = u * u
    u3 = u2 * u
    b0 = (1 - u) ** 3 / 6.0
    b1 = (3 * u3 - 6 * u2 + 4) / 6.0
    b2 = (-3 * u3 + 3 * u2 + 3 * u + 1) / 6.0
    b3 = u3 / 6.0
    return b0, b1, b2, b3


def bspline3_weight_derivatives(u: np.ndarray):
    """Derivatives of the four cubic basis functions w.r.t. u."""
    u2 = u * u
    d0 = -((1 - u) ** 2) / 2.0
    d1 = (9 * u2 - 12 * u) / 6.0
    d2 = (-9 * u2 + 6 * u + 3) / 6.0
    d3 = u2 / 2.0
    return d0, d1, d2, d3


@dataclass(frozen=True)
class BSplineFFD2D:
    """Tensor-product cubic B-spline free-form deformation.

    Control point (i, j) sits at ``origin + (i * spacing_x, j * spacing_y)``.
    ``coefficients`` has shape (2, ny, nx): plane 0 holds x displacements,
    plane 1 y displacements, both in mm. The transform adds the
    interpolated displacement to the input point; points outside the
    fully-supported domain (control index range [1, n-2] per axis) are
    left unchanged.
    """

    grid_size: tuple[int, int]
    spacing: tuple[float, float]
    origin: tuple[float, float]
    coefficients: np.ndarray | None = None

    def __post_init__(self):
        nx, ny = int(self.grid_size[0]), int(self.grid_size[1])
        if nx < 4 or ny < 4:
            raise ValueError(f"cubic FFD needs at least 4x4 control points, got {nx}x{ny}")
        if not (self.spacing[0] > 0 and self.spacing[1] > 0):
            raise ValueError("control spacing must be positive")
        coeffs = self.coefficients
        if coeffs is None:
            coeffs = np.zeros((2, ny, nx))
        coeffs = np.ascontiguousarray(np.asarray(coeffs, dtype=np.float64))
        if coeffs.shape != (2, ny, nx):
            raise ValueError(f"coefficients must have shape (2, {ny}, {nx}), got {coeffs.shape}")
        _check_finite("FFD coefficients", coeffs)
        coeffs.setflags(write=False)
        object.__setattr__(self, "grid_size", (nx, ny))
        object.__setattr__(self, "spacing", (float(self.spacing[0]), float(self.spacing[1])))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "coefficients", coeffs)

    @property
    def n_parameters(self) -> int:
        return 2 * self.grid_size[0] * self.grid_size[1]

    def _local_coords(self, pts: np.ndarray):
        gx = (pts[:, 0] - self.origin[0]) / self.spacing[0]
        gy = (pts[:, 1] - self.origin[1]) / self.spacing[1]
        nx, ny = self.grid_size
        inside = (gx >= 1.0) & (gx <= nx - 2.0) & (gy >= 1.0) & (gy <= ny - 2.0)
        ix = np.floor(gx).astype(np.int64)
        iy = np.floor(gy).astype(np.int64)
        return gx - ix, gy - iy, ix, iy, inside

    def displacement(self, p) -> np.ndarray:
        """Interpolated (dx, dy) mm at the given points; zero outside the domain."""
        pts = _as_points(p)
        u, v, ix, iy, inside = self._local_coords(pts)
        wx = bspline3_weights(u)
        wy = bspline3_weights(v)
        nx, ny = self.grid_size
        out = np.zeros((len(pts), 2))
        cf = self.coefficients
        for m in range(4):
            jj = np.clip(iy - 1 + m, 0, ny - 1)
            for l in range(4):
                ii = np.clip(ix - 1 + l, 0, nx - 1)
                w = wx[l] * wy[m]
                out[:, 0] += w * cf[0, jj, ii]
                out[:, 1] += w * cf[1, jj, ii]
        out[~inside] = 0.0
        return out

    def displacement_jacobian(self, p) -> np.ndarray:
        """Analytic spatial gradient of the displacement, shape (n, 2, 2).

        Entry [k, a, b] is d(displacement_a)/d(x_b) at point k.
        """
        pts = _as_points(p)
        u, v, ix, iy, inside = self._local_coords(pts)
        wx, wy = bspline3_weights(u), bspline3_weights(v)
        dwx, dwy = bspline3_weight_derivatives(u), bspline3_weight_derivatives(v)
        nx, ny = self.grid_size
        out = np.zeros((len(pts), 2, 2))
        cf = self.coefficients
        for m in range(4):
            jj = np.clip(iy - 1 + m, 0, ny - 1)
            for l in range(4):
                ii = np.clip(ix - 1 + l, 0, nx - 1)
                gx = dwx[l] * wy[m] / self.spacing[0]
                gy = wx[l] * dwy[m] / self.spacing[1]
                out[:, 0, 0] += gx * cf[0, jj, ii]
                out[:, 0, 1] += gy * cf[0, jj, ii]
                out[:, 1, 0] += gx * cf[1, jj, ii]
                out[:, 1, 1] += gy * cf[1, jj, ii]
        out[~inside] = 0.0
        return out

    def weight_matrix(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Dense basis-weight matrix W (n_points x nx*ny) and inside mask.

        ``W @ coefficients[plane].ravel()`` reproduces ``displacement``
        for that plane; rows of points outside the domain are zero.
        Used to make repeated evaluation at fixed sample points cheap.
        """
        pts = _as_points(points)
        u, v, ix, iy, inside = self._local_coords(pts)
        wx = bspline3_weights(u)
        wy = bspline3_weights(v)
        nx, ny = self.grid_size
        w_mat = np.zeros((len(pts), ny * nx))
        rows = np.arange(len(pts))
        for m in range(4):
            jj = np.clip(iy - 1 + m, 0, ny - 1)
            for l in range(4):
                ii = np.clip(ix - 1 + l, 0, nx - 1)
                w_mat[rows, jj * nx + ii] += np.where(inside, wx[l] * wy[m], 0.0)
        return w_mat, inside

    def apply(self, p) -> np.ndarray:
        pts = _as_points(p)
        return pts + self.displacement(pts)

    def inverse_points(self, q, max_iter: int = 50, tol: float = 1e-10) -> np.ndarray:
        """Solve p + displacement(p) = q by fixed-point iteration."""
        qs = _as_points(q)
        p = qs.copy()
        for _ in range(max_iter):
            p_new = qs - self.displacement(p)
            if np.max(np.abs(p_new - p)) < tol:
                return p_new
            p = p_new
        return p

    def parameters(self) -> np.ndarray:
        return self.coefficients.ravel().copy()

    def with_parameters(self, vector) -> "BSplineFFD2D":
        v = np.asarray(vector, dtype=np.float64)
        if v.shape != (self.n_parameters,):
            raise ValueError(f"FFD parameter vector must have length {self.n_parameters}, got {v.shape}")
        nx, ny = self.grid_size
        return BSplineFFD2D(self.grid_size, self.spacing, self.origin, v.reshape(2, ny, nx))

    @classmethod
    def for_extent(cls, x_range, y_range, cells: int = 8) -> "BSplineFFD2D":
        """Zero FFD whose fully-supported domain covers the given extent.

        ``cells`` interior cells span each axis; one border control point
        is added on every side for cubic support.
        """
        x0, x1 = float(x_range[0]), float(x_range[1])
        y0, y1 = float(y_range[0]), float(y_range[1])
        sx = max(x1 - x0, 1e-9) / cells
        sy = max(y1 - y0, 1e-9) / cells
        return cls((cells + 3, cells + 3), (sx, sy), (x0 - sx, y0 - sy))

    def to_dict(self) -> dict:
        return {"kind": "bspline_ffd", "grid_size": list(self.grid_size),
                "spacing": list(self.spacing), "origin": list(self.origin),
                "coefficients": self.coefficients.ravel().tolist()}


@dataclass(frozen=True)
class CompositeTransform2D:
    """Ordered transform chain; stages apply left to right."""

    stages: tuple

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise ValueError("composite transform needs at least one stage")
        object.__setattr__(self, "stages", stages)

    def apply(self, p) -> np.ndarray:
        pts = _as_points(p)
        for stage in self.stages:
            pts = stage.apply(pts)
        return pts

    def to_dict(self) -> dict:
        return {"kind": "composite", "stages": [s.to_dict() for s in self.stages]}


Transform2D = (RigidTransform2D, AffineTransform2D, FlipLR, BSplineFFD2D, CompositeTransform2D)


def apply_point(transform, p):
    """Apply a transform to one (x, y) point or an (n, 2) array."""
    single = np.asarray(p, dtype=np.float64).ndim == 1
    out = transform.apply(p)
    return tuple(out[0]) if single else out


def inverse_point(transform, p):
    """Map points backwards through a transform (FFD solved iteratively)."""
    pts = _as_points(p)
    single = np.asarray(p, dtype=np.float64).ndim == 1
    if isinstance(transform, CompositeTransform2D):
        for stage in reversed(transform.stages):
            pts = inverse_point(stage, pts)
        out = pts
    elif isinstance(transform, BSplineFFD2D):
        out = transform.inverse_points(pts)
    else:
        out = transform.inverse().apply(pts)
    return tuple(out[0]) if single else out


def invert(transform):
    """Closed-form inverse for rigid/affine/flip transforms."""
    if isinstance(transform, (RigidTransform2D, AffineTransform2D, FlipLR)):
        return transform.inverse()
    raise TypeError(f"no closed-form inverse for {type(transform).__name__}")


@dataclass(frozen=True)
class InverseTransform2D:
    """Point-wise inverse of any transform (FFDs solved iteratively).

    Lets a composite containing a deformation be used directly as a
    resampling transform in the opposite direction.
    """

    transform: object

    def apply(self, p) -> np.ndarray:
        return inverse_point(self.transform, _as_points(p))


def parameterize(transform) -> np.ndarray:
    """Flat optimization-parameter vector of a transform."""
    if not hasattr(transform, "parameters"):
        raise TypeError(f"{type(transform).__name__} is not parameterizable")
    return transform.parameters()


def deparameterize(template, vector):
    """Rebuild a transform of the template's kind from a flat vector.

    Structural attributes (center, FFD grid layout) come from the
    template; only optimization parameters are replaced.
    """
    if not hasattr(template, "with_parameters"):
        raise TypeError(f"{type(template).__name__} is not parameterizable")
    return template.with_parameters(vector)


_KINDS = {"rigid", "affine", "flip_lr", "bspline_ffd", "composite"}


def transform_from_dict(d: dict):
    """Inverse of the transforms' ``to_dict`` serialization."""
    kind = d.get("kind")
    if kind not in _KINDS:
        raise ValueError(f"unknown transform kind {kind!r}")
    if kind == "rigid":
        return RigidTransform2D(d["angle"], tuple(d["translation"]), tuple(d["center"]))
    if kind == "affine":
        return AffineTransform2D(np.array(d["matrix"]).reshape(2, 2),
                                 tuple(d["translation"]), tuple(d["center"]))
    if kind == "flip_lr":
        return FlipLR(d["axis_x"])
    if kind == "bspline_ffd":
        nx, ny = d["grid_size"]
        coeffs = np.array(d["coefficients"]).reshape(2, ny, nx)
        return BSplineFFD2D((nx, ny), tuple(d["spacing"]), tuple(d["origin"]), coeffs)
    return CompositeTransform2D(tuple(transform_from_dict(s) for s in d["stages"]))


def save_transform(transform, path):
    with open(path, "w") as fh:
        json.dump(transform.to_dict(), fh, indent=1)


def load_transform(path):
    with open(path) as fh:
        return transform_from_dict(json.load(fh))
