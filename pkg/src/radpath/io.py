"""File readers and writers: NIfTI-1 volumes, PNG/TIFF slices, landmark JSON.

The NIfTI support is a minimal self-contained implementation for
axis-aligned volumes (positive-diagonal affine): enough to round-trip
spacing and origin for scalar and label volumes, plus a 4D variant for
RGB stacks. 2D histology images and masks travel as PNG or TIFF with
pixel spacing supplied externally by the case manifest, since those
formats carry none.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .image import Grid2D, LabelMask2D, PointSet2D, RgbImage2D, ScalarVolume3D

_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32,
           64: np.float64, 256: np.int8, 512: np.uint16, 768: np.uint32}
_CODES = {np.dtype(v).name: k for k, v in _DTYPES.items()}


def _open_maybe_gzip(path, mode):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def write_nifti(volume: ScalarVolume3D, path, dtype=None) -> None:
    """Write a volume as NIfTI-1 (.nii or .nii.gz) with an axis-aligned sform."""
    values = np.asarray(volume.values)
    if dtype is None:
        if np.issubdtype(values.dtype, np.integer):
            vmax = values.max() if values.size else 0
            dtype = np.uint8 if 0 <= values.min() and vmax < 256 else np.int32
        else:
            dtype = np.float32
    data = values.astype(dtype)
    rgb = data.ndim == 4
    nz, ny, nx = data.shape[:3]
    dim = [4 if rgb else 3, nx, ny, nz, data.shape[3] if rgb else 1, 1, 1, 1]
    sx, sy, sz = volume.spacing
    ox, oy, oz = volume.origin
    code = _CODES[np.dtype(dtype).name]
    bitpix = np.dtype(dtype).itemsize * 8

    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<hh", header, 70, code, bitpix)
    struct.pack_into("<8f", header, 76, 1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, 352.0)       # vox_offset
    struct.pack_into("<ff", header, 112, 1.0, 0.0)   # scl_slope, scl_inter
    struct.pack_into("<hh", header, 252, 0, 1)       # qform_code, sform_code
    struct.pack_into("<4f", header, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", header, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", header, 312, 0.0, 0.0, sz, oz)
    header[344:348] = b"n+1\x00"

    if rgb:  # disk order x, y, z, channel (channel slowest)
        payload = np.ascontiguousarray(np.moveaxis(data, 3, 0)).tobytes()
    else:
        payload = data.tobytes()
    with _open_maybe_gzip(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(b"\x00" * 4)  # no extensions
        fh.write(payload)


def read_nifti(path) -> ScalarVolume3D:
    """Read an axis-aligned NIfTI-1 volume (3D scalar/label or 4D RGB)."""
    with _open_maybe_gzip(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 352:
        raise ValueError(f"{path}: not a NIfTI-1 file (too short)")
    if struct.unpack_from("<i", raw, 0)[0] != 348:
        raise ValueError(f"{path}: not a little-endian NIfTI-1 file")
    dim = struct.unpack_from("<8h", raw, 40)
    code, _ = struct.unpack_from("<hh", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    slope, inter = struct.unpack_from("<ff", raw, 112)
    sform_code = struct.unpack_from("<h", raw, 254)[0]
    if code not in _DTYPES:
        raise ValueError(f"{path}: unsupported NIfTI datatype {code}")
    ndim = dim[0]
    if ndim not in (3, 4):
        raise ValueError(f"{path}: expected a 3D or 4D volume, got dim[0]={ndim}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    nc = dim[4] if ndim == 4 else 1

    if sform_code > 0:
        sr = [struct.unpack_from("<4f", raw, off) for off in (280, 296, 312)]
        m = np.array([r[:3] for r in sr])
        if np.max(np.abs(m - np.diag(np.diag(m)))) > 1e-4 * max(1.0, np.abs(m).max()):
            raise ValueError(f"{path}: only axis-aligned volumes are supported")
        spacing = tuple(float(m[i, i]) for i in range(3))
        origin = tuple(float(sr[i][3]) for i in range(3))
    else:
        spacing = (float(pixdim[1]), float(pixdim[2]), float(pixdim[3]))
        origin = (0.0, 0.0, 0.0)
    if any(s <= 0 for s in spacing):
        raise ValueError(f"{path}: expected positive axis-aligned spacing, got {spacing}")

    dtype = _DTYPES[code]
    count = nx * ny * nz * nc
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    if ndim == 4:
        values = np.moveaxis(data.reshape(nc, nz, ny, nx), 0, 3)
    else:
        values = data.reshape(nz, ny, nx)
    if slope not in (0.0, 1.0) or inter != 0.0:
        values = values * (slope if slope != 0.0 else 1.0) + inter
    return ScalarVolume3D(values.copy(), spacing, origin)


def write_rgb_image(image: RgbImage2D, path) -> None:
    arr = np.clip(np.round(image.values), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def write_mask_image(mask: LabelMask2D, path) -> None:
    if mask.values.max() > 255:
        raise ValueError("PNG/TIFF masks support labels up to 255")
    Image.fromarray(mask.values.astype(np.uint8), mode="L").save(path)


def read_rgb_image(path, spacing, origin=(0.0, 0.0)) -> RgbImage2D:
    """Read a PNG/TIFF color image; spacing (mm/px) comes from the manifest."""
    img = Image.open(path).convert("RGB")
    arr = np.asarray(img, dtype=np.float64)
    grid = Grid2D(arr.shape[1], arr.shape[0], spacing, origin)
    return RgbImage2D(grid, arr)


def read_mask_image(path, spacing, origin=(0.0, 0.0)) -> LabelMask2D:
    img = Image.open(path)
    if img.mode not in ("L", "P", "I", "I;16", "1"):
        img = img.convert("L")
    arr = np.asarray(img)
    if arr.ndim != 2:
        arr = arr[..., 0]
    grid = Grid2D(arr.shape[1], arr.shape[0], spacing, origin)
    return LabelMask2D(grid, arr.astype(np.int32))


def write_landmarks(points: PointSet2D, path) -> None:
    """Landmark JSON: a list of {label, x_mm, y_mm} records."""
    labels = points.labels or [str(i) for i in range(len(points))]
    records = [{"label": lab, "x_mm": float(p[0]), "y_mm": float(p[1])}
               for lab, p in zip(labels, points.points)]
    with open(path, "w") as fh:
        json.dump(records, fh, indent=1)


def read_landmarks(path) -> PointSet2D:
    with open(path) as fh:
        records = json.load(fh)
    if not isinstance(records, list):
        raise ValueError(f"{path}: landmark file must hold a JSON list")
    pts = [(r["x_mm"], r["y_mm"]) for r in records]
    labels = [str(r["label"]) for r in records]
    return PointSet2D(np.array(pts, dtype=np.float64).reshape(-1, 2), tuple(labels))
