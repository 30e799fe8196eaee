"""Case manifests: the dictionary that binds one case's files together.

A manifest is a JSON document naming the MRI volume, its prostate mask,
and one record per histology slice (image, masks, optional labels and
landmarks, the corresponding MRI slice index, expert-declared gross
rotation/flip, and the slide pixel spacing). Paths are resolved
relative to the manifest file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


class ManifestError(ValueError):
    """Manifest failed schema validation; the message names the field."""


@dataclass(frozen=True)
class SliceRecord:
    image: Path
    prostate_mask: Path
    mri_slice_index: int
    rotation_deg: float = 0.0
    flip_lr: bool = False
    pixel_spacing_mm: tuple[float, float] = (1.0, 1.0)
    cancer_mask: Path | None = None
    urethra_mask: Path | None = None
    landmarks: Path | None = None


@dataclass(frozen=True)
class CaseManifest:
    case_id: str
    mri_t2: Path
    mri_prostate_mask: Path
    slices: tuple[SliceRecord, ...]
    profile_overrides: dict = field(default_factory=dict)

    @property
    def n_slices(self) -> int:
        return len(self.slices)


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ManifestError(f"{where}: missing required field {key!r}")
    return mapping[key]


def _spacing_pair(value, where: str) -> tuple[float, float]:
    if isinstance(value, (int, float)):
        value = (value, value)
    try:
        sx, sy = float(value[0]), float(value[1])
    except (TypeError, ValueError, IndexError):
        raise ManifestError(f"{where}: pixel_spacing_mm must be a number or [x, y]") from None
    if sx <= 0 or sy <= 0:
        raise ManifestError(f"{where}: pixel_spacing_mm must be positive, got {value}")
    return (sx, sy)


def parse_manifest(path) -> CaseManifest:
    """Load and validate a case manifest.

    Raises :class:`ManifestError` naming the offending field for missing
    entries, duplicate MRI slice indices, or indices out of order.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    base = path.parent

    case_id = str(_require(doc, "case_id", str(path)))
    mri = _require(doc, "mri", case_id)
    mri_t2 = base / _require(mri, "t2", f"{case_id}.mri")
    mri_mask = base / _require(mri, "prostate_mask", f"{case_id}.mri")
    histology = _require(doc, "histology", case_id)
    raw_slices = _require(histology, "slices", f"{case_id}.histology")
    if not raw_slices:
        raise ManifestError(f"{case_id}: histology.slices must contain at least one record")

    records = []
    for i, rec in enumerate(raw_slices):
        where = f"{case_id}.histology.slices[{i}]"
        records.append(SliceRecord(
            image=base / _require(rec, "image", where),
            prostate_mask=base / _require(rec, "prostate_mask", where),
            mri_slice_index=int(_require(rec, "mri_slice_index", where)),
            rotation_deg=float(rec.get("rotation_deg", 0.0)),
            flip_lr=bool(rec.get("flip_lr", False)),
            pixel_spacing_mm=_spacing_pair(_require(rec, "pixel_spacing_mm", where), where),
            cancer_mask=(base / rec["cancer_mask"]) if rec.get("cancer_mask") else None,
            urethra_mask=(base / rec["urethra_mask"]) if rec.get("urethra_mask") else None,
            landmarks=(base / rec["landmarks"]) if rec.get("landmarks") else None,
        ))

    indices = [r.mri_slice_index for r in records]
    seen = set()
    for idx in indices:
        if idx in seen:
            raise ManifestError(f"{case_id}: duplicate mri_slice_index {idx}")
        seen.add(idx)
    if any(b <= a for a, b in zip(indices, indices[1:])):
        raise ManifestError(f"{case_id}: mri_slice_index values must be strictly increasing, got {indices}")
    if min(indices) < 0:
        raise ManifestError(f"{case_id}: mri_slice_index must be non-negative")

    overrides = doc.get("profile", {})
    if not isinstance(overrides, dict):
        raise ManifestError(f"{case_id}: profile overrides must be an object")
    return CaseManifest(case_id, mri_t2, mri_mask, tuple(records), dict(overrides))


def write_manifest(manifest: CaseManifest, path) -> None:
    """Serialize a manifest with paths relative to its new location."""
    base = Path(path).parent

    def rel(p):
        p = Path(p)
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    doc = {
        "case_id": manifest.case_id,
        "mri": {"t2": rel(manifest.mri_t2), "prostate_mask": rel(manifest.mri_prostate_mask)},
        "histology": {"slices": []},
    }
    if manifest.profile_overrides:
        doc["profile"] = manifest.profile_overrides
    for rec in manifest.slices:
        entry = {
            "image": rel(rec.image),
            "prostate_mask": rel(rec.prostate_mask),
            "mri_slice_index": rec.mri_slice_index,
            "rotation_deg": rec.rotation_deg,
            "flip_lr": rec.flip_lr,
            "pixel_spacing_mm": list(rec.pixel_spacing_mm),
        }
        if rec.cancer_mask:
            entry["cancer_mask"] = rel(rec.cancer_mask)
        if rec.urethra_mask:
            entry["urethra_mask"] = rel(rec.urethra_mask)
        if rec.landmarks:
            entry["landmarks"] = rel(rec.landmarks)
        doc["histology"]["slices"].append(entry)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
