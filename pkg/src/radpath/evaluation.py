"""Accuracy metrics for registered cases and the rank-sum comparison.

Per-slice overlap (Dice), boundary distance (Hausdorff), landmark and
urethra deviations, plus a two-sided Mann-Whitney U test used to compare
metric samples between processing stages.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from .image import (EmptyRegionError, GridMismatchError, LabelMask2D,
                    PointSet2D, center_of_mass)


@dataclass
class MetricReport:
    """Aggregated per-case metrics with their per-slice breakdown."""

    case_id: str = ""
    per_slice_dice: list = field(default_factory=list)
    per_slice_hausdorff_mm: list = field(default_factory=list)
    dice: float = float("nan")
    hausdorff_mm: float = float("nan")
    urethra_dev_mm: float = float("nan")
    landmark_dev_mm: float = float("nan")
    n_slices: int = 0
    n_landmarks: int = 0

    def as_row(self) -> dict:
        return {"case_id": self.case_id, "dice": self.dice,
                "hausdorff_mm": self.hausdorff_mm,
                "urethra_dev_mm": self.urethra_dev_mm,
                "landmark_dev_mm": self.landmark_dev_mm,
                "n_slices": self.n_slices, "n_landmarks": self.n_landmarks}


CSV_COLUMNS = ["case_id", "dice", "hausdorff_mm", "urethra_dev_mm",
               "landmark_dev_mm", "n_slices", "n_landmarks"]


def write_metric_rows(path, reports):
    """One CSV row per case, columns fixed by :data:`CSV_COLUMNS`."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in reports:
            writer.writerow(r.as_row())


def dice(a: LabelMask2D, b: LabelMask2D, label: int | None = None) -> float:
    """Overlap coefficient 2|A & B| / (|A| + |B|).

    Two empty masks agree vacuously (1.0); exactly one empty gives 0.0.
    """
    if a.grid != b.grid:
        raise GridMismatchError("dice requires masks on the same grid")
    if label is None:
        fa, fb = a.values > 0, b.values > 0
    else:
        fa, fb = a.values == label, b.values == label
    na, nb = int(fa.sum()), int(fb.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((fa & fb).sum()) / (na + nb)


def dice_case(masks_a, masks_b, label: int | None = None) -> float:
    """Mean of per-slice Dice over matched slice lists."""
    masks_a, masks_b = list(masks_a), list(masks_b)
    if len(masks_a) != len(masks_b):
        raise ValueError("slice counts differ")
    if not masks_a:
        raise ValueError("no slices to evaluate")
    return float(np.mean([dice(a, b, label) for a, b in zip(masks_a, masks_b)]))


def boundary_points_mm(mask: LabelMask2D, label: int | None = None) -> np.ndarray:
    """Physical coordinates of foreground pixels 4-adjacent to background."""
    fg = (mask.values > 0) if label is None else (mask.values == label)
    if not fg.any():
        raise EmptyRegionError("mask has no foreground pixels")
    padded = np.pad(fg, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
                padded[1:-1, :-2] & padded[1:-1, 2:])
    boundary = fg & ~interior
    rows, cols = np.nonzero(boundary)
    xs, ys = mask.grid.index_to_physical(cols, rows)
    return np.column_stack([xs, ys])


def hausdorff_boundary(a: LabelMask2D, b: LabelMask2D) -> float:
    """Symmetric Hausdorff distance (mm) between mask boundaries."""
    pa = boundary_points_mm(a)
    pb = boundary_points_mm(b)
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


def _match_points(lh: PointSet2D, lm: PointSet2D):
    if lh.labels is None or lm.labels is None:
        n = min(len(lh), len(lm))
        return lh.points[:n], lm.points[:n]
    index = {lab: i for i, lab in enumerate(lm.labels)}
    pairs = [(lh.points[i], lm.points[index[lab]])
             for i, lab in enumerate(lh.labels) if lab in index]
    if not pairs:
        return np.empty((0, 2)), np.empty((0, 2))
    ph, pm = zip(*pairs)
    return np.array(ph), np.array(pm)


def landmark_deviation(lh_per_slice, lm_per_slice) -> float:
    """Mean Euclidean distance (mm) over label-matched landmark pairs.

    Inputs are per-slice point sets already expressed in the same
    (MRI) physical frame; pairing is by landmark label within a slice.
    """
    dists = []
    for lh, lm in zip(lh_per_slice, lm_per_slice):
        if lh is None or lm is None or len(lh) == 0 or len(lm) == 0:
            continue
        ph, pm = _match_points(lh, lm)
        if len(ph):
            dists.extend(np.linalg.norm(ph - pm, axis=1))
    if not dists:
        raise EmptyRegionError("no matched landmark pairs")
    return float(np.mean(dists))


def urethra_deviation(u_hist_per_slice, u_mri_per_slice) -> tuple[float, int]:
    """Mean center-of-mass distance (mm) over slices annotated on both sides.

    Returns the mean and the number of qualifying slices; slices missing
    either annotation are skipped.
    """
    dists = []
    for uh, um in zip(u_hist_per_slice, u_mri_per_slice):
        if uh is None or um is None:
            continue
        if not (uh.values > 0).any() or not (um.values > 0).any():
            continue
        ch = np.array(center_of_mass(uh))
        cm = np.array(center_of_mass(um))
        dists.append(float(np.linalg.norm(ch - cm)))
    if not dists:
        raise EmptyRegionError("no slices with urethra annotated on both sides")
    return float(np.mean(dists)), len(dists)


def mann_whitney_u(sample_a, sample_b) -> dict:
    """Two-sided Mann-Whitney U test via the normal approximation.

    Ranks use midranks for ties; the variance is tie-corrected and a
    0.5 continuity correction is applied. Degenerate samples (all
    values identical) give p = 1.0.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    n1, n2 = a.size, b.size
    combined = np.concatenate([a, b])
    ranks = rankdata(combined)
    r1 = ranks[:n1].sum()
    u1 = r1 - n1 * (n1 + 1) / 2.0
    n = n1 + n2
    _, counts = np.unique(combined, return_counts=True)
    tie_term = float(np.sum(counts.astype(np.float64) ** 3 - counts))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1))) if n > 1 else 0.0
    mean_u = n1 * n2 / 2.0
    if var <= 0.0:
        return {"U": float(u1), "p": 1.0}
    z = (u1 - mean_u - 0.5 * np.sign(u1 - mean_u)) / math.sqrt(var)
    p = 2.0 * 0.5 * math.erfc(abs(z) / math.sqrt(2.0))
    return {"U": float(u1), "p": float(min(p, 1.0))}
