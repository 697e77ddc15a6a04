"""Border positioning and thickness error metrics against ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .surfaces import SurfaceSet, surface_sort_key


@dataclass
class ErrorReport:
    """Signed/unsigned border errors per surface, in pixels and micrometers.

    Positive signed error means the prediction lies deeper (larger row)
    than the truth.  ``overall`` pools every sample of every common
    surface; ``thickness_um`` holds the mean absolute error of the
    distances from the first surface to each other one.
    """

    surfaces: dict = field(default_factory=dict)
    overall: dict = field(default_factory=dict)
    thickness_um: dict = field(default_factory=dict)
    missing_columns: dict = field(default_factory=dict)
    axial_um_per_px: float = 1.0

    def to_dict(self) -> dict:
        return {
            "axial_um_per_px": self.axial_um_per_px,
            "surfaces": self.surfaces,
            "overall": self.overall,
            "thickness_um": self.thickness_um,
            "missing_columns": self.missing_columns,
        }


def _stats(diff_px: np.ndarray, axial: float) -> dict:
    signed = float(diff_px.mean())
    unsigned = float(np.abs(diff_px).mean())
    return {
        "signed_px": signed,
        "signed_sd_px": float(diff_px.std()),
        "unsigned_px": unsigned,
        "unsigned_sd_px": float(np.abs(diff_px).std()),
        "signed_um": signed * axial,
        "signed_sd_um": float(diff_px.std()) * axial,
        "unsigned_um": unsigned * axial,
        "unsigned_sd_um": float(np.abs(diff_px).std()) * axial,
        "n_samples": int(diff_px.size),
    }


def border_errors(pred: SurfaceSet, truth: SurfaceSet,
                  spacing_um: tuple | None = None) -> ErrorReport:
    """Mean and SD of signed and unsigned border positioning errors.

    Surfaces are matched by id; samples are compared where both sets are
    finite.  Samples with finite truth but missing prediction are excluded
    from the statistics and counted per surface.
    """
    spacing = spacing_um or truth.spacing_um
    axial = float(spacing[1])
    common = [s for s in pred.ids if s in truth.data]
    if not common:
        raise InputError("no common surface ids between prediction and truth")
    report = ErrorReport(axial_um_per_px=axial)
    pooled = []
    for sid in sorted(common, key=surface_sort_key):
        p = pred.data[sid]
        t = truth.data[sid]
        if p.shape != t.shape:
            raise InputError(f"surface {sid}: shape mismatch {p.shape} vs {t.shape}")
        both = np.isfinite(p) & np.isfinite(t)
        if not both.any():
            raise InputError(f"surface {sid}: disjoint column domains")
        diff = (p - t)[both]
        report.surfaces[sid] = _stats(diff, axial)
        report.missing_columns[sid] = int((np.isfinite(t) & ~np.isfinite(p)).sum())
        pooled.append(diff)
    report.overall = _stats(np.concatenate(pooled), axial)
    report.thickness_um = thickness_errors(pred, truth, spacing)
    return report


def thickness_errors(pred: SurfaceSet, truth: SurfaceSet,
                     spacing_um: tuple | None = None) -> dict:
    """Mean absolute error of the first-to-other surface distances, in um."""
    spacing = spacing_um or truth.spacing_um
    axial = float(spacing[1])
    common = [s for s in pred.ids if s in truth.data]
    if "1" not in common:
        return {}
    p1, t1 = pred.data["1"], truth.data["1"]
    out = {}
    for sid in sorted(common, key=surface_sort_key):
        if sid == "1":
            continue
        p, t = pred.data[sid], truth.data[sid]
        both = (np.isfinite(p) & np.isfinite(t)
                & np.isfinite(p1) & np.isfinite(t1))
        if not both.any():
            raise InputError(f"surface {sid}: disjoint column domains")
        d = (p[both] - p1[both]) - (t[both] - t1[both])
        out[f"1-{sid}"] = float(np.abs(d).mean()) * axial
    return out


def stage1_band_purity(assign: np.ndarray, centroids: np.ndarray,
                       truth: SurfaceSet, z_index: int = 0) -> float:
    """Fraction of nodes whose cluster matches their true coarse region.

    Regions are: above the first surface, between the first surface and
    surface 7, and below surface 7.  Node region labels come from the
    centroid row against the truth curves at the centroid column.
    """
    s1 = truth.data["1"][z_index]
    s7 = truth.data["7"][z_index]
    rows = centroids[:, 0]
    cols = np.clip(centroids[:, 1].astype(int), 0, s1.size - 1)
    labels = np.zeros(rows.size, dtype=int)
    labels[rows >= s1[cols]] = 1
    labels[rows >= s7[cols]] = 2
    k = int(assign.max()) + 1
    correct = 0
    for c in range(k):
        members = labels[assign == c]
        if members.size:
            correct += int(np.bincount(members, minlength=3).max())
    return correct / rows.size
