"""Surface sets: per-column boundary positions with provenance."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

SURFACE_ORDER = ("1", "2", "3", "4", "5", "6", "6a", "7", "8", "9", "10", "11")

PROV_CLUSTERED = 0
PROV_GRADIENT = 1
PROV_INTERPOLATED = 2
PROV_NAMES = {PROV_CLUSTERED: "clustered",
              PROV_GRADIENT: "gradient_refined",
              PROV_INTERPOLATED: "interpolated"}
PROV_CODES = {v: k for k, v in PROV_NAMES.items()}


def surface_sort_key(surface_id: str) -> int:
    try:
        return SURFACE_ORDER.index(surface_id)
    except ValueError:
        raise InputError(f"unknown surface id {surface_id!r}") from None


@dataclass
class SurfaceSet:
    """Row positions of named surfaces over a (z, column) lattice.

    2D results use a single z index.  ``data[id]`` is float (nz, ncols) with
    NaN marking columns outside the analyzed region; ``provenance[id]``
    carries a per-sample origin code.  Rows are fractional pixels along the
    axial direction; ``spacing_um`` (x, y, z) converts them to micrometers
    via the axial (y) component.
    """

    data: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    spacing_um: tuple = (1.0, 1.0, 1.0)

    @property
    def ids(self):
        return sorted(self.data.keys(), key=surface_sort_key)

    @property
    def shape(self):
        for arr in self.data.values():
            return arr.shape
        return (0, 0)

    def set(self, surface_id: str, rows: np.ndarray, prov) -> None:
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if np.isscalar(prov) or isinstance(prov, int):
            p = np.full(rows.shape, prov, dtype=np.uint8)
        else:
            p = np.atleast_2d(np.asarray(prov, dtype=np.uint8))
        if p.shape != rows.shape:
            raise InputError("provenance shape mismatch")
        self.data[surface_id] = rows
        self.provenance[surface_id] = p

    def rows(self, surface_id: str) -> np.ndarray:
        return self.data[surface_id]

    def enforce_ordering(self, eps: float = 0.0) -> None:
        """Clamp rows so anatomical order is non-decreasing per column."""
        prev = None
        for sid in self.ids:
            arr = self.data[sid]
            if prev is not None:
                np.fmax(arr, prev + eps, out=arr)
            prev = arr

    def ordering_violations(self) -> int:
        """Count samples where a surface lies above its predecessor."""
        bad = 0
        prev = None
        for sid in self.ids:
            arr = self.data[sid]
            if prev is not None:
                both = np.isfinite(arr) & np.isfinite(prev)
                bad += int((arr[both] < prev[both] - 1e-9).sum())
            prev = arr
        return bad

    def to_records(self):
        """Yield (surface_id, z, column, row, provenance_name) sorted rows."""
        for sid in self.ids:
            arr = self.data[sid]
            prov = self.provenance[sid]
            nz, nc = arr.shape
            for z in range(nz):
                finite = np.isfinite(arr[z])
                for c in np.nonzero(finite)[0]:
                    yield sid, z, int(c), float(arr[z, c]), PROV_NAMES[int(prov[z, c])]
