"""Boundary-curve post-processing: smoothing, gradient snapping, flattening."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import make_smoothing_spline

from .errors import InputError, ParameterError
from .nodes import ImageSlice

REGRESSION_WINDOW = 31
MAD_FACTOR = 3.0


def _local_quadratic(x_data, y_data, x_eval, window):
    """Local weighted quadratic regression with tri-cube weights."""
    half = (window - 1) / 2.0
    out = np.empty(x_eval.size)
    for i, x0 in enumerate(x_eval):
        d = np.abs(x_data - x0)
        sel = d <= half
        xs, ys = x_data[sel], y_data[sel]
        w = (1.0 - (d[sel] / (half + 1.0)) ** 3) ** 3
        t = xs - x0
        if xs.size >= 3:
            A = np.stack([np.ones_like(t), t, t * t], axis=1)
        elif xs.size == 2:
            A = np.stack([np.ones_like(t), t], axis=1)
        elif xs.size == 1:
            out[i] = ys[0]
            continue
        else:
            out[i] = np.nan
            continue
        Aw = A * w[:, None]
        coef, *_ = np.linalg.lstsq(Aw, ys * w, rcond=None)
        out[i] = coef[0]
    return out


def smooth_curve(values: np.ndarray, window: int = REGRESSION_WINDOW,
                 mad_factor: float = MAD_FACTOR,
                 spline_lam: float | None = None) -> np.ndarray:
    """Fill gaps and smooth a per-column curve.

    Steps: linear interpolation over NaN gaps, cubic smoothing spline
    (generalized cross-validation when ``spline_lam`` is None), then local
    weighted quadratic regression with tri-cube weights.  Columns deviating
    from the first regression pass by more than ``mad_factor`` median
    absolute deviations are discarded before the final pass.
    """
    v = np.asarray(values, dtype=float).ravel()
    n = v.size
    finite = np.isfinite(v)
    if finite.sum() < 4:
        raise InputError(f"need at least 4 points, got {int(finite.sum())}")
    x = np.arange(n, dtype=float)
    dense = np.interp(x, x[finite], v[finite])
    spline = make_smoothing_spline(x, dense, lam=spline_lam)
    sm = np.asarray(spline(x), dtype=float)

    fit1 = _local_quadratic(x, sm, x, window)
    resid = sm - fit1
    mad = np.median(np.abs(resid - np.median(resid)))
    if mad > 1e-12:
        keep = np.abs(resid - np.median(resid)) <= mad_factor * mad
    else:
        keep = np.ones(n, dtype=bool)
    if keep.sum() < 4:
        keep = np.ones(n, dtype=bool)
    out = _local_quadratic(x[keep], sm[keep], x, window)
    bad = ~np.isfinite(out)
    if bad.any():  # evaluation columns farther than the window from any inlier
        out[bad] = np.interp(x[bad], x[~bad], out[~bad])
    return out


def gradient_refine(image: ImageSlice | np.ndarray, curve: np.ndarray,
                    half_window: int = 10, mode: str = "brightest",
                    resmooth: bool = True, window: int = REGRESSION_WINDOW):
    """Snap a dense curve to the extreme vertical gradient near it.

    For each column the curve is re-positioned at the row with the extreme
    central-difference gradient (maximum for ``brightest``, minimum for
    ``darkest``) within ``half_window`` rows of the current position, offset
    by half a pixel to the interface between rows, then re-smoothed.
    Windows leaving the image are clamped and flagged.

    Returns (refined_curve, clamped_mask).
    """
    I = image.intensities if isinstance(image, ImageSlice) else np.asarray(image)
    if half_window < 1:
        raise ParameterError("half_window must be >= 1")
    rows, cols = I.shape
    c = np.asarray(curve, dtype=float)
    if c.size != cols:
        raise InputError("curve length must match image columns")
    g = np.gradient(I, axis=0)
    center = np.clip(np.round(c).astype(int), 0, rows - 1)
    lo = center - half_window
    hi = center + half_window
    clamped = (lo < 0) | (hi > rows - 1)
    lo = np.clip(lo, 0, rows - 1)
    hi = np.clip(hi, 0, rows - 1)

    refined = np.empty(cols)
    sign = 1.0 if mode == "brightest" else -1.0
    if mode not in ("brightest", "darkest"):
        raise ParameterError(f"unknown gradient mode {mode!r}")
    for col in range(cols):
        seg = g[lo[col]:hi[col] + 1, col] * sign
        refined[col] = lo[col] + int(np.argmax(seg)) + 0.5
    if resmooth:
        refined = smooth_curve(refined, window=window)
    return refined, clamped


def detect_outer_surfaces(image: ImageSlice | np.ndarray, surface7: np.ndarray,
                          signs=(-1, 1, -1, -1), step_window: int = 10,
                          window: int = REGRESSION_WINDOW):
    """Locate the four surfaces below surface 7 by sequential gradient search.

    Starting from surface 7, each next surface is the extreme-gradient row
    (sign given per surface) within ``step_window`` rows strictly below the
    previous surface.  Ordering is enforced; searches that hit the bottom
    of the image are clamped and flagged.

    Returns (curves, flags): a dict {"8": ..., "11": ...} of smoothed
    curves and a dict of clamped-column masks.
    """
    I = image.intensities if isinstance(image, ImageSlice) else np.asarray(image)
    rows, cols = I.shape
    g = np.gradient(I, axis=0)
    prev = np.asarray(surface7, dtype=float)
    curves, flags = {}, {}
    for sid, sign in zip(("8", "9", "10", "11"), signs):
        # Start two rows down so the previous surface's own gradient tail
        # cannot win the search.
        lo = np.clip(np.floor(prev).astype(int) + 2, 0, rows - 1)
        hi = lo + step_window - 1
        clamped = hi > rows - 1
        hi = np.clip(hi, 0, rows - 1)
        found = np.empty(cols)
        for col in range(cols):
            seg = g[lo[col]:hi[col] + 1, col] * sign
            found[col] = lo[col] + int(np.argmax(seg)) + 0.5
        sm = smooth_curve(found, window=window)
        sm = np.maximum(sm, prev)  # non-crossing
        curves[sid] = sm
        flags[sid] = clamped
        prev = sm
    return curves, flags


@dataclass(frozen=True)
class AlignmentRecord:
    """Per-column integer vertical shifts applied during flattening.

    A positive shift moves a column's content downward.  Applying
    ``unshift_curve`` after ``shift_curve`` restores coordinates exactly.
    """

    shifts: np.ndarray
    target_row: int

    def shift_curve(self, curve: np.ndarray) -> np.ndarray:
        return curve + self.shifts

    def unshift_curve(self, curve: np.ndarray) -> np.ndarray:
        return curve - self.shifts


def flatten(image: ImageSlice, surface10: np.ndarray):
    """Shift each column so a reference surface becomes horizontal.

    The target row is the rounded mean of the surface; every column moves
    by the rounded offset to that target, with vacated pixels set to 0.

    Returns (aligned ImageSlice, AlignmentRecord).
    """
    I = image.intensities
    rows, cols = I.shape
    s = np.asarray(surface10, dtype=float)
    target = int(np.round(np.nanmean(s)))
    shifts = np.round(target - s).astype(int)
    out = np.zeros_like(I)
    for col in range(cols):
        d = shifts[col]
        if d == 0:
            out[:, col] = I[:, col]
        elif d > 0:
            out[d:, col] = I[: rows - d, col]
        else:
            out[:rows + d, col] = I[-d:, col]
    return ImageSlice(out, spacing=image.spacing), AlignmentRecord(shifts=shifts,
                                                                   target_row=target)


def unflatten(aligned: ImageSlice, record: AlignmentRecord) -> ImageSlice:
    """Invert :func:`flatten`; pixels shifted out of bounds come back as 0."""
    I = aligned.intensities
    rows, cols = I.shape
    out = np.zeros_like(I)
    for col in range(cols):
        d = record.shifts[col]
        if d == 0:
            out[:, col] = I[:, col]
        elif d > 0:
            out[: rows - d, col] = I[d:, col]
        else:
            out[-d:, col] = I[: rows + d, col]
    return ImageSlice(out, spacing=aligned.spacing)


def split_left_right(surface1: np.ndarray, cols: int) -> int:
    """Column at which to split the image for the second-stage maps.

    If the deepest point of the first surface (the central dip; rows grow
    downward) falls inside the central third, split there; otherwise use
    the middle of the x-axis.
    """
    s = np.asarray(surface1, dtype=float)
    if not np.isfinite(s).any() or np.ptp(s[np.isfinite(s)]) < 1e-9:
        return cols // 2
    cand = int(np.nanargmax(s))
    if cols / 3.0 <= cand <= 2.0 * cols / 3.0:
        return cand
    return cols // 2
