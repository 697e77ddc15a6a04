"""Synthetic layered phantoms with known ground-truth surfaces.

A phantom is a stack of constant-intensity bands separated by smooth
boundary curves (low-frequency sinusoid, optional central dip, linear
drift), corrupted by multiplicative gamma speckle and additive Gaussian
noise.  The generator also supports vessel-like shadow stripes, a dark
canal cylinder (3D), a localized pathology bump (3D), and merged bands.
Generation is fully deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ParameterError
from .nodes import ImageSlice, Volume
from .surfaces import SURFACE_ORDER, PROV_CLUSTERED, SurfaceSet

# Region intensities top to bottom, including background above and below.
# Tuned so that: the three coarse regions (dark above / mixed inner bands /
# uniformly bright complex and floor) are well separated at block scale;
# the faintest inner contrast sits between regions 2-3 and 3-4; the five
# clear inner contrasts are close in strength (their split modes then
# cluster above the within-band bulk, where the eigenvalue elbow needs
# them) yet not equal (equal couplings would turn the band chain into a
# path graph whose smooth cosine modes cluster badly); bands are thicker
# than the kernel ball so second-neighbour bands (which may repeat values)
# never couple; and the outer interfaces alternate strong bright/dark
# pixel steps for the gradient searches.
STANDARD_BANDS = (0.05, 0.58, 0.30, 0.36, 0.12, 0.39, 0.14, 0.40,
                  0.88, 0.64, 0.86, 0.62, 0.84)

STANDARD_THICKNESS_2D = (60, 62, 56, 62, 62, 62, 16, 10, 9, 10, 9)
STANDARD_THICKNESS_3D = (42, 40, 40, 62, 62, 62, 16, 10, 9, 10, 9)


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, intensity, and noise description of a phantom."""

    kind: str = "2d"                      # "2d" or "3d"
    rows: int = 650                       # 2d: image rows (axial)
    cols: int = 512                       # 2d: image columns
    dims: tuple = (128, 512, 128)         # 3d: (x, y, z)
    spacing_um: tuple = (13.67, 4.81, 24.41)
    surface_ids: tuple = SURFACE_ORDER
    top_margin: float = 120.0             # mean row of the first surface
    thicknesses: tuple = STANDARD_THICKNESS_2D
    bands: tuple = STANDARD_BANDS
    fade_start: float | None = None       # optional ramp below the last surface
    fade_depth: float = 70.0              # px over which the ramp reaches background
    wave_amp: float = 0.8
    wave_period: float = 64.0
    wave_phase: float = 0.8
    dip_amp: float = 12.0
    dip_sigma: float = 55.0
    drift_per_col: float = 0.004
    noise_sigma: float = 0.05
    speckle_shape: float | None = 4.0
    speckle_grain: int = 1
    shadows: tuple = ()                   # (center_col, width, attenuation)
    canal: tuple | None = None            # 3d: (cx, cz, semi_x, semi_z, value)
    bump: tuple | None = None             # 3d: (z0, sigma_z, amplitude)


@dataclass(frozen=True)
class Phantom:
    """A generated phantom with its ground-truth surfaces."""

    spec: PhantomSpec
    seed: int
    truth: SurfaceSet
    image: ImageSlice | None = None
    volume: Volume | None = None


def standard_2d_spec(**overrides) -> PhantomSpec:
    """The standard 12-surface 2D phantom (650 x 512, realistic noise)."""
    return replace(PhantomSpec(), **overrides)


def standard_3d_spec(**overrides) -> PhantomSpec:
    """The standard 12-surface 3D phantom (128 x 512 x 128)."""
    base = PhantomSpec(kind="3d", dims=(128, 512, 128), top_margin=36.0,
                       thicknesses=STANDARD_THICKNESS_3D,
                       dip_amp=0.0, wave_amp=0.8, wave_period=48.0,
                       drift_per_col=0.004)
    return replace(base, **overrides)


def control_2d_spec(**overrides) -> PhantomSpec:
    """Variant whose lowest inner surface sits nearer its upper neighbour.

    All inner contrasts are clear, so the clustering finds every boundary
    directly and the automatic protocol takes its no-action path.
    """
    bands = list(STANDARD_BANDS)
    bands[3] = 0.52                   # clear 2-3 vs 3-4 contrast
    thick = [50, 62, 56, 62, 62, 62, 66, 10, 9, 10, 9]
    return replace(PhantomSpec(bands=tuple(bands), thicknesses=tuple(thick)),
                   **overrides)


def merged_2d_spec(**overrides) -> PhantomSpec:
    """Two band pairs share intensities, hiding two inner surfaces."""
    bands = list(STANDARD_BANDS)
    bands[3] = bands[2]   # hide surface 3
    bands[5] = bands[4]   # hide surface 5
    bands[6], bands[7] = 0.32, 0.10   # keep the remaining contrasts clear
    return replace(PhantomSpec(bands=tuple(bands)), **overrides)


def sixband_2d_spec(**overrides) -> PhantomSpec:
    """Six clearly separable bands inside the region of interest (no 6a)."""
    ids = tuple(s for s in SURFACE_ORDER if s != "6a")
    bands = (0.05, 0.58, 0.30, 0.52, 0.12, 0.39, 0.14,
             0.88, 0.64, 0.86, 0.62, 0.84)
    thick = (64, 62, 60, 62, 62, 70, 10, 9, 10, 9)
    return replace(PhantomSpec(surface_ids=ids, bands=bands, thicknesses=thick),
                   **overrides)


def banded_spec(c: int, rows: int | None = None, cols: int = 200,
                band_px: int = 50, **overrides) -> PhantomSpec:
    """``c`` separable horizontal bands filling the whole image.

    Band intensities interleave the low and high halves of an intensity
    ramp so adjacent bands stay well separated for every c.
    """
    if c < 2:
        raise ParameterError("need at least 2 bands")
    # Alternate up/down with strictly decreasing step sizes: adjacent bands
    # stay far apart, every gap is distinct, and with 50 px bands no two
    # non-adjacent bands fall inside one kernel radius.
    vals = [0.10]
    step, sign = 0.72, 1.0
    for _ in range(c - 1):
        vals.append(vals[-1] + sign * step)
        step -= 0.07
        sign = -sign
    bands = tuple(round(v, 3) for v in vals)
    ids = tuple(SURFACE_ORDER[: c - 1])
    rows = rows or c * band_px
    # First band starts at the top edge; the last surface is placed so the
    # final band also spans band_px (no background regions).
    return replace(PhantomSpec(rows=rows, cols=cols, surface_ids=ids,
                               bands=(bands[0],) + bands[1:] + (bands[-1],),
                               top_margin=float(band_px),
                               thicknesses=(float(band_px),) * max(c - 2, 0),
                               fade_start=None, dip_amp=0.0, wave_amp=1.0,
                               wave_period=80.0, drift_per_col=0.0),
                   **overrides)


def three_band_spec(**overrides) -> PhantomSpec:
    """Dark / bright / dark bands; the middle band plays the retina."""
    return replace(PhantomSpec(rows=300, cols=260, surface_ids=("1", "7"),
                               bands=(0.08, 0.7, 0.12), top_margin=100.0,
                               thicknesses=(100.0,), fade_start=None,
                               dip_amp=0.0, wave_amp=2.0, wave_period=130.0,
                               drift_per_col=0.0),
                   **overrides)


def onh_3d_spec(**overrides) -> PhantomSpec:
    """3D phantom with a dark elliptical canal through all depths."""
    base = standard_3d_spec()
    return replace(base, canal=(64.0, 64.0, 14.0, 10.0, 0.06), **overrides)


def bump_3d_spec(**overrides) -> PhantomSpec:
    """3D phantom with a sharp bump between gradient-search slices."""
    base = standard_3d_spec()
    return replace(base, bump=(45.0, 2.5, 14.0), **overrides)


def with_shadows(spec: PhantomSpec, shadows=((80, 5, 0.45), (200, 8, 0.5),
                                             (330, 6, 0.45), (440, 8, 0.5))) -> PhantomSpec:
    """Add vertical vessel-shadow stripes (center, width <= 8 px, gain)."""
    return replace(spec, shadows=tuple(shadows))


def _base_rows(spec: PhantomSpec) -> np.ndarray:
    t = np.asarray(spec.thicknesses, dtype=float)
    if t.size != len(spec.surface_ids) - 1:
        raise ParameterError("thicknesses must have one entry per band between surfaces")
    return spec.top_margin + np.concatenate([[0.0], np.cumsum(t)])


def _curves_2d(spec: PhantomSpec) -> np.ndarray:
    base = _base_rows(spec)
    nsurf = base.size
    c = np.arange(spec.cols, dtype=float)
    curves = np.empty((nsurf, spec.cols))
    try:
        i7 = spec.surface_ids.index("7")
    except ValueError:
        i7 = nsurf - 1
    span = max(base[i7] - base[0], 1.0)
    wave = spec.wave_amp * np.sin(2 * np.pi * c / spec.wave_period + spec.wave_phase)
    dip = np.exp(-((c - (spec.cols - 1) / 2.0) ** 2) / (2 * spec.dip_sigma**2))
    drift = spec.drift_per_col * (c - (spec.cols - 1) / 2.0)
    for i in range(nsurf):
        inner = i < i7
        scale = (base[i7] - base[i]) / span if inner else 0.0
        curves[i] = base[i] + drift + (wave if inner else 0.0) \
            + spec.dip_amp * scale * dip
    return curves


def _curves_3d(spec: PhantomSpec) -> np.ndarray:
    base = _base_rows(spec)
    nsurf = base.size
    nx, _, nz = spec.dims
    x = np.arange(nx, dtype=float)
    z = np.arange(nz, dtype=float)
    try:
        i7 = spec.surface_ids.index("7")
    except ValueError:
        i7 = nsurf - 1
    span = max(base[i7] - base[0], 1.0)
    wave_x = spec.wave_amp * np.sin(2 * np.pi * x / spec.wave_period + spec.wave_phase)
    wave_z = 0.6 * spec.wave_amp * np.sin(2 * np.pi * z / (1.4 * spec.wave_period) + 0.3)
    dip_x = np.exp(-((x - (nx - 1) / 2.0) ** 2) / (2 * spec.dip_sigma**2))
    dip_z = np.exp(-((z - (nz - 1) / 2.0) ** 2) / (2 * spec.dip_sigma**2))
    drift = spec.drift_per_col * (x - (nx - 1) / 2.0)
    curves = np.empty((nsurf, nz, nx))
    bump = 0.0
    if spec.bump is not None:
        z0, sz, amp = spec.bump
        bump = amp * np.exp(-((z - z0) ** 2) / (2 * sz**2))[:, None]
    for i in range(nsurf):
        inner = i < i7
        scale = (base[i7] - base[i]) / span if inner else 0.0
        lateral = drift[None, :] + (wave_x[None, :] + wave_z[:, None] if inner else 0.0)
        curves[i] = base[i] + lateral + spec.dip_amp * scale * dip_x[None, :] * dip_z[:, None]
        curves[i] += bump
    return curves


def _validate_curves(curves: np.ndarray, axial_len: int) -> None:
    flat = curves.reshape(curves.shape[0], -1)
    sep = np.diff(flat, axis=0)
    if flat.shape[0] > 1 and sep.min() < 3.0 - 1e-9:
        raise ParameterError(
            f"bands cross or come closer than 3 px (min separation {sep.min():.2f})")
    if flat.min() < 1.0 or flat.max() > axial_len - 2:
        raise ParameterError("surfaces leave the axial extent of the phantom")


def _paint(curves: np.ndarray, axial_len: int, spec: PhantomSpec) -> np.ndarray:
    """Fill bands between the surfaces; axial axis is placed first."""
    bands = np.asarray(spec.bands, dtype=float)
    nsurf = curves.shape[0]
    if bands.size != nsurf + 1:
        raise ParameterError("bands must have one more entry than surfaces")
    y = np.arange(axial_len, dtype=float)
    if curves.ndim == 2:      # (nsurf, cols) -> image (rows, cols)
        idx = np.zeros((axial_len, curves.shape[1]), dtype=np.int16)
        for i in range(nsurf):
            idx += y[:, None] >= curves[i][None, :]
        img = bands[idx]
        if spec.fade_start is not None:
            depth = y[:, None] - curves[-1][None, :]
            frac = np.clip(depth / spec.fade_depth, 0.0, 1.0)
            fade = spec.fade_start + (bands[-1] - spec.fade_start) * frac
            img = np.where(idx == nsurf, fade, img)
        return img
    # (nsurf, nz, nx) -> volume [z, y, x]
    nz, nx = curves.shape[1:]
    idx = np.zeros((nz, axial_len, nx), dtype=np.int16)
    for i in range(nsurf):
        idx += y[None, :, None] >= curves[i][:, None, :]
    vol = bands[idx]
    if spec.fade_start is not None:
        depth = y[None, :, None] - curves[-1][:, None, :]
        frac = np.clip(depth / spec.fade_depth, 0.0, 1.0)
        fade = spec.fade_start + (bands[-1] - spec.fade_start) * frac
        vol = np.where(idx == nsurf, fade, vol)
    return vol


def _apply_noise(data: np.ndarray, spec: PhantomSpec, rng) -> np.ndarray:
    out = data
    if spec.speckle_shape is not None:
        g = spec.speckle_grain
        if g > 1:
            coarse = tuple(-(-s // g) for s in data.shape)
            gain = rng.gamma(spec.speckle_shape, 1.0 / spec.speckle_shape, coarse)
            for ax in range(data.ndim):
                gain = np.repeat(gain, g, axis=ax)
            gain = gain[tuple(slice(0, s) for s in data.shape)]
        else:
            gain = rng.gamma(spec.speckle_shape, 1.0 / spec.speckle_shape, data.shape)
        out = out * gain
    if spec.noise_sigma > 0:
        out = out + rng.normal(0.0, spec.noise_sigma, data.shape)
    return np.clip(out, 0.0, 1.0)


def generate_phantom(spec: PhantomSpec, seed: int) -> Phantom:
    """Generate a phantom and its ground truth, deterministically per seed."""
    rng = np.random.default_rng(seed)
    if spec.kind == "2d":
        curves = _curves_2d(spec)
        _validate_curves(curves, spec.rows)
        img = _paint(curves, spec.rows, spec)
        for center, width, atten in spec.shadows:
            lo = max(int(center - width // 2), 0)
            img[:, lo:lo + int(width)] *= atten
        img = _apply_noise(img, spec, rng)
        truth = SurfaceSet(spacing_um=spec.spacing_um)
        for i, sid in enumerate(spec.surface_ids):
            truth.set(sid, curves[i][None, :], PROV_CLUSTERED)
        sx, sy, sz = spec.spacing_um
        return Phantom(spec=spec, seed=seed, truth=truth,
                       image=ImageSlice(img, spacing=(sy, sx)))

    if spec.kind != "3d":
        raise ParameterError(f"unknown phantom kind {spec.kind!r}")
    nx, ny, nz = spec.dims
    curves = _curves_3d(spec)
    _validate_curves(curves, ny)
    vol = _paint(curves, ny, spec)
    if spec.canal is not None:
        cx, cz, ax, az, val = spec.canal
        gx = np.arange(nx, dtype=float)
        gz = np.arange(nz, dtype=float)
        inside = (((gx[None, :] - cx) / ax) ** 2
                  + ((gz[:, None] - cz) / az) ** 2) <= 1.0   # (z, x)
        vol = np.where(inside[:, None, :], val, vol)
    vol = _apply_noise(vol, spec, rng)
    truth = SurfaceSet(spacing_um=spec.spacing_um)
    canal_nan = None
    if spec.canal is not None:
        canal_nan = inside
    for i, sid in enumerate(spec.surface_ids):
        arr = curves[i].copy()
        if canal_nan is not None:
            arr[canal_nan] = np.nan
        truth.set(sid, arr, PROV_CLUSTERED)
    return Phantom(spec=spec, seed=seed, truth=truth,
                   volume=Volume(vol, spacing_um=spec.spacing_um))
