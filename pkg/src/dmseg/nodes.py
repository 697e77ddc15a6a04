"""Graph-node construction from images and volumes by rectangular windowing.

Pixels (or voxels) are grouped into non-overlapping blocks; each block
becomes one node with its centroid (mean member coordinates, pixel units)
and a feature vector (mean gray level).  An optional inclusion mask limits
which pixels participate; blocks with too few in-mask pixels are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import InputError, ParameterError


@dataclass(frozen=True)
class ImageSlice:
    """2D image with intensities in [0, 1].

    ``spacing`` is (axial um/px, lateral um/px); rows run along the axial
    direction.
    """

    intensities: np.ndarray
    spacing: tuple = (1.0, 1.0)

    def __post_init__(self):
        I = np.asarray(self.intensities, dtype=float)
        object.__setattr__(self, "intensities", I)
        if I.ndim != 2 or I.shape[0] < 20 or I.shape[1] < 20:
            raise InputError(f"image must be at least 20x20, got {I.shape}")
        if not np.isfinite(I).all() or I.min() < 0 or I.max() > 1:
            raise InputError("intensities must be finite and in [0, 1]")

    @property
    def rows(self):
        return self.intensities.shape[0]

    @property
    def cols(self):
        return self.intensities.shape[1]


@dataclass(frozen=True)
class Volume:
    """3D volume with intensities in [0, 1], stored as array[z, y, x].

    ``dims`` is (x, y, z) and the flat buffer in C order is therefore
    x-fastest, then y, then z.  ``spacing_um`` is micrometers per voxel
    along (x, y, z); y is the axial direction.
    """

    intensities: np.ndarray
    spacing_um: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        V = np.asarray(self.intensities, dtype=float)
        object.__setattr__(self, "intensities", V)
        if V.ndim != 3 or min(V.shape) < 15:
            raise InputError(f"volume dims must each be >= 15, got {V.shape}")
        if not np.isfinite(V).all() or V.min() < 0 or V.max() > 1:
            raise InputError("intensities must be finite and in [0, 1]")

    @property
    def dims(self):
        nz, ny, nx = self.intensities.shape
        return (nx, ny, nz)

    def slice2d(self, z: int) -> ImageSlice:
        """Extract slice z as a 2D image (rows = y axial, cols = x)."""
        sx, sy, _ = self.spacing_um
        return ImageSlice(self.intensities[z], spacing=(sy, sx))


@dataclass(frozen=True)
class NodeGrid:
    """Block nodes over an image or volume.

    ``centroids`` rows are (row, col) for 2D grids and (x, y, z) for 3D
    grids, in pixel units.  ``bounds`` carries the half-open block extent
    per axis in the same ordering.  Nodes are listed in row-major block
    order, so identical inputs produce identical grids.
    """

    centroids: np.ndarray
    features: np.ndarray
    bounds: np.ndarray
    member_counts: np.ndarray
    block_shape: tuple
    domain_shape: tuple
    ndim: int
    roi_mask: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.centroids.shape[0]

    def members(self, i: int):
        """Coordinate arrays of the in-mask pixels of node ``i``."""
        b = self.bounds[i]
        if self.ndim == 2:
            rr, cc = np.mgrid[b[0]:b[1], b[2]:b[3]]
            rr, cc = rr.ravel(), cc.ravel()
            if self.roi_mask is not None:
                keep = self.roi_mask[rr, cc]
                rr, cc = rr[keep], cc[keep]
            return rr, cc
        xx, yy, zz = np.mgrid[b[0]:b[1], b[2]:b[3], b[4]:b[5]]
        xx, yy, zz = xx.ravel(), yy.ravel(), zz.ravel()
        if self.roi_mask is not None:
            keep = self.roi_mask[zz, yy, xx]
            xx, yy, zz = xx[keep], yy[keep], zz[keep]
        return xx, yy, zz


def _edges(total: int, block: int) -> np.ndarray:
    """Block edges along one axis; the final block absorbs the remainder."""
    nblocks = max(total // block, 1)
    e = np.arange(nblocks + 1) * block
    e[-1] = total
    return e


def _block_reduce(arr: np.ndarray, edges_list):
    """Sum ``arr`` over the rectangular blocks defined by per-axis edges."""
    out = arr
    for ax, edges in enumerate(edges_list):
        out = np.add.reduceat(out, edges[:-1], axis=ax)
    return out


def window_nodes_2d(image: ImageSlice, block_h: int, block_w: int,
                    roi_mask: np.ndarray | None = None,
                    min_fill: float = 0.25) -> NodeGrid:
    """Partition an image into block nodes with mean-gray features.

    Edge blocks absorb any remainder so the tiling covers the whole image.
    With a mask, centroids and means use in-mask pixels only and blocks
    whose in-mask fraction falls below ``min_fill`` are dropped.
    """
    I = image.intensities
    rows, cols = I.shape
    if not (1 <= block_h <= rows and 1 <= block_w <= cols):
        raise ParameterError(f"block {block_h}x{block_w} exceeds image {rows}x{cols}")
    if roi_mask is None:
        M = np.ones_like(I)
    else:
        roi_mask = np.asarray(roi_mask, dtype=bool)
        if roi_mask.shape != I.shape:
            raise InputError("roi_mask shape mismatch")
        if not roi_mask.any():
            raise InputError("ROI mask is empty")
        M = roi_mask.astype(float)

    re, ce = _edges(rows, block_h), _edges(cols, block_w)
    rr = np.arange(rows, dtype=float)[:, None]
    cc = np.arange(cols, dtype=float)[None, :]
    cnt = _block_reduce(M, (re, ce))
    ssum = _block_reduce(I * M, (re, ce))
    rsum = _block_reduce(rr * M, (re, ce))
    csum = _block_reduce(cc * M, (re, ce))
    areas = np.outer(np.diff(re), np.diff(ce))

    keep = cnt >= min_fill * areas
    keep &= cnt > 0
    if not keep.any():
        raise InputError("no blocks survive the ROI fill threshold")
    bi, bj = np.nonzero(keep)  # row-major order
    n = bi.size
    counts = cnt[bi, bj]
    centroids = np.stack([rsum[bi, bj] / counts, csum[bi, bj] / counts], axis=1)
    features = (ssum[bi, bj] / counts)[:, None]
    bounds = np.stack([re[bi], re[bi + 1], ce[bj], ce[bj + 1]], axis=1).astype(int)
    return NodeGrid(centroids=centroids, features=features, bounds=bounds,
                    member_counts=counts.astype(int), block_shape=(block_h, block_w),
                    domain_shape=(rows, cols), ndim=2,
                    roi_mask=None if roi_mask is None else roi_mask)


def window_nodes_3d(volume: Volume, block: tuple,
                    roi_mask: np.ndarray | None = None,
                    min_fill: float = 0.25) -> NodeGrid:
    """3D analogue of :func:`window_nodes_2d` with (x, y, z) blocks.

    ``roi_mask`` is indexed [z, y, x] like the volume; centroids and bounds
    use (x, y, z) ordering.
    """
    V = volume.intensities  # [z, y, x]
    nx, ny, nz = volume.dims
    bx, by, bz = block
    if not (1 <= bx <= nx and 1 <= by <= ny and 1 <= bz <= nz):
        raise ParameterError(f"block {block} exceeds volume dims {volume.dims}")
    if roi_mask is None:
        M = np.ones_like(V)
    else:
        roi_mask = np.asarray(roi_mask, dtype=bool)
        if roi_mask.shape != V.shape:
            raise InputError("roi_mask shape mismatch")
        if not roi_mask.any():
            raise InputError("ROI mask is empty")
        M = roi_mask.astype(float)

    ze, ye, xe = _edges(nz, bz), _edges(ny, by), _edges(nx, bx)
    zz = np.arange(nz, dtype=float)[:, None, None]
    yy = np.arange(ny, dtype=float)[None, :, None]
    xx = np.arange(nx, dtype=float)[None, None, :]
    cnt = _block_reduce(M, (ze, ye, xe))
    ssum = _block_reduce(V * M, (ze, ye, xe))
    zsum = _block_reduce(zz * M, (ze, ye, xe))
    ysum = _block_reduce(yy * M, (ze, ye, xe))
    xsum = _block_reduce(xx * M, (ze, ye, xe))
    areas = (np.diff(ze)[:, None, None] * np.diff(ye)[None, :, None]
             * np.diff(xe)[None, None, :])

    keep = (cnt >= min_fill * areas) & (cnt > 0)
    if not keep.any():
        raise InputError("no blocks survive the ROI fill threshold")
    bz_i, by_i, bx_i = np.nonzero(keep)
    counts = cnt[bz_i, by_i, bx_i]
    centroids = np.stack([xsum[bz_i, by_i, bx_i] / counts,
                          ysum[bz_i, by_i, bx_i] / counts,
                          zsum[bz_i, by_i, bx_i] / counts], axis=1)
    features = (ssum[bz_i, by_i, bx_i] / counts)[:, None]
    bounds = np.stack([xe[bx_i], xe[bx_i + 1], ye[by_i], ye[by_i + 1],
                       ze[bz_i], ze[bz_i + 1]], axis=1).astype(int)
    return NodeGrid(centroids=centroids, features=features, bounds=bounds,
                    member_counts=counts.astype(int), block_shape=tuple(block),
                    domain_shape=(nx, ny, nz), ndim=3,
                    roi_mask=None if roi_mask is None else roi_mask)


def normalize_features(grid: NodeGrid) -> NodeGrid:
    """Min-max rescale each feature dimension to [0, 1].

    Constant dimensions map to 0.  Geometric centroids are untouched.
    """
    if grid.n < 2:
        raise InputError("need at least 2 nodes to normalize features")
    F = grid.features
    lo = F.min(axis=0)
    hi = F.max(axis=0)
    span = hi - lo
    out = np.zeros_like(F)
    nz = span > 0
    out[:, nz] = (F[:, nz] - lo[nz]) / span[nz]
    return replace(grid, features=out)


@dataclass(frozen=True)
class OnhMask:
    """Exclusion cylinder fitted to the dark canal of a projection image.

    ``exclude_zx`` marks projection pixels inside the fitted ellipse;
    ``found`` is False when no sufficiently large dark component exists, in
    which case the mask is empty.
    """

    exclude_zx: np.ndarray
    found: bool
    center_xz: tuple = (np.nan, np.nan)
    semi_axes: np.ndarray | None = None
    axes_vectors: np.ndarray | None = None

    def volume_exclude(self, volume: Volume) -> np.ndarray:
        """Broadcast the (z, x) ellipse along y as a [z, y, x] mask."""
        nz, ny, nx = volume.intensities.shape
        return np.broadcast_to(self.exclude_zx[:, None, :], (nz, ny, nx)).copy()


def onh_mask(volume: Volume, min_area_frac: float = 0.005) -> OnhMask:
    """Locate a dark vertical canal and return its elliptical-cylinder mask.

    The volume is projected along y (mean intensity); pixels below
    (mean - 1 SD) of the projection form the dark set; the largest connected
    component is fitted with a second-moment ellipse, and everything inside
    the ellipse (scaled to the component's support) is excluded.
    """
    proj = volume.intensities.mean(axis=1)  # (z, x)
    thr = proj.mean() - proj.std()
    dark = proj < thr
    labels, nlab = ndimage.label(dark)
    if nlab == 0:
        return OnhMask(exclude_zx=np.zeros_like(dark), found=False)
    sizes = ndimage.sum_labels(np.ones_like(proj), labels, index=np.arange(1, nlab + 1))
    best = int(np.argmax(sizes)) + 1
    if sizes[best - 1] < min_area_frac * proj.size:
        return OnhMask(exclude_zx=np.zeros_like(dark), found=False)

    zz, xx = np.nonzero(labels == best)
    cz, cx = zz.mean(), xx.mean()
    pts = np.stack([xx - cx, zz - cz], axis=1).astype(float)
    cov = pts.T @ pts / pts.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    # Uniform filled ellipse has axis variance a^2/4, so semi-axis = 2 sqrt(var).
    semi = 2.0 * np.sqrt(np.maximum(evals, 1e-12))
    gz, gx = np.mgrid[0:proj.shape[0], 0:proj.shape[1]]
    rel = np.stack([(gx - cx).ravel(), (gz - cz).ravel()], axis=1).astype(float)
    u = rel @ evecs
    inside = ((u[:, 0] / semi[0]) ** 2 + (u[:, 1] / semi[1]) ** 2) <= 1.0
    return OnhMask(exclude_zx=inside.reshape(proj.shape), found=True,
                   center_xz=(float(cx), float(cz)), semi_axes=semi,
                   axes_vectors=evecs)
