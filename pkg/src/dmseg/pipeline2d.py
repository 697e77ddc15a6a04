"""Two-stage diffusion-map segmentation of a 2D slice.

Stage 1 clusters coarse blocks into three vertical regions, takes the
middle one as the tissue band, refines its edges into surfaces 1 and 7,
walks the gradient downward for surfaces 8-11, and flattens the slice by
surface 10.  Stage 2 re-runs the map on thin blocks restricted between
surfaces 1 and 7, split into left and right halves, to place the inner
surfaces; the automatic cluster protocol then fixes up missed boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import PipelineConfig
from .curves import (AlignmentRecord, detect_outer_surfaces, flatten,
                     gradient_refine, smooth_curve, split_left_right)
from .errors import StageFailure
from .graphstage import StageStack, block_diagonal, clusters_by_row, run_stack
from .nodes import ImageSlice, NodeGrid, window_nodes_2d
from .protocol import auto_cluster_protocol
from .surfaces import (PROV_CLUSTERED, PROV_GRADIENT, PROV_INTERPOLATED,
                       SurfaceSet)


@dataclass
class Stage1Result2D:
    """Outer surfaces (original coordinates), alignment, flattened slice."""

    curves: dict
    provenance: dict
    alignment: AlignmentRecord
    aligned: ImageSlice
    stack: StageStack
    middle_cluster: int
    elbow_k: int | None
    clamped: dict = field(default_factory=dict)


@dataclass
class Stage2Result2D:
    """Inner boundaries in aligned coordinates, top to bottom."""

    boundaries: list
    provenance: list
    k_used: int
    elbow_left: int | None
    elbow_right: int | None
    split_col: int
    decided_k: int


def extract_cluster_edges(partition, grid: NodeGrid, cluster_id: int):
    """Topmost and bottommost member rows of one cluster, per image column.

    Columns the cluster does not touch are NaN.
    """
    ncols = grid.domain_shape[1]
    top = np.full(ncols, np.inf)
    bot = np.full(ncols, -np.inf)
    for b in grid.bounds[np.asarray(partition.assign) == cluster_id]:
        r0, r1, c0, c1 = b
        np.minimum(top[c0:c1], r0, out=top[c0:c1])
        np.maximum(bot[c0:c1], r1 - 1, out=bot[c0:c1])
    missing = ~np.isfinite(top) | ~np.isfinite(bot)
    top[missing] = np.nan
    bot[missing] = np.nan
    return top, bot


def _gradient_image(image: ImageSlice, cfg: PipelineConfig) -> np.ndarray:
    """Lightly smoothed copy used only for gradient searches."""
    sig = (cfg.gradient_smooth_rows, cfg.gradient_smooth_cols)
    if max(sig) <= 0:
        return image.intensities
    return gaussian_filter(image.intensities, sig, mode="nearest")


def _node_image(image: ImageSlice, cfg: PipelineConfig) -> ImageSlice:
    """Lightly smoothed copy used only for node features (speckle control)."""
    sig = (cfg.node_smooth_rows, cfg.node_smooth_cols)
    if max(sig) <= 0:
        return image
    sm = gaussian_filter(image.intensities, sig, mode="nearest")
    return ImageSlice(np.clip(sm, 0.0, 1.0), spacing=image.spacing)


def run_stage1_2d(image: ImageSlice, cfg: PipelineConfig,
                  events: list | None = None) -> Stage1Result2D:
    """First diffusion map: surfaces 1 and 7-11 plus the flattened slice."""
    bh, bw = cfg.stage1_block_2d
    grid = window_nodes_2d(_node_image(image, cfg), bh, bw,
                           min_fill=cfg.min_block_fill)
    radius = cfg.radius_factor_stage1 * block_diagonal((bh, bw))
    stack = run_stack(grid, cfg, k=cfg.k_stage1, omega=cfg.omega_stage1,
                      radius=radius, seed=(cfg.seed, 1),
                      elbow_count=cfg.elbow_count_stage1)
    order, means = clusters_by_row(stack, axis=0)
    if stack.partition.k != 3:
        raise StageFailure(f"stage 1 expects 3 clusters, got {stack.partition.k}")
    middle = int(order[1])
    if not (means[order[0]] + 1.0 < means[middle] < means[order[2]] - 1.0):
        raise StageFailure(
            "middle cluster is not vertically between the other two",
            diagnostics={"cluster_mean_rows": means.tolist()})

    top_raw, bot_raw = extract_cluster_edges(stack.partition, stack.grid, middle)
    covered = np.isfinite(top_raw)
    if covered.sum() < 0.5 * top_raw.size:
        raise StageFailure("middle cluster covers under half of the columns",
                           diagnostics={"covered_cols": int(covered.sum())})
    s1 = smooth_curve(top_raw, window=cfg.smoothing_window,
                      mad_factor=cfg.smoothing_mad_factor)
    s7 = smooth_curve(bot_raw + 1.0, window=cfg.smoothing_window,
                      mad_factor=cfg.smoothing_mad_factor)

    gimg = _gradient_image(image, cfg)
    mode1 = "brightest" if cfg.surface1_sign > 0 else "darkest"
    mode7 = "brightest" if cfg.surface7_sign > 0 else "darkest"
    s1, cl1 = gradient_refine(gimg, s1, cfg.gradient_half_window, mode1,
                              window=cfg.smoothing_window)
    s7, cl7 = gradient_refine(gimg, s7, cfg.gradient_half_window, mode7,
                              window=cfg.smoothing_window)
    s7 = np.maximum(s7, s1)
    outer, outer_flags = detect_outer_surfaces(gimg, s7, cfg.outer_signs,
                                               cfg.gradient_half_window,
                                               window=cfg.smoothing_window)

    curves = {"1": s1, "7": s7, **outer}
    prov = {}
    for sid, c in curves.items():
        p = np.full(c.size, PROV_GRADIENT, dtype=np.uint8)
        p[~covered] = PROV_INTERPOLATED
        prov[sid] = p
    aligned, record = flatten(image, outer["10"])
    if events is not None:
        events.append({"event": "stage1", "elbow_k": stack.elbow_k,
                       "k_used": stack.k_used,
                       "cluster_mean_rows": [round(m, 2) for m in means],
                       "distortion": stack.partition.distortion})
    return Stage1Result2D(curves=curves, provenance=prov, alignment=record,
                          aligned=aligned, stack=stack, middle_cluster=middle,
                          elbow_k=stack.elbow_k,
                          clamped={"1": cl1, "7": cl7, **outer_flags})


def _side_boundaries(image: ImageSlice, mask, col_range, cfg: PipelineConfig,
                     k_fixed: int | None, salt: int):
    """One side's diffusion map; returns boundary curves in global columns.

    A partition with a tiny cluster (stray sliver of blocks along an
    interface) is re-run once with one extra cluster, which absorbs the
    sliver; near-coincident boundaries are merged later.
    """
    c0, c1 = col_range
    sub = ImageSlice(_node_image(image, cfg).intensities[:, c0:c1],
                     spacing=image.spacing)
    bh, bw = cfg.stage2_block_2d
    grid = window_nodes_2d(sub, bh, bw, roi_mask=mask[:, c0:c1],
                           min_fill=cfg.min_block_fill)
    radius = cfg.radius_factor_stage2 * block_diagonal((bh, bw))
    stack = run_stack(grid, cfg, k=k_fixed or cfg.k_stage2, omega=cfg.omega_stage2,
                      radius=radius, seed=(cfg.seed, 2, salt),
                      auto_k=k_fixed is None and cfg.auto_cluster_protocol,
                      elbow_count=cfg.elbow_count_stage2)
    if stack.partition.tiny_cluster and stack.k_used < grid.n - 1:
        stack = replace_k(stack, grid, cfg, stack.k_used + 1, (cfg.seed, 2, salt),
                          radius)
    return stack, grid, c0


def replace_k(stack: StageStack, grid: NodeGrid, cfg: PipelineConfig, k: int,
              seed, radius: float) -> StageStack:
    """Re-cluster an existing stack with a different k (spectra reused)."""
    from dataclasses import replace as _dc_replace
    from .coarse import embed_kmeans

    part = embed_kmeans(stack.embedding.truncate(
        min(cfg.omega_stage2, stack.embedding.omega)), stack.chain.phi0, k,
        restarts=cfg.restarts, seed=seed, tiny_cluster_frac=cfg.tiny_cluster_frac)
    return _dc_replace(stack, partition=part, k_used=k)


MIN_BAND_PX = 8.0  # clusters with nearer mean rows are one band split in two


def _side_curves(stack: StageStack, grid: NodeGrid, c0: int, ncols: int,
                 cfg: PipelineConfig):
    """Boundary curves between vertically ordered clusters of one side.

    Boundaries between clusters whose mean rows almost coincide are
    dropped; such pairs are one band split around a stray sliver.
    """
    order, means = clusters_by_row(stack, axis=0)
    keep = [int(order[0])]
    for c in order[1:]:
        if means[int(c)] - means[keep[-1]] < MIN_BAND_PX:
            continue
        keep.append(int(c))
    order = keep
    edges = [extract_cluster_edges(stack.partition, grid, int(c)) for c in order]
    curves, provs = [], []
    for j in range(len(order) - 1):
        bot_u = edges[j][1]
        top_l = edges[j + 1][0]
        raw = (bot_u + top_l + 1.0) / 2.0
        raw_full = np.full(ncols, np.nan)
        raw_full[c0:c0 + raw.size] = raw
        finite = np.isfinite(raw_full)
        if finite.sum() < 4:
            curves.append(raw_full)
            provs.append(np.full(ncols, PROV_INTERPOLATED, dtype=np.uint8))
            continue
        sm = np.full(ncols, np.nan)
        sm[c0:c0 + raw.size] = smooth_curve(raw_full[c0:c0 + raw.size],
                                            window=cfg.smoothing_window,
                                            mad_factor=cfg.smoothing_mad_factor)
        p = np.full(ncols, PROV_INTERPOLATED, dtype=np.uint8)
        p[finite] = PROV_CLUSTERED
        curves.append(sm)
        provs.append(p)
    return curves, provs


ROI_MARGIN = 1.5  # px kept clear of the bounding curves, so estimation
                  # jitter cannot pull bright out-of-band pixels into the ROI


def roi_mask_between(shape, upper: np.ndarray, lower: np.ndarray,
                     min_height: float, margin: float = ROI_MARGIN) -> np.ndarray:
    """Mask of pixels strictly between two curves; thin columns excluded."""
    rows, cols = shape
    r = np.arange(rows)[:, None]
    mask = (r > upper[None, :] + margin) & (r < lower[None, :] - margin)
    mask[:, (lower - upper - 2 * margin) < min_height] = False
    return mask


def run_stage2_2d(aligned: ImageSlice, s1a: np.ndarray, s7a: np.ndarray,
                  cfg: PipelineConfig, events: list | None = None,
                  k_fixed: int | None = None) -> Stage2Result2D:
    """Second diffusion map between surfaces 1 and 7 on the aligned slice."""
    rows, cols = aligned.intensities.shape
    bh, _ = cfg.stage2_block_2d
    mask = roi_mask_between((rows, cols), s1a, s7a, 2.0 * bh)
    if not mask.any():
        raise StageFailure("stage-2 region of interest is empty")

    split = split_left_right(s1a, cols)
    ov_lo = cfg.seam_overlap // 2
    ov_hi = cfg.seam_overlap - ov_lo
    left_range = (0, min(split + ov_hi, cols))
    right_range = (max(split - ov_lo, 0), cols)

    # Each side clusters with its own elbow estimate; the joined result is
    # the union of both sides' boundaries, matched at the seam.  A boundary
    # only one side resolves still enters the union, supported one-sided.
    stack_l, grid_l, c0_l = _side_boundaries(aligned, mask, left_range, cfg,
                                             k_fixed, salt=0)
    stack_r, grid_r, c0_r = _side_boundaries(aligned, mask, right_range, cfg,
                                             k_fixed, salt=1)
    if k_fixed is None and cfg.auto_cluster_protocol:
        cands = [k for k in (stack_l.elbow_k, stack_r.elbow_k) if k is not None]
        decided_k = max(cands) if cands else cfg.k_stage2
    else:
        decided_k = k_fixed or cfg.k_stage2

    curves_l, prov_l = _side_curves(stack_l, grid_l, c0_l, cols, cfg)
    curves_r, prov_r = _side_curves(stack_r, grid_r, c0_r, cols, cfg)

    seam_zone = np.arange(max(right_range[0] - 10, 0),
                          min(left_range[1] + 10, cols))
    pairs = _match_at_seam(curves_l, curves_r, seam_zone)

    boundaries, provs = [], []
    blend_lo, blend_hi = right_range[0], left_range[1]
    w = np.zeros(cols)
    w[blend_hi:] = 1.0
    if blend_hi > blend_lo:
        w[blend_lo:blend_hi] = np.linspace(0.0, 1.0, blend_hi - blend_lo)
    for il, ir in pairs:
        if il is not None and ir is not None:
            cl, cr, pl, pr = curves_l[il], curves_r[ir], prov_l[il], prov_r[ir]
            both = np.isfinite(cl) & np.isfinite(cr)
            merged = np.where(np.isfinite(cl), cl, cr)
            merged[both] = (1 - w[both]) * cl[both] + w[both] * cr[both]
            p = np.where(w < 0.5, pl, pr).astype(np.uint8)
        elif il is not None:
            merged, p = curves_l[il].copy(), prov_l[il].copy()
            p[~np.isfinite(merged)] = PROV_INTERPOLATED
        else:
            merged, p = curves_r[ir].copy(), prov_r[ir].copy()
            p[~np.isfinite(merged)] = PROV_INTERPOLATED
        finite = np.isfinite(merged)
        if not finite.all():
            if finite.sum() < 4:
                continue
            merged = np.interp(np.arange(cols), np.nonzero(finite)[0],
                               merged[finite])
        boundaries.append(np.clip(merged, s1a + 0.5, s7a - 0.5))
        provs.append(p)

    # keep the stack vertically ordered
    for j in range(1, len(boundaries)):
        boundaries[j] = np.maximum(boundaries[j], boundaries[j - 1])

    if events is not None:
        events.append({"event": "stage2", "split_col": int(split),
                       "elbow_left": stack_l.elbow_k, "elbow_right": stack_r.elbow_k,
                       "k_left": stack_l.k_used, "k_right": stack_r.k_used,
                       "n_boundaries": len(boundaries),
                       "nodes": [int(grid_l.n), int(grid_r.n)]})
    return Stage2Result2D(boundaries=boundaries, provenance=provs,
                          k_used=int(decided_k), elbow_left=stack_l.elbow_k,
                          elbow_right=stack_r.elbow_k, split_col=int(split),
                          decided_k=int(decided_k))


def _match_at_seam(curves_l, curves_r, seam_zone, tol: float = 14.0):
    """Pair left and right boundary curves by their rows near the seam.

    Returns (left_index or None, right_index or None) tuples ordered by
    seam row.  Curves farther than ``tol`` from any counterpart stay
    one-sided.
    """
    def seam_row(c):
        v = c[seam_zone]
        v = v[np.isfinite(v)]
        if v.size == 0:
            v = c[np.isfinite(c)]
        return float(np.mean(v)) if v.size else np.nan

    lrows = [seam_row(c) for c in curves_l]
    rrows = [seam_row(c) for c in curves_r]
    pairs = []
    used_r = set()
    for il, lr in enumerate(lrows):
        best, best_d = None, tol
        for ir, rr in enumerate(rrows):
            if ir in used_r or not np.isfinite(rr):
                continue
            d = abs(lr - rr) if np.isfinite(lr) else np.inf
            if d < best_d:
                best, best_d = ir, d
        if best is not None:
            used_r.add(best)
        pairs.append((il, best))
    for ir in range(len(rrows)):
        if ir not in used_r:
            pairs.append((None, ir))

    def sort_key(p):
        il, ir = p
        if il is not None and ir is not None:
            return 0.5 * (lrows[il] + rrows[ir])
        return lrows[il] if il is not None else rrows[ir]

    pairs.sort(key=sort_key)
    # near-coincident one-sided leftovers duplicate a paired boundary
    deduped, last_row = [], -np.inf
    for p in pairs:
        row = sort_key(p)
        if not np.isfinite(row):
            continue
        if row - last_row < MIN_BAND_PX and deduped:
            continue
        deduped.append(p)
        last_row = row
    return deduped


def rescue_map_2d(aligned: ImageSlice, upper: np.ndarray, lower: np.ndarray,
                  cfg: PipelineConfig):
    """k=2 diffusion map between two boundaries; None when no split exists.

    Clustering runs on the slowest nontrivial coordinate alone: a real
    boundary in the strip dominates that mode, while without one the mode
    is a lateral drift whose two halves fail the vertical-separation test.
    """
    from .model_select import estimate_k
    from .errors import NoElbowError, ParameterError, InputError

    rows, cols = aligned.intensities.shape
    bh, bw = cfg.stage2_block_2d
    mask = roi_mask_between((rows, cols), upper, lower, 2.0 * bh)
    if not mask.any():
        return None
    try:
        grid = window_nodes_2d(_node_image(aligned, cfg), bh, bw, roi_mask=mask,
                               min_fill=cfg.min_block_fill)
        radius = cfg.radius_factor_stage2 * block_diagonal((bh, bw))
        stack = run_stack(grid, cfg, k=2, omega=min(4, max(grid.n - 2, 1)),
                          radius=radius, seed=(cfg.seed, 3),
                          elbow_count=cfg.elbow_count_stage2)
    except (StageFailure, InputError, ParameterError):
        return None
    try:
        estimate_k(stack.embedding.eigenvalues)
    except (NoElbowError, ParameterError):
        return None
    # The strip is wide and thin, so the very slowest modes can be lateral
    # drifts; the boundary lives in the mode that follows depth.
    depth = stack.grid.centroids[:, 0]
    depth = depth - depth.mean()
    psi = stack.embedding.right_vectors[:, 1:]
    corr = np.abs(depth @ psi) / (np.linalg.norm(depth)
                                  * np.linalg.norm(psi, axis=0) + 1e-30)
    l_star = int(np.argmax(corr))
    import dataclasses
    emb1 = dataclasses.replace(
        stack.embedding, omega=1,
        coords=stack.embedding.coords[:, l_star:l_star + 1])
    from .coarse import embed_kmeans
    part = embed_kmeans(emb1, stack.chain.phi0, 2, restarts=cfg.restarts,
                        seed=(cfg.seed, 3, 1), tiny_cluster_frac=cfg.tiny_cluster_frac)
    stack = dataclasses.replace(stack, partition=part, k_used=2)
    order, means = clusters_by_row(stack, axis=0)
    if not np.isfinite(means).all() or abs(means[order[1]] - means[order[0]]) < 4.0 * bh:
        return None
    upper_mask = np.asarray(stack.partition.assign) == int(order[0])
    raw = _threshold_boundary(stack.grid, upper_mask, cols)
    finite = np.isfinite(raw)
    if finite.sum() < 4:
        return None
    sm = smooth_curve(raw, window=cfg.smoothing_window,
                      mad_factor=cfg.smoothing_mad_factor)
    prov = np.where(finite, PROV_CLUSTERED, PROV_INTERPOLATED).astype(np.uint8)
    return np.clip(sm, upper + 0.5, lower - 0.5), prov


def _threshold_boundary(grid: NodeGrid, upper_mask: np.ndarray,
                        ncols: int) -> np.ndarray:
    """Per-column split row minimizing cluster misclassification.

    More robust than min/max member rows when assignments of individual
    blocks flip under noise (the faint-boundary rescue regime).
    """
    out = np.full(ncols, np.nan)
    spans = {}
    for i, b in enumerate(grid.bounds):
        spans.setdefault((int(b[2]), int(b[3])), []).append(i)
    for (c0, c1), idx in spans.items():
        idx = sorted(idx, key=lambda i: grid.bounds[i][0])
        r0 = np.array([grid.bounds[i][0] for i in idx], dtype=float)
        r1 = np.array([grid.bounds[i][1] for i in idx], dtype=float)
        lab = upper_mask[idx].astype(int)
        upper_below = np.concatenate([np.cumsum(lab[::-1])[::-1], [0]])
        lower_above = np.concatenate([[0], np.cumsum(1 - lab)])
        k = int(np.argmin(upper_below + lower_above))
        if k == 0:
            row = r0[0] - 0.5
        elif k == len(idx):
            row = r1[-1] - 0.5
        else:
            row = 0.5 * (r1[k - 1] + r0[k])
        out[c0:min(c1, ncols)] = row
    return out


def run_pipeline_2d(image: ImageSlice, cfg: PipelineConfig):
    """Full 2D pipeline; returns (SurfaceSet, diagnostic events)."""
    events = []
    st1 = run_stage1_2d(image, cfg, events)
    shift = st1.alignment.shift_curve
    s1a = shift(st1.curves["1"])
    s7a = shift(st1.curves["7"])
    st2 = run_stage2_2d(st1.aligned, s1a, s7a, cfg, events)

    def rescue(upper, lower):
        res = rescue_map_2d(st1.aligned, upper[0], lower[0], cfg)
        if res is None:
            return None
        return res[0][None, :], res[1][None, :]

    inner, events2 = auto_cluster_protocol(
        [b[None, :] for b in st2.boundaries],
        [p[None, :] for p in st2.provenance],
        decided_k=st2.decided_k, s1=s1a[None, :], s7=s7a[None, :],
        rescue_fn=rescue, enabled=cfg.auto_cluster_protocol)
    events.extend(events2)

    sx, sy = image.spacing[1], image.spacing[0]
    surf = SurfaceSet(spacing_um=(sx, sy, cfg.spacing_um[2]))
    for sid, c in st1.curves.items():
        surf.set(sid, c[None, :], st1.provenance[sid][None, :])
    unshift = st1.alignment.unshift_curve
    for sid, (curve2d, prov2d) in inner.items():
        c = unshift(curve2d[0])
        c = np.clip(c, st1.curves["1"] + 0.25, st1.curves["7"] - 0.25)
        surf.set(sid, c[None, :], prov2d)
    surf.enforce_ordering()
    return surf, events
