"""Shared node-grid -> kernel -> chain -> embedding -> partition stack."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coarse import Partition, embed_kmeans
from .errors import DmsegError, NoElbowError, ParameterError, StageFailure
from .model_select import default_sigma, estimate_k, pairwise_range
from .nodes import NodeGrid, normalize_features
from .spectral import (DiffusionEmbedding, MarkovChain, build_affinity,
                       normalize_markov, spectral_decompose)


@dataclass
class StageStack:
    """Everything produced by one diffusion-map pass over a node grid."""

    grid: NodeGrid
    chain: MarkovChain
    embedding: DiffusionEmbedding
    partition: Partition
    elbow_k: int | None
    sigma_geo: float
    sigma_feat: float
    radius: float
    k_used: int


def block_diagonal(block) -> float:
    return float(np.sqrt(np.sum(np.asarray(block, dtype=float) ** 2)))


def stage_sigmas(grid: NodeGrid, sigma_factor: float):
    """Kernel scales from the pairwise distance ranges of a node grid."""
    gmin, gmax = pairwise_range(grid.centroids)
    fmin, fmax = pairwise_range(grid.features)
    if fmax - fmin <= 1e-9:
        raise StageFailure("no feature contrast between nodes (constant input?)")
    factor_ratio = sigma_factor / 0.15
    return (factor_ratio * default_sigma(gmin, gmax),
            factor_ratio * default_sigma(fmin, fmax))


def run_stack(grid: NodeGrid, cfg, *, k: int, omega: int, radius: float,
              seed, auto_k: bool = False, elbow_count: int | None = None) -> StageStack:
    """Run the full diffusion-map stack over a node grid.

    ``seed`` may be an int or a tuple of ints; k-means restarts derive
    their generators from it.  With ``auto_k`` the elbow estimate replaces
    ``k`` when one exists; the elbow sees at most ``elbow_count``
    eigenvalues so spurious drop ratios deep in the bulk cannot win.
    """
    ngrid = normalize_features(grid)
    sigma_geo, sigma_feat = stage_sigmas(ngrid, cfg.sigma_factor)
    graph = build_affinity(ngrid, sigma_geo, sigma_feat, radius)
    chain = normalize_markov(graph, cfg.sparsify_threshold)
    n = chain.n
    omega_spec = min(n - 2, max(cfg.spectrum_size, omega))
    if omega_spec < 1:
        raise StageFailure(f"too few nodes ({n}) for a spectral embedding")
    emb = spectral_decompose(chain, omega=omega_spec, tau=cfg.tau, delta=cfg.delta)

    elbow_k = None
    lam = emb.eigenvalues
    if elbow_count is not None:
        lam = lam[:elbow_count]
    try:
        elbow_k = estimate_k(lam).k
    except (NoElbowError, ParameterError):
        pass
    k_used = k
    if auto_k and elbow_k is not None:
        k_used = elbow_k
    k_used = int(min(k_used, max(n - 1, 2), 8))

    part = embed_kmeans(emb.truncate(min(omega, omega_spec)), chain.phi0,
                        k_used, restarts=cfg.restarts, seed=seed,
                        tiny_cluster_frac=cfg.tiny_cluster_frac)
    if part.coincident:
        raise StageFailure("no distinct clusters: all diffusion coordinates coincide")
    return StageStack(grid=ngrid, chain=chain, embedding=emb, partition=part,
                      elbow_k=elbow_k, sigma_geo=sigma_geo, sigma_feat=sigma_feat,
                      radius=radius, k_used=k_used)


def clusters_by_row(stack: StageStack, axis: int):
    """Cluster ids ordered by their members' mean coordinate along ``axis``."""
    part = stack.partition
    cents = stack.grid.centroids[:, axis]
    counts = stack.grid.member_counts.astype(float)
    means = np.empty(part.k)
    for c in range(part.k):
        sel = part.assign == c
        w = counts[sel]
        means[c] = float((cents[sel] * w).sum() / w.sum()) if w.sum() else np.inf
    return np.argsort(means, kind="stable"), means
