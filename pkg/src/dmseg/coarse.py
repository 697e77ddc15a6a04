"""Weighted k-means in diffusion space and coarse-grained Markov chains.

Clustering quality is measured by the quantization distortion, the
stationary-mass-weighted sum of squared distances between each node's
diffusion coordinates and its cluster centroid.  Aggregating nodes by such
a partition yields a small Markov chain whose leading spectrum approximates
the original one; the approximation residuals are bounded by twice the
distortion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InputError, ParameterError
from .spectral import DiffusionEmbedding, MarkovChain

KMEANS_MAX_ITER = 300
DEFAULT_RESTARTS = 20
TINY_CLUSTER_FRAC = 0.01


@dataclass(frozen=True)
class Partition:
    """A clustering of graph nodes with mass-weighted centroids.

    ``masses`` are the summed stationary probabilities per cluster and sum
    to 1; ``centroids`` are the phi0-weighted means of the member diffusion
    coordinates.  ``restart_distortions`` retains every restart's final
    distortion so selection monotonicity can be audited.
    """

    k: int
    assign: np.ndarray
    centroids: np.ndarray
    masses: np.ndarray
    distortion: float
    coincident: bool = False
    tiny_cluster: bool = False
    restart_distortions: tuple = field(default=())

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assign, minlength=self.k)


@dataclass(frozen=True)
class CoarseGraph:
    """Coarse-grained chain over the clusters of a partition.

    ``coarse_masses`` stacks the aggregated left eigenvectors (rows l = 0..L)
    and ``coarse_vectors`` the induced right ones (their ratio with row 0).
    ``residual_left[l]`` is ||phi_l^T Ptilde - lambda_l^tau phi_l^T||^2 in the
    1/mass norm and ``residual_right[l]`` the right-hand analogue in the mass
    norm; both are bounded by twice the quantization distortion.
    """

    k: int
    weights: np.ndarray
    P: np.ndarray
    coarse_masses: np.ndarray
    coarse_vectors: np.ndarray
    residual_left: np.ndarray
    residual_right: np.ndarray


def _init_farthest(coords, k, rng):
    """Farthest-point seeding: random first point, then greedy max-min."""
    n = coords.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((coords - coords[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((coords - coords[nxt]) ** 2).sum(axis=1))
    return coords[chosen].copy()


def _weighted_centroids(coords, phi0, assign, k):
    mass = np.bincount(assign, weights=phi0, minlength=k)
    cent = np.zeros((k, coords.shape[1]))
    for d in range(coords.shape[1]):
        cent[:, d] = np.bincount(assign, weights=phi0 * coords[:, d], minlength=k)
    nonempty = mass > 0
    cent[nonempty] /= mass[nonempty, None]
    return cent, mass


def _lloyd(coords, phi0, k, rng, max_iter=KMEANS_MAX_ITER):
    cent = _init_farthest(coords, k, rng)
    assign = np.full(coords.shape[0], -1)
    for _ in range(max_iter):
        d2 = cdist(coords, cent, "sqeuclidean")
        new_assign = d2.argmin(axis=1)
        cent, mass = _weighted_centroids(coords, phi0, new_assign, k)
        empty = np.nonzero(mass == 0)[0]
        if empty.size:
            # Reseed each empty cluster at the point farthest from its
            # current centroid, then keep iterating.
            nearest = d2[np.arange(len(new_assign)), new_assign]
            for e in empty:
                far = int(np.argmax(nearest))
                cent[e] = coords[far]
                nearest[far] = -1.0
            assign = np.full(coords.shape[0], -1)
            continue
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    d2 = cdist(coords, cent, "sqeuclidean")
    assign = d2.argmin(axis=1)
    cent, mass = _weighted_centroids(coords, phi0, assign, k)
    dist = float(np.sum(phi0 * ((coords - cent[assign]) ** 2).sum(axis=1)))
    return assign, cent, mass, dist


def embed_kmeans(embedding: DiffusionEmbedding, phi0: np.ndarray, k: int,
                 restarts: int = DEFAULT_RESTARTS, seed: int = 0,
                 tiny_cluster_frac: float = TINY_CLUSTER_FRAC) -> Partition:
    """Cluster diffusion coordinates by repeated weighted k-means.

    Runs ``restarts`` independent k-means passes (farthest-point seeding from
    a per-restart child generator) with phi0-weighted centroid updates, and
    returns the partition with the smallest quantization distortion.  A
    cluster smaller than ``tiny_cluster_frac`` of the nodes triggers one
    automatic re-run with twice the restarts; the overall best partition is
    then accepted as-is with ``tiny_cluster`` flagged if still present.
    """
    coords = embedding.coords
    n = coords.shape[0]
    if k > n:
        raise ParameterError(f"k={k} exceeds node count {n}")
    if k < 1 or restarts < 1:
        raise ParameterError("k and restarts must be >= 1")
    phi0 = np.asarray(phi0, dtype=float)

    spread = np.ptp(coords, axis=0).max() if n else 0.0
    if spread < 1e-12:
        # All points coincide: one effective cluster, flagged.
        assign = np.zeros(n, dtype=int)
        cent = np.repeat(coords[:1], k, axis=0) if n else np.zeros((k, coords.shape[1]))
        masses = np.zeros(k)
        masses[0] = phi0.sum()
        return Partition(k=k, assign=assign, centroids=cent, masses=masses,
                         distortion=0.0, coincident=True)

    seed_key = tuple(int(s) for s in np.atleast_1d(np.asarray(seed, dtype=object)).tolist())

    def run_round(n_restarts, salt):
        results = []
        for r in range(n_restarts):
            rng = np.random.default_rng([*seed_key, salt, r])
            results.append(_lloyd(coords, phi0, k, rng))
        return results

    results = run_round(restarts, 0)
    best = min(range(len(results)), key=lambda i: (results[i][3], i))
    tiny_limit = max(1.0, tiny_cluster_frac * n)
    tiny = np.bincount(results[best][0], minlength=k).min() < tiny_limit
    if tiny:
        results += run_round(2 * restarts, 1)
        best = min(range(len(results)), key=lambda i: (results[i][3], i))
        tiny = np.bincount(results[best][0], minlength=k).min() < tiny_limit

    assign, cent, masses, dist = results[best]
    return Partition(k=k, assign=assign, centroids=cent, masses=masses,
                     distortion=dist, tiny_cluster=bool(tiny),
                     restart_distortions=tuple(r[3] for r in results))


def distortion(partition: Partition, embedding: DiffusionEmbedding,
               phi0: np.ndarray) -> float:
    """Quantization distortion of a partition in diffusion space.

    Recomputes the mass-weighted centroids from the assignment, then sums
    phi0(x) ||Psi(x) - c(S_assign(x))||^2 over all nodes.
    """
    coords = embedding.coords
    assign = np.asarray(partition.assign)
    if assign.shape[0] != coords.shape[0]:
        raise InputError("partition does not cover all nodes")
    cent, _ = _weighted_centroids(coords, np.asarray(phi0, float), assign, partition.k)
    return float(np.sum(phi0 * ((coords - cent[assign]) ** 2).sum(axis=1)))


def distortion_pairwise(partition: Partition, embedding: DiffusionEmbedding,
                        phi0: np.ndarray) -> float:
    """Distortion via the equivalent weighted sum of pairwise distances.

    Independent evaluation path: half the per-cluster mass times the
    mass-normalized average squared pairwise distance among members.
    """
    coords = embedding.coords
    assign = np.asarray(partition.assign)
    phi0 = np.asarray(phi0, dtype=float)
    total = 0.0
    for i in range(partition.k):
        members = np.nonzero(assign == i)[0]
        if members.size == 0:
            continue
        mass = phi0[members].sum()
        w = phi0[members] / mass
        pts = coords[members]
        d2 = cdist(pts, pts, "sqeuclidean")
        total += 0.5 * mass * float(w @ d2 @ w)
    return total


def coarse_graph(chain: MarkovChain, embedding: DiffusionEmbedding,
                 partition: Partition, tau: int = 1, L: int = 1) -> CoarseGraph:
    """Aggregate a chain over a partition and check its spectral residuals.

    The coarse weight between clusters accumulates phi0(x) * P^tau(x, y)
    over member pairs; rows normalized by the cluster masses give the
    coarse transition matrix.  Aggregated left eigenvectors (and their
    ratios with the mass vector, the induced right vectors) are stored for
    l = 0..L together with their eigen-residual norms.
    """
    n = chain.n
    if L >= n:
        raise ParameterError("L must be < n")
    if L + 1 > embedding.right_vectors.shape[1]:
        raise ParameterError(f"embedding holds only {embedding.omega} nontrivial pairs, "
                             f"need L={L}")
    assign = np.asarray(partition.assign)
    k = partition.k
    sizes = np.bincount(assign, minlength=k)
    if (sizes == 0).any():
        raise InputError(f"cluster {int(np.nonzero(sizes == 0)[0][0])} is empty")

    Pt = np.linalg.matrix_power(chain.P.toarray(), tau)
    A = np.zeros((n, k))
    A[np.arange(n), assign] = 1.0
    omega_t = A.T @ (chain.phi0[:, None] * Pt) @ A
    mass = A.T @ chain.phi0
    P_tilde = omega_t / mass[:, None]

    lam = embedding.eigenvalues[: L + 1]
    phi_t = A.T @ embedding.left_vectors[:, : L + 1]      # (k, L+1)
    psi_t = phi_t / mass[:, None]
    res_left = np.empty(L + 1)
    res_right = np.empty(L + 1)
    for l in range(L + 1):
        e = phi_t[:, l] @ P_tilde - (lam[l] ** tau) * phi_t[:, l]
        f = P_tilde @ psi_t[:, l] - (lam[l] ** tau) * psi_t[:, l]
        res_left[l] = float(np.sum(e**2 / mass))
        res_right[l] = float(np.sum(f**2 * mass))
    return CoarseGraph(k=k, weights=omega_t, P=P_tilde,
                       coarse_masses=phi_t.T, coarse_vectors=psi_t.T,
                       residual_left=res_left, residual_right=res_right)
