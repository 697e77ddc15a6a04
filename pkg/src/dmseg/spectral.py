"""Gaussian affinity kernels, random-walk normalization, diffusion coordinates.

The embedding path is: build a sparse symmetric kernel over graph nodes,
normalize it into a row-stochastic transition matrix, eigendecompose the
symmetric conjugate of that matrix, and scale the nontrivial right
eigenvectors by powers of their eigenvalues to obtain per-node coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import eigh
from scipy.spatial import cKDTree

from .errors import DegenerateGraphError, InputError, NumericalError, ParameterError

DEFAULT_SPARSIFY_THRESHOLD = 5e-6

EIGEN_MAX_ITER = 10_000
EIGEN_TOL = 1e-10

# Below this size (or when most of the spectrum is requested) a dense
# symmetric eigensolver on the conjugate matrix is cheaper and exact.
DENSE_EIG_LIMIT = 600


@dataclass(frozen=True)
class AffinityGraph:
    """Sparse symmetric kernel with unit diagonal.

    ``weights`` is CSR with entries in [0, 1]; pairs farther apart than
    ``radius_r`` (geometric centroid distance) carry no entry at all.
    """

    n: int
    weights: sp.csr_matrix
    sigma_geo: float
    sigma_feat: float
    radius_r: float


@dataclass(frozen=True)
class MarkovChain:
    """Row-stochastic random walk derived from an affinity kernel.

    ``degree`` holds the kernel row sums after sparsification and ``phi0``
    the stationary distribution, which is the normalized degree vector.
    """

    n: int
    P: sp.csr_matrix
    degree: np.ndarray
    phi0: np.ndarray
    sparsify_threshold: float


@dataclass(frozen=True)
class DiffusionEmbedding:
    """Spectral coordinates of a Markov chain after ``tau`` time steps.

    ``eigenvalues``, ``right_vectors`` and ``left_vectors`` hold omega + 1
    pairs including the trivial one at index 0.  The right vectors are
    normalized to be orthonormal under the phi0 inner product and the left
    vectors are phi0 * psi, so left/right pairs are biorthogonal.  ``coords``
    excludes the trivial pair: column l-1 equals eigenvalue_l**tau * psi_l.
    ``q_tau`` is the largest index j with |lambda_j|**tau above ``delta``
    times |lambda_1|**tau, i.e. the number of coordinates that matter at the
    requested relative precision.
    """

    tau: int
    omega: int
    eigenvalues: np.ndarray
    right_vectors: np.ndarray
    left_vectors: np.ndarray
    coords: np.ndarray
    delta: float
    q_tau: int

    def truncate(self, omega: int) -> "DiffusionEmbedding":
        """View of this embedding keeping only the first ``omega`` coords."""
        if omega > self.omega:
            raise ParameterError(
                f"cannot truncate to omega={omega}, only {self.omega} computed")
        if omega == self.omega:
            return self
        lam = self.eigenvalues[: omega + 1]
        mask = np.abs(lam[1:]) ** self.tau > self.delta * abs(lam[1]) ** self.tau
        q = int(np.max(np.nonzero(mask)[0]) + 1) if mask.any() else 0
        return DiffusionEmbedding(
            tau=self.tau,
            omega=omega,
            eigenvalues=lam,
            right_vectors=self.right_vectors[:, : omega + 1],
            left_vectors=self.left_vectors[:, : omega + 1],
            coords=self.coords[:, :omega],
            delta=self.delta,
            q_tau=q,
        )


def affinity_from_dense(weights, sigma_geo=1.0, sigma_feat=1.0, radius_r=np.inf):
    """Wrap an explicit dense symmetric kernel matrix as an AffinityGraph.

    Intended for synthetic graphs (tests, toy examples).  Validates symmetry,
    the [0, 1] range and the unit diagonal.
    """
    W = np.asarray(weights, dtype=float)
    n = W.shape[0]
    if W.shape != (n, n):
        raise ParameterError("kernel must be square")
    if not np.allclose(W, W.T, atol=1e-12):
        raise ParameterError("kernel must be symmetric")
    if W.min() < 0 or W.max() > 1 + 1e-12:
        raise ParameterError("kernel weights must lie in [0, 1]")
    if not np.allclose(np.diag(W), 1.0, atol=1e-12):
        raise ParameterError("kernel diagonal must be 1")
    return AffinityGraph(n=n, weights=sp.csr_matrix(W), sigma_geo=float(sigma_geo),
                         sigma_feat=float(sigma_feat), radius_r=float(radius_r))


def build_affinity(nodes, sigma_geo, sigma_feat, radius_r) -> AffinityGraph:
    """Build the Gaussian product kernel over a node grid.

    The weight of a pair is exp(-d_geo^2 / 2 sigma_geo^2) times
    exp(-d_feat^2 / 2 sigma_feat^2), with d_geo the Euclidean centroid
    distance in pixel units and d_feat the Euclidean feature distance.
    Pairs with d_geo >= radius_r are omitted entirely; the diagonal is 1.

    Parameters
    ----------
    nodes : NodeGrid
        Node centroids and feature vectors (see ``dmseg.nodes``).
    sigma_geo, sigma_feat : float
        Positive scale factors for the two Gaussian terms.
    radius_r : float
        Positive neighborhood cutoff in centroid units.
    """
    if sigma_geo <= 0 or sigma_feat <= 0:
        raise ParameterError("sigma_geo and sigma_feat must be positive")
    if radius_r <= 0:
        raise ParameterError("radius_r must be positive")
    cents = np.asarray(nodes.centroids, dtype=float)
    feats = np.asarray(nodes.features, dtype=float)
    n = cents.shape[0]
    if n == 0:
        raise InputError("node grid is empty")
    if not np.isfinite(feats).all():
        bad = int(np.nonzero(~np.isfinite(feats).all(axis=1))[0][0])
        raise InputError(f"node {bad} has an undefined feature")

    tree = cKDTree(cents)
    pairs = tree.query_pairs(radius_r, output_type="ndarray")
    return _assemble_affinity(n, cents, feats, pairs, sigma_geo, sigma_feat, radius_r)


def _assemble_affinity(n, cents, feats, pairs, sigma_geo, sigma_feat, radius_r):
    if pairs.size:
        i = pairs[:, 0]
        j = pairs[:, 1]
        dgeo2 = ((cents[i] - cents[j]) ** 2).sum(axis=1)
        keep = dgeo2 < radius_r * radius_r  # strict: weight is 0 at the radius
        i, j, dgeo2 = i[keep], j[keep], dgeo2[keep]
        dfeat2 = ((feats[i] - feats[j]) ** 2).sum(axis=1)
        w = np.exp(-dgeo2 / (2.0 * sigma_geo**2) - dfeat2 / (2.0 * sigma_feat**2))
        rows = np.concatenate([i, j, np.arange(n)])
        cols = np.concatenate([j, i, np.arange(n)])
        data = np.concatenate([w, w, np.ones(n)])
    else:
        rows = cols = np.arange(n)
        data = np.ones(n)
    W = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    return AffinityGraph(n=n, weights=W, sigma_geo=float(sigma_geo),
                         sigma_feat=float(sigma_feat), radius_r=float(radius_r))


def normalize_markov(graph: AffinityGraph,
                     sparsify_threshold: float = DEFAULT_SPARSIFY_THRESHOLD) -> MarkovChain:
    """Turn a kernel into a row-stochastic, reversible Markov chain.

    Rows of the kernel are normalized by their sums; normalized entries below
    ``sparsify_threshold`` are zeroed and rows renormalized.  The pruning is
    applied symmetrically (a pair is dropped when the normalized entry falls
    below the threshold in either direction) so the surviving kernel stays
    symmetric and detailed balance holds exactly.  Diagonal entries are never
    pruned.
    """
    if sparsify_threshold < 0:
        raise ParameterError("sparsify_threshold must be >= 0")
    K = graph.weights.tocoo()
    n = graph.n
    s0 = np.asarray(graph.weights.sum(axis=1)).ravel()
    if (s0 <= 0).any():
        bad = int(np.nonzero(s0 <= 0)[0][0])
        raise DegenerateGraphError(f"node {bad} has zero kernel degree")

    r, c, v = K.row, K.col, K.data
    # K is symmetric, so the transposed entry value equals v and only the
    # normalizing row sum changes between the two directions.
    p_rc = v / s0[r]
    p_cr = v / s0[c]
    keep = ((p_rc >= sparsify_threshold) & (p_cr >= sparsify_threshold)) | (r == c)
    r, c, v = r[keep], c[keep], v[keep]

    K2 = sp.coo_matrix((v, (r, c)), shape=(n, n)).tocsr()
    s = np.asarray(K2.sum(axis=1)).ravel()
    if (s <= 0).any():
        bad = int(np.nonzero(s <= 0)[0][0])
        raise DegenerateGraphError(
            f"node {bad} lost all edges after thresholding at {sparsify_threshold}")
    P = sp.diags(1.0 / s) @ K2
    phi0 = s / s.sum()
    return MarkovChain(n=n, P=P.tocsr(), degree=s, phi0=phi0,
                       sparsify_threshold=float(sparsify_threshold))


def symmetric_conjugate(chain: MarkovChain) -> sp.csr_matrix:
    """D^(1/2) P D^(-1/2) with D = diag(phi0); symmetric for reversible P."""
    root = np.sqrt(chain.phi0)
    S = sp.diags(root) @ chain.P @ sp.diags(1.0 / root)
    S = (S + S.T) * 0.5  # guard against round-off asymmetry
    return S.tocsr()


def spectral_decompose(chain: MarkovChain, omega: int, tau: int = 1,
                       delta: float = 0.01) -> DiffusionEmbedding:
    """Eigendecompose the chain and form diffusion coordinates.

    Eigenpairs come from the symmetric conjugate of P, which shares P's
    eigenvalues; right eigenvectors are recovered as psi = v / sqrt(phi0)
    and left ones as phi = v * sqrt(phi0).  Pairs are sorted by descending
    eigenvalue and each psi's sign is fixed so its entry of largest
    magnitude is positive.  The trivial pair (eigenvalue 1, constant psi)
    is kept in the vector arrays but excluded from ``coords``.

    Small problems use a dense symmetric eigensolver; large ones a
    deterministic Lanczos iteration (fixed start vector, iteration cap
    10000, tolerance 1e-10).
    """
    n = chain.n
    if omega < 1 or omega >= n:
        raise ParameterError(f"omega must satisfy 1 <= omega < n (got {omega}, n={n})")
    if tau < 1:
        raise ParameterError("tau must be >= 1")
    k_eig = omega + 1
    S = symmetric_conjugate(chain)

    if n <= DENSE_EIG_LIMIT or k_eig >= max(n - 2, int(0.25 * n)):
        vals, vecs = eigh(S.toarray())
        vals, vecs = vals[::-1][:k_eig], vecs[:, ::-1][:, :k_eig]
    else:
        v0 = np.full(n, 1.0 / np.sqrt(n))
        try:
            vals, vecs = spla.eigsh(S, k=k_eig, which="LA", v0=v0,
                                    maxiter=EIGEN_MAX_ITER, tol=EIGEN_TOL)
        except spla.ArpackNoConvergence as exc:
            got = len(exc.eigenvalues)
            raise NumericalError(
                f"eigensolver converged only {got}/{k_eig} pairs "
                f"after {EIGEN_MAX_ITER} iterations") from exc
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]

    root = np.sqrt(chain.phi0)
    psi = vecs / root[:, None]
    # Deterministic sign: largest-magnitude entry of each psi is positive.
    flip = psi[np.abs(psi).argmax(axis=0), np.arange(k_eig)] < 0
    psi[:, flip] *= -1.0
    phi = psi * chain.phi0[:, None]

    lam = vals
    coords = psi[:, 1:] * (lam[1:] ** tau)[None, :]
    mask = np.abs(lam[1:]) ** tau > delta * abs(lam[1]) ** tau
    q_tau = int(np.max(np.nonzero(mask)[0]) + 1) if mask.any() else 0
    return DiffusionEmbedding(tau=int(tau), omega=int(omega), eigenvalues=lam,
                              right_vectors=psi, left_vectors=phi, coords=coords,
                              delta=float(delta), q_tau=q_tau)


def diffusion_distance(chain: MarkovChain, embedding: DiffusionEmbedding,
                       x: int, z: int, tau: int) -> float:
    """Squared diffusion distance between nodes ``x`` and ``z``.

    Evaluates the spectral sum over the embedding's nontrivial pairs,
    sum_j lambda_j^(2 tau) (psi_j(x) - psi_j(z))^2.  With the full spectrum
    this equals the weighted L2 distance between the rows of P^tau.
    """
    if not (0 <= x < chain.n and 0 <= z < chain.n):
        raise InputError(f"node index out of range: {x}, {z} (n={chain.n})")
    if x == z:
        return 0.0
    lam = embedding.eigenvalues[1:]
    dpsi = embedding.right_vectors[x, 1:] - embedding.right_vectors[z, 1:]
    return float(np.sum(lam ** (2 * tau) * dpsi**2))
