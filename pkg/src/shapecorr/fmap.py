"""Functional-map estimation and conversions between map representations."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .maps import FunctionalMap, PointMap
from .spectral import SpectralBasis, project

__all__ = [
    "FmapSolveContext",
    "solve_fmap",
    "fmap_to_p2p",
    "p2p_to_fmap",
    "nn_map",
    "soft_correspondence",
    "soft_correspondence_backward",
    "pairwise_sqdist",
]

RIDGE = 1e-9


def pairwise_sqdist(F: np.ndarray, G: np.ndarray) -> np.ndarray:
    """All-pairs squared Euclidean distances, (n_F, n_G)."""
    d2 = (F * F).sum(axis=1)[:, None] + (G * G).sum(axis=1)[None, :] - 2.0 * F @ G.T
    return np.maximum(d2, 0.0)


@dataclass
class FmapSolveContext:
    """Everything needed to differentiate through one solve_fmap call."""

    A_spec: np.ndarray          # (k, d)
    B_spec: np.ndarray          # (k, d)
    evals_from: np.ndarray
    evals_to: np.ndarray
    lam: float
    C: np.ndarray               # (k, k) solution
    factors: list               # per-row Cholesky factors of the row systems


def solve_fmap(A_spec: np.ndarray, B_spec: np.ndarray,
               evals_from: np.ndarray, evals_to: np.ndarray,
               lam: float = 0.0, from_id: str = "", to_id: str = "",
               want_ctx: bool = False):
    """Least-squares spectral map with Laplacian commutativity regularization.

    Minimizes ||C A - B||_F^2 + lam * ||C diag(evals_from) - diag(evals_to) C||_F^2.
    Because the spectra are diagonal the problem decouples: row i of C solves
    (A A^T + lam D_i) c_i = A b_i with D_i = diag((evals_from - evals_to[i])^2).

    A rank-deficient system at lam=0 is ridge-regularized (1e-9) with a
    warning and the returned map flagged.
    """
    A_spec = np.asarray(A_spec, dtype=np.float64)
    B_spec = np.asarray(B_spec, dtype=np.float64)
    if A_spec.shape != B_spec.shape:
        raise ValueError("spectral feature matrices must have matching shapes")
    k, d = A_spec.shape
    if d < 1:
        raise ValueError("need at least one descriptor channel")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    evals_from = np.asarray(evals_from, dtype=np.float64)
    evals_to = np.asarray(evals_to, dtype=np.float64)

    G = A_spec @ A_spec.T
    rhs = A_spec @ B_spec.T           # column i is A b_i
    C = np.empty((k, k))
    factors = []
    regularized = False
    for i in range(k):
        M = G + lam * np.diag((evals_from - evals_to[i]) ** 2)
        try:
            fac = cho_factor(M, lower=True)
        except LinAlgError:
            regularized = True
            fac = cho_factor(M + RIDGE * np.eye(k), lower=True)
        factors.append(fac)
        C[i] = cho_solve(fac, rhs[:, i])
    if regularized:
        warnings.warn("rank-deficient functional-map system; added 1e-9 ridge")

    fmap = FunctionalMap(C, from_id, to_id, regularized=regularized)
    if want_ctx:
        ctx = FmapSolveContext(A_spec, B_spec, evals_from, evals_to, lam, C, factors)
        return fmap, ctx
    return fmap


def fmap_to_p2p(fmap: FunctionalMap, Phi_from: np.ndarray,
                Phi_to: np.ndarray) -> PointMap:
    """Pointwise map extracted from a spectral map.

    For each vertex y of the *to* shape, the nearest row of Phi_from @ C^T to
    (Phi_to)_y; the result runs opposite to the functional map
    (to-shape -> from-shape).  Ties break to the lowest index.
    """
    emb_from = Phi_from @ fmap.C.T                 # (n_from, k)
    d2 = pairwise_sqdist(Phi_to, emb_from)         # (n_to, n_from)
    idx = np.argmin(d2, axis=1)
    return PointMap(fmap.to_id, fmap.from_id, Phi_from.shape[0], indices=idx)


def p2p_to_fmap(pmap: PointMap, basis_from: SpectralBasis,
                basis_to: SpectralBasis) -> FunctionalMap:
    """Least-squares spectral representation of the pull-back along a hard map.

    A point map to_shape -> from_shape induces the functional map
    from_shape -> to_shape: C = Phi_to^T A_to Phi_from[map].
    """
    if not pmap.is_hard:
        raise ValueError("p2p_to_fmap needs a hard map")
    if pmap.n_from != basis_to.n or pmap.n_to != basis_from.n:
        raise ValueError("map size does not match bases")
    pulled = basis_from.Phi[pmap.indices]          # (n_to, k)
    C = project(basis_to, pulled)                  # Phi_to^T A_to Pi Phi_from
    return FunctionalMap(C, from_id=pmap.to_id, to_id=pmap.from_id)


def nn_map(F: np.ndarray, G: np.ndarray, from_id: str = "",
           to_id: str = "") -> PointMap:
    """Hard nearest-neighbor map in feature space, one row of G per row of F."""
    F = np.asarray(F, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if F.shape[1] != G.shape[1]:
        raise ValueError("feature dimensions differ")
    idx = np.argmin(pairwise_sqdist(F, G), axis=1)
    return PointMap(from_id, to_id, G.shape[0], indices=idx)


def soft_correspondence(F: np.ndarray, G: np.ndarray, from_id: str = "",
                        to_id: str = "") -> PointMap:
    """Row-stochastic soft map: softmax over rows of -||F_i - G_j||.

    Uses unsquared Euclidean distances with max-subtraction stabilization.
    """
    S = _soft_matrix(F, G)
    return PointMap(from_id, to_id, G.shape[0], soft=S)


def _soft_matrix(F: np.ndarray, G: np.ndarray) -> np.ndarray:
    dist = np.sqrt(pairwise_sqdist(F, G))
    z = -dist
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def soft_correspondence_backward(F: np.ndarray, G: np.ndarray, S: np.ndarray,
                                 dS: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Chain gradients w.r.t. a soft matrix back to the features.

    S must be the matrix produced by soft_correspondence(F, G).  Rows with a
    coincident feature pair (zero distance) get a zero subgradient there.
    """
    dist = np.sqrt(pairwise_sqdist(F, G))
    # softmax backward per row: dz = S * (dS - sum(dS * S))
    dz = S * (dS - (dS * S).sum(axis=1, keepdims=True))
    # z_ij = -dist_ij; d dist/dF_i = (F_i - G_j)/dist
    coeff = np.where(dist > 1e-12, -dz / np.maximum(dist, 1e-300), 0.0)
    dF = coeff.sum(axis=1)[:, None] * F - coeff @ G
    dG = coeff.sum(axis=0)[:, None] * G - coeff.T @ F
    return dF, dG
