"""Discrete Laplace-Beltrami operators, truncated eigenbases, and descriptors.

The stiffness W is positive semidefinite (cotangent convention with negative
off-diagonals), the mass A is the diagonal of lumped vertex areas, and bases
solve the generalized problem W Phi = A Phi diag(evals) with A-orthonormal
columns.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy import sparse
from scipy.sparse.linalg import ArpackNoConvergence, eigsh
from scipy.spatial import cKDTree

from .geometry import Shape

__all__ = [
    "LaplacianPair",
    "SpectralBasis",
    "Descriptor",
    "cotan_laplacian",
    "pointcloud_laplacian",
    "eigenbasis",
    "project",
    "reconstruct",
    "heat_diffuse",
    "hks",
    "wks",
    "shape_hash",
    "save_basis",
    "load_basis",
]

# contract bounds enforced on every constructed basis
EIGEN_RESIDUAL_TOL = 1e-6
ORTHONORMALITY_TOL = 1e-8

DENSE_SOLVE_LIMIT = 2000


class EigensolverError(RuntimeError):
    """Eigensolve failed or missed the contract bounds; carries the residual."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


@dataclass
class LaplacianPair:
    """Stiffness W (sparse, symmetric, rows sum to 0) and lumped mass diagonal A."""

    W: sparse.csr_matrix
    A: np.ndarray  # (n,) strictly positive diagonal entries

    @property
    def n(self) -> int:
        return len(self.A)


@dataclass
class SpectralBasis:
    """First k generalized eigenpairs of (W, A); columns of Phi are A-orthonormal."""

    Phi: np.ndarray     # (n, k)
    evals: np.ndarray   # (k,) nonnegative, nondecreasing
    A: np.ndarray       # (n,) mass diagonal
    lap: LaplacianPair | None = None

    @property
    def n(self) -> int:
        return self.Phi.shape[0]

    @property
    def k(self) -> int:
        return self.Phi.shape[1]


@dataclass
class Descriptor:
    """Per-vertex descriptor values, (n, t)."""

    values: np.ndarray
    kind: str


def cotan_laplacian(shape: Shape) -> LaplacianPair:
    """Cotangent stiffness and barycentric lumped mass of a triangle mesh.

    Off-diagonal W[u, v] = -(cot a + cot b)/2 over the faces sharing edge
    (u, v); diagonals make rows sum to zero.  A[v] is one third of the area
    of the triangles incident to v.
    """
    if not shape.is_mesh:
        raise ValueError("cotan_laplacian needs a triangle mesh")
    v, f = shape.vertices, shape.faces
    n = shape.n_vertices

    # angle at corner c of each face, opposite edge (a, b)
    rows, cols, vals = [], [], []
    for c in range(3):
        a, b = (c + 1) % 3, (c + 2) % 3
        ea = v[f[:, a]] - v[f[:, c]]
        eb = v[f[:, b]] - v[f[:, c]]
        cross = np.linalg.norm(np.cross(ea, eb), axis=1)
        if np.any(cross <= 0):
            raise ValueError("zero-area face in cotangent assembly")
        cot = (ea * eb).sum(axis=1) / cross
        rows.append(f[:, a]); cols.append(f[:, b]); vals.append(-0.5 * cot)
        rows.append(f[:, b]); cols.append(f[:, a]); vals.append(-0.5 * cot)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)

    # non-manifold check: an undirected edge may belong to at most 2 faces
    e = np.sort(np.stack([rows, cols], axis=1), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    if counts.max() > 4:  # each face contributes the edge twice
        raise ValueError("non-manifold edge shared by more than 2 faces")

    W = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    W = W - sparse.diags(np.asarray(W.sum(axis=1)).ravel())
    W = W.tocsr()

    areas = shape.face_areas()
    A = np.zeros(n)
    for c in range(3):
        np.add.at(A, f[:, c], areas / 3.0)
    if np.any(A <= 0):
        raise ValueError("vertex with zero lumped area (unreferenced vertex?)")
    return LaplacianPair(W, A)


def pointcloud_laplacian(shape: Shape, k_nn: int = 8,
                         bandwidth: float | None = None) -> LaplacianPair:
    """Gaussian-weighted kNN graph Laplacian for point clouds.

    Edge weights exp(-d^2/bandwidth^2) on the max-symmetrized kNN graph.  The
    stiffness carries the kernel calibration 4/(bandwidth^2 * total_weight)
    so that low-order generalized eigenvalues are comparable to the mesh
    cotangent operator; the mass diagonal is the normalized row degree
    (trace(A) = 1).  bandwidth=None uses the mean distance to the
    ceil(k_nn/2)-th neighbor, which keeps the kernel resolved by the local
    sample spacing.
    """
    n = shape.n_vertices
    if not (3 <= k_nn < n):
        raise ValueError(f"k_nn must be in [3, {n})")
    tree = cKDTree(shape.vertices)
    dist, idx = tree.query(shape.vertices, k=k_nn + 1)
    dist, idx = dist[:, 1:], idx[:, 1:]  # drop self
    if bandwidth is None:
        bandwidth = float(dist[:, max(0, (k_nn + 1) // 2 - 1)].mean())
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")

    rows = np.repeat(np.arange(n), k_nn)
    cols = idx.ravel()
    w = np.exp(-(dist.ravel() ** 2) / bandwidth ** 2)
    K = sparse.csr_matrix((w, (rows, cols)), shape=(n, n))
    K = K.maximum(K.T)  # mutualize: keep an edge if either endpoint selected it

    deg = np.asarray(K.sum(axis=1)).ravel()
    total = deg.sum()
    scale = 4.0 / (bandwidth ** 2 * total)
    W = (sparse.diags(deg) - K) * scale
    A = deg / total
    return LaplacianPair(W.tocsr(), A)


def _fix_signs(Phi: np.ndarray) -> np.ndarray:
    """Make the first non-negligible entry of each column positive."""
    out = Phi.copy()
    for j in range(Phi.shape[1]):
        col = Phi[:, j]
        nz = np.nonzero(np.abs(col) > 1e-8 * np.abs(col).max())[0]
        if len(nz) and col[nz[0]] < 0:
            out[:, j] = -col
    return out


def _check_basis(lap: LaplacianPair, Phi: np.ndarray, evals: np.ndarray) -> None:
    g = Phi.T @ (lap.A[:, None] * Phi)
    ortho = np.abs(g - np.eye(Phi.shape[1])).max()
    if ortho > ORTHONORMALITY_TOL:
        raise EigensolverError(
            f"A-orthonormality violated by {ortho:.2e}", residual=ortho)
    wphi = lap.W @ Phi
    res = np.linalg.norm(wphi - lap.A[:, None] * Phi * evals)
    denom = np.linalg.norm(wphi)
    rel = res / denom if denom > 0 else res
    if rel > EIGEN_RESIDUAL_TOL:
        raise EigensolverError(f"eigen residual {rel:.2e} exceeds bound", residual=rel)


def eigenbasis(lap: LaplacianPair, k: int) -> SpectralBasis:
    """Smallest-k generalized eigenpairs of (W, A).

    Dense solve below DENSE_SOLVE_LIMIT vertices, shift-invert Lanczos above;
    either path must meet the residual and orthonormality bounds.  Eigenvector
    signs are fixed so the first non-negligible entry of each column is
    positive.
    """
    n = lap.n
    if not (1 <= k < n):
        raise ValueError(f"k must be in [1, {n})")
    if n <= DENSE_SOLVE_LIMIT:
        Wd = lap.W.toarray()
        Wd = 0.5 * (Wd + Wd.T)
        evals, Phi = sla.eigh(Wd, np.diag(lap.A),
                              subset_by_index=[0, k - 1])
    else:
        try:
            evals, Phi = eigsh(lap.W, k=k, M=sparse.diags(lap.A),
                               sigma=-1e-4, which="LM")
        except ArpackNoConvergence as exc:
            raise EigensolverError(f"Lanczos failed to converge: {exc}") from exc
    order = np.argsort(evals)
    evals = np.clip(evals[order], 0.0, None)
    Phi = _fix_signs(Phi[:, order])
    _check_basis(lap, Phi, evals)
    return SpectralBasis(Phi=Phi, evals=evals, A=lap.A.copy(), lap=lap)


def project(basis: SpectralBasis, F: np.ndarray) -> np.ndarray:
    """Spectral coefficients of per-vertex functions: Phi^T A F, (k, d)."""
    F = np.asarray(F, dtype=np.float64)
    if F.shape[0] != basis.n:
        raise ValueError(f"F has {F.shape[0]} rows, basis expects {basis.n}")
    return basis.Phi.T @ (basis.A[:, None] * F)


def reconstruct(basis: SpectralBasis, coeffs: np.ndarray) -> np.ndarray:
    """Per-vertex functions from spectral coefficients: Phi @ coeffs, (n, d)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[0] != basis.k:
        raise ValueError(f"coeffs has {coeffs.shape[0]} rows, basis has k={basis.k}")
    return basis.Phi @ coeffs


def heat_diffuse(basis: SpectralBasis, F: np.ndarray, times) -> np.ndarray:
    """Spectral heat diffusion, one time per channel.

    Channel c becomes Phi diag(exp(-evals * t_c)) Phi^T A F[:, c]; t=0 is the
    plain basis reprojection.
    """
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    if F.shape[0] == 1 and basis.n != 1:
        F = F.T
    times = np.broadcast_to(np.asarray(times, dtype=np.float64), (F.shape[1],))
    if np.any(times < 0):
        raise ValueError("diffusion times must be >= 0")
    coeff = project(basis, F)                                  # (k, d)
    decay = np.exp(-basis.evals[:, None] * times[None, :])     # (k, d)
    return basis.Phi @ (decay * coeff)


def _positive_spectrum(basis: SpectralBasis):
    pos = basis.evals > 1e-8
    if np.count_nonzero(pos) < 1:
        raise ValueError("descriptor needs at least one positive eigenvalue")
    return basis.evals[pos], basis.Phi[:, pos]


def hks(basis: SpectralBasis, n_times: int = 100) -> Descriptor:
    """Heat kernel signature sampled at log-spaced times.

    HKS_i(t) = sum_j exp(-evals_j t) Phi[i, j]^2 with times log-spaced over
    [4 ln 10 / evals_max, 4 ln 10 / evals_min+] (smallest positive eigenvalue).
    """
    ev_pos, _ = _positive_spectrum(basis)
    t = np.geomspace(4 * np.log(10) / ev_pos[-1],
                     4 * np.log(10) / ev_pos[0], n_times)
    decay = np.exp(-np.outer(basis.evals, t))          # (k, t)
    values = (basis.Phi ** 2) @ decay                  # (n, t)
    return Descriptor(values, "HKS")


def wks(basis: SpectralBasis, n_energies: int = 100) -> Descriptor:
    """Wave kernel signature with the standard log-normal energy weighting."""
    ev_pos, phi_pos = _positive_spectrum(basis)
    log_ev = np.log(ev_pos)
    sigma = 7.0 * (log_ev[-1] - log_ev[0]) / n_energies
    if sigma <= 0:
        sigma = 1.0  # single distinct eigenvalue; degenerate but defined
    energies = np.linspace(log_ev[0] + 2 * sigma, log_ev[-1] - 2 * sigma,
                           n_energies)
    weights = np.exp(-((energies[None, :] - log_ev[:, None]) ** 2)
                     / (2 * sigma ** 2))               # (k+, e)
    values = (phi_pos ** 2) @ weights / weights.sum(axis=0)[None, :]
    return Descriptor(values, "WKS")


# ---------------------------------------------------------------------------
# basis cache


def shape_hash(shape: Shape) -> str:
    """Content hash of a shape's geometry (vertices + faces)."""
    h = hashlib.sha256()
    h.update(shape.vertices.tobytes())
    if shape.is_mesh:
        h.update(shape.faces.tobytes())
    else:
        h.update(b"pointcloud")
    return h.hexdigest()


def save_basis(basis: SpectralBasis, path, source_hash: str) -> None:
    """Write a basis cache; reloading reproduces downstream solves bit-exactly."""
    np.savez(path, n=basis.n, k=basis.k, evals=basis.evals, Phi=basis.Phi,
             A=basis.A, source_hash=np.array(source_hash))


def load_basis(path) -> tuple[SpectralBasis, str]:
    with np.load(path) as data:
        basis = SpectralBasis(Phi=data["Phi"], evals=data["evals"],
                              A=data["A"], lap=None)
        return basis, str(data["source_hash"])
