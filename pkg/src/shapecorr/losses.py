"""Training objectives: values plus exact gradients.

Gradients are returned with respect to feature embeddings (dF, dG) or
spectral map matrices (dC, dC2); every one of them is checked against central
finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .fmap import (FmapSolveContext, _soft_matrix, pairwise_sqdist,
                   soft_correspondence_backward)
from .maps import PointMap

__all__ = [
    "LossValue",
    "nce_loss",
    "lie_loss",
    "cycle_loss",
    "cycle_loss_features",
    "bijectivity_loss",
    "orthogonality_loss",
    "chamfer_spectral_loss",
    "fmap_backward",
]


@dataclass
class LossValue:
    """A scalar objective and whichever gradients the operation provides."""

    value: float
    dF: np.ndarray | None = None   # w.r.t. source features
    dG: np.ndarray | None = None   # w.r.t. target features
    dC: np.ndarray | None = None   # w.r.t. the (first) spectral map
    dC2: np.ndarray | None = None  # w.r.t. the second spectral map, if any


def nce_loss(F: np.ndarray, G: np.ndarray, pairs, tau: float = 0.07,
             with_grads: bool = True) -> LossValue:
    """Contrastive cross-entropy over feature distances, averaged per pair.

    For each matched pair (i, j) the logits are -||F_i - G_k||^2 / tau over
    the second components k of all pairs; the pair's own j is the positive.
    Computed with max-subtracted log-sum-exp.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.ndim != 2 or pairs.shape[1] != 2 or len(pairs) < 1:
        raise ValueError("pairs must be a nonempty (P, 2) index array")
    si, tj = pairs[:, 0], pairs[:, 1]
    if si.min() < 0 or si.max() >= len(F) or tj.min() < 0 or tj.max() >= len(G):
        raise ValueError("pair index out of range")
    Fp = F[si]                      # (P, d)
    Gq = G[tj]                      # (P, d)
    logits = -pairwise_sqdist(Fp, Gq) / tau
    zmax = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - zmax)
    lse = np.log(e.sum(axis=1)) + zmax[:, 0]
    P = len(pairs)
    value = float(np.mean(lse - np.diag(logits)))
    if not with_grads:
        return LossValue(value)
    soft = e / e.sum(axis=1, keepdims=True)
    W = (soft - np.eye(P)) / P      # dL/dlogits
    # logits[p, q] = -||Fp[p] - Gq[q]||^2 / tau
    rw, cw = W.sum(axis=1), W.sum(axis=0)
    dFp = (-2.0 / tau) * (rw[:, None] * Fp - W @ Gq)
    dGq = (-2.0 / tau) * (cw[:, None] * Gq - W.T @ Fp)
    dF = np.zeros_like(F)
    dG = np.zeros_like(G)
    np.add.at(dF, si, dFp)
    np.add.at(dG, tj, dGq)
    return LossValue(value, dF=dF, dG=dG)


def lie_loss(F: np.ndarray, G: np.ndarray, coords: np.ndarray,
             gt: PointMap, with_grads: bool = True) -> LossValue:
    """Squared mismatch between the soft map's pull-back of the target
    coordinates and the ground-truth pull-back.

    The soft matrix S is built from (F, G); gt must run in the same direction
    (F's shape -> G's shape), and coords are the target-shape coordinates.
    """
    if not gt.is_hard:
        raise ValueError("lie_loss needs a hard ground-truth map")
    coords = np.asarray(coords, dtype=np.float64)
    if gt.n_from != len(F) or gt.n_to != len(G):
        raise ValueError(
            f"gt direction {gt.direction} does not match the soft map "
            f"orientation ({len(F)} -> {len(G)})")
    if coords.shape[0] != len(G):
        raise ValueError("coords must live on the target shape")
    S = _soft_matrix(F, G)
    resid = S @ coords - coords[gt.indices]
    value = float((resid ** 2).sum())
    if not with_grads:
        return LossValue(value)
    dS = 2.0 * resid @ coords.T
    dF, dG = soft_correspondence_backward(F, G, S, dS)
    return LossValue(value, dF=dF, dG=dG)


def _as_soft(m) -> np.ndarray:
    if isinstance(m, PointMap):
        if m.is_hard:
            raise ValueError("cycle_loss needs soft maps")
        return m.soft
    return np.asarray(m, dtype=np.float64)


def cycle_loss(S_MN, S_NM, X_N: np.ndarray) -> LossValue:
    """Round-trip reconstruction error ||X_N - S_NM S_MN X_N||_F^2."""
    S_MN, S_NM = _as_soft(S_MN), _as_soft(S_NM)
    X_N = np.asarray(X_N, dtype=np.float64)
    if S_MN.shape != (S_NM.shape[1], S_NM.shape[0]) or X_N.shape[0] != S_NM.shape[0]:
        raise ValueError("soft maps are not composable with these coordinates")
    resid = S_NM @ (S_MN @ X_N) - X_N
    return LossValue(float((resid ** 2).sum()))


def cycle_loss_features(F: np.ndarray, G: np.ndarray, X_N: np.ndarray,
                        with_grads: bool = True) -> LossValue:
    """Cycle loss with both soft maps built from features; gradients flow
    through both softmaxes into dF and dG."""
    S_MN = _soft_matrix(F, G)
    S_NM = _soft_matrix(G, F)
    X_N = np.asarray(X_N, dtype=np.float64)
    P = S_MN @ X_N
    resid = S_NM @ P - X_N
    value = float((resid ** 2).sum())
    if not with_grads:
        return LossValue(value)
    dQ = 2.0 * resid
    dS_NM = dQ @ P.T
    dP = S_NM.T @ dQ
    dS_MN = dP @ X_N.T
    dF1, dG1 = soft_correspondence_backward(F, G, S_MN, dS_MN)
    dG2, dF2 = soft_correspondence_backward(G, F, S_NM, dS_NM)
    return LossValue(value, dF=dF1 + dF2, dG=dG1 + dG2)


def bijectivity_loss(C_MN: np.ndarray, C_NM: np.ndarray,
                     with_grads: bool = True) -> LossValue:
    """||C_MN C_NM - I||_F^2 with gradients for both maps."""
    C_MN = np.asarray(C_MN, dtype=np.float64)
    C_NM = np.asarray(C_NM, dtype=np.float64)
    if C_MN.shape != C_NM.shape or C_MN.shape[0] != C_MN.shape[1]:
        raise ValueError("maps must be square with equal k")
    E = C_MN @ C_NM - np.eye(C_MN.shape[0])
    value = float((E ** 2).sum())
    if not with_grads:
        return LossValue(value)
    return LossValue(value, dC=2.0 * E @ C_NM.T, dC2=2.0 * C_MN.T @ E)


def orthogonality_loss(C: np.ndarray, with_grads: bool = True) -> LossValue:
    """||C^T C - I||_F^2."""
    C = np.asarray(C, dtype=np.float64)
    if C.shape[0] != C.shape[1]:
        raise ValueError("map must be square")
    E = C.T @ C - np.eye(C.shape[0])
    value = float((E ** 2).sum())
    if not with_grads:
        return LossValue(value)
    return LossValue(value, dC=2.0 * C @ (E + E.T))


def chamfer_spectral_loss(coords: np.ndarray, Phi: np.ndarray, A: np.ndarray,
                          C_MN: np.ndarray, C_NM: np.ndarray,
                          with_grads: bool = True) -> LossValue:
    """Chamfer distance between a shape's band-limited reconstruction and its
    round trip through the other shape's spectral space.

    source = Phi Phi^+ X and target = Phi C_NM C_MN Phi^+ X; the loss is the
    symmetric sum of nearest-neighbor distances.  Subgradients hold the
    achieved-min pairings fixed.
    """
    coords = np.asarray(coords, dtype=np.float64)
    P = Phi.T @ (A[:, None] * coords)          # (k, 3) spectral coordinates
    src = Phi @ P
    Q = C_NM @ (C_MN @ P)
    tgt = Phi @ Q
    d = np.sqrt(pairwise_sqdist(src, tgt))
    j_star = np.argmin(d, axis=1)              # nearest target per source
    i_star = np.argmin(d, axis=0)              # nearest source per target
    n = len(src)
    d_fwd = d[np.arange(n), j_star]
    d_bwd = d[i_star, np.arange(n)]
    value = float(d_fwd.sum() + d_bwd.sum())
    if not with_grads:
        return LossValue(value)
    dtgt = np.zeros_like(tgt)
    safe_fwd = d_fwd > 1e-12
    diff_fwd = (tgt[j_star] - src) / np.maximum(d_fwd, 1e-300)[:, None]
    np.add.at(dtgt, j_star[safe_fwd], diff_fwd[safe_fwd])
    safe_bwd = d_bwd > 1e-12
    diff_bwd = (tgt - src[i_star]) / np.maximum(d_bwd, 1e-300)[:, None]
    dtgt[safe_bwd] += diff_bwd[safe_bwd]
    dQ = Phi.T @ dtgt
    dC_NM = dQ @ (C_MN @ P).T
    dC_MN = C_NM.T @ dQ @ P.T
    return LossValue(value, dC=dC_MN, dC2=dC_NM)


def fmap_backward(dC: np.ndarray, ctx: FmapSolveContext):
    """Adjoint of the row-decoupled functional-map solve.

    Given dL/dC, returns (dL/dA_spec, dL/dB_spec) for the inputs of the
    producing solve_fmap call.
    """
    dC = np.asarray(dC, dtype=np.float64)
    k, d = ctx.A_spec.shape
    if dC.shape != (k, k):
        raise ValueError(f"dC must be ({k}, {k})")
    if len(ctx.factors) != k:
        raise ValueError("stale context: factor count mismatch")
    A = ctx.A_spec
    dA = np.zeros_like(ctx.A_spec)
    dB = np.zeros_like(ctx.B_spec)
    for i in range(k):
        z = cho_solve(ctx.factors[i], dC[i])
        c = ctx.C[i]
        dB[i] = A.T @ z
        dA += np.outer(z, ctx.B_spec[i]) - np.outer(z, c @ A) - np.outer(c, z @ A)
    return dA, dB
