"""Evaluation: geodesic error, map smoothness, embedding statistics, label
transfer, and map corruption."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components, dijkstra

from .geometry import Shape
from .maps import PointMap
from .spectral import LaplacianPair, cotan_laplacian

__all__ = [
    "GeodesicField",
    "geodesic_distances",
    "geodesic_error",
    "corrupt_map",
    "map_smoothness",
    "embedding_dirichlet",
    "injectivity_margin",
    "pck_curve",
    "transfer_labels",
    "iou",
]


@dataclass
class GeodesicField:
    """Shortest-path distances from a set of source vertices.

    D[r] holds graph distances from sources[r] to every vertex, in units of
    normalized (unit-area) length.
    """

    sources: np.ndarray          # (s,) vertex indices
    D: np.ndarray                # (s, n)
    _row_of: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._row_of = {int(v): r for r, v in enumerate(self.sources)}

    def dist(self, source: int, target) -> np.ndarray:
        return self.D[self._row_of[int(source)], target]


def _edge_graph(shape: Shape) -> sparse.csr_matrix:
    e = shape.edges()
    lengths = np.linalg.norm(
        shape.vertices[e[:, 0]] - shape.vertices[e[:, 1]], axis=1)
    n = shape.n_vertices
    g = sparse.csr_matrix(
        (np.concatenate([lengths, lengths]),
         (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]))),
        shape=(n, n))
    return g


def geodesic_distances(shape: Shape, sources=None) -> GeodesicField:
    """Dijkstra over the edge graph with Euclidean edge lengths.

    sources=None computes the full all-pairs field.
    """
    if not shape.is_mesh:
        raise ValueError("geodesic distances need a mesh; point clouds use "
                         "Euclidean distances")
    g = _edge_graph(shape)
    n_comp, _ = connected_components(g, directed=False)
    if n_comp > 1:
        raise ValueError("mesh is not connected")
    if sources is None:
        sources = np.arange(shape.n_vertices)
    sources = np.asarray(sources, dtype=np.int64)
    D = dijkstra(g, directed=False, indices=sources)
    return GeodesicField(sources=sources, D=D)


def geodesic_error(pred: PointMap, gt: PointMap, shape: Shape,
                   field: GeodesicField | None = None) -> float:
    """Mean geodesic distance between predicted and GT images, times 100.

    shape is the map's *to* domain (where the images live), assumed
    normalized to unit area.  Point clouds fall back to Euclidean distance.
    Pass a precomputed field (sources covering the GT images) to amortize
    Dijkstra runs.
    """
    if not (pred.is_hard and gt.is_hard):
        raise ValueError("geodesic_error needs hard maps")
    if (pred.from_id, pred.to_id) != (gt.from_id, gt.to_id):
        raise ValueError(
            f"direction mismatch: {pred.direction} vs {gt.direction}")
    if pred.n_from != gt.n_from or pred.n_to != gt.n_to:
        raise ValueError("map sizes differ")
    if shape.n_vertices != pred.n_to:
        raise ValueError("shape is not the maps' target domain")
    if not shape.is_mesh:
        d = np.linalg.norm(shape.vertices[pred.indices]
                           - shape.vertices[gt.indices], axis=1)
        return float(d.mean() * 100.0)
    if field is None:
        field = geodesic_distances(shape, np.unique(gt.indices))
    rows = np.array([field._row_of[int(v)] for v in gt.indices])
    d = field.D[rows, pred.indices]
    return float(d.mean() * 100.0)


def corrupt_map(gt: PointMap, p: float, seed: int) -> PointMap:
    """Replace each entry with a uniform-random target index with probability p."""
    if not gt.is_hard:
        raise ValueError("corrupt_map needs a hard map")
    if not (0.0 <= p <= 1.0):
        raise ValueError("p must be in [0, 1]")
    rng = np.random.default_rng(seed)
    hit = rng.random(gt.n_from) < p
    idx = gt.indices.copy()
    idx[hit] = rng.integers(0, gt.n_to, size=int(hit.sum()))
    return PointMap(gt.from_id, gt.to_id, gt.n_to, indices=idx)


def map_smoothness(pmap: PointMap, shape_from: Shape, shape_to: Shape,
                   lap_from: LaplacianPair | None = None) -> float:
    """Dirichlet energy of the pulled-back target coordinates.

    Sum over edges (u, v) of the source mesh of w_uv ||psi(u) - psi(v)||^2
    with psi = target coordinates composed with the map and w_uv the cotangent
    stiffness weights (negative weights included as-is).
    """
    if not pmap.is_hard:
        raise ValueError("map_smoothness needs a hard map")
    if pmap.n_from != shape_from.n_vertices or pmap.n_to != shape_to.n_vertices:
        raise ValueError("map does not match the shapes")
    if lap_from is None:
        lap_from = cotan_laplacian(shape_from)
    psi = shape_to.vertices[pmap.indices]
    coo = sparse.triu(lap_from.W, k=1).tocoo()
    w_uv = -coo.data  # stiffness off-diagonals are -(cot a + cot b)/2
    diff2 = ((psi[coo.row] - psi[coo.col]) ** 2).sum(axis=1)
    return float((w_uv * diff2).sum())


def embedding_dirichlet(G: np.ndarray, lap: LaplacianPair) -> float:
    """Mean Rayleigh quotient of the embedding channels: the average over
    columns g of (g^T W g) / (g^T A g)."""
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    if G.shape[0] == 1 and lap.n != 1:
        G = G.T
    if G.shape[0] != lap.n:
        raise ValueError("embedding rows must match the operator size")
    num = (G * (lap.W @ G)).sum(axis=0)
    den = (G * (lap.A[:, None] * G)).sum(axis=0)
    if np.any(den <= 0):
        raise ValueError("zero-norm embedding channel")
    return float(np.mean(num / den))


def injectivity_margin(G: np.ndarray) -> float:
    """Smallest nearest-neighbor distance after normalizing the embedding to
    the unit sphere about its centroid."""
    G = np.asarray(G, dtype=np.float64)
    if G.shape[0] < 2:
        raise ValueError("need at least two points")
    centered = G - G.mean(axis=0)
    r = np.linalg.norm(centered, axis=1).max()
    if r == 0:
        return 0.0
    X = centered / r
    d2 = (X * X).sum(axis=1)[:, None] + (X * X).sum(axis=1)[None, :] - 2 * X @ X.T
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(max(d2.min(), 0.0)))


def pck_curve(errors, thresholds) -> np.ndarray:
    """Fraction of errors at or below each threshold (thresholds ascending)."""
    errors = np.asarray(errors, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thresholds) < 0):
        raise ValueError("thresholds must be ascending")
    return (errors[None, :] <= thresholds[:, None]).mean(axis=1)


def transfer_labels(pmap: PointMap, source_labels: np.ndarray) -> np.ndarray:
    """Pull labels back along a hard map: out[v] = source_labels[map(v)].

    The map runs from the unlabeled shape to the labeled one.
    """
    if not pmap.is_hard:
        raise ValueError("transfer_labels needs a hard map")
    source_labels = np.asarray(source_labels)
    if len(source_labels) != pmap.n_to:
        raise ValueError("labels must cover the map's target domain")
    return source_labels[pmap.indices]


def iou(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> float:
    """Mean per-class intersection-over-union, skipping classes absent from both."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("label arrays must have equal length")
    if pred.min() < 0 or pred.max() >= n_classes or gt.min() < 0 or gt.max() >= n_classes:
        raise ValueError("label out of range")
    scores = []
    for c in range(n_classes):
        p, g = pred == c, gt == c
        union = np.count_nonzero(p | g)
        if union == 0:
            continue
        scores.append(np.count_nonzero(p & g) / union)
    return float(np.mean(scores)) if scores else 1.0
