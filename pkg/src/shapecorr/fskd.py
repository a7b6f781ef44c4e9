"""Few-shot keypoint detection: transfer labeled keypoints through learned
maps, filter by cycle consistency, and merge survivors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .eval import geodesic_distances
from .featnet import FeatureNet, forward
from .fmap import nn_map, pairwise_sqdist
from .geometry import Shape
from .spectral import SpectralBasis

__all__ = [
    "KeypointSet",
    "FskdParams",
    "select_sources",
    "fskd_predict",
    "keypoint_miou",
    "save_keypoints",
    "load_keypoints",
]


@dataclass
class KeypointSet:
    """Keypoint ids and their vertex indices on one shape."""

    shape_id: str
    ids: np.ndarray        # (m,) int, unique within the shape
    vertices: np.ndarray   # (m,) int vertex indices

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.vertices = np.asarray(self.vertices, dtype=np.int64)
        if self.ids.shape != self.vertices.shape or self.ids.ndim != 1:
            raise ValueError("ids and vertices must be parallel 1-d arrays")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("keypoint ids must be unique within a shape")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class FskdParams:
    """Cycle-rejection threshold, combination temperature, and shot count."""

    nu: float = 0.05
    sigma: float = 0.01
    n_sources: int = 3

    def __post_init__(self):
        if self.nu <= 0 or self.sigma <= 0 or self.n_sources < 1:
            raise ValueError("nu > 0, sigma > 0, n_sources >= 1 required")


def select_sources(labeled, n: int, seed: int = 0) -> list[int]:
    """Greedy maximum-coverage choice of n labeled shapes.

    labeled is a sequence whose elements carry a KeypointSet as their last
    item; ties break uniformly at random under the seed.  Returns indices
    into the input sequence.
    """
    if n > len(labeled):
        raise ValueError("cannot select more shapes than provided")
    rng = np.random.default_rng(seed)
    keysets = [entry[-1] if isinstance(entry, (tuple, list)) else entry
               for entry in labeled]
    covered: set[int] = set()
    remaining = list(range(len(labeled)))
    chosen: list[int] = []
    for _ in range(n):
        gains = np.array([len(set(keysets[i].ids.tolist()) - covered)
                          for i in remaining])
        best = np.flatnonzero(gains == gains.max())
        pick = remaining[best[rng.integers(len(best))]]
        chosen.append(pick)
        covered |= set(keysets[pick].ids.tolist())
        remaining.remove(pick)
    return chosen


def fskd_predict(sources, target, net: FeatureNet,
                 params: FskdParams) -> KeypointSet:
    """Transfer, filter, and combine keypoints onto a target shape.

    sources: sequence of (Shape, SpectralBasis, KeypointSet);
    target: (Shape, SpectralBasis).

    Each source keypoint is transferred through the hard feature-space map,
    scored by its round-trip residual l = ||x - x_roundtrip||^2, dropped when
    l > nu, and surviving transfers of one keypoint id are merged by an
    exp(-l/sigma)-weighted average snapped to the nearest target vertex.
    """
    target_shape, target_basis = target
    F_t, _ = forward(net, target_shape, target_basis)
    per_id: dict[int, list[tuple[float, np.ndarray, int]]] = {}
    for src_shape, src_basis, keys in sources:
        G_s, _ = forward(net, src_shape, src_basis)
        to_target = nn_map(G_s, F_t, src_shape.id, target_shape.id)
        to_source = nn_map(F_t, G_s, target_shape.id, src_shape.id)
        back = to_source.indices[to_target.indices]       # per source vertex
        l_all = ((src_shape.vertices - src_shape.vertices[back]) ** 2).sum(axis=1)
        for kid, v in zip(keys.ids, keys.vertices):
            l = float(l_all[v])
            if l > params.nu:
                continue
            tv = int(to_target.indices[v])
            per_id.setdefault(int(kid), []).append(
                (l, target_shape.vertices[tv], tv))
    out_ids, out_verts = [], []
    for kid in sorted(per_id):
        entries = per_id[kid]
        if len(entries) == 1:
            out_ids.append(kid)
            out_verts.append(entries[0][2])
            continue
        ls = np.array([e[0] for e in entries])
        pos = np.array([e[1] for e in entries])
        w = np.exp(-ls / params.sigma)
        w = w / w.sum()
        mean_pos = (w[:, None] * pos).sum(axis=0)
        d2 = ((target_shape.vertices - mean_pos) ** 2).sum(axis=1)
        out_ids.append(kid)
        out_verts.append(int(np.argmin(d2)))
    return KeypointSet(target_shape.id, np.array(out_ids, dtype=np.int64),
                       np.array(out_verts, dtype=np.int64))


def keypoint_miou(pred: KeypointSet, gt: KeypointSet, shape: Shape,
                  threshold: float) -> float:
    """Thresholded keypoint agreement as intersection-over-union.

    A prediction counts toward the intersection when its distance to the
    nearest ground-truth keypoint is below the threshold (geodesic on meshes,
    Euclidean on point clouds); the union is |pred| + |gt| - |intersection|.
    """
    if len(pred) == 0 and len(gt) == 0:
        return 1.0
    if len(pred) == 0 or len(gt) == 0:
        return 0.0
    if shape.is_mesh:
        field = geodesic_distances(shape, np.unique(gt.vertices))
        d = np.stack([field.dist(v, pred.vertices) for v in np.unique(gt.vertices)])
        nearest = d.min(axis=0)
    else:
        d2 = pairwise_sqdist(shape.vertices[pred.vertices],
                             shape.vertices[gt.vertices])
        nearest = np.sqrt(d2.min(axis=1))
    inter = int(np.count_nonzero(nearest < threshold))
    union = len(pred) + len(gt) - inter
    return inter / union


def save_keypoints(keys: KeypointSet, path) -> None:
    """Plain text: shape-id header, then `keypoint_id vertex_index` lines."""
    with open(path, "w") as f:
        f.write(f"# keypoints {keys.shape_id}\n")
        for kid, v in zip(keys.ids, keys.vertices):
            f.write(f"{kid} {v}\n")


def load_keypoints(path) -> KeypointSet:
    with open(path) as f:
        header = f.readline().split()
        if len(header) < 3 or header[1] != "keypoints":
            raise ValueError(f"{path}: not a keypoint file")
        shape_id = header[2]
        ids, verts = [], []
        for line in f:
            a, b = line.split()
            ids.append(int(a))
            verts.append(int(b))
    return KeypointSet(shape_id, np.array(ids, dtype=np.int64),
                       np.array(verts, dtype=np.int64))
