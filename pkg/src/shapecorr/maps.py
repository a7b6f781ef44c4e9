"""Correspondence containers: pointwise maps and spectral map matrices.

Conventions used throughout the package:

* A hard ``PointMap`` with direction ``from_id -> to_id`` stores, for every
  vertex of the *from* shape, the index of its image on the *to* shape.
* A soft ``PointMap`` stores a row-stochastic matrix of shape
  ``(n_from, n_to)``; row ``i`` is a distribution over *to*-vertices.
* A ``FunctionalMap`` ``C`` with direction ``from_id -> to_id`` maps spectral
  coefficients of functions on the *from* shape to coefficients on the *to*
  shape (``b = C a``).  A point map ``N -> M`` corresponds to the functional
  map ``M -> N`` (pull-back adjointness).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PointMap",
    "FunctionalMap",
    "identity_map",
    "save_point_map",
    "load_point_map",
    "save_fmap",
    "load_fmap",
]


@dataclass
class PointMap:
    """A vertex-level correspondence, either hard indices or a soft matrix."""

    from_id: str
    to_id: str
    n_to: int
    indices: np.ndarray | None = None  # (n_from,) int, hard map
    soft: np.ndarray | None = None     # (n_from, n_to), row-stochastic

    def __post_init__(self):
        if (self.indices is None) == (self.soft is None):
            raise ValueError("exactly one of indices/soft must be given")
        if self.indices is not None:
            self.indices = np.asarray(self.indices, dtype=np.int64)
            if self.indices.ndim != 1:
                raise ValueError("hard map indices must be 1-d")
            if self.indices.size and (
                self.indices.min() < 0 or self.indices.max() >= self.n_to
            ):
                raise ValueError("hard map index out of range")
        else:
            self.soft = np.asarray(self.soft, dtype=np.float64)
            if self.soft.ndim != 2 or self.soft.shape[1] != self.n_to:
                raise ValueError("soft map must be (n_from, n_to)")
            if np.any(self.soft < 0):
                raise ValueError("soft map entries must be nonnegative")
            rows = self.soft.sum(axis=1)
            if not np.allclose(rows, 1.0, atol=1e-8):
                raise ValueError("soft map rows must sum to 1")

    @property
    def is_hard(self) -> bool:
        return self.indices is not None

    @property
    def n_from(self) -> int:
        return len(self.indices) if self.is_hard else self.soft.shape[0]

    @property
    def direction(self) -> str:
        return f"{self.from_id}->{self.to_id}"

    def hardened(self) -> "PointMap":
        """Row-argmax of a soft map (lowest index wins ties); identity on hard maps."""
        if self.is_hard:
            return self
        return PointMap(self.from_id, self.to_id, self.n_to,
                        indices=np.argmax(self.soft, axis=1))

    def as_matrix(self) -> np.ndarray:
        """Dense correspondence matrix Pi with Pi[i, map(i)] = 1 (or the soft rows)."""
        if not self.is_hard:
            return self.soft
        pi = np.zeros((self.n_from, self.n_to))
        pi[np.arange(self.n_from), self.indices] = 1.0
        return pi

    def compose(self, other: "PointMap") -> "PointMap":
        """Composition self followed by other (both hard): i -> other(self(i))."""
        if not (self.is_hard and other.is_hard):
            raise ValueError("compose requires hard maps")
        if self.to_id != other.from_id or self.n_to != other.n_from:
            raise ValueError(
                f"cannot compose {self.direction} with {other.direction}")
        return PointMap(self.from_id, other.to_id, other.n_to,
                        indices=other.indices[self.indices])


@dataclass
class FunctionalMap:
    """A k x k spectral map matrix; acts on coefficients as b = C a."""

    C: np.ndarray
    from_id: str = ""
    to_id: str = ""
    regularized: bool = field(default=False, compare=False)

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=np.float64)
        if self.C.ndim != 2 or self.C.shape[0] != self.C.shape[1]:
            raise ValueError("functional map matrix must be square")
        if not np.all(np.isfinite(self.C)):
            raise ValueError("functional map matrix must be finite")

    @property
    def k(self) -> int:
        return self.C.shape[0]

    @property
    def direction(self) -> str:
        return f"{self.from_id}->{self.to_id}"


def identity_map(n: int, from_id: str = "", to_id: str = "") -> PointMap:
    return PointMap(from_id, to_id, n, indices=np.arange(n))


def save_point_map(pmap: PointMap, path) -> None:
    """Write a hard map as text: header with direction/ids, one `i j` line per vertex."""
    m = pmap.hardened()
    with open(path, "w") as f:
        f.write(f"# p2p {m.from_id} -> {m.to_id} n_from {m.n_from} n_to {m.n_to}\n")
        for i, j in enumerate(m.indices):
            f.write(f"{i} {j}\n")


def load_point_map(path) -> PointMap:
    with open(path) as f:
        header = f.readline().split()
        if len(header) < 9 or header[1] != "p2p" or header[3] != "->":
            raise ValueError(f"{path}: not a p2p map file")
        from_id, to_id = header[2], header[4]
        n_from, n_to = int(header[6]), int(header[8])
        indices = np.full(n_from, -1, dtype=np.int64)
        for line in f:
            i, j = line.split()
            indices[int(i)] = int(j)
    if np.any(indices < 0):
        raise ValueError(f"{path}: map does not cover every vertex")
    return PointMap(from_id, to_id, n_to, indices=indices)


def save_fmap(fmap: FunctionalMap, path) -> None:
    """Write a functional map as text: k, then k*k row-major entries."""
    with open(path, "w") as f:
        f.write(f"# fmap {fmap.from_id} -> {fmap.to_id}\n")
        f.write(f"{fmap.k}\n")
        for row in fmap.C:
            f.write(" ".join(format(x, ".17g") for x in row) + "\n")


def load_fmap(path) -> FunctionalMap:
    with open(path) as f:
        header = f.readline().split()
        if len(header) < 5 or header[1] != "fmap":
            raise ValueError(f"{path}: not an fmap file")
        from_id, to_id = header[2], header[4]
        k = int(f.readline())
        C = np.array([[float(x) for x in f.readline().split()] for _ in range(k)])
    if C.shape != (k, k):
        raise ValueError(f"{path}: expected {k}x{k} matrix")
    return FunctionalMap(C, from_id, to_id)
