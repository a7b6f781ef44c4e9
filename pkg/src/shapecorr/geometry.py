"""Shape representation, mesh file I/O, normalization, and synthetic data.

Shapes are triangle meshes (vertices + faces) or bare point clouds
(faces=None).  Vertex order is the canonical index space: every map, basis,
and label array downstream refers to vertices by their position here.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .maps import PointMap, identity_map

__all__ = [
    "Shape",
    "AugmentParams",
    "load_shape",
    "save_shape",
    "normalize",
    "augment",
    "synth_pair",
    "synth_collection",
    "icosphere",
]


@dataclass
class Shape:
    """A 3D shape: (n, 3) vertex coordinates and optional (m, 3) triangles."""

    vertices: np.ndarray
    faces: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (n, 3)")
        if self.n_vertices < 4:
            raise ValueError("a shape needs at least 4 vertices")
        if self.faces is not None:
            self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
            if self.faces.ndim != 2 or self.faces.shape[1] != 3:
                raise ValueError("faces must be (m, 3) triangles")
            if self.faces.size and (
                self.faces.min() < 0 or self.faces.max() >= self.n_vertices
            ):
                raise ValueError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def is_mesh(self) -> bool:
        return self.faces is not None

    def edges(self) -> np.ndarray:
        """Unique undirected edges (e, 2), each with u < v."""
        if not self.is_mesh:
            raise ValueError("point cloud has no edges")
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        cr = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return 0.5 * np.linalg.norm(cr, axis=1)

    def surface_area(self) -> float:
        return float(self.face_areas().sum())


@dataclass
class AugmentParams:
    """On-the-fly training augmentation: random rotation, scale, jitter."""

    rotate: bool = True
    scale_range: tuple[float, float] = (0.9, 1.1)
    jitter_std: float = 0.01

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError("scale_range must satisfy 0 < low <= high")
        if self.jitter_std < 0:
            raise ValueError("jitter_std must be >= 0")


class ParseError(ValueError):
    """Malformed shape file."""


def _cleanup(vertices, faces, id):
    """Drop zero-area faces, keep the largest connected component, rebase."""
    if faces is None or len(faces) == 0:
        return Shape(vertices, None if faces is None else np.zeros((0, 3), int), id)
    faces = np.asarray(faces, dtype=np.int64)
    shape = Shape(vertices, faces, id)  # runs the index-range checks
    areas = shape.face_areas()
    keep = areas > 1e-14
    if not keep.all():
        warnings.warn(f"{id or 'shape'}: dropped {np.count_nonzero(~keep)} "
                      "degenerate (zero-area) faces")
        faces = faces[keep]
        if len(faces) == 0:
            raise ParseError("all faces degenerate")
    n = len(vertices)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    adj = sparse.csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    n_comp, labels = connected_components(adj, directed=False)
    if n_comp > 1:
        counts = np.bincount(labels)
        main = counts.argmax()
        warnings.warn(f"{id or 'shape'}: keeping largest of {n_comp} connected "
                      f"components ({counts[main]} of {n} vertices)")
        keep_v = labels == main
        remap = -np.ones(n, dtype=np.int64)
        remap[keep_v] = np.arange(keep_v.sum())
        vertices = vertices[keep_v]
        faces = remap[faces[np.all(keep_v[faces], axis=1)]]
    return Shape(vertices, faces, id)


def _parse_off(lines, path):
    if not lines or lines[0].split("#")[0].strip() != "OFF":
        raise ParseError(f"{path}: missing OFF header")
    body = [ln.split("#")[0].strip() for ln in lines[1:]]
    body = [ln for ln in body if ln]
    try:
        nv, nf, _ = (int(x) for x in body[0].split()[:3])
        verts = [[float(x) for x in body[1 + i].split()[:3]] for i in range(nv)]
        faces = []
        for i in range(nf):
            tok = body[1 + nv + i].split()
            cnt = int(tok[0])
            if cnt != 3:
                raise ParseError(f"{path}: only triangle faces supported")
            faces.append([int(t) for t in tok[1:4]])
    except (IndexError, ValueError) as exc:
        raise ParseError(f"{path}: truncated or malformed OFF ({exc})") from exc
    return np.array(verts), (np.array(faces, dtype=np.int64) if faces else None)


def _parse_obj(lines, path):
    verts, faces = [], []
    for ln in lines:
        tok = ln.split("#")[0].split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "f":
            idx = [int(t.split("/")[0]) for t in tok[1:]]
            if len(idx) != 3:
                raise ParseError(f"{path}: only triangle faces supported")
            # OBJ indices are 1-based; negative indices count from the end
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            faces.append(idx)
    if not verts:
        raise ParseError(f"{path}: no vertices")
    return np.array(verts), (np.array(faces, dtype=np.int64) if faces else None)


def _parse_ply(lines, path):
    if not lines or lines[0].strip() != "ply":
        raise ParseError(f"{path}: missing ply header")
    nv = nf = 0
    i = 1
    in_verts = False
    n_vert_props = 0
    fmt_seen = False
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise ParseError(f"{path}: only ascii PLY supported")
            fmt_seen = True
        elif tok[0] == "element":
            in_verts = tok[1] == "vertex"
            if tok[1] == "vertex":
                nv = int(tok[2])
            elif tok[1] == "face":
                nf = int(tok[2])
        elif tok[0] == "property" and in_verts:
            n_vert_props += 1
        elif tok[0] == "end_header":
            break
    else:
        raise ParseError(f"{path}: no end_header")
    if not fmt_seen:
        raise ParseError(f"{path}: missing format line")
    body = [ln for ln in (l.strip() for l in lines[i:]) if ln]
    try:
        verts = [[float(x) for x in body[j].split()[:3]] for j in range(nv)]
        faces = []
        for j in range(nf):
            tok = body[nv + j].split()
            cnt = int(tok[0])
            if cnt != 3:
                raise ParseError(f"{path}: only triangle faces supported")
            faces.append([int(t) for t in tok[1:4]])
    except (IndexError, ValueError) as exc:
        raise ParseError(f"{path}: truncated or malformed PLY ({exc})") from exc
    return np.array(verts), (np.array(faces, dtype=np.int64) if faces else None)


_PARSERS = {"off": _parse_off, "obj": _parse_obj, "ply": _parse_ply}


def load_shape(path, fmt: str | None = None, id: str | None = None) -> Shape:
    """Load an ASCII OFF/OBJ/PLY file; format inferred from the extension.

    Face indices are rebased to 0, degenerate faces dropped, and only the
    largest edge-connected component kept (with a warning).  Vertex order is
    preserved from the file.
    """
    path = str(path)
    if fmt is None:
        fmt = path.rsplit(".", 1)[-1].lower()
    if fmt not in _PARSERS:
        raise ParseError(f"{path}: unsupported format '{fmt}'")
    with open(path) as f:
        lines = f.readlines()
    verts, faces = _PARSERS[fmt](lines, path)
    if len(verts) < 4:
        raise ParseError(f"{path}: fewer than 4 vertices")
    if faces is not None and faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise ParseError(f"{path}: face index out of range")
    name = id if id is not None else path.rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return _cleanup(verts, faces, name)


def save_shape(shape: Shape, path, fmt: str | None = None) -> None:
    """Write a shape as ASCII OFF/OBJ/PLY."""
    path = str(path)
    if fmt is None:
        fmt = path.rsplit(".", 1)[-1].lower()
    v = shape.vertices
    f = shape.faces if shape.is_mesh else np.zeros((0, 3), dtype=np.int64)
    with open(path, "w") as out:
        if fmt == "off":
            out.write("OFF\n")
            out.write(f"{len(v)} {len(f)} 0\n")
            for p in v:
                out.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
            for tri in f:
                out.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")
        elif fmt == "obj":
            for p in v:
                out.write(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
            for tri in f:
                out.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")
        elif fmt == "ply":
            out.write("ply\nformat ascii 1.0\n")
            out.write(f"element vertex {len(v)}\n")
            out.write("property float x\nproperty float y\nproperty float z\n")
            out.write(f"element face {len(f)}\n")
            out.write("property list uchar int vertex_indices\nend_header\n")
            for p in v:
                out.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
            for tri in f:
                out.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")
        else:
            raise ValueError(f"unsupported format '{fmt}'")


def normalize(shape: Shape) -> Shape:
    """Rescale to canonical size.

    Meshes are scaled so the total surface area is 1.  Point clouds are
    centered at their centroid and scaled so the farthest point sits on the
    unit sphere.
    """
    if shape.is_mesh:
        area = shape.surface_area()
        if area <= 0:
            raise ValueError("shape has zero total area")
        return replace(shape, vertices=shape.vertices / np.sqrt(area))
    c = shape.vertices.mean(axis=0)
    centered = shape.vertices - c
    r = np.linalg.norm(centered, axis=1).max()
    if r <= 0:
        raise ValueError("all points coincide")
    return replace(shape, vertices=centered / r)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation via QR of a Gaussian matrix."""
    m = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(m)
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def augment(shape: Shape, params: AugmentParams, seed: int) -> Shape:
    """Random rotation (about the origin), uniform scale, Gaussian jitter.

    Deterministic for a given seed; identical connectivity.
    """
    rng = np.random.default_rng(seed)
    v = shape.vertices
    if params.rotate:
        v = v @ _random_rotation(rng).T
    lo, hi = params.scale_range
    v = v * rng.uniform(lo, hi)
    if params.jitter_std > 0:
        v = v + rng.normal(0.0, params.jitter_std, size=v.shape)
    return replace(shape, vertices=v)


# ---------------------------------------------------------------------------
# synthetic meshes


def icosphere(subdivisions: int = 2, radius: float = 1.0, id: str = "icosphere") -> Shape:
    """Subdivided icosahedron; 12, 42, 162, 642, 2562, ... vertices."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        verts_list = list(verts)
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                p = verts_list[a] + verts_list[b]
                verts_list.append(p / np.linalg.norm(p))
                midpoint[key] = len(verts_list) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    return Shape(verts * radius, faces, id)


def _cylinder_mesh(n_u: int, n_v: int) -> Shape:
    """Open tube of height 3, wrapped in u.

    The cross-section radius varies smoothly in u and z to kill the rotational
    and mirror symmetries of a plain cylinder; symmetric shapes make spectral
    correspondence ill-posed.
    """
    us = np.arange(n_u) * (2 * np.pi / n_u)
    vs = np.linspace(-1.5, 1.5, n_v)
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    rr = 1.0 + 0.25 * np.cos(uu) + 0.12 * np.sin(2 * uu + 0.7) \
        + 0.15 * vv * np.cos(uu + 0.3)
    verts = np.stack([rr * np.cos(uu), rr * np.sin(uu), vv], axis=-1).reshape(-1, 3)
    faces = []
    for i in range(n_u):
        i2 = (i + 1) % n_u
        for j in range(n_v - 1):
            a, b = i * n_v + j, i2 * n_v + j
            faces.append([a, b, a + 1])
            faces.append([b, b + 1, a + 1])
    return Shape(verts, np.array(faces, dtype=np.int64), "cylinder")


def _grid_mesh(n_u: int, n_v: int) -> Shape:
    xs = np.linspace(0, 1, n_u)
    ys = np.linspace(0, 1, n_v)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([xx, yy, np.zeros_like(xx)], axis=-1).reshape(-1, 3)
    faces = []
    for i in range(n_u - 1):
        for j in range(n_v - 1):
            a = i * n_v + j
            b = (i + 1) * n_v + j
            faces.append([a, b, a + 1])
            faces.append([b, b + 1, a + 1])
    return Shape(verts, np.array(faces, dtype=np.int64), "grid")


def _smooth_field(points: np.ndarray, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    """Random low-frequency displacement field with bounded gradient.

    Sum of a few sinusoids of random direction and phase; frequencies near 1
    keep the per-edge stretch of order `magnitude`.
    """
    disp = np.zeros_like(points)
    for _ in range(3):
        k = rng.normal(size=3)
        k /= np.linalg.norm(k)
        freq = rng.uniform(0.6, 1.2)
        phase = rng.uniform(0, 2 * np.pi)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        disp += np.sin(freq * points @ k + phase)[:, None] * direction
    return magnitude / 3.0 * disp


def synth_pair(kind: str, n_target: int, deform_magnitude: float, seed: int):
    """A near-isometric test pair: base mesh, smoothly deformed copy, identity GT.

    Both shapes share connectivity and are area-normalized, so the identity
    map is the exact ground truth.  Deformation is a smooth analytic field;
    for small magnitude the pair is near-isometric.

    Returns
    -------
    (Shape, Shape, PointMap)
    """
    if n_target < 50:
        raise ValueError("n_target must be >= 50")
    rng = np.random.default_rng(seed)
    if kind == "bent_cylinder":
        n_v = max(4, int(np.sqrt(n_target / 2)))
        n_u = max(8, int(np.ceil(n_target / n_v)))
        base = _cylinder_mesh(n_u, n_v)
        v = base.vertices.copy()
        # bend: displace x along the height coordinate, plus a mild twist;
        # coefficients keep per-edge stretch around magnitude/3
        phase = rng.uniform(0, 2 * np.pi)
        bend = deform_magnitude * 0.4 * np.sin(v[:, 2] * 1.0 + phase)
        twist = deform_magnitude * 0.2 * v[:, 2]
        ca, sa = np.cos(twist), np.sin(twist)
        x, y = v[:, 0].copy(), v[:, 1].copy()
        v[:, 0] = ca * x - sa * y + bend
        v[:, 1] = sa * x + ca * y
        deformed = Shape(v, base.faces, base.id + "_bent")
    elif kind == "bumpy_sphere":
        sub = 1
        while 10 * 4 ** (sub + 1) + 2 <= n_target:
            sub += 1
        base = icosphere(sub)
        v = base.vertices
        radial = 1.0 + _smooth_field(v * 2.0, deform_magnitude, rng)[:, 0]
        deformed = Shape(v * radial[:, None], base.faces, "bumpy_sphere")
    elif kind == "stretched_grid":
        n_u = max(8, int(np.sqrt(n_target)))
        n_v = max(8, int(np.ceil(n_target / n_u)))
        base = _grid_mesh(n_u, n_v)
        v = base.vertices.copy()
        phase = rng.uniform(0, 2 * np.pi)
        v[:, 2] += deform_magnitude * 0.15 * np.sin(2 * np.pi * v[:, 0] + phase) \
            * np.sin(np.pi * v[:, 1])
        v[:, 0] *= 1.0 + 0.2 * deform_magnitude
        deformed = Shape(v, base.faces, base.id + "_stretched")
    else:
        raise ValueError(f"unsupported synthetic kind '{kind}'")
    a = normalize(replace(base, id=f"{kind}-{seed}-a"))
    b = normalize(replace(deformed, id=f"{kind}-{seed}-b"))
    gt = identity_map(a.n_vertices, from_id=a.id, to_id=b.id)
    return a, b, gt


def synth_collection(kind: str, n_shapes: int, n_target: int,
                     deform_magnitude: float, seed: int) -> list[Shape]:
    """A family of deformed copies of one base mesh, all in dense correspondence.

    Shape 0 is the undeformed base; shapes 1..n-1 carry independent smooth
    deformations.  The identity map is ground truth between any two members.
    """
    base, _, _ = synth_pair(kind, n_target, 0.0, seed)
    shapes = [replace(base, id=f"{kind}-{seed}-0")]
    for i in range(1, n_shapes):
        _, deformed, _ = synth_pair(kind, n_target, deform_magnitude, seed + i)
        shapes.append(replace(deformed, id=f"{kind}-{seed}-{i}"))
    return shapes
