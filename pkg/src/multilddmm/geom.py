"""Discrete shapes: triangulated surfaces, landmark sets and multishape bookkeeping."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TriMesh:
    """Oriented triangulated surface.

    ``vertices`` is an ``(m, 3)`` float array, ``faces`` an ``(F, 3)`` int
    array of vertex indices; the cyclic order of each triple fixes the
    orientation of the face.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range for %d vertices" % len(v))
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(vertices, self.faces)

    def flipped(self) -> "TriMesh":
        """Same surface with every face orientation reversed."""
        return TriMesh(self.vertices, self.faces[:, ::-1])


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, dtype=float).reshape(-1, 3)
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    @property
    def vertices(self) -> np.ndarray:
        return self.points

    @property
    def n_vertices(self) -> int:
        return len(self.points)

    @property
    def faces(self) -> np.ndarray:
        return np.zeros((0, 3), dtype=np.int64)

    def with_vertices(self, vertices) -> "LandmarkSet":
        return LandmarkSet(vertices)


@dataclass(frozen=True)
class FacetFrame:
    face: int
    e1: np.ndarray
    e2: np.ndarray
    e_opp: np.ndarray
    n_weighted: np.ndarray


def face_normal_center(mesh: TriMesh, f: int) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted normal ``(q_j - q_i) x (q_k - q_i)`` and centroid of face ``f``."""
    i, j, k = mesh.faces[f]
    v = mesh.vertices
    return np.cross(v[j] - v[i], v[k] - v[i]), (v[i] + v[j] + v[k]) / 3.0


def normals_centers(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`face_normal_center` over all faces."""
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    return np.cross(b - a, c - a), (a + b + c) / 3.0


def opposite_edges(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """``(F, 3, 3)`` array; slot ``s`` holds the edge opposite to vertex ``faces[:, s]``.

    For the positively oriented labeling ``(j, j', j'')`` of a face the edge
    opposite to ``j`` is ``q[j''] - q[j']``.
    """
    p = vertices[faces]
    return np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    n, _ = normals_centers(vertices, faces)
    return 0.5 * np.linalg.norm(n, axis=1)


def facet_frame(mesh: TriMesh, f: int, j: int) -> FacetFrame:
    """Edge vectors stemming from vertex ``j`` of face ``f``, in the face's cyclic order."""
    tri = [int(t) for t in mesh.faces[f]]
    if j not in tri:
        raise ValueError("vertex %d is not in face %d %s" % (j, f, tri))
    s = tri.index(j)
    j1, j2 = tri[(s + 1) % 3], tri[(s + 2) % 3]
    v = mesh.vertices
    e1 = v[j1] - v[j]
    e2 = v[j2] - v[j]
    # e1 x e2 is the same vector for every j up to rounding; report the
    # canonical one so all three frames of a face share it exactly.
    n, _ = face_normal_center(mesh, f)
    return FacetFrame(face=f, e1=e1, e2=e2, e_opp=e2 - e1, n_weighted=n)


def mesh_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    """Signed enclosed volume of a closed oriented mesh (divergence theorem)."""
    p = vertices[faces]
    return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)


def icosphere(level: int = 1, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Subdivided icosahedron with outward orientation; ``10 * 4**level + 2`` vertices."""
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=float)
    return TriMesh(v, np.array(faces))


@dataclass(frozen=True)
class MultiShapeComplex:
    """Shapes plus a background whose vertices duplicate every shape vertex.

    Background vertex ``offsets[k] + j`` corresponds to vertex ``j`` of shape
    ``k``; the background faces are the shape faces shifted by the offsets.
    """

    shapes: tuple
    offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        shapes = tuple(self.shapes)
        object.__setattr__(self, "shapes", shapes)
        sizes = [s.n_vertices for s in shapes]
        object.__setattr__(self, "offsets", np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64))

    @property
    def n_shapes(self) -> int:
        return len(self.shapes)

    @property
    def n_background(self) -> int:
        return int(self.offsets[-1])

    def background_index(self, k: int, j: int) -> int:
        if not 0 <= j < self.shapes[k].n_vertices:
            raise IndexError("vertex %d out of range for shape %d" % (j, k))
        return int(self.offsets[k] + j)

    def shape_of(self, b: int) -> tuple[int, int]:
        """Inverse of :meth:`background_index`."""
        k = int(np.searchsorted(self.offsets, b, side="right") - 1)
        if not 0 <= k < self.n_shapes:
            raise IndexError("background vertex %d out of range" % b)
        return k, int(b - self.offsets[k])

    def block(self, k: int) -> slice:
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))

    def background_vertices(self) -> np.ndarray:
        return np.concatenate([s.vertices for s in self.shapes], axis=0)

    def background_faces(self) -> np.ndarray:
        """Faces of every shape in background numbering."""
        parts = [s.faces + self.offsets[k] for k, s in enumerate(self.shapes)]
        return np.concatenate(parts, axis=0) if parts else np.zeros((0, 3), dtype=np.int64)

    def face_owner(self) -> np.ndarray:
        return np.concatenate([np.full(s.faces.shape[0], k) for k, s in enumerate(self.shapes)])

    def background_mesh(self) -> TriMesh:
        return TriMesh(self.background_vertices(), self.background_faces())


def _mesh_diagnostics(mesh, label: str, tol: float = 0.0) -> list[str]:
    out = []
    v, f = mesh.vertices, mesh.faces
    if isinstance(mesh, LandmarkSet) or len(f) == 0:
        _, inv, counts = np.unique(np.round(v, 12), axis=0, return_inverse=True, return_counts=True)
        for c in np.nonzero(counts > 1)[0]:
            idx = np.nonzero(inv.ravel() == c)[0]
            out.append("%s: duplicate points %s" % (label, idx.tolist()))
        return out
    for i, (a, b, c) in enumerate(f):
        if a == b or b == c or a == c:
            out.append("%s: degenerate face %d (%d, %d, %d) repeats a vertex" % (label, i, a, b, c))
    areas = face_areas(v, f)
    scale = max(float(np.ptp(v, axis=0).max()) if len(v) else 0.0, 1e-300)
    for i in np.nonzero(areas <= tol * scale**2)[0]:
        if len(set(f[i].tolist())) == 3:
            out.append("%s: degenerate face %d has zero area" % (label, i))
    directed = Counter()
    undirected = Counter()
    for a, b, c in f:
        for e in ((a, b), (b, c), (c, a)):
            directed[(int(e[0]), int(e[1]))] += 1
            undirected[(min(int(e[0]), int(e[1])), max(int(e[0]), int(e[1])))] += 1
    for e, n in sorted(undirected.items()):
        if n > 2:
            out.append("%s: non-manifold edge %s shared by %d faces" % (label, e, n))
    for e, n in sorted(directed.items()):
        if e[0] != e[1] and n > 1:
            out.append("%s: inconsistent orientation on edge %s (traversed %d times in the same direction)" % (label, e, n))
    _, counts = np.unique(np.round(v, 12), axis=0, return_counts=True)
    if (counts > 1).any():
        out.append("%s: %d duplicate vertex positions" % (label, int((counts > 1).sum())))
    return out


def validate(obj) -> list[str]:
    """Human-readable diagnostics for a mesh, landmark set or complex.

    Reports degenerate faces, non-manifold edges, inconsistent orientation and
    duplicate points. Returns an empty list for a clean input; never raises.
    """
    if isinstance(obj, MultiShapeComplex):
        out = []
        for k, s in enumerate(obj.shapes):
            out += _mesh_diagnostics(s, "shape %d" % k)
        return out
    return _mesh_diagnostics(obj, "mesh")
