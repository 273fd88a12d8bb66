"""End-point matching costs: landmark sum of squares and discrete surface currents."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom
from .kernel import KernelSpec, sqdist


def _points(q) -> np.ndarray:
    return np.asarray(getattr(q, "vertices", q), dtype=float).reshape(-1, 3)


def landmark_cost(q, target) -> float:
    q, y = _points(q), _points(target)
    if q.shape != y.shape:
        raise ValueError("landmark sets have %d and %d points" % (len(q), len(y)))
    return float(((q - y) ** 2).sum())


def landmark_grad(q, target) -> np.ndarray:
    q, y = _points(q), _points(target)
    if q.shape != y.shape:
        raise ValueError("landmark sets have %d and %d points" % (len(q), len(y)))
    return 2.0 * (q - y)


@dataclass(frozen=True)
class CurrentRepresentation:
    centers: np.ndarray
    normals: np.ndarray


def current_of(mesh: geom.TriMesh) -> CurrentRepresentation:
    n, c = geom.normals_centers(mesh.vertices, mesh.faces)
    return CurrentRepresentation(centers=c, normals=n)


def current_dot(chi: KernelSpec, a: CurrentRepresentation, b: CurrentRepresentation) -> float:
    """RKHS-dual inner product ``sum_ij a.N_i chi(a.c_i, b.c_j) b.N_j``."""
    if len(a.centers) == 0 or len(b.centers) == 0:
        return 0.0
    K = chi.G(sqdist(a.centers, b.centers))
    return float(np.einsum("ik,ij,jk->", a.normals, K, b.normals))


def current_cost(q_mesh, target_mesh, chi: KernelSpec) -> float:
    a, b = current_of(q_mesh), current_of(target_mesh)
    return current_dot(chi, a, a) - 2.0 * current_dot(chi, a, b) + current_dot(chi, b, b)


def current_grad(q_mesh, target_mesh, chi: KernelSpec) -> np.ndarray:
    """Per-vertex gradient of :func:`current_cost` with respect to ``q_mesh.vertices``."""
    v, f = q_mesh.vertices, q_mesh.faces
    N, c = geom.normals_centers(v, f)
    tgt = current_of(target_mesh)
    grad = np.zeros_like(v)
    if len(f) == 0:
        return grad
    allc = np.concatenate([c, tgt.centers])
    allN = np.concatenate([N, -tgt.normals])
    K = chi.G(sqdist(c, allc))
    # Z(c_f): field dual to the current difference, evaluated at own face centers
    Z = K @ allN
    # dZ(c_f)^T N_f = sum_g 2 chi'(|c_f - c_g|^2) (N_f . N_g) (c_f - c_g)
    coef = (-K / chi.sigma**2) * (N @ allN.T)
    dZtN = coef.sum(axis=1)[:, None] * c - coef @ allc
    dc = 2.0 * dZtN / 3.0
    # d(N_f . w)/d(vertex in slot s) = w x e_s, with e_s the opposite edge
    e = geom.opposite_edges(v, f)
    for s in range(3):
        np.add.at(grad, f[:, s], dc + np.cross(2.0 * Z, e[:, s]))
    return grad


class LandmarkTerm:
    """Weighted landmark matching cost against fixed target points."""

    def __init__(self, target, weight: float = 1.0):
        self.target = _points(target)
        self.weight = float(weight)

    def cost(self, x: np.ndarray) -> float:
        return self.weight * landmark_cost(x, self.target)

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self.weight * landmark_grad(x, self.target)


class CurrentTerm:
    """Weighted current distance between the deformed template surface and a target surface.

    ``faces`` is the template triangulation; the target may be triangulated
    differently. Target self-energy is cached.
    """

    def __init__(self, faces, target: geom.TriMesh, chi: KernelSpec, weight: float = 1.0):
        self.faces = np.asarray(faces, dtype=np.int64)
        self.target = target
        self.chi = chi
        self.weight = float(weight)
        t = current_of(target)
        self._target_current = t
        self._target_energy = current_dot(chi, t, t)

    def cost(self, x: np.ndarray) -> float:
        a = current_of(geom.TriMesh(x, self.faces))
        val = current_dot(self.chi, a, a) - 2.0 * current_dot(self.chi, a, self._target_current)
        return self.weight * (val + self._target_energy)

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self.weight * current_grad(geom.TriMesh(x, self.faces), self.target, self.chi)


class NullTerm:
    def cost(self, x):
        return 0.0

    def grad(self, x):
        return np.zeros_like(x)
