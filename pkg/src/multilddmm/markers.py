"""Deformation markers on deformed surfaces: tangent, volume and normal Jacobians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom, kernel
from .kernel import KernelSpec

LOCATIONS = ("vertex", "face")


class MarkerError(ValueError):
    pass


@dataclass(frozen=True)
class ScalarField:
    """Named scalar values attached to the vertices or faces of a mesh."""

    name: str
    values: np.ndarray
    location: str = "vertex"

    def __post_init__(self):
        if self.location not in LOCATIONS:
            raise ValueError("field location must be 'vertex' or 'face', got %r" % self.location)
        v = np.array(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(v)):
            raise MarkerError("field %r has non-finite values" % self.name)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)

    def check_size(self, mesh) -> None:
        n = mesh.n_vertices if self.location == "vertex" else mesh.n_faces
        if len(self) != n:
            raise MarkerError("field %r has %d values but the mesh has %d %ss" % (self.name, len(self), n, self.location))

    def require_positive(self) -> "ScalarField":
        bad = np.flatnonzero(self.values <= 0)
        if len(bad):
            raise MarkerError("Jacobian field %r is not positive at %d %ss (first: %s)"
                              % (self.name, len(bad), self.location, bad[:10].tolist()))
        return self


def face_to_vertex(values, faces, n_vertices: int, weights) -> np.ndarray:
    """Weighted mean of face values over the faces incident to each vertex."""
    num = np.zeros(n_vertices)
    den = np.zeros(n_vertices)
    for s in range(3):
        np.add.at(num, faces[:, s], weights * values)
        np.add.at(den, faces[:, s], weights)
    out = np.full(n_vertices, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def tangent_jacobian(mesh0: geom.TriMesh, mesh1: geom.TriMesh, name: str = "tangent_jacobian"):
    """Area ratio per face and its vertex version.

    Returns ``(face_field, vertex_field)``. Vertex values average the incident
    face ratios weighted by the source face areas; vertices that belong to no
    face get the value 1.
    """
    if mesh0.faces.shape != mesh1.faces.shape or not np.array_equal(mesh0.faces, mesh1.faces):
        raise MarkerError("tangent Jacobian needs meshes with identical connectivity")
    a0 = geom.face_areas(mesh0.vertices, mesh0.faces)
    a1 = geom.face_areas(mesh1.vertices, mesh1.faces)
    zero = np.flatnonzero(a0 <= 0)
    if len(zero):
        raise MarkerError("zero-area source faces: %s" % zero.tolist())
    ratio = a1 / a0
    vert = face_to_vertex(ratio, mesh0.faces, mesh0.n_vertices, a0)
    vert[np.isnan(vert)] = 1.0
    return ScalarField(name, ratio, "face"), ScalarField(name, vert, "vertex")


def volume_jacobian(spec: KernelSpec, sources, momenta, query_traj, name: str = "volume_jacobian") -> ScalarField:
    """``det D phi`` at trajectory starting points, by integrating ``d/dt log det = div u``.

    ``sources`` has shape ``(T+1, m, 3)`` or ``(T, m, 3)`` (the flow's own
    point trajectory), ``momenta`` ``(T, m, 3)``, and ``query_traj``
    ``(T+1, n, 3)`` the trajectories of the query points under the same flow.
    The time integral uses the same left-endpoint rule as the flow.
    """
    momenta = np.asarray(momenta, dtype=float)
    sources = np.asarray(sources, dtype=float)
    query_traj = np.asarray(query_traj, dtype=float)
    T = len(momenta)
    if len(sources) < T or len(query_traj) < T:
        raise MarkerError("trajectories shorter than the %d control steps" % T)
    logdet = np.zeros(query_traj.shape[1])
    for t in range(T):
        logdet += kernel.divergence(spec, query_traj[t], sources[t], momenta[t]) / T
    return ScalarField(name, np.exp(logdet), "vertex")


def normal_jacobian(volume: ScalarField, tangent: ScalarField, name: str = "normal_jacobian") -> ScalarField:
    """Ratio of the volume Jacobian to the (vertex) tangent Jacobian."""
    if len(volume) != len(tangent) or volume.location != tangent.location:
        raise MarkerError("volume (%d %ss) and tangent (%d %ss) fields do not match"
                          % (len(volume), volume.location, len(tangent), tangent.location))
    if np.any(tangent.values <= 0):
        raise MarkerError("tangent Jacobian must be positive")
    return ScalarField(name, volume.values / tangent.values, volume.location)


def shape_markers(spec: KernelSpec, mesh0: geom.TriMesh, traj, sources, momenta, prefix: str = "") -> list:
    """All three markers for a mesh carried along ``traj`` (``(T+1, n, 3)``) by a flow.

    Returns vertex fields ``[tangent, volume, normal]`` plus the face tangent
    field, all checked for positivity.
    """
    traj = np.asarray(traj, dtype=float)
    mesh1 = mesh0.with_vertices(traj[-1])
    tf, tv = tangent_jacobian(mesh0, mesh1, prefix + "tangent_jacobian")
    vol = volume_jacobian(spec, sources, momenta, traj, prefix + "volume_jacobian")
    nj = normal_jacobian(vol, tv, prefix + "normal_jacobian")
    return [f.require_positive() for f in (tv, vol, nj, tf)]
