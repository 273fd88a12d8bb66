"""Synthetic multishape data sets."""

from __future__ import annotations

import numpy as np

from .geom import TriMesh, icosphere


def two_balls(level: int = 1, radius: float = 1.0, separation: float = 2.5, growth: float = 1.4,
              shift: float = 0.4, elongation: float = 1.25, overlap: float = 0.1,
              clearance: float = 0.05):
    """Two identical template spheres and a target where ball A grows into ball B.

    Ball A is centered at ``-separation/2`` on the x axis, ball B at
    ``+separation/2``. In the target, A is scaled by ``growth`` and moved
    ``shift`` toward B; B is stretched by ``elongation`` across the x axis and
    dented by A: every B vertex closer to A's target center than
    ``growth*radius + clearance - overlap`` is pushed radially out to that
    distance. A positive ``overlap`` makes the two target surfaces intersect.

    Returns ``(templates, targets)``, each a list ``[ball_a, ball_b]``.
    """
    if min(radius, separation, growth, elongation) <= 0 or level < 0:
        raise ValueError("two_balls parameters must be positive")
    ca = np.array([-separation / 2, 0.0, 0.0])
    cb = np.array([separation / 2, 0.0, 0.0])
    a0 = icosphere(level, radius, ca)
    b0 = icosphere(level, radius, cb)

    ca1 = ca + np.array([shift, 0.0, 0.0])
    a1 = icosphere(level, radius * growth, ca1)

    u = (b0.vertices - cb) * np.array([1.0, elongation, elongation])
    vb = cb + u
    reach = radius * growth + clearance - overlap
    d = vb - ca1
    r = np.linalg.norm(d, axis=1)
    inside = r < reach
    vb[inside] = ca1 + d[inside] * (reach / r[inside])[:, None]
    b1 = TriMesh(vb, b0.faces)
    return [a0, b0], [a1, b1]


def concentric_spheres(level: int = 1, inner: float = 1.0, outer: float = 2.0, angle: float = np.pi / 6,
                       axis=(0.0, 0.0, 1.0)):
    """Inner sphere whose target is itself rotated by ``angle``; outer sphere kept in place.

    Returns ``(templates, targets)`` as vertex-consistent meshes, so landmark
    matching on vertices expresses the rotation.
    """
    a = icosphere(level, inner)
    b = icosphere(level, outer)
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    R = np.eye(3) + np.sin(angle) * Kx + (1 - np.cos(angle)) * Kx @ Kx
    return [a, b], [a.with_vertices(a.vertices @ R.T), b]
