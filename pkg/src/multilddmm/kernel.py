"""Radial Gaussian kernels ``K(x, y) = G(|x - y|^2) Id`` and the linear algebra built on them.

All point families are ``(m, 3)`` arrays; momenta and fields are ``(m, 3)``.
Kernel matrices are stored as the scalar ``(m, m')`` matrix of ``G`` values,
acting blockwise on 3-vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class KernelSolveError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel ``G(s) = exp(-s / (2 sigma^2))`` of width ``sigma``."""

    sigma: float
    family: str = "gaussian"

    def __post_init__(self):
        if self.family != "gaussian":
            raise ValueError("unsupported kernel family %r" % self.family)
        if not self.sigma > 0:
            raise ValueError("kernel sigma must be positive, got %r" % self.sigma)

    def G(self, s):
        return np.exp(-np.asarray(s) / (2.0 * self.sigma**2))

    def dG(self, s):
        """Derivative of ``G`` with respect to the squared distance."""
        return -self.G(s) / (2.0 * self.sigma**2)


def sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.einsum("ij,ij->i", a, a)
    if b is a:
        r2 = aa[:, None] + aa[None, :] - 2.0 * (a @ a.T)
        np.fill_diagonal(r2, 0.0)
    else:
        bb = np.einsum("ij,ij->i", b, b)
        r2 = aa[:, None] + bb[None, :] - 2.0 * (a @ b.T)
    return np.maximum(r2, 0.0)


def eval(spec: KernelSpec, x, y) -> float:
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return float(spec.G(d @ d))


def grad1_dot(spec: KernelSpec, x, y, n, a) -> np.ndarray:
    """Gradient in ``x`` of ``n . K(x, y) a``, i.e. ``2 G'(|x-y|^2) (n.a) (x-y)``."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return 2.0 * spec.dG(d @ d) * float(np.dot(n, a)) * d


def gram(spec: KernelSpec, pts_a, pts_b=None) -> np.ndarray:
    pts_a = np.asarray(pts_a, dtype=float).reshape(-1, 3)
    pts_b = pts_a if pts_b is None else np.asarray(pts_b, dtype=float).reshape(-1, 3)
    K = spec.G(sqdist(pts_a, pts_b))
    if pts_b is pts_a:
        K = 0.5 * (K + K.T)
    return K


def apply(spec: KernelSpec, pts_target, pts_source, momenta) -> np.ndarray:
    """Velocity ``sum_j G(|t_i - s_j|^2) a_j`` of the field generated at the sources."""
    pts_source = np.asarray(pts_source, dtype=float)
    momenta = np.asarray(momenta, dtype=float)
    if momenta.shape != pts_source.shape:
        raise ValueError(
            "momenta shape %s does not match source points %s" % (momenta.shape, pts_source.shape)
        )
    return spec.G(sqdist(np.asarray(pts_target, dtype=float), pts_source)) @ momenta


def apply_vjp(spec: KernelSpec, y, s, m, w, G=None):
    """Vector-Jacobian product of ``v = apply(spec, y, s, m)`` with cotangent ``w``.

    Returns the gradients of ``sum_i w_i . v_i`` with respect to ``y``, ``s``
    and ``m``. When ``y`` and ``s`` are the same point family, the total
    point gradient is ``gy + gs``. ``G`` may pass a precomputed ``gram(spec, y, s)``.
    """
    if G is None:
        G = spec.G(sqdist(y, s))
    coef = (-G / spec.sigma**2) * (w @ m.T)  # 2 G'(r2) (w_i . m_j)
    gy = coef.sum(axis=1)[:, None] * y - coef @ s
    gs = coef.sum(axis=0)[:, None] * s - coef.T @ y
    gm = G.T @ w
    return gy, gs, gm


def jacobian(spec: KernelSpec, x, pts_source, momenta) -> np.ndarray:
    """Spatial Jacobians ``dv/dx`` of the generated field at points ``x``, shape ``(n, 3, 3)``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x[:, None, :] - pts_source[None, :, :]
    coef = 2.0 * spec.dG(np.einsum("ijk,ijk->ij", d, d))
    # dv_a/dx_b = sum_j 2 G' m_j[a] d_j[b]
    return np.einsum("ij,ija,ijb->iab", coef, np.broadcast_to(momenta, d.shape), d)


def divergence(spec: KernelSpec, x, pts_source, momenta):
    """Divergence of ``sum_j K(., s_j) a_j`` at ``x`` (a single point or an array of points)."""
    pts_source = np.asarray(pts_source, dtype=float)
    momenta = np.asarray(momenta, dtype=float)
    if momenta.shape != pts_source.shape:
        raise ValueError(
            "momenta shape %s does not match source points %s" % (momenta.shape, pts_source.shape)
        )
    xa = np.asarray(x, dtype=float)
    single = xa.ndim == 1
    xa = np.atleast_2d(xa)
    d = xa[:, None, :] - pts_source[None, :, :]
    coef = 2.0 * spec.dG(np.einsum("ijk,ijk->ij", d, d))
    out = np.einsum("ij,ijk,jk->i", coef, d, momenta)
    return float(out[0]) if single else out


def solve(spec: KernelSpec, pts, rhs, max_jitter: float = 1e-6, K=None, return_jitter: bool = False):
    """Solve ``gram(pts, pts) w = rhs`` by Cholesky, adding diagonal jitter if needed.

    A factorization counts as failed when a pivot falls to the rounding level
    of the matrix. The jitter then starts at ``1e-12`` times the mean
    diagonal and doubles up to ``max_jitter`` times the mean diagonal.
    ``K`` may pass a precomputed ``gram(spec, pts)``. With ``return_jitter``
    the diagonal shift actually used is returned as well.
    """
    if K is None:
        K = gram(spec, pts)
    rhs = np.asarray(rhs, dtype=float)
    n = len(K)
    scale = float(np.mean(np.diag(K))) if n else 1.0
    floor = n * np.finfo(float).eps * scale
    delta = 0.0
    while True:
        try:
            L, lower = scipy.linalg.cho_factor(K + delta * np.eye(n), lower=True, check_finite=False)
            piv = np.diag(L)
            if np.all(np.isfinite(L)) and (n == 0 or piv.min() ** 2 > floor):
                w = scipy.linalg.cho_solve((L, lower), rhs, check_finite=False)
                if np.all(np.isfinite(w)):
                    return (w, delta) if return_jitter else w
        except np.linalg.LinAlgError:
            pass
        delta = 1e-12 * scale if delta == 0.0 else 2.0 * delta
        if delta > max_jitter * scale:
            raise KernelSolveError(
                "kernel matrix of %d points (sigma=%g) is numerically singular even with "
                "jitter %.3g; points are too close relative to the kernel width" % (n, spec.sigma, delta / 2)
            )
