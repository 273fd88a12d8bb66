"""Constrained multishape flows: shapes deformed by their own kernels plus a background.

Every shape ``k`` carries momenta ``alpha[k]`` at its own vertices and the
background carries ``beta`` at its ``m`` points (one copy of every shape
vertex). Shapes and background follow independent Euler flows with the same
time grid as :mod:`multilddmm.flow`, and are tied together by either

* identity constraints ``x[k][t] = z[k][t]`` at ``t = 1..T`` (``t = 0`` holds
  by construction), or
* sliding constraints ``Gamma_f = N_f . sum_{j in f} (u_k(z_j) - u_n(z_j)) = 0``
  per background face and time ``t = 0..T-1``, with ``N_f`` the area-weighted
  normal of the background triangle.

Both enter an augmented Lagrangian ``- sum dt lam.C + mu/2 sum dt |C|^2``
whose gradient is computed by the exact reverse sweep of the discrete forward
scheme.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom, kernel
from .dataterm import NullTerm
from .flow import _check_finite
from .kernel import KernelSpec

MODES = ("identity", "sliding", "none")


@dataclass
class MultiControl:
    alphas: list
    beta: np.ndarray

    @property
    def T(self) -> int:
        return self.beta.shape[0]

    def ravel(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.alphas] + [self.beta.ravel()])

    @classmethod
    def zeros(cls, complex_: geom.MultiShapeComplex, T: int) -> "MultiControl":
        return cls(
            [np.zeros((T, s.n_vertices, 3)) for s in complex_.shapes],
            np.zeros((T, complex_.n_background, 3)),
        )

    @classmethod
    def from_flat(cls, u: np.ndarray, complex_: geom.MultiShapeComplex, T: int) -> "MultiControl":
        out, i = [], 0
        for s in complex_.shapes:
            n = T * s.n_vertices * 3
            out.append(u[i:i + n].reshape(T, s.n_vertices, 3))
            i += n
        beta = u[i:].reshape(T, complex_.n_background, 3)
        return cls(out, beta)


@dataclass
class MultiShapeState:
    x: list
    z: np.ndarray


@dataclass
class ALState:
    """Lagrange multipliers and penalty weight of the augmented Lagrangian."""

    lam: np.ndarray
    mu: float
    rho_mu: float = 2.0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("penalty weight mu must be positive")


def forward(complex_: geom.MultiShapeComplex, kernels, ctrl: MultiControl, grams: list | None = None) -> MultiShapeState:
    """Integrate all shape flows and the background flow.

    ``kernels`` lists one :class:`KernelSpec` per shape followed by the
    background kernel. If ``grams`` is a list it receives, per flow (shapes
    then background), the list of kernel matrices at ``t = 0..T-1``.
    """
    T = ctrl.T
    dt = 1.0 / T
    xs = []
    for k, s in enumerate(complex_.shapes):
        x = np.empty((T + 1, s.n_vertices, 3))
        x[0] = s.vertices
        a = ctrl.alphas[k]
        Gs = []
        for t in range(T):
            Gs.append(kernel.gram(kernels[k], x[t]))
            x[t + 1] = x[t] + dt * (Gs[-1] @ a[t])
            _check_finite(x[t + 1], t + 1, "shape %d state" % k)
        xs.append(x)
        if grams is not None:
            grams.append(Gs)
    z = np.empty((T + 1, complex_.n_background, 3))
    z[0] = complex_.background_vertices()
    Gs = []
    for t in range(T):
        Gs.append(kernel.gram(kernels[-1], z[t]))
        z[t + 1] = z[t] + dt * (Gs[-1] @ ctrl.beta[t])
        _check_finite(z[t + 1], t + 1, "background state")
    if grams is not None:
        grams.append(Gs)
    return MultiShapeState(xs, z)


def identity_residual(state: MultiShapeState) -> np.ndarray:
    """``x - z`` for every time ``t = 0..T``, shape ``(T+1, m, 3)`` in background numbering."""
    return np.concatenate(state.x, axis=1) - state.z


def _relative_velocity(complex_, kernels, xs, z, alphas, beta, Gz=None):
    """``u_k(z_j) - u_n(z_j)`` at every background point, shape ``(m, 3)``."""
    w = np.empty_like(z)
    for k in range(complex_.n_shapes):
        blk = complex_.block(k)
        w[blk] = kernel.apply(kernels[k], z[blk], xs[k], alphas[k])
    if Gz is None:
        return w - kernel.apply(kernels[-1], z, z, beta)
    return w - Gz @ beta


def sliding_residual(state: MultiShapeState, ctrl: MultiControl, complex_, kernels) -> np.ndarray:
    """``Gamma[t, f] = sum_{j in f} det(e'_j, e''_j, u_k(z_j) - u_n(z_j))`` for ``t = 0..T-1``."""
    faces = complex_.background_faces()
    T = ctrl.T
    out = np.empty((T, len(faces)))
    for t in range(T):
        xs = [x[t] for x in state.x]
        w = _relative_velocity(complex_, kernels, xs, state.z[t], [a[t] for a in ctrl.alphas], ctrl.beta[t])
        N, _ = geom.normals_centers(state.z[t], faces)
        out[t] = np.einsum("fk,fk->f", N, w[faces].sum(axis=1))
    return out


class MultiShapeProblem:
    """A multishape registration instance: geometry, kernels, data terms, time grid and constraint mode.

    ``shape_terms[k]`` matches shape ``k``'s vertices ``x[k][T]`` and
    ``background_terms[k]`` matches the background copy ``z[k][T]``.
    """

    def __init__(
        self,
        complex_: geom.MultiShapeComplex,
        shape_kernels,
        background_kernel: KernelSpec,
        shape_terms=None,
        background_terms=None,
        T: int = 10,
        mode: str = "identity",
    ):
        if mode not in MODES:
            raise ValueError("mode must be one of %s, got %r" % (MODES, mode))
        n = complex_.n_shapes
        if len(shape_kernels) != n:
            raise ValueError("need one kernel per shape (%d), got %d" % (n, len(shape_kernels)))
        self.complex = complex_
        self.kernels = list(shape_kernels) + [background_kernel]
        self.shape_terms = list(shape_terms) if shape_terms is not None else [NullTerm()] * n
        self.background_terms = (
            list(background_terms) if background_terms is not None else list(self.shape_terms)
        )
        self.T = int(T)
        self.mode = mode
        self.faces = complex_.background_faces()

    # -- layout ---------------------------------------------------------------

    def zero_controls(self) -> MultiControl:
        return MultiControl.zeros(self.complex, self.T)

    def unflatten(self, u) -> MultiControl:
        return MultiControl.from_flat(np.asarray(u, dtype=float), self.complex, self.T)

    def zero_multipliers(self) -> np.ndarray:
        if self.mode == "identity":
            return np.zeros((self.T, self.complex.n_background, 3))
        if self.mode == "sliding":
            return np.zeros((self.T, len(self.faces)))
        return np.zeros((self.T, 0))

    @property
    def bbox_diagonal(self) -> float:
        v = self.complex.background_vertices()
        return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))

    @property
    def constraint_scale(self) -> float:
        """Natural size of the constraint values, used to nondimensionalize ``mu`` and tolerances.

        Identity residuals are lengths; sliding residuals are (length^2 x
        velocity), with the bounding-box diagonal ``L`` as length scale and
        ``L/10`` per unit time as velocity scale.
        """
        L = self.bbox_diagonal
        return L if self.mode != "sliding" else L**3 / 10.0

    def constraint_norm(self, C) -> float:
        """Max-norm of constraint values: per-point Euclidean length for identity, absolute value for sliding."""
        C = np.asarray(C)
        if C.size == 0:
            return 0.0
        if self.mode == "identity":
            return float(np.sqrt(np.einsum("...k,...k->...", C, C)).max())
        return float(np.abs(C).max())

    # -- evaluation -----------------------------------------------------------

    def forward(self, ctrl: MultiControl, grams: list | None = None) -> MultiShapeState:
        return forward(self.complex, self.kernels, ctrl, grams)

    def residual(self, ctrl: MultiControl, state: MultiShapeState | None = None) -> np.ndarray:
        """Constraint values in the layout of the multipliers."""
        state = state or self.forward(ctrl)
        if self.mode == "identity":
            return identity_residual(state)[1:]
        if self.mode == "sliding":
            return sliding_residual(state, ctrl, self.complex, self.kernels)
        return np.zeros((self.T, 0))

    def energy_terms(self, ctrl: MultiControl, state: MultiShapeState | None = None, grams=None) -> dict:
        """Kinetic energies and data terms, separately."""
        if state is None or grams is None:
            grams = []
            state = self.forward(ctrl, grams)
        T = self.T
        kin_x = sum(
            0.5 / T * float(np.sum(a[t] * (Gs[t] @ a[t])))
            for a, Gs in zip(ctrl.alphas, grams)
            for t in range(T)
        )
        kin_z = sum(0.5 / T * float(np.sum(ctrl.beta[t] * (grams[-1][t] @ ctrl.beta[t]))) for t in range(T))
        data_x = sum(U.cost(x[-1]) for U, x in zip(self.shape_terms, state.x))
        data_z = sum(
            U.cost(state.z[-1][self.complex.block(k)]) for k, U in enumerate(self.background_terms)
        )
        return {"kinetic_shapes": kin_x, "kinetic_background": kin_z, "data_shapes": data_x, "data_background": data_z}

    def data_value(self, ctrl: MultiControl) -> float:
        e = self.energy_terms(ctrl)
        return e["data_shapes"] + e["data_background"]

    def al_objective(self, ctrl: MultiControl, al: ALState | None) -> float:
        return self._evaluate(ctrl, al, gradient=False)[0]

    def al_gradient(self, ctrl: MultiControl, al: ALState | None, grad_mode: str = "kernel") -> MultiControl:
        _, grad, hilbert = self._evaluate(ctrl, al, gradient=True)
        if grad_mode == "kernel":
            return grad
        if grad_mode == "hilbert":
            return hilbert
        raise ValueError("grad_mode must be 'kernel' or 'hilbert'")

    def objective(self, u: np.ndarray, al: ALState | None):
        """Flat-vector ``(value, gradient, hilbert gradient)`` for the optimizers."""
        val, grad, hilbert = self._evaluate(self.unflatten(u), al, gradient=True)
        return val, grad.ravel(), hilbert.ravel()

    def _evaluate(self, ctrl: MultiControl, al: ALState | None, gradient: bool):
        cx = self.complex
        K = self.kernels
        T = self.T
        dt = 1.0 / T
        n = cx.n_shapes
        mode = self.mode if al is not None else "none"
        lam = al.lam if al is not None else None
        mu = al.mu if al is not None else 0.0
        grams = []
        state = self.forward(ctrl, grams)
        xs, z = state.x, state.z

        terms = self.energy_terms(ctrl, state, grams)
        value = sum(terms.values())

        if mode == "identity":
            C = identity_residual(state)[1:]
            value += dt * float(np.sum(-lam * C + 0.5 * mu * C * C))
            self.last_constraint_norm = self.constraint_norm(C)
        elif mode == "sliding":
            gammas = []
            for t in range(T):
                w = _relative_velocity(cx, K, [x[t] for x in xs], z[t], [a[t] for a in ctrl.alphas], ctrl.beta[t],
                                       grams[-1][t])
                N, _ = geom.normals_centers(z[t], self.faces)
                S = w[self.faces].sum(axis=1)
                gammas.append((np.einsum("fk,fk->f", N, S), N, S))
            G = np.array([g[0] for g in gammas])
            value += dt * float(np.sum(-lam * G + 0.5 * mu * G * G))
            self.last_constraint_norm = self.constraint_norm(G)
        else:
            self.last_constraint_norm = float("nan")
        if not gradient:
            return value, None, None

        # reverse sweep; gx[k], gz hold dL/dx[t+1], dL/dz[t+1] at the top of each step
        gx = [U.grad(x[-1]) for U, x in zip(self.shape_terms, xs)]
        gz = np.concatenate([U.grad(z[-1][cx.block(k)]) for k, U in enumerate(self.background_terms)])
        if mode == "identity":
            force = dt * (-lam[T - 1] + mu * C[T - 1])
            gx = [g + force[cx.block(k)] for k, g in enumerate(gx)]
            gz = gz - force
        galpha = [np.empty_like(a) for a in ctrl.alphas]
        halpha = [np.empty_like(a) for a in ctrl.alphas]
        gbeta = np.empty_like(ctrl.beta)
        hbeta = np.empty_like(ctrl.beta)
        for t in range(T - 1, -1, -1):
            new_gx = []
            for k in range(n):
                a = ctrl.alphas[k][t]
                x = xs[k][t]
                halpha[k][t] = dt * (a + gx[k])
                Gk = grams[k][t]
                galpha[k][t] = dt * (Gk @ (a + gx[k]))
                gy, gs, _ = kernel.apply_vjp(K[k], x, x, a, gx[k] + 0.5 * a, G=Gk)
                new_gx.append(gx[k] + dt * (gy + gs))
            b = ctrl.beta[t]
            hbeta[t] = dt * (b + gz)
            Gz = grams[-1][t]
            gbeta[t] = dt * (Gz @ (b + gz))
            gy, gs, _ = kernel.apply_vjp(K[-1], z[t], z[t], b, gz + 0.5 * b, G=Gz)
            gz = gz + dt * (gy + gs)
            gx = new_gx

            if mode == "sliding":
                Gt, N, S = gammas[t]
                c = dt * (-lam[t] + mu * Gt)
                e = geom.opposite_edges(z[t], self.faces)
                cS = c[:, None] * S
                W = np.zeros_like(z[t])
                for s_ in range(3):
                    # d(N_f . v)/d(vertex in slot s) = -e_s x v
                    np.add.at(gz, self.faces[:, s_], -np.cross(e[:, s_], cS))
                    np.add.at(W, self.faces[:, s_], c[:, None] * N)
                for k in range(n):
                    blk = cx.block(k)
                    if not W[blk].any():
                        continue
                    gy, gs, gm = kernel.apply_vjp(K[k], z[t][blk], xs[k][t], ctrl.alphas[k][t], W[blk])
                    gz[blk] += gy
                    gx[k] = gx[k] + gs
                    galpha[k][t] += gm
                    halpha[k][t] += kernel.solve(K[k], xs[k][t], gm, K=grams[k][t])
                gy, gs, gm = kernel.apply_vjp(K[-1], z[t], z[t], ctrl.beta[t], -W, G=Gz)
                gz += gy + gs
                gbeta[t] += gm
                hbeta[t] += -W
            elif mode == "identity" and t >= 1:
                force = dt * (-lam[t - 1] + mu * C[t - 1])
                gx = [g + force[cx.block(k)] for k, g in enumerate(gx)]
                gz = gz - force
        return value, MultiControl(galpha, gbeta), MultiControl(halpha, hbeta)
