"""Single-shape reduced LDDMM on point sets.

Time is discretized into ``T`` explicit Euler steps of size ``dt = 1/T``::

    x[t+1] = x[t] + dt * K(x[t], x[t]) alpha[t]
    E(alpha) = 1/2 sum_t dt alpha[t].K(x[t]) alpha[t] + U(x[T])

and :func:`adjoint_grad` is the exact gradient of this discrete ``E``
obtained by running the recursion backwards.
"""

from __future__ import annotations

import numpy as np

from . import kernel
from .dataterm import NullTerm
from .kernel import KernelSpec


class FlowDivergenceError(FloatingPointError):
    pass


def _check_finite(x, t, what="state"):
    if not np.all(np.isfinite(x)):
        raise FlowDivergenceError("non-finite %s at time step %d" % (what, t))


def shoot(spec: KernelSpec, q0, alpha) -> np.ndarray:
    """Integrate the point trajectories; returns ``x`` of shape ``(T+1, m, 3)``."""
    q0 = np.asarray(q0, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 3 or alpha.shape[1:] != q0.shape:
        raise ValueError("controls of shape %s do not match %d points" % (alpha.shape, len(q0)))
    T = alpha.shape[0]
    dt = 1.0 / T
    x = np.empty((T + 1,) + q0.shape)
    x[0] = q0
    for t in range(T):
        x[t + 1] = x[t] + dt * (kernel.gram(spec, x[t]) @ alpha[t])
        _check_finite(x[t + 1], t + 1)
    return x


def transport(spec: KernelSpec, x, alpha, points) -> np.ndarray:
    """Carry arbitrary points along the flow given by source trajectory ``x`` and momenta ``alpha``.

    Uses the same Euler steps as :func:`shoot`; returns ``(T+1, n, 3)``.
    """
    alpha = np.asarray(alpha, dtype=float)
    q = np.asarray(points, dtype=float)
    T = len(alpha)
    dt = 1.0 / T
    out = np.empty((T + 1,) + q.shape)
    out[0] = q
    for t in range(T):
        out[t + 1] = out[t] + dt * kernel.apply(spec, out[t], x[t], alpha[t])
        _check_finite(out[t + 1], t + 1, "transported points")
    return out


def hamiltonian(spec: KernelSpec, x_t, alpha_t) -> float:
    """Reduced Hamiltonian ``1/2 alpha.K(x) alpha`` (kinetic energy at one time)."""
    return 0.5 * float(np.sum(alpha_t * kernel.apply(spec, x_t, x_t, alpha_t)))


def kinetic_energy(spec: KernelSpec, x, alpha) -> float:
    T = len(alpha)
    return sum(hamiltonian(spec, x[t], alpha[t]) for t in range(T)) / T


def reduced_cost(spec: KernelSpec, q0, alpha, data=None) -> float:
    data = data or NullTerm()
    x = shoot(spec, q0, alpha)
    return kinetic_energy(spec, x, alpha) + data.cost(x[-1])


def backward(spec: KernelSpec, x, alpha, g_end):
    """Reverse sweep of the Euler recursion.

    ``g_end`` is ``dE/dx[T]``. Returns ``(grad, hilbert, g)`` where ``grad``
    is the Euclidean gradient in ``alpha``, ``hilbert`` the gradient for the
    kernel metric, ``dt * (alpha - p)``, and ``g[t] = dE/dx[t]`` (so the
    co-state is ``p = -g``).
    """
    T = len(alpha)
    dt = 1.0 / T
    g = np.empty_like(x)
    g[T] = g_end
    grad = np.empty_like(alpha)
    hilbert = np.empty_like(alpha)
    for t in range(T - 1, -1, -1):
        a, gn = alpha[t], g[t + 1]
        hilbert[t] = dt * (a + gn)
        # kinetic term and dynamics share one product: w = g[t+1] + a/2
        G = kernel.gram(spec, x[t])
        gy, gs, gm = kernel.apply_vjp(spec, x[t], x[t], a, gn + 0.5 * a, G=G)
        grad[t] = dt * (G @ (a + gn))
        g[t] = gn + dt * (gy + gs)
        _check_finite(g[t], t, "co-state")
    return grad, hilbert, g


def adjoint_grad(spec: KernelSpec, q0, alpha, data=None, mode: str = "kernel") -> np.ndarray:
    """Gradient of :func:`reduced_cost` in the controls.

    ``mode="kernel"`` gives the plain Euclidean gradient of the discrete
    cost, ``dt * K(x[t]) (alpha[t] - p[t+1])``; ``mode="hilbert"`` gives
    ``dt * (alpha[t] - p[t+1])``, the gradient for the metric induced by the
    kernel, which needs no linear solve.
    """
    if mode not in ("kernel", "hilbert"):
        raise ValueError("mode must be 'kernel' or 'hilbert'")
    data = data or NullTerm()
    alpha = np.asarray(alpha, dtype=float)
    x = shoot(spec, q0, alpha)
    grad, hilbert, _ = backward(spec, x, alpha, data.grad(x[-1]))
    return grad if mode == "kernel" else hilbert


def costate(spec: KernelSpec, q0, alpha, data=None) -> np.ndarray:
    """Discrete co-state trajectory ``p[t] = -dE/dx[t]``, shape ``(T+1, m, 3)``."""
    data = data or NullTerm()
    alpha = np.asarray(alpha, dtype=float)
    x = shoot(spec, q0, alpha)
    return -backward(spec, x, alpha, data.grad(x[-1]))[2]


class SingleFlowProblem:
    """Unconstrained registration of one point set (or mesh vertex set) with one kernel.

    Exposes the flat-vector ``objective`` interface used by the optimizers.
    """

    def __init__(self, spec: KernelSpec, q0, data, T: int = 10):
        self.spec = spec
        self.q0 = np.asarray(q0, dtype=float)
        self.data = data
        self.T = int(T)

    @property
    def shape(self):
        return (self.T,) + self.q0.shape

    def zero_controls(self) -> np.ndarray:
        return np.zeros(self.shape)

    def objective(self, u: np.ndarray):
        alpha = u.reshape(self.shape)
        x = shoot(self.spec, self.q0, alpha)
        val = kinetic_energy(self.spec, x, alpha) + self.data.cost(x[-1])
        grad, hilbert, _ = backward(self.spec, x, alpha, self.data.grad(x[-1]))
        return val, grad.ravel(), hilbert.ravel()
