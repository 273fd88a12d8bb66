"""Nonlinear conjugate gradient and the augmented Lagrangian outer loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import warnings

import numpy as np
from scipy.optimize import line_search as _wolfe_line_search

from .multishape import ALState

logger = logging.getLogger(__name__)

_EVAL_ERRORS = (FloatingPointError, np.linalg.LinAlgError, OverflowError)


@dataclass
class NlcgConfig:
    max_iters: int = 500
    grad_tol: float = 1e-6
    restart_every: int = 100
    initial_step: float = 1.0
    c1: float = 1e-4
    c2: float = 0.1
    backtrack: float = 0.5
    max_backtracks: int = 40

    def __post_init__(self):
        if min(self.max_iters, self.restart_every, self.max_backtracks) <= 0:
            raise ValueError("iteration counts must be positive")
        if not (self.grad_tol > 0 and self.initial_step > 0):
            raise ValueError("grad_tol and initial_step must be positive")
        if not 0 < self.c1 <= 0.5:
            raise ValueError("sufficient-decrease constant must lie in (0, 0.5]")
        if not self.c1 < self.c2 < 1:
            raise ValueError("curvature constant must lie in (c1, 1)")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")


@dataclass
class NlcgResult:
    x: np.ndarray
    value: float
    grad_norm: float
    n_iter: int
    status: str  # "converged", "max_iters", "stalled", "aborted"
    trace: list = field(default_factory=list)
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _call(fun, x):
    out = fun(x)
    f, g = out[0], np.asarray(out[1])
    h = np.asarray(out[2]) if len(out) > 2 and out[2] is not None else g
    return float(f), g, h


def _try(fun, x):
    try:
        f, g, h = _call(fun, x)
    except _EVAL_ERRORS:
        return math.inf, None, None
    if not np.isfinite(f):
        return math.inf, None, None
    return f, g, h


def _backtrack(fun, x, f, slope, d, step, cfg):
    """Armijo backtracking with safeguarded quadratic interpolation."""
    for _ in range(cfg.max_backtracks):
        xn = x + step * d
        if np.array_equal(xn, x):
            break
        fn, gn, hn = _try(fun, xn)
        if fn <= f + cfg.c1 * step * slope:
            return step, fn, gn, hn
        if np.isfinite(fn):
            denom = 2.0 * (fn - f - slope * step)
            s = -slope * step * step / denom if denom > 0 else cfg.backtrack * step
            step = min(max(s, 0.1 * step), cfg.backtrack * step)
        else:
            step *= cfg.backtrack
    return 0.0, f, None, None


def _line_search(fun, x, f, g, slope, d, step, cfg):
    """Strong Wolfe search (scipy) starting at ``step``, falling back to Armijo backtracking.

    Returns ``(step, f_new, g_new, h_new)``; ``step`` is 0 on failure.
    """
    cache = {}

    def ev(v):
        key = v.tobytes()
        if key not in cache:
            cache[key] = _try(fun, v)
        return cache[key]

    p = step * d
    # scipy starts at min(1, 2.02 (f - f_prev) / slope); pick f_prev so that this is exactly 1
    f_prev = f - step * slope / 2.02
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            a = _wolfe_line_search(lambda v: ev(v)[0], lambda v: ev(v)[1], x, p, g, f, f_prev,
                                   c1=cfg.c1, c2=cfg.c2, maxiter=cfg.max_backtracks)[0]
        except (ValueError, FloatingPointError):
            a = None
    if a is not None and a > 0:
        xn = x + a * p
        fn, gn, hn = ev(xn)
        if np.isfinite(fn) and gn is not None and fn < f and not np.array_equal(xn, x):
            return a * step, fn, gn, hn
    return _backtrack(fun, x, f, slope, d, step, cfg)


def nlcg_minimize(fun, x0, cfg: NlcgConfig | None = None, gtol_abs: float | None = None, callback=None):
    """Minimize with Polak-Ribiere+ nonlinear conjugate gradient.

    ``fun(x)`` returns ``(f, g)`` or ``(f, g, h)``, where ``h`` is a
    preconditioned gradient used to build search directions (``g`` is still
    used for the sufficient-decrease test). Stops when ``|g|`` falls below
    ``gtol_abs`` if given, else ``cfg.grad_tol * |g0|``.

    ``callback(k, x, f, gnorm, step)`` is called after every accepted step.
    """
    cfg = cfg or NlcgConfig()
    x = np.array(x0, dtype=float)
    f, g, h = _call(fun, x)
    gnorm = float(np.linalg.norm(g))
    tol = gtol_abs if gtol_abs is not None else cfg.grad_tol * gnorm
    trace = [{"iter": 0, "value": f, "grad_norm": gnorm, "step": 0.0}]
    if gnorm <= tol:
        return NlcgResult(x, f, gnorm, 0, "converged", trace)

    d = -h
    slope = float(g @ d)
    step = cfg.initial_step
    since_restart = 0
    status, message = "max_iters", ""
    k = 0
    for k in range(1, cfg.max_iters + 1):
        s, fn, gn, hn = _line_search(fun, x, f, g, slope, d, step, cfg)
        if s == 0.0 and since_restart > 0:
            # conjugate direction failed: retry once along the preconditioned gradient
            d = -h
            slope = float(g @ d)
            since_restart = 0
            s, fn, gn, hn = _line_search(fun, x, f, g, slope, d, cfg.initial_step, cfg)
        if s == 0.0:
            # at the rounding floor of f nothing more can be gained
            floor = 64 * np.finfo(float).eps * max(abs(f), 1.0)
            fmin = min(_try(fun, x + t * d)[0] for t in (1e-8, 1e-10))
            if abs(fmin - f) <= floor:
                status, message = "stalled", "no decrease beyond rounding level at |g|=%.3e" % gnorm
            else:
                status = "aborted"
                message = "line search failed along steepest descent at iteration %d (f=%.6e, |g|=%.3e, slope=%.3e)" % (
                    k, f, gnorm, slope)
            k -= 1
            break
        x = x + s * d
        prev_slope = slope
        f_old = f
        g_old, h_old = g, h
        f, g, h = fn, gn, hn
        gnorm = float(np.linalg.norm(g))
        trace.append({"iter": k, "value": f, "grad_norm": gnorm, "step": s * float(np.linalg.norm(d))})
        if callback is not None:
            callback(k, x, f, gnorm, s * float(np.linalg.norm(d)))
        if gnorm <= tol:
            status = "converged"
            break
        denom = float(h_old @ g_old)
        beta = max(0.0, float(h @ (g - g_old)) / denom) if denom > 0 else 0.0
        since_restart += 1
        if since_restart >= cfg.restart_every or beta == 0.0:
            beta, since_restart = 0.0, 0
        d_new = -h + beta * d
        new_slope = float(g @ d_new)
        if new_slope >= 0:
            d_new, new_slope, since_restart = -h, float(g @ -h), 0
        # secant guess for the next initial step, capped growth
        step = s * min(prev_slope / new_slope, 10.0) if new_slope < 0 else cfg.initial_step
        if f_old == f:
            step = cfg.initial_step
        d, slope = d_new, new_slope
    else:
        k = cfg.max_iters
    return NlcgResult(x, f, gnorm, k, status, trace, message)


# -- augmented Lagrangian ------------------------------------------------------


@dataclass
class AlConfig:
    max_outer: int = 30
    inner_tol_start: float = 1e-2
    inner_tol_final: float = 1e-4
    inner_tol_steps: int = 3
    constraint_tol: float = 1e-3
    mu0: float = 1.0
    rho_mu: float = 2.0
    decrease_required: float = 0.5
    mu_max_factor: float = 1e12
    scale_by_objective: bool = True

    def __post_init__(self):
        if not (self.mu0 > 0 and self.rho_mu > 1):
            raise ValueError("need mu0 > 0 and rho_mu > 1")
        if min(self.inner_tol_start, self.inner_tol_final, self.constraint_tol) <= 0:
            raise ValueError("tolerances must be positive")
        if self.inner_tol_final > self.inner_tol_start:
            raise ValueError("inner tolerance schedule must decrease")

    def inner_tol(self, outer: int) -> float:
        """Geometric schedule from ``inner_tol_start`` to ``inner_tol_final``."""
        n = max(self.inner_tol_steps, 1)
        if outer >= n - 1:
            return self.inner_tol_final
        r = (self.inner_tol_final / self.inner_tol_start) ** (1.0 / (n - 1))
        return self.inner_tol_start * r**outer


@dataclass
class AlResult:
    x: np.ndarray
    al: ALState
    status: str  # "converged", "max_outer", "infeasible"
    trace: list
    outer: list
    message: str = ""


class InnerSolverError(RuntimeError):
    pass


def _inf_norm(C) -> float:
    C = np.asarray(C)
    return float(np.abs(C).max()) if C.size else 0.0


def al_update(al: ALState, residual, decrease_required: float = 0.5, norm=_inf_norm) -> ALState:
    """Multiplier step ``lam <- lam - mu C``; grow ``mu`` if ``norm(C)`` did not shrink enough."""
    residual = np.asarray(residual, dtype=float)
    cnorm = norm(residual)
    lam = al.lam - al.mu * residual
    mu = al.mu
    if al.history and cnorm > decrease_required * al.history[-1]:
        mu = al.rho_mu * al.mu
    return replace(al, lam=lam, mu=mu, history=al.history + [cnorm])


def al_solve(problem, al_cfg: AlConfig | None = None, nlcg_cfg: NlcgConfig | None = None, x0=None,
             grad_mode: str = "hilbert", scale: float | None = None) -> AlResult:
    """Augmented Lagrangian loop around :func:`nlcg_minimize`.

    ``problem`` provides ``zero_controls()``, ``unflatten(u)``,
    ``zero_multipliers()``, ``objective(u, al) -> (f, g, h)``,
    ``residual(ctrl)`` and ``constraint_scale``. The penalty and constraint
    tolerance are expressed relative to ``constraint_scale`` (or ``scale``).
    With ``scale_by_objective`` the initial penalty is also multiplied by the
    objective value at ``x0``, so that ``mu0 = 1`` weighs a constraint
    violation of one scale unit like the whole initial mismatch.

    ``AlResult.outer`` holds one entry per outer iteration with the
    multipliers ``lam`` and penalty ``mu`` used in that iteration and the
    resulting constraint values ``residual``.
    """
    al_cfg = al_cfg or AlConfig()
    nlcg_cfg = nlcg_cfg or NlcgConfig()
    scale = float(scale if scale is not None else getattr(problem, "constraint_scale", 1.0))
    if not scale > 0:
        # degenerate geometry (a single point) has no length scale
        scale = 1.0
    u = np.asarray(x0, dtype=float).copy() if x0 is not None else problem.zero_controls().ravel()
    mu0 = al_cfg.mu0 / scale**2
    al = ALState(problem.zero_multipliers(), mu0, al_cfg.rho_mu)
    f0, g0, _ = problem.objective(u, al)
    if al_cfg.scale_by_objective and f0 > 0:
        mu0 *= f0
        al = ALState(al.lam, mu0, al_cfg.rho_mu)
    ctol = al_cfg.constraint_tol * scale
    cnorm_of = getattr(problem, "constraint_norm", _inf_norm)

    def fun(v):
        f, g, h = problem.objective(v, al)
        return (f, g, h) if grad_mode == "hilbert" else (f, g)

    g_ref = float(np.linalg.norm(g0)) or 1.0
    trace, outer_log = [], []
    status, message = "max_outer", ""
    for it in range(al_cfg.max_outer):
        inner_tol = al_cfg.inner_tol(it)
        mu_now = al.mu

        def record(k, x, f, gnorm, step, it=it, mu_now=mu_now):
            trace.append({"outer": it, "inner": k, "objective": f, "grad_norm": gnorm,
                          "constraint_inf_norm": getattr(problem, "last_constraint_norm", float("nan")),
                          "mu": mu_now, "step_len": step})

        res = nlcg_minimize(fun, u, nlcg_cfg, gtol_abs=inner_tol * g_ref, callback=record)
        if res.status == "aborted":
            raise InnerSolverError("outer iteration %d: %s" % (it, res.message))
        u = res.x
        C = problem.residual(problem.unflatten(u))
        if inner_tol > al_cfg.inner_tol_final and cnorm_of(C) <= ctol:
            # constraints already met: finish this subproblem at the final tolerance
            inner_tol = al_cfg.inner_tol_final
            res = nlcg_minimize(fun, u, nlcg_cfg, gtol_abs=inner_tol * g_ref, callback=record)
            if res.status == "aborted":
                raise InnerSolverError("outer iteration %d: %s" % (it, res.message))
            u = res.x
            C = problem.residual(problem.unflatten(u))
        al_prev = al
        al = al_update(al, C, al_cfg.decrease_required, cnorm_of)
        cnorm = al.history[-1]
        outer_log.append({"outer": it, "constraint_inf_norm": cnorm, "objective": res.value,
                          "inner_iters": res.n_iter, "inner_status": res.status, "mu": al_prev.mu,
                          "grad_norm": res.grad_norm, "lam": al_prev.lam, "residual": C})
        logger.info("outer %d: |C|=%.3e (tol %.3e) mu=%.3e f=%.6e inner=%d %s",
                    it, cnorm, ctol, al_prev.mu, res.value, res.n_iter, res.status)
        final_tol = inner_tol <= al_cfg.inner_tol_final
        if cnorm <= ctol and final_tol:
            status = "converged"
            break
        if al.mu > al_cfg.mu_max_factor * mu0:
            status = "infeasible"
            message = "constraint infeasible at this resolution (mu=%.3e after %d outer iterations, |C|=%.3e)" % (
                al.mu, it + 1, cnorm)
            break
    return AlResult(u, al, status, trace, outer_log, message)


TRACE_COLUMNS = ("outer", "inner", "objective", "grad_norm", "constraint_inf_norm", "mu", "step_len")


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            out = []
            for c in TRACE_COLUMNS:
                v = row.get(c)
                if v is None or (isinstance(v, float) and math.isnan(v)):
                    out.append("")
                elif isinstance(v, float):
                    out.append(repr(v))
                else:
                    out.append(str(v))
            w.writerow(out)
