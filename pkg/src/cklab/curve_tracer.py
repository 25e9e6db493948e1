"""Curves {grad_xi phi(x, t, xi) = v}, traced as graphs x = X(xi, v, t) over t."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.stats import qmc

from . import taylor as tj
from .phase_core import Box, PhaseSpec, expand_points

TAU_NEWTON = 1e-12
MAX_ITERS = 50
MAX_COND = 1e8
H_IMPLICIT = 1e-5


class TraceError(RuntimeError):
    def __init__(self, msg: str, t: float | None = None):
        super().__init__(msg if t is None else f"{msg} (t = {t:.6g})")
        self.t = t


class IllConditionedError(TraceError):
    pass


@dataclass(frozen=True, eq=False)
class CurveParam:
    """The pair (xi, v) indexing the curve {grad_xi phi = v}."""

    xi: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float).copy())
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.xi, self.v])

    def to_dict(self) -> dict:
        return {"xi": self.xi.tolist(), "v": self.v.tolist()}


@dataclass(frozen=True, eq=False)
class CurveSample:
    t_grid: np.ndarray
    points: np.ndarray
    newton_iters: np.ndarray
    param: CurveParam | None = None

    def at(self, t) -> np.ndarray:
        """Linear interpolation of X(t) between grid points."""
        t = np.asarray(t, dtype=float)
        return np.stack([np.interp(t, self.t_grid, col) for col in self.points.T], axis=-1)

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        k = self.points.shape[1]
        w.writerow(["t"] + [f"x{i + 1}" for i in range(k)])
        for t, x in zip(self.t_grid, self.points):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in x])


def curve_metric(p1: CurveParam, p2: CurveParam) -> float:
    return float(np.linalg.norm(p1.xi - p2.xi) + np.linalg.norm(p1.v - p2.v))


# pointwise quantities -------------------------------------------------------


def _stack(x, t, xi) -> np.ndarray:
    """Rows (x, t, xi) from batched inputs x (B, k), t (B,), xi (B, k)."""
    return np.column_stack([x, t, xi])


def _grad_and_jac(phase: PhaseSpec, x, t, xi):
    """grad_xi phi (B, k) and its x-Jacobian (B, k, k), entry [b, j, i] = d_{x_i} d_{xi_j} phi."""
    n, k = phase.n, phase.n - 1
    P = expand_points(phase, _stack(x, t, xi), 2)
    grad = np.empty((len(t), k))
    jac = np.empty((len(t), k, k))
    for j in range(k):
        d = P.diff(n + j)
        grad[:, j] = d.value
        for i in range(k):
            jac[:, j, i] = d.diff(i).value
    return grad, jac


def v_of(phase: PhaseSpec, x, t, xi) -> np.ndarray:
    """grad_xi phi at one point."""
    P = expand_points(phase, _stack(np.atleast_2d(x), [t], np.atleast_2d(xi)), 1)
    return np.array([P.diff(phase.n + j).value[0] for j in range(phase.n - 1)])


def v_of_many(phase: PhaseSpec, x, t, xi) -> np.ndarray:
    P = expand_points(phase, _stack(x, t, xi), 1)
    return np.column_stack([P.diff(phase.n + j).value for j in range(phase.n - 1)])


def solve_x_many(phase: PhaseSpec, xi, v, t, x_guess):
    """Batched damped Newton for grad_xi phi(x, t, xi) = v.

    Returns solutions (B, k) and iteration counts (B,).
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    x = np.array(np.atleast_2d(x_guess), dtype=float)
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],)).copy()
    B = x.shape[0]
    iters = np.zeros(B, dtype=int)
    active = np.arange(B)
    for _ in range(MAX_ITERS + 1):
        g, J = _grad_and_jac(phase, x[active], t[active], xi[active])
        F = g - v[active]
        res = np.linalg.norm(F, axis=1)
        bad = ~np.isfinite(res)
        if np.any(bad):
            raise TraceError("Newton iterate left the region where the phase is finite", float(t[active][bad][0]))
        done = res <= TAU_NEWTON
        active = active[~done]
        if active.size == 0:
            return x, iters
        if np.all(iters[active] >= MAX_ITERS):
            raise TraceError(f"Newton did not converge in {MAX_ITERS} iterations", float(t[active][0]))
        F, J, res = F[~done], J[~done], res[~done]
        cond = np.linalg.cond(J)
        if np.any(cond > MAX_COND):
            raise IllConditionedError(f"Jacobian condition number {cond.max():.3g} exceeds {MAX_COND:g}", float(t[active][np.argmax(cond)]))
        step = np.linalg.solve(J, F[..., None])[..., 0]
        # halve the step wherever the residual would increase
        lam = np.ones(active.size)
        for _ in range(30):
            trial = x[active] - lam[:, None] * step
            g2, _ = _grad_and_jac(phase, trial, t[active], xi[active])
            r2 = np.linalg.norm(g2 - v[active], axis=1)
            worse = ~(r2 < res) & (r2 > TAU_NEWTON)
            if not np.any(worse):
                break
            lam[worse] *= 0.5
        x[active] = x[active] - lam[:, None] * step
        iters[active] += 1
    raise TraceError(f"Newton did not converge in {MAX_ITERS} iterations", float(t[active][0]))


def solve_x(phase: PhaseSpec, xi, v, t: float, x_guess=None) -> np.ndarray:
    if x_guess is None:
        x_guess = phase.origin[0]
    x, _ = solve_x_many(phase, [xi], [v], [t], [x_guess])
    return x[0]


def _start_index(phase: PhaseSpec, t_grid: np.ndarray) -> int:
    return int(np.argmin(np.abs(t_grid - phase.origin[1])))


def trace_curves(phase: PhaseSpec, xis, vs, t_grid, x_guess=None):
    """Trace many curves on a common t-grid by continuation from the origin height.

    Returns points (B, len(t_grid), k) and iteration counts (B, len(t_grid)).
    """
    t_grid = np.asarray(t_grid, dtype=float)
    xis = np.atleast_2d(np.asarray(xis, dtype=float))
    vs = np.atleast_2d(np.asarray(vs, dtype=float))
    lo, hi = phase.t_range
    if t_grid.min() < lo - 1e-12 or t_grid.max() > hi + 1e-12:
        raise ValueError(f"t-grid leaves the phase's t-range [{lo}, {hi}]")
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t-grid must be increasing")
    B, k, T = xis.shape[0], phase.n - 1, t_grid.size
    pts = np.empty((B, T, k))
    iters = np.zeros((B, T), dtype=int)
    i0 = _start_index(phase, t_grid)
    guess = np.tile(phase.origin[0], (B, 1)) if x_guess is None else np.array(np.atleast_2d(x_guess), dtype=float)
    pts[:, i0], iters[:, i0] = solve_x_many(phase, xis, vs, t_grid[i0], guess)
    for order in (range(i0 + 1, T), range(i0 - 1, -1, -1)):
        prev = pts[:, i0]
        for i in order:
            pts[:, i], iters[:, i] = solve_x_many(phase, xis, vs, t_grid[i], prev)
            prev = pts[:, i]
    return pts, iters


def trace_curve(phase: PhaseSpec, xi, v, t_grid) -> CurveSample:
    pts, iters = trace_curves(phase, [xi], [v], t_grid)
    return CurveSample(np.asarray(t_grid, dtype=float).copy(), pts[0], iters[0], CurveParam(xi, v))


def analytic_tangent(phase: PhaseSpec, xi, x, t) -> np.ndarray:
    """(dX/dt, 1) with dX/dt = -(grad_x grad_xi phi)^{-1} d_t grad_xi phi."""
    n, k = phase.n, phase.n - 1
    P = expand_points(phase, _stack(np.atleast_2d(x), [t], np.atleast_2d(xi)), 2)
    J = np.empty((k, k))
    dt = np.empty(k)
    for j in range(k):
        d = P.diff(n + j)
        dt[j] = d.diff(n - 1).value[0]
        for i in range(k):
            J[j, i] = d.diff(i).value[0]
    return np.r_[-np.linalg.solve(J, dt), 1.0]


def xi_hessian(phase: PhaseSpec, x, t, xi) -> np.ndarray:
    n, k = phase.n, phase.n - 1
    P = expand_points(phase, _stack(np.atleast_2d(x), [t], np.atleast_2d(xi)), 2)
    return np.array([[P.diff(n + i).diff(n + j).value[0] for j in range(k)] for i in range(k)])


def check_implicit_derivative(phase: PhaseSpec, xi, v, t: float, h: float = H_IMPLICIT) -> float:
    """|| grad_xi X + grad_v X . Hess_xi phi(X, t, xi) ||_F with X-derivatives by central differences."""
    xi = np.asarray(xi, dtype=float)
    v = np.asarray(v, dtype=float)
    k = xi.size
    x0 = solve_x(phase, xi, v, t)
    eye = np.eye(k)
    # perturbed parameters in one batch: xi +- h e_j, then v +- h e_j
    P_xi = np.concatenate([xi + h * eye, xi - h * eye, np.tile(xi, (2 * k, 1))])
    P_v = np.concatenate([np.tile(v, (2 * k, 1)), v + h * eye, v - h * eye])
    X, _ = solve_x_many(phase, P_xi, P_v, np.full(4 * k, t), np.tile(x0, (4 * k, 1)))
    dX_dxi = ((X[:k] - X[k : 2 * k]) / (2 * h)).T
    dX_dv = ((X[2 * k : 3 * k] - X[3 * k :]) / (2 * h)).T
    H = xi_hessian(phase, x0, t, xi)
    return float(np.linalg.norm(dX_dxi + dX_dv @ H))


@lru_cache(maxsize=64)
def v_box(phase: PhaseSpec, samples: int = 10_000, seed: int = 0) -> Box:
    """Bounding box of grad_xi phi over the shrunk domain, itself shrunk by 10%.

    The box origin is grad_xi phi at the domain origin.
    """
    n = phase.n
    M0, S0 = phase.domain_M.shrunk(0.9), phase.domain_xi.shrunk(0.9)
    lo = np.concatenate([M0.lo, S0.lo])
    hi = np.concatenate([M0.hi, S0.hi])
    u = qmc.Halton(d=2 * n - 1, scramble=True, seed=seed).random(samples)
    pts = lo + u * (hi - lo)
    g = v_of_many(phase, pts[:, : n - 1], pts[:, n - 1], pts[:, n:])
    x0, t0, xi0 = phase.origin
    origin = v_of(phase, x0, t0, xi0)
    box = Box(g.min(axis=0), g.max(axis=0), origin)
    return box.shrunk(0.9)


def in_parameter_boxes(phase: PhaseSpec, param: CurveParam) -> bool:
    return phase.domain_xi.contains(param.xi) and v_box(phase).contains(param.v)
