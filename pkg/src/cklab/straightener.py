"""Straightening maps (F, Xi, V): curves near an anchor curve go to lines up to quadratic error.

A line is ``line_{Xi, V} = {(V - s Xi, s)}``.  The built map is

    F(x, t) = (J(t) (x - X0(t)), c(X0(t), t, xi0)),
    Xi(xi) = B0 (xi - xi0),
    V(xi, v) = (v - v0) - A0 (xi - xi0),

with X0 the anchor curve, J(t) = grad_x grad_xi phi along it (the inverse of
grad_v X), and A0, B0 the (A, B, c) data at (v0, xi0).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import linregress

from .curve_tracer import _grad_and_jac, solve_x_many, trace_curves
from .phase_core import ABCData, PhaseSpec, check_abc

MIN_DET_B = 1e-6
ABC_TOL = 1e-6
EXACT_SENTINEL = 1e-13
H_JET = 1e-5


class InvalidAnchorError(ValueError):
    pass


class InconsistentDataError(ValueError):
    pass


class ExtractionError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class StraighteningMap:
    """Batched evaluators for (F, Xi, V).

    ``F(x, t)`` takes x of shape (B, n-1) and t of shape (B,) and returns
    ``(y, s)``; ``Xi(xi, v)`` and ``V(xi, v)`` take (B, n-1) arrays.
    """

    xi0: np.ndarray
    v0: np.ndarray
    F: Callable
    Xi: Callable
    V: Callable
    c_tilde: Callable | None = None
    A0: np.ndarray | None = None
    B0: np.ndarray | None = None
    t_range: tuple = (0.0, 1.0)
    name: str = ""

    def line_point(self, xi, v, s) -> np.ndarray:
        """The point of line_{Xi(xi, v), V(xi, v)} at height s."""
        return self.V(xi, v) - np.asarray(s)[:, None] * self.Xi(xi, v)


def default_t_grid(phase: PhaseSpec, count: int = 41) -> np.ndarray:
    M0 = phase.domain_M.shrunk(0.9)
    return np.linspace(M0.lo[-1], M0.hi[-1], count)


def build_straightening(
    phase: PhaseSpec,
    abc: ABCData,
    xi0,
    v0,
    t_grid=None,
    strict: bool = True,
) -> StraighteningMap:
    """Construct (F, Xi, V) anchored at the curve (xi0, v0).

    With ``strict`` the (A, B, c) identity is required along the anchor
    curve; ``strict=False`` lets deliberately wrong data through, which is
    how first-order failure is demonstrated.
    """
    xi0 = np.asarray(xi0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    k = phase.n - 1
    grid = default_t_grid(phase, 200) if t_grid is None else np.asarray(t_grid, dtype=float)
    X0 = trace_curves(phase, [xi0], [v0], grid)[0][0]

    if strict:
        for i in np.linspace(0, grid.size - 1, 11).astype(int):
            res = check_abc(phase, abc, X0[i], grid[i], xi0).residual
            if res > ABC_TOL:
                raise InconsistentDataError(f"(A, B, c) residual {res:.3g} at t = {grid[i]:.4g} on the anchor curve")

    c_grid = np.array([abc.c(X0[i], grid[i], xi0) for i in range(grid.size)], dtype=float)
    dc = np.diff(c_grid)
    if not (np.all(dc > 0) or np.all(dc < 0)):
        raise InvalidAnchorError("c along the anchor curve is not strictly monotone in t")

    A0 = np.asarray(abc.A(v0, xi0), dtype=float)
    B0 = np.asarray(abc.B(v0, xi0), dtype=float)
    if abs(np.linalg.det(B0)) < MIN_DET_B:
        raise InvalidAnchorError(f"|det B(v0, xi0)| = {abs(np.linalg.det(B0)):.3g} below {MIN_DET_B}")

    def anchor(ts):
        """X0, J and c along the anchor curve at the given heights."""
        ts = np.asarray(ts, dtype=float)
        guess = np.stack([np.interp(ts, grid, X0[:, j]) for j in range(k)], axis=-1)
        B = ts.size
        X, _ = solve_x_many(phase, np.tile(xi0, (B, 1)), np.tile(v0, (B, 1)), ts, guess)
        _, J = _grad_and_jac(phase, X, ts, np.tile(xi0, (B, 1)))
        c = np.array([abc.c(X[i], ts[i], xi0) for i in range(B)], dtype=float)
        return X, J, c

    def F(x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        ts, inv = np.unique(t, return_inverse=True)
        X, J, c = anchor(ts)
        y = np.einsum("bjk,bk->bj", J[inv], x - X[inv])
        return y, c[inv]

    def c_tilde(t):
        return anchor(np.atleast_1d(t))[2]

    def Xi(xi, v=None):
        return (np.atleast_2d(xi) - xi0) @ B0.T

    def V(xi, v):
        return (np.atleast_2d(v) - v0) - (np.atleast_2d(xi) - xi0) @ A0.T

    return StraighteningMap(xi0, v0, F, Xi, V, c_tilde, A0, B0, (grid[0], grid[-1]), f"{phase.name}/{abc.name}")


def worst_explicit_map() -> StraighteningMap:
    """F = (x1, x2 - t x1, t) sends every worst-case curve exactly onto
    line_{(xi2, xi1 + v1), v}; the direction map depends on v."""

    def F(x, t):
        x = np.atleast_2d(x)
        t = np.atleast_1d(t)
        return np.column_stack([x[:, 0], x[:, 1] - t * x[:, 0]]), t.astype(float)

    def Xi(xi, v):
        xi, v = np.atleast_2d(xi), np.atleast_2d(v)
        return np.column_stack([xi[:, 1], xi[:, 0] + v[:, 0]])

    def V(xi, v):
        return np.atleast_2d(np.asarray(v, dtype=float)).copy()

    z = np.zeros(2)
    return StraighteningMap(z, z, F, Xi, V, lambda t: np.atleast_1d(t), None, None, (-0.45, 0.45), "worst/explicit")


def straightening_errors(smap: StraighteningMap, phase: PhaseSpec, xis, vs, t_grid) -> np.ndarray:
    """Max over t of the slice distance to the target line, one value per curve."""
    xis = np.atleast_2d(np.asarray(xis, dtype=float))
    vs = np.atleast_2d(np.asarray(vs, dtype=float))
    t_grid = np.asarray(t_grid, dtype=float)
    pts, _ = trace_curves(phase, xis, vs, t_grid)
    B, T, k = pts.shape
    y, s = smap.F(pts.reshape(B * T, k), np.tile(t_grid, B))
    xi_rep = np.repeat(xis, T, axis=0)
    v_rep = np.repeat(vs, T, axis=0)
    d = np.linalg.norm(y - smap.line_point(xi_rep, v_rep, s), axis=1)
    return d.reshape(B, T).max(axis=1)


def straightening_error(smap: StraighteningMap, phase: PhaseSpec, xi, v, t_grid) -> float:
    return float(straightening_errors(smap, phase, [xi], [v], t_grid)[0])


@dataclass
class FitReport:
    anchor: dict
    radii: list
    max_errors: list
    slope: float | None
    intercept: float | None
    r2: float | None
    exact: bool

    def to_json(self, **extra) -> str:
        return json.dumps({**asdict(self), **extra}, indent=2, sort_keys=True)


def unit_directions(dim: int, count: int, seed: int) -> np.ndarray:
    g = np.random.default_rng(seed).standard_normal((count, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def fit_error_order(
    phase: PhaseSpec,
    abc: ABCData | None,
    xi0,
    v0,
    radii=None,
    samples_per_radius: int = 8,
    seed: int = 0,
    t_grid=None,
    smap: StraighteningMap | None = None,
    strict: bool = True,
) -> FitReport:
    """Regress log(max straightening error) on log(r) over parameter spheres |(xi, v) - (xi0, v0)| = r."""
    xi0 = np.asarray(xi0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    k = xi0.size
    radii = [2.0**-j for j in range(3, 9)] if radii is None else [float(r) for r in radii]
    t_grid = default_t_grid(phase) if t_grid is None else np.asarray(t_grid, dtype=float)
    if smap is None:
        smap = build_straightening(phase, abc, xi0, v0, strict=strict)
    dirs = unit_directions(2 * k, samples_per_radius, seed)
    errs = []
    for r in radii:
        p = np.concatenate([xi0, v0]) + r * dirs
        errs.append(float(straightening_errors(smap, phase, p[:, :k], p[:, k:], t_grid).max()))
    anchor = {"xi0": xi0.tolist(), "v0": v0.tolist()}
    if max(errs) < EXACT_SENTINEL:
        return FitReport(anchor, radii, errs, None, None, None, True)
    fit = linregress(np.log(radii), np.log(np.maximum(errs, 1e-300)))
    return FitReport(anchor, radii, errs, float(fit.slope), float(fit.intercept), float(fit.rvalue**2), False)


# reverse direction -------------------------------------------------------------


@dataclass(frozen=True)
class MapJets:
    """First-order jets of Xi and V at the anchor, and the height function of F along the anchor curve."""

    dXi_dxi: np.ndarray
    dV_dxi: np.ndarray
    dV_dv: np.ndarray
    t: np.ndarray
    h: np.ndarray
    X0: np.ndarray


@dataclass(frozen=True)
class ExtractedABC:
    A: np.ndarray
    B: np.ndarray
    t: np.ndarray
    c: np.ndarray


def map_jets(smap: StraighteningMap, phase: PhaseSpec, t_grid=None, h: float = H_JET) -> MapJets:
    xi0, v0 = smap.xi0, smap.v0
    k = xi0.size
    eye = np.eye(k)
    dXi = np.empty((k, k))
    dVx = np.empty((k, k))
    dVv = np.empty((k, k))
    for j in range(k):
        xp, xm = xi0 + h * eye[j], xi0 - h * eye[j]
        vp, vm = v0 + h * eye[j], v0 - h * eye[j]
        dXi[:, j] = (smap.Xi(xp, v0)[0] - smap.Xi(xm, v0)[0]) / (2 * h)
        dVx[:, j] = (smap.V(xp, v0)[0] - smap.V(xm, v0)[0]) / (2 * h)
        dVv[:, j] = (smap.V(xi0, vp)[0] - smap.V(xi0, vm)[0]) / (2 * h)
    t = default_t_grid(phase, 21) if t_grid is None else np.asarray(t_grid, dtype=float)
    X0 = trace_curves(phase, [xi0], [v0], t)[0][0]
    _, s = smap.F(X0, t)
    return MapJets(dXi, dVx, dVv, t, s, X0)


def extract_abc_from_map(jets: MapJets) -> ExtractedABC:
    """A = -(grad_v V)^{-1} grad_xi V and B = (grad_v V)^{-1} grad_xi Xi at the anchor; c = height of F.

    The sign of B matches Xi(xi) = B (xi - xi0).
    """
    if abs(np.linalg.det(jets.dV_dv)) < 1e-12:
        raise ExtractionError("grad_v V is singular at the anchor")
    A = -np.linalg.solve(jets.dV_dv, jets.dV_dxi)
    B = np.linalg.solve(jets.dV_dv, jets.dXi_dxi)
    return ExtractedABC(A, B, jets.t.copy(), np.asarray(jets.h, dtype=float).copy())


def compare_abc(ext: ExtractedABC, abc: ABCData, jets: MapJets, xi0, v0) -> dict:
    """Frobenius distances between extracted and supplied (A, B) and the max c discrepancy."""
    A = np.asarray(abc.A(np.asarray(v0), np.asarray(xi0)), dtype=float)
    B = np.asarray(abc.B(np.asarray(v0), np.asarray(xi0)), dtype=float)
    c = np.array([abc.c(x, t, np.asarray(xi0)) for x, t in zip(jets.X0, jets.t)], dtype=float)
    return {
        "A_err": float(np.linalg.norm(ext.A - A)),
        "B_err": float(np.linalg.norm(ext.B - B)),
        "c_err": float(np.max(np.abs(ext.c - c))),
    }


def scaled_map(smap: StraighteningMap, xi_factor: float = 1.0, v_factor: float = 1.0) -> StraighteningMap:
    """The same map with Xi and V multiplied by constants (used to probe the extraction formula)."""
    return StraighteningMap(
        smap.xi0,
        smap.v0,
        smap.F,
        lambda xi, v=None: xi_factor * smap.Xi(xi, v),
        lambda xi, v: v_factor * smap.V(xi, v),
        smap.c_tilde,
        smap.A0,
        smap.B0,
        smap.t_range,
        smap.name + "/scaled",
    )


def map_jacobian(smap: StraighteningMap, point, h: float = H_JET) -> np.ndarray:
    """Central-difference Jacobian of F at one point (x, t)."""
    point = np.asarray(point, dtype=float)
    n = point.size
    out = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        cols = []
        for q in (point + e, point - e):
            y, s = smap.F(q[None, :-1], q[-1:])
            cols.append(np.r_[y[0], s[0]])
        out[:, j] = (cols[0] - cols[1]) / (2 * h)
    return out


def generic_anchor(phase: PhaseSpec, a: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """An anchor away from the domain origin: xi0 = a 1, x0 = origin + a/2 1, v0 = grad_xi phi there.

    The built-in phases are even under (x, xi) -> (-x, -xi) about their
    origin, which cancels the quadratic error term for an anchor there; the
    error at the origin is cubic.
    """
    from .curve_tracer import v_of

    x0, t0, _ = phase.origin
    k = phase.n - 1
    xi0 = phase.domain_xi.origin + a * np.ones(k)
    xs = x0 + 0.5 * a * np.ones(k)
    return xi0, v_of(phase, xs, t0, xi0)
