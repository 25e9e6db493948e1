"""Phase functions, exact jets, and pointwise condition checks.

Coordinates follow the convention ``bold x = (x, t)`` with ``x`` in R^{n-1},
and ``xi`` in R^{n-1}.  Internally the 2n-1 expansion variables are ordered
``(x_1, ..., x_{n-1}, t, xi_1, ..., xi_{n-1})``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import product
from math import factorial
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from . import taylor as tj
from .taylor import Taylor

H_FD = 1e-5
DEGENERATE_G = 1e-12
SINGULAR_H2 = 1e-12
# M2 below this fraction of |M1| is indistinguishable from 0 * M1 in double precision
RELATIVE_FLOOR = 1e-6
MIN_JACOBIAN = 1e-6


class DomainError(ValueError):
    pass


class UnsupportedOrderError(ValueError):
    pass


class DegeneratePhaseError(ArithmeticError):
    """The Gauss map vanishes, i.e. the rank condition fails at the point."""


class SingularH2Error(ArithmeticError):
    pass


class NotADiffeomorphismError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box with a distinguished origin point."""

    lo: tuple
    hi: tuple
    origin: tuple

    def __post_init__(self):
        for name in ("lo", "hi", "origin"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.array(self.lo) + np.array(self.hi))

    @property
    def widths(self) -> np.ndarray:
        return np.array(self.hi) - np.array(self.lo)

    def contains(self, p, tol: float = 1e-12) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= np.array(self.lo) - tol) and np.all(p <= np.array(self.hi) + tol))

    def shrunk(self, factor: float = 0.9) -> "Box":
        c, half = self.center, 0.5 * factor * self.widths
        return Box(tuple(c - half), tuple(c + half), self.origin)


@dataclass(frozen=True, eq=False)
class PhaseSpec:
    """A phase function on M x Sigma plus its domain boxes.

    ``evaluator(x, t, xi)`` receives ``x`` and ``xi`` as sequences of
    scalars.  Built-in evaluators are written with :mod:`cklab.taylor`
    functions, so they accept floats, numpy arrays and Taylor expansions.
    ``exact=False`` marks an evaluator that only accepts floats; its jets
    are then taken by central finite differences.
    """

    n: int
    domain_M: Box
    domain_xi: Box
    evaluator: Callable
    tag: str = "user"
    name: str = ""
    exact: bool = True
    h_fd: float = H_FD

    def __post_init__(self):
        if self.domain_M.dim != self.n or self.domain_xi.dim != self.n - 1:
            raise ValueError("domain boxes do not match the dimension n")

    def __call__(self, x, t, xi):
        return self.evaluator(list(x), t, list(xi))

    @property
    def origin(self):
        o = np.array(self.domain_M.origin)
        return o[:-1], float(o[-1]), np.array(self.domain_xi.origin)

    @property
    def t_range(self) -> tuple[float, float]:
        return self.domain_M.lo[-1], self.domain_M.hi[-1]

    def with_domain(self, domain_M: Box | None = None, domain_xi: Box | None = None) -> "PhaseSpec":
        return PhaseSpec(
            self.n,
            domain_M or self.domain_M,
            domain_xi or self.domain_xi,
            self.evaluator,
            self.tag,
            self.name,
            self.exact,
            self.h_fd,
        )


@dataclass(frozen=True)
class Jet:
    """All mixed partials of a phase up to ``order`` at ``center``.

    Keys of ``partials`` are sorted tuples of variable indices in the order
    ``(x_1..x_{n-1}, t, xi_1..xi_{n-1})``; ``()`` is the value itself.
    """

    center: tuple
    order: int
    partials: dict
    n: int

    def __getitem__(self, idx) -> float:
        return self.partials[tuple(sorted(idx))]

    def xi_index(self, j: int) -> int:
        return self.n + j

    def grad_xi(self) -> np.ndarray:
        return np.array([self[(self.n + j,)] for j in range(self.n - 1)])

    def hess_xi(self) -> np.ndarray:
        k = self.n - 1
        return np.array([[self[(self.n + i, self.n + j)] for j in range(k)] for i in range(k)])

    def mixed(self) -> np.ndarray:
        """The n x (n-1) matrix of d_{x_i} d_{xi_j} phi."""
        return np.array([[self[(i, self.n + j)] for j in range(self.n - 1)] for i in range(self.n)])


# expansion -----------------------------------------------------------------


def _point(phase: PhaseSpec, x, t, xi) -> np.ndarray:
    return np.concatenate([np.atleast_1d(np.asarray(x, dtype=float)), [float(t)], np.atleast_1d(np.asarray(xi, dtype=float))])


def check_domain(phase: PhaseSpec, x, t, xi) -> None:
    xt = np.concatenate([np.asarray(x, dtype=float), [float(t)]])
    if not phase.domain_M.contains(xt):
        raise DomainError(f"(x, t) = {xt} outside the domain of {phase.name or phase.tag}")
    if not phase.domain_xi.contains(xi):
        raise DomainError(f"xi = {np.asarray(xi)} outside the domain of {phase.name or phase.tag}")


def _call_split(phase: PhaseSpec, z: Sequence):
    n = phase.n
    return phase.evaluator(list(z[: n - 1]), z[n - 1], list(z[n:]))


_STENCILS = {
    0: ((0, 1.0),),
    1: ((1, 0.5), (-1, -0.5)),
    2: ((1, 1.0), (0, -2.0), (-1, 1.0)),
    3: ((2, 0.5), (1, -1.0), (-1, 1.0), (-2, -0.5)),
    4: ((2, 1.0), (1, -4.0), (0, 6.0), (-1, -4.0), (-2, 1.0)),
}


def fd_step(order: int, h_fd: float = H_FD) -> float:
    """Step used for finite-difference partials of a given total order."""
    return max(h_fd, np.finfo(float).eps ** (1.0 / (order + 2)))


def _fd_expansion(phase: PhaseSpec, point: np.ndarray, order: int) -> Taylor:
    m = point.size
    tab = tj.tables(m, order)
    c = np.zeros(tab.size)
    for i, alpha in enumerate(tab.monos):
        k = sum(alpha)
        h = fd_step(k, phase.h_fd)
        axes = [v for v in range(m) if alpha[v]]
        acc = 0.0
        for combo in product(*[_STENCILS[alpha[v]] for v in axes]):
            z = point.copy()
            w = 1.0
            for v, (off, wt) in zip(axes, combo):
                z[v] += off * h
                w *= wt
            acc += w * float(_call_split(phase, z))
        c[i] = acc / h**k / tab.factorial[i]
    return Taylor(c, order, tab)


def expand(phase: PhaseSpec, x, t, xi, order: int, check: bool = True) -> Taylor:
    """Taylor expansion of the phase about (x, t, xi) in all 2n-1 variables."""
    if order > tj.MAX_ORDER:
        raise UnsupportedOrderError(f"jets are supported up to order {tj.MAX_ORDER}, got {order}")
    if check:
        check_domain(phase, x, t, xi)
    point = _point(phase, x, t, xi)
    if not phase.exact:
        return _fd_expansion(phase, point, order)
    out = _call_split(phase, tj.variables(point, order))
    if not isinstance(out, Taylor):
        out = tj.constant_like(tj.variables(point, order)[0], out)
    return out


def expand_points(phase: PhaseSpec, pts: np.ndarray, order: int) -> Taylor:
    """Expansions at many points at once; ``pts`` has rows ``(x, t, xi)``.

    Coefficients carry a trailing batch axis.  No domain check is made.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    if order > tj.MAX_ORDER:
        raise UnsupportedOrderError(f"jets are supported up to order {tj.MAX_ORDER}, got {order}")
    if not phase.exact:
        parts = [_fd_expansion(phase, p, order) for p in pts]
        return Taylor(np.stack([q.c for q in parts], axis=-1), order, parts[0].tab)
    seeds = tj.variables(pts.T, order)
    out = _call_split(phase, seeds)
    if not isinstance(out, Taylor):
        out = tj.constant_like(seeds[0], out)
    return out


def eval_jet(phase: PhaseSpec, x, t, xi, order: int) -> Jet:
    P = expand(phase, x, t, xi, order)
    partials = {}
    for alpha in P.tab.monos:
        key = tuple(v for v in range(len(alpha)) for _ in range(alpha[v]))
        partials[key] = float(P.partial(alpha))
    center = (tuple(np.asarray(x, dtype=float)), float(t), tuple(np.asarray(xi, dtype=float)))
    return Jet(center, order, partials, phase.n)


# linear algebra on expansions ---------------------------------------------


def _det(rows):
    k = len(rows)
    if k == 1:
        return rows[0][0]
    if k == 2:
        return rows[0][0] * rows[1][1] - rows[0][1] * rows[1][0]
    total = 0.0
    for j in range(k):
        minor = [r[:j] + r[j + 1 :] for r in rows[1:]]
        term = rows[0][j] * _det(minor)
        total = total + term if j % 2 == 0 else total - term
    return total


def wedge(columns_matrix):
    """Generalized cross product of the n-1 columns of an n x (n-1) matrix.

    Entry i is the signed cofactor (-1)**(n-1+i) det(M without row i), so the
    result is orthogonal to every column and its last entry is the
    determinant of the top (n-1) x (n-1) block.
    """
    n = len(columns_matrix)
    rows = [list(r) for r in columns_matrix]
    out = []
    for i in range(n):
        minor = rows[:i] + rows[i + 1 :]
        d = _det(minor) if n > 1 else 1.0
        out.append(d if (n - 1 + i) % 2 == 0 else -d)
    return out


class _Expansion:
    """Derived quantities (Hessian in xi, mixed block, Gauss map) of one expansion."""

    def __init__(self, P: Taylor, n: int):
        self.P = P
        self.n = n
        k = n - 1
        self.dxi = [P.diff(n + j) for j in range(k)]
        self.mixed = [[self.dxi[j].diff(i) for j in range(k)] for i in range(n)]
        self.hess = [[self.dxi[i].diff(n + j) for j in range(k)] for i in range(k)]
        self.G = wedge(self.mixed)

    def along_G(self, f: Taylor) -> Taylor:
        out = self.G[0] * f.diff(0)
        for i in range(1, self.n):
            out = out + self.G[i] * f.diff(i)
        return out

    def along_G_matrix(self, M):
        return [[self.along_G(e) for e in row] for row in M]


def _values(M) -> np.ndarray:
    return np.array([[float(tj.value(e)) for e in row] for row in M])


def _expansion(phase, x, t, xi, order) -> _Expansion:
    return _Expansion(expand(phase, x, t, xi, order), phase.n)


def gauss_map(phase: PhaseSpec, x, t, xi) -> np.ndarray:
    E = _expansion(phase, x, t, xi, 2)
    G = np.array([float(tj.value(g)) for g in E.G])
    if np.linalg.norm(G) < DEGENERATE_G:
        raise DegeneratePhaseError(f"Gauss map vanishes at {(x, t, xi)}")
    return G


def check_h1(phase: PhaseSpec, x, t, xi) -> float:
    """Smallest singular value of the n x (n-1) mixed Hessian."""
    E = _expansion(phase, x, t, xi, 2)
    return float(np.linalg.svd(_values(E.mixed), compute_uv=False).min())


def h2_matrix(phase: PhaseSpec, x, t, xi) -> np.ndarray:
    E = _expansion(phase, x, t, xi, 3)
    return _values(E.along_G_matrix(E.hess))


def check_h2(phase: PhaseSpec, x, t, xi) -> tuple[float, bool]:
    M1 = h2_matrix(phase, x, t, xi)
    return _h2_summary(M1)


def _h2_summary(M1):
    eig = np.linalg.eigvalsh(0.5 * (M1 + M1.T))
    return float(np.linalg.det(M1)), bool(np.all(eig > 0))


def proportionality(M1: np.ndarray, M2: np.ndarray) -> tuple[float, float]:
    """Least-squares ``lambda`` with ``M2 ~ lambda M1`` and the relative residual.

    The residual is taken relative to |M2|, floored at ``RELATIVE_FLOOR * |M1|``
    so that an M2 which vanishes up to roundoff counts as proportional.
    """
    n1 = np.sum(M1 * M1)
    if np.sqrt(n1) < SINGULAR_H2:
        raise SingularH2Error("first directional derivative of the xi-Hessian vanishes")
    lam = float(np.sum(M1 * M2) / n1)
    floor = max(1e-14, RELATIVE_FLOOR * np.sqrt(n1))
    res = np.linalg.norm(M2 - lam * M1) / max(np.linalg.norm(M2), floor)
    return lam, float(res)


@dataclass(frozen=True)
class ConditionReport:
    point: tuple
    h1_sigma_min: float
    h2_det: float
    h2_posdef: bool
    bourgain_lambda_hat: float
    bourgain_residual: float
    tol: float = 1e-6

    @property
    def holds(self) -> bool:
        return self.bourgain_residual <= self.tol

    def row(self) -> list:
        x, t, xi = self.point
        return [*x, t, *xi, self.h1_sigma_min, self.h2_det, int(self.h2_posdef), self.bourgain_lambda_hat, self.bourgain_residual]


def bourgain_matrices(phase: PhaseSpec, x, t, xi):
    """Return (M1, M2): one and two applications of G . grad_x to the xi-Hessian."""
    E = _expansion(phase, x, t, xi, 4)
    L1 = E.along_G_matrix(E.hess)
    L2 = E.along_G_matrix(L1)
    return _values(L1), _values(L2), E


def check_bourgain(phase: PhaseSpec, x, t, xi, tol: float = 1e-6) -> ConditionReport:
    M1, M2, E = bourgain_matrices(phase, x, t, xi)
    lam, res = proportionality(M1, M2)
    sigma = float(np.linalg.svd(_values(E.mixed), compute_uv=False).min())
    det, posdef = _h2_summary(M1)
    point = (tuple(float(v) for v in x), float(t), tuple(float(v) for v in xi))
    return ConditionReport(point, sigma, det, posdef, lam, res, tol)


def g_kills_grad_xi(phase: PhaseSpec, x, t, xi) -> float:
    """Norm of (G . grad_x) grad_xi phi, which vanishes identically."""
    E = _expansion(phase, x, t, xi, 2)
    return float(np.linalg.norm([float(tj.value(E.along_G(d))) for d in E.dxi]))


# (A, B, c) data -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ABCData:
    """Evaluators for the decomposition Hess_xi phi = A(v, xi) + c(x, t, xi) B(v, xi)."""

    A: Callable
    B: Callable
    c: Callable
    name: str = ""


@dataclass(frozen=True)
class ABCCheck:
    residual: float
    b_det: float
    g_dc: float


def check_abc(phase: PhaseSpec, abc: ABCData, x, t, xi, h: float = H_FD) -> ABCCheck:
    E = _expansion(phase, x, t, xi, 2)
    H = _values(E.hess)
    v = np.array([float(tj.value(d)) for d in E.dxi])
    xi = np.asarray(xi, dtype=float)
    A = np.asarray(abc.A(v, xi), dtype=float)
    B = np.asarray(abc.B(v, xi), dtype=float)
    c = float(abc.c(np.asarray(x, dtype=float), float(t), xi))
    res = np.linalg.norm(H - A - c * B) / (1.0 + np.linalg.norm(H))

    G = np.array([float(tj.value(g)) for g in E.G])
    g = G / np.linalg.norm(G)
    base = np.concatenate([np.asarray(x, dtype=float), [float(t)]])
    n = phase.n
    plus, minus = base + h * g, base - h * g
    dc = (abc.c(plus[: n - 1], plus[n - 1], xi) - abc.c(minus[: n - 1], minus[n - 1], xi)) / (2 * h)
    return ABCCheck(float(res), float(np.linalg.det(B)), float(dc * np.linalg.norm(G)))


# diffeomorphisms ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Diffeo:
    """A smooth map R^dim -> R^dim written against :mod:`cklab.taylor` functions."""

    fn: Callable
    dim: int
    name: str = ""

    def __call__(self, z):
        return self.fn(list(z))

    def jacobian(self, z) -> np.ndarray:
        seeds = tj.variables(np.asarray(z, dtype=float), 1)
        out = self.fn(seeds)
        J = np.zeros((self.dim, self.dim))
        for i, y in enumerate(out):
            for j in range(self.dim):
                e = [0] * self.dim
                e[j] = 1
                J[i, j] = y.partial(e) if isinstance(y, Taylor) else 0.0
        return J


def identity_diffeo(dim: int) -> Diffeo:
    return Diffeo(lambda z: list(z), dim, "identity")


def near_identity_diffeo(center, scale: float = 1e-2, seed: int = 0) -> Diffeo:
    """Identity plus a random polynomial of degree 2 in (z - center).

    Coefficients are uniform in [-scale, scale]; ``center`` is fixed.
    """
    center = np.asarray(center, dtype=float)
    dim = center.size
    rng = np.random.default_rng(seed)
    lin = rng.uniform(-scale, scale, (dim, dim))
    quad = rng.uniform(-scale, scale, (dim, dim, dim))
    pairs = [(j, k) for j in range(dim) for k in range(j, dim)]

    def fn(z):
        w = [z[i] - center[i] for i in range(dim)]
        out = []
        for i in range(dim):
            y = z[i]
            for j in range(dim):
                y = y + lin[i, j] * w[j]
            for j, k in pairs:
                y = y + quad[i, j, k] * (w[j] * w[k])
            out.append(y)
        return out

    return Diffeo(fn, dim, f"near-identity(seed={seed}, scale={scale:g})")


def transform_phase(phase: PhaseSpec, diffeo_x: Diffeo, diffeo_xi: Diffeo, samples: int = 16) -> PhaseSpec:
    """The phase (x, xi) -> phi(diffeo_x(x), diffeo_xi(xi)).

    Jets of the result follow from the chain rule through the truncated
    Taylor arithmetic.  The domain boxes of ``phase`` are kept.
    """
    n = phase.n
    if diffeo_x.dim != n or diffeo_xi.dim != n - 1:
        raise ValueError("diffeomorphism dimensions do not match the phase")
    for x, t, xi in sample_domain(phase, samples, seed=0):
        for D, z in ((diffeo_x, np.concatenate([x, [t]])), (diffeo_xi, xi)):
            if abs(np.linalg.det(D.jacobian(z))) < MIN_JACOBIAN:
                raise NotADiffeomorphismError(f"{D.name}: Jacobian determinant below {MIN_JACOBIAN} at {z}")

    def evaluator(x, t, xi):
        y = diffeo_x(list(x) + [t])
        return phase.evaluator(y[: n - 1], y[n - 1], diffeo_xi(xi))

    name = f"{phase.name or phase.tag}∘({diffeo_x.name}, {diffeo_xi.name})"
    return PhaseSpec(n, phase.domain_M, phase.domain_xi, evaluator, "transformed", name, phase.exact, phase.h_fd)


# sampling -------------------------------------------------------------------


def sample_array(phase: PhaseSpec, count: int, seed: int = 0, shrink: float = 0.9) -> np.ndarray:
    """Rows ``(x, t, xi)`` of deterministic scrambled-Halton samples in the shrunk boxes.

    The first row is always the domain origin.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    n = phase.n
    M0, S0 = phase.domain_M.shrunk(shrink), phase.domain_xi.shrunk(shrink)
    lo = np.concatenate([M0.lo, S0.lo])
    hi = np.concatenate([M0.hi, S0.hi])
    origin = np.concatenate([phase.domain_M.origin, phase.domain_xi.origin])
    out = np.empty((count, 2 * n - 1))
    out[0] = origin
    if count > 1:
        u = qmc.Halton(d=2 * n - 1, scramble=True, seed=seed).random(count - 1)
        out[1:] = lo + u * (hi - lo)
    return out


def sample_domain(phase: PhaseSpec, count: int, seed: int = 0, shrink: float = 0.9):
    """Deterministic low-discrepancy points ``(x, t, xi)`` inside the shrunk domain boxes."""
    n = phase.n
    return [(p[: n - 1].copy(), float(p[n - 1]), p[n:].copy()) for p in sample_array(phase, count, seed, shrink)]


def write_reports_csv(reports: Sequence[ConditionReport], fh, n: int) -> None:
    w = csv.writer(fh, lineterminator="\n")
    header = [f"x{i + 1}" for i in range(n - 1)] + ["t"] + [f"xi{i + 1}" for i in range(n - 1)]
    header += ["sigma_min", "h2_det", "h2_posdef", "lambda_hat", "residual"]
    w.writerow(header)
    for r in reports:
        w.writerow([repr(float(v)) for v in r.row()])
