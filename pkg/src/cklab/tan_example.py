"""The tan phase: ODE check, closed-form curves, the pencil through a curve and a point,
and the tangent-frame determinant that witnesses coniness.

After the change of variables (x', t^3 x_{n-1}, t^2) and a cubic truncation in
v_{n-1}, the curves become

    l(xi, v)(t) = (v' - t xi', t w - w^3/3 - t^2 xi_{n-1}, t),   w = v_{n-1}.

The pencil consists of the curves through l(0, 0)(s) = (0, s) and through the
point (p, t0).  Their tangents at (p, t0) are not contained in a plane.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import taylor as tj
from .phase_core import expand_points, sample_array
from .phases import tan as tan_phase

CLUSTER_TOL = 1e-12


class PoleError(ZeroDivisionError):
    pass


class AmbiguousRootError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class TanConfig:
    n: int
    t0: float
    p: np.ndarray
    eps0: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).copy())
        if self.n < 3 or self.p.size != self.n - 1:
            raise ValueError(f"p must have n - 1 = {self.n - 1} entries and n >= 3")
        if not (1.0 < self.t0 <= 1.1 + 1e-12):
            raise ValueError("t0 must satisfy 1 < t0 <= 1.1")
        if not (np.linalg.norm(self.p) <= self.eps0 <= 0.1):
            raise ValueError("need |p| <= eps0 <= 1/10")

    def to_dict(self) -> dict:
        return {"n": self.n, "t0": self.t0, "p": self.p.tolist(), "eps0": self.eps0}


@dataclass(frozen=True, eq=False)
class PencilSolution:
    s: float
    xi: np.ndarray
    vv: np.ndarray
    residuals: np.ndarray


# ODE ansatz and curves ------------------------------------------------------------


def verify_tan_ode(n: int = 3, sample_count: int = 100, seed: int = 0) -> float:
    """Max residual of d_{xi_j} f_j = t^2 (j < n-1) and d f_{n-1} = f_{n-1}^2 + t^2,
    with f = grad_xi phi from exact jets, plus the closed form f_{n-1} = t tan(t xi_{n-1} + x_{n-1})."""
    phase = tan_phase(n)
    pts = sample_array(phase, sample_count, seed)
    P = expand_points(phase, pts, 2)
    t = pts[:, n - 1]
    f = [P.diff(n + j) for j in range(n - 1)]
    res = [np.abs(f[j].diff(n + j).value - t * t) for j in range(n - 2)]
    last = f[-1].value
    res.append(np.abs(f[-1].diff(2 * n - 2).value - (last**2 + t * t)))
    res.append(np.abs(last - t * np.tan(t * pts[:, -1] + pts[:, n - 2])))
    return float(max(r.max() for r in res))


def tan_curve(n: int, xi, v, t) -> np.ndarray:
    """(v' - t^2 xi', arctan(v_{n-1} / t) - t xi_{n-1}, t)."""
    xi = np.asarray(xi, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.r_[v[:-1] - t * t * xi[:-1], np.arctan(v[-1] / t) - t * xi[-1], t]


def simplified_curve(n: int, xi, v, t) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    v = np.asarray(v, dtype=float)
    w = v[-1]
    return np.r_[v[:-1] - t * xi[:-1], t * w - w**3 / 3 - t * t * xi[-1], t]


def simplified_tangent(xi, v, t) -> np.ndarray:
    """d/dt of the simplified curve."""
    xi = np.asarray(xi, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.r_[-xi[:-1], v[-1] - 2 * t * xi[-1], 1.0]


def straighten_t(x) -> np.ndarray:
    """(x', t^3 x_{n-1}, t^2): the change of variables taking tan curves to the cubic model."""
    x = np.asarray(x, dtype=float)
    t = x[-1]
    return np.r_[x[:-2], t**3 * x[-2], t * t]


# the pencil -------------------------------------------------------------------------


def _cubic(t0, s):
    return (t0 * t0 / (s * s) - 1.0) / 3.0, t0 * (t0 / s - 1.0)


def pencil_params(cfg: TanConfig, s: float) -> PencilSolution:
    t0, p = cfg.t0, cfg.p
    if abs(t0 - s) < 1e-14:
        raise PoleError("the pencil is singular at s = t0")
    xi_head = -p[:-1] / (t0 - s)
    v_head = -s * p[:-1] / (t0 - s)
    a, b = _cubic(t0, s)
    q = p[-1]
    lead = -s * q / (t0 * (t0 - s))
    roots = np.roots([a, 0.0, -b, -q])
    for i in range(3):
        for j in range(i + 1, 3):
            if abs(roots[i] - roots[j]) < CLUSTER_TOL:
                raise AmbiguousRootError(f"cubic roots cluster at s = {s}")
    real = roots[np.abs(roots.imag) <= 1e-9 * max(1.0, np.abs(roots).max())].real
    if real.size == 0:
        raise AmbiguousRootError(f"no real root at s = {s}")
    w = float(real[np.argmin(np.abs(real - lead))])
    for _ in range(3):
        dw = (a * w**3 - b * w - q) / (3 * a * w * w - b)
        w -= dw
    xi_last = w / s - w**3 / (3 * s * s)
    xi = np.r_[xi_head, xi_last]
    vv = np.r_[v_head, w]
    return PencilSolution(float(s), xi, vv, pencil_residuals(cfg, s, xi, vv))


def pencil_residuals(cfg: TanConfig, s, xi, vv) -> np.ndarray:
    t0, p = cfg.t0, cfg.p
    w, z = vv[-1], xi[-1]
    return np.array(
        [
            np.linalg.norm(vv[:-1] - s * xi[:-1]),
            np.linalg.norm(vv[:-1] - t0 * xi[:-1] - p[:-1]),
            abs(s * w - w**3 / 3 - s * s * z),
            abs(t0 * w - w**3 / 3 - t0 * t0 * z - p[-1]),
        ]
    )


def line_pencil_params(cfg: TanConfig, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Parameters of the straight line (v - t xi, t) through (0, s) and (p, t0)."""
    if abs(cfg.t0 - s) < 1e-14:
        raise PoleError("the pencil is singular at s = t0")
    xi = -cfg.p / (cfg.t0 - s)
    return xi, s * xi


def default_h_s(cfg: TanConfig) -> float:
    return 0.02 * (cfg.t0 - 1.0)


_D1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_D2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0


def tangent_frame(cfg: TanConfig, s: float = 1.0, h_s: float | None = None, family: str = "simplified"):
    """(gamma, gamma', gamma''): tangents at (p, t0) of the pencil curves and their s-derivatives."""
    h = default_h_s(cfg) if h_s is None else h_s
    gam = []
    for k in (-2, -1, 0, 1, 2):
        sk = s + k * h
        if family == "simplified":
            sol = pencil_params(cfg, sk)
            gam.append(simplified_tangent(sol.xi, sol.vv, cfg.t0))
        elif family == "lines":
            xi, _ = line_pencil_params(cfg, sk)
            gam.append(np.r_[-xi, 1.0])
        else:
            raise ValueError(f"unknown family {family!r}")
    G = np.array(gam)
    # stencils on differences from the center keep constant components exactly zero
    dG = G - G[2]
    return G[2], _D1 @ dG / h, _D2 @ dG / (h * h)


def leading_det(cfg: TanConfig) -> float:
    p = cfg.p
    return 2 * abs(p[-1]) ** 3 * abs(p[-2]) / (3 * cfg.t0**2 * (cfg.t0 - 1) ** 6)


def coniness_det(cfg: TanConfig, h_s: float | None = None, family: str = "simplified"):
    """Determinant of the frame on the active coordinates (x_{n-2}, x_{n-1}, t),
    the leading-order prediction, and their relative error."""
    if np.any(cfg.p[:-2] != 0):
        raise ValueError("coniness_det needs p' = (0, ..., 0, p_{n-2})")
    frame = tangent_frame(cfg, 1.0, h_s, family)
    M = np.array([f[-3:] for f in frame])
    det = float(np.linalg.det(M))
    lead = leading_det(cfg)
    rel = abs(det - lead) / lead if lead > 0 else float("inf")
    return det, lead, rel


def config_grid(n: int = 3, count: int = 20, seed: int = 0) -> list[TanConfig]:
    """Seeded configurations cycling t0 in {1.02, 1.05, 1.08} and |p| in {1e-3, 10^-2.5, 1e-2}.

    p lies in the (x_{n-2}, x_{n-1}) plane at an angle in [pi/8, 3pi/8].
    """
    rng = np.random.default_rng(seed)
    combos = [(t0, r) for t0 in (1.02, 1.05, 1.08) for r in (1e-3, 10**-2.5, 1e-2)]
    out = []
    for i in range(count):
        t0, r = combos[i % len(combos)]
        th = rng.uniform(np.pi / 8, 3 * np.pi / 8)
        p = np.zeros(n - 1)
        p[-2:] = r * np.cos(th), r * np.sin(th)
        out.append(TanConfig(n, t0, p))
    return out


# illustration maps ---------------------------------------------------------------


def illustration_map(x, v0_last: float) -> np.ndarray:
    """Shift by arctan(v0/t), shear by (t^2 + v0^2)/t, then t -> t^2."""
    x = np.asarray(x, dtype=float)
    t = x[-1]
    y = np.r_[x[:-2], x[-2] - np.arctan(v0_last / t), t]
    y[-2] *= (t * t + v0_last**2) / t
    y[-1] = t * t
    return y


def illustration_line(xi, v, v0_last: float):
    """(Xi, V) for the illustration maps: Xi = xi, V = (v', v_{n-1} - v0 - v0^2 xi_{n-1})."""
    xi = np.asarray(xi, dtype=float)
    v = np.asarray(v, dtype=float)
    V = np.r_[v[:-1], v[-1] - v0_last - v0_last**2 * xi[-1]]
    return xi.copy(), V


def illustration_error(n: int, xi, v, v0_last: float, t_grid) -> float:
    Xi, V = illustration_line(xi, v, v0_last)
    err = 0.0
    for t in t_grid:
        y = illustration_map(tan_curve(n, xi, v, t), v0_last)
        s = y[-1]
        err = max(err, float(np.linalg.norm(y[:-1] - (V - s * Xi))))
    return err


def illustrate_straightening(n: int, xi0, v0, radii=None, samples: int = 8, seed: int = 0):
    """Fit the error order of the illustration maps around the anchor (xi0, v0).

    Returns (slope, radii, max_errors).
    """
    from scipy.stats import linregress

    from .straightener import unit_directions

    xi0 = np.asarray(xi0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    k = n - 1
    radii = [2.0**-j for j in range(3, 8)] if radii is None else list(radii)
    t_grid = np.linspace(0.91, 1.09, 41)
    dirs = unit_directions(2 * k, samples, seed)
    errs = []
    for r in radii:
        e = 0.0
        for d in dirs:
            q = np.r_[xi0, v0] + r * d
            e = max(e, illustration_error(n, q[:k], q[k:], v0[-1], t_grid))
        errs.append(e)
    fit = linregress(np.log(radii), np.log(errs))
    return float(fit.slope), radii, errs
