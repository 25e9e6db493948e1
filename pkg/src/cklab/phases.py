"""Built-in phase functions, their (A, B, c) data, and the TOML phase loader."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from . import taylor as tj
from .phase_core import ABCData, Box, PhaseSpec, sample_domain

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

BUILTINS = ("rest", "bochner_riesz", "worst", "tan")
ALIASES = {"br": "bochner_riesz", "bochner-riesz": "bochner_riesz"}


def _dot(a, b):
    out = 0.0
    for p, q in zip(a, b):
        out = out + p * q
    return out


def _cube(n, half, center=None):
    center = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    half = np.broadcast_to(np.asarray(half, dtype=float), (n,))
    return center - half, center + half


def rest(n: int = 3) -> PhaseSpec:
    """x . xi + t |xi|^2 / 2 on |x|, |t|, |xi| <= 1/2."""
    if n < 2:
        raise ValueError("n must be at least 2")

    def ev(x, t, xi):
        return _dot(x, xi) + 0.5 * t * _dot(xi, xi)

    lo, hi = _cube(n, 0.5)
    slo, shi = _cube(n - 1, 0.5)
    return PhaseSpec(n, Box(lo, hi, np.zeros(n)), Box(slo, shi, np.zeros(n - 1)), ev, "rest", f"rest(n={n})")


def bochner_riesz(n: int = 3) -> PhaseSpec:
    """t^{-1} sqrt(1 + |x - t xi|^2) on t in [0.9, 1.1], |x|, |xi| <= 1/4."""
    _need3(n)

    def ev(x, t, xi):
        u = [a - t * b for a, b in zip(x, xi)]
        return tj.sqrt(1.0 + _dot(u, u)) / t

    center = np.r_[np.zeros(n - 1), 1.0]
    half = np.r_[np.full(n - 1, 0.25), 0.1]
    lo, hi = center - half, center + half
    slo, shi = _cube(n - 1, 0.25)
    return PhaseSpec(n, Box(lo, hi, center), Box(slo, shi, np.zeros(n - 1)), ev, "bochner_riesz", f"bochner_riesz(n={n})")


def worst(n: int = 3) -> PhaseSpec:
    """x1 xi1 + x2 xi2 + t xi1 xi2 + t^2 xi2^2 / 2, which fails the condition at t = 0."""
    if n != 3:
        raise ValueError("the worst-case phase is defined for n = 3 only")

    def ev(x, t, xi):
        return x[0] * xi[0] + x[1] * xi[1] + t * xi[0] * xi[1] + 0.5 * t * t * xi[1] * xi[1]

    lo, hi = _cube(3, 0.5)
    slo, shi = _cube(2, 0.5)
    return PhaseSpec(3, Box(lo, hi, np.zeros(3)), Box(slo, shi, np.zeros(2)), ev, "worst", "worst(n=3)")


def tan(n: int = 3) -> PhaseSpec:
    """x'.xi' + t^2 |xi'|^2 / 2 + log sec(t xi_{n-1} + x_{n-1}) near ((0, 1), 0)."""
    _need3(n)

    def ev(x, t, xi):
        t2 = t * t
        head = _dot(x[:-1], xi[:-1]) + 0.5 * t2 * _dot(xi[:-1], xi[:-1])
        return head + tj.log(tj.sec(t * xi[-1] + x[-1]))

    center = np.r_[np.zeros(n - 1), 1.0]
    half = np.r_[np.full(n - 1, 0.25), 0.1]
    lo, hi = center - half, center + half
    slo, shi = _cube(n - 1, 0.25)
    return PhaseSpec(n, Box(lo, hi, center), Box(slo, shi, np.zeros(n - 1)), ev, "tan", f"tan(n={n})")


def _need3(n):
    if n < 3 or n > 6:
        raise ValueError("n must be between 3 and 6")


def builtin(name: str, n: int = 3) -> PhaseSpec:
    name = ALIASES.get(name, name)
    factories = {"rest": rest, "bochner_riesz": bochner_riesz, "worst": worst, "tan": tan}
    if name not in factories:
        raise KeyError(f"unknown phase {name!r}; choose from {', '.join(BUILTINS)}")
    return factories[name](n)


# (A, B, c) triples -----------------------------------------------------------


def _zeros(v, xi):
    return np.zeros((len(v), len(v)))


def _eye(v, xi):
    return np.eye(len(v))


def abc_rest() -> ABCData:
    return ABCData(_zeros, _eye, lambda x, t, xi: t, "rest")


def abc_bochner_riesz() -> ABCData:
    def B(v, xi):
        v = np.asarray(v, dtype=float)
        return np.eye(v.size) - np.outer(v, v)

    def c(x, t, xi):
        u = np.asarray(x, dtype=float) - t * np.asarray(xi, dtype=float)
        return t / np.sqrt(1.0 + u @ u)

    return ABCData(_zeros, B, c, "bochner_riesz")


def abc_tan() -> ABCData:
    def A(v, xi):
        out = np.zeros((len(v), len(v)))
        out[-1, -1] = v[-1] ** 2
        return out

    return ABCData(A, _eye, lambda x, t, xi: t * t, "tan")


def abc_naive() -> ABCData:
    """A = 0, B = I, c = t: correct for ``rest``, wrong for phases failing the condition."""
    return ABCData(_zeros, _eye, lambda x, t, xi: t, "naive")


def canonical_abc(phase: PhaseSpec) -> ABCData:
    table = {"rest": abc_rest, "bochner_riesz": abc_bochner_riesz, "tan": abc_tan}
    if phase.tag not in table:
        raise KeyError(f"no closed-form (A, B, c) data for phase tag {phase.tag!r}")
    return table[phase.tag]()


# TOML user phases ------------------------------------------------------------


def _monomial(z, powers):
    out = 1.0
    for zi, p in zip(z, powers):
        if p:
            out = out * zi**p
    return out


def phase_from_table(table: dict) -> PhaseSpec:
    """Build a phase from a ``[phase]`` table.

    Keys: ``n``; optional ``base`` (a built-in name) whose evaluator and boxes
    are reused; ``terms``, a list of ``{coef, powers}`` with ``powers`` over
    ``(x_1..x_{n-1}, t, xi_1..xi_{n-1})``; optional ``M_lo``, ``M_hi``,
    ``M_origin``, ``xi_lo``, ``xi_hi``, ``xi_origin``; optional ``fd = true``
    to take jets by finite differences; optional ``validate = true`` to
    require the mixed x-block to be invertible at sampled points.
    """
    n = int(table["n"])
    base = builtin(table["base"], n) if "base" in table else None
    terms = []
    for term in table.get("terms", []):
        powers = [int(p) for p in term["powers"]]
        if len(powers) != 2 * n - 1 or min(powers, default=0) < 0:
            raise ValueError(f"term powers must be {2 * n - 1} nonnegative integers, got {powers}")
        terms.append((float(term["coef"]), powers))

    def ev(x, t, xi):
        z = list(x) + [t] + list(xi)
        out = base.evaluator(x, t, xi) if base is not None else 0.0
        for coef, powers in terms:
            out = out + coef * _monomial(z, powers)
        return out

    default = base or rest(n)
    M, S = default.domain_M, default.domain_xi
    domain_M = Box(table.get("M_lo", M.lo), table.get("M_hi", M.hi), table.get("M_origin", M.origin))
    domain_xi = Box(table.get("xi_lo", S.lo), table.get("xi_hi", S.hi), table.get("xi_origin", S.origin))
    phase = PhaseSpec(
        n, domain_M, domain_xi, ev, "user", table.get("name", "user"), exact=not table.get("fd", False)
    )
    if table.get("validate", False):
        validate_graph_over_t(phase)
    return phase


def load_phase_toml(path) -> PhaseSpec:
    with open(Path(path), "rb") as fh:
        data = tomllib.load(fh)
    if "phase" not in data:
        raise ValueError(f"{path}: missing [phase] table")
    return phase_from_table(data["phase"])


def validate_graph_over_t(phase: PhaseSpec, samples: int = 32, tol: float = 1e-6) -> None:
    """Check that the x-block of the mixed Hessian is invertible, so curves are graphs over t."""
    from .phase_core import eval_jet

    for x, t, xi in sample_domain(phase, samples, seed=0):
        J = eval_jet(phase, x, t, xi, 2).mixed()[:-1]
        if abs(np.linalg.det(J)) < tol:
            raise ValueError(f"{phase.name}: curves are not graphs over t near {(x, t, xi)}")
