"""Truncated multivariate Taylor arithmetic (nested forward-mode differentiation).

A :class:`Taylor` holds the coefficients of a polynomial in ``m`` variables,
truncated at total degree ``K``, expanded about a base point.  Arithmetic and
the elementary functions in this module propagate the expansion exactly, so
the coefficient of the monomial ``h**alpha`` is ``D**alpha f / alpha!``.

Coefficients may carry a trailing batch axis, which lets one expression be
expanded at many base points at once.

Phase functions and diffeomorphisms are written against the functions below
(``tan``, ``log``, ...); these dispatch to numpy for plain floats/arrays and
to the series implementation for :class:`Taylor` arguments.
"""

from __future__ import annotations

from functools import lru_cache
from itertools import combinations_with_replacement
from math import factorial

import numpy as np
import scipy.sparse as sp

MAX_ORDER = 4


class _Tables:
    """Monomial enumeration and product/derivative index tables for (m, K)."""

    def __init__(self, m: int, K: int):
        self.m = m
        self.K = K
        monos = [(0,) * m]
        for d in range(1, K + 1):
            for combo in combinations_with_replacement(range(m), d):
                alpha = [0] * m
                for v in combo:
                    alpha[v] += 1
                monos.append(tuple(alpha))
        self.monos = monos
        self.index = {a: i for i, a in enumerate(monos)}
        self.size = len(monos)
        self.degree = np.array([sum(a) for a in monos])
        self.factorial = np.array(
            [np.prod([factorial(e) for e in a]) for a in monos], dtype=float
        )

        rows, ii, jj = [], [], []
        for i, a in enumerate(monos):
            da = self.degree[i]
            for j, b in enumerate(monos):
                if da + self.degree[j] > K:
                    continue
                k = self.index[tuple(x + y for x, y in zip(a, b))]
                rows.append(k)
                ii.append(i)
                jj.append(j)
        self.pi = np.array(ii)
        self.pj = np.array(jj)
        npairs = len(rows)
        self.scatter = sp.csr_matrix(
            (np.ones(npairs), (np.array(rows), np.arange(npairs))),
            shape=(self.size, npairs),
        )

        # d/dh_v maps coefficient of alpha to alpha - e_v with factor alpha_v
        self.diff_src = []
        self.diff_dst = []
        self.diff_fac = []
        for v in range(m):
            src, dst, fac = [], [], []
            for i, a in enumerate(monos):
                if a[v] == 0:
                    continue
                b = list(a)
                b[v] -= 1
                src.append(i)
                dst.append(self.index[tuple(b)])
                fac.append(float(a[v]))
            self.diff_src.append(np.array(src, dtype=int))
            self.diff_dst.append(np.array(dst, dtype=int))
            self.diff_fac.append(np.array(fac))


@lru_cache(maxsize=None)
def tables(m: int, K: int) -> _Tables:
    return _Tables(m, K)


class Taylor:
    """Truncated Taylor expansion; ``deg`` is the highest exact degree."""

    __slots__ = ("c", "deg", "tab")
    __array_ufunc__ = None

    def __init__(self, c: np.ndarray, deg: int, tab: _Tables):
        self.c = c
        self.deg = deg
        self.tab = tab

    # construction ---------------------------------------------------------

    def _const(self, value) -> "Taylor":
        c = np.zeros_like(self.c)
        c[0] = value
        return Taylor(c, self.tab.K, self.tab)

    def _lift(self, other) -> "Taylor":
        if isinstance(other, Taylor):
            return other
        return self._const(other)

    @property
    def value(self):
        return self.c[0]

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        o = self._lift(other)
        return Taylor(self.c + o.c, min(self.deg, o.deg), self.tab)

    __radd__ = __add__

    def __neg__(self):
        return Taylor(-self.c, self.deg, self.tab)

    def __pos__(self):
        return self

    def __sub__(self, other):
        o = self._lift(other)
        return Taylor(self.c - o.c, min(self.deg, o.deg), self.tab)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        if not isinstance(other, Taylor):
            return Taylor(self.c * other, self.deg, self.tab)
        tab = self.tab
        prod = self.c[tab.pi] * other.c[tab.pj]
        if prod.ndim == 1:
            c = tab.scatter @ prod
        else:
            c = (tab.scatter @ prod.reshape(prod.shape[0], -1)).reshape(
                (tab.size,) + prod.shape[1:]
            )
        return Taylor(c, min(self.deg, other.deg), tab)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Taylor):
            return Taylor(self.c / other, self.deg, self.tab)
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, p):
        if isinstance(p, (int, np.integer)) and p >= 0:
            out = self._const(1.0)
            base = self
            e = int(p)
            while e:
                if e & 1:
                    out = out * base
                e >>= 1
                if e:
                    base = base * base
            return Taylor(out.c, self.deg if p > 0 else self.tab.K, self.tab)
        return _compose(self, _series_pow(self.value, float(p), self.tab.K))

    def reciprocal(self):
        return _compose(self, _series_pow(self.value, -1.0, self.tab.K))

    # calculus -------------------------------------------------------------

    def diff(self, v: int) -> "Taylor":
        tab = self.tab
        c = np.zeros_like(self.c)
        src, dst, fac = tab.diff_src[v], tab.diff_dst[v], tab.diff_fac[v]
        c[dst] = self.c[src] * fac.reshape((-1,) + (1,) * (self.c.ndim - 1))
        deg = self.deg - 1
        if deg < 0:
            raise ValueError("derivative order exceeds the expansion order")
        c[tab.degree > deg] = 0.0
        return Taylor(c, deg, tab)

    def partial(self, alpha) -> np.ndarray:
        """Mixed partial derivative D**alpha at the base point."""
        i = self.tab.index[tuple(alpha)]
        return self.c[i] * self.tab.factorial[i]

    def __repr__(self):
        return f"Taylor(value={self.value!r}, m={self.tab.m}, K={self.tab.K}, deg={self.deg})"


def variables(point, K: int) -> list[Taylor]:
    """Seed expansion variables at ``point`` (shape (m,) or (m, *batch))."""
    point = np.asarray(point, dtype=float)
    m = point.shape[0]
    if K > MAX_ORDER:
        raise ValueError(f"expansion order {K} exceeds {MAX_ORDER}")
    tab = tables(m, K)
    out = []
    for v in range(m):
        c = np.zeros((tab.size,) + point.shape[1:])
        c[0] = point[v]
        if K >= 1:
            e = [0] * m
            e[v] = 1
            c[tab.index[tuple(e)]] = 1.0
        out.append(Taylor(c, K, tab))
    return out


def constant_like(ref: Taylor, value) -> Taylor:
    return ref._const(value)


# univariate series helpers; arrays have shape (K+1, *batch) --------------


def _smul(a, b):
    K = a.shape[0] - 1
    out = np.zeros(np.broadcast_shapes(a.shape, b.shape))
    for k in range(K + 1):
        for i in range(k + 1):
            out[k] = out[k] + a[i] * b[k - i]
    return out


def _srecip(a):
    K = a.shape[0] - 1
    out = np.zeros_like(a)
    out[0] = 1.0 / a[0]
    for k in range(1, K + 1):
        acc = 0.0
        for i in range(1, k + 1):
            acc = acc + a[i] * out[k - i]
        out[k] = -acc / a[0]
    return out


def _series_pow(a, p, K):
    a = np.asarray(a, dtype=float)
    out = np.empty((K + 1,) + a.shape)
    coef = 1.0
    for k in range(K + 1):
        out[k] = coef * a ** (p - k)
        coef = coef * (p - k) / (k + 1)
    return out


def _series_sincos(a, K):
    a = np.asarray(a, dtype=float)
    s, c = np.sin(a), np.cos(a)
    sin_d = [s, c, -s, -c]
    cos_d = [c, -s, -c, s]
    ss = np.stack([sin_d[k % 4] / factorial(k) for k in range(K + 1)])
    cc = np.stack([cos_d[k % 4] / factorial(k) for k in range(K + 1)])
    return ss, cc


def _series_exp(a, K):
    a = np.asarray(a, dtype=float)
    e = np.exp(a)
    return np.stack([e / factorial(k) for k in range(K + 1)])


def _series_log(a, K):
    a = np.asarray(a, dtype=float)
    out = [np.log(a)]
    for k in range(1, K + 1):
        out.append((-1.0) ** (k + 1) / (k * a**k))
    return np.stack(out)


def _series_atan(a, K):
    a = np.asarray(a, dtype=float)
    q = np.zeros((K + 1,) + a.shape)
    q[0] = 1.0 + a * a
    if K >= 1:
        q[1] = 2.0 * a
    if K >= 2:
        q[2] = 1.0
    d = _srecip(q)
    out = np.zeros_like(q)
    out[0] = np.arctan(a)
    for k in range(1, K + 1):
        out[k] = d[k - 1] / k
    return out


def _compose(u: Taylor, series) -> Taylor:
    """Evaluate sum_k series[k] * (u - u(0))**k by Horner's rule."""
    K = series.shape[0] - 1
    h = Taylor(u.c.copy(), u.deg, u.tab)
    h.c[0] = 0.0
    out = constant_like(u, series[K])
    for k in range(K - 1, -1, -1):
        out = out * h + constant_like(u, series[k])
    return Taylor(out.c, u.deg, u.tab)


# dispatching elementary functions ----------------------------------------


def sin(x):
    if isinstance(x, Taylor):
        return _compose(x, _series_sincos(x.value, x.tab.K)[0])
    return np.sin(x)


def cos(x):
    if isinstance(x, Taylor):
        return _compose(x, _series_sincos(x.value, x.tab.K)[1])
    return np.cos(x)


def tan(x):
    if isinstance(x, Taylor):
        s, c = _series_sincos(x.value, x.tab.K)
        return _compose(x, _smul(s, _srecip(c)))
    return np.tan(x)


def sec(x):
    if isinstance(x, Taylor):
        return _compose(x, _srecip(_series_sincos(x.value, x.tab.K)[1]))
    return 1.0 / np.cos(x)


def exp(x):
    if isinstance(x, Taylor):
        return _compose(x, _series_exp(x.value, x.tab.K))
    return np.exp(x)


def log(x):
    if isinstance(x, Taylor):
        return _compose(x, _series_log(x.value, x.tab.K))
    return np.log(x)


def sqrt(x):
    if isinstance(x, Taylor):
        return _compose(x, _series_pow(x.value, 0.5, x.tab.K))
    return np.sqrt(x)


def atan(x):
    if isinstance(x, Taylor):
        return _compose(x, _series_atan(x.value, x.tab.K))
    return np.arctan(x)


def value(x):
    """Base-point value of a Taylor expansion, or ``x`` itself."""
    return x.value if isinstance(x, Taylor) else x
