"""Finitary tube geometry for the sticky Kakeya experiments.

Tubes are delta-neighbourhoods (in each t-slice) of phase curves, indexed by
their central parameter T* = (xi, v).  Shadings are finite unions of
t-intervals.  Volumes are measured by rasterizing onto a uniform grid over the
shrunk domain box.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product

import networkx as nx
import numpy as np
from scipy.spatial import cKDTree

from .curve_tracer import CurveParam, curve_metric, trace_curves, v_box, v_of
from .phase_core import ABCData, PhaseSpec
from .straightener import build_straightening

TOL = 1e-12


class ResolutionError(ValueError):
    pass


class ContainmentError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Tube:
    param: CurveParam
    delta: float
    phase: PhaseSpec

    def __post_init__(self):
        if not (0.0 < self.delta <= 1.0):
            raise ValueError(f"tube radius must lie in (0, 1], got {self.delta}")

    @property
    def direction(self) -> np.ndarray:
        return self.param.xi


@dataclass(frozen=True)
class Shading:
    """A finite union of disjoint closed t-intervals, sorted."""

    t_intervals: tuple

    def __post_init__(self):
        ivs = tuple((float(a), float(b)) for a, b in self.t_intervals)
        for a, b in ivs:
            if not b > a:
                raise ValueError(f"empty shading interval [{a}, {b}]")
        for (a0, b0), (a1, b1) in zip(ivs, ivs[1:]):
            if not a1 > b0:
                raise ValueError("shading intervals must be sorted and disjoint")
        object.__setattr__(self, "t_intervals", ivs)

    @classmethod
    def full(cls, phase: PhaseSpec) -> "Shading":
        M0 = phase.domain_M.shrunk(0.9)
        return cls(((M0.lo[-1], M0.hi[-1]),))

    @classmethod
    def empty(cls) -> "Shading":
        return cls(())

    @property
    def length(self) -> float:
        return float(sum(b - a for a, b in self.t_intervals))

    def contains(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape, dtype=bool)
        for a, b in self.t_intervals:
            out |= (t >= a) & (t <= b)
        return out


def ball_volume(dim: int, r: float) -> float:
    return math.pi ** (dim / 2) / math.gamma(dim / 2 + 1) * r**dim


def shading_measure(tube: Tube, shading: Shading) -> float:
    """|Y(T)| = interval length times the cross-section volume of the tube."""
    return shading.length * ball_volume(tube.phase.n - 1, tube.delta)


@dataclass(frozen=True, eq=False)
class TubeFamily:
    delta: float
    members: tuple
    label: str = ""

    def __post_init__(self):
        members = tuple(self.members)
        object.__setattr__(self, "members", members)
        for tube, _ in members:
            if abs(tube.delta - self.delta) > TOL:
                raise ValueError("all members must share the family radius")
        if len({id(tube.phase) for tube, _ in members}) > 1:
            raise ValueError("all members must share one phase")

    def __len__(self) -> int:
        return len(self.members)

    @property
    def phase(self) -> PhaseSpec | None:
        return self.members[0][0].phase if self.members else None

    def params(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.members:
            return np.zeros((0, 0)), np.zeros((0, 0))
        xis = np.array([t.param.xi for t, _ in self.members])
        vs = np.array([t.param.v for t, _ in self.members])
        return xis, vs

    def to_jsonl(self) -> str:
        lines = []
        for tube, sh in self.members:
            rec = {"xi": tube.param.xi.tolist(), "v": tube.param.v.tolist(), "delta": tube.delta, "shading": [list(iv) for iv in sh.t_intervals]}
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_jsonl(cls, text: str, phase: PhaseSpec, label: str = "") -> "TubeFamily":
        members = []
        delta = None
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if "xi" not in rec:
                continue  # header records such as an embedded run config
            delta = rec["delta"]
            members.append((Tube(CurveParam(rec["xi"], rec["v"]), delta, phase), Shading(tuple(map(tuple, rec["shading"])))))
        return cls(delta if delta is not None else 1.0, tuple(members), label)


def family_from_params(phase: PhaseSpec, delta: float, xis, vs, shadings=None, label: str = "") -> TubeFamily:
    full = Shading.full(phase)
    members = []
    for i, (xi, v) in enumerate(zip(np.atleast_2d(xis), np.atleast_2d(vs))):
        sh = full if shadings is None else shadings[i]
        members.append((Tube(CurveParam(xi, v), delta, phase), sh))
    return TubeFamily(delta, tuple(members), label)


# pairwise relations -------------------------------------------------------------


def _same_delta(T1: Tube, T2: Tube) -> None:
    if abs(T1.delta - T2.delta) > TOL:
        raise ValueError("tubes have different radii")


def essentially_distinct(T1: Tube, T2: Tube) -> bool:
    _same_delta(T1, T2)
    return curve_metric(T1.param, T2.param) >= T1.delta - TOL


def essentially_parallel(T1: Tube, T2: Tube) -> bool:
    _same_delta(T1, T2)
    return float(np.linalg.norm(T1.param.xi - T2.param.xi)) <= T1.delta + TOL


def _sum_metric(a: np.ndarray, b: np.ndarray, k: int) -> np.ndarray:
    return np.linalg.norm(a[..., :k] - b[..., :k], axis=-1) + np.linalg.norm(a[..., k:] - b[..., k:], axis=-1)


def distinctness_violations(family: TubeFamily) -> int:
    """Number of pairs closer than delta in the curve metric."""
    if len(family) < 2:
        return 0
    xis, vs = family.params()
    k = xis.shape[1]
    P = np.hstack([xis, vs])
    # the sum metric is at least the Euclidean distance, so candidates lie in a Euclidean ball
    pairs = cKDTree(P).query_pairs(family.delta, output_type="ndarray")
    if pairs.size == 0:
        return 0
    d = _sum_metric(P[pairs[:, 0]], P[pairs[:, 1]], k)
    return int(np.sum(d < family.delta - TOL))


def max_parallel_count(family: TubeFamily) -> int:
    """Largest set of pairwise essentially parallel members (an exact clique number).

    Members with identical directions are merged into one weighted vertex.
    """
    if len(family) == 0:
        return 0
    xis, _ = family.params()
    uniq, counts = np.unique(np.round(xis, 14), axis=0, return_counts=True)
    if uniq.shape[0] == 1:
        return int(counts[0])
    G = nx.Graph()
    G.add_nodes_from(range(len(counts)))
    pairs = cKDTree(uniq).query_pairs(family.delta + TOL, output_type="ndarray")
    G.add_edges_from(map(tuple, pairs))
    # maximal-clique enumeration is fast on the sparse graphs that arise here
    return int(max(counts[c].sum() for c in nx.find_cliques(G)))


# covers ------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Cover:
    parents: TubeFamily
    assignment: np.ndarray
    strategy: str


def _contained(P: np.ndarray, center: np.ndarray, idx: np.ndarray, k: int, delta: float, rho: float) -> np.ndarray:
    return idx[_sum_metric(P[idx], center, k) + delta <= rho + TOL]


def cover(family: TubeFamily, rho: float, strategy: str = "index") -> Cover:
    """Greedy cover of the family's parameter balls B_delta(T*) by balls B_rho.

    ``index`` seeds each new ball at the first uncovered member, as in the
    plain greedy algorithm.  ``block`` first places balls at the centers of a
    lattice of xi-cells of side 1.05 rho (v centred on the cell's members)
    and finishes greedily; its parents are pairwise non-parallel whenever
    the fallback is not needed.  ``recentered`` moves each greedy ball to the
    mean or bounding-box midpoint of nearby uncovered members when that
    covers more.
    """
    delta = family.delta
    if not (delta - TOL <= rho <= 1.0 + TOL):
        raise ValueError(f"need delta <= rho <= 1, got rho = {rho}")
    phase = family.phase
    N = len(family)
    if N == 0:
        return Cover(TubeFamily(rho, (), f"{family.label}@{rho:g}"), np.zeros(0, dtype=int), strategy)
    xis, vs = family.params()
    k = xis.shape[1]
    P = np.hstack([xis, vs])
    tree = cKDTree(P)
    assignment = np.full(N, -1, dtype=int)
    centers: list[np.ndarray] = []

    def emit(center, members):
        assignment[members] = len(centers)
        centers.append(center)

    if strategy == "block":
        side = 1.05 * rho
        lo = np.array(phase.domain_xi.lo)
        cells = np.floor((xis - lo) / side).astype(int)
        keys, inv = np.unique(cells, axis=0, return_inverse=True)
        for c in range(keys.shape[0]):
            members = np.flatnonzero(inv.ravel() == c)
            xc = lo + (keys[c] + 0.5) * side
            vc = 0.5 * (vs[members].min(axis=0) + vs[members].max(axis=0))
            center = np.r_[xc, vc]
            inside = _contained(P, center, members, k, delta, rho)
            if inside.size:
                emit(center, inside)
    elif strategy not in ("index", "recentered"):
        raise ValueError(f"unknown cover strategy {strategy!r}")

    radius = max(rho - delta, 0.0)
    for seed in range(N):
        if assignment[seed] >= 0:
            continue
        near = np.array(tree.query_ball_point(P[seed], radius + TOL), dtype=int)
        near = near[assignment[near] < 0] if near.size else np.array([seed])
        best_center = P[seed]
        best = _contained(P, P[seed], near, k, delta, rho)
        if strategy == "recentered":
            wide = np.array(tree.query_ball_point(P[seed], 2 * radius + TOL), dtype=int)
            wide = wide[assignment[wide] < 0]
            for cand in (P[wide].mean(axis=0), 0.5 * (P[wide].min(axis=0) + P[wide].max(axis=0))):
                got = _contained(P, cand, wide, k, delta, rho)
                if seed in got and got.size > best.size:
                    best_center, best = cand, got
        if seed not in best:
            best = np.r_[best, seed]
        emit(best_center, best)

    full = Shading.full(phase)
    parents = tuple((Tube(CurveParam(c[:k], c[k:]), rho, phase), full) for c in centers)
    return Cover(TubeFamily(rho, parents, f"{family.label}@{rho:g}"), assignment, strategy)


STRATEGIES = ("index", "block", "recentered")


def best_cover(family: TubeFamily, rho: float) -> tuple[Cover, int]:
    """The cover among :data:`STRATEGIES` with the fewest pairwise-parallel parents."""
    best = None
    for s in STRATEGIES:
        c = cover(family, rho, s)
        m = max_parallel_count(c.parents)
        key = (m, len(c.parents))
        if best is None or key < best[0]:
            best = (key, c, m)
    return best[1], best[2]


def cover_is_sound(family: TubeFamily, cov: Cover) -> bool:
    xis, vs = family.params()
    k = xis.shape[1]
    P = np.hstack([xis, vs])
    pxi, pv = cov.parents.params()
    C = np.hstack([pxi, pv])[cov.assignment]
    return bool(np.all(_sum_metric(P, C, k) + family.delta <= cov.parents.delta + TOL))


def packing_lower_bound(family: TubeFamily, rho: float) -> int:
    """Size of a greedy set of members pairwise more than 2 rho apart.

    No rho-ball holds two of them, so this bounds every cover from below.
    """
    xis, vs = family.params()
    k = xis.shape[1]
    P = np.hstack([xis, vs])
    chosen: list[int] = []
    for i in range(len(P)):
        if all(_sum_metric(P[i], P[j], k) > 2 * rho for j in chosen):
            chosen.append(i)
    return len(chosen)


def default_scale_ladder(delta: float) -> list[float]:
    """delta, then every dyadic 2^-j with delta^(1/2) <= 2^-j <= 1."""
    ladder = [delta]
    j = int(math.floor(-math.log2(math.sqrt(delta)) + 1e-9))
    ladder += [2.0**-i for i in range(j, -1, -1) if 2.0**-i > delta]
    return sorted(set(ladder))


# rasterization ---------------------------------------------------------------


@dataclass(frozen=True)
class Raster:
    union: float
    member_volumes: np.ndarray
    voxel_volume: float
    shape: tuple


def _threads() -> int:
    import os

    try:
        return max(1, int(os.environ.get("CK_LAB_THREADS", "1")))
    except ValueError:
        return 1


def _stamp_offsets(delta: float, h: np.ndarray) -> np.ndarray:
    r = np.ceil(delta / h).astype(int) + 1
    return np.array(list(product(*[range(-ri, ri + 1) for ri in r])), dtype=int)


def rasterize(family: TubeFamily, grid_res: int, trace_points: int = 65) -> Raster:
    """Voxelize the shaded tubes over the shrunk domain box.

    A voxel centre (x, t) is in Y(T) when t lies in the shading and
    |x - X(xi, v, t)| <= delta; X is traced on ``trace_points`` heights and
    interpolated linearly.
    """
    phase = family.phase
    N = len(family)
    if N == 0:
        return Raster(0.0, np.zeros(0), 0.0, ())
    delta = family.delta
    M0 = phase.domain_M.shrunk(0.9)
    lo, widths = np.array(M0.lo), M0.widths
    counts = np.maximum(1, np.round(widths * grid_res).astype(int))
    h = widths / counts
    if 2 * delta < h[:-1].max():
        raise ResolutionError(f"voxel size {h[:-1].max():.3g} exceeds the tube diameter {2 * delta:.3g}")
    k = phase.n - 1
    t_centers = lo[-1] + (np.arange(counts[-1]) + 0.5) * h[-1]

    xis, vs = family.params()
    t_trace = np.linspace(M0.lo[-1], M0.hi[-1], trace_points)
    curves, _ = trace_curves(phase, xis, vs, t_trace)
    # linear interpolation in t for all curves at once
    pos = np.clip((t_centers - t_trace[0]) / (t_trace[1] - t_trace[0]), 0, trace_points - 1 - 1e-12)
    i0 = np.floor(pos).astype(int)
    w = (pos - i0)[None, :, None]
    centers = (1 - w) * curves[:, i0] + w * curves[:, i0 + 1]
    active = np.array([sh.contains(t_centers) for _, sh in family.members])

    offsets = _stamp_offsets(delta, h[:-1])
    xlo, xh, xn = lo[:-1], h[:-1], counts[:-1]
    strides = np.cumprod(np.r_[1, xn[::-1][:-1]])[::-1]

    def slab(slices):
        member_hits = np.zeros(N, dtype=np.int64)
        union = 0
        for j in slices:
            ids = np.flatnonzero(active[:, j])
            if ids.size == 0:
                continue
            C = centers[ids, j]
            base = np.floor((C - xlo) / xh).astype(int)
            idx = base[:, None, :] + offsets[None, :, :]
            ok = np.all((idx >= 0) & (idx < xn), axis=2)
            pos = xlo + (idx + 0.5) * xh
            ok &= np.linalg.norm(pos - C[:, None, :], axis=2) <= delta
            member_hits += np.bincount(ids[np.nonzero(ok)[0]], minlength=N)
            flat = (idx[ok] * strides).sum(axis=1)
            union += np.unique(flat).size
        return union, member_hits

    threads = _threads()
    chunks = np.array_split(np.arange(counts[-1]), threads)
    if threads == 1:
        results = [slab(chunks[0])]
    else:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(slab, chunks))
    vox = float(np.prod(h))
    union = sum(r[0] for r in results)
    hits = sum(r[1] for r in results)
    return Raster(union * vox, hits * vox, vox, tuple(counts))


def union_volume(family: TubeFamily, grid_res: int) -> float:
    return rasterize(family, grid_res).union


# the SK' experiment --------------------------------------------------------------


@dataclass
class SKReport:
    delta: float
    eta: float
    size: int
    a_pass: bool
    distinct_violations: int
    b_pass: bool
    b_counts: dict
    b_strategies: dict
    b_threshold: float
    c_pass: bool
    shading_mass: float
    c_threshold: float
    union_volume: float | None
    eps_hat: float | None
    label: str = ""

    def to_json(self, **extra) -> str:
        d = asdict(self)
        d["b_counts"] = {repr(k): v for k, v in self.b_counts.items()}
        d["b_strategies"] = {repr(k): v for k, v in self.b_strategies.items()}
        return json.dumps({**d, **extra}, indent=2, sort_keys=True)

    @property
    def hypotheses_hold(self) -> bool:
        return self.a_pass and self.b_pass and self.c_pass


def sk_experiment(
    phase: PhaseSpec,
    delta: float,
    family: TubeFamily,
    eta: float,
    scale_ladder=None,
    grid_res: int | None = None,
    measure: bool = True,
) -> SKReport:
    """Check hypotheses (a)-(c) and measure the union of the shadings.

    (b) is checked on the best of the greedy covers, so a failure means
    "no cover found", not "no cover exists".
    """
    if abs(family.delta - delta) > TOL:
        raise ValueError("family radius differs from delta")
    ladder = default_scale_ladder(delta) if scale_ladder is None else [float(r) for r in scale_ladder]
    viol = distinctness_violations(family)
    threshold_b = delta**-eta
    b_counts, b_strat = {}, {}
    for rho in ladder:
        cov, m = best_cover(family, rho)
        b_counts[rho] = m
        b_strat[rho] = cov.strategy
    mass = sum(shading_measure(t, s) for t, s in family.members)
    vol = eps = None
    if measure and len(family):
        vol = union_volume(family, grid_res or int(round(4 / delta)))
        eps = math.log(vol) / math.log(delta) if vol > 0 else math.inf
    return SKReport(
        delta,
        eta,
        len(family),
        viol == 0,
        viol,
        all(m <= threshold_b + TOL for m in b_counts.values()),
        b_counts,
        b_strat,
        threshold_b,
        mass >= delta**eta,
        mass,
        delta**eta,
        vol,
        eps,
        family.label,
    )


# family generators ---------------------------------------------------------------


def _sticky_v(phase: PhaseSpec, xis: np.ndarray, seed: int, slope: float = 0.1) -> np.ndarray:
    """v = v_c + L (xi - xi_c) with a seeded L of spectral norm at most ``slope``."""
    rng = np.random.default_rng(seed)
    k = xis.shape[1]
    L = rng.uniform(-1, 1, (k, k))
    L *= slope / max(np.linalg.norm(L, 2), 1e-300)
    box = v_box(phase)
    x0, t0, xi0 = phase.origin
    vc = v_of(phase, x0, t0, xi0) + rng.uniform(-0.05, 0.05, k) * box.widths
    return vc + (xis - phase.domain_xi.center) @ L.T


def _cantor_points(level: int, keep: int) -> np.ndarray:
    """Centres of the level-``level`` intervals of the Cantor set keeping ``keep`` of 4 quarters."""
    chosen = {2: (0, 3), 3: (0, 1, 3), 4: (0, 1, 2, 3)}[keep]
    pts = np.array([0.0])
    for j in range(1, level + 1):
        pts = (pts[:, None] + np.array(chosen)[None, :] * 4.0**-j).ravel()
    return np.sort(pts + 0.5 * 4.0**-level)


def make_sticky_family(phase: PhaseSpec, delta: float, mode: str = "grid", seed: int = 0, keep: int = 2) -> TubeFamily:
    """Test families for the SK' hypotheses.

    ``grid``: one tube per delta-cell of the direction box.  ``cantor``:
    directions on the product of middle-halves Cantor sets (``keep = 2``
    of 4 quarters per level) at resolution delta.  In both modes v is a
    seeded affine function of xi, so coarse covers stay one-per-direction.
    """
    k_exp = -math.log2(delta)
    if abs(k_exp - round(k_exp)) > 1e-9:
        raise ValueError("delta must be a power of 2")
    k = phase.n - 1
    lo = np.array(phase.domain_xi.lo)
    widths = phase.domain_xi.widths
    if mode == "grid":
        axes = [lo[a] + (np.arange(int(round(widths[a] / delta))) + 0.5) * delta for a in range(k)]
    elif mode == "cantor":
        level = int(round(k_exp)) // 2
        u = _cantor_points(level, keep)
        axes = [lo[a] + u * widths[a] for a in range(k)]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    xis = np.array(list(product(*axes)))
    vs = _sticky_v(phase, xis, seed)
    return family_from_params(phase, delta, xis, vs, label=f"{mode}(delta=2^-{int(round(k_exp))}, seed={seed})")


# rescaling within a parent tube ---------------------------------------------------


@dataclass(frozen=True)
class RescaleReport:
    rho: float
    delta: float
    max_line_deviation: float
    deviation_over_rho: float
    jacobian_ratio: float
    measured_factor: float
    straight_xi: np.ndarray = field(repr=False)
    straight_v: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "delta": self.delta,
            "max_line_deviation": self.max_line_deviation,
            "deviation_over_rho": self.deviation_over_rho,
            "jacobian_ratio": self.jacobian_ratio,
            "measured_factor": self.measured_factor,
        }


def children_around(parent: Tube, delta: float, count: int, seed: int = 0, fraction: float = 1.0) -> TubeFamily:
    """Children at curve-metric distance ``fraction * rho`` from the parent, in seeded directions."""
    rng = np.random.default_rng(seed)
    k = parent.param.xi.size
    d = rng.standard_normal((count, 2 * k))
    d /= (np.linalg.norm(d[:, :k], axis=1) + np.linalg.norm(d[:, k:], axis=1))[:, None]
    P = parent.param.as_vector() + fraction * parent.delta * d
    return family_from_params(parent.phase, delta, P[:, :k], P[:, k:], label="children")


def rescale_within(
    parent: Tube,
    abc: ABCData,
    children: TubeFamily,
    grid_res: int = 256,
    t_grid=None,
    probe_radius: float | None = None,
) -> RescaleReport:
    """Apply h o F (F straightens at the parent, h(y, s) = (y / rho, s)) to the children.

    The deviation is the largest slice distance of an image curve from its
    line, divided by rho.  The Jacobian ratio compares the rasterized volume
    of h(F(probe)) with rho^-(n-1) times the integral of |det DF| over the
    probe, where the probe is the radius-``probe_radius`` tube around the
    parent curve on the middle half of the t-range.
    """
    phase = parent.phase
    rho = parent.delta
    k = phase.n - 1
    xis, vs = children.params()
    P = np.hstack([xis, vs])
    d = _sum_metric(P, parent.param.as_vector(), k)
    if np.any(d > rho + TOL):
        raise ContainmentError(f"a child lies at distance {d.max():.4g} > rho = {rho:.4g} from the parent")

    smap = build_straightening(phase, abc, parent.param.xi, parent.param.v)
    M0 = phase.domain_M.shrunk(0.9)
    tg = np.linspace(M0.lo[-1], M0.hi[-1], 41) if t_grid is None else np.asarray(t_grid, dtype=float)
    curves, _ = trace_curves(phase, xis, vs, tg)
    B, T = curves.shape[:2]
    y, s = smap.F(curves.reshape(B * T, k), np.tile(tg, B))
    target = smap.line_point(np.repeat(xis, T, axis=0), np.repeat(vs, T, axis=0), s)
    dev = float(np.max(np.linalg.norm(y - target, axis=1))) / rho

    sx = smap.Xi(xis, vs) / rho
    sv = smap.V(xis, vs) / rho
    factor, ratio = _jacobian_probe(phase, smap, parent, rho, grid_res, probe_radius)
    return RescaleReport(rho, children.delta, dev, dev / rho, ratio, factor, sx, sv)


def _jacobian_probe(phase, smap, parent, rho, grid_res, probe_radius):
    """Rasterize a probe tube before and after h o F.

    Returns (measured volume factor, factor * rho^(n-1) / mean |det DF|).
    """
    k = phase.n - 1
    r = 0.5 * rho if probe_radius is None else probe_radius
    M0 = phase.domain_M.shrunk(0.9)
    t_lo = M0.lo[-1] + 0.25 * M0.widths[-1]
    t_hi = M0.hi[-1] - 0.25 * M0.widths[-1]
    hgrid = 1.0 / grid_res
    if 2 * r < hgrid:
        raise ResolutionError("probe tube thinner than one voxel")
    # the probe is thin in original coordinates, so sample it on a finer grid there
    hx = min(hgrid, r / 32)
    xi0, v0 = parent.param.xi, parent.param.v

    # original coordinates: voxels around the anchor curve
    nt = max(2, int(round((t_hi - t_lo) * grid_res)))
    ht = (t_hi - t_lo) / nt
    ts = t_lo + (np.arange(nt) + 0.5) * ht
    X0 = trace_curves(phase, [xi0], [v0], ts)[0][0]
    m = int(np.ceil(r / hx)) + 1
    offs = np.array(list(product(*[range(-m, m)] * k)), dtype=float)
    orig_vol = 0.0
    jac_int = 0.0
    _, J, _ = _anchor_jets(smap, ts)
    c_prime = np.gradient(smap.c_tilde(ts), ts)
    detDF = np.abs(np.linalg.det(J) * c_prime)
    for i in range(nt):
        base = np.floor(X0[i] / hx)
        pts = (base + offs + 0.5) * hx
        cnt = int(np.sum(np.linalg.norm(pts - X0[i], axis=1) <= r))
        orig_vol += cnt * hx**k * ht
        jac_int += cnt * hx**k * ht * detDF[i]

    # image coordinates: (y / rho, s); preimage x = X0(t) + J(t)^{-1} rho y with t = c_tilde^{-1}(s)
    t_dense = np.linspace(t_lo, t_hi, 257)
    c_vals = smap.c_tilde(t_dense)
    order = np.argsort(c_vals)
    s_lo, s_hi = c_vals.min(), c_vals.max()
    ns = max(2, int(round((s_hi - s_lo) * grid_res)))
    hs = (s_hi - s_lo) / ns
    s_c = s_lo + (np.arange(ns) + 0.5) * hs
    t_of_s = np.interp(s_c, c_vals[order], t_dense[order])
    X0s, Js, _ = _anchor_jets(smap, t_of_s)
    bound = r * np.max(np.linalg.norm(J, axis=(1, 2), ord=2)) / rho
    mi = int(np.ceil(bound / hgrid)) + 1
    img_offs = (np.array(list(product(*[range(-mi, mi)] * k)), dtype=float) + 0.5) * hgrid
    img_vol = 0.0
    for i in range(ns):
        x = X0s[i] + rho * np.linalg.solve(Js[i], img_offs.T).T
        cnt = int(np.sum(np.linalg.norm(x - X0s[i], axis=1) <= r))
        img_vol += cnt * hgrid**k * hs
    factor = img_vol / orig_vol
    ratio = img_vol * rho**k / jac_int
    return factor, ratio


def _anchor_jets(smap, ts):
    """Anchor curve, its J matrices and heights at the given t (through F's own evaluator)."""
    ts = np.asarray(ts, dtype=float)
    k = smap.xi0.size
    eye = np.eye(k)
    # F is affine in x at fixed t: F(X0 + e_j) - F(X0) recovers column j of J
    Xs, Js, cs = [], [], []
    base_y, base_s = smap.F(np.zeros((ts.size, k)), ts)
    cols = [smap.F(np.tile(eye[j], (ts.size, 1)), ts)[0] - base_y for j in range(k)]
    J = np.stack(cols, axis=-1)
    X0 = -np.linalg.solve(J, base_y[..., None])[..., 0]
    return X0, J, base_s
