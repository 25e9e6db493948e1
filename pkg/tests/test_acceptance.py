"""Acceptance criteria 1-11, each at its stated tolerance and runtime limit."""

import time

import numpy as np
import pytest
from scipy.stats import linregress

from cklab.curve_tracer import CurveParam, check_implicit_derivative, v_of_many
from cklab.phase_core import (
    Box,
    check_abc,
    check_bourgain,
    near_identity_diffeo,
    sample_array,
    sample_domain,
    transform_phase,
)
from cklab.phases import abc_bochner_riesz, abc_rest, abc_tan, bochner_riesz, canonical_abc, rest, tan, worst
from cklab.straightener import (
    build_straightening,
    compare_abc,
    extract_abc_from_map,
    fit_error_order,
    generic_anchor,
    map_jets,
    straightening_errors,
    worst_explicit_map,
)
from cklab.tan_example import TanConfig, coniness_det, config_grid, pencil_params
from cklab.tube_lab import (
    Shading,
    Tube,
    children_around,
    family_from_params,
    make_sticky_family,
    rasterize,
    rescale_within,
    sk_experiment,
    union_volume,
)


class Clock:
    def __init__(self, limit):
        self.limit = limit
        self.start = time.perf_counter()

    def check(self):
        elapsed = time.perf_counter() - self.start
        assert elapsed < self.limit, f"took {elapsed:.1f} s, limit {self.limit} s"


def worst_near_zero():
    """The worst-case phase sampled with |t| <= 0.1 (the shrunk box is 90% of this one)."""
    ph = worst(3)
    M = ph.domain_M
    lo, hi = np.array(M.lo), np.array(M.hi)
    lo[-1], hi[-1] = -0.1 / 0.9, 0.1 / 0.9
    return ph.with_domain(domain_M=Box(lo, hi, M.origin))


# 1 -----------------------------------------------------------------------------------


@pytest.mark.criterion(1, "Bourgain verdicts on 200 samples")
def test_criterion_1_bourgain_verdicts():
    clock = Clock(10)
    for ph in (rest(3), bochner_riesz(3), bochner_riesz(4), tan(3), tan(4)):
        res = [check_bourgain(ph, x, t, xi).bourgain_residual for x, t, xi in sample_domain(ph, 200, seed=1)]
        assert max(res) <= 1e-8, ph.name
    ph = worst_near_zero()
    pts = sample_domain(ph, 200, seed=1)
    assert max(abs(t) for _, t, _ in pts) <= 0.1 + 1e-12
    res = [check_bourgain(ph, x, t, xi).bourgain_residual for x, t, xi in pts]
    assert min(res) >= 0.3
    clock.check()


# 2 -----------------------------------------------------------------------------------


@pytest.mark.criterion(2, "(A,B,c) identities for the built-in triples")
def test_criterion_2_abc_identities():
    clock = Clock(5)
    for ph, abc in ((rest(3), abc_rest()), (bochner_riesz(3), abc_bochner_riesz()), (tan(3), abc_tan()), (tan(4), abc_tan())):
        res = [check_abc(ph, abc, x, t, xi).residual for x, t, xi in sample_domain(ph, 50, seed=2)]
        assert max(res) <= 1e-9, ph.name
    clock.check()


# 3 -----------------------------------------------------------------------------------


@pytest.mark.criterion(3, "verdicts invariant under near-identity diffeomorphisms")
def test_criterion_3_diffeomorphism_invariance():
    clock = Clock(30)
    for base, passes in ((tan(3), True), (worst_near_zero(), False)):
        cx = np.asarray(base.domain_M.origin)
        cxi = np.asarray(base.domain_xi.origin)
        for seed in range(5):
            ph = transform_phase(base, near_identity_diffeo(cx, 1e-2, seed), near_identity_diffeo(cxi, 1e-2, seed + 100))
            res = [check_bourgain(ph, x, t, xi).bourgain_residual for x, t, xi in sample_domain(ph, 20, seed=seed)]
            if passes:
                assert max(res) <= 1e-6, seed
            else:
                assert min(res) >= 0.1, seed
    clock.check()


# 4 -----------------------------------------------------------------------------------


@pytest.mark.criterion(4, "implicit-derivative identity")
def test_criterion_4_implicit_derivative():
    clock = Clock(10)
    for ph in (rest(3), bochner_riesz(3), worst(3), tan(3)):
        n = ph.n
        pts = sample_array(ph, 21, seed=4)[1:]
        vs = v_of_many(ph, pts[:, : n - 1], pts[:, n - 1], pts[:, n:])
        res = [check_implicit_derivative(ph, p[n:], v, p[n - 1]) for p, v in zip(pts, vs)]
        assert max(res) <= 1e-6, ph.name
    clock.check()


# 5 -----------------------------------------------------------------------------------


@pytest.mark.criterion(5, "quadratic straightening order")
@pytest.mark.parametrize("make", [tan, bochner_riesz], ids=["tan", "bochner_riesz"])
def test_criterion_5_quadratic_order(make):
    clock = Clock(60)
    ph = make(3)
    xi0, v0 = generic_anchor(ph)
    rep = fit_error_order(ph, canonical_abc(ph), xi0, v0, samples_per_radius=8)
    assert rep.radii[0] == 2.0**-3 and rep.radii[-1] == 2.0**-8
    assert 1.8 <= rep.slope <= 2.2
    clock.check()


@pytest.mark.criterion(5, "quadratic straightening order")
def test_criterion_5_rest_exact_and_worst_explicit():
    clock = Clock(60)
    ph = rest(3)
    rep = fit_error_order(ph, abc_rest(), np.zeros(2), np.zeros(2), samples_per_radius=8)
    assert rep.exact and max(rep.max_errors) <= 1e-12

    ph = worst(3)
    rng = np.random.default_rng(5)
    xis = rng.uniform(-0.2, 0.2, (20, 2))
    vs = rng.uniform(-0.1, 0.1, (20, 2))
    errs = straightening_errors(worst_explicit_map(), ph, xis, vs, np.linspace(-0.45, 0.45, 41))
    assert errs.max() <= 1e-10
    clock.check()


# 6 -----------------------------------------------------------------------------------


@pytest.mark.criterion(6, "(A,B) recovered from the straightening map")
def test_criterion_6_round_trip():
    clock = Clock(10)
    for ph in (rest(3), bochner_riesz(3), bochner_riesz(4), tan(3), tan(4)):
        abc = canonical_abc(ph)
        for xi0, v0 in (generic_anchor(ph), generic_anchor(ph, 0.05)):
            smap = build_straightening(ph, abc, xi0, v0)
            jets = map_jets(smap, ph)
            err = compare_abc(extract_abc_from_map(jets), abc, jets, xi0, v0)
            assert err["A_err"] <= 1e-8 and err["B_err"] <= 1e-8, ph.name
    clock.check()


# 7 -----------------------------------------------------------------------------------


@pytest.mark.criterion(7, "coniness determinant")
@pytest.mark.parametrize("n", [3, 4])
def test_criterion_7_coniness(n):
    clock = Clock(30)
    p = np.zeros(n - 1)
    p[-2:] = 1e-3
    det, lead, rel = coniness_det(TanConfig(n, 1.05, p))
    assert det > 0
    assert rel <= 0.1
    assert lead == pytest.approx(2e-12 / (3 * 1.05**2 * 0.05**6))

    ladder = [1e-3 * 2.0**-j for j in range(4)]
    dets = []
    for q in ladder:
        pj = p.copy()
        pj[-1] = q
        dets.append(coniness_det(TanConfig(n, 1.05, pj))[0])
    assert abs(linregress(np.log(ladder), np.log(dets)).slope - 3) <= 0.1

    control, _, _ = coniness_det(TanConfig(n, 1.05, p), family="lines")
    assert abs(control) <= 1e-14
    clock.check()


# 8 -----------------------------------------------------------------------------------


@pytest.mark.criterion(8, "pencil equations solved exactly")
def test_criterion_8_pencil_exactness():
    clock = Clock(10)
    worst_res = 0.0
    for cfg in config_grid(3, 20, seed=8):
        # symmetric about s = 1, kept a fixed fraction away from the pole at s = t0
        half = 0.25 * (cfg.t0 - 1)
        for s in np.linspace(1 - half, 1 + half, 50):
            worst_res = max(worst_res, pencil_params(cfg, s).residuals.max())
    assert worst_res <= 1e-10
    clock.check()


# 9 -----------------------------------------------------------------------------------


@pytest.mark.criterion(9, "rescaling inside a parent tube")
def test_criterion_9_rescaling():
    clock = Clock(120)
    ph = tan(3)
    xi0, v0 = generic_anchor(ph)
    ratios, jac = [], []
    for rho in (2.0**-3, 2.0**-4, 2.0**-5):
        parent = Tube(CurveParam(xi0, v0), rho, ph)
        kids = children_around(parent, rho * rho, 16, seed=9)
        rep = rescale_within(parent, abc_tan(), kids, grid_res=256)
        ratios.append(rep.deviation_over_rho)
        jac.append(rep.jacobian_ratio)
    C = max(ratios)
    assert 0 < C < np.inf
    assert max(ratios) / min(ratios) <= 2.0
    # measured volume factor divided by |det DF| sits within 15% of rho^-2
    assert all(abs(j - 1) <= 0.15 for j in jac), jac
    clock.check()


# 10 ----------------------------------------------------------------------------------


@pytest.mark.criterion(10, "tube volume sanity")
def test_criterion_10_volumes():
    clock = Clock(60)
    ph = rest(3)
    delta = 2.0**-6
    single = family_from_params(ph, delta, [[0.0, 0.0]], [[0.0, 0.0]])
    L = Shading.full(ph).length
    exact = np.pi * delta**2 * L
    assert abs(union_volume(single, int(4 / delta)) - exact) <= 0.2 * exact

    rng = np.random.default_rng(10)
    t_lo, t_hi = Shading.full(ph).t_intervals[0]
    for _ in range(50):
        m = int(rng.integers(1, 12))
        xis = rng.uniform(-0.3, 0.3, (m, 2))
        vs = rng.uniform(-0.15, 0.15, (m, 2))
        shadings = []
        for _ in range(m):
            a, b = np.sort(rng.uniform(t_lo, t_hi, 2))
            shadings.append(Shading(((a, b + 1e-3),)) if b + 1e-3 <= t_hi else Shading(((a - 1e-3, b),)))
        fam = family_from_params(ph, delta, xis, vs, shadings)
        r = rasterize(fam, 128)
        assert r.union <= r.member_volumes.sum() + 1e-15
    clock.check()


# 11 ----------------------------------------------------------------------------------


@pytest.mark.criterion(11, "SK' hypothesis machinery")
@pytest.mark.parametrize("mode", ["grid", "cantor"])
def test_criterion_11_generated_families_pass(mode):
    clock = Clock(60)
    ph = rest(3)
    delta = 2.0**-6
    fam = make_sticky_family(ph, delta, mode, seed=11)
    rep = sk_experiment(ph, delta, fam, 0.2, measure=False)
    assert rep.a_pass, "distinctness"
    assert rep.b_pass, f"parallel counts {rep.b_counts} above {rep.b_threshold:.3f}"
    assert rep.c_pass, f"shading mass {rep.shading_mass:.4f} below {rep.c_threshold:.4f} with {len(fam)} tubes"
    clock.check()


@pytest.mark.criterion(11, "SK' hypothesis machinery")
def test_criterion_11_violations_are_flagged():
    clock = Clock(60)
    ph = rest(3)
    delta = 2.0**-6
    fam = make_sticky_family(ph, delta, "grid", seed=11)
    dup = family_from_params(ph, delta, *[np.vstack([a, a[:1]]) for a in fam.params()])
    rep = sk_experiment(ph, delta, dup, 0.2, measure=False)
    assert not rep.a_pass and rep.distinct_violations == 1

    vs = np.column_stack([(np.arange(40) - 19.5) * 2 * delta, np.zeros(40)])
    par = family_from_params(ph, delta, np.zeros((40, 2)), vs)
    rep = sk_experiment(ph, delta, par, 0.2, measure=False)
    assert rep.a_pass
    assert not rep.b_pass and rep.b_counts[delta] == 40
    clock.check()
