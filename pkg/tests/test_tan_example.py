import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import linregress

from cklab.curve_tracer import trace_curve
from cklab.phase_core import eval_jet
from cklab.phases import abc_tan, tan
from cklab.straightener import build_straightening
from cklab.tan_example import (
    AmbiguousRootError,
    PoleError,
    TanConfig,
    coniness_det,
    config_grid,
    illustrate_straightening,
    illustration_error,
    illustration_line,
    illustration_map,
    leading_det,
    pencil_params,
    simplified_curve,
    simplified_tangent,
    straighten_t,
    tan_curve,
    tangent_frame,
    verify_tan_ode,
)


@pytest.mark.parametrize("n", [3, 4])
def test_ode_ansatz_holds(n):
    assert verify_tan_ode(n, 100, seed=n) <= 1e-10


def test_ode_trivial_point_and_fd():
    ph = tan(3)
    jet = eval_jet(ph, [0.0, 0.0], 1.0, [0.0, 0.0], 2)
    f = jet.grad_xi()
    assert f[-1] == pytest.approx(0.0, abs=1e-15)
    assert jet[(4, 4)] == pytest.approx(1.0)
    rng = np.random.default_rng(3)
    h = 1e-6
    for _ in range(10):
        x = rng.uniform(-0.05, 0.05, 2)
        t = rng.uniform(0.92, 1.08)
        xi = rng.uniform(-0.1, 0.1, 2)
        for j in range(2):
            e = np.eye(2)[j]
            fp = eval_jet(ph, x, t, xi + h * e, 1).grad_xi()[j]
            fm = eval_jet(ph, x, t, xi - h * e, 1).grad_xi()[j]
            fd = (fp - fm) / (2 * h)
            fj = eval_jet(ph, x, t, xi, 1).grad_xi()[j]
            expect = t * t if j == 0 else fj**2 + t * t
            assert fd == pytest.approx(expect, abs=1e-4)


def test_tan_curve_values():
    assert np.allclose(tan_curve(3, [0, 0], [0, 0], 1.03), [0, 0, 1.03])
    assert tan_curve(3, [0, 0], [0, 0.25], 1.0)[1] == pytest.approx(0.2450, abs=1e-4)


def test_tan_curve_matches_tracer():
    ph = tan(4)
    rng = np.random.default_rng(4)
    grid = np.linspace(0.92, 1.08, 9)
    for _ in range(50):
        xi = rng.uniform(-0.15, 0.15, 3)
        v = rng.uniform(-0.1, 0.1, 3)
        traced = trace_curve(ph, xi, v, grid).points
        closed = np.array([tan_curve(4, xi, v, t)[:-1] for t in grid])
        assert np.abs(traced - closed).max() <= 1e-10


def test_simplified_curve_basics():
    assert np.allclose(simplified_curve(3, [0, 0], [0, 0], 0.97), [0, 0, 0.97])
    w = 0.07
    a = simplified_curve(3, [0, 0], [0, w], 1.04)
    b = simplified_curve(3, [0, 0], [0, w], 0.98)
    assert a[1] - b[1] == pytest.approx((1.04 - 0.98) * w, abs=1e-15)


def test_simplified_curve_is_cubic_model_of_tan_curve():
    # G(tan_curve) at parameter t against simplified_curve at t^2
    rng = np.random.default_rng(0)
    radii = [2.0**-j for j in range(3, 8)]
    dirs = rng.standard_normal((8, 4))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    errs = []
    for r in radii:
        e = 0.0
        for d in dirs:
            xi, v = r * d[:2], r * d[2:]
            for t in np.linspace(0.92, 1.08, 9):
                e = max(e, np.abs(straighten_t(tan_curve(3, xi, v, t)) - simplified_curve(3, xi, v, t * t)).max())
        errs.append(e)
    assert linregress(np.log(radii), np.log(errs)).slope >= 3.8


def test_simplified_tangent_is_t_derivative():
    xi, v, t, h = np.array([0.03, -0.02]), np.array([0.01, 0.05]), 1.02, 1e-6
    fd = (simplified_curve(3, xi, v, t + h) - simplified_curve(3, xi, v, t - h)) / (2 * h)
    assert np.allclose(simplified_tangent(xi, v, t), fd, atol=1e-9)


# pencil -----------------------------------------------------------------------


def test_zero_pencil():
    cfg = TanConfig(3, 1.05, [0.0, 0.0])
    for s in (0.95, 1.0, 1.03):
        sol = pencil_params(cfg, s)
        assert np.allclose(sol.xi, 0) and np.allclose(sol.vv, 0)
    g, gd, gdd = tangent_frame(cfg, 1.0)
    assert np.allclose(g, [0, 0, 1]) and np.allclose(gd, 0) and np.allclose(gdd, 0)


def test_pencil_reference_value():
    cfg = TanConfig(3, 1.05, [1e-3, 1e-3])
    sol = pencil_params(cfg, 1.0)
    lead = -1e-3 / (1.05 * 0.05)
    assert sol.vv[-1] == pytest.approx(lead, rel=1e-2)
    assert sol.vv[-1] == pytest.approx(-1.9052e-2, abs=1e-6)
    assert sol.residuals.max() <= 1e-10


def test_pencil_errors():
    cfg = TanConfig(3, 1.05, [1e-3, 1e-3])
    with pytest.raises(PoleError):
        pencil_params(cfg, 1.05)
    assert issubclass(AmbiguousRootError, ArithmeticError)


@pytest.mark.parametrize("cfg", config_grid(3, 9, seed=2) + config_grid(4, 9, seed=3), ids=lambda c: f"n{c.n}-t{c.t0}-p{np.linalg.norm(c.p):.0e}")
def test_pencil_interpolates_line_and_point(cfg):
    for s in np.linspace(0.95, 1.0 + 0.5 * (cfg.t0 - 1), 50):
        sol = pencil_params(cfg, s)
        assert sol.residuals.max() <= 1e-10
        at_s = simplified_curve(cfg.n, sol.xi, sol.vv, s)
        at_t0 = simplified_curve(cfg.n, sol.xi, sol.vv, cfg.t0)
        assert np.abs(at_s[:-1]).max() <= 1e-10
        assert np.abs(at_t0[:-1] - cfg.p).max() <= 1e-10


def test_config_validation():
    with pytest.raises(ValueError):
        TanConfig(3, 1.0, [1e-3, 1e-3])
    with pytest.raises(ValueError):
        TanConfig(3, 1.2, [1e-3, 1e-3])
    with pytest.raises(ValueError):
        TanConfig(3, 1.05, [0.2, 0.0])
    with pytest.raises(ValueError):
        TanConfig(3, 1.05, [1e-3])


# tangent frame ----------------------------------------------------------------


def sympy_frame_last(t0, q, s0):
    """(g, g', g'') for the x_{n-1} component of the tangent, by implicit differentiation of the cubic."""
    s = sp.Symbol("s")
    w = sp.Function("w")(s)
    a = (t0**2 / s**2 - 1) / 3
    b = t0 * (t0 / s - 1)
    F = a * w**3 - b * w - q
    w1 = sp.solve(sp.diff(F, s), sp.diff(w, s))[0]
    w2 = sp.diff(w1, s).subs(sp.diff(w, s), w1)
    g = w - 2 * t0 * (w / s - w**3 / (3 * s**2))
    g1 = sp.diff(g, s).subs(sp.diff(w, s), w1)
    g2 = sp.diff(g, s, 2).subs(sp.Derivative(w, (s, 2)), w2).subs(sp.diff(w, s), w1)
    return g, g1, g2, w, s


def test_tangent_frame_against_sympy():
    cfg = TanConfig(3, 1.05, [1e-3, 1e-3])
    t0, q = sp.Rational(105, 100), sp.Rational(1, 1000)
    w0 = pencil_params(cfg, 1.0).vv[-1]
    exprs = sympy_frame_last(t0, q, 1)
    g, g1, g2, w, s = exprs
    vals = [float(e.subs(w, w0).subs(s, 1)) for e in (g, g1, g2)]
    frame = tangent_frame(cfg, 1.0)
    # x_1 component: p_1 / (t0 - s) and its s-derivatives
    p1 = 1e-3
    assert frame[0][0] == pytest.approx(p1 / 0.05, rel=1e-6)
    assert frame[1][0] == pytest.approx(p1 / 0.05**2, rel=1e-6)
    assert frame[2][0] == pytest.approx(2 * p1 / 0.05**3, rel=1e-5)
    assert frame[0][1] == pytest.approx(vals[0], rel=1e-10)
    assert frame[1][1] == pytest.approx(vals[1], rel=1e-6)
    assert frame[2][1] == pytest.approx(vals[2], rel=1e-5)
    assert frame[0][-1] == 1.0
    assert np.allclose([frame[1][-1], frame[2][-1]], 0.0, atol=1e-6)


def test_coniness_reference_config():
    cfg = TanConfig(3, 1.05, [1e-3, 1e-3])
    det, lead, rel = coniness_det(cfg)
    assert lead == pytest.approx(3.87e-5, rel=1e-3)
    assert rel <= 0.1 and det > 0


def test_coniness_is_dimension_independent():
    d3 = coniness_det(TanConfig(3, 1.05, [1e-3, 1e-3]))
    d4 = coniness_det(TanConfig(4, 1.05, [0.0, 1e-3, 1e-3]))
    assert d4[1] == d3[1]
    assert d4[0] == pytest.approx(d3[0], rel=1e-8)
    with pytest.raises(ValueError):
        coniness_det(TanConfig(4, 1.05, [1e-3, 1e-3, 1e-3]))


def test_det_scales_like_cube_of_last_coordinate():
    qs = [2e-3 / 2**k for k in range(4)]
    dets = [coniness_det(TanConfig(3, 1.05, [2e-3, q]))[0] for q in qs]
    assert linregress(np.log(qs), np.log(dets)).slope == pytest.approx(3.0, abs=0.1)


def test_grid_is_conic():
    noise = abs(coniness_det(TanConfig(3, 1.05, [0.0, 0.0]))[0])
    for cfg in config_grid(3, 20, seed=0):
        det, lead, _ = coniness_det(cfg)
        assert det > 0 and det > 10 * noise


def test_lines_are_coplanar_on_grid():
    dets = [abs(coniness_det(cfg, family="lines")[0]) for cfg in config_grid(3, 20, seed=0)]
    assert max(dets) <= 1e-14


def test_relative_error_vanishes_with_p():
    radii = [10**-k for k in (2.0, 2.5, 3.0, 3.5)]
    th = np.pi / 5
    rels = [coniness_det(TanConfig(3, 1.05, [r * np.cos(th), r * np.sin(th)]))[2] for r in radii]
    assert linregress(np.log(radii), np.log(rels)).slope >= 0.9


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([1.02, 1.05, 1.08]), st.floats(1e-3, 1e-2), st.floats(np.pi / 8, 3 * np.pi / 8))
def test_det_positive_and_close_to_leading(t0, r, th):
    det, lead, rel = coniness_det(TanConfig(3, t0, [r * np.cos(th), r * np.sin(th)]))
    assert det > 0
    assert leading_det(TanConfig(3, t0, [r * np.cos(th), r * np.sin(th)])) == lead


# illustration maps ------------------------------------------------------------


def test_illustration_anchor_curve_is_exact():
    grid = np.linspace(0.91, 1.09, 41)
    for v0 in ([0.0, 0.0], [0.0, 0.1], [0.05, -0.08]):
        assert illustration_error(3, [0.0, 0.0], v0, v0[-1], grid) <= 1e-10


def test_illustration_order_at_origin():
    slope, _, _ = illustrate_straightening(3, [0.0, 0.0], [0.0, 0.0])
    assert 1.8 <= slope <= 2.2


def test_illustration_order_off_origin():
    slope, _, _ = illustrate_straightening(3, [0.0, 0.0], [0.0, 0.1])
    assert 1.8 <= slope <= 2.2


def test_illustration_matches_straightener():
    ph = tan(3)
    v0 = np.array([0.0, 0.1])
    smap = build_straightening(ph, abc_tan(), np.zeros(2), v0)
    rng = np.random.default_rng(6)
    for _ in range(20):
        x = rng.uniform(-0.1, 0.1, 2)
        t = rng.uniform(0.92, 1.08)
        y, s = smap.F(x[None], np.array([t]))
        assert np.allclose(np.r_[y[0], s[0]], illustration_map(np.r_[x, t], v0[-1]), atol=1e-8)
        xi = rng.uniform(-0.1, 0.1, 2)
        v = v0 + rng.uniform(-0.05, 0.05, 2)
        Xi, V = illustration_line(xi, v, v0[-1])
        assert np.allclose(smap.Xi(xi[None], v[None])[0], Xi, atol=1e-8)
        assert np.allclose(smap.V(xi[None], v[None])[0], V, atol=1e-8)
