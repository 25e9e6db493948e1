import numpy as np
import pytest

from cklab.phase_core import check_abc, check_bourgain, eval_jet, sample_domain
from cklab.phases import (
    abc_bochner_riesz,
    builtin,
    canonical_abc,
    load_phase_toml,
    phase_from_table,
    rest,
    tan,
    worst,
)


def test_builtin_names_and_aliases():
    assert builtin("br", 3).tag == "bochner_riesz"
    assert builtin("tan", 4).n == 4
    with pytest.raises(KeyError):
        builtin("nope")
    with pytest.raises(ValueError):
        worst(4)
    with pytest.raises(ValueError):
        tan(2)


def test_origins_are_normalized():
    # grad_xi phi vanishes at the origin of tan and rest
    for ph in (rest(3), tan(3)):
        x, t, xi = ph.origin
        assert np.allclose(eval_jet(ph, x, t, xi, 1).grad_xi(), 0)


def test_canonical_abc_lookup():
    assert canonical_abc(tan(3)).name == "tan"
    with pytest.raises(KeyError):
        canonical_abc(worst(3))


def test_bochner_riesz_b_matrix():
    B = abc_bochner_riesz().B(np.array([0.3, 0.4]), np.zeros(2))
    assert np.allclose(B, np.eye(2) - np.outer([0.3, 0.4], [0.3, 0.4]))


def test_table_with_terms_reproduces_rest():
    # x.xi + t |xi|^2 / 2 written out as monomials over (x1, x2, t, xi1, xi2)
    table = {
        "n": 3,
        "terms": [
            {"coef": 1.0, "powers": [1, 0, 0, 1, 0]},
            {"coef": 1.0, "powers": [0, 1, 0, 0, 1]},
            {"coef": 0.5, "powers": [0, 0, 1, 2, 0]},
            {"coef": 0.5, "powers": [0, 0, 1, 0, 2]},
        ],
    }
    ph = phase_from_table(table)
    ref = rest(3)
    for x, t, xi in sample_domain(ref, 5, seed=1):
        assert np.allclose(list(eval_jet(ph, x, t, xi, 3).partials.values()), list(eval_jet(ref, x, t, xi, 3).partials.values()))


def test_table_base_plus_perturbation_and_fd(tmp_path):
    path = tmp_path / "p.toml"
    path.write_text(
        """
[phase]
n = 3
base = "tan"
name = "tan plus cubic"
fd = true
terms = [{coef = 0.01, powers = [1, 0, 0, 0, 2]}]
"""
    )
    ph = load_phase_toml(path)
    assert not ph.exact and ph.name == "tan plus cubic"
    x, t, xi = [0.02, 0.01], 1.0, [0.05, 0.02]
    jet = eval_jet(ph, x, t, xi, 2)
    ref = eval_jet(tan(3), x, t, xi, 2)
    # d_x1 d_xi2 of 0.01 x1 xi2^2 is 0.02 xi2
    assert jet[(0, 4)] - ref[(0, 4)] == pytest.approx(0.02 * xi[1], abs=1e-7)


def test_table_rejects_bad_terms_and_degenerate_phase(tmp_path):
    with pytest.raises(ValueError):
        phase_from_table({"n": 3, "terms": [{"coef": 1.0, "powers": [1, 0]}]})
    # phi = t xi1 xi2 has a zero mixed x-block: curves are not graphs over t
    with pytest.raises(ValueError):
        phase_from_table({"n": 3, "validate": True, "terms": [{"coef": 1.0, "powers": [0, 0, 1, 1, 1]}]})
    path = tmp_path / "empty.toml"
    path.write_text("x = 1\n")
    with pytest.raises(ValueError):
        load_phase_toml(path)


def test_user_phase_checks_run():
    ph = phase_from_table({"n": 3, "base": "rest", "terms": [{"coef": 0.1, "powers": [0, 0, 2, 1, 1]}]})
    rep = check_bourgain(ph, [0.0, 0.0], 0.1, [0.1, 0.0])
    assert np.isfinite(rep.bourgain_residual)


@pytest.mark.parametrize("make", [rest, tan])
def test_canonical_triples_hold_everywhere(make):
    ph = make(3)
    abc = canonical_abc(ph)
    assert max(check_abc(ph, abc, x, t, xi).residual for x, t, xi in sample_domain(ph, 20, seed=9)) <= 1e-12
