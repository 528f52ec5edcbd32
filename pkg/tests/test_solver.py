import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hscurve import energy as en
from hscurve import ground_state as gs
from hscurve import solver as sv
from hscurve import test_functions as tf
from hscurve.curve_geometry import circle, make_chart
from hscurve.domain_quadrature import ball, build_domain_grid
from hscurve.errors import BadParams, Collapse, NonCoercive

C2 = 0.7          # stand-in for the delta = 2 threshold constant

TRUTH_TABLE = [
    (dict(N=4, sigma=1.0, delta=1.0, b_at_y0=-1.0), "satisfied"),
    (dict(N=4, sigma=1.0, delta=1.0, b_at_y0=0.0, m_at_y0=3.0), "boundary-case"),
    (dict(N=5, sigma=0.5, delta=0.5, b_at_y0=-0.2), "satisfied"),
    (dict(N=3, sigma=1.0, delta=1.0, b_at_y0=0.0, m_at_y0=0.3), "satisfied"),
    (dict(N=3, sigma=1.0, delta=1.0, b_at_y0=-1.0, m_at_y0=0.3), "satisfied"),
    (dict(N=3, sigma=0.0, delta=1.5, b_at_y0=-1.0, m_at_y0=-0.3), "not-satisfied"),
    (dict(N=3, sigma=1.0, delta=0.5, b_at_y0=-1.0, m_at_y0=0.0), "boundary-case"),
    (dict(N=3, sigma=1.0, delta=2.0, b_at_y0=-1.0, m_at_y0=-C2, derived_constant=C2), "boundary-case"),
    (dict(N=3, sigma=1.0, delta=2.0, b_at_y0=-1.0, m_at_y0=0.0, derived_constant=C2), "satisfied"),
    (dict(N=3, sigma=1.0, delta=2.0, b_at_y0=-1.0, m_at_y0=-2 * C2, derived_constant=C2), "not-satisfied"),
    (dict(N=3, sigma=1.5, delta=3.0, b_at_y0=-1.0, m_at_y0=-5.0), "satisfied"),
    (dict(N=3, sigma=1.0, delta=3.0, b_at_y0=0.0, m_at_y0=5.0), "boundary-case"),
]


@pytest.mark.parametrize("case,expected", TRUTH_TABLE)
def test_criterion_truth_table(case, expected):
    assert sv.existence_criterion(sv.CriterionInput(**case)) == expected


def test_criterion_input_validation():
    with pytest.raises(BadParams):
        sv.CriterionInput(N=3, sigma=1.0, delta=1.0, b_at_y0=0.5)
    with pytest.raises(BadParams):
        sv.CriterionInput(N=4, sigma=1.0, delta=2.5, b_at_y0=-1.0)
    with pytest.raises(BadParams):
        sv.existence_criterion(sv.CriterionInput(N=3, sigma=1.0, delta=2.0, b_at_y0=-1.0))


def test_delta2_constant():
    prof = gs.closed_form_profile(3)
    d, p = sv.delta2_constant(prof), sv.delta2_constant(prof, "literal")
    assert d > 0 and p > 0
    assert d / p == pytest.approx(np.pi / 2)


def test_compare_levels():
    assert sv.compare_levels(0.9, 1.0, 0.02) == "strict"
    assert sv.compare_levels(0.999, 1.0, 0.01) == "inconclusive"
    with pytest.raises(BadParams):
        sv.compare_levels(0.9, 1.0, -1.0)


@given(D=st.floats(0.1, 10), P=st.floats(-5, 0), B=st.floats(0.1, 10), delta=st.floats(0.1, 1.9))
@settings(max_examples=100, deadline=None)
def test_ray_maximizer_is_stationary(D, P, B, delta):
    p = 4.0
    terms = {"dirichlet": D, "potential": 0.0, "perturbation": P, "singular": B}
    level, lam = sv.ray_level(terms, delta, p)
    J = lambda l: l * l * D + l ** (2 + delta) * P - l ** p * B
    e = 1e-6 * lam
    assert abs(J(lam + e) - J(lam - e)) / (2 * e) < 1e-6 * max(1.0, abs(2 * D * lam))
    assert level >= J(0.5 * lam) and level >= J(1.5 * lam)


def test_ray_maximizer_errors():
    with pytest.raises(NonCoercive):
        sv.ray_maximizer({"dirichlet": -1.0, "potential": 0.0, "perturbation": 0.0, "singular": 1.0}, 1.0, 4.0)
    with pytest.raises(Collapse):
        sv.ray_maximizer({"dirichlet": 1.0, "potential": 0.0, "perturbation": 0.0, "singular": 0.0}, 1.0, 4.0)


@pytest.fixture(scope="module")
def setup3():
    curve = circle(0.5)
    g = build_domain_grid(ball(1.0), curve, 0.08)
    prof = gs.closed_form_profile(3)
    init = tf.UEps(make_chart(curve, 0.0), prof, tf.CutoffSpec(0.2, "box"), 0.1)
    return g, prof, init


@pytest.fixture(scope="module")
def run3(setup3):
    g, prof, init = setup3
    sp = en.FunctionalSpec(3, 1.0, 1.0, 0.0, -1.0, grid=g)
    return sv.mountain_pass_estimate(sp, init, S_ref=np.pi ** 2 / 8, max_iter=300)


def test_descent_monotone_and_stationary(run3):
    h = np.array(run3.history)
    assert np.all(np.diff(h) <= 0)
    assert run3.ray_residual < 1e-6
    assert run3.converged


def test_minimizer_nonnegative_with_zero_boundary(run3):
    v = run3.minimizer_field.values
    g = run3.minimizer_field.grid
    assert np.all(v >= 0)
    assert np.all(v[~g.inside] == 0)


def test_descent_improves_on_initial_test_function(setup3, run3):
    g, prof, init = setup3
    sp = en.FunctionalSpec(3, 1.0, 1.0, 0.0, -1.0, grid=g)
    start = sv.ray_level(en.energy_terms(sp, init.sample(g)), 1.0, sp.p)[0]
    assert run3.mu_estimate < start


def test_deterministic(setup3, run3):
    g, prof, init = setup3
    sp = en.FunctionalSpec(3, 1.0, 1.0, 0.0, -1.0, grid=g)
    again = sv.mountain_pass_estimate(sp, init, S_ref=np.pi ** 2 / 8, max_iter=300)
    assert again.mu_estimate == run3.mu_estimate
    assert np.array_equal(again.minimizer_field.values, run3.minimizer_field.values)


def test_random_bump_seeded(setup3):
    g = setup3[0]
    a = sv.random_bump(g, [0, 0, 0], 0.2, seed=3)
    b = sv.random_bump(g, [0, 0, 0], 0.2, seed=3)
    c = sv.random_bump(g, [0, 0, 0], 0.2, seed=4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.all(a >= 0) and np.all(a[~g.inside] == 0)


def test_curve_centered_start_beats_bump_away_from_curve(setup3, run3):
    g = setup3[0]
    sp = en.FunctionalSpec(3, 1.0, 1.0, 0.0, -1.0, grid=g)
    bump = sv.random_bump(g, [0, 0, 0.0], 0.15, seed=1)
    level = sv.ray_level(en.energy_terms(sp, bump), 1.0, sp.p)[0]
    assert level > run3.mu_estimate


def test_zero_initial_field_rejected(setup3):
    g = setup3[0]
    sp = en.FunctionalSpec(3, 1.0, 1.0, 0.0, 0.0, grid=g)
    with pytest.raises(BadParams):
        sv.mountain_pass_estimate(sp, np.zeros(g.shape))


@pytest.fixture(scope="module")
def unperturbed3():
    curve = circle(0.5)
    g = build_domain_grid(ball(1.0), curve, 0.05)
    prof = gs.closed_form_profile(3)
    init = tf.UEps(make_chart(curve, 0.0), prof, tf.CutoffSpec(0.2, "box"), 0.05)
    sp = en.FunctionalSpec(3, 1.0, 1.0, 0.0, 0.0, grid=g)
    start = sv.ray_level(en.energy_terms(sp, init.sample(g)), 1.0, sp.p)[0]
    return start, sv.mountain_pass_estimate(sp, init, S_ref=np.pi ** 2 / 8, max_iter=300)


@pytest.mark.xfail(strict=True, reason="grid-scale concentration keeps the discrete level well above S")
def test_unperturbed_level_within_ten_percent(unperturbed3):
    res = unperturbed3[1]
    print(f"unperturbed level {res.mu_estimate:.6g}, S {res.S_ref:.6g}, ratio {res.mu_estimate / res.S_ref:.4f}")
    assert abs(res.mu_estimate / res.S_ref - 1) < 0.1


def test_unperturbed_level_bracketed(unperturbed3):
    start, res = unperturbed3
    assert res.S_ref < res.mu_estimate < start
    assert res.verdict == "inconclusive"
