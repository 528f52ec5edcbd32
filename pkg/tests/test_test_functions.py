import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hscurve import energy as en
from hscurve import ground_state as gs
from hscurve import test_functions as tf
from hscurve.curve_geometry import circle, fermi_map, flat_chart, make_chart
from hscurve.domain_quadrature import ball, build_domain_grid
from hscurve.errors import (BadParams, ChartMismatch, EpsTooLarge, NormalizationMismatch,
                            RegimeMasked)
from hscurve.green_mass import BallRegularPart


@pytest.fixture(scope="module")
def prof3():
    return gs.closed_form_profile(3)


@pytest.fixture(scope="module")
def prof4():
    return gs.closed_form_profile(4)


@pytest.fixture(scope="module")
def chart4():
    return make_chart(circle(1.0, dim=4), 0.0)


@pytest.fixture(scope="module")
def chart3():
    return make_chart(circle(1.0), 0.0)


class ZeroAmbient:
    """``M_amb = 0``: the whole-space Green function ``1/|y|``."""

    y0 = np.zeros(3)
    mass = 0.0

    def value(self, y):
        return np.zeros(len(np.atleast_2d(y)))

    def grad(self, y):
        return np.zeros_like(np.atleast_2d(y))

    def green_normalized(self, y):
        return 1 / np.linalg.norm(np.atleast_2d(y), axis=1)


class CancellingAmbient(ZeroAmbient):
    """``M_amb = -(1 - eta_r)/|y|`` on the flat chart, so that ``M = Gn - eta_r/|x|`` vanishes."""

    def __init__(self, cutoff):
        self.cut = cutoff

    def _parts(self, y):
        y = np.atleast_2d(y)
        t, z = y[:, 0], y[:, 1:]
        rho = np.linalg.norm(z, axis=1)
        return y, t, z, rho, np.linalg.norm(y, axis=1)

    def value(self, y):
        y, t, z, rho, d = self._parts(y)
        return -(1 - self.cut.value(t, rho)) / d

    def grad(self, y):
        y, t, z, rho, d = self._parts(y)
        et, er = self.cut.grad(t, rho)
        om = z / np.where(rho > 0, rho, 1.0)[:, None]
        geta = np.column_stack([et, er[:, None] * om])
        return geta / d[:, None] + ((1 - self.cut.value(t, rho)) / d ** 3)[:, None] * y


# ---------------------------------------------------------------------------
# cutoffs


@pytest.mark.parametrize("kind", ["box", "cylindrical"])
def test_cutoff_sandwich(kind):
    c = tf.CutoffSpec(0.1, kind)
    s = np.linspace(0, 0.3, 61)
    T, R = np.meshgrid(s, s)
    v = c.value(T, R)
    assert v.min() >= 0 and v.max() <= 1
    inner = (T + R <= 0.1) if kind == "cylindrical" else (np.maximum(T, R) <= 0.1)
    assert np.all(v[inner] == 1)
    assert np.all(v[~c.in_support(T, R)] == 0)
    C = c.gradient_constant()
    assert 0 < C < 5
    assert tf.CutoffSpec(0.05, kind).gradient_constant() == pytest.approx(C, rel=1e-6)


@given(st.floats(0, 0.25), st.floats(0, 0.25))
@settings(max_examples=50, deadline=None)
def test_cutoff_gradient_matches_difference(t, rho):
    for kind in ("box", "cylindrical"):
        c = tf.CutoffSpec(0.1, kind)
        d = 1e-6
        gt, gr = c.grad(t, rho)
        # the cylindrical cutoff has a kink across t = 0
        if kind == "box" or t > d:
            assert gt == pytest.approx((c.value(t + d, rho) - c.value(t - d, rho)) / (2 * d), abs=1e-4)
        if rho > d:
            assert gr == pytest.approx((c.value(t, rho + d) - c.value(t, rho - d)) / (2 * d), abs=1e-4)


def test_cutoff_validation():
    with pytest.raises(BadParams):
        tf.CutoffSpec(0.0)
    with pytest.raises(BadParams):
        tf.CutoffSpec(0.1, "ball")


# ---------------------------------------------------------------------------
# u_eps


def test_u_eps_value_at_base_point(chart4, prof4):
    eps = 0.002
    u = tf.build_u_eps(chart4, prof4, tf.CutoffSpec(0.05, "box"), eps)
    w0 = prof4.value(np.array([0.0]), np.array([0.0]))[0]
    assert u.value(chart4.y0[None])[0] == pytest.approx(eps ** ((2 - 4) / 2) * w0, rel=1e-12)


def test_u_eps_support(chart4, prof4):
    cut = tf.CutoffSpec(0.05, "box")
    u = tf.build_u_eps(chart4, prof4, cut, 0.002)
    rng = np.random.default_rng(0)
    x = rng.uniform(-0.12, 0.12, size=(400, 4))
    y = fermi_map(chart4, x)
    v = u.value(y)
    outside = ~cut.in_support(x[:, 0], np.linalg.norm(x[:, 1:], axis=1))
    assert np.all(v[outside] == 0)
    assert np.any(v[~outside] > 0)


def test_u_eps_rejects_bad_inputs(chart4, chart3, prof4):
    cut = tf.CutoffSpec(0.05, "box")
    with pytest.raises(EpsTooLarge):
        tf.build_u_eps(chart4, prof4, cut, 0.01)
    with pytest.raises(ChartMismatch):
        tf.build_u_eps(chart3, prof4, cut, 0.001)
    u = tf.build_u_eps(chart4, prof4, cut, 0.001)
    with pytest.raises(ChartMismatch):
        u.energy_terms(en.FunctionalSpec(4, 0.5, 1.0, 0.0, 0.0))


def test_singular_integral_tends_to_profile(chart4, prof4):
    r = 0.1
    u = tf.build_u_eps(chart4, prof4, tf.CutoffSpec(r, "box"), r / 50)
    T = u.energy_terms(en.FunctionalSpec(4, 1.0, 1.0, 0.0, 0.0))
    B = tf.reference_energy(prof4)["B"]
    assert T["singular"] * prof4.p == pytest.approx(B, rel=0.05)


def test_flat_chart_cutoff_error_rate(prof4):
    # on a straight line only the cutoff perturbs the energy, by O((eps/r)^{N-2})
    ch = flat_chart(4, 1.0)
    sp = en.FunctionalSpec(4, 1.0, 1.0, 0.0, 0.0)
    ex = [tf.build_u_eps(ch, prof4, tf.CutoffSpec(0.1, "box"), e).energy_terms(sp)["J1_excess"]
          for e in (1e-3, 1e-4)]
    assert ex[0] > 0 and ex[1] > 0
    assert np.log10(ex[0] / ex[1]) == pytest.approx(2.0, abs=0.1)
    assert tf.reference_energy(prof4)["E_ref"] == pytest.approx(gs.exact_level_sigma1(4), rel=1e-12)


def test_u_eps_sample_on_grid(prof3):
    curve = circle(0.5)
    g = build_domain_grid(ball(1.0), curve, 0.04)
    ch = make_chart(curve, 0.0)
    u = tf.build_u_eps(ch, prof3, tf.CutoffSpec(0.1, "box"), 0.01)
    f = u.sample(g)
    assert isinstance(f, en.FieldOnGrid)
    k = np.argmax(f.values)
    assert f.values.ravel()[k] == pytest.approx(u.value(g.points[k][None])[0])
    assert np.all(f.values[g.rho > 0.2 * np.sqrt(2) + 1e-9] == 0)


# ---------------------------------------------------------------------------
# perturbation term


def test_perturbation_zero_b(chart4, prof4):
    assert tf.perturbation_term(chart4, prof4, 0.0, 1e-3, 1.0) == 0.0


def test_perturbation_exponent_n4(chart4, prof4):
    eps = 1e-3 * np.geomspace(1, 1e-2, 5)
    vals = [tf.perturbation_term(chart4, prof4, -1.0, e, 1.0, tf.CutoffSpec(0.1, "box")) for e in eps]
    A, alpha, _ = tf.fit_power(eps, vals)
    assert alpha == pytest.approx(1.0, abs=0.1)
    assert A == pytest.approx(-tf.profile_moment(prof4, 3.0), rel=0.02)


def test_perturbation_exponent_n3(chart3, prof3):
    # the truncation deficit is O((eps/r)^{1/2}) relative, so eps/r must be tiny
    eps = 1e-4 * np.geomspace(1, 1e-3, 4)
    vals = [tf.perturbation_term(chart3, prof3, -1.0, e, 1.5, tf.CutoffSpec(0.1, "box")) for e in eps]
    _, alpha, _ = tf.fit_power(eps, vals)
    assert alpha == pytest.approx(1.25, abs=0.1)


def test_perturbation_nonconstant_b_matches_constant(chart4, prof4):
    cut = tf.CutoffSpec(0.1, "box")
    a = tf.perturbation_term(chart4, prof4, -2.0, 1e-3, 1.0, cut)
    b = tf.perturbation_term(chart4, prof4, lambda y: -2.0 + 0 * y[:, 0], 1e-3, 1.0, cut)
    assert b == pytest.approx(a, rel=1e-6)


# ---------------------------------------------------------------------------
# expansions for N >= 4


@pytest.fixture(scope="module")
def perturbed_fit(chart4, prof4):
    sp = en.FunctionalSpec(4, 1.0, 1.0, 0.0, -1.0)
    return tf.fit_prop31(sp, chart4, prof4, 0.2 * np.geomspace(1e-2, 1e-4, 7), tf.CutoffSpec(0.2, "box"))


def test_perturbed_fit_exponent_and_sign(perturbed_fit):
    f = perturbed_fit
    assert f.alpha == pytest.approx(f.alpha_predicted, abs=0.1)
    assert f.extras["all_below"]
    assert np.all(np.isfinite(f.J_values))


def test_perturbed_fit_coefficient_of_perturbation_term(perturbed_fit):
    f = perturbed_fit
    assert f.extras["A_fixed"] == pytest.approx(f.extras["A_derived"], rel=0.02)
    assert f.extras["fixed_residual"] < 0.1


def test_perturbed_fit_resolution_doubling(chart4, prof4, perturbed_fit):
    sp = en.FunctionalSpec(4, 1.0, 1.0, 0.0, -1.0)
    f2 = tf.fit_prop31(sp, chart4, prof4, perturbed_fit.eps_list, tf.CutoffSpec(0.2, "box"), resolution=2)
    assert abs(f2.alpha - perturbed_fit.alpha) < 0.05


def test_perturbed_fit_vanishing_coefficient(chart4, prof4):
    y0 = chart4.y0
    b = lambda y: -np.sum((y - y0) ** 2, axis=1)
    sp = en.FunctionalSpec(4, 1.0, 1.0, 0.0, b)
    f = tf.fit_prop31(sp, chart4, prof4, 0.1 * np.geomspace(1e-2, 1e-3, 4), tf.CutoffSpec(0.1, "box"))
    assert f.extras["b_y0"] == 0.0
    lead = np.abs(f.extras["perturbation"]) / f.eps_list
    # what remains is of higher order than eps^alpha
    assert np.all(np.diff(lead) < 0) and lead[-1] < 1e-3 * tf.profile_moment(prof4, 3.0)


def test_perturbed_fit_regime_masked(chart4, prof4):
    sp = en.FunctionalSpec(4, 1.0, 0.05, 0.0, -1.0)
    with pytest.raises(RegimeMasked):
        tf.fit_prop31(sp, chart4, prof4, [1e-3, 5e-4, 2.5e-4])
    with pytest.raises(BadParams):
        tf.fit_prop31(en.FunctionalSpec(3, 1.0, 1.0, 0.0, -1.0), make_chart(circle(1.0)),
                      gs.closed_form_profile(3), [1e-3, 5e-4, 2.5e-4])


def test_expansion_fit_requires_decreasing_eps():
    with pytest.raises(BadParams):
        tf.ExpansionFit([1e-3, 2e-3], [1.0, 1.0], 1.0, "m", 0, 0, 0, 0, 0)


# ---------------------------------------------------------------------------
# Psi_eps (N = 3)


def test_psi_reduces_to_u_eps(prof3):
    ch = flat_chart(3, 1.0)
    r, eps = 0.1, 2e-3
    cut = tf.CutoffSpec(r, "cylindrical")
    psi = tf.build_psi_eps(ch, prof3, CancellingAmbient(cut), eps, r, variant="cutoff")
    u = tf.build_u_eps(ch, prof3, cut, eps)
    rng = np.random.default_rng(2)
    t = rng.uniform(-0.2, 0.2, 30)
    z = rng.uniform(-0.2, 0.2, (30, 2))
    np.testing.assert_allclose(psi.chart_value(t, z), u.chart_value(t, np.linalg.norm(z, axis=1)),
                               atol=1e-12)
    sp = en.FunctionalSpec(3, 1.0, 1.0, 0.0, 0.0)
    a, b = psi.energy_terms(sp), u.energy_terms(sp)
    assert a["J1_excess"] == pytest.approx(b["J1_excess"], rel=1e-3, abs=1e-9)


def test_psi_two_term_formula(prof3):
    ch = flat_chart(3, 1.0)
    r, eps = 0.05, 1e-3
    mf = BallRegularPart(np.zeros(3))
    psi = tf.build_psi_eps(ch, prof3, mf, eps, r, variant="cutoff")
    rng = np.random.default_rng(5)
    t = rng.uniform(-0.2, 0.2, 40)
    z = rng.uniform(-0.2, 0.2, (40, 2))
    rho = np.linalg.norm(z, axis=1)
    x = np.column_stack([t, z])
    ax = np.linalg.norm(x, axis=1)
    cut = tf.CutoffSpec(r, "cylindrical")
    M = mf.green_normalized(x) - cut.value(t, rho) / ax
    w = prof3.value(t / eps, rho / eps)
    expect = eps ** -0.5 * cut.value(t, rho) * w + eps ** 0.5 * prof3.c_infinity * cut.scaled(2).value(t, rho) * M
    np.testing.assert_allclose(psi.chart_value(t, z), expect, rtol=1e-10, atol=1e-12)


def test_psi_far_field(prof3):
    ch = flat_chart(3, 1.0)
    r, eps = 0.05, 1e-4
    mf = BallRegularPart(np.zeros(3))
    c = prof3.c_infinity
    lit = tf.build_psi_eps(ch, prof3, mf, eps, r, variant="cutoff")
    grn = tf.build_psi_eps(ch, prof3, mf, eps, r, variant="green")
    far = np.array([[0.5, 0.0, 0.0], [0.0, 0.3, 0.3], [-0.25, 0.0, 0.1]])
    assert np.all(lit.value(far) == 0)
    np.testing.assert_allclose(grn.value(far), np.sqrt(eps) * c * mf.green_normalized(far), rtol=1e-12)
    # on the annulus Q_2r \ Q_r the profile tail matches eps^{1/2} c Gn
    ann = np.array([[0.06, 0.02, 0.0], [0.0, 0.05, 0.04], [-0.03, 0.0, 0.05]])
    np.testing.assert_allclose(grn.value(ann), np.sqrt(eps) * c * mf.green_normalized(ann), rtol=0.02)


def test_psi_normalization_and_dimension(prof3, prof4, chart4):
    ch = flat_chart(3, 1.0)
    mf = BallRegularPart(np.zeros(3))
    with pytest.raises(NormalizationMismatch):
        tf.build_psi_eps(ch, prof3, mf, 1e-3, 0.05, c_norm=1.02 * prof3.c_infinity)
    with pytest.raises(ChartMismatch):
        tf.build_psi_eps(chart4, prof4, mf, 1e-3, 0.05)
    with pytest.raises(ChartMismatch):
        tf.build_psi_eps(ch, prof3, BallRegularPart(np.array([0.1, 0, 0])), 1e-3, 0.05)


@pytest.fixture(scope="module")
def ball_center_fit(prof3):
    sp = en.FunctionalSpec(3, 1.0, 1.0, 0.0, 0.0)
    eps = 0.05 * np.geomspace(4e-2, 5e-3, 4)
    return tf.fit_prop42(sp, flat_chart(3, 1.0), prof3, BallRegularPart(np.zeros(3)), eps, 0.05)


def test_psi_mass_coefficient(ball_center_fit):
    f = ball_center_fit
    # m = -1: the excess is positive and linear in eps with coefficient 2 pi c^2
    assert np.all(f.excess > 0)
    assert f.A == pytest.approx(f.extras["A_derived"], rel=0.03)


def test_psi_mass_term_sign_flip(prof3):
    # reversing the sign of the mass reverses the linear term
    class Pos(ZeroAmbient):
        mass = 1.0

        def value(self, y):
            return np.ones(len(np.atleast_2d(y)))

    sp = en.FunctionalSpec(3, 1.0, 1.0, 0.0, 0.0)
    psi = tf.build_psi_eps(flat_chart(3, 1.0), prof3, Pos(), 5e-4, 0.05)
    T = psi.energy_terms(sp)
    assert T["J1"] < T["E_ref"]


def test_psi_dominant_perturbation_exponent(prof3):
    sp = en.FunctionalSpec(3, 1.0, 3.0, 0.0, -1.0)
    eps = 0.05 * np.geomspace(1e-2, 1e-4, 4)
    f = tf.fit_prop42(sp, flat_chart(3, 1.0), prof3, ZeroAmbient(), eps, 0.05)
    assert f.alpha == pytest.approx(0.5, abs=0.1)
    assert f.extras["B"] == pytest.approx(f.extras["B_predicted"], rel=0.25)


def test_psi_fit_regime_masked(prof3):
    sp = en.FunctionalSpec(3, 1.0, 2.05, 0.0, -1.0)
    with pytest.raises(RegimeMasked):
        tf.fit_prop42(sp, flat_chart(3, 1.0), prof3, ZeroAmbient(), [5e-3, 2.5e-3, 1.25e-3], 0.05)


# ---------------------------------------------------------------------------
# bubble limit


def test_bubble_limit(prof3):
    probe = np.array([[0.0, 1.0, 0.0]])
    rep = tf.verify_bubble_limit(prof3, [1e-1, 3e-2, 1e-2], probe)
    assert rep["decreasing"] and rep["below_tol"]
    assert rep["deviation"][-1] < 0.05


def test_bubble_limit_self_similar(prof3):
    x = np.array([[0.3, 0.8, 0.2]])
    a = tf.verify_bubble_limit(prof3, [1e-2], x)["abs_deviation"][0]
    b = tf.verify_bubble_limit(prof3, [5e-3], x / 2)["abs_deviation"][0]
    assert b == pytest.approx(2 * a, rel=1e-8)


def test_bubble_limit_axis_probe_rejected(prof3):
    with pytest.raises(BadParams):
        tf.verify_bubble_limit(prof3, [1e-2], [[0.5, 0.0, 0.0]])


# ---------------------------------------------------------------------------
# independent check of the chart energy against the exact metric


def _direct_J1(chart, prof, cut, eps, sphere_order):
    from hscurve.rules import gauss_panels, geometric_breaks, sphere_rule
    N, p, r = prof.N, prof.p, cut.r
    tn, tw = gauss_panels(geometric_breaks(0, 2 * r, eps / 4, 1.6, (r,)), 12)
    tn, tw = np.r_[-tn[::-1], tn], np.r_[tw[::-1], tw]
    rn, rw = gauss_panels(geometric_breaks(0, 2 * r, eps * 1e-7, 1.6, (r, eps)), 12)
    om, wo = sphere_rule(N - 2, sphere_order)
    s = chart.base_t + tn
    Tg, E, dE = chart.curve.tangent(s), chart.frame.evaluate(s), chart.frame.derivative(s)
    z = rn[:, None, None] * om[None]
    tot = 0.0
    for i in range(len(tn)):
        dt = Tg[i] + np.einsum("rok,kd->rod", z, dE[i])
        J = np.concatenate([dt[:, :, None, :], np.broadcast_to(E[i], (len(rn), len(wo)) + E[i].shape)], axis=2)
        g = np.einsum("road,robd->roab", J, J)
        U, Ut, Ur = tf._flat(prof, eps, np.full(len(rn), tn[i]), rn)
        e = cut.value(tn[i], rn)
        et, er = cut.grad(np.full(len(rn), tn[i]), rn)
        grad = np.zeros((len(rn), len(wo), N))
        grad[..., 0] = (et * U + e * Ut)[:, None]
        grad[..., 1:] = (er * U + e * Ur)[:, None, None] * om[None]
        d = 0.5 * np.einsum("roa,roab,rob->ro", grad, np.linalg.inv(g), grad) - ((e * U) ** p / rn)[:, None] / p
        tot += tw[i] * np.sum(d * np.sqrt(np.linalg.det(g)) * wo[None] * (rw * rn ** (N - 2))[:, None])
    return tot


@pytest.mark.parametrize("N", [3, 4])
def test_chart_energy_matches_exact_metric(N):
    from hscurve.curve_geometry import trefoil_like
    curve = trefoil_like() if N == 3 else circle(1.0, dim=4)
    prof = gs.closed_form_profile(N)
    ch = make_chart(curve, 0.2)
    r = ch.r_max / 2.2
    cut = tf.CutoffSpec(r, "box")
    T = tf.build_u_eps(ch, prof, cut, r / 10).energy_terms(en.FunctionalSpec(N, 1.0, 0.5, 0.0, 0.0))
    direct = _direct_J1(ch, prof, cut, r / 10, 32 if N == 3 else 8)
    assert abs(T["J1"] - direct) < 1e-6 * abs(T["J1_excess"])
