import numpy as np
import pytest

from hscurve import domain_quadrature as dq
from hscurve.curve_geometry import circle, distance_to_curve, trefoil_like
from hscurve.errors import BadParams, CurveTooCloseToBoundary, NotConverged


@pytest.fixture(scope="module")
def torus_grid():
    return dq.build_domain_grid(dq.ball(2.0), circle(1.0), 0.05)


def _torus_rho(y, R=1.0):
    return np.hypot(np.hypot(y[:, 0], y[:, 1]) - R, y[:, 2])


def test_concentric_ball_clearance():
    g = dq.build_domain_grid(dq.ball(3.0), circle(1.0), 0.1)
    assert g.clearance == pytest.approx(2.0, abs=1e-9)
    assert g.r_tube == pytest.approx(min(0.25 * g.r_injectivity, 5 * g.h))


def test_halving_spacing_doubles_cells():
    a = dq.build_domain_grid(dq.ball(1.0), None, 0.1)
    b = dq.build_domain_grid(dq.ball(1.0), None, 0.05)
    assert b.n_cells == 2 * a.n_cells


def test_curve_outside_domain_rejected():
    with pytest.raises(CurveTooCloseToBoundary):
        dq.build_domain_grid(dq.ball(1.0), circle(1.2), 0.05)
    with pytest.raises(CurveTooCloseToBoundary):
        dq.build_domain_grid(dq.ball(1.05), circle(1.0), 0.02)


def test_rho_field(torus_grid):
    g = torus_grid
    pts = g.points[g.unknowns]
    rho = g.rho.ravel()[g.unknowns]
    assert np.all(rho >= 0)
    np.testing.assert_allclose(rho, _torus_rho(pts), atol=1e-8)
    # rho vanishes only next to the curve
    assert np.all(rho[rho < 1e-12] < g.h)
    assert np.any(g.near_tube) and np.any(g.boundary_layer)


def test_boundary_nodes_are_outside(torus_grid):
    g = torus_grid
    assert not np.any(g.inside[0]) and not np.any(g.inside[-1])
    assert np.all(g.cut_theta > 0) and np.all(g.cut_theta <= 1)


def test_laplacian_symmetric_positive():
    g = dq.build_domain_grid(dq.ball(1.0), None, 0.2)
    L = g.laplacian()
    assert abs(L - L.T).max() < 1e-12
    assert np.min(np.linalg.eigvalsh(L.toarray())) > 0


def test_tube_nodes_distance_identity(torus_grid):
    for curve in (circle(1.0), trefoil_like()):
        tube = dq.build_tube_grid(curve, 0.1, n_s=64)
        sel = np.random.default_rng(3).choice(len(tube.points), 1000, replace=False)
        err = np.abs(distance_to_curve(curve, tube.points[sel]) - tube.rho[sel])
        assert err.max() < 1e-7


def test_torus_shell_volume(torus_grid):
    a, b = 0.02, 0.1
    shell = lambda y: ((_torus_rho(y) > a) & (_torus_rho(y) < b)).astype(float)
    vol = dq.singular_integral(torus_grid, shell, 0.0, 2)
    assert vol == pytest.approx(2 * np.pi ** 2 * (b * b - a * a), rel=0.01)


def test_outside_tube_plain_sum(torus_grid):
    g = torus_grid

    def far(y):
        return np.exp(-np.sum((y - [0, 0, 1.2]) ** 2, axis=1) / 0.02)

    u = g.sample(far)
    assert np.all(u[g.rho < g.r_tube] < 1e-15)
    m = g.inside & (g.rho >= g.r_tube)
    direct = g.cell_volume * np.sum(g.rho[m] ** -1.0 * u[m] ** 2)
    assert dq.singular_integral(g, u, 1.0, 2) == pytest.approx(direct, rel=1e-12)


def test_sigma_continuity(torus_grid):
    bump = lambda y: np.exp(-(_torus_rho(y) / 0.3) ** 2)
    u = torus_grid.sample(bump)
    plain = torus_grid.cell_volume * np.sum(u ** 2)
    assert dq.singular_integral(torus_grid, u, 1e-3, 2) == pytest.approx(plain, rel=0.01)
    # exact value of the sigma = 0 integral on a torus (Pappus)
    exact = 2 * np.pi * np.pi * 0.09 / 2
    assert dq.singular_integral(torus_grid, bump, 0.0, 2) == pytest.approx(exact, rel=0.01)


def test_singular_integral_resolution_check(torus_grid):
    bump = lambda y: np.exp(-(_torus_rho(y) / 0.3) ** 2)
    v = dq.singular_integral(torus_grid, bump, 1.5, 2, check=True)
    assert np.isfinite(v) and v > 0
    # a blob much shorter than the tube spacing along the curve
    spike = lambda y: (np.linalg.norm(y - [1.0, 0.0, 0.0], axis=1) < 0.018).astype(float)
    with pytest.raises(NotConverged):
        dq.singular_integral(torus_grid, spike, 1.9, 2, check=True)


def test_sigma_out_of_range(torus_grid):
    with pytest.raises(BadParams):
        dq.singular_integral(torus_grid, torus_grid.sample(lambda y: 1 + 0 * y[:, 0]), 2.0, 2)


def test_interp_matrix_reproduces_linear(torus_grid):
    g = torus_grid
    lin = lambda y: 1 + y[:, 0] - 2 * y[:, 1] + 0.5 * y[:, 2]
    full = lin(g.points).reshape(g.shape)
    y = np.random.default_rng(0).uniform(-1.5, 1.5, size=(200, 3))
    np.testing.assert_allclose(g.interp_matrix(y) @ full.ravel(), lin(y), atol=1e-12)
