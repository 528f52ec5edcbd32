"""Dirichlet Green function of -Delta + h in three dimensions, its regular part and mass.

``Gn`` denotes the Green function normalized to a unit singularity,
``Gn(y) = 1/|y - y0| + M(y)``, which is ``4 pi`` times the solution of
``(-Delta + h) G = delta_{y0}``. The mass is ``m(y0) = M(y0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pyamg
from scipy import sparse
from scipy.optimize import brentq
from scipy.sparse.linalg import bicgstab, splu

from .domain_quadrature import DomainGrid, _edge_crossing, build_domain_grid
from .energy import FunctionalSpec, coercivity_margin, scalar_field
from .errors import BadParams, GridTooCoarse, NoConvergence, NonCoercive, SolverStall


@dataclass(frozen=True)
class BallRegularPart:
    """Exact ``M`` for ``h = 0`` in the ball ``|y - center| < radius`` (image charge)."""

    y0: np.ndarray
    radius: float = 1.0
    center: np.ndarray = None

    def __post_init__(self):
        c = np.zeros(3) if self.center is None else np.asarray(self.center, float)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "y0", np.asarray(self.y0, float))

    def _image(self):
        a = self.y0 - self.center
        na = np.linalg.norm(a)
        if na < 1e-14:
            return None, None
        return self.center + self.radius ** 2 * a / na ** 2, self.radius / na

    def value(self, y):
        y = np.atleast_2d(y)
        star, q = self._image()
        if star is None:
            return np.full(len(y), -1.0 / self.radius)
        return -q / np.linalg.norm(y - star, axis=1)

    def grad(self, y):
        y = np.atleast_2d(y)
        star, q = self._image()
        if star is None:
            return np.zeros_like(y)
        d = y - star
        return q * d / np.linalg.norm(d, axis=1)[:, None] ** 3

    @property
    def mass(self):
        return float(self.value(self.y0)[0])

    def green_normalized(self, y):
        y = np.atleast_2d(y)
        return 1 / np.linalg.norm(y - self.y0, axis=1) + self.value(y)


# ---------------------------------------------------------------------------
# discrete Green function


@dataclass(frozen=True, eq=False)
class GreenMassResult:
    """Green function of ``-Delta + h`` with pole ``y0`` and its mass.

    ``G`` is the discrete solution with a unit Dirac load, so its singular
    part is ``1/(4 pi |y - y0|)``. ``mass`` is the extrapolated value when
    several grids were solved and the single-grid shell estimate otherwise.
    """

    y0: np.ndarray
    grids: list
    h_values: list
    grid: DomainGrid
    G: np.ndarray
    mass_per_grid: list
    mass: float
    error_estimate: float = np.nan
    order: float = np.nan
    regularity_report: dict = field(default_factory=dict)
    positivity_violations: int = 0
    normalization: float = 1 / (4 * np.pi)
    regular: np.ndarray | None = None

    @property
    def G_samples(self):
        return self.G

    @property
    def green_normalized_grid(self):
        return 4 * np.pi * self.G

    def summary(self) -> dict:
        return {"y0": self.y0.tolist(), "resolutions": list(self.grids),
                "h": list(self.h_values), "per_grid_mass": list(self.mass_per_grid),
                "mass": self.mass, "error_estimate": self.error_estimate,
                "order": self.order, "positivity_violations": self.positivity_violations,
                "regularity": self.regularity_report}


def _h_nodes(grid, h_field):
    hf = scalar_field(h_field)
    return hf(grid.points[grid.unknowns]), hf


def shortley_weller(grid: DomainGrid):
    """Shortley-Weller ``-Delta_h`` on the inside nodes (non-symmetric).

    Arms that cross ``dOmega`` are shortened to the crossing point. Returns
    ``(A, bpts, brow, bcoef)``: for Dirichlet data ``g`` the discrete problem
    is ``A v = f + B g`` with ``B g = bincount(brow, bcoef * g(bpts))``.
    """
    if "sw" in grid._cache:
        return grid._cache["sw"]
    flat_in = grid.inside.ravel()
    pts = grid.points
    m = len(grid.unknowns)
    pos = -np.ones(flat_in.size, dtype=np.int64)
    pos[grid.unknowns] = np.arange(m)
    idx = np.arange(flat_in.size).reshape(grid.shape)
    arms = np.ones((m, grid.N, 2))
    links, cuts = [], []
    for k in range(grid.N):
        step = np.zeros(grid.N)
        for side, sgn in enumerate((-1, 1)):
            step[k] = sgn * grid.h
            rng = np.arange(grid.shape[k] - 1)
            a = np.take(idx, rng + 1 if sgn == -1 else rng, axis=k).ravel()
            b = np.take(idx, rng if sgn == -1 else rng + 1, axis=k).ravel()
            keep = flat_in[a]
            a, b = a[keep], b[keep]
            inb = flat_in[b]
            cut = ~inb
            th = _edge_crossing(grid.domain, pts[a[cut]], pts[b[cut]])
            arms[pos[a[cut]], k, side] = np.maximum(th, 1e-3)
            links.append((pos[a[inb]], pos[b[inb]], k, side))
            cuts.append((pos[a[cut]], pts[a[cut]] + th[:, None] * step, k, side))
            # inside nodes on the last grid layer see a ghost one cell out
            end = np.take(idx, [0 if sgn == -1 else grid.shape[k] - 1], axis=k).ravel()
            end = end[flat_in[end]]
            cuts.append((pos[end], pts[end] + step, k, side))
    arms *= grid.h
    diag = np.sum(2 / (arms[:, :, 0] * arms[:, :, 1]), axis=1)

    def coef(r, k, side):
        a0, a1 = arms[r, k, side], arms[r, k, 1 - side]
        return 2 / (a0 * (a0 + a1))

    rows = np.concatenate([l[0] for l in links])
    cols = np.concatenate([l[1] for l in links])
    vals = np.concatenate([-coef(*l[:1], *l[2:]) for l in links])
    A = (sparse.coo_matrix((vals, (rows, cols)), shape=(m, m)) + sparse.diags(diag)).tocsr()
    brow = np.concatenate([c[0] for c in cuts])
    bpts = np.concatenate([c[1] for c in cuts])
    bcoef = np.concatenate([coef(c[0], c[2], c[3]) for c in cuts])
    out = (A, bpts, brow, bcoef)
    grid._cache["sw"] = out
    return out


def _solve(A, rhs, tol, precond=None):
    if A.shape[0] <= 20000:
        return splu(A.tocsc()).solve(rhs)
    ml = pyamg.smoothed_aggregation_solver(precond.tocsr(), symmetry="symmetric")
    x, info = bicgstab(A, rhs, rtol=tol, atol=0.0, maxiter=500, M=ml.aspreconditioner())
    if info != 0:
        raise SolverStall(f"BiCGSTAB did not reach relative residual {tol:g} (info {info})")
    return x


_CUBE_MEAN_INV_R = 2.380077364     # int over the unit cube centred at 0 of 1/|x|


def solve_green(grid: DomainGrid, h_field, y0, tol=1e-10, check_coercive=True) -> GreenMassResult:
    """Solve ``(-Delta + h) G = delta_{y0}`` with ``G = 0`` on ``dOmega``.

    Writes ``4 pi G = 1/|x| + M`` (``x = y - y0``) and, with
    ``S = h(y0) |x| / 2`` taking out the kink of ``M`` at the pole, solves the
    Shortley-Weller discretization of
    ``(-Delta + h)(M - S) = -(h - h(y0))/|x| - h S`` with ``M = -1/|x|`` on
    ``dOmega``. Nothing singular is left in the discrete problem. ``mass``
    is the trilinear interpolant of ``M`` at ``y0``.
    """
    if grid.N != 3:
        raise BadParams("Green functions are only built in three dimensions")
    y0 = np.asarray(y0, dtype=float)
    if not grid.domain.contains(y0[None])[0]:
        raise BadParams("y0 must lie inside the domain")
    if grid.domain.boundary_distance(y0[None])[0] < 8 * grid.h:
        raise BadParams("y0 must be at least 8 cells away from the boundary")
    hv, hf = _h_nodes(grid, h_field)
    H = sparse.diags(hv)
    L, bpts, brow, bcoef = shortley_weller(grid)
    if check_coercive and not (hf.is_constant and hf.constant >= 0):
        lam = coercivity_margin(FunctionalSpec(3, 0.0, 1.0, hf, 0.0, grid=grid))
        if lam <= 0:
            raise NonCoercive(f"lambda_min(-Delta + h) = {lam:.4g} <= 0 on the grid")
    x, idx = _offsets(grid, y0)
    r = np.linalg.norm(x, axis=1)
    R = np.where(r > 1e-12 * grid.h, 1 / np.maximum(r, 1e-300), _CUBE_MEAN_INV_R / grid.h)
    h0 = float(hf(y0[None])[0])
    S = 0.5 * h0 * r
    rb = np.linalg.norm(bpts - y0, axis=1)
    g = -1 / rb - 0.5 * h0 * rb
    dh = np.where(r > 1e-12 * grid.h, (hv - h0) * R, 0.0)
    rhs = -dh - hv * S + np.bincount(brow, bcoef * g, minlength=len(R))
    M = grid.extend(_solve((L + H).tocsr(), rhs, tol, grid.laplacian() + H) + S)
    G = grid.extend(R) / (4 * np.pi) + M / (4 * np.pi)
    G[~grid.inside] = 0.0
    # nodes lying on dOmega itself carry G of rounding size
    bad = int(np.sum(G[grid.inside] < -1e-9 * np.max(np.abs(M))))
    m = float((grid.interp_matrix(y0[None]) @ M.ravel())[0])
    return GreenMassResult(y0=y0, grids=[grid.n_cells], h_values=[grid.h], grid=grid, G=G,
                           mass_per_grid=[m], mass=m, positivity_violations=bad, regular=M)


def _offsets(grid, y0):
    pts = grid.points[grid.unknowns]
    return pts - y0, grid.unknowns


def shell_mass(grid, G, y0, shell=(3.0, 5.0)) -> float:
    """Weighted average of ``4 pi G - 1/|x|`` over the shell ``shell[0] h <= |x| <= shell[1] h``.

    The weight is a smooth bump in ``|x|/h``, which keeps the lattice sum from
    jumping as nodes enter and leave the shell. The lattice correction to
    ``1/|x|`` is a cubic harmonic at leading order and averages out, while
    nodes within two cells of the pole are left out.
    """
    x, idx = _offsets(grid, y0)
    r = np.linalg.norm(x, axis=1)
    a, b = shell
    s = (r / grid.h - a) / (b - a)
    sel = (s > 0) & (s < 1)
    w = np.sin(np.pi * s[sel]) ** 4
    M = 4 * np.pi * G.ravel()[idx[sel]] - 1 / r[sel]
    return float(np.sum(w * M) / np.sum(w))


def regular_part(result: GreenMassResult, eta_r=None) -> dict:
    """``M(x) = 4 pi G(y0 + x) - eta_r(x)/|x|`` on the nodes of the finest grid.

    ``eta_r`` is a radius (the cutoff ``chi(|x|/eta_r)``) or ``None`` for no
    cutoff. Returns offsets, values and a finite-difference report of the
    gradient of ``M`` between 3 and 8 cells from the pole.
    """
    g = result.grid
    x, idx = _offsets(g, result.y0)
    r = np.linalg.norm(x, axis=1)
    eta = np.ones_like(r) if eta_r is None else _chi(r / eta_r)
    # 4 pi G - eta/|x| = M + (1 - eta)/|x|, finite at the pole node
    far = (1 - eta) / np.maximum(r, 1e-300)
    M = result.regular.ravel()[idx] + np.where(eta < 1, far, 0.0)
    return {"x": x, "r": r, "M": M, "report": _c1_report(g, result.regular, result.y0)}


def _chi(s):
    from .test_functions import chi
    return chi(s)


def _c1_report(grid, M, y0):
    """Largest finite-difference slope of ``M`` within 8 cells of the pole."""
    r = np.linalg.norm(grid.points - y0, axis=1).reshape(grid.shape)
    band = grid.inside & (r <= 8 * grid.h)
    slope = 0.0
    for k in range(3):
        a = np.take(band, np.arange(grid.shape[k] - 1), axis=k) & np.take(band, np.arange(1, grid.shape[k]), axis=k)
        d = np.diff(M, axis=k) / grid.h
        if np.any(a):
            slope = max(slope, float(np.max(np.abs(d[a]))))
    return {"h": grid.h, "max_grad": slope}


def richardson(h_values, estimates, default_order=2.0):
    """Extrapolate ``m(h) = m + C h^q`` from three or more grids.

    Returns ``(value, error_estimate, order, monotone)``. The order is
    fitted from the three finest grids and clamped to ``[1, 4]``. When the
    last two differences alternate in sign (the cut-cell boundary error is
    not a smooth function of ``h``) the finest estimate is returned with
    the last difference as its error. Raises :class:`NoConvergence` when the
    last difference exceeds twice what first-order convergence allows.
    """
    h = np.asarray(h_values, dtype=float)
    m = np.asarray(estimates, dtype=float)
    o = np.argsort(-h)
    h, m = h[o], m[o]
    if len(h) < 3:
        raise BadParams("Richardson extrapolation needs at least three grids")
    h1, h2, h3 = h[-3:]
    m1, m2, m3 = m[-3:]
    d12, d23 = m1 - m2, m2 - m3
    tiny = 1e-9 * max(abs(m3), 1.0)
    # the differences must at least shrink like a first-order method would
    if abs(d23) > 2 * abs(d12) * (h2 - h3) / (h1 - h2) + tiny:
        raise NoConvergence(f"grid estimates are not Cauchy: {m.tolist()}")
    if abs(d23) <= tiny:
        return float(m3), float(abs(d23)), default_order, True
    if d12 * d23 < 0:
        return float(m3), float(abs(d23)), np.nan, False
    f = lambda q: (h1 ** q - h2 ** q) / (h2 ** q - h3 ** q) - d12 / d23
    try:
        q = brentq(f, 0.25, 8.0)
    except ValueError:
        q = default_order
    q = float(np.clip(q, 1.0, 4.0))
    ext = m3 - d23 * h3 ** q / (h2 ** q - h3 ** q)
    return float(ext), float(abs(ext - m3)), q, True


def mass(domain, h_field, y0, resolutions=(48, 64, 96), curve=None, tol=1e-10) -> GreenMassResult:
    """``m(y0)`` from the regular part at ``y0`` on several grids and Richardson extrapolation.

    ``resolutions`` count cells across the widest side of the bounding box.
    The returned result holds the finest grid and its Green function.
    """
    if len(resolutions) < 3:
        raise BadParams("at least three resolutions are needed")
    width = float(np.max(_bbox_width(domain)))
    res = sorted(int(n) for n in resolutions)
    per, hs, reports = [], [], []
    last = None
    for i, n in enumerate(res):
        grid = build_domain_grid(domain, curve, width / n)
        last = solve_green(grid, h_field, y0, tol=tol, check_coercive=(i == 0))
        per.append(last.mass)
        hs.append(grid.h)
        reports.append(_c1_report(grid, last.regular, last.y0))
    ext, err, q, monotone = richardson(hs, per)
    report = {"per_grid": reports, "monotone": monotone,
              "max_grad_spread": max(r["max_grad"] for r in reports) - min(r["max_grad"] for r in reports)}
    return GreenMassResult(y0=last.y0, grids=res, h_values=hs, grid=last.grid, G=last.G,
                           mass_per_grid=per, mass=ext, error_estimate=err, order=q,
                           regularity_report=report, positivity_violations=last.positivity_violations,
                           regular=last.regular)


def _bbox_width(domain):
    if domain.kind == "ball":
        return np.full(domain.N, 2 * domain.radius)
    if domain.kind == "box":
        return domain.hi - domain.lo
    return 2 * np.asarray(domain.semi_axes)


# ---------------------------------------------------------------------------
# smooth regular part for test functions


class GridRegularPart:
    """Polynomial fit of the solved ``M = Gn - 1/|y - y0|`` near the pole.

    The least-squares fit uses the nodes within ``radius`` of ``y0`` and is
    shifted so that ``value(y0)`` equals the (extrapolated) mass. Far from
    the pole :meth:`green_normalized` interpolates the grid values.
    """

    def __init__(self, result: GreenMassResult, radius, degree=4):
        g = result.grid
        self.y0 = result.y0
        self.grid = g
        self.green_grid = 4 * np.pi * result.G
        self.radius = float(radius)
        self.degree = int(degree)
        x, idx = _offsets(g, self.y0)
        sel = np.linalg.norm(x, axis=1) <= self.radius
        if sel.sum() < 4 * len(self._exponents()):
            raise GridTooCoarse("too few nodes in the fitting ball for the regular part")
        M = result.regular.ravel()[idx[sel]]
        V = self._design(x[sel])
        self.coef, *_ = np.linalg.lstsq(V, M, rcond=None)
        self.fit_residual = float(np.sqrt(np.mean((V @ self.coef - M) ** 2)))
        self.coef[0] = result.mass
        self.mass = float(result.mass)

    def _exponents(self):
        d = self.degree
        return [(i, j, k) for i in range(d + 1) for j in range(d + 1 - i) for k in range(d + 1 - i - j)]

    def _design(self, x):
        s = x / self.radius
        return np.stack([s[:, 0] ** i * s[:, 1] ** j * s[:, 2] ** k for i, j, k in self._exponents()], axis=1)

    def value(self, y):
        return self._design(np.atleast_2d(y) - self.y0) @ self.coef

    def grad(self, y):
        s = (np.atleast_2d(y) - self.y0) / self.radius
        out = np.zeros_like(s)
        for c, (i, j, k) in zip(self.coef, self._exponents()):
            if i:
                out[:, 0] += c * i * s[:, 0] ** (i - 1) * s[:, 1] ** j * s[:, 2] ** k
            if j:
                out[:, 1] += c * j * s[:, 0] ** i * s[:, 1] ** (j - 1) * s[:, 2] ** k
            if k:
                out[:, 2] += c * k * s[:, 0] ** i * s[:, 1] ** j * s[:, 2] ** (k - 1)
        return out / self.radius

    def green_normalized(self, y):
        y = np.atleast_2d(y)
        r = np.linalg.norm(y - self.y0, axis=1)
        near = r < self.radius
        out = self.grid.interp_matrix(y) @ self.green_grid.ravel()
        out[near] = 1 / r[near] + self.value(y[near])
        return out
