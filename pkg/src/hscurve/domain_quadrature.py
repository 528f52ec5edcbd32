"""Uniform grids on bounded domains and quadrature of the singular weight.

A :class:`DomainGrid` is a uniform Cartesian grid over the bounding box of
``Omega`` with an inside mask. Edges that leave ``Omega`` are cut at the
boundary crossing, which enters the discrete Laplacian as a diagonal
correction (linear extrapolation to zero at the crossing).

Integrals of ``rho_Gamma^{-sigma} |u|^p`` split with a smooth partition of
unity ``psi(rho)``: the trapezoid rule handles ``(1 - psi) f`` on the grid and
a :class:`TubeGrid` in Fermi coordinates around the whole curve handles
``psi f``, where the weight is singular.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .curve_geometry import (ClosedCurve, arclength_reparametrize, build_frame, closest_point,
                             estimate_injectivity_radius)
from .errors import BadParams, CurveTooCloseToBoundary, NotConverged
from .rules import gauss_panels, geometric_breaks, sphere_rule


def smooth_ramp(x):
    """Quintic ``C^2`` step: 1 for ``x <= 0``, 0 for ``x >= 1``."""
    x = np.clip(x, 0.0, 1.0)
    return 1 - x ** 3 * (10 - 15 * x + 6 * x * x)


def smooth_ramp_deriv(x):
    inside = (x > 0) & (x < 1)
    x = np.clip(x, 0.0, 1.0)
    return np.where(inside, -30 * x * x * (1 - x) ** 2, 0.0)


# ---------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class Domain:
    """``Omega = {phi < 0}`` for a ball, a box or an ellipsoid."""

    kind: str
    N: int
    center: np.ndarray
    radius: float = 1.0
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    semi_axes: np.ndarray | None = None

    def level(self, y):
        y = np.atleast_2d(y)
        if self.kind == "ball":
            return np.sum((y - self.center) ** 2, axis=1) - self.radius ** 2
        if self.kind == "box":
            return np.max(np.maximum(self.lo - y, y - self.hi), axis=1)
        return np.sum(((y - self.center) / self.semi_axes) ** 2, axis=1) - 1.0

    def bbox(self):
        if self.kind == "ball":
            return self.center - self.radius, self.center + self.radius
        if self.kind == "box":
            return self.lo.copy(), self.hi.copy()
        return self.center - self.semi_axes, self.center + self.semi_axes

    def boundary_distance(self, y):
        """Distance to ``dOmega`` from interior points (first-order estimate for ellipsoids)."""
        y = np.atleast_2d(y)
        if self.kind == "ball":
            return self.radius - np.linalg.norm(y - self.center, axis=1)
        if self.kind == "box":
            return np.min(np.minimum(y - self.lo, self.hi - y), axis=1)
        q = (y - self.center) / self.semi_axes
        grad = 2 * q / self.semi_axes
        return -self.level(y) / np.linalg.norm(grad, axis=1)

    def contains(self, y):
        return self.level(y) < 0


def ball(radius=1.0, N=3, center=None) -> Domain:
    c = np.zeros(N) if center is None else np.asarray(center, dtype=float)
    return Domain("ball", N, c, float(radius))


def box(lo, hi) -> Domain:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return Domain("box", len(lo), 0.5 * (lo + hi), lo=lo, hi=hi)


def ellipsoid(semi_axes, center=None) -> Domain:
    a = np.asarray(semi_axes, dtype=float)
    c = np.zeros(len(a)) if center is None else np.asarray(center, dtype=float)
    return Domain("level-set", len(a), c, semi_axes=a)


def domain_from_config(cfg: dict, N: int) -> Domain:
    kind = cfg.get("type", "ball")
    if kind == "ball":
        return ball(float(cfg.get("radius", 1.0)), N, cfg.get("center"))
    if kind == "box":
        return box(cfg["lo"], cfg["hi"])
    if kind in ("level-set", "ellipsoid"):
        return ellipsoid(cfg["semi_axes"], cfg.get("center"))
    raise BadParams(f"unknown domain type {kind!r}")


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True, eq=False)
class DomainGrid:
    """Uniform grid over the bounding box of ``domain``.

    Nodes with ``phi < 0`` carry unknowns; every other node is a Dirichlet
    node with value zero. ``cut_nodes``/``cut_theta`` list, for each edge from
    an inside node to an outside one, the inside node and the fraction of the
    edge before the boundary.
    """

    domain: Domain
    lo: np.ndarray
    h: float
    shape: tuple
    inside: np.ndarray
    cut_nodes: np.ndarray
    cut_theta: np.ndarray
    curve: ClosedCurve | None = None
    rho: np.ndarray | None = None
    r_tube: float = 0.0
    clearance: float = np.inf
    r_injectivity: float = np.inf
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def N(self):
        return len(self.shape)

    @property
    def n_cells(self):
        return self.shape[0] - 1

    @property
    def cell_volume(self):
        return self.h ** self.N

    @property
    def axes(self):
        return [self.lo[k] + self.h * np.arange(n) for k, n in enumerate(self.shape)]

    @property
    def points(self):
        if "points" not in self._cache:
            mesh = np.meshgrid(*self.axes, indexing="ij")
            self._cache["points"] = np.stack([m.ravel() for m in mesh], axis=1)
        return self._cache["points"]

    @property
    def unknowns(self):
        """Flat indices of the inside nodes."""
        if "unknowns" not in self._cache:
            self._cache["unknowns"] = np.flatnonzero(self.inside.ravel())
        return self._cache["unknowns"]

    @property
    def boundary_layer(self):
        """Inside nodes with at least one cut edge."""
        m = np.zeros(self.inside.size, dtype=bool)
        m[self.cut_nodes] = True
        return m.reshape(self.shape)

    @property
    def near_tube(self):
        if self.rho is None:
            return np.zeros(self.shape, dtype=bool)
        return self.rho < self.r_tube

    def laplacian(self):
        """``-Delta_h`` on the inside nodes (sparse, symmetric positive definite)."""
        if "lap" in self._cache:
            return self._cache["lap"]
        n = self.inside.size
        flat_in = self.inside.ravel()
        pos = -np.ones(n, dtype=np.int64)
        pos[self.unknowns] = np.arange(len(self.unknowns))
        idx = np.arange(n).reshape(self.shape)
        rows, cols = [], []
        for k in range(self.N):
            a = np.take(idx, np.arange(self.shape[k] - 1), axis=k).ravel()
            b = np.take(idx, np.arange(1, self.shape[k]), axis=k).ravel()
            both = flat_in[a] & flat_in[b]
            rows.append(pos[a[both]])
            cols.append(pos[b[both]])
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        m = len(self.unknowns)
        off = sparse.coo_matrix((-np.ones(len(r)), (r, c)), shape=(m, m))
        off = off + off.T
        deg_in = -np.asarray(off.sum(axis=1)).ravel()
        diag = deg_in + np.bincount(pos[self.cut_nodes], weights=1 / self.cut_theta, minlength=m)
        L = ((off + sparse.diags(diag)) / self.h ** 2).tocsr()
        self._cache["lap"] = L
        return L

    def restrict(self, u):
        """Values of a full grid array at the unknowns."""
        return np.asarray(u).reshape(-1)[self.unknowns]

    def extend(self, v):
        """Full grid array from values at the unknowns (zero elsewhere)."""
        u = np.zeros(self.inside.size)
        u[self.unknowns] = v
        return u.reshape(self.shape)

    def interp_matrix(self, y):
        """Sparse multilinear interpolation from grid nodes to points ``y``."""
        y = np.atleast_2d(y)
        q = (y - self.lo) / self.h
        base = np.floor(q).astype(np.int64)
        ok = np.all((base >= 0) & (base < np.array(self.shape) - 1), axis=1)
        base = np.clip(base, 0, np.array(self.shape) - 2)
        f = q - base
        rows, cols, vals = [], [], []
        strides = np.array([int(np.prod(self.shape[k + 1:])) for k in range(self.N)])
        for corner in itertools.product((0, 1), repeat=self.N):
            c = np.array(corner)
            w = np.prod(np.where(c == 1, f, 1 - f), axis=1) * ok
            rows.append(np.arange(len(y)))
            cols.append((base + c) @ strides)
            vals.append(w)
        P = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(len(y), self.inside.size))
        return P

    def sample(self, fn):
        """Evaluate ``fn(points)`` at the inside nodes, zero elsewhere."""
        v = np.asarray(fn(self.points[self.unknowns]), dtype=float)
        return self.extend(v)

    def to_csv(self, path, values=None):
        cols = [self.points[self.unknowns]]
        names = [f"y{k + 1}" for k in range(self.N)]
        if self.rho is not None:
            cols.append(self.rho.ravel()[self.unknowns][:, None])
            names.append("rho")
        if values is not None:
            cols.append(self.restrict(values)[:, None])
            names.append("u")
        np.savetxt(path, np.hstack(cols), delimiter=",", header=",".join(names), comments="")


def _edge_crossing(domain, a, b, iters=60):
    """Fraction along segments ``a -> b`` (a inside, b outside) where ``phi = 0``."""
    lo = np.zeros(len(a))
    hi = np.ones(len(a))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        inside = domain.level(a + mid[:, None] * (b - a)) < 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return 0.5 * (lo + hi)


def build_domain_grid(domain: Domain, curve: ClosedCurve | None = None, h_grid=0.05,
                      r_tube=None, min_clearance_cells=4.0) -> DomainGrid:
    """Grid with spacing close to ``h_grid`` and, if a curve is given, its
    distance field and tube radius ``min(r_max/2, 5 h)``.

    Raises :class:`CurveTooCloseToBoundary` when the curve comes closer than
    ``min_clearance_cells * h`` to ``dOmega``.
    """
    N = domain.N
    blo, bhi = domain.bbox()
    width = float(np.max(bhi - blo))
    n = max(int(round(width / h_grid)), 4)
    h = width / n
    # cube grid centred on the bounding box
    mid = 0.5 * (blo + bhi)
    lo = mid - 0.5 * width
    shape = (n + 1,) * N
    mesh = np.meshgrid(*[lo[k] + h * np.arange(n + 1) for k in range(N)], indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    inside_flat = domain.level(pts) < 0
    inside = inside_flat.reshape(shape)

    idx = np.arange(pts.shape[0]).reshape(shape)
    cut_nodes, cut_theta = [], []
    for k in range(N):
        for sgn in (1, -1):
            rng = np.arange(shape[k] - 1)
            a = np.take(idx, rng if sgn == 1 else rng + 1, axis=k).ravel()
            b = np.take(idx, rng + 1 if sgn == 1 else rng, axis=k).ravel()
            sel = inside_flat[a] & ~inside_flat[b]
            a, b = a[sel], b[sel]
            cut_nodes.append(a)
            cut_theta.append(_edge_crossing(domain, pts[a], pts[b]))
        # inside nodes on the box faces see the (outside) face beyond them
        for end in (0, shape[k] - 1):
            a = np.take(idx, [end], axis=k).ravel()
            a = a[inside_flat[a]]
            cut_nodes.append(a)
            cut_theta.append(np.ones(len(a)))
    cut_nodes = np.concatenate(cut_nodes)
    cut_theta = np.maximum(np.concatenate(cut_theta), 1e-3)

    grid = DomainGrid(domain, lo, h, shape, inside, cut_nodes, cut_theta)
    if curve is None:
        return grid
    if curve.ambient_dim != N:
        raise BadParams(f"curve lives in R^{curve.ambient_dim}, domain in R^{N}")
    curve = arclength_reparametrize(curve)
    _, cpts = curve.sample(512)
    if not np.all(domain.contains(cpts)):
        raise CurveTooCloseToBoundary("curve leaves the domain")
    clearance = float(np.min(domain.boundary_distance(cpts)))
    if clearance < min_clearance_cells * h:
        raise CurveTooCloseToBoundary(f"clearance {clearance:.4g} below {min_clearance_cells} cells ({h:.4g})")
    frame = build_frame(curve, "rmf", n_samples=1024)
    r_inj = estimate_injectivity_radius(curve, frame)
    if r_tube is None:
        r_tube = min(0.25 * r_inj, 5 * h)
    rho = np.full(pts.shape[0], np.inf)
    rho[inside_flat] = closest_point(curve, pts[inside_flat])[0]
    return DomainGrid(domain, lo, h, shape, inside, cut_nodes, cut_theta, curve,
                      rho.reshape(shape), float(r_tube), clearance, float(r_inj))


# ---------------------------------------------------------------------------
# tube quadrature


@dataclass(frozen=True, eq=False)
class TubeGrid:
    """Quadrature on ``{rho_Gamma < r_tube}`` in Fermi coordinates along the whole curve.

    Nodes ``F(s, rho omega)`` with weights ``ds * w_rho * rho^{N-2} * w_omega * sqrt|g|``
    where ``sqrt|g| = 1 + z . kappa(s)`` exactly.
    """

    curve: ClosedCurve
    r_tube: float
    s: np.ndarray
    rho_nodes: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    rho: np.ndarray
    sqrtdet: np.ndarray
    resolution: tuple


def build_tube_grid(curve: ClosedCurve, r_tube, n_s=None, order=6, n_omega=16, h_hint=None,
                    n_radial=20) -> TubeGrid:
    curve = arclength_reparametrize(curve)
    L = curve.length
    N = curve.ambient_dim
    if n_s is None:
        step = r_tube / 2 if h_hint is None else min(r_tube / 2, h_hint)
        n_s = max(64, int(np.ceil(L / step)))
    frame = build_frame(curve, "rmf", n_samples=max(1024, 4 * n_s))
    s = L * (np.arange(n_s) + 0.5) / n_s
    # geometric panels resolve the rho^{N-2-sigma} endpoint behaviour; uniform
    # panels further out keep the rule robust for rough integrands
    rn1, rw1 = gauss_panels(geometric_breaks(0.0, r_tube / 8, r_tube * 1e-4, 2.0), order)
    rn2, rw2 = gauss_panels(np.linspace(r_tube / 8, r_tube, n_radial + 1), 4)
    rn, rw = np.concatenate([rn1, rn2]), np.concatenate([rw1, rw2])
    om, ow = sphere_rule(N - 2, n_omega)
    E = frame.evaluate(s)                      # (n_s, N-1, N)
    kap = frame.curvatures(s)                  # (n_s, N-1)
    g = curve.point(s)
    z = rn[:, None, None] * om[None, :, :]     # (n_rho, n_om, N-1)
    pts = g[:, None, None, :] + np.einsum("rok,skd->srod", z, E)
    sq = 1 + np.einsum("rok,sk->sro", z, kap)
    w = (L / n_s) * (rw * rn ** (N - 2))[None, :, None] * ow[None, None, :] * sq
    rho = np.broadcast_to(rn[None, :, None], sq.shape)
    return TubeGrid(curve, float(r_tube), s, rn, pts.reshape(-1, N), w.ravel(), rho.ravel().copy(),
                    sq.ravel(), (n_s, order, n_omega))


def partition_weight(rho, r_tube):
    """``psi``: 1 for ``rho <= r_tube/2``, 0 for ``rho >= r_tube``, ``C^2`` between."""
    return smooth_ramp(2 * np.asarray(rho) / r_tube - 1)


@dataclass(frozen=True, eq=False)
class SingularRule:
    """Linear-in-values form of ``int rho^{-sigma} f``: grid weights plus tube
    nodes reached through the interpolation matrix ``P``."""

    grid_weights: np.ndarray      # on grid nodes (full array, zero where unused)
    P: sparse.csr_matrix
    tube_weights: np.ndarray
    tube: TubeGrid

    def integrate(self, f_grid, f_tube):
        return float(self.grid_weights.ravel() @ f_grid.ravel() + self.tube_weights @ f_tube)


def singular_rule(grid: DomainGrid, sigma, tube: TubeGrid | None = None, refine=1) -> SingularRule:
    if grid.curve is None:
        raise BadParams("grid was built without a curve")
    key = ("srule", float(sigma), refine)
    if tube is None and key in grid._cache:
        return grid._cache[key]
    if tube is None:
        tube = build_tube_grid(grid.curve, grid.r_tube, n_omega=16 * refine, h_hint=grid.h / refine,
                               n_radial=20 * refine)
    psi_grid = partition_weight(grid.rho, grid.r_tube)
    used = grid.inside & (psi_grid < 1)
    wg = np.zeros(grid.shape)
    wg[used] = grid.cell_volume * (1 - psi_grid[used]) * grid.rho[used] ** (-sigma)
    wt = tube.weights * partition_weight(tube.rho, tube.r_tube) * tube.rho ** (-sigma)
    rule = SingularRule(wg, grid.interp_matrix(tube.points), wt, tube)
    grid._cache[key] = rule
    return rule


def singular_integral(grid: DomainGrid, u, sigma, p, check=False, tube: TubeGrid | None = None):
    """``int_Omega rho_Gamma^{-sigma} |u|^p``.

    ``u`` is a grid array (interpolated multilinearly into the tube) or a
    callable of ambient points, evaluated exactly at every node. With
    ``check=True`` the tube quadrature is doubled in resolution and
    :class:`NotConverged` raised if the value moves by more than 2%.
    """
    if not 0 <= sigma < 2:
        raise BadParams(f"sigma must lie in [0, 2), got {sigma}")

    def value(rule):
        if callable(u):
            fg = np.zeros(grid.inside.size)
            fg[grid.unknowns] = np.abs(u(grid.points[grid.unknowns])) ** p
            ft = np.abs(u(rule.tube.points)) * grid.domain.contains(rule.tube.points)
            return rule.integrate(fg, ft ** p)
        ug = np.asarray(u, dtype=float).reshape(-1)
        return rule.integrate(np.abs(ug) ** p, np.abs(rule.P @ ug) ** p)

    val = value(singular_rule(grid, sigma, tube))
    if check:
        fine = value(singular_rule(grid, sigma, refine=2))
        if abs(fine - val) > 0.02 * abs(fine):
            raise NotConverged(f"tube refinement moved the integral from {val:.6g} to {fine:.6g}")
    return val
