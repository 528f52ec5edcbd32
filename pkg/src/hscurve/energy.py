"""The perturbed functional J, its unperturbed part J1 and coercivity of -Delta + h.

On a :class:`DomainGrid` the Dirichlet term is the quadratic form of the
discrete Laplacian, the ``h`` and ``b`` terms use the trapezoid rule and the
singular term goes through :func:`singular_integral`. Every sum is a fixed
linear functional of nodal values, so algebraic identities (scaling, the
split J = J1 + b-term) hold to rounding error and the gradient is exact.

Fields built analytically in Fermi coordinates (see :mod:`test_functions`)
carry their own quadrature; :func:`evaluate_J` dispatches to it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pyamg
from scipy.sparse.linalg import splu

from .domain_quadrature import DomainGrid, singular_rule
from .errors import BadParams, ChartMismatch, SolverStall
from .ground_state import critical_exponent

_EXPR_NAMES = {k: getattr(np, k) for k in ("sin", "cos", "exp", "log", "sqrt", "abs", "tanh",
                                           "minimum", "maximum", "where", "pi")}


@dataclass(frozen=True)
class ScalarField:
    """A constant or a vectorized function of ambient points (M, N) -> (M,)."""

    constant: float | None = None
    fn: Callable | None = None
    label: str = ""

    def __call__(self, y):
        y = np.atleast_2d(y)
        if self.constant is not None:
            return np.full(len(y), self.constant)
        return np.asarray(self.fn(y), dtype=float).reshape(len(y))

    @property
    def is_constant(self):
        return self.constant is not None


def scalar_field(spec) -> ScalarField:
    """From a number, a callable, ``{"constant": c}`` or ``{"expr": "..."}``.

    Expressions see ``y1..yN``, ``r = |y|`` and a few numpy functions.
    """
    if isinstance(spec, ScalarField):
        return spec
    if callable(spec):
        return ScalarField(fn=spec, label=getattr(spec, "__name__", "callable"))
    if isinstance(spec, (int, float)):
        return ScalarField(constant=float(spec), label=str(spec))
    if isinstance(spec, dict):
        if "constant" in spec:
            return ScalarField(constant=float(spec["constant"]), label=str(spec["constant"]))
        if "expr" in spec:
            expr = str(spec["expr"])
            code = compile(expr, "<field>", "eval")

            def fn(y):
                env = dict(_EXPR_NAMES)
                env.update({f"y{k + 1}": y[:, k] for k in range(y.shape[1])})
                env["r"] = np.linalg.norm(y, axis=1)
                return np.broadcast_to(eval(code, {"__builtins__": {}}, env), (len(y),))

            return ScalarField(fn=fn, label=expr)
    raise BadParams(f"cannot build a scalar field from {spec!r}")


@dataclass(frozen=True, eq=False)
class FieldOnGrid:
    """Nodal values on a grid, zero on every node outside the domain."""

    grid: DomainGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise BadParams("field has non-finite values")
        if np.any(v[~self.grid.inside] != 0):
            raise BadParams("field must vanish outside the domain")
        object.__setattr__(self, "values", v)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True, eq=False)
class FunctionalSpec:
    """``(N, sigma, delta, h, b)`` on a domain grid."""

    N: int
    sigma: float
    delta: float
    h: ScalarField
    b: ScalarField
    grid: DomainGrid | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        critical_exponent(self.N, self.sigma)           # validates N and sigma
        if not 0 < self.delta < 4 / (self.N - 2):
            raise BadParams(f"delta must lie in (0, {4 / (self.N - 2):g}), got {self.delta}")
        object.__setattr__(self, "h", scalar_field(self.h))
        object.__setattr__(self, "b", scalar_field(self.b))
        if self.grid is not None:
            if self.grid.N != self.N:
                raise ChartMismatch(f"grid is {self.grid.N}-dimensional, spec has N = {self.N}")
            if np.any(self.b_nodes > 0):
                raise BadParams("b must be <= 0")
        elif self.b.is_constant and self.b.constant > 0:
            raise BadParams("b must be <= 0")

    @property
    def p(self):
        return critical_exponent(self.N, self.sigma)

    def _nodes(self, name, f):
        if name not in self._cache:
            self._cache[name] = f(self.grid.points[self.grid.unknowns])
        return self._cache[name]

    @property
    def h_nodes(self):
        return self._nodes("h", self.h)

    @property
    def b_nodes(self):
        return self._nodes("b", self.b)

    def coercivity(self):
        """Recorded ``lambda_min(-Delta_h + h)``."""
        if "lam" not in self._cache:
            self._cache["lam"] = coercivity_margin(self)
        return self._cache["lam"]


def _values(spec, u):
    g = spec.grid
    if g is None:
        raise BadParams("grid field given but the spec has no grid")
    if isinstance(u, FieldOnGrid):
        if u.grid is not g:
            raise ChartMismatch("field lives on a different grid")
        return u.values
    u = np.asarray(u, dtype=float)
    if u.size != g.inside.size:
        raise ChartMismatch(f"field has {u.size} values, grid has {g.inside.size} nodes")
    return u.reshape(g.shape)


def energy_terms(spec: FunctionalSpec, u) -> dict:
    """``{dirichlet, potential, perturbation, singular, J1, J}``.

    ``perturbation = 1/(2+delta) int b |u|^{2+delta}`` and
    ``singular = 1/p int rho^{-sigma} |u|^p``;
    ``J1 = dirichlet + potential - singular`` and ``J = J1 + perturbation``.
    """
    if hasattr(u, "energy_terms"):
        return u.energy_terms(spec)
    g = spec.grid
    full = _values(spec, u)
    v = g.restrict(full)
    vol = g.cell_volume
    p = spec.p
    dirichlet = 0.5 * vol * float(v @ (g.laplacian() @ v))
    potential = 0.5 * vol * float(spec.h_nodes @ v ** 2)
    pert = vol / (2 + spec.delta) * float(spec.b_nodes @ np.abs(v) ** (2 + spec.delta))
    sing = _singular_form(spec, full.reshape(-1), p) / p
    J1 = dirichlet + potential - sing
    return {"dirichlet": dirichlet, "potential": potential, "perturbation": pert,
            "singular": sing, "J1": J1, "J": J1 + pert}


def _singular_form(spec, ug, p, grad=False):
    """``int rho^{-sigma} |u|^p`` (or its gradient divided by ``p``).

    A grid without a curve is only allowed for ``sigma = 0``, where the
    integral is the plain trapezoid sum.
    """
    g = spec.grid
    if g.curve is None:
        if spec.sigma != 0:
            raise BadParams("sigma > 0 needs a grid built around a curve")
        w = g.cell_volume * g.inside.reshape(-1)
        return w * np.abs(ug) ** (p - 2) * ug if grad else float(w @ np.abs(ug) ** p)
    rule = singular_rule(g, spec.sigma)
    ut = rule.P @ ug
    if not grad:
        return rule.integrate(np.abs(ug) ** p, np.abs(ut) ** p)
    sg = rule.grid_weights.reshape(-1) * np.abs(ug) ** (p - 2) * ug
    return sg + rule.P.T @ (rule.tube_weights * np.abs(ut) ** (p - 2) * ut)


def evaluate_J(spec: FunctionalSpec, u) -> float:
    return energy_terms(spec, u)["J"]


def evaluate_J1(spec: FunctionalSpec, u) -> float:
    return energy_terms(spec, u)["J1"]


def discrete_gradient_J(spec: FunctionalSpec, u, include_singular=True) -> np.ndarray:
    """Gradient of the discrete J with respect to nodal values (full grid array).

    Components at nodes outside the domain are zero.
    """
    g = spec.grid
    full = _values(spec, u)
    v = g.restrict(full)
    vol = g.cell_volume
    d = spec.delta
    grad = vol * (g.laplacian() @ v + spec.h_nodes * v + spec.b_nodes * np.abs(v) ** d * v)
    out = g.extend(grad).reshape(-1)
    if include_singular:
        sg = _singular_form(spec, full.reshape(-1), spec.p, grad=True)
        sg[~g.inside.reshape(-1)] = 0.0
        out -= sg
    return out.reshape(g.shape)


# ---------------------------------------------------------------------------
# coercivity


def _spd_solver(A, tol):
    if A.shape[0] <= 20000:
        lu = splu(A.tocsc())
        return lu.solve
    ml = pyamg.smoothed_aggregation_solver(A.tocsr(), symmetry="symmetric")
    return lambda b: ml.solve(b, tol=tol, accel="cg", maxiter=200)


def coercivity_margin(spec: FunctionalSpec, tol=1e-10, max_iter=200) -> float:
    """Smallest eigenvalue of the discrete ``-Delta + h`` with Dirichlet conditions.

    Inverse power iteration on ``A - s I`` with the Gershgorin shift
    ``s = min h - 1``, which keeps the iterated operator positive definite
    even when ``h`` is very negative.
    """
    g = spec.grid
    A = g.laplacian() + _diag(spec.h_nodes)
    s = float(np.min(spec.h_nodes)) - 1.0
    B = (A - _diag(np.full(A.shape[0], s))).tocsr()
    solve = _spd_solver(B, tol * 1e-2)
    x = np.ones(A.shape[0])
    lam_old = np.inf
    for _ in range(max_iter):
        y = solve(x)
        x = y / np.linalg.norm(y)
        lam = float(x @ (A @ x))
        if abs(lam - lam_old) <= tol * max(1.0, abs(lam)):
            return lam
        lam_old = lam
    raise SolverStall(f"inverse iteration did not settle in {max_iter} steps (last {lam:.8g})")


def _diag(v):
    from scipy import sparse
    return sparse.diags(v)


def integrand_slice(spec: FunctionalSpec, u, axis=-1, index=None) -> dict:
    """Pointwise integrands of J on the mid-plane normal to ``axis`` (for CSV dumps)."""
    g = spec.grid
    full = _values(spec, u)
    if index is None:
        index = g.shape[axis] // 2
    grads = np.gradient(full, g.h)
    dens = {
        "dirichlet": 0.5 * sum(gk ** 2 for gk in grads),
        "potential": 0.5 * spec.h(g.points).reshape(g.shape) * full ** 2,
        "perturbation": spec.b(g.points).reshape(g.shape) * np.abs(full) ** (2 + spec.delta)
        / (2 + spec.delta),
    }
    # nodes on the curve itself are shown at rho = h/4 (display only)
    rho = np.ones(g.shape) if g.curve is None else np.maximum(g.rho, g.h / 4)
    dens["singular"] = np.where(g.inside, rho ** -spec.sigma * np.abs(full) ** spec.p / spec.p, 0.0)
    pts = g.points.reshape(*g.shape, g.N)
    out = {f"y{k + 1}": np.take(pts[..., k], index, axis=axis).ravel() for k in range(g.N)}
    for key, val in dens.items():
        out[key] = np.where(np.take(g.inside, index, axis=axis), np.take(val, index, axis=axis), 0.0).ravel()
    return out
