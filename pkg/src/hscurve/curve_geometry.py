"""Closed curves, normal frames, Fermi charts and metric jets.

Curves are truncated Fourier series in each ambient coordinate, so every
derivative with respect to the raw parameter ``u`` is analytic. After
:func:`arclength_reparametrize` all geometric methods take arclength ``s``.

Sign convention: the curvature coefficients are ``kappa_i = E_i' . gamma'``,
which equals ``-gamma'' . E_i``. For a circle of radius R with E_2 the inward
normal this gives ``kappa_2 = -1/R``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DegenerateCurve, FrenetDegenerate, OutOfChart, ResidualUnderflow

TWO_PI = 2 * np.pi

FRAME_KINDS = {
    "frenet": "frenet",
    "frenet-derived": "frenet",
    "rmf": "rmf",
    "rotation-minimizing": "rmf",
}


# ---------------------------------------------------------------------------
# curves


@dataclass(frozen=True)
class ClosedCurve:
    """Smooth closed curve ``gamma(u) = sum_k a_k cos(ku) + b_k sin(ku)``.

    Parameters
    ----------
    cos_coeffs, sin_coeffs : ndarray, shape (N, K+1)
        Per-coordinate Fourier coefficients; ``sin_coeffs[:, 0]`` is ignored.
    unit_speed : bool
        When True the public parameter is arclength in ``[0, length)``.
    """

    cos_coeffs: np.ndarray
    sin_coeffs: np.ndarray
    unit_speed: bool = False
    length: float = field(init=False)
    _speed_modes: np.ndarray = field(init=False, repr=False)
    _coarse_u: np.ndarray = field(init=False, repr=False)
    _coarse_pts: np.ndarray = field(init=False, repr=False)
    _s_table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        a = np.array(self.cos_coeffs, dtype=float, ndmin=2)
        b = np.array(self.sin_coeffs, dtype=float, ndmin=2)
        if a.shape != b.shape:
            raise ValueError("cos and sin coefficient arrays must have equal shape")
        b[:, 0] = 0.0
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "cos_coeffs", a)
        object.__setattr__(self, "sin_coeffs", b)

        m = max(1024, 32 * a.shape[1])
        u = TWO_PI * np.arange(m) / m
        speed = np.linalg.norm(kernels.fourier_eval(u, a, b, 1), axis=1)
        if speed.min() < 1e-12:
            raise DegenerateCurve(f"|gamma'| = {speed.min():.3e} at a sample point")
        modes = np.fft.rfft(speed) / m
        keep = max(2, int(np.max(np.nonzero(np.abs(modes) > 1e-17 * abs(modes[0]))[0])) + 1)
        object.__setattr__(self, "_speed_modes", modes[:keep])
        object.__setattr__(self, "length", float(TWO_PI * modes[0].real))

        nc = max(256, 8 * a.shape[1])
        cu = TWO_PI * np.arange(nc) / nc
        object.__setattr__(self, "_coarse_u", cu)
        object.__setattr__(self, "_coarse_pts", kernels.fourier_eval(cu, a, b, 0))
        ut = TWO_PI * np.arange(m + 1) / m
        object.__setattr__(self, "_s_table", np.stack([ut, self.arclength_of(ut)]))

    # -- raw parameter -----------------------------------------------------
    @property
    def ambient_dim(self) -> int:
        return self.cos_coeffs.shape[0]

    @property
    def harmonics(self) -> int:
        return self.cos_coeffs.shape[1] - 1

    @property
    def period(self) -> float:
        return self.length if self.unit_speed else TWO_PI

    def raw_derivative(self, u, order=0):
        return kernels.fourier_eval(u, self.cos_coeffs, self.sin_coeffs, order)

    def arclength_of(self, u):
        """Arclength ``s(u)`` measured from ``u = 0`` (spectral integration)."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        c = self._speed_modes
        k = np.arange(1, len(c))
        # speed = c0 + 2 Re sum_k c_k e^{iku}
        e = np.exp(1j * np.outer(u, k))
        per = 2 * np.real(((e - 1) * (c[1:] / (1j * k))).sum(axis=1))
        return c[0].real * u + per

    def param_of(self, s):
        """Raw parameter ``u`` at arclength ``s`` (Newton inversion)."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        L = self.length
        base = np.floor(s / L)
        sr = s - base * L
        u = np.interp(sr, self._s_table[1], self._s_table[0])
        for _ in range(20):
            f = self.arclength_of(u) - sr
            v = np.linalg.norm(self.raw_derivative(u, 1), axis=1)
            step = f / v
            u = u - step
            if np.max(np.abs(step)) < 1e-14:
                break
        return u + TWO_PI * base

    def _u(self, p):
        p = np.atleast_1d(np.asarray(p, dtype=float))
        return self.param_of(p) if self.unit_speed else p

    # -- geometry in the public parameter ------------------------------------
    def point(self, p):
        return self.raw_derivative(self._u(p), 0)

    def tangent(self, p):
        """Unit tangent."""
        d1 = self.raw_derivative(self._u(p), 1)
        return d1 / np.linalg.norm(d1, axis=1, keepdims=True)

    def velocity(self, p):
        """Derivative with respect to the public parameter."""
        d1 = self.raw_derivative(self._u(p), 1)
        if self.unit_speed:
            return d1 / np.linalg.norm(d1, axis=1, keepdims=True)
        return d1

    def acceleration(self, p):
        """Second derivative with respect to arclength, ``gamma_ss``."""
        u = self._u(p)
        d1 = self.raw_derivative(u, 1)
        d2 = self.raw_derivative(u, 2)
        v2 = np.einsum("ij,ij->i", d1, d1)
        tan = np.einsum("ij,ij->i", d2, d1) / v2
        return (d2 - tan[:, None] * d1) / v2[:, None]

    def curvature(self, p):
        return np.linalg.norm(self.acceleration(p), axis=1)

    def sample(self, n):
        """Uniformly spaced public parameters and points."""
        p = self.period * np.arange(n) / n
        return p, self.point(p)


def fourier_curve(coeffs: dict, dim: int | None = None) -> ClosedCurve:
    """Build a curve from ``{axis: {"cos": [...], "sin": [...]}}``.

    Axis keys are integers (or ``x``, ``y``, ``z``, ``w``); missing axes are zero.
    """
    names = {"x": 0, "y": 1, "z": 2, "w": 3}
    idx = {}
    for k, v in coeffs.items():
        idx[names[k] if k in names else int(k)] = v
    n = dim if dim is not None else max(idx) + 1
    K = max(max(len(v.get("cos", [])), len(v.get("sin", []))) for v in idx.values())
    a = np.zeros((n, max(K, 2)))
    b = np.zeros_like(a)
    for d, v in idx.items():
        c = v.get("cos", [])
        s = v.get("sin", [])
        a[d, :len(c)] = c
        b[d, :len(s)] = s
    return ClosedCurve(a, b)


def circle(radius=1.0, dim=3, center=None) -> ClosedCurve:
    a = np.zeros((dim, 2))
    b = np.zeros((dim, 2))
    a[0, 1] = radius
    b[1, 1] = radius
    if center is not None:
        a[:, 0] = center
    return ClosedCurve(a, b)


def ellipse(a_axis=2.0, b_axis=1.0, dim=3) -> ClosedCurve:
    a = np.zeros((dim, 2))
    b = np.zeros((dim, 2))
    a[0, 1] = a_axis
    b[1, 1] = b_axis
    return ClosedCurve(a, b)


def trefoil_like(dim=3) -> ClosedCurve:
    """``(cos u + cos 2u / 2, sin u, sin 3u / 2)``: nonplanar, nonzero torsion."""
    a = np.zeros((dim, 4))
    b = np.zeros((dim, 4))
    a[0, 1], a[0, 2] = 1.0, 0.5
    b[1, 1] = 1.0
    b[2, 3] = 0.5
    return ClosedCurve(a, b)


def curve_from_config(cfg: dict) -> ClosedCurve:
    kind = cfg.get("type", "fourier")
    dim = int(cfg.get("dim", 3))
    if kind == "circle":
        return circle(float(cfg.get("radius", 1.0)), dim, cfg.get("center"))
    if kind == "ellipse":
        return ellipse(float(cfg.get("a", 2.0)), float(cfg.get("b", 1.0)), dim)
    if kind == "trefoil":
        return trefoil_like(dim)
    if kind == "fourier":
        return fourier_curve(cfg["coeffs"], dim)
    raise ValueError(f"unknown curve type {kind!r}")


def arclength_reparametrize(curve: ClosedCurve) -> ClosedCurve:
    """Return the same curve with arclength as its parameter."""
    if curve.unit_speed:
        return curve
    return dataclasses.replace(curve, unit_speed=True)


# ---------------------------------------------------------------------------
# distance


def closest_point(curve: ClosedCurve, y):
    """Distance from each point to the curve and the public parameter of the foot."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if isinstance(curve, StraightLine):
        s = (y - curve.origin) @ curve.direction
        return np.linalg.norm(y - curve.point(s), axis=1), s
    dist, u = kernels.closest_points(y, curve.cos_coeffs, curve.sin_coeffs,
                                     curve._coarse_u, curve._coarse_pts)
    p = curve.arclength_of(u) if curve.unit_speed else u
    return dist, p


def distance_to_curve(curve: ClosedCurve, y):
    """``rho_Gamma(y)``; scalar in, scalar out."""
    d, _ = closest_point(curve, y)
    return float(d[0]) if np.ndim(y) == 1 else d


# ---------------------------------------------------------------------------
# frames


def _gram_schmidt(vecs, basis, tol):
    """Orthonormalize each row-stack of ``vecs`` against ``basis`` (in place list)."""
    v = vecs.copy()
    for e in basis:
        v -= np.einsum("ij,ij->i", v, e)[:, None] * e
    nrm = np.linalg.norm(v, axis=1)
    return v, nrm


def _complete_oriented(cols):
    """Unit vector completing rows ``cols`` (list of (M,N)) to a positive basis."""
    M, N = cols[0].shape
    out = np.empty((M, N))
    mat = np.empty((M, N, N))
    for i, c in enumerate(cols):
        mat[:, i, :] = c
    for k in range(N):
        mat[:, N - 1, :] = 0.0
        mat[:, N - 1, k] = 1.0
        out[:, k] = np.linalg.det(mat)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


@dataclass(frozen=True)
class NormalFrame:
    """Orthonormal normal frame ``E_2..E_N`` along a unit-speed curve.

    ``normals[k, i]`` is ``E_{i+2}`` at ``s_samples[k]``. For the
    rotation-minimizing kind the frame is propagated by double reflection from
    the ``seam`` and need not close up there; charts stay away from the seam.
    """

    curve: ClosedCurve
    kind: str
    seam: float
    s_samples: np.ndarray
    normals: np.ndarray
    closure_mismatch: float = 0.0
    fd_step: float = 1e-5

    @property
    def ambient_dim(self):
        return self.curve.ambient_dim

    def evaluate(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if self.kind == "frenet":
            return _frenet_normals(self.curve, s)
        return self._rmf_eval(s, self._base_index(s))

    def _base_index(self, s):
        L = self.curve.length
        off = np.mod(s - self.seam, L)
        ds = L / (len(self.s_samples) - 1)
        return np.clip(np.rint(off / ds).astype(int), 0, len(self.s_samples) - 1)

    def _rmf_eval(self, s, idx):
        curve = self.curve
        L = curve.length
        ds = L / (len(self.s_samples) - 1)
        off = np.mod(s - self.seam, L)
        # keep the parameter continuous relative to the chosen sample
        s_loc = self.seam + off
        s_loc = np.where(off - idx * ds > L / 2, s_loc - L, s_loc)
        s_loc = np.where(off - idx * ds < -L / 2, s_loc + L, s_loc)
        x0 = curve.point(self.s_samples[idx])
        t0 = curve.tangent(self.s_samples[idx])
        x1 = curve.point(s_loc)
        t1 = curve.tangent(s_loc)
        r = self.normals[idx]
        v1 = x1 - x0
        c1 = np.einsum("ij,ij->i", v1, v1)
        safe = c1 > 1e-300
        c1 = np.where(safe, c1, 1.0)
        rl = r - (2.0 / c1)[:, None, None] * np.einsum("imd,id->im", r, v1)[:, :, None] * v1[:, None, :]
        tl = t0 - (2.0 / c1 * np.einsum("id,id->i", v1, t0))[:, None] * v1
        v2 = t1 - tl
        c2 = np.einsum("ij,ij->i", v2, v2)
        ok2 = c2 > 1e-300
        c2 = np.where(ok2, c2, 1.0)
        out = rl - (2.0 / c2)[:, None, None] * np.einsum("imd,id->im", rl, v2)[:, :, None] * v2[:, None, :]
        out = np.where(ok2[:, None, None], out, rl)
        return np.where(safe[:, None, None], out, r)

    def derivative(self, s):
        """``E_i'(s)`` by fourth-order central differences at step ``fd_step``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        h = self.fd_step
        if self.kind == "frenet":
            f = lambda q: _frenet_normals(self.curve, q)
        else:
            idx = self._base_index(s)
            f = lambda q: self._rmf_eval(q, idx)
        return (8 * (f(s + h) - f(s - h)) - (f(s + 2 * h) - f(s - 2 * h))) / (12 * h)

    def curvatures(self, s):
        """``kappa_i(s) = E_i'(s) . gamma'(s)``, shape (M, N-1)."""
        return np.einsum("imd,id->im", self.derivative(s), self.curve.tangent(s))

    def torsions(self, s):
        """``tau[i, j] = E_i'(s) . E_j(s)``, shape (M, N-1, N-1)."""
        return np.einsum("imd,ind->imn", self.derivative(s), self.evaluate(s))

    def beta(self, s):
        tau = self.torsions(s)
        return np.einsum("iml,inl->imn", tau, tau)

    def gram_defect(self, s=None):
        """Max deviation of (gamma', E_2..E_N) from an orthonormal basis."""
        s = self.s_samples if s is None else np.atleast_1d(s)
        basis = np.concatenate([self.curve.tangent(s)[:, None, :], self.evaluate(s)], axis=1)
        gram = np.einsum("ikd,ild->ikl", basis, basis)
        return float(np.max(np.abs(gram - np.eye(basis.shape[1]))))


def _frenet_normals(curve: ClosedCurve, s, tol=1e-10):
    u = curve._u(s)
    N = curve.ambient_dim
    T = curve.tangent(s)
    basis = [T]
    for order in range(2, N):
        d = curve.raw_derivative(u, order)
        scale = np.linalg.norm(d, axis=1) + 1e-300
        v, nrm = _gram_schmidt(d, basis, tol)
        if order == 2 and np.any(nrm < tol * np.maximum(scale, 1.0)):
            raise FrenetDegenerate("gamma'' vanishes (inflection); use the rotation-minimizing frame")
        bad = nrm < tol * np.maximum(scale, 1.0)
        if np.any(bad):
            # higher-order degeneracy: complete with the best ambient axis
            for e in np.eye(N):
                cand, cn = _gram_schmidt(np.tile(e, (len(u), 1)), basis, tol)
                use = bad & (cn > 0.5)
                v[use] = cand[use]
                nrm[use] = cn[use]
                bad &= ~use
        basis.append(v / nrm[:, None])
    basis.append(_complete_oriented(basis + [np.zeros_like(T)]))
    return np.stack(basis[1:], axis=1)


def build_frame(curve: ClosedCurve, kind="rmf", n_samples=4096, seam=0.0) -> NormalFrame:
    """Sampled orthonormal normal frame along a unit-speed curve.

    ``kind`` is ``"frenet"`` (Gram-Schmidt on derivatives) or ``"rmf"``
    (rotation-minimizing, double reflection).
    """
    try:
        kind = FRAME_KINDS[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown frame kind {kind!r}") from None
    curve = arclength_reparametrize(curve)
    L = curve.length
    s = seam + L * np.arange(n_samples + 1) / n_samples
    if kind == "frenet":
        normals = _frenet_normals(curve, s)
        # an inflection between samples shows up as a flip of the principal normal
        if np.min(np.einsum("id,id->i", normals[1:, 0], normals[:-1, 0])) < 0:
            raise FrenetDegenerate("principal normal flips (inflection); use the rotation-minimizing frame")
        return NormalFrame(curve, kind, seam, s, normals)
    x = curve.point(s)
    T = curve.tangent(s)
    N = curve.ambient_dim
    r0 = []
    for e in np.eye(N):
        v = e - (e @ T[0]) * T[0]
        for q in r0:
            v -= (v @ q) * q
        if np.linalg.norm(v) > 0.3:
            r0.append(v / np.linalg.norm(v))
        if len(r0) == N - 1:
            break
    r0 = np.array(r0)
    if np.linalg.det(np.vstack([T[0], r0])) < 0:
        r0[-1] *= -1
    normals = kernels.double_reflection(x, T, r0)
    mismatch = float(np.max(np.abs(normals[-1] - normals[0])))
    return NormalFrame(curve, kind, seam, s, normals, closure_mismatch=mismatch)


# ---------------------------------------------------------------------------
# Fermi charts


@dataclass(frozen=True)
class FermiChart:
    """Fermi coordinates ``F(t, z) = gamma(b + t) + sum z_i E_i(b + t)``."""

    curve: ClosedCurve
    frame: NormalFrame
    base_t: float
    r_max: float
    rotation: np.ndarray

    @property
    def ambient_dim(self):
        return self.curve.ambient_dim

    @property
    def y0(self):
        return self.curve.point(self.base_t)[0]

    def check(self, x, radius=None):
        r = self.r_max if radius is None else radius
        x = np.atleast_2d(x)
        if np.any(np.abs(x[:, 0]) > r) or np.any(np.linalg.norm(x[:, 1:], axis=1) > r):
            raise OutOfChart(f"point outside Q_r with r = {r}")


def estimate_injectivity_radius(curve: ClosedCurve, frame: NormalFrame, n_t=64, n_dir=8):
    """Largest tested tube radius on which the Fermi map does not fold.

    Starting from ``0.95 / max curvature`` the radius shrinks by 0.8 until every
    sampled point ``F(t, z)`` has distance ``|z|`` and foot ``t``.
    """
    curve = arclength_reparametrize(curve)
    L = curve.length
    kmax = float(np.max(curve.curvature(L * np.arange(512) / 512)))
    r = 0.95 / kmax if kmax > 0 else 0.25 * L
    rng = np.random.default_rng(1234)
    N = curve.ambient_dim
    dirs = rng.normal(size=(n_dir, N - 1))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    s = frame.seam + L * (np.arange(n_t) + 0.5) / n_t
    E = frame.evaluate(s)
    g = curve.point(s)
    for _ in range(60):
        ok = True
        for frac in (0.5, 1.0):
            pts = g[:, None, :] + frac * r * np.einsum("kn,ind->ikd", dirs, E)
            d, p = closest_point(curve, pts.reshape(-1, N))
            dp = np.mod(p - np.repeat(s, n_dir) + L / 2, L) - L / 2
            if np.max(np.abs(d - frac * r)) > 1e-8 * max(r, 1) or np.max(np.abs(dp)) > 1e-6:
                ok = False
                break
        if ok:
            return r
        r *= 0.8
    raise DegenerateCurve("could not find a fold-free tube radius")


def make_chart(curve: ClosedCurve, base_t=0.0, kind="rmf", r_max=None, n_samples=4096) -> FermiChart:
    """Fermi chart at arclength ``base_t`` with the frame seam opposite to it."""
    curve = arclength_reparametrize(curve)
    frame = build_frame(curve, kind, n_samples=n_samples, seam=base_t + curve.length / 2)
    r_inj = estimate_injectivity_radius(curve, frame)
    if r_max is None:
        r_max = 0.5 * r_inj
    elif r_max > r_inj:
        raise OutOfChart(f"r_max={r_max} exceeds injectivity estimate {r_inj}")
    T = curve.tangent(base_t)[0]
    E = frame.evaluate(base_t)[0]
    rot = np.vstack([T, E])
    return FermiChart(curve, frame, float(base_t), float(r_max), rot)


def fermi_map(chart: FermiChart, x, local=False, radius=None):
    """Ambient point ``F(t, z)``; ``local=True`` returns ``R (F - y0)`` so that
    ``dF/dt(0) = e_1``. Accepts one point (N,) or an array (M, N)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    chart.check(x, radius)
    s = chart.base_t + x[:, 0]
    y = chart.curve.point(s) + np.einsum("im,imd->id", x[:, 1:], chart.frame.evaluate(s))
    if local:
        y = (y - chart.y0) @ chart.rotation.T
    return y[0] if single else y


def fermi_inverse(chart: FermiChart, y):
    """Chart coordinates ``(t, z)`` of ambient points inside the tube, shape (M, N).

    ``t`` is the arclength offset from the chart base wrapped to
    ``[-L/2, L/2)``; points beyond the injectivity radius get the coordinates
    of their nearest foot, which is not a chart inverse there.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    _, p = closest_point(chart.curve, y)
    L = chart.curve.length
    t = np.mod(p - chart.base_t + L / 2, L) - L / 2
    s = chart.base_t + t
    z = np.einsum("id,imd->im", y - chart.curve.point(s), chart.frame.evaluate(s))
    return np.column_stack([t, z])


def fermi_jacobian(chart: FermiChart, x):
    """Columns ``dF/dt, dF/dz_i`` at each point, shape (M, N, N) (rows = partials)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    s = chart.base_t + x[:, 0]
    E = chart.frame.evaluate(s)
    dE = chart.frame.derivative(s)
    dt = chart.curve.tangent(s) + np.einsum("im,imd->id", x[:, 1:], dE)
    return np.concatenate([dt[:, None, :], E], axis=1)


def metric_exact(chart: FermiChart, x):
    """Exact metric ``g_ab = dF/dx_a . dF/dx_b``, shape (M, N, N)."""
    J = fermi_jacobian(chart, x)
    return np.einsum("iad,ibd->iab", J, J)


# ---------------------------------------------------------------------------
# metric jets and expansions


@dataclass(frozen=True)
class BaseCoefficients:
    kappa: np.ndarray       # kappa_i(0)
    dkappa: np.ndarray      # kappa_i'(0)
    tau: np.ndarray         # tau[i, j] = tau_i^j(0)
    dtau: np.ndarray
    beta: np.ndarray


def base_coefficients(chart: FermiChart, step=1e-3) -> BaseCoefficients:
    """Curvatures, torsions and their first derivatives at the chart base."""
    fr = chart.frame
    b = chart.base_t
    offs = np.array([-2, -1, 0, 1, 2]) * step
    k = fr.curvatures(b + offs)
    tau = fr.torsions(b + offs)
    w = np.array([1, -8, 0, 8, -1]) / (12 * step)
    dk = np.tensordot(w, k, axes=1)
    dtau = np.tensordot(w, tau, axes=1)
    t0 = tau[2]
    return BaseCoefficients(k[2], dk, t0, dtau, t0 @ t0.T)


@dataclass(frozen=True)
class MetricJet:
    x: np.ndarray
    g_exact: np.ndarray
    g_expand: np.ndarray
    sqrtdet_exact: float
    sqrtdet_expand: float
    ginv_exact: np.ndarray
    ginv_expand: np.ndarray


def metric_expansion(coef: BaseCoefficients, x, det_quadratic_coeff=0.0):
    """Second-order models of g, sqrt|g| and g^{-1} at points ``x`` (M, N).

    ``det_quadratic_coeff`` multiplies ``(z.kappa)^2`` in sqrt|g|; the exact
    second-order value is 0 because ``det g = (1 + z.kappa(t))^2``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = x[:, 0]
    z = x[:, 1:]
    zk = z @ coef.kappa
    tzk = t * (z @ coef.dkappa)
    a = z @ coef.tau + t[:, None] * (z @ coef.dtau)
    a1 = z @ coef.tau
    M, N = x.shape
    g = np.tile(np.eye(N), (M, 1, 1))
    g[:, 0, 0] = 1 + 2 * zk + 2 * tzk + zk ** 2 + np.einsum("im,mn,in->i", z, coef.beta, z)
    g[:, 0, 1:] = a
    g[:, 1:, 0] = a
    sq = 1 + zk + tzk + det_quadratic_coeff * zk ** 2
    gi = np.tile(np.eye(N), (M, 1, 1))
    gi[:, 0, 0] = 1 - 2 * zk - 2 * tzk + 3 * zk ** 2
    ai = -a + 2 * zk[:, None] * a1
    gi[:, 0, 1:] = ai
    gi[:, 1:, 0] = ai
    gi[:, 1:, 1:] += np.einsum("im,in->imn", a1, a1)
    return g, sq, gi


def metric_jet(chart: FermiChart, x, coef: BaseCoefficients | None = None,
               det_quadratic_coeff=0.0) -> MetricJet:
    x = np.asarray(x, dtype=float)
    chart.check(x)
    coef = base_coefficients(chart) if coef is None else coef
    g = metric_exact(chart, x)[0]
    ge, sq, gi = metric_expansion(coef, x, det_quadratic_coeff)
    return MetricJet(x, g, ge[0], float(np.sqrt(np.linalg.det(g))), float(sq[0]),
                     np.linalg.inv(g), gi[0])


def expansion_order_check(chart: FermiChart, direction, scales, det_quadratic_coeff=0.0,
                          floor=1e-14, exact_tol=0.0):
    """Fitted log-log slopes of the metric, sqrt-det and inverse residuals.

    ``scales`` are fractions of ``r_max``. Returns a dict with keys ``g``,
    ``sqrtdet``, ``ginv`` (slopes, ``inf`` when the residual vanishes) and
    ``residuals`` (per-scale table). A quantity whose residuals all stay
    below ``exact_tol`` is reported as exact (slope ``inf``), which is the case
    for the metric of a constant-curvature planar curve.
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    scales = np.asarray(scales, dtype=float)
    if np.any(np.diff(scales) >= 0):
        raise ValueError("scales must be strictly decreasing")
    rad = scales * chart.r_max
    x = rad[:, None] * d[None, :]
    chart.check(x)
    coef = base_coefficients(chart)
    g = metric_exact(chart, x)
    ge, sq, gi = metric_expansion(coef, x, det_quadratic_coeff)
    res = {
        "g": np.linalg.norm(g - ge, axis=(1, 2)),
        "sqrtdet": np.abs(np.sqrt(np.linalg.det(g)) - sq),
        "ginv": np.linalg.norm(np.linalg.inv(g) - gi, axis=(1, 2)),
    }
    out = {"residuals": res, "radii": rad}
    for key, r in res.items():
        small = r < floor
        if np.all(small) or np.max(r) < exact_tol:
            out[key] = float("inf")
            continue
        if np.any(small):
            raise ResidualUnderflow(f"{key} residual reaches {floor} inside the fit window")
        out[key] = float(np.polyfit(np.log(rad), np.log(r), 1)[0])
    return out


# ---------------------------------------------------------------------------
# flat surrogate


@dataclass(frozen=True)
class StraightLine:
    """Unit-speed straight line, used as the zero-curvature surrogate chart."""

    origin: np.ndarray
    direction: np.ndarray
    length: float = 1e6
    unit_speed: bool = True

    @property
    def ambient_dim(self):
        return len(self.origin)

    def point(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return self.origin + s[:, None] * self.direction

    def tangent(self, s):
        s = np.atleast_1d(s)
        return np.tile(self.direction, (len(s), 1))

    def acceleration(self, s):
        return np.zeros((len(np.atleast_1d(s)), self.ambient_dim))

    def curvature(self, s):
        return np.zeros(len(np.atleast_1d(s)))


@dataclass(frozen=True)
class ConstantFrame:
    normals0: np.ndarray
    fd_step: float = 1e-5
    kind: str = "rmf"
    seam: float = 0.0

    def evaluate(self, s):
        return np.tile(self.normals0, (len(np.atleast_1d(s)), 1, 1))

    def derivative(self, s):
        return np.zeros((len(np.atleast_1d(s)),) + self.normals0.shape)

    def curvatures(self, s):
        return np.zeros((len(np.atleast_1d(s)), len(self.normals0)))

    def torsions(self, s):
        m = len(self.normals0)
        return np.zeros((len(np.atleast_1d(s)), m, m))


def flat_chart(dim=3, r_max=1.0) -> FermiChart:
    e = np.eye(dim)
    line = StraightLine(np.zeros(dim), e[0])
    return FermiChart(line, ConstantFrame(e[1:]), 0.0, r_max, e)
