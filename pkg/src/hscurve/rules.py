"""One-dimensional quadrature rules shared by the profile and energy code."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import gamma, roots_jacobi


def sphere_area(k: int) -> float:
    """Area of the unit sphere S^k in R^{k+1} (S^0 has two points)."""
    return float(2 * np.pi ** ((k + 1) / 2) / gamma((k + 1) / 2))


@lru_cache(maxsize=None)
def _leggauss(order):
    return np.polynomial.legendre.leggauss(order)


def gauss_panels(breaks, order=12):
    """Composite Gauss-Legendre nodes and weights on consecutive ``breaks``."""
    x, w = _leggauss(order)
    b = np.asarray(breaks, dtype=float)
    a, c = b[:-1, None], b[1:, None]
    nodes = 0.5 * (c - a) * x + 0.5 * (c + a)
    weights = 0.5 * (c - a) * w
    return nodes.ravel(), weights.ravel()


def geometric_breaks(lo, hi, first, ratio=2.0, extra=()):
    """Breakpoints ``lo, lo+first, lo+first*ratio, ...`` up to ``hi``.

    Refining geometrically toward ``lo`` makes Gauss panels converge for
    integrands with algebraic singularities there.
    """
    pts = [lo]
    step = first
    while lo + step < hi:
        pts.append(lo + step)
        step *= ratio
    pts.append(hi)
    pts = np.union1d(pts, [e for e in extra if lo < e < hi])
    return pts


def graded_rule(lo, hi, first, ratio=2.0, order=12, extra=()):
    return gauss_panels(geometric_breaks(lo, hi, first, ratio, extra), order)


@lru_cache(maxsize=None)
def sphere_average_rule(N: int, order: int = 24):
    """Nodes ``s`` and weights for averaging ``f(omega . e)`` over S^{N-2}.

    The density of ``s = omega . e`` on S^{N-2} is proportional to
    ``(1 - s^2)^{(N-4)/2}``, which is a Gauss-Jacobi weight.
    """
    if N == 3:
        # S^1: s = cos(phi); use the trapezoid rule in phi, spectrally accurate
        phi = np.pi * (np.arange(order) + 0.5) / order
        return np.cos(phi), np.full(order, 1.0 / order)
    a = (N - 4) / 2
    s, w = roots_jacobi(order, a, a)
    return s, w / w.sum()


@lru_cache(maxsize=None)
def sphere_rule(k: int, order: int = 16):
    """Product rule on S^k in R^{k+1}: nodes (M, k+1), weights summing to |S^k|.

    S^1 uses ``order`` equispaced angles; higher spheres peel off one polar
    angle at a time with Gauss-Jacobi nodes in its cosine.
    """
    if k == 1:
        phi = 2 * np.pi * np.arange(order) / order
        return np.column_stack([np.cos(phi), np.sin(phi)]), np.full(order, 2 * np.pi / order)
    a = (k - 2) / 2
    x, wx = roots_jacobi(max(order // 2, 2), a, a)
    sub, wsub = sphere_rule(k - 1, order)
    lead = np.repeat(x, len(wsub))
    rest = np.sqrt(1 - lead ** 2)[:, None] * np.tile(sub, (len(x), 1))
    w = np.outer(wx, wsub).ravel()
    return np.column_stack([lead, rest]), w * sphere_area(k) / w.sum()
