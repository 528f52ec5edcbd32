"""Pure numpy versions of the hot loops (fallback when the extension is absent)."""

import numpy as np


def fourier_eval(u, cos_c, sin_c, order=0):
    """Evaluate the ``order``-th derivative of a Fourier curve at parameters ``u``.

    ``cos_c``/``sin_c`` have shape (N, K+1); returns (len(u), N).
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    k = np.arange(cos_c.shape[1], dtype=float)
    phase = np.outer(u, k) + order * np.pi / 2
    scale = k ** order if order else np.ones_like(k)
    c = np.cos(phase) * scale
    s = np.sin(phase) * scale
    return c @ cos_c.T + s @ sin_c.T


def _newton_closest(y, u0, cos_c, sin_c, du_max, iters=40):
    u = u0.copy()
    for _ in range(iters):
        g0 = fourier_eval(u, cos_c, sin_c, 0)
        g1 = fourier_eval(u, cos_c, sin_c, 1)
        g2 = fourier_eval(u, cos_c, sin_c, 2)
        d = g0 - y
        f = np.einsum("ij,ij->i", d, g1)
        fp = np.einsum("ij,ij->i", g1, g1) + np.einsum("ij,ij->i", d, g2)
        fp = np.where(fp > 0, fp, np.einsum("ij,ij->i", g1, g1))
        step = np.clip(f / fp, -du_max, du_max)
        u -= step
        if np.all(np.abs(step) < 1e-15):
            break
    d = fourier_eval(u, cos_c, sin_c, 0) - y
    return np.sqrt(np.einsum("ij,ij->i", d, d)), u


def closest_points(points, cos_c, sin_c, u_samples, samples, chunk=4096):
    """Global nearest point on the curve for each row of ``points``.

    Coarse scan over ``samples`` followed by Newton polish from the two best
    separated coarse minima. Returns (distance, parameter u).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    m = len(u_samples)
    du = 2 * np.pi / m
    dist = np.empty(len(points))
    upar = np.empty(len(points))
    for lo in range(0, len(points), chunk):
        y = points[lo:lo + chunk]
        d2 = ((y[:, None, :] - samples[None, :, :]) ** 2).sum(-1)
        i1 = np.argmin(d2, axis=1)
        sep = np.abs(np.arange(m)[None, :] - i1[:, None])
        sep = np.minimum(sep, m - sep)
        i2 = np.argmin(np.where(sep > 2, d2, np.inf), axis=1)
        da, ua = _newton_closest(y, u_samples[i1], cos_c, sin_c, du)
        db, ub = _newton_closest(y, u_samples[i2], cos_c, sin_c, du)
        pick = db < da
        dist[lo:lo + chunk] = np.where(pick, db, da)
        upar[lo:lo + chunk] = np.mod(np.where(pick, ub, ua), 2 * np.pi)
    return dist, upar


def double_reflection(x, tangents, r0):
    """Propagate normal vectors ``r0`` along sampled points by double reflection.

    Returns an array of shape (n, m, N) of transported normals.
    """
    n = len(x)
    out = np.empty((n,) + r0.shape)
    r = np.array(r0, dtype=float)
    out[0] = r
    for i in range(n - 1):
        v1 = x[i + 1] - x[i]
        c1 = v1 @ v1
        rl = r - (2.0 / c1) * np.outer(r @ v1, v1)
        tl = tangents[i] - (2.0 / c1) * (v1 @ tangents[i]) * v1
        v2 = tangents[i + 1] - tl
        c2 = v2 @ v2
        if c2 > 1e-300:
            r = rl - (2.0 / c2) * np.outer(rl @ v2, v2)
        else:
            r = rl
        out[i + 1] = r
    return out
