"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from hscurve import _pykernels
from hscurve.curve_geometry import trefoil_like

try:
    from hscurve import _ckernels
except ImportError:
    _ckernels = None


def cases():
    c = trefoil_like()
    y = np.random.default_rng(0).uniform(-2, 2, size=(20000, 3))
    args = (c.cos_coeffs, c.sin_coeffs, c._coarse_u, c._coarse_pts)
    s = np.linspace(0, c.length, 4096)
    x, T = c.point(s), c.tangent(s)
    r0 = np.linalg.qr(np.column_stack([T[0], [0, 0, 1.0], [0, 1.0, 0]]))[0][:, 1:].T
    return {
        "closest_points (20000 pts)": lambda m: m.closest_points(y, *args),
        "double_reflection (4096 samples)": lambda m: m.double_reflection(x, T, r0),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    mods = {"python": _pykernels}
    if _ckernels is not None:
        mods["cython"] = _ckernels
    print(f"{'kernel':34s} " + " ".join(f"{k:>12s}" for k in mods) + "   speedup")
    for name, fn in cases().items():
        t = {k: min(timeit.repeat(lambda: fn(m), number=1, repeat=args.repeat)) for k, m in mods.items()}
        row = " ".join(f"{t[k] * 1e3:10.2f}ms" for k in mods)
        sp = f"{t['python'] / t['cython']:8.1f}x" if "cython" in t else "       -"
        print(f"{name:34s} {row} {sp}")


if __name__ == "__main__":
    main()
