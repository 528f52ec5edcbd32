"""Command-line front end: one subcommand per experiment, YAML configs, JSON/CSV outputs.

Exit status is 0 on success, 2 when the configuration or parameters are
invalid (nothing is written) and 3 when a numerical procedure fails to
converge (``summary.json`` then records the error).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import curve_geometry as cg
from . import domain_quadrature as dq
from . import energy as en
from . import green_mass as gm
from . import ground_state as gs
from . import solver as sv
from . import test_functions as tf
from .errors import BadParams, NoConvergence, NumericalError, ValidationError

SUBCOMMANDS = ("frame-check", "metric-expansion", "profile", "energy", "prop31", "prop42",
               "green-mass", "minimize", "criterion")


# ---------------------------------------------------------------------------
# config


class RunConfig:
    """Parsed scenario file with the ``--resolution-override`` factor applied.

    Recognized top-level keys: ``scenario``, ``curve``/``curves``, ``domain``,
    ``N``, ``sigma``, ``delta``, ``h``, ``b``, ``chart``, ``profile``, ``eps``,
    ``grid``, ``green``, ``mass``, ``solver``, ``criterion``, ``seed``.
    """

    def __init__(self, raw: dict, refine=1.0, seed=None):
        if not isinstance(raw, dict):
            raise BadParams("config must be a mapping")
        if not refine > 0:
            raise BadParams("--resolution-override must be positive")
        self.raw = raw
        self.refine = float(refine)
        self.seed = int(raw.get("seed", 0) if seed is None else seed)
        self.name = str(raw.get("scenario", "unnamed"))

    def section(self, key, required=False) -> dict:
        val = self.raw.get(key)
        if val is None:
            if required:
                raise BadParams(f"config is missing the '{key}' section")
            return {}
        if not isinstance(val, dict):
            raise BadParams(f"'{key}' must be a mapping")
        return val

    def number(self, key, default=None):
        val = self.raw.get(key, default)
        if val is None:
            raise BadParams(f"config is missing '{key}'")
        try:
            return float(val)
        except (TypeError, ValueError):
            raise BadParams(f"'{key}' must be a number, got {val!r}") from None

    # -- model pieces -----------------------------------------------------
    @property
    def N(self):
        return int(self.number("N"))

    def curves(self):
        raw = self.raw.get("curves") or [self.section("curve", required=True)]
        out = []
        for c in raw:
            try:
                out.append((str(c.get("name", c.get("type", "curve"))), cg.curve_from_config(c)))
            except (KeyError, TypeError, ValueError) as e:
                if isinstance(e, ValidationError):
                    raise
                raise BadParams(f"bad curve spec {c!r}: {e}") from None
        return out

    def curve(self):
        return self.curves()[0][1]

    def domain(self):
        try:
            return dq.domain_from_config(self.section("domain", required=True), self.N)
        except (KeyError, TypeError) as e:
            raise BadParams(f"bad domain spec: {e}") from None

    def spec(self, grid=None) -> en.FunctionalSpec:
        return en.FunctionalSpec(self.N, self.number("sigma", 1.0), self.number("delta"),
                                 self.raw.get("h", 0.0), self.raw.get("b", 0.0), grid=grid)

    def chart(self, curve=None):
        c = self.section("chart")
        return cg.make_chart(curve or self.curve(), float(c.get("base_t", 0.0)), c.get("kind", "rmf"),
                             c.get("r_max"))

    def profile(self):
        p = dict(self.section("profile"))
        if "n" in p:
            p["n"] = int(round(p["n"] * self.refine))
        return gs.profile(self.N, self.number("sigma", 1.0), **p)

    def eps(self):
        """``(r, eps_list)``; eps values are given as fractions of the cutoff radius ``r``."""
        e = self.section("eps", required=True)
        r = float(e.get("r", 0.2))
        if "fractions" in e:
            frac = np.asarray(e["fractions"], dtype=float)
        elif "geomspace" in e:
            a, b, n = e["geomspace"]
            frac = np.geomspace(float(a), float(b), int(n))
        else:
            raise BadParams("eps needs 'fractions' or 'geomspace'")
        if len(frac) < 3 or np.any(frac <= 0) or np.any(np.diff(frac) >= 0):
            raise BadParams("eps fractions must be positive, strictly decreasing and at least three")
        return r, r * frac

    @property
    def quad_resolution(self):
        return max(1, int(round(self.refine)))

    def spacing(self, key="spacing"):
        g = self.section("grid", required=True)
        if key not in g:
            raise BadParams(f"grid.{key} is required")
        return float(g[key]) / self.refine

    def resolutions(self):
        res = self.section("green").get("resolutions", [48, 64, 96])
        return [int(round(n * self.refine)) for n in res]

    def y0(self):
        g = self.section("green")
        if "y0" in g:
            return np.asarray(g["y0"], dtype=float)
        return self.curve().point(float(self.section("chart").get("base_t", 0.0)))[0]


def load_config(path, refine=1.0, seed=None) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as e:
        raise BadParams(f"cannot read config: {e}") from None
    except yaml.YAMLError as e:
        raise BadParams(f"malformed config: {e}") from None
    return RunConfig(raw, refine, seed)


# ---------------------------------------------------------------------------
# subcommands; each returns (summary, {table name: columns})


def _frame_check(cfg: RunConfig, tol_frame=1e-8, tol_normal=1e-12):
    rng = np.random.default_rng(cfg.seed)
    kinds = cfg.raw.get("frames", ["rmf", "frenet"])
    rows = {k: [] for k in ("curve", "kind", "gram_defect", "antisymmetry", "normal_block", "ok")}
    for name, curve in cfg.curves():
        for kind in kinds:
            chart = cg.make_chart(curve, 0.0, kind)
            fr = chart.frame
            s = fr.seam + np.linspace(0.05, curve.length - 0.05, 97)
            tau = fr.torsions(s)
            anti = float(np.max(np.abs(tau + np.swapaxes(tau, 1, 2))))
            x = rng.uniform(-0.5, 0.5, size=(20, curve.ambient_dim)) * chart.r_max
            g = cg.metric_exact(chart, x)
            normal = float(np.max(np.abs(g[:, 1:, 1:] - np.eye(curve.ambient_dim - 1))))
            gram = fr.gram_defect(s)
            for k, v in zip(rows, (name, kind, gram, anti, normal,
                                   gram < tol_frame and anti < tol_frame and normal < tol_normal)):
                rows[k].append(v)
    return {"all_ok": all(rows["ok"]), "max_gram_defect": max(rows["gram_defect"]),
            "max_antisymmetry": max(rows["antisymmetry"]),
            "max_normal_block": max(rows["normal_block"])}, {"frame_check": rows}


def _metric_expansion(cfg: RunConfig, threshold=2.7):
    m = cfg.section("metric")
    scales = np.geomspace(*m.get("scales", [1e-1, 1e-3]), int(m.get("n_scales", 9)))
    kinds = cfg.raw.get("frames", ["rmf"])
    slopes = {k: [] for k in ("curve", "kind", "direction", "g", "sqrtdet", "ginv")}
    resid = {k: [] for k in ("curve", "kind", "direction", "radius", "g", "sqrtdet", "ginv")}
    for name, curve in cfg.curves():
        dirs = m.get("directions") or [[1.0, 0.7, -0.4, 0.3][:curve.ambient_dim]]
        for kind in kinds:
            chart = cg.make_chart(curve, 0.0, kind)
            for d in dirs:
                label = " ".join(f"{v:g}" for v in d)
                out = cg.expansion_order_check(chart, d, scales, floor=0.0,
                                               exact_tol=float(m.get("exact_tol", 1e-9)))
                for k, v in zip(slopes, (name, kind, label, out["g"], out["sqrtdet"], out["ginv"])):
                    slopes[k].append(v)
                for i, r in enumerate(out["radii"]):
                    for k, v in zip(resid, (name, kind, label, r, *(out["residuals"][q][i]
                                                                   for q in ("g", "sqrtdet", "ginv")))):
                        resid[k].append(v)
    low = min(min(slopes[k]) for k in ("g", "sqrtdet", "ginv"))
    return {"min_slope": low, "threshold": threshold, "all_ok": low >= threshold}, \
        {"slopes": slopes, "residuals": resid}


def _profile(cfg: RunConfig):
    prof = cfg.profile()
    C1, C2 = gs.decay_fit(prof)
    t, rho = np.meshgrid(np.linspace(0.0, 3.0, 7), np.linspace(0.25, 3.0, 7), indexing="ij")
    res = gs.pde_residual(prof, t.ravel(), rho.ravel())
    S, Z = np.meshgrid(prof.s, prof.zeta, indexing="ij")
    summary = {**prof.header(), "decay_C1": C1, "decay_C2": C2,
               "max_probe_residual": float(np.max(np.abs(res)))}
    return summary, {"profile": {"s": S.ravel(), "zeta": Z.ravel(), "theta": prof.theta.ravel()},
                     "probes": {"t": t.ravel(), "rho": rho.ravel(), "residual": res}}


def _energy(cfg: RunConfig):
    spec = cfg.spec()
    chart, prof = cfg.chart(), cfg.profile()
    r, eps = cfg.eps()
    cut = tf.CutoffSpec(r, cfg.section("eps").get("cutoff", "box"))
    cols = {k: [] for k in ("eps", "J1", "J", "J1_excess", "J_excess", "perturbation")}
    for e in eps:
        T = tf.build_u_eps(chart, prof, cut, e, resolution=cfg.quad_resolution).energy_terms(spec)
        for k in cols:
            cols[k].append(e if k == "eps" else T[k])
    summary = {"E_ref": tf.reference_energy(prof)["E_ref"], "min_J_excess": min(cols["J_excess"])}
    if "grid" in cfg.raw:
        grid = dq.build_domain_grid(cfg.domain(), cfg.curve(), cfg.spacing())
        summary["coercivity_margin"] = en.coercivity_margin(cfg.spec(grid))
    return summary, {"energy_sweep": cols}


def _prop31(cfg: RunConfig):
    r, eps = cfg.eps()
    cut = tf.CutoffSpec(r, cfg.section("eps").get("cutoff", "box"))
    fit = tf.fit_prop31(cfg.spec(), cfg.chart(), cfg.profile(), eps, cut, resolution=cfg.quad_resolution)
    return fit.summary(), {"sweep": fit.rows()}


def _mass_field(cfg: RunConfig, chart):
    m = cfg.section("mass")
    src = m.get("source", "image")
    if src == "image":
        d = cfg.domain()
        if d.kind != "ball" or d.N != 3:
            raise BadParams("mass source 'image' needs a 3D ball domain")
        return gm.BallRegularPart(chart.y0, d.radius, d.center), {}
    if src == "grid":
        res = gm.mass(cfg.domain(), cfg.raw.get("h", 0.0), chart.y0, cfg.resolutions(), cfg.curve())
        fit = gm.GridRegularPart(res, float(m.get("fit_radius", 0.15)))
        return fit, {"grid_mass": res.mass, "grid_mass_error": res.error_estimate,
                     "fit_residual": fit.fit_residual}
    raise BadParams(f"unknown mass source {src!r}")


def _prop42(cfg: RunConfig):
    chart = cfg.chart()
    mf, extra = _mass_field(cfg, chart)
    r, eps = cfg.eps()
    fit = tf.fit_prop42(cfg.spec(), chart, cfg.profile(), mf, eps, r,
                        variant=cfg.section("mass").get("variant", "green"), resolution=cfg.quad_resolution)
    return {**fit.summary(), **extra}, {"sweep": fit.rows()}


def _green_mass(cfg: RunConfig):
    curve = cfg.curve() if "curve" in cfg.raw else None
    res = gm.mass(cfg.domain(), cfg.raw.get("h", 0.0), cfg.y0(), cfg.resolutions(), curve)
    return res.summary(), {"per_grid": {"resolution": list(res.grids), "h": list(res.h_values),
                                        "mass": list(res.mass_per_grid)}}


def _init_field(cfg: RunConfig, grid, prof):
    s = cfg.section("solver")
    init = s.get("init", {"kind": "u_eps"})
    if init.get("kind", "u_eps") == "u_eps":
        return tf.UEps(cfg.chart(), prof, tf.CutoffSpec(float(init.get("r", 0.2)), init.get("cutoff", "box")),
                       float(init.get("eps", 0.15)))
    if init["kind"] == "bump":
        return sv.random_bump(grid, init.get("center", cfg.y0()), float(init.get("width", 0.15)),
                              seed=cfg.seed, amplitude=float(init.get("amplitude", 0.1)))
    raise BadParams(f"unknown init kind {init['kind']!r}")


def _minimize(cfg: RunConfig):
    domain, curve = cfg.domain(), cfg.curve()
    grid = dq.build_domain_grid(domain, curve, cfg.spacing())
    spec = cfg.spec(grid)
    if spec.coercivity() <= 0:
        raise BadParams(f"-Delta + h is not coercive (margin {spec.coercivity():.4g})")
    doubling = None
    if "doubling" in cfg.section("grid"):
        doubling = cfg.spec(dq.build_domain_grid(domain, curve, cfg.spacing("doubling")))
    prof = cfg.profile()
    s = cfg.section("solver")
    S_ref = tf.reference_energy(prof)["E_ref"]
    kw = dict(S_ref=S_ref, max_iter=int(s.get("max_iter", 200)), tol=float(s.get("tol", 1e-6)),
              doubling=doubling)
    failure = None
    try:
        res = sv.mountain_pass_estimate(spec, _init_field(cfg, grid, prof), **kw)
    except NoConvergence as e:
        if not hasattr(e, "result"):
            raise
        res, failure = e.result, e
    pts = grid.points[grid.inside.ravel()]
    cloud = {f"y{k + 1}": pts[:, k] for k in range(grid.N)}
    cloud["u"] = res.minimizer_field.values[grid.inside]
    tables = {"history": {"iteration": list(range(len(res.history))), "level": res.history},
              "minimizer": cloud}
    summary = {**res.summary(), "coercivity_margin": spec.coercivity(), "unknowns": len(grid.unknowns)}
    if failure is not None:
        raise _PartialFailure(failure, summary, tables)
    return summary, tables


def _criterion(cfg: RunConfig):
    c = dict(cfg.section("criterion", required=True))
    N, sigma, delta = cfg.N, cfg.number("sigma", 1.0), cfg.number("delta")
    extra = {}
    m = c.get("m_at_y0", 0.0)
    if m == "compute":
        res = gm.mass(cfg.domain(), cfg.raw.get("h", 0.0), cfg.y0(), cfg.resolutions(), cfg.curve())
        m = res.mass
        extra.update(mass=res.mass, mass_error=res.error_estimate)
    C = c.get("derived_constant")
    if C is None and N == 3 and delta == 2:
        C = sv.delta2_constant(gs.profile(3, sigma), c.get("convention", "derived"))
    inp = sv.CriterionInput(N, sigma, delta, float(c.get("b_at_y0", 0.0)), float(m),
                            float("nan") if C is None else float(C))
    decision = sv.existence_criterion(inp)
    return {"decision": decision, "N": N, "sigma": sigma, "delta": delta, "b_at_y0": inp.b_at_y0,
            "m_at_y0": inp.m_at_y0, "derived_constant": inp.derived_constant, **extra}, {}


_RUNNERS = {"frame-check": _frame_check, "metric-expansion": _metric_expansion, "profile": _profile,
            "energy": _energy, "prop31": _prop31, "prop42": _prop42, "green-mass": _green_mass,
            "minimize": _minimize, "criterion": _criterion}


class _PartialFailure(NumericalError):
    def __init__(self, cause, summary, tables):
        super().__init__(str(cause))
        self.summary, self.tables = summary, tables


# ---------------------------------------------------------------------------
# validation without running


def validate(cmd, cfg: RunConfig):
    """Build the cheap objects a subcommand needs so that bad input fails before any work."""
    if cmd in ("frame-check", "metric-expansion"):
        cfg.curves()
        return
    if cmd == "profile":
        gs.critical_exponent(cfg.N, cfg.number("sigma", 1.0))
        return
    if cmd == "green-mass":
        en.scalar_field(cfg.raw.get("h", 0.0))
        spec = None
    else:
        spec = cfg.spec()
    if cmd in ("energy", "prop31", "prop42"):
        cfg.curve()
        cfg.eps()
        if cfg.curve().ambient_dim != spec.N:
            raise BadParams(f"curve lives in R^{cfg.curve().ambient_dim}, N = {spec.N}")
    if cmd in ("prop42", "green-mass", "minimize"):
        d = cfg.domain()
        if cmd != "minimize":
            y0 = cfg.y0()
            if not d.contains(y0[None])[0]:
                raise BadParams(f"y0 = {y0.tolist()} is outside the domain")
    if cmd == "green-mass" and len(cfg.resolutions()) < 3:
        raise BadParams("green.resolutions needs at least three grids")
    if cmd == "minimize":
        cfg.spacing()
        cfg.curve()
    if cmd == "criterion":
        c = cfg.section("criterion", required=True)
        m = c.get("m_at_y0", 0.0)
        sv.CriterionInput(spec.N, spec.sigma, spec.delta, float(c.get("b_at_y0", 0.0)),
                          0.0 if m == "compute" else float(m))


# ---------------------------------------------------------------------------
# output


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_plain(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    return x


def write_table(path, cols: dict):
    """CSV with a header row; floats written with ``repr`` so they round-trip exactly."""
    keys = list(cols)
    data = [list(cols[k]) for k in keys]
    n = len(data[0]) if data else 0
    if any(len(d) != n for d in data):
        raise ValueError(f"ragged table {path}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for i in range(n):
            w.writerow([repr(float(d[i])) if isinstance(d[i], (float, np.floating)) else d[i]
                        for d in data])


def write_outputs(out: Path, cmd, cfg: RunConfig, summary, tables, status="ok"):
    out.mkdir(parents=True, exist_ok=True)
    doc = {"subcommand": cmd, "scenario": cfg.name, "seed": cfg.seed, "resolution_override": cfg.refine,
           "status": status, "result": summary, "tables": sorted(f"{k}.csv" for k in tables)}
    with open(out / "summary.json", "w") as fh:
        json.dump(_plain(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, cols in tables.items():
        write_table(out / f"{name}.csv", cols)


def build_parser():
    ap = argparse.ArgumentParser(prog="hscurve", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="YAML scenario file")
    ap.add_argument("--out", default=None, help="output directory (default: runs/<scenario>/<subcommand>)")
    ap.add_argument("--resolution-override", type=float, default=1.0, metavar="FACTOR",
                    help="refine every grid, sweep quadrature and profile mesh by FACTOR")
    ap.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    ap.add_argument("--dry-run", action="store_true", help="validate the config and exit")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cmd = args.subcommand
    try:
        cfg = load_config(args.config, args.resolution_override, args.seed)
        validate(cmd, cfg)
    except (ValidationError, KeyError, TypeError, ValueError) as e:
        print(f"hscurve {cmd}: invalid configuration: {e}", file=sys.stderr)
        return 2
    if args.dry_run:
        print(f"hscurve {cmd}: configuration '{cfg.name}' is valid")
        return 0
    out = Path(args.out) if args.out else Path("runs") / cfg.name / cmd
    try:
        summary, tables = _RUNNERS[cmd](cfg)
    except ValidationError as e:
        print(f"hscurve {cmd}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except _PartialFailure as e:
        write_outputs(out, cmd, cfg, {**e.summary, "error": str(e)}, e.tables, status="numerical-failure")
        print(f"hscurve {cmd}: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        write_outputs(out, cmd, cfg, {"error": f"{type(e).__name__}: {e}"}, {}, status="numerical-failure")
        print(f"hscurve {cmd}: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    write_outputs(out, cmd, cfg, summary, tables)
    print(json.dumps(_plain({"subcommand": cmd, "out": str(out), **{k: v for k, v in summary.items()
                                                                     if np.isscalar(v)}}), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
