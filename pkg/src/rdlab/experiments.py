"""Configuration-driven experiment runner: sweeps, fits, verdicts and report files."""
from __future__ import annotations

import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, kernels
from .dynamics import (
    IntegratorConfig,
    NonlinearTerm,
    certify_dt,
    equilibrium_gap,
    find_equilibria,
    full_eigensystem,
    linear_semigroup_gap,
    nonlinear_semigroup_gap,
    semigroup_envelope,
)
from .family import CoefficientFamily, default_family, linear_family
from .fem import Mesh1D, assemble_operator, operator_gap_norm
from .rates import (
    RateBoundParams,
    RateFit,
    RateSeries,
    equi_attraction_bound,
    exponential_rate_bound,
    exponential_rate_bound_value,
    fit_rate,
    write_series_csv,
)
from .spectral import eigenpairs, eigenvalue_gap, projection_gap, spectral_projection

OUTPUT_ENV = "LAB_OUTPUT_DIR"


class ConfigError(ValueError):
    """Schema violation; the message starts with the dotted path of the offending key."""


class MeshCertificationError(RuntimeError):
    """The measured quantity is not mesh-converged at the configured n."""


# --- schema -----------------------------------------------------------------------

_NUM = (int, float)

# section -> key -> (accepted types, default)
SCHEMA: dict[str, dict[str, tuple[tuple[type, ...], Any]]] = {
    "experiment": {"name": ((str,), None), "seed": ((int,), 0)},
    "family": {
        "kind": ((str,), "default"),
        "a": (_NUM, 5.0),
        "eps_max": (_NUM, 0.0625),
        "lam": (_NUM, 1.0),
        "boundary": (_NUM, 1.0),
        "potential_shift": ((bool,), False),
    },
    "mesh": {"n": ((int,), 256), "certify": ((bool,), True), "certify_tol": (_NUM, 0.02)},
    "integrator": {
        "dt": (_NUM, 5e-4),
        "scheme": ((str,), "IMEX-CN"),
        "tolerance": (_NUM, 1e-6),
        "certify": ((bool,), True),
    },
    "sweep": {"eps": ((list,), None), "k_min": ((int,), 4), "k_max": ((int,), 10), "include_zero": ((bool,), False)},
    "output": {"dir": ((str,), "results")},
}

# per-experiment options, living in [experiment]
OPTIONS: dict[str, dict[str, tuple[tuple[type, ...], Any]]] = {
    "resolvent-rate": {"in_norm": ((str,), "L2"), "out_norm": ((str,), "H1")},
    "eigen-rate": {"k": ((list,), [0, 1, 2, 3, 4])},
    "projection-rate": {"m": ((int,), 3), "in_norm": ((str,), "L2"), "out_norm": ((str,), "H1")},
    "equilibria-rate": {},
    "linear-semigroup-rate": {
        "t": (_NUM, 1.0),
        "envelope_t_min": (_NUM, 0.01),
        "envelope_t_max": (_NUM, 2.0),
        "envelope_alpha_fraction": (_NUM, 0.5),
        "envelope_points": ((int,), 25),
        "envelope_factor": (_NUM, 2.0),
    },
    "semigroup-rate": {"t": (_NUM, 1.0), "u0_cos": ((list,), [0.0, 0.5])},
    "manifold-rate": {
        "box_radius": (_NUM, 0.25),
        "grid_n": ((int,), 81),
        "oracle": ((bool,), True),
        "attraction": ((bool,), True),
    },
    "attractor-rate": {
        "samples_per_connection": ((int,), 20000),
        "resolution_factor": (_NUM, 5.0),
        "oracle_points": ((int,), 500),
        "t_max": (_NUM, 500.0),
    },
    "reduced-map-rate": {"M": ((int,), 4), "dt": (_NUM, 0.02), "samples": ((int,), 256)},
    "shadowing": {
        "M": ((int,), 4),
        "dt": (_NUM, 0.02),
        "trials": ((int,), 100),
        "window": ((int,), 200),
        "noise": (_NUM, 1e-4),
        "samples_per_connection": ((int,), 20000),
        "map_samples": ((int,), 256),
        "window_check": ((bool,), True),
    },
    "ode-example": {"mu": (_NUM, 1.0), "f": ((str,), "tanh")},
    "equi-attraction-table": {"tuples": ((int,), 10)},
}

EXPERIMENTS = tuple(OPTIONS)


def _check_type(path: str, value, types) -> None:
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{path}: expected {'/'.join(t.__name__ for t in types)}, got bool")
    if not isinstance(value, types):
        raise ConfigError(f"{path}: expected {'/'.join(t.__name__ for t in types)}, got {type(value).__name__}")


def validate_config(raw: dict) -> dict:
    """Checked config with defaults filled in."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>: expected a table")
    for sec in raw:
        if sec not in SCHEMA:
            raise ConfigError(f"{sec}: unknown section")
        if not isinstance(raw[sec], dict):
            raise ConfigError(f"{sec}: expected a table")
    exp = raw.get("experiment", {})
    if "name" not in exp:
        raise ConfigError("experiment.name: required key missing")
    name = exp["name"]
    _check_type("experiment.name", name, (str,))
    if name not in OPTIONS:
        raise ConfigError(f"experiment.name: unknown experiment {name!r}")
    out: dict[str, dict] = {}
    for sec, keys in SCHEMA.items():
        allowed = dict(keys)
        if sec == "experiment":
            allowed.update(OPTIONS[name])
        given = raw.get(sec, {})
        for k, v in given.items():
            if k not in allowed:
                raise ConfigError(f"{sec}.{k}: unknown key")
            _check_type(f"{sec}.{k}", v, allowed[k][0])
        out[sec] = {k: given.get(k, d) for k, (_, d) in allowed.items()}
    _check_values(out)
    return out


def _check_values(cfg: dict) -> None:
    if cfg["family"]["kind"] not in ("default", "linear"):
        raise ConfigError("family.kind: expected 'default' or 'linear'")
    if cfg["mesh"]["n"] < 2:
        raise ConfigError("mesh.n: must be at least 2")
    if not cfg["integrator"]["dt"] > 0:
        raise ConfigError("integrator.dt: must be positive")
    if cfg["integrator"]["scheme"] not in ("IMEX-Euler", "IMEX-CN"):
        raise ConfigError("integrator.scheme: expected 'IMEX-Euler' or 'IMEX-CN'")
    eps = cfg["sweep"]["eps"]
    if eps is not None:
        for i, e in enumerate(eps):
            if isinstance(e, bool) or not isinstance(e, _NUM) or e < 0:
                raise ConfigError(f"sweep.eps[{i}]: expected a non-negative number")
    elif cfg["sweep"]["k_min"] > cfg["sweep"]["k_max"]:
        raise ConfigError("sweep.k_min: must not exceed sweep.k_max")
    exp = cfg["experiment"]
    for key in ("in_norm", "out_norm"):
        if key in exp and exp[key] not in ("L2", "H1", "ENERGY"):
            raise ConfigError(f"experiment.{key}: expected L2, H1 or ENERGY")
    if "k" in exp:
        for i, k in enumerate(exp["k"]):
            if isinstance(k, bool) or not isinstance(k, int) or k < 0:
                raise ConfigError(f"experiment.k[{i}]: expected a non-negative integer")
    if "u0_cos" in exp:
        for i, c in enumerate(exp["u0_cos"]):
            if isinstance(c, bool) or not isinstance(c, _NUM):
                raise ConfigError(f"experiment.u0_cos[{i}]: expected a number")
    if "f" in exp and exp["f"] not in ("tanh", "zero"):
        raise ConfigError("experiment.f: expected 'tanh' or 'zero'")


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"<file>: {exc}") from exc
    return validate_config(raw)


# --- helpers --------------------------------------------------------------------------

def sweep_values(cfg: dict) -> list[float]:
    sw = cfg["sweep"]
    if sw["eps"] is not None:
        eps = [float(e) for e in sw["eps"]]
    else:
        eps = [2.0**-k for k in range(sw["k_min"], sw["k_max"] + 1)]
    if sw["include_zero"] and 0.0 not in eps:
        eps.append(0.0)
    return sorted(eps, reverse=True)


def make_family(cfg: dict) -> CoefficientFamily:
    f = cfg["family"]
    if f["kind"] == "default":
        return default_family(a=float(f["a"]), eps_max=float(f["eps_max"]))
    return linear_family(lam=float(f["lam"]), boundary=float(f["boundary"]), potential_shift=f["potential_shift"])


def integrator_config(cfg: dict) -> IntegratorConfig:
    i = cfg["integrator"]
    return IntegratorConfig(dt=float(i["dt"]), scheme=i["scheme"], tolerance=float(i["tolerance"]))


def cosine_state(mesh: Mesh1D, coeffs) -> np.ndarray:
    x = mesh.nodes
    return sum(float(c) * np.cos(k * np.pi * x) for k, c in enumerate(coeffs)) + 0.0 * x


@dataclass
class Check:
    criterion: str
    name: str
    measured: float | None
    threshold: str
    passed: bool
    hard: bool = False

    def as_dict(self) -> dict:
        return {"criterion": self.criterion, "check": self.name, "measured": _clean(self.measured),
                "threshold": self.threshold, "passed": bool(self.passed), "hard": self.hard}


@dataclass
class ExperimentResult:
    name: str
    series: list[RateSeries]
    fits: dict[str, RateFit | None]
    checks: list[Check] = field(default_factory=list)
    certifications: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    tables: dict[str, list[dict]] = field(default_factory=dict)

    @property
    def primary(self) -> RateSeries:
        return self.series[0]

    @property
    def hard_failures(self) -> list[Check]:
        return [c for c in self.checks if c.hard and not c.passed]


def _clean(x):
    if isinstance(x, (np.floating, np.integer)):
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _series(name: str, eps, values, fam_delta: Callable[[float], float], **kw) -> RateSeries:
    eps = np.asarray(eps, dtype=float)
    vals = np.asarray(values, dtype=float)
    excluded = kw.pop("excluded", None)
    if excluded is None:
        excluded = eps == 0
    return RateSeries(eps, vals, np.array([fam_delta(e) for e in eps]), excluded=excluded, name=name, **kw)


def _fit(series: RateSeries, notes: list[str], mode: str = "power") -> RateFit | None:
    if np.any(series.eps == 0):
        notes.append(f"{series.name}: eps = 0 row kept in the table and excluded from the fit")
    try:
        return fit_rate(series, mode=mode)
    except ValueError as exc:
        notes.append(f"{series.name}: {exc}")
        return None


def _range_check(criterion: str, label: str, fit: RateFit | None, lo: float, hi: float) -> Check:
    x = fit.exponent if fit else None
    return Check(criterion, f"{label} exponent", x, f"in [{lo}, {hi}]", fit is not None and lo <= x <= hi)


def _spread_check(criterion: str, label: str, fit: RateFit | None, limit: float = 3.0) -> Check:
    x = fit.spread if fit else None
    return Check(criterion, f"{label} log-corrected spread", x, f"<= {limit}", fit is not None and x <= limit)


def certify_mesh(quantity: Callable[[Mesh1D, float], float], n: int, eps: float, tol: float,
                 label: str) -> dict:
    """Relative change of ``quantity`` at eps when the mesh is doubled."""
    a = quantity(Mesh1D.uniform(n), eps)
    b = quantity(Mesh1D.uniform(2 * n), eps)
    rel = abs(a - b) / max(abs(b), 1e-300)
    rec = {"quantity": label, "eps": eps, "n": n, "n_check": 2 * n, "value": a, "value_check": b,
           "relative_change": rel, "tolerance": tol, "passed": bool(rel < tol)}
    if not rec["passed"]:
        raise MeshCertificationError(
            f"{label} at eps={eps:g} changes by {rel:.3g} (>= {tol:g}) from n={n} to n={2 * n}")
    return rec


# --- experiments -------------------------------------------------------------------

def _run_resolvent(cfg, fam, mesh, eps_list, seed):
    o = cfg["experiment"]
    op0 = assemble_operator(fam, mesh, 0.0)

    def q(m, e):
        return operator_gap_norm(assemble_operator(fam, m, e), assemble_operator(fam, m, 0.0),
                                 o["in_norm"], o["out_norm"], seed=seed)

    vals = [0.0 if e == 0 else operator_gap_norm(assemble_operator(fam, mesh, e), op0, o["in_norm"],
                                                 o["out_norm"], seed=seed) for e in eps_list]
    notes: list[str] = []
    s = _series("resolvent", eps_list, vals, fam.delta)
    fit = _fit(s, notes)
    checks = [_range_check("1", "resolvent", fit, 0.9, 1.1),
              Check("1", "resolvent R^2", fit.r_squared if fit else None, ">= 0.98",
                    fit is not None and fit.r_squared >= 0.98)]
    return ExperimentResult("resolvent-rate", [s], {"resolvent": fit}, checks, notes=notes), q, "resolvent gap"


def _run_eigen(cfg, fam, mesh, eps_list, seed):
    ks = [int(k) for k in cfg["experiment"]["k"]]
    count = max(ks) + 2
    sys0 = eigenpairs(assemble_operator(fam, mesh, 0.0), count)
    systems = {e: sys0 if e == 0 else eigenpairs(assemble_operator(fam, mesh, e), count) for e in eps_list}
    series, fits, checks, notes = [], {}, [], []
    for k in ks:
        s = _series(f"eigen_k{k}", eps_list, [eigenvalue_gap(systems[e], sys0, k) for e in eps_list], fam.delta)
        fits[s.name] = _fit(s, notes)
        series.append(s)
        checks.append(_range_check("2", f"eigenvalue k={k}", fits[s.name], 0.9, 1.1))
    kq = max(ks)

    def q(m, e):
        c = kq + 2
        return eigenvalue_gap(eigenpairs(assemble_operator(fam, m, e), c), eigenpairs(assemble_operator(fam, m, 0.0), c), kq)

    return ExperimentResult("eigen-rate", series, fits, checks, notes=notes), q, f"eigenvalue gap k={kq}"


def _run_projection(cfg, fam, mesh, eps_list, seed):
    o = cfg["experiment"]
    m_rank = int(o["m"])

    def gap(m, e, sys0=None):
        s0 = sys0 or eigenpairs(assemble_operator(fam, m, 0.0), m_rank + 1)
        se = s0 if e == 0 else eigenpairs(assemble_operator(fam, m, e), m_rank + 1)
        return projection_gap(spectral_projection(se, m_rank), spectral_projection(s0, m_rank),
                              o["in_norm"], o["out_norm"])

    sys0 = eigenpairs(assemble_operator(fam, mesh, 0.0), m_rank + 1)
    notes: list[str] = []
    s = _series(f"projection_m{m_rank}", eps_list, [gap(mesh, e, sys0) for e in eps_list], fam.delta)
    fit = _fit(s, notes)
    checks = [_range_check("2", f"projection m={m_rank}", fit, 0.9, 1.1)]
    return ExperimentResult("projection-rate", [s], {s.name: fit}, checks, notes=notes), gap, "projection gap"


def _equilibrium_sweep(fam, mesh, eps_list):
    ref = find_equilibria(fam, mesh, 0.0)
    op0 = assemble_operator(fam, mesh, 0.0)
    counts, gaps, hyper = [], [], []
    for e in eps_list:
        eq = ref if e == 0 else find_equilibria(fam, mesh, e)
        counts.append(len(eq))
        hyper.append(all(eq.hyperbolic))
        gaps.append(float(np.max(equilibrium_gap(eq, ref, op0))) if len(eq) == len(ref) else math.nan)
    return ref, counts, gaps, hyper


def _run_equilibria(cfg, fam, mesh, eps_list, seed):
    ref, counts, gaps, hyper = _equilibrium_sweep(fam, mesh, eps_list)
    notes: list[str] = []
    constant = len(set(counts)) == 1 and counts[0] == len(ref)
    s = _series("equilibria", eps_list, gaps, fam.delta, excluded=np.isnan(gaps) | (np.asarray(eps_list) == 0),
                extra={"count": np.array(counts, dtype=float)})
    fit = _fit(s, notes) if constant else None
    if not constant:
        notes.append(f"equilibrium counts vary across the sweep: {counts}")
    expected = 3 if fam.name == "default" else len(ref)
    checks = [
        Check("3", "equilibrium count constant", float(counts[0]), f"== {expected} at every eps",
              constant and counts[0] == expected, hard=True),
        Check("3", "all equilibria hyperbolic", float(sum(hyper)), f"== {len(eps_list)}", all(hyper), hard=True),
        _range_check("3", "max equilibrium distance", fit, 0.9, 1.1),
    ]

    def q(m, e):
        r0 = find_equilibria(fam, m, 0.0)
        return float(np.max(equilibrium_gap(find_equilibria(fam, m, e), r0, assemble_operator(fam, m, 0.0))))

    return ExperimentResult("equilibria-rate", [s], {"equilibria": fit}, checks, notes=notes), q, "max equilibrium gap"


def _run_linear_semigroup(cfg, fam, mesh, eps_list, seed):
    o = cfg["experiment"]
    t = float(o["t"])
    op0 = assemble_operator(fam, mesh, 0.0)

    def q(m, e):
        return linear_semigroup_gap(assemble_operator(fam, m, e), assemble_operator(fam, m, 0.0), t)

    notes: list[str] = []
    vals = [0.0 if e == 0 else linear_semigroup_gap(assemble_operator(fam, mesh, e), op0, t) for e in eps_list]
    s = _series(f"linear_semigroup_t{t:g}", eps_list, vals, fam.delta)
    fit = _fit(s, notes)
    # envelope at the largest eps: C calibrated at t = 1, alpha a fraction of the first eps = 0 eigenvalue
    e_env = max(eps_list)
    ts = np.logspace(math.log10(o["envelope_t_min"]), math.log10(o["envelope_t_max"]), int(o["envelope_points"]))
    op_e = assemble_operator(fam, mesh, e_env)
    g = np.array([linear_semigroup_gap(op_e, op0, tt) for tt in ts])
    lam1 = float(full_eigensystem(op0).eigenvalues[0])
    alpha = float(o["envelope_alpha_fraction"]) * lam1
    d_lin = fam.delta_linear(e_env)
    g1 = linear_semigroup_gap(op_e, op0, 1.0)

    def violation(a):
        env_a = g1 / float(semigroup_envelope(1.0, d_lin, a)) * semigroup_envelope(ts, d_lin, a)
        return float(np.max(g / env_a)), env_a

    worst, env = violation(alpha)
    C = g1 / float(semigroup_envelope(1.0, d_lin, alpha))
    env_series = RateSeries(np.full(ts.size, e_env), g, np.full(ts.size, d_lin),
                            extra={"t": ts, "envelope": env}, name="envelope")
    checks = [
        _range_check("4", f"linear semigroup t={t:g}", fit, 0.9, 1.1),
        Check("4", "envelope violation factor", worst, f"<= {o['envelope_factor']}", worst <= o["envelope_factor"]),
    ]
    notes.append(f"envelope: eps={e_env:g}, alpha={alpha:.6g}, C={C:.6g} (calibrated at t=1)")
    notes.append(f"with alpha = lambda_1 = {lam1:.6g} the violation factor would be {violation(lam1)[0]:.4g}")
    return (ExperimentResult("linear-semigroup-rate", [s, env_series], {s.name: fit}, checks, notes=notes),
            q, f"linear semigroup gap t={t:g}")


def _run_semigroup(cfg, fam, mesh, eps_list, seed):
    o = cfg["experiment"]
    t = float(o["t"])
    icfg = integrator_config(cfg)

    def q(m, e):
        return nonlinear_semigroup_gap(fam, m, e, cosine_state(m, o["u0_cos"]), t, icfg)

    notes: list[str] = []
    vals = [0.0 if e == 0 else q(mesh, e) for e in eps_list]
    s = _series(f"semigroup_t{t:g}", eps_list, vals, fam.delta)
    fit = _fit(s, notes)
    checks = [_spread_check("5", "nonlinear semigroup", fit),
              Check("5", "nonlinear semigroup exponent (reported)", fit.exponent if fit else None, "> 0",
                    fit is not None and fit.exponent > 0)]
    return ExperimentResult("semigroup-rate", [s], {s.name: fit}, checks, notes=notes), q, f"nonlinear semigroup gap t={t:g}"


def _equilibria_proxy(fam):
    def q(m, e):
        r0 = find_equilibria(fam, m, 0.0)
        return float(np.max(equilibrium_gap(find_equilibria(fam, m, e), r0, assemble_operator(fam, m, 0.0))))
    return q


def _run_manifold(cfg, fam, mesh, eps_list, seed):
    from .manifolds import exponential_attraction_check, manifold_rate_experiment, trajectory_oracle, unstable_graph

    o = cfg["experiment"]
    notes: list[str] = []
    series, fit = manifold_rate_experiment(fam, mesh, eps_list, box_radius=o["box_radius"], grid_n=o["grid_n"])
    series.name = "manifold"
    theta = series.extra["theta"]
    pos = series.eps > 0
    vals = series.value[pos][::-1]  # increasing eps
    decreasing = bool(np.all(np.diff(vals) > 0))
    checks = [
        Check("6", "graph-transform contraction max theta", float(np.max(theta)), "< 1", bool(np.max(theta) < 1), hard=True),
        Check("6", "manifold gap strictly decreasing as eps decreases", None, "strict", decreasing),
        Check("6", "manifold gap exponent", fit.exponent, "> 0", fit.exponent > 0),
    ]
    if o["oracle"] or o["attraction"]:
        e_top = max(eps_list)
        eqs = find_equilibria(fam, mesh, e_top)
        idx = next(i for i, k in enumerate(eqs.unstable_dims) if k in (1, 2))
        g = unstable_graph(eqs.points[idx], fam, mesh, e_top, o["box_radius"], o["grid_n"])
        icfg = integrator_config(cfg)
        if o["oracle"]:
            err = trajectory_oracle(g, icfg)
            checks.append(Check("6", f"trajectory oracle (H1) at eps={e_top:g}", err, "<= 1e-4", err <= 1e-4))
        if o["attraction"]:
            af = exponential_attraction_check(g, cfg=icfg, seed=seed)
            checks.append(Check("6", "exponential attraction R^2 (min over trials)", af.r2_min, ">= 0.99",
                                af.r2_min >= 0.99))
            notes.append(f"attraction rate {af.gamma:.6g} vs first stable eigenvalue {af.alpha:.6g}")
    return ExperimentResult("manifold-rate", [series], {"manifold": fit}, checks, notes=notes), \
        _equilibria_proxy(fam), "max equilibrium gap (proxy for the manifold gap)"


def _hausdorff_oracle_check(fam, mesh, eps, cfg_attr, points: int, seed: int) -> Check:
    from scipy.spatial.distance import cdist

    from .manifolds import build_attractor, hausdorff_points, norm_coordinates

    rng = np.random.default_rng(seed)
    A = build_attractor(fam, mesh, 0.0, cfg_attr)
    B = build_attractor(fam, mesh, eps, cfg_attr)
    YA = norm_coordinates(A.op, A.points)
    YB = norm_coordinates(A.op, B.points)
    YA = YA[rng.choice(YA.shape[0], min(points, YA.shape[0]), replace=False)]
    YB = YB[rng.choice(YB.shape[0], min(points, YB.shape[0]), replace=False)]
    D = cdist(YA, YB)
    brute = max(D.min(axis=1).max(), D.min(axis=0).max())
    worst = 0.0
    for ordered in (False, True):
        worst = max(worst, abs(hausdorff_points(YA, YB, ordered)[2] - brute))
    return Check("7", f"Hausdorff kernel vs brute force ({YA.shape[0]}x{YB.shape[0]} points)", worst, "== 0",
                 worst == 0.0, hard=True)


def _run_attractor(cfg, fam, mesh, eps_list, seed):
    from dataclasses import replace

    from .manifolds import AttractorConfig, attractor_rate_experiment

    o = cfg["experiment"]
    acfg = AttractorConfig(samples_per_connection=int(o["samples_per_connection"]), t_max=float(o["t_max"]),
                           integrator=integrator_config(cfg))
    res = attractor_rate_experiment(fam, mesh, eps_list, acfg, resolution_factor=float(o["resolution_factor"]))
    s = res.series
    s.name = "attractor"
    notes = list(res.notes)
    excl = s.eps[(s.excluded) & (s.eps > 0)]
    if excl.size:
        notes.append("resolution-dominated eps: " + ", ".join(f"{e:g}" for e in excl))
    checks = [
        Check("7", "attractor exponent", res.power.exponent if res.power else None, ">= 0.85",
              res.power is not None and res.power.exponent >= 0.85),
        _spread_check("7", "attractor", res.logcorrected),
        _hausdorff_oracle_check(fam, mesh, max(eps_list), replace(acfg, samples_per_connection=150),
                                int(o["oracle_points"]), seed),
    ]
    return ExperimentResult("attractor-rate", [s], {"attractor": res.power}, checks, notes=notes), \
        _equilibria_proxy(fam), "max equilibrium gap (proxy for d_H)"


def _reduced_maps(fam, mesh, eps_list, M, dt):
    from .reduction import reduce, reduced_map

    sys0 = reduce(fam, mesh, 0.0, M)
    T0 = reduced_map(sys0, dt)
    maps = {e: T0 if e == 0 else reduced_map(reduce(fam, mesh, e, M), dt) for e in eps_list}
    return sys0, T0, maps


def _reduced_quantity(fam, M, dt, count, seed):
    from .reduction import Neighborhood, map_gap, reduce, reduced_map

    def q(m, e):
        pts = Neighborhood(np.zeros(M), np.r_[2.0, np.full(M - 1, 0.5)]).sample(count, seed)
        return map_gap(reduced_map(reduce(fam, m, e, M), dt), reduced_map(reduce(fam, m, 0.0, M), dt), pts)
    return q


def _reduced_dt_record(T, pts) -> dict:
    from .reduction import reduced_map

    half = reduced_map(T.system, T.dt / 2, T.t)
    change = float(np.max(np.linalg.norm(T(pts) - half(pts), axis=1)))
    return {"dt": T.dt, "scheme": "RK4", "t": T.t, "halving_change": change}


def _run_reduced_map(cfg, fam, mesh, eps_list, seed):
    from .reduction import Neighborhood, map_gap, reduced_attractor

    o = cfg["experiment"]
    M, dt = int(o["M"]), float(o["dt"])
    sys0, T0, maps = _reduced_maps(fam, mesh, eps_list, M, dt)
    A0 = reduced_attractor(sys0, samples_per_connection=200)
    nb = Neighborhood.around(A0.points, pad=0.25)
    pts = np.vstack([nb.sample(int(o["samples"]), seed), A0.points])
    notes: list[str] = []
    s = _series("reduced_map", eps_list, [map_gap(maps[e], T0, pts) for e in eps_list], fam.delta)
    fit = _fit(s, notes)
    checks = [_spread_check("9", "reduced map gap", fit),
              Check("9", "reduced map gap exponent (reported)", fit.exponent if fit else None, "> 0",
                    fit is not None and fit.exponent > 0)]
    res = ExperimentResult("reduced-map-rate", [s], {"reduced_map": fit}, checks, notes=notes)
    res.certifications["reduced_dt"] = _reduced_dt_record(T0, pts[:32])
    return res, _reduced_quantity(fam, M, dt, 32, seed), "reduced map gap"


def _run_shadowing(cfg, fam, mesh, eps_list, seed):
    from .reduction import (
        Neighborhood,
        lpsp_attractor_bound,
        reduced_attractor,
        reduced_hausdorff,
        shadowing_trials,
        window_sensitivity,
    )

    o = cfg["experiment"]
    M, dt = int(o["M"]), float(o["dt"])
    sys0, T0, maps = _reduced_maps(fam, mesh, eps_list, M, dt)
    spc = int(o["samples_per_connection"])
    A0 = reduced_attractor(sys0, samples_per_connection=spc)
    attractors = {e: A0 if e == 0 else reduced_attractor(maps[e].system, samples_per_connection=spc) for e in eps_list}
    allpts = np.vstack([A.points for A in attractors.values()])
    nb = Neighborhood.around(allpts, pad=0.25)
    ss = np.random.SeedSequence(seed)
    s_trials, s_starts, s_bound = (int(x.generate_state(1)[0]) for x in ss.spawn(3))
    starts = nb.sample(int(o["trials"]), s_starts)
    rows = shadowing_trials(T0, starts, int(o["window"]), float(o["noise"]), s_trials)
    ratios = np.array([r[3] for r in rows])
    L_hat = float(np.max(ratios))
    spread = float(np.max(ratios) / np.min(ratios))
    notes: list[str] = [f"L_hat = {L_hat:.6g} over {len(rows)} trials"]
    bounds, dists = [], []
    for e in eps_list:
        b = lpsp_attractor_bound(maps[e], T0, nb, L_hat, int(o["map_samples"]), s_bound,
                                 extra_points=attractors[e].points[:: max(1, spc // 50)],
                                 attractors=[attractors[e], A0])
        d = 0.0 if e == 0 else reduced_hausdorff(attractors[e], A0)[2]
        bounds.append(b)
        dists.append(d)
    bounds_a, dists_a = np.array(bounds), np.array(dists)
    s = _series("reduced_attractor", eps_list, dists_a, fam.delta,
                extra={"bound": bounds_a, "resolution": np.array([attractors[e].resolution for e in eps_list])})
    fit = _fit(s, notes)
    dominated = bool(np.all(dists_a <= bounds_a))
    checks = [
        Check("9", "shadowing ratio spread over trials", spread, "<= 2", spread <= 2.0),
        Check("9", "LpSP bound dominates reduced d_H at every eps", float(np.max(dists_a - bounds_a)), "<= 0",
              dominated, hard=True),
    ]
    if o["window_check"]:
        a, b, rel = window_sensitivity(T0, starts[: min(5, len(starts))], int(o["window"]), float(o["noise"]), s_trials)
        checks.append(Check("9", "window doubling changes L_hat", rel, "< 0.1", rel < 0.1))
    res = ExperimentResult("shadowing", [s], {"reduced_attractor": fit}, checks, notes=notes)
    res.tables["trials"] = [{"trial": r[0], "defect": r[1], "shadow_distance": r[2], "ratio": r[3]} for r in rows]
    res.certifications["reduced_dt"] = _reduced_dt_record(T0, starts[:32])
    return res, _reduced_quantity(fam, M, dt, 32, seed), "reduced map gap"


def _run_ode(cfg, fam, mesh, eps_list, seed):
    from .odeexample import ode_example_experiment

    o = cfg["experiment"]
    r = ode_example_experiment(float(o["mu"]), o["f"], eps_list, seed=seed)
    s = r.series
    s.name = "ode"
    notes = list(r.notes) + [f"gamma_hat={r.gamma:.6g} (R^2 {r.gamma_r2:.4f}), L_hat={r.L:.6g}, "
                             f"predicted exponent {r.predicted_exponent:.6g}"]
    if o["f"] == "zero":
        worst = float(np.max(s.value))
        checks = [Check("8", "zero nonlinearity gives d_H = 0", worst, "== 0", worst == 0.0, hard=True)]
    else:
        ok = r.fit is not None and r.fit.exponent >= r.predicted_exponent
        checks = [Check("8", "ODE d_H exponent >= gamma/(gamma+L)", r.fit.exponent if r.fit else None,
                        f">= {r.predicted_exponent:.6g}", ok)]
    return ExperimentResult("ode-example", [s], {"ode": r.fit}, checks, notes=notes), None, ""


def _run_equi_table(cfg, fam, mesh, eps_list, seed):
    o = cfg["experiment"]
    rng = np.random.default_rng(seed)
    rows, worst = [], 0.0
    for i in range(int(o["tuples"])):
        p = RateBoundParams(C=rng.uniform(0.5, 2.0), L=rng.uniform(0.2, 5.0), gamma=rng.uniform(0.2, 5.0),
                            c=rng.uniform(0.5, 2.0))
        d_max = p.c * p.gamma / (p.L * p.C)
        d = math.exp(rng.uniform(math.log(1e-8), math.log(0.5 * min(d_max, 1.0))))
        num = equi_attraction_bound(p, None, d)
        l, cbar = exponential_rate_bound(p)
        closed = cbar * d**l
        rel = abs(num - closed) / closed
        worst = max(worst, rel)
        rows.append({"tuple": i, "C": p.C, "L": p.L, "gamma": p.gamma, "c": p.c, "delta": d,
                     "numeric": num, "closed_form": closed, "exponent": l, "relative_error": rel})
    # bound versus delta(eps) = eps for Theta(t) = e^{-t}, C = L = 1
    p1 = RateBoundParams()
    vals = [equi_attraction_bound(p1, None, e) for e in eps_list]
    s = _series("equi_attraction", eps_list, vals, lambda e: e,
                extra={"closed_form": np.array([exponential_rate_bound_value(p1, e) if e > 0 else 0.0
                                                 for e in eps_list])})
    notes: list[str] = []
    fit = _fit(s, notes)
    checks = [
        Check("8", "numeric minimization vs closed form (max relative error)", worst, "<= 1e-9", worst <= 1e-9,
              hard=True),
        Check("8", "bound exponent vs gamma/(gamma+L) = 0.5", fit.exponent if fit else None, "0.5 +- 1e-8",
              fit is not None and abs(fit.exponent - 0.5) <= 1e-8),
    ]
    res = ExperimentResult("equi-attraction-table", [s], {"equi_attraction": fit}, checks, notes=notes)
    res.tables["tuples"] = rows
    return res, None, ""


RUNNERS: dict[str, Callable] = {
    "resolvent-rate": _run_resolvent,
    "eigen-rate": _run_eigen,
    "projection-rate": _run_projection,
    "equilibria-rate": _run_equilibria,
    "linear-semigroup-rate": _run_linear_semigroup,
    "semigroup-rate": _run_semigroup,
    "manifold-rate": _run_manifold,
    "attractor-rate": _run_attractor,
    "reduced-map-rate": _run_reduced_map,
    "shadowing": _run_shadowing,
    "ode-example": _run_ode,
    "equi-attraction-table": _run_equi_table,
}

DESCRIPTIONS = {
    "resolvent-rate": "norm of A_eps^-1 - A_0^-1 (L2 -> H1) against delta(eps)",
    "eigen-rate": "eigenvalue gaps |lambda_k(eps) - lambda_k(0)|",
    "projection-rate": "spectral projection gap onto the first m eigenfunctions",
    "equilibria-rate": "equilibrium count and matched H1 distances",
    "linear-semigroup-rate": "linear semigroup gap at fixed t plus a t-sweep envelope check",
    "semigroup-rate": "nonlinear semigroup gap at fixed t, log-corrected ratio",
    "manifold-rate": "unstable-manifold graph gap, contraction, oracle and attraction checks",
    "attractor-rate": "Hausdorff distance between attractor samples",
    "reduced-map-rate": "sup gap between reduced time-1 maps",
    "shadowing": "shadowing constant, window sensitivity and attractor bound dominance",
    "ode-example": "singularly perturbed ODE attractors against the eps = 0 limit",
    "equi-attraction-table": "numeric equi-attraction bound vs exponential closed form",
}

_PDE_INTEGRATOR = {"semigroup-rate", "manifold-rate", "attractor-rate"}
_NO_MESH = {"ode-example", "equi-attraction-table"}


def execute(cfg: dict) -> ExperimentResult:
    """Run a validated config and return the result (no files written)."""
    name = cfg["experiment"]["name"]
    seed = int(cfg["experiment"]["seed"])
    fam = make_family(cfg)
    mesh = Mesh1D.uniform(int(cfg["mesh"]["n"]))
    eps_list = sweep_values(cfg)
    res, quantity, label = RUNNERS[name](cfg, fam, mesh, eps_list, seed)
    certs = res.certifications
    if name in _NO_MESH:
        certs["mesh"] = {"applicable": False}
    elif cfg["mesh"]["certify"]:
        e_top = max(eps_list)
        certs["mesh"] = certify_mesh(quantity, int(cfg["mesh"]["n"]), e_top, float(cfg["mesh"]["certify_tol"]), label)
        res.checks.append(Check("mesh", "mesh certification", certs["mesh"]["relative_change"],
                                f"< {cfg['mesh']['certify_tol']}", True, hard=True))
    else:
        certs["mesh"] = {"skipped": True, "n": int(cfg["mesh"]["n"])}
    if name in _PDE_INTEGRATOR and cfg["integrator"]["certify"]:
        e_top = max(eps_list)
        op = assemble_operator(fam, mesh, e_top)
        u0 = cosine_state(mesh, cfg["experiment"].get("u0_cos", [0.0, 0.5]))
        rec = certify_dt(op, NonlinearTerm(fam, e_top), u0, integrator_config(cfg))
        rec["eps"] = e_top
        certs["dt"] = rec
        res.checks.append(Check("dt", "dt-halving certification", rec["halving_change"],
                                f"< {rec['tolerance']:g}", rec["passed"], hard=True))
    elif "dt" not in certs:
        certs["dt"] = {"applicable": name in _PDE_INTEGRATOR, "skipped": name in _PDE_INTEGRATOR}
    return res


def output_dir(cfg: dict) -> Path:
    base = os.environ.get(OUTPUT_ENV) or cfg["output"]["dir"]
    return Path(base) / cfg["experiment"]["name"]


def write_reports(res: ExperimentResult, cfg: dict, out: Path, elapsed: float | None = None) -> None:
    import scipy

    out.mkdir(parents=True, exist_ok=True)
    write_series_csv(out / "series.csv", res.series)
    for tname, rows in res.tables.items():
        _write_table(out / f"{tname}.csv", rows)
    s = res.primary
    fit = res.fits.get(s.name) if s.name in res.fits else next(iter(res.fits.values()), None)
    summary = {
        "experiment": res.name,
        "eps": [_clean(float(x)) for x in s.eps],
        "delta": [_clean(float(x)) for x in s.delta],
        "value": [_clean(float(x)) for x in s.value],
        "exponent": _clean(fit.exponent) if fit else None,
        "r2": _clean(fit.r_squared) if fit else None,
        "ratio_min": _clean(fit.ratio_min) if fit else None,
        "ratio_max": _clean(fit.ratio_max) if fit else None,
        "verdict": {
            "passed": all(c.passed for c in res.checks),
            "hard_failures": len(res.hard_failures),
            "checks": [c.as_dict() for c in res.checks],
        },
        "fits": {k: ({kk: _clean(vv) for kk, vv in f.as_dict().items()} if f else None) for k, f in res.fits.items()},
        "notes": res.notes,
    }
    (out / "fit.json").write_text(json.dumps(summary, indent=2, sort_keys=False) + "\n")
    meta = {
        "experiment": res.name,
        "seed": cfg["experiment"]["seed"],
        "config": cfg,
        "certifications": _jsonable(res.certifications),
        "versions": {"rdlab": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "kernel_backend": kernels.backend_name()},
        "elapsed_s": elapsed,
    }
    (out / "meta.json").write_text(json.dumps(_jsonable(meta), indent=2) + "\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return _clean(x)


def _write_table(path: Path, rows: list[dict]) -> None:
    import csv

    from .rates import _fmt

    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([v if isinstance(v, (int, str)) else _fmt(v) for v in r.values()])


def run_experiment(config_path, out_dir: Path | None = None) -> tuple[ExperimentResult, Path]:
    cfg = load_config(config_path)
    t0 = time.perf_counter()
    res = execute(cfg)
    out = out_dir or output_dir(cfg)
    write_reports(res, cfg, out, time.perf_counter() - t0)
    return res, out
