"""Singularly perturbed second-order ODE: eps x'' + x' = -mu x + f(x), N = 1.

Written with v = eps x' as x' = v / eps, v' = -mu x - v / eps + f(x).  The
eps = 0 limit x' = -mu x + f(x) is embedded in (x, v) space as (x, 0).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .manifolds import hausdorff_points
from .rates import RateFit, RateSeries, fit_rate


class StiffnessFailure(RuntimeError):
    """The implicit integrator gave up (step rejection cascade)."""


@dataclass(frozen=True)
class Nonlinearity:
    f: Callable[[np.ndarray], np.ndarray]
    df: Callable[[np.ndarray], np.ndarray]
    name: str


def nonlinearity(choice: str = "tanh", scale: float = 2.0) -> Nonlinearity:
    if choice == "tanh":
        return Nonlinearity(lambda x: scale * np.tanh(x), lambda x: scale / np.cosh(x) ** 2, f"{scale:g}tanh")
    if choice == "zero":
        return Nonlinearity(np.zeros_like, np.zeros_like, "zero")
    raise ValueError(f"unknown nonlinearity {choice!r}")


@dataclass(frozen=True)
class ODEConfig:
    rtol: float = 1e-10
    atol: float = 1e-12
    launch: float = 1e-6
    arrive_tol: float = 1e-8
    t_max: float = 200.0
    samples_per_connection: int = 20000


def rhs(eps: float, mu: float, nl: Nonlinearity):
    def F(t, y):
        x, v = y
        return [v / eps, -mu * x - v / eps + float(nl.f(np.asarray(x)))]

    def J(t, y):
        return [[0.0, 1.0 / eps], [-mu + float(nl.df(np.asarray(y[0]))), -1.0 / eps]]

    return F, J


def flow(eps: float, mu: float, nl: Nonlinearity, y0, t_eval: np.ndarray, cfg: ODEConfig) -> np.ndarray:
    """States (len(t_eval), 2); eps = 0 uses the embedded limit flow (x, 0)."""
    y0 = np.asarray(y0, dtype=float)
    t_end = float(t_eval[-1])
    if eps == 0:
        sol = solve_ivp(lambda t, x: -mu * x + nl.f(x), (0.0, t_end), y0[:1], method="Radau",
                        t_eval=t_eval, rtol=cfg.rtol, atol=cfg.atol,
                        jac=lambda t, x: [[-mu + float(nl.df(x[0]))]])
        if not sol.success:
            raise StiffnessFailure(sol.message)
        out = np.zeros((t_eval.size, 2))
        out[:, 0] = sol.y[0]
        if t_eval[0] == 0.0:
            out[0, 1] = y0[1]  # the limit semigroup is the identity at t = 0
        return out
    F, J = rhs(eps, mu, nl)
    sol = solve_ivp(F, (0.0, t_end), y0, method="Radau", t_eval=t_eval, jac=J, rtol=cfg.rtol, atol=cfg.atol)
    if not sol.success:
        raise StiffnessFailure(sol.message)
    return sol.y.T


def limit_equilibria(mu: float, nl: Nonlinearity, span: float = 50.0, n_grid: int = 20001) -> np.ndarray:
    """Roots of -mu x + f(x) by sign changes on a grid refined with Brent's method."""
    g = lambda x: -mu * x + float(nl.f(np.asarray(x)))  # noqa: E731
    xs = np.linspace(-span, span, n_grid)
    vals = -mu * xs + nl.f(xs)
    roots = []
    for i in range(xs.size - 1):
        if vals[i] == 0.0:
            roots.append(xs[i])
        elif vals[i] * vals[i + 1] < 0:
            roots.append(brentq(g, xs[i], xs[i + 1], xtol=1e-15, rtol=1e-15))
    return np.array(sorted(roots))


def bisect_positive_root(mu: float, scale: float = 2.0, tol: float = 1e-14) -> float:
    """Positive root of mu x = scale tanh(x) by plain bisection (needs scale > mu)."""
    lo, hi = 1e-12, scale / mu + 1.0
    g = lambda x: mu * x - scale * math.tanh(x)  # noqa: E731
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if g(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _resample(P: np.ndarray, count: int):
    seg = np.linalg.norm(np.diff(P, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    target = np.linspace(0.0, s[-1], count)
    return np.column_stack([np.interp(target, s, P[:, j]) for j in range(P.shape[1])]), float(s[-1])


@dataclass
class ODEAttractor:
    points: np.ndarray  # (count, 2)
    equilibria: np.ndarray
    resolution: float
    eps: float


def build_ode_attractor(eps: float, mu: float, nl: Nonlinearity, cfg: ODEConfig | None = None) -> ODEAttractor:
    """Equilibria (x*, 0) plus arc-length samples of the connections leaving unstable ones."""
    cfg = cfg or ODEConfig()
    xe = limit_equilibria(mu, nl)
    E = np.column_stack([xe, np.zeros_like(xe)])
    points = [e for e in E]
    resolution = 0.0
    for i, x0 in enumerate(xe):
        a = -mu + float(nl.df(np.asarray(x0)))
        if a <= 0:
            continue
        if eps == 0:
            d = np.array([1.0, 0.0])
        else:
            A = np.array([[0.0, 1.0 / eps], [a, -1.0 / eps]])
            w, V = np.linalg.eig(A)
            d = np.real(V[:, int(np.argmax(w.real))])
            d /= np.linalg.norm(d)
        for sign in (1.0, -1.0):
            t_eval = np.linspace(0.0, cfg.t_max, int(cfg.t_max * 200) + 1)
            Y = flow(eps, mu, nl, E[i] + sign * cfg.launch * d, t_eval, cfg)
            dist = np.linalg.norm(Y[:, None, :] - E[None, :, :], axis=2)
            dist[:, i] = np.inf
            hit = np.where(np.min(dist, axis=1) <= cfg.arrive_tol)[0]
            if hit.size == 0:
                raise StiffnessFailure(f"connection from x={x0:.6g} did not settle by t={cfg.t_max:g}")
            k = int(hit[0])
            target = int(np.argmin(dist[k]))
            P = np.vstack([E[i], Y[: k + 1], E[target]])
            S, length = _resample(P, cfg.samples_per_connection)
            resolution = max(resolution, length / (cfg.samples_per_connection - 1))
            points.extend(S[1:-1])
    return ODEAttractor(np.array(points), E, resolution, float(eps))


def ode_hausdorff(A: ODEAttractor, B: ODEAttractor) -> float:
    return hausdorff_points(A.points, B.points, ordered=False)[2]


def _polyline_dist(Q: np.ndarray, P: np.ndarray) -> np.ndarray:
    A = P[:-1]
    D = P[1:] - A
    dd = np.maximum(np.sum(D * D, axis=1), 1e-300)
    out = np.empty(Q.shape[0])
    for i, q in enumerate(Q):
        t = np.clip(np.sum((q - A) * D, axis=1) / dd, 0.0, 1.0)
        out[i] = np.sqrt(np.min(np.sum((A + t[:, None] * D - q) ** 2, axis=1)))
    return out


def measure_attraction_rate(eps: float, mu: float, nl: Nonlinearity, attractor: ODEAttractor,
                            trials: int = 12, radius: float = 3.0, t_end: float = 12.0, t_start: float = 1.0,
                            floor: float | None = None, seed: int = 0, cfg: ODEConfig | None = None):
    """gamma from an exponential fit of sup over trials of dist(T(t) u0, A); returns (gamma, r2)."""
    cfg = cfg or ODEConfig()
    rng = np.random.default_rng(seed)
    t_eval = np.linspace(0.0, t_end, 241)
    sup = np.zeros(t_eval.size)
    # attractor as an ordered polyline: equilibria order along x
    P = attractor.points[np.argsort(attractor.points[:, 0])]
    for _ in range(trials):
        u0 = rng.uniform(-radius, radius, 2)
        Y = flow(eps, mu, nl, u0, t_eval, cfg)
        sup = np.maximum(sup, _polyline_dist(Y, P))
    floor = floor if floor is not None else max(100.0 * attractor.resolution ** 2, 1e-8)
    sel = (t_eval >= t_start) & (sup > floor)
    if np.sum(sel) < 5:
        raise ValueError("too few points above the floor for the attraction fit")
    t, y = t_eval[sel], np.log(sup[sel])
    slope, icept = np.polyfit(t, y, 1)
    resid = y - (slope * t + icept)
    r2 = 1.0 - float(np.sum(resid**2) / np.sum((y - y.mean()) ** 2))
    return -float(slope), r2


def measure_lipschitz_growth(eps: float, mu: float, nl: Nonlinearity, pairs: int = 12, radius: float = 2.0,
                             sep: float = 1e-6, t_end: float = 5.0, seed: int = 0,
                             cfg: ODEConfig | None = None) -> float:
    """Smallest L with |T(t)x - T(t)y| <= e^{Lt} |x - y| over sampled pairs and t in (0.5, t_end]."""
    cfg = cfg or ODEConfig()
    rng = np.random.default_rng(seed)
    t_eval = np.linspace(0.0, t_end, 101)
    best = -math.inf
    for k in range(pairs):
        x = rng.uniform(-radius, radius, 2)
        if k == 0:
            x = np.array([1e-3, 0.0])  # through the saddle region
        d = rng.normal(size=2)
        y = x + sep * d / np.linalg.norm(d)
        X = flow(eps, mu, nl, x, t_eval, cfg)
        Yt = flow(eps, mu, nl, y, t_eval, cfg)
        ratio = np.linalg.norm(X - Yt, axis=1) / sep
        sel = t_eval > 0.5
        best = max(best, float(np.max(np.log(ratio[sel]) / t_eval[sel])))
    return best


@dataclass
class ODEExampleResult:
    series: RateSeries
    fit: RateFit | None
    gamma: float
    gamma_r2: float
    L: float
    predicted_exponent: float
    x_bar: float
    notes: list[str] = field(default_factory=list)


def ode_example_experiment(mu: float = 1.0, f_choice: str = "tanh", eps_sweep: Sequence[float] = (),
                           cfg: ODEConfig | None = None, seed: int = 0) -> ODEExampleResult:
    """d_H(A_eps, A_0) over the sweep with a power fit against eps, plus the measured gamma and L."""
    cfg = cfg or ODEConfig()
    nl = nonlinearity(f_choice)
    eps_sweep = list(eps_sweep) or [2.0**-k for k in range(4, 11)]
    A0 = build_ode_attractor(0.0, mu, nl, cfg)
    vals, res = [], []
    for e in eps_sweep:
        if e == 0:
            vals.append(0.0)
            res.append(A0.resolution)
            continue
        A = build_ode_attractor(e, mu, nl, cfg)
        vals.append(ode_hausdorff(A, A0))
        res.append(max(A.resolution, A0.resolution))
    eps_a = np.asarray(eps_sweep, dtype=float)
    series = RateSeries(eps_a, np.array(vals), eps_a.copy(), extra={"resolution": np.array(res)}, name="ode")
    notes = []
    try:
        fit = fit_rate(series, mode="power")
    except ValueError as exc:
        fit = None
        notes.append(str(exc))
    e_ref = float(min(e for e in eps_sweep if e > 0)) if any(e > 0 for e in eps_sweep) else 0.0
    gamma, r2, L = math.nan, math.nan, math.nan
    if f_choice != "zero" and e_ref > 0:
        Aref = build_ode_attractor(e_ref, mu, nl, cfg)
        gamma, r2 = measure_attraction_rate(e_ref, mu, nl, Aref, seed=seed, cfg=cfg)
        L = max(measure_lipschitz_growth(e_ref, mu, nl, seed=seed, cfg=cfg),
                measure_lipschitz_growth(0.0, mu, nl, seed=seed, cfg=cfg))
    pred = gamma / (gamma + L) if np.isfinite(gamma) and np.isfinite(L) else math.nan
    xb = bisect_positive_root(mu) if f_choice == "tanh" and 2.0 > mu else 0.0
    return ODEExampleResult(series, fit, gamma, r2, L, pred, xb, notes)
