"""Rate fitting and the abstract equi-attraction bounds."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class BracketError(ValueError):
    """The objective is not unimodal on the search range."""


class InsufficientData(ValueError):
    """Too few usable points for a fit."""


# --- rate series and fits ----------------------------------------------------

@dataclass
class RateSeries:
    """(eps, value) measurements, kept sorted by eps descending.

    ``delta`` holds delta(eps); ``excluded`` marks rows left out of fits
    (zero values, resolution-dominated points) with a reason in ``notes``.
    """

    eps: np.ndarray
    value: np.ndarray
    delta: np.ndarray
    excluded: np.ndarray | None = None
    notes: list[str] = field(default_factory=list)
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        order = np.argsort(-np.asarray(self.eps, dtype=float), kind="stable")
        self.eps = np.asarray(self.eps, dtype=float)[order]
        self.value = np.asarray(self.value, dtype=float)[order]
        self.delta = np.asarray(self.delta, dtype=float)[order]
        if self.excluded is None:
            self.excluded = np.zeros(self.eps.size, dtype=bool)
        self.excluded = np.asarray(self.excluded, dtype=bool)[order]
        self.extra = {k: np.asarray(v)[order] for k, v in self.extra.items()}

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[float, float]], delta_fn: Callable[[float], float],
                   **kw) -> "RateSeries":
        eps = np.array([p[0] for p in pairs], dtype=float)
        val = np.array([p[1] for p in pairs], dtype=float)
        return cls(eps, val, np.array([delta_fn(e) for e in eps]), **kw)

    def logcorrected(self) -> np.ndarray:
        d = self.delta
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.value / (d * np.abs(np.log(d)))

    def write_csv(self, path) -> None:
        cols = ["eps", "delta", "value", "ratio_logcorrected", "excluded"] + list(self.extra)
        lc = self.logcorrected()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for i in range(self.eps.size):
                row = [_fmt(self.eps[i]), _fmt(self.delta[i]), _fmt(self.value[i]), _fmt(lc[i]),
                       int(self.excluded[i])]
                row += [_fmt(self.extra[k][i]) for k in self.extra]
                w.writerow(row)


def _fmt(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    return f"{x:.17g}"


def write_series_csv(path, series: Sequence[RateSeries]) -> None:
    """Several series in one file, tagged by a leading ``series`` column; missing extras are nan."""
    extras: list[str] = []
    for s in series:
        extras += [k for k in s.extra if k not in extras]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "eps", "delta", "value", "ratio_logcorrected", "excluded"] + extras)
        for s in series:
            lc = s.logcorrected()
            for i in range(s.eps.size):
                row = [s.name, _fmt(s.eps[i]), _fmt(s.delta[i]), _fmt(s.value[i]), _fmt(lc[i]),
                       int(s.excluded[i])]
                row += [_fmt(s.extra[k][i]) if k in s.extra else "nan" for k in extras]
                w.writerow(row)


@dataclass(frozen=True)
class RateFit:
    mode: str
    exponent: float
    intercept: float
    r_squared: float
    ratio_min: float
    ratio_max: float
    n_points: int
    non_converging: bool = False
    notes: tuple[str, ...] = ()

    @property
    def spread(self) -> float:
        return self.ratio_max / self.ratio_min if self.ratio_min > 0 else math.inf

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "exponent": self.exponent,
            "intercept": self.intercept,
            "r2": self.r_squared,
            "ratio_min": self.ratio_min,
            "ratio_max": self.ratio_max,
            "spread": self.spread,
            "n_points": self.n_points,
            "non_converging": self.non_converging,
            "notes": list(self.notes),
        }


def fit_rate(series: RateSeries, delta_fn: Callable[[float], float] | None = None,
             mode: Literal["power", "logcorrected"] = "power", min_points: int = 4) -> RateFit:
    """Least-squares slope of log value vs log delta, plus the log-corrected ratio range.

    Rows with value <= 0 or marked excluded are dropped (noted).
    """
    delta = series.delta if delta_fn is None else np.array([delta_fn(e) for e in series.eps])
    notes = []
    keep = ~series.excluded.copy()
    zero = series.value <= 0
    if np.any(zero & keep):
        notes.append(f"{int(np.sum(zero & keep))} non-positive value(s) excluded")
    keep &= ~zero
    if np.any(series.excluded):
        notes.append(f"{int(np.sum(series.excluded))} row(s) excluded by the experiment")
    if np.sum(keep) < min_points:
        raise InsufficientData(f"need at least {min_points} usable points, have {int(np.sum(keep))}")
    x = np.log(delta[keep])
    y = np.log(series.value[keep])
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot <= 1e-300:
        r2 = 1.0 if ss_res <= 1e-300 else 0.0
    else:
        r2 = max(0.0, 1.0 - ss_res / ss_tot)
    d = delta[keep]
    lc = series.value[keep] / (d * np.abs(np.log(d)))
    slope = float(slope)
    return RateFit(
        mode=mode,
        exponent=slope,
        intercept=float(intercept),
        r_squared=r2,
        ratio_min=float(np.min(lc)),
        ratio_max=float(np.max(lc)),
        n_points=int(np.sum(keep)),
        non_converging=slope <= 1e-9,
        notes=tuple(notes),
    )


# --- equi-attraction (abstract) -----------------------------------------------

@dataclass(frozen=True)
class RateBoundParams:
    """Constants of the abstract bounds.

    C, L: Lipschitz-growth estimate |T_eps(t)x - T_0(t)y| <= C e^{Lt}(|x-y| + delta).
    gamma, c: exponential attraction Theta(t) = c e^{-gamma t}.
    alpha_decay, beta, theta: constants of the linear semigroup estimate (labels only).
    """

    C: float = 1.0
    L: float = 1.0
    gamma: float = 1.0
    c: float = 1.0
    alpha_decay: float = 1.0
    beta: float = 0.5
    theta: float = 0.5
    delta: Callable[[float], float] = lambda eps: eps

    def __post_init__(self):
        for name in ("C", "L", "gamma", "c", "alpha_decay", "theta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.theta > 0.5:
            raise ValueError("theta must be at most 1/2")
        if not 0.25 <= self.beta <= 0.5:
            raise ValueError("beta must lie in [1/4, 1/2]")

    def Theta(self, t):
        return self.c * np.exp(-self.gamma * np.asarray(t, dtype=float))

    def Theta_inverse(self, nu):
        return np.log(self.c / np.asarray(nu, dtype=float)) / self.gamma


def _objective(params: RateBoundParams, Theta_inverse, delta_val: float):
    def F(log_nu: float) -> float:
        nu = math.exp(log_nu)
        expo = params.L * float(Theta_inverse(nu))
        if expo > 700.0:
            return math.inf
        return 2.0 * (params.C * math.exp(expo) * delta_val + nu)
    return F


def equi_attraction_bound(params: RateBoundParams, Theta_inverse: Callable | None, delta_val: float,
                          rel_tol: float = 1e-10, n_bracket: int = 400, return_info: bool = False):
    """min over nu in (0, c] of 2 (C e^{L Theta^{-1}(nu)} delta + nu), by golden-section search in log nu."""
    if Theta_inverse is None:
        Theta_inverse = params.Theta_inverse
    if delta_val < 0:
        raise ValueError("delta must be non-negative")
    if delta_val == 0:
        # infimum approached as nu -> 0+
        return (0.0, {"nu": 0.0, "zero_delta": True}) if return_info else 0.0
    F = _objective(params, Theta_inverse, delta_val)
    hi = math.log(params.c)
    lo = hi - 700.0
    grid = np.linspace(lo, hi, n_bracket)
    vals = np.array([F(g) for g in grid])
    k = int(np.argmin(vals))
    finite = np.isfinite(vals)
    # unimodality on the coarse grid: non-increasing before k, non-decreasing after
    left = vals[: k + 1][finite[: k + 1]]
    right = vals[k:]
    if np.any(np.diff(left) > 1e-12 * np.abs(left[1:])) or np.any(np.diff(right) < -1e-12 * np.abs(right[:-1])):
        raise BracketError("objective is not unimodal on the search range")
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, n_bracket - 1)]
    # golden-section search on [a, b]
    x1 = b - INV_PHI * (b - a)
    x2 = a + INV_PHI * (b - a)
    f1, f2 = F(x1), F(x2)
    while (b - a) > rel_tol * max(1.0, abs(a), abs(b)) * 1e-2 and (b - a) > 1e-14:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - INV_PHI * (b - a)
            f1 = F(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + INV_PHI * (b - a)
            f2 = F(x2)
    candidates = [(f1, x1), (f2, x2), (F(a), a), (F(b), b)]
    best, x = min(candidates)
    if return_info:
        return best, {"nu": math.exp(x), "zero_delta": False, "boundary": k in (0, n_bracket - 1)}
    return best


def exponential_rate_bound(params: RateBoundParams) -> tuple[float, float]:
    """Exponent l = gamma/(gamma+L) and prefactor cbar with bound cbar * delta^l.

    cbar = 2 c^{L/(gamma+L)} C^{gamma/(gamma+L)} [(L/gamma)^{-L/(gamma+L)} + (L/gamma)^{gamma/(gamma+L)}],
    the exact minimum of the objective for Theta(t) = c e^{-gamma t}; it reduces
    to 2 [(L/gamma)^{-L/(gamma+L)} + (L/gamma)^{gamma/(gamma+L)}] for c = C = 1.
    Valid while the minimizer (L C delta / gamma)^{l} c^{1-l} stays inside (0, c],
    i.e. for delta <= c gamma / (L C).
    """
    g, L, c, C = params.gamma, params.L, params.c, params.C
    l = g / (g + L)
    r = L / g
    cbar = 2.0 * c ** (L / (g + L)) * C**l * (r ** (-L / (g + L)) + r**l)
    return l, cbar


def exponential_rate_bound_value(params: RateBoundParams, delta_val: float) -> float:
    l, cbar = exponential_rate_bound(params)
    if delta_val > params.c * params.gamma / (params.L * params.C):
        # minimizer pinned at nu = c
        return 2.0 * (params.C * delta_val + params.c)
    return cbar * delta_val**l
