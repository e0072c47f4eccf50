"""Parametrized coefficient families for the Robin reaction-diffusion problem.

A family bundles the diffusion p, potential V, boundary potential b, the
shift lam and the interior/boundary reactions f, g, all depending on a
perturbation parameter eps >= 0, together with functions bounding how far
each ingredient moves away from its eps = 0 value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

Endpoint = int  # 0 for x = 0, 1 for x = 1
RateFn = Callable[[float], float]


class CoefficientError(ValueError):
    """Raised when coefficient data violates a positivity or bound invariant."""


def _zero(eps: float) -> float:
    return 0.0


def _identity(eps: float) -> float:
    return float(eps)


def _const(c: float) -> RateFn:
    return lambda eps: float(c)


# Sharp trace constant: u(0)^2 + u(1)^2 <= coth(1/2) * ||u||_{H1}^2 on (0, 1).
TRACE_CONSTANT = 1.0 / math.tanh(0.5)


@dataclass(frozen=True)
class Reaction:
    """Reaction terms of the form

    f(u) = a c(u) - cubic c(u)^3 + tanh_f(eps) tanh(c(u))
    g(u) = lin_g c(u) + tanh_g(eps) tanh(c(u))

    where c is a C^3 clamp equal to the identity on |u| <= u_max and
    saturating at u_max + width / 2.  With ``u_max=None`` no clamp is applied
    (used for exactly linear test problems).
    """

    a: float = 5.0
    cubic: float = 1.0
    tanh_f: RateFn = _zero
    lin_g: float = 0.0
    tanh_g: RateFn = _const(0.25)
    u_max: float | None = 3.0
    width: float = 1.0

    def clamp(self, u):
        """Return (c(u), c'(u))."""
        u = np.asarray(u, dtype=float)
        if self.u_max is None:
            return u.copy(), np.ones_like(u)
        au = np.abs(u)
        if au.size == 0 or float(np.max(au)) <= self.u_max:
            return u.copy(), np.ones_like(u)
        t = np.clip((au - self.u_max) / self.width, 0.0, 1.0)
        t3 = t * t * t
        ramp = t - t3 * t * (2.5 - 3.0 * t + t * t)
        c = np.where(au <= self.u_max, u, np.sign(u) * (self.u_max + self.width * ramp))
        dc = np.where(au <= self.u_max, 1.0, 1.0 - t3 * (10.0 - 15.0 * t + 6.0 * t * t))
        return c, dc

    def f(self, u, eps: float):
        c, _ = self.clamp(u)
        tf = self.tanh_f(eps)
        out = c * (self.a - self.cubic * c * c)
        if tf != 0.0:
            out += tf * np.tanh(c)
        return out

    def df(self, u, eps: float):
        c, dc = self.clamp(u)
        th = np.tanh(c)
        return (self.a - 3.0 * self.cubic * c * c + self.tanh_f(eps) * (1.0 - th * th)) * dc

    def g(self, u, eps: float):
        c, _ = self.clamp(u)
        return self.lin_g * c + self.tanh_g(eps) * np.tanh(c)

    def dg(self, u, eps: float):
        c, dc = self.clamp(u)
        th = np.tanh(c)
        return (self.lin_g + self.tanh_g(eps) * (1.0 - th * th)) * dc

    def coefficients(self, eps: float) -> np.ndarray:
        """Flat parameter vector consumed by the compiled kernels."""
        u_max = math.inf if self.u_max is None else self.u_max
        return np.array(
            [self.a, self.cubic, self.tanh_f(eps), self.lin_g, self.tanh_g(eps), u_max, self.width],
            dtype=float,
        )

    @property
    def saturation(self) -> float:
        return math.inf if self.u_max is None else self.u_max + 0.5 * self.width


@dataclass(frozen=True)
class CoefficientFamily:
    """The eps-parametrized problem data and its perturbation-size functions."""

    p: Callable[[np.ndarray, float], np.ndarray]
    V: Callable[[np.ndarray, float], np.ndarray]
    b: Callable[[Endpoint, float], float]
    lam: float
    reaction: Reaction
    p_gap: RateFn = _zero
    eta: RateFn = _zero
    tau: RateFn = _zero
    kappa: RateFn = _zero
    xi: RateFn = _zero
    m0: float = 0.5
    eps_max: float = 0.0625
    test_mode: bool = False
    name: str = "custom"

    def __post_init__(self):
        if self.m0 < 0 or (self.m0 == 0 and not self.test_mode):
            raise CoefficientError("m0 must be positive outside test mode")

    def f(self, u, eps: float):
        return self.reaction.f(u, eps)

    def g(self, u, eps: float):
        return self.reaction.g(u, eps)

    def df(self, u, eps: float):
        return self.reaction.df(u, eps)

    def dg(self, u, eps: float):
        return self.reaction.dg(u, eps)

    def delta(self, eps: float) -> float:
        """Combined perturbation size p-gap + eta + tau + kappa + xi."""
        return self.p_gap(eps) + self.eta(eps) + self.tau(eps) + self.kappa(eps) + self.xi(eps)

    def delta_linear(self, eps: float) -> float:
        """Perturbation size of the linear part only: p-gap + eta + tau."""
        return self.p_gap(eps) + self.eta(eps) + self.tau(eps)

    def upper_bound(self, n_samples: int = 2001, n_eps: int = 9) -> float:
        """Constant M0 with energy norm^2 <= M0 * H1 norm^2, by dense sampling.

        Interior part bounded by max(sup p, sup(lam + V)); the endpoint terms
        are controlled through the trace constant coth(1/2).
        """
        x = np.linspace(0.0, 1.0, n_samples)
        worst = 0.0
        for eps in np.linspace(0.0, self.eps_max, n_eps):
            p = np.max(self.p(x, eps))
            c = np.max(self.lam + self.V(x, eps))
            bnd = max(self.lam + self.b(0, eps), self.lam + self.b(1, eps), 0.0)
            worst = max(worst, max(p, c) + bnd * TRACE_CONSTANT)
        return float(worst)

    @property
    def M0(self) -> float:
        return self.upper_bound()

    def check(self, n_samples: int = 2001, n_eps: int = 9, n_u: int = 4001) -> None:
        """Verify positivity and the declared perturbation bounds by sampling.

        Raises CoefficientError on the first violation.
        """
        x = np.linspace(0.0, 1.0, n_samples)
        s = self.reaction.saturation
        u_span = 2.0 * (s if math.isfinite(s) else 10.0)
        u = np.linspace(-u_span, u_span, n_u)
        p0, V0 = self.p(x, 0.0), self.V(x, 0.0)
        b0 = [self.b(0, 0.0), self.b(1, 0.0)]
        f0, g0 = self.f(u, 0.0), self.g(u, 0.0)
        tol = 1e-12
        for eps in np.linspace(0.0, self.eps_max, n_eps):
            p, V = self.p(x, eps), self.V(x, eps)
            if np.min(p) < self.m0 - tol:
                raise CoefficientError(f"p below m0 at eps={eps}")
            if np.min(self.lam + V) < self.m0 - tol:
                raise CoefficientError(f"lam + V below m0 at eps={eps}")
            for e in (0, 1):
                if self.lam + self.b(e, eps) < self.m0 - tol:
                    raise CoefficientError(f"lam + b below m0 at endpoint {e}, eps={eps}")
            checks = [
                ("p-gap", np.max(np.abs(p - p0)), self.p_gap(eps)),
                ("eta", np.max(np.abs(V - V0)), self.eta(eps)),
                ("tau", max(abs(self.b(e, eps) - b0[e]) for e in (0, 1)), self.tau(eps)),
                ("kappa", np.max(np.abs(self.f(u, eps) - f0)), self.kappa(eps)),
                ("xi", np.max(np.abs(self.g(u, eps) - g0)), self.xi(eps)),
            ]
            for label, measured, bound in checks:
                if measured > bound + tol:
                    raise CoefficientError(
                        f"{label} bound violated at eps={eps}: {measured:.3e} > {bound:.3e}"
                    )


def default_family(a: float = 5.0, eps_max: float = 0.0625) -> CoefficientFamily:
    """All five perturbation sizes active and proportional to eps."""
    return CoefficientFamily(
        p=lambda x, eps: 1.0 + eps * np.sin(2.0 * np.pi * np.asarray(x, dtype=float)),
        V=lambda x, eps: eps * np.cos(np.pi * np.asarray(x, dtype=float)),
        b=lambda e, eps: float(eps),
        lam=1.0,
        reaction=Reaction(
            a=a,
            cubic=1.0,
            tanh_f=_identity,
            tanh_g=lambda eps: 0.25 * (1.0 + eps),
        ),
        p_gap=_identity,
        eta=_identity,
        tau=_identity,
        kappa=_identity,
        xi=lambda eps: 0.25 * eps,
        m0=0.5,
        eps_max=eps_max,
        name="default",
    )


def linear_family(
    lam: float = 1.0,
    boundary: float = 1.0,
    reaction: Reaction | None = None,
    potential_shift: bool = False,
    test_mode: bool = False,
    m0: float | None = None,
    name: str = "linear",
) -> CoefficientFamily:
    """Constant-coefficient family: p = 1, V = 0 (or eps), total boundary weight ``boundary``.

    ``boundary`` is lam + b, so boundary = 0 gives a Neumann problem (test mode only).
    ``potential_shift`` sets V = eps, which shifts every eigenvalue by exactly eps.
    """
    if reaction is None:
        reaction = Reaction(a=0.0, cubic=0.0, tanh_f=_zero, lin_g=0.0, tanh_g=_zero, u_max=None)
    if m0 is None:
        m0 = min(1.0, lam, boundary) if not test_mode else 0.0
    b_val = boundary - lam
    return CoefficientFamily(
        p=lambda x, eps: np.ones_like(np.asarray(x, dtype=float)),
        V=(lambda x, eps: eps * np.ones_like(np.asarray(x, dtype=float)))
        if potential_shift
        else (lambda x, eps: np.zeros_like(np.asarray(x, dtype=float))),
        b=lambda e, eps: b_val,
        lam=lam,
        reaction=reaction,
        eta=_identity if potential_shift else _zero,
        m0=m0,
        test_mode=test_mode,
        name=name,
    )


def zero_reaction() -> Reaction:
    return Reaction(a=0.0, cubic=0.0, tanh_f=_zero, lin_g=0.0, tanh_g=_zero, u_max=None)
