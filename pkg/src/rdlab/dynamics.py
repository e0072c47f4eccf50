"""Time stepping, equilibria and semigroup gaps for M u' + K u = M f(u) + B g(u)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Literal, Sequence

import numpy as np
from scipy import linalg
from scipy.linalg.lapack import dpbtrf, dpbtrs

from .family import TRACE_CONSTANT, CoefficientFamily
from .fem import DiscreteOperator, Mesh1D, NormTag, assemble_operator, weighted_operator_norm
from .spectral import EigenSystem, eigenpairs

Scheme = Literal["IMEX-Euler", "IMEX-CN"]
DIVERGENCE_LIMIT = 1e6


class DivergenceError(FloatingPointError):
    """The trajectory left any reasonable bounded set (dt too large?)."""


class CardinalityMismatch(ValueError):
    """Equilibrium sets cannot be paired bijectively."""


@dataclass(frozen=True)
class NonlinearTerm:
    fam: CoefficientFamily
    eps: float

    def load(self, op: DiscreteOperator, u) -> np.ndarray:
        """h(u) = M f(u) + B g(u) (columnwise for 2D u)."""
        u = np.asarray(u, dtype=float)
        out = op.M.matvec(self.fam.f(u, self.eps))
        i0, i1 = op.boundary_nodes
        out[i0] += self.fam.g(u[i0], self.eps)
        out[i1] += self.fam.g(u[i1], self.eps)
        return out

    def jacobian_bands(self, op: DiscreteOperator, u):
        """Bands (lower, diag, upper) of M diag(f'(u)) + B diag(g'(u))."""
        d = self.fam.df(u, self.eps)
        diag = op.M.diag * d
        upper = op.M.off * d[1:]
        lower = op.M.off * d[:-1]
        i0, i1 = op.boundary_nodes
        diag[i0] += self.fam.dg(u[i0], self.eps)
        diag[i1] += self.fam.dg(u[i1], self.eps)
        return lower, diag, upper

    def jacobian_dense(self, op: DiscreteOperator, u) -> np.ndarray:
        lo, d, up = self.jacobian_bands(op, u)
        return np.diag(d) + np.diag(up, 1) + np.diag(lo, -1)

    def lipschitz_bound(self, n_u: int = 20001) -> float:
        """C with |h(u) - h(v)|_{H1 dual} <= C |u - v|_{H1}: sup|f'| + sup|g'| coth(1/2)."""
        s = self.fam.reaction.saturation
        span = 2.0 * (s if math.isfinite(s) else 10.0)
        x = np.linspace(-span, span, n_u)
        lf = float(np.max(np.abs(self.fam.df(x, self.eps))))
        lg = float(np.max(np.abs(self.fam.dg(x, self.eps))))
        return lf + lg * TRACE_CONSTANT


def dual_h1_norm(op: DiscreteOperator, load) -> float:
    """Norm of a load vector as a functional on H1: sqrt(l^T G^{-1} l)."""
    load = np.asarray(load, dtype=float)
    return float(np.sqrt(np.dot(load, op.G.solve(load))))


def lipschitz_ratio_sample(nl: NonlinearTerm, op: DiscreteOperator, n_pairs: int = 100,
                           scale: float = 3.0, seed: int = 0) -> float:
    """Largest sampled |h(u) - h(v)|_{H1 dual} / |u - v|_{H1}."""
    rng = np.random.default_rng(seed)
    x = op.mesh.nodes
    worst = 0.0
    for _ in range(n_pairs):
        k = rng.integers(1, 6, size=2)
        u = scale * rng.uniform(-1, 1) * np.cos(k[0] * np.pi * x) + rng.normal(0, 0.3, x.size)
        v = u + rng.uniform(0.01, 1.0) * (np.cos(k[1] * np.pi * x) + rng.normal(0, 0.3, x.size))
        d = u - v
        ratio = dual_h1_norm(op, nl.load(op, u) - nl.load(op, v)) / np.sqrt(op.G.quad(d))
        worst = max(worst, ratio)
    return worst


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-3
    scheme: Scheme = "IMEX-CN"
    t_final: float = 1.0
    tolerance: float = 1e-6

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.scheme not in ("IMEX-Euler", "IMEX-CN"):
            raise ValueError(f"unknown scheme {self.scheme!r}")

    def halved(self) -> "IntegratorConfig":
        return IntegratorConfig(self.dt / 2, self.scheme, self.t_final, self.tolerance)


class Stepper:
    """Factored implicit operator for one (op, dt, scheme) combination."""

    def __init__(self, op: DiscreteOperator, nl: NonlinearTerm, dt: float, scheme: Scheme):
        self.op, self.nl, self.dt, self.scheme = op, nl, float(dt), scheme
        theta = 1.0 if scheme == "IMEX-Euler" else 0.5
        self.theta = theta
        ab = np.zeros((2, op.n))
        ab[0, 1:] = op.M.off + theta * dt * op.K.off
        ab[1] = op.M.diag + theta * dt * op.K.diag
        c, info = dpbtrf(ab, lower=0)
        if info != 0:
            raise linalg.LinAlgError("implicit step matrix is not positive definite")
        self._chol = c

    def _solve(self, b):
        x, info = dpbtrs(self._chol, b, lower=0)
        if info != 0:
            raise linalg.LinAlgError("triangular solve failed")
        return x

    def __call__(self, u: np.ndarray) -> np.ndarray:
        op, nl, dt = self.op, self.nl, self.dt
        Mu = op.M.matvec(u)
        if self.scheme == "IMEX-Euler":
            return self._solve(Mu + dt * nl.load(op, u))
        # midpoint predictor by a half implicit-explicit Euler step, then trapezoid on K
        half = self._solve(Mu + 0.5 * dt * nl.load(op, u))
        rhs = Mu - 0.5 * dt * op.K.matvec(u) + dt * nl.load(op, half)
        return self._solve(rhs)


def step(u, op: DiscreteOperator, nl: NonlinearTerm, cfg: IntegratorConfig) -> np.ndarray:
    return Stepper(op, nl, cfg.dt, cfg.scheme)(np.asarray(u, dtype=float))


def _step_count(t: float, dt: float) -> tuple[int, float]:
    n = int(math.floor(t / dt + 1e-9))
    rem = t - n * dt
    if rem <= 1e-9 * dt:
        rem = 0.0
    return n, rem


def evolve(u0, t: float, op: DiscreteOperator, nl: NonlinearTerm, cfg: IntegratorConfig,
           record_every: int | None = None):
    """State at time t; with ``record_every`` also return (times, states) sampled every k steps."""
    if t < 0:
        raise ValueError("t must be non-negative")
    u = np.array(u0, dtype=float)
    if u.shape != (op.n,):
        raise ValueError("state length does not match the operator")
    n, rem = _step_count(t, cfg.dt)
    stepper = Stepper(op, nl, cfg.dt, cfg.scheme)
    times, states = [0.0], [u.copy()]
    G = op.G
    for k in range(1, n + 1):
        u = stepper(u)
        if k % 16 == 0 or k == n:
            if not np.all(np.isfinite(u)) or G.quad(u) > DIVERGENCE_LIMIT**2:
                raise DivergenceError(f"H1 norm exceeded {DIVERGENCE_LIMIT:g} at t={k * cfg.dt:g}")
        if record_every and k % record_every == 0:
            times.append(k * cfg.dt)
            states.append(u.copy())
    if rem > 0:
        u = Stepper(op, nl, rem, cfg.scheme)(u)
        if record_every:
            times.append(t)
            states.append(u.copy())
    if record_every:
        return u, np.array(times), np.array(states)
    return u


def certify_dt(op: DiscreteOperator, nl: NonlinearTerm, u0, cfg: IntegratorConfig,
               t: float = 1.0) -> dict:
    """Record of the dt-halving check: |T_dt(t)u0 - T_{dt/2}(t)u0|_{H1} < tolerance."""
    a = evolve(u0, t, op, nl, cfg)
    b = evolve(u0, t, op, nl, cfg.halved())
    diff = float(np.sqrt(op.G.quad(a - b)))
    return {"dt": cfg.dt, "scheme": cfg.scheme, "t": t, "halving_change": diff,
            "tolerance": cfg.tolerance, "passed": diff < cfg.tolerance}


def absorbing_radius(op: DiscreteOperator, nl: NonlinearTerm, cfg: IntegratorConfig, n_trials: int = 20,
                     r0: float = 10.0, t: float = 50.0, seed: int = 0) -> float:
    """Largest H1 norm at time t over random initial data with H1 norm <= r0."""
    rng = np.random.default_rng(seed)
    x = op.mesh.nodes
    worst = 0.0
    for _ in range(n_trials):
        c = rng.normal(size=6)
        u0 = sum(c[k] * np.cos(k * np.pi * x) for k in range(6))
        u0 *= rng.uniform(0.1, 1.0) * r0 / np.sqrt(op.G.quad(u0))
        worst = max(worst, float(np.sqrt(op.G.quad(evolve(u0, t, op, nl, cfg)))))
    return worst


# --- linear and nonlinear semigroup gaps ---------------------------------

@lru_cache(maxsize=32)
def full_eigensystem(op: DiscreteOperator) -> EigenSystem:
    return eigenpairs(op, None)


def linear_semigroup_matrix(op: DiscreteOperator, t: float) -> np.ndarray:
    """Nodal matrix of exp(-t M^{-1} K) = Phi exp(-t Lam) Phi^T M."""
    sys = full_eigensystem(op)
    Phi = sys.eigenvectors
    return (Phi * np.exp(-t * sys.eigenvalues)[None, :]) @ op.M.matvec(Phi).T


def linear_semigroup_gap(opA: DiscreteOperator, opB: DiscreteOperator, t: float,
                         in_norm: NormTag = "L2", out_norm: NormTag = "H1") -> float:
    if t <= 0:
        raise ValueError("t must be positive")
    if opA.n != opB.n:
        raise ValueError("operators live on different meshes")
    D = linear_semigroup_matrix(opA, t) - linear_semigroup_matrix(opB, t)
    return weighted_operator_norm(D, opA, in_norm, out_norm)


def semigroup_envelope(t, delta: float, alpha: float, beta: float = 0.5):
    """Shape e^{-alpha t} min(delta / t, t^{-(1 + beta) / 2})."""
    t = np.asarray(t, dtype=float)
    return np.exp(-alpha * t) * np.minimum(delta / t, t ** (-(1.0 + beta) / 2.0))


def nonlinear_semigroup_gap(fam: CoefficientFamily, mesh: Mesh1D, eps: float, u0, t: float,
                            cfg: IntegratorConfig) -> float:
    """H1 distance between the eps and eps = 0 trajectories at time t (same dt)."""
    op_e = assemble_operator(fam, mesh, eps)
    op_0 = assemble_operator(fam, mesh, 0.0)
    ue = evolve(u0, t, op_e, NonlinearTerm(fam, eps), cfg)
    u0_ = evolve(u0, t, op_0, NonlinearTerm(fam, 0.0), cfg)
    d = ue - u0_
    return float(np.sqrt(op_0.G.quad(d)))


# --- equilibria -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EquilibriumSet:
    points: np.ndarray  # (count, n)
    unstable_dims: tuple[int, ...]
    hyperbolic: tuple[bool, ...]
    residuals: tuple[float, ...]
    eps: float
    spectra: tuple[np.ndarray, ...] = field(default=(), repr=False)

    def __len__(self) -> int:
        return self.points.shape[0]


def residual_norm(op: DiscreteOperator, nl: NonlinearTerm, u) -> float:
    """M-norm of the Riesz representative of F(u) = K u - h(u)."""
    F = op.K.matvec(u) - nl.load(op, u)
    return float(np.sqrt(max(np.dot(F, op.M.solve(F)), 0.0)))


def newton(op: DiscreteOperator, nl: NonlinearTerm, u0, tol: float = 1e-12, max_iter: int = 60):
    """Damped Newton on F(u) = K u - M f(u) - B g(u).  Returns (u, residual) or None."""
    u = np.array(u0, dtype=float)
    res = residual_norm(op, nl, u)
    for _ in range(max_iter):
        if res <= tol:
            break
        F = op.K.matvec(u) - nl.load(op, u)
        lo, d, up = nl.jacobian_bands(op, u)
        ab = np.zeros((3, op.n))
        ab[0, 1:] = op.K.off - up
        ab[1] = op.K.diag - d
        ab[2, :-1] = op.K.off - lo
        try:
            du = linalg.solve_banded((1, 1), ab, -F, check_finite=False)
        except (linalg.LinAlgError, ValueError):
            return None
        if not np.all(np.isfinite(du)):
            return None
        step_len = 1.0
        while step_len > 1e-4:
            trial = u + step_len * du
            r = residual_norm(op, nl, trial)
            if r < res or r <= tol:
                break
            step_len *= 0.5
        else:
            # no decrease; accept if we are at round-off level
            if res <= 1e-10:
                break
            return None
        u, res_new = trial, r
        if res_new >= res and res_new > tol:
            break
        res = res_new
    if res > 1e-10:
        return None
    return u, res


def linearization_spectrum(op: DiscreteOperator, nl: NonlinearTerm, u, vectors: bool = False):
    """Eigenvalues sigma of J phi = sigma M phi, J = K - Dh(u), sorted by real part.

    With vectors=True also returns right and left eigenvectors normalized so
    that psi_i^T M phi_j = delta_ij.
    """
    J = op.K.dense() - nl.jacobian_dense(op, u)
    M = op.M.dense()
    if not vectors:
        w = linalg.eig(J, M, right=False)
        return np.sort_complex(w)[np.argsort(np.sort_complex(w).real, kind="stable")]
    w, vl, vr = linalg.eig(J, M, left=True, right=True)
    order = np.argsort(w.real, kind="stable")
    w, vl, vr = w[order], vl[:, order], vr[:, order]
    if np.max(np.abs(w.imag)) > 1e-8 * max(1.0, np.max(np.abs(w.real))):
        raise ValueError("linearization has complex eigenvalues")
    w, vl, vr = w.real, vl.real, vr.real
    # sign convention on right vectors, then bi-orthonormalize left ones
    vr = vr * np.where(vr[np.argmax(np.abs(vr), axis=0), np.arange(vr.shape[1])] < 0, -1.0, 1.0)
    vr = vr / np.sqrt(np.sum(vr * (M @ vr), axis=0))[None, :]
    scale = np.sum(vl * (M @ vr), axis=0)
    vl = vl / scale[None, :]
    return w, vr, vl


def default_guesses(fam: CoefficientFamily, op: DiscreteOperator, n_const: int = 21,
                    n_modes: int = 3, amplitude: float = 1.0) -> list[np.ndarray]:
    u_max = fam.reaction.u_max if fam.reaction.u_max is not None else 3.0
    consts = np.linspace(-u_max, u_max, n_const)
    modes = eigenpairs(op, n_modes + 1).eigenvectors[:, 1 : n_modes + 1]
    guesses = []
    for c in consts:
        base = np.full(op.n, c)
        guesses.append(base)
        for k in range(modes.shape[1]):
            guesses.append(base + amplitude * modes[:, k])
            guesses.append(base - amplitude * modes[:, k])
    return guesses


def find_equilibria(fam: CoefficientFamily, mesh: Mesh1D, eps: float,
                    guesses: Sequence[np.ndarray] | None = None, dedup: float = 1e-6,
                    margin: float = 1e-6, op: DiscreteOperator | None = None) -> EquilibriumSet:
    op = op or assemble_operator(fam, mesh, eps)
    nl = NonlinearTerm(fam, eps)
    if guesses is None:
        guesses = default_guesses(fam, op)
    if len(guesses) == 0:
        raise ValueError("no initial guesses")
    found: list[tuple[np.ndarray, float]] = []
    for g in guesses:
        out = newton(op, nl, g)
        if out is None:
            continue
        u, res = out
        if all(np.sqrt(op.G.quad(u - v)) > dedup for v, _ in found):
            found.append((u, res))
    if not found:
        raise RuntimeError("Newton found no equilibria")
    found.sort(key=lambda item: float(np.sum(op.M.matvec(item[0]))))
    pts = np.array([u for u, _ in found])
    dims, hyp, spectra = [], [], []
    for u in pts:
        sig = linearization_spectrum(op, nl, u)
        dims.append(int(np.sum(sig.real < 0)))
        hyp.append(bool(np.min(np.abs(sig.real)) >= margin))
        spectra.append(sig)
    return EquilibriumSet(pts, tuple(dims), tuple(hyp), tuple(r for _, r in found), float(eps), tuple(spectra))


def equilibrium_gap(setA: EquilibriumSet, setB: EquilibriumSet, op: DiscreteOperator) -> np.ndarray:
    """Per-pair H1 distances after nearest-neighbour matching (must be a bijection)."""
    if len(setA) != len(setB):
        raise CardinalityMismatch(f"{len(setA)} vs {len(setB)} equilibria")
    D = np.array([[np.sqrt(op.G.quad(a - b)) for b in setB.points] for a in setA.points])
    match = np.argmin(D, axis=1)
    if len(set(match.tolist())) != len(match):
        raise CardinalityMismatch("nearest-neighbour matching is not a bijection")
    return D[np.arange(len(match)), match]


# --- report files -----------------------------------------------------------

def _fmt(x) -> str:
    return f"{float(x):.17g}"


def write_trajectory(path, times, states) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        n = np.asarray(states).shape[1]
        w.writerow(["t"] + [f"node_{i}" for i in range(n)])
        for t, u in zip(times, states):
            w.writerow([_fmt(t)] + [_fmt(v) for v in u])


def write_equilibria(path, eq: EquilibriumSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        n = eq.points.shape[1]
        w.writerow(["index", "morse_index", "hyperbolic", "residual"] + [f"node_{i}" for i in range(n)])
        for i, u in enumerate(eq.points):
            w.writerow([i, eq.unstable_dims[i], int(eq.hyperbolic[i]), _fmt(eq.residuals[i])]
                       + [_fmt(v) for v in u])
