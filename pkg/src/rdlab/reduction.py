"""Galerkin reduction with quasi-static slaving, time-1 reduced maps and finite-window shadowing.

Both the eps and the eps = 0 systems are written in the eps = 0 eigenbasis:
M u' = -K_0 u + h~(u),  h~(u) = h_eps(u) - (K_eps - K_0) u.
With u = Phi v + z, the reduced field is v' = -Lam v + Phi^T h~(Phi v + s(v)),
where the tail s(v) solves K_0 s = (I - M Phi Phi^T) h~(Phi v + s).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from . import kernels
from .family import CoefficientFamily
from .fem import DiscreteOperator, Mesh1D, assemble_operator
from .manifolds import hausdorff_points
from .spectral import eigenpairs, spectral_projection


class SlavingDivergence(FloatingPointError):
    """Tail fixed point did not converge; the reduction rank must increase."""


class ShadowingFailure(RuntimeError):
    """Newton on the finite-window orbit equations did not converge."""


class OutsideNeighborhood(ValueError):
    """A sample point lies outside the declared neighborhood."""


@dataclass(eq=False)
class ReducedSystem:
    fam: CoefficientFamily
    eps: float
    M: int
    modes: np.ndarray  # (n, M), M-orthonormal eigenvectors of the eps = 0 operator
    Lambda: np.ndarray
    op: DiscreteOperator  # eps operator
    op0: DiscreteOperator
    data: object  # kernel data
    slaving_tol: float
    contraction: float = 0.0

    @property
    def dimension(self) -> int:
        return self.M

    def rhs(self, V, want_jac: bool = False):
        F, DF, _, stats = kernels.reduced_rhs(self.data, V, want_jac)
        return (F, DF) if want_jac else F

    def slave(self, V) -> np.ndarray:
        """Tail s(v) for rows of V, nodal values (B, n)."""
        _, _, Z, _ = kernels.reduced_rhs(self.data, V, False)
        return Z

    def lift(self, V) -> np.ndarray:
        V = np.atleast_2d(np.asarray(V, dtype=float))
        return V @ self.modes.T + self.slave(V)

    def slaving_residual(self, V) -> float:
        """sup-norm of K_0^{-1}(I - Q) h~(Phi v + s) - s over the rows of V."""
        V = np.atleast_2d(np.asarray(V, dtype=float))
        Z = self.slave(V)
        d = self.data
        U = (V @ self.modes.T + Z).T
        f = self.fam.f(U, self.eps)
        g = self.fam.g(U, self.eps)
        load = self.op0.M.matvec(f) - (self.op.K.matvec(U) - self.op0.K.matvec(U))
        load[0] += g[0]
        load[-1] += g[-1]
        load -= d.mphi @ (self.modes.T @ load)
        W = self.op0.K.solve(load)
        return float(np.max(np.abs(W - Z.T)))


def reduce(fam: CoefficientFamily, mesh: Mesh1D, eps: float, M: int, tol: float = 1e-10,
           max_iter: int = 200, check_points: np.ndarray | None = None, seed: int = 0) -> ReducedSystem:
    """Reduced system of rank M in the eps = 0 eigenbasis.

    The slaving map is checked for contraction on ``check_points`` (default:
    random points in a box of half-width 3 in the leading coordinate).
    """
    op0 = assemble_operator(fam, mesh, 0.0)
    op = op0 if eps == 0 else assemble_operator(fam, mesh, eps)
    sys0 = eigenpairs(op0, min(M + 1, op0.n))
    spectral_projection(sys0, M)  # raises on a degenerate cut
    Phi = np.array(sys0.eigenvectors[:, :M], order="C")
    lam = np.array(sys0.eigenvalues[:M])
    data = kernels.KernelData(
        np.array(op0.K.cholesky),
        np.array(op0.M.diag), np.array(op0.M.off),
        np.array(op.K.diag - op0.K.diag), np.array(op.K.off - op0.K.off),
        Phi, np.ascontiguousarray(op0.M.matvec(Phi)), lam,
        fam.reaction.coefficients(eps), float(tol), int(max_iter),
    )
    rs = ReducedSystem(fam, float(eps), M, Phi, lam, op, op0, data, float(tol))
    if check_points is None:
        rng = np.random.default_rng(seed)
        check_points = rng.uniform(-1.0, 1.0, (32, M)) * np.r_[3.0, np.full(M - 1, 0.5)]
    try:
        _, _, _, stats = kernels.reduced_rhs(data, check_points, False)
    except FloatingPointError as exc:
        raise SlavingDivergence(f"slaving did not converge at rank {M}; increase M") from exc
    rs.contraction = float(stats["ratio"])
    if rs.contraction >= 1.0:
        raise SlavingDivergence(f"slaving contraction {rs.contraction:.3g} >= 1 at rank {M}")
    return rs


def reduced_equilibria(sys: ReducedSystem, guesses: Sequence[np.ndarray], tol: float = 1e-11,
                       dedup: float = 1e-6, max_iter: int = 50):
    """Roots of the reduced field by Newton; returns (points, unstable dims)."""
    found = []
    for g in guesses:
        v = np.array(g, dtype=float)
        ok = False
        for _ in range(max_iter):
            F, DF = sys.rhs(v, want_jac=True)
            F, DF = F[0], DF[0]
            if np.linalg.norm(F) <= tol:
                ok = True
                break
            try:
                v = v - np.linalg.solve(DF, F)
            except np.linalg.LinAlgError:
                break
            if not np.all(np.isfinite(v)) or np.linalg.norm(v) > 1e3:
                break
        if ok and all(np.linalg.norm(v - w) > dedup for w in found):
            found.append(v)
    found.sort(key=lambda w: float(w[0]))
    dims = []
    for v in found:
        _, DF = sys.rhs(v, want_jac=True)
        dims.append(int(np.sum(np.linalg.eigvals(DF[0]).real > 0)))
    return np.array(found), tuple(dims)


def default_reduced_guesses(M: int, span: float = 4.0, n: int = 17) -> list[np.ndarray]:
    out = []
    for c in np.linspace(-span, span, n):
        v = np.zeros(M)
        v[0] = c
        out.append(v)
    return out


# --- time-1 maps -----------------------------------------------------------------

@dataclass(eq=False)
class DiscreteMap:
    """Time-t flow of the reduced ODE by fixed-step RK4, Jacobian by the variational equations."""

    system: ReducedSystem
    dt: float = 1e-3
    t: float = 1.0
    lipschitz: float | None = None
    stats: dict = field(default_factory=dict)

    @property
    def dimension(self) -> int:
        return self.system.M

    @property
    def nsteps(self) -> int:
        return int(round(self.t / self.dt))

    def __call__(self, V) -> np.ndarray:
        V = np.asarray(V, dtype=float)
        out, _, st = self._flow(V, False)
        return out[0] if V.ndim == 1 else out

    def jacobian(self, V):
        """(T(V), DT(V)) for rows of V."""
        V = np.asarray(V, dtype=float)
        out, J, _ = self._flow(V, True)
        return (out[0], J[0]) if V.ndim == 1 else (out, J)

    def _flow(self, V, want_jac):
        try:
            out, J, st = kernels.reduced_flow(self.system.data, np.atleast_2d(V), self.nsteps, self.dt, want_jac)
        except FloatingPointError as exc:
            raise SlavingDivergence(str(exc)) from exc
        if not np.all(np.isfinite(out)) or np.max(np.abs(out)) > 1e6:
            raise FloatingPointError("reduced flow overflow")
        self.stats = st
        return out, J, st

    def record_lipschitz(self, points: np.ndarray) -> float:
        _, J = self.jacobian(np.atleast_2d(points))
        self.lipschitz = float(np.max(np.linalg.norm(J, ord=2, axis=(1, 2))))
        return self.lipschitz


def reduced_map(sys: ReducedSystem, dt: float = 1e-3, t: float = 1.0) -> DiscreteMap:
    n = int(round(t / dt))
    if n < 1 or abs(n * dt - t) > 1e-12 * max(1.0, t):
        raise ValueError("t must be a positive multiple of dt")
    return DiscreteMap(sys, dt, t)


def map_fixed_point(T: DiscreteMap, v0, tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
    """Newton on T(v) - v."""
    v = np.array(v0, dtype=float)
    m = v.size
    for _ in range(max_iter):
        Tv, J = T.jacobian(v)
        r = Tv - v
        if np.linalg.norm(r) <= tol:
            return v
        v = v - np.linalg.solve(J - np.eye(m), r)
    raise ShadowingFailure("fixed-point Newton did not converge")


# --- pseudo-trajectories and shadowing ----------------------------------------------

def pseudo_trajectory_defect(seq, T: DiscreteMap) -> float:
    X = np.asarray(seq, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two points")
    return float(np.max(np.linalg.norm(T(X[:-1]) - X[1:], axis=1)))


def orbit(T: DiscreteMap, v0, length: int, settle: float = 1e-14) -> np.ndarray:
    """Orbit of length ``length``; once |T(x) - x| <= settle the remaining points are copied."""
    X = np.empty((length, T.dimension))
    X[0] = v0
    k = 1
    while k < length:
        X[k] = T(X[k - 1])
        if np.max(np.abs(X[k] - X[k - 1])) <= settle:
            X[k + 1 :] = X[k]
            break
        k += 1
    return X


@dataclass(frozen=True)
class ShadowResult:
    orbit: np.ndarray
    distance: float
    defect: float
    iterations: int

    @property
    def ratio(self) -> float:
        return self.distance / self.defect if self.defect > 0 else 0.0


def _cluster(X: np.ndarray, radius: float) -> np.ndarray:
    """Index of a representative for each row (greedy, within ``radius``)."""
    if radius <= 0:
        return np.arange(X.shape[0])
    reps: list[int] = []
    out = np.empty(X.shape[0], dtype=int)
    for i, x in enumerate(X):
        if reps:
            d = np.max(np.abs(X[reps] - x), axis=1)
            j = int(np.argmin(d))
            if d[j] <= radius:
                out[i] = reps[j]
                continue
        reps.append(i)
        out[i] = i
    return out


class _OrbitSystem:
    """Min-norm solves with A = [-J_k, I] block rows via the block-tridiagonal A A^T."""

    def __init__(self, J: np.ndarray):
        N, m, _ = J.shape
        self.J, self.N, self.m = J, N, m
        S = np.zeros((N * m, N * m))
        eye = np.eye(m)
        for k in range(N):
            S[k * m : (k + 1) * m, k * m : (k + 1) * m] = J[k] @ J[k].T + eye
            if k + 1 < N:
                S[k * m : (k + 1) * m, (k + 1) * m : (k + 2) * m] = -J[k + 1].T
                S[(k + 1) * m : (k + 2) * m, k * m : (k + 1) * m] = -J[k + 1]
        bw = 2 * m - 1
        ab = np.zeros((bw + 1, N * m))
        for d in range(bw + 1):
            ab[d, : N * m - d] = np.diagonal(S, -d)
        self.chol = linalg.cholesky_banded(ab, lower=True, check_finite=False)

    def min_norm(self, rhs: np.ndarray) -> np.ndarray:
        y = linalg.cho_solve_banded((self.chol, True), rhs.ravel(), check_finite=False).reshape(self.N, self.m)
        dx = np.zeros((self.N + 1, self.m))
        dx[:-1] -= np.einsum("kji,kj->ki", self.J, y)
        dx[1:] += y
        return dx


def shadow_solve(seq, T: DiscreteMap, tol: float | None = None, max_iter: int = 30,
                 jac_radius: float = 0.0) -> ShadowResult:
    """Exact orbit near a pseudo-trajectory by minimum-norm Newton on x_{k+1} - T(x_k) = 0.

    Endpoints are free.  Jacobians are evaluated at cluster representatives
    within ``jac_radius`` (0: every point) and refreshed when the residual
    stops dropping fast; the residual itself is always exact.  Default
    tolerance: max(1e-13, 1e-8 x defect).
    """
    Y = np.array(seq, dtype=float)
    if Y.ndim != 2 or Y.shape[0] < 2:
        raise ValueError("need at least two points")
    X = Y.copy()
    TX = T(X[:-1])
    F = X[1:] - TX
    defect0 = float(np.max(np.linalg.norm(F, axis=1)))
    if tol is None:
        tol = max(1e-13, 1e-8 * defect0)
    system = None
    prev = math.inf
    for it in range(max_iter + 1):
        res = float(np.max(np.abs(F)))
        if res <= tol:
            dist = float(np.max(np.linalg.norm(X - Y, axis=1)))
            return ShadowResult(X, dist, defect0, it)
        if not np.isfinite(res) or res > 1e3 * defect0 + 1.0:
            break
        if system is None or res > 0.25 * prev:
            rep = _cluster(X[:-1], jac_radius)
            uniq, inv = np.unique(rep, return_inverse=True)
            _, Ju = T.jacobian(X[:-1][uniq])
            system = _OrbitSystem(Ju[inv])
        prev = res
        X = X + system.min_norm(-F)
        F = X[1:] - T(X[:-1])
    raise ShadowingFailure(f"orbit Newton did not converge (residual {res:.3g}); window may cross a non-hyperbolic region")


def noisy_orbit(T: DiscreteMap, v0, length: int, noise: float, rng: np.random.Generator):
    """True orbit plus perturbations of norm ``noise`` in uniformly random directions."""
    X = orbit(T, v0, length)
    d = rng.normal(size=X.shape)
    d *= noise / np.linalg.norm(d, axis=1, keepdims=True)
    return X + d, X


def pseudo_orbit(T: DiscreteMap, v0, length: int, delta: float, rng: np.random.Generator) -> np.ndarray:
    """y_{k+1} = T(y_k) + e_k with |e_k| = delta in uniformly random directions."""
    Y = np.empty((length, T.dimension))
    Y[0] = v0
    for k in range(1, length):
        e = rng.normal(size=T.dimension)
        Y[k] = T(Y[k - 1]) + delta * e / np.linalg.norm(e)
    return Y


def shadowing_trials(T: DiscreteMap, starts: np.ndarray, window: int = 200, noise: float = 1e-4,
                     seed: int = 0, jac_radius: float = 1e-3):
    """Ratios shadow_distance / defect over delta-pseudo-orbits from the given starts.

    Returns rows (trial, defect, shadow_distance, ratio).
    """
    rng = np.random.default_rng(seed)
    rows = []
    for i, v0 in enumerate(starts):
        Y = pseudo_orbit(T, v0, window + 1, noise, rng)
        res = shadow_solve(Y, T, jac_radius=jac_radius)
        rows.append((i, res.defect, res.distance, res.ratio))
    return rows


def write_shadowing_report(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "defect", "shadow_distance", "ratio"])
        for i, d, s, r in rows:
            w.writerow([int(i)] + [f"{float(x):.17g}" for x in (d, s, r)])


def write_map_trace(path, X) -> None:
    X = np.asarray(X, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k"] + [f"v{j}" for j in range(X.shape[1])])
        for k, row in enumerate(X):
            w.writerow([k] + [f"{x:.17g}" for x in row])


# --- neighborhoods, reduced attractors and the shadowing bound -------------------------

@dataclass(frozen=True)
class Neighborhood:
    """Axis-aligned box center +- radii in reduced coordinates, with a fixed sample."""

    center: np.ndarray
    radii: np.ndarray

    def contains(self, V, slack: float = 1e-12) -> np.ndarray:
        V = np.atleast_2d(V)
        return np.all(np.abs(V - self.center) <= self.radii + slack, axis=1)

    def sample(self, count: int, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return self.center + self.radii * rng.uniform(-1.0, 1.0, (count, self.center.size))

    @classmethod
    def around(cls, points: np.ndarray, pad: float = 0.1) -> "Neighborhood":
        lo, hi = points.min(axis=0), points.max(axis=0)
        return cls(0.5 * (lo + hi), 0.5 * (hi - lo) + pad)


@dataclass(eq=False)
class ReducedAttractor:
    points: np.ndarray
    provenance: list[str]
    equilibria: np.ndarray
    unstable_dims: tuple[int, ...]
    resolution: float


def _resample(P: np.ndarray, count: int):
    seg = np.linalg.norm(np.diff(P, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    target = np.linspace(0.0, s[-1], count)
    out = np.column_stack([np.interp(target, s, P[:, j]) for j in range(P.shape[1])])
    return out, float(s[-1])


def reduced_attractor(sys: ReducedSystem, samples_per_connection: int = 200, launch: float = 1e-4,
                      arrive_tol: float = 1e-8, dt: float = 1e-3, t_max: float = 200.0,
                      guesses: Sequence[np.ndarray] | None = None) -> ReducedAttractor:
    """Reduced equilibria plus arc-length samples of connections leaving unstable ones."""
    eqs, dims = reduced_equilibria(sys, guesses or default_reduced_guesses(sys.M))
    points = [e for e in eqs]
    prov = ["equilibrium"] * len(eqs)
    resolution = 0.0
    for i, (e, k) in enumerate(zip(eqs, dims)):
        if k == 0:
            continue
        _, DF = sys.rhs(e, want_jac=True)
        w, vr = np.linalg.eig(DF[0])
        for j in np.where(w.real > 0)[0]:
            d = np.real(vr[:, j])
            d /= np.linalg.norm(d)
            for sign in (1.0, -1.0):
                v = e + sign * launch * d
                traj = [e, v]
                t = 0.0
                target = None
                while t < t_max:
                    V, _, _ = kernels.reduced_flow(sys.data, v[None], 1, dt, False)
                    v = V[0]
                    traj.append(v)
                    t += dt
                    dist = np.linalg.norm(eqs - v, axis=1)
                    dist[i] = np.inf
                    if np.min(dist) <= arrive_tol:
                        target = int(np.argmin(dist))
                        break
                if target is None:
                    raise RuntimeError(f"reduced trajectory from equilibrium {i} reached no equilibrium")
                traj.append(eqs[target])
                S, length = _resample(np.array(traj), samples_per_connection)
                resolution = max(resolution, length / (samples_per_connection - 1))
                inner = S[1:-1]
                points.extend(inner)
                prov.extend(["heteroclinic-sample"] * inner.shape[0])
    return ReducedAttractor(np.array(points), prov, eqs, dims, resolution)


def map_gap(Ta: DiscreteMap, Tb: DiscreteMap, points: np.ndarray) -> float:
    """sup over points of |Ta(v) - Tb(v)|."""
    points = np.atleast_2d(points)
    return float(np.max(np.linalg.norm(Ta(points) - Tb(points), axis=1)))


def lpsp_attractor_bound(Ta: DiscreteMap, Tb: DiscreteMap, neighborhood: Neighborhood, L: float,
                         count: int = 256, seed: int = 0, extra_points: np.ndarray | None = None,
                         attractors: Sequence[ReducedAttractor] = ()) -> float:
    """L times the sampled sup of |Ta - Tb| over the neighborhood."""
    for A in attractors:
        if not np.all(neighborhood.contains(A.points)):
            raise OutsideNeighborhood("attractor sample leaves the neighborhood")
    if Ta is Tb:
        return 0.0
    pts = neighborhood.sample(count, seed)
    if extra_points is not None:
        extra = np.atleast_2d(extra_points)
        if not np.all(neighborhood.contains(extra)):
            raise OutsideNeighborhood("sample point outside the neighborhood")
        pts = np.vstack([pts, extra])
    return L * map_gap(Ta, Tb, pts)


def reduced_hausdorff(A: ReducedAttractor, B: ReducedAttractor):
    return hausdorff_points(A.points, B.points, ordered=False)


def window_sensitivity(T: DiscreteMap, starts: np.ndarray, window: int, noise: float = 1e-4, seed: int = 0):
    """(L at window, L at 2 window, relative change) from the max trial ratio."""
    a = max(r[3] for r in shadowing_trials(T, starts, window, noise, seed))
    b = max(r[3] for r in shadowing_trials(T, starts, 2 * window, noise, seed))
    return a, b, abs(b - a) / a
