"""Local unstable manifolds, attractor samples and Hausdorff distances.

Near an equilibrium u* write u = u* + w and expand w in the eigenvectors of
J phi = sigma M phi (J = K - Dh(u*)).  Unstable coordinates xi obey
xi' = -sigma_u xi + Psi_u^T R(w) with R the Taylor remainder of h at u*.
The local unstable manifold is the graph z = s(xi) of the stable part,
computed as the fixed point of the Lyapunov-Perron map
    s(xi) = sum_k phi_k int_{-T}^0 e^{sigma_k r} psi_k^T R(w(r)) dr
where w(r) follows the unstable coordinates backward from xi.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .dynamics import (
    EquilibriumSet,
    IntegratorConfig,
    NonlinearTerm,
    Stepper,
    find_equilibria,
    linearization_spectrum,
)
from .family import CoefficientFamily
from .fem import DiscreteOperator, DiscreteState, Mesh1D, NormTag, assemble_operator
from .rates import RateFit, RateSeries, fit_rate


class NonHyperbolicError(ValueError):
    """Linearization has spectrum too close to the imaginary axis."""


class ContractionFailure(RuntimeError):
    """The Lyapunov-Perron iteration did not contract on the requested box."""


class NonDecayError(RuntimeError):
    """A trajectory failed to approach the manifold."""

    def __init__(self, msg, times=None, distances=None):
        super().__init__(msg)
        self.times = times
        self.distances = distances


class ConnectionFailure(RuntimeError):
    """A trajectory from an unstable equilibrium reached no equilibrium in time."""


class StructuralChange(RuntimeError):
    """Equilibrium count changed inside a sweep."""


# --- norm coordinates ---------------------------------------------------------

def norm_coordinates(op: DiscreteOperator, X, tag: NormTag = "H1") -> np.ndarray:
    """Rows y = L^T x with gram(tag) = L L^T, so Euclidean distance of rows is the tagged norm."""
    L = op.gram(tag).cholesky
    X = np.asarray(X, dtype=float)
    Y = X * L[0]
    Y[..., :-1] += X[..., 1:] * L[1, :-1]
    return Y


def _polyline_distance(q: np.ndarray, P: np.ndarray) -> float:
    """Euclidean distance from point q to the polyline through the rows of P."""
    if P.shape[0] == 1:
        return float(np.linalg.norm(q - P[0]))
    A = P[:-1]
    D = P[1:] - A
    dd = np.sum(D * D, axis=1)
    t = np.where(dd > 0, np.sum((q - A) * D, axis=1) / np.where(dd > 0, dd, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    diff = A + t[:, None] * D - q
    return float(np.sqrt(np.min(np.sum(diff * diff, axis=1))))


# --- local coordinates at an equilibrium -------------------------------------

def _apply_bands(lo, d, up, W):
    Y = d[:, None] * W
    Y[:-1] += up[:, None] * W[1:]
    Y[1:] += lo[:, None] * W[:-1]
    return Y


@dataclass(eq=False)
class LocalFrame:
    op: DiscreteOperator
    nl: NonlinearTerm
    base: np.ndarray
    sigma: np.ndarray
    right: np.ndarray  # columns phi_k, M-normalized
    left: np.ndarray  # columns psi_k with psi^T M phi = I
    k_u: int
    linear_only: bool = False

    def __post_init__(self):
        self._h0 = self.nl.load(self.op, self.base)
        self._jac = self.nl.jacobian_bands(self.op, self.base)

    @property
    def phi_u(self):
        return self.right[:, : self.k_u]

    @property
    def psi_u(self):
        return self.left[:, : self.k_u]

    def remainder(self, W: np.ndarray) -> np.ndarray:
        """R(w) = h(u* + w) - h(u*) - Dh(u*) w, columnwise."""
        if self.linear_only:
            return np.zeros_like(W)
        U = self.base[:, None] + W
        return self.nl.load(self.op, U) - self._h0[:, None] - _apply_bands(*self._jac, W)

    def split(self, W: np.ndarray):
        """Unstable coordinates and nodal stable part of perturbations (columns)."""
        xi = self.psi_u.T @ self.op.M.matvec(W)
        return xi, W - self.phi_u @ xi


def local_frame(op: DiscreteOperator, nl: NonlinearTerm, base, margin: float = 1e-6,
                linear_only: bool = False) -> LocalFrame:
    base = np.asarray(base, dtype=float)
    sigma, vr, vl = linearization_spectrum(op, nl, base, vectors=True)
    if np.min(np.abs(sigma)) < margin:
        raise NonHyperbolicError(f"eigenvalue {sigma[np.argmin(np.abs(sigma))]:.3g} within {margin:g} of 0")
    k_u = int(np.sum(sigma < 0))
    return LocalFrame(op, nl, base, sigma, vr, vl, k_u, linear_only)


# --- graph transform ------------------------------------------------------------

def _exp_weights(sigma: np.ndarray, h: float, N: int) -> np.ndarray:
    """Weights w[k, i] with sum_i w[k, i] F(r_i) = int_{-Nh}^0 e^{sigma_k r} F(r) dr, F piecewise linear, r_i = -i h."""
    a = sigma * h
    small = a < 1e-3
    ea = np.exp(-np.where(small, 0.0, a))
    a_safe = np.where(small, 1.0, a)
    # node at the lower end (older time) and at the upper end of each interval
    w_low = np.where(small, 0.5 - a / 3 + a * a / 8 - a**3 / 30, (1.0 - ea - a_safe * ea) / a_safe**2) * h
    w_up = np.where(small, 0.5 - a / 6 + a * a / 24 - a**3 / 120, (a_safe - 1.0 + ea) / a_safe**2) * h
    i = np.arange(N + 1)
    decay = np.exp(-np.outer(sigma, i * h))  # e^{sigma r_i}
    W = np.zeros((sigma.size, N + 1))
    W[:, :N] += decay[:, :N] * w_up[:, None]
    W[:, 1:] += decay[:, :N] * w_low[:, None]
    return W


@dataclass(eq=False)
class ManifoldGraph:
    """Graph xi -> s(xi) of the local unstable manifold over a box in unstable coordinates."""

    frame: LocalFrame
    axes: tuple[np.ndarray, ...]
    values: np.ndarray  # grid_shape + (n,)
    box_radius: float
    D: float
    Delta: float
    theta_contraction: float
    iterations: int
    changes: list[float] = field(default_factory=list)
    T_back: float = 0.0
    interp_error: float = 0.0  # H1 gap between the map at cell midpoints and the interpolant

    @property
    def base(self) -> DiscreteState:
        return DiscreteState(self.frame.base, self.frame.op.mesh)

    @property
    def unstable_basis(self) -> np.ndarray:
        return self.frame.phi_u

    @property
    def dim(self) -> int:
        return self.frame.k_u

    def evaluate(self, xi) -> np.ndarray:
        """Multilinear interpolation of s at points xi (shape (P, k) or (k,)), clamped to the box."""
        return _interp(self.axes, self.values, xi)

    def point(self, xi) -> np.ndarray:
        """Full state u* + Phi_u xi + s(xi)."""
        xi = np.asarray(xi, dtype=float)
        single = xi.ndim == 1
        X = np.atleast_2d(xi)
        U = self.frame.base[None, :] + X @ self.frame.phi_u.T + self.evaluate(X)
        return U[0] if single else U

    def grid_points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def _interp(axes, values, xi):
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    X = np.atleast_2d(xi)
    k = len(axes)
    idx, frac = [], []
    for j, ax in enumerate(axes):
        x = np.clip(X[:, j], ax[0], ax[-1])
        h = ax[1] - ax[0]
        i = np.minimum(np.floor((x - ax[0]) / h).astype(int), ax.size - 2)
        idx.append(i)
        frac.append((x - ax[i]) / h)
    out = np.zeros((X.shape[0], values.shape[-1]))
    for corner in itertools.product((0, 1), repeat=k):
        w = np.ones(X.shape[0])
        sel = []
        for j, c in enumerate(corner):
            w = w * (frac[j] if c else 1.0 - frac[j])
            sel.append(idx[j] + c)
        out += w[:, None] * values[tuple(sel)]
    return out[0] if single else out


def _lp_map(frame: LocalFrame, axes, values, grid, W_s, h: float, N: int, chunk: int = 64):
    """One application of the truncated Lyapunov-Perron map on all grid points."""
    phi_u, psi_u = frame.phi_u, frame.psi_u
    sig_u = frame.sigma[: frame.k_u]
    psi_s = frame.left[:, frame.k_u :]
    phi_s = frame.right[:, frame.k_u :]
    n = frame.base.size
    out = np.zeros((grid.shape[0], n))

    def rhs(X):
        Wn = (X @ phi_u.T + _interp(axes, values, X)).T
        return -sig_u[None, :] * X + (psi_u.T @ frame.remainder(Wn)).T

    for start in range(0, grid.shape[0], chunk):
        X = grid[start : start + chunk].copy()
        P = X.shape[0]
        traj = np.empty((N + 1, P, X.shape[1]))
        traj[0] = X
        hb = -h
        for i in range(N):
            k1 = rhs(X)
            k2 = rhs(X + 0.5 * hb * k1)
            k3 = rhs(X + 0.5 * hb * k2)
            k4 = rhs(X + hb * k3)
            X = X + hb / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            traj[i + 1] = X
        flat = traj.reshape(-1, X.shape[1])
        Wn = (flat @ phi_u.T + _interp(axes, values, flat)).T  # (n, (N+1) P)
        F = (psi_s.T @ frame.remainder(Wn)).reshape(-1, N + 1, P)  # modes, time, points
        eta = np.einsum("ki,kip->kp", W_s, F)
        out[start : start + P] = (phi_s @ eta).T
    return out


def unstable_graph(eq, fam: CoefficientFamily, mesh: Mesh1D, eps: float, box_radius: float = 0.25,
                   grid_n: int = 81, n_time: int = 200, tol: float = 1e-8, max_iter: int = 100,
                   max_halvings: int = 10, linear_only: bool = False,
                   op: DiscreteOperator | None = None) -> ManifoldGraph:
    """Lyapunov-Perron graph transform for the unstable manifold of equilibrium ``eq`` (nodal values).

    The box is halved (up to ``max_halvings`` times) while the measured
    contraction factor is >= 1.
    """
    op = op or assemble_operator(fam, mesh, eps)
    nl = NonlinearTerm(fam, eps)
    frame = local_frame(op, nl, np.asarray(eq, dtype=float), linear_only=linear_only)
    if frame.k_u == 0:
        raise ValueError("equilibrium is stable; the unstable manifold is the point itself")
    if frame.k_u > 2:
        raise ValueError(f"unstable dimension {frame.k_u} > 2 is outside grid reach; use trajectory sampling")
    sig_s1 = float(frame.sigma[frame.k_u])
    T_back = math.log(1e8) / sig_s1
    h = T_back / n_time
    W_s = _exp_weights(frame.sigma[frame.k_u :], h, n_time)
    last_err: Exception | None = None
    R = float(box_radius)
    for _ in range(max_halvings + 1):
        try:
            return _iterate_graph(frame, R, grid_n, W_s, h, n_time, tol, max_iter, T_back)
        except ContractionFailure as exc:
            last_err = exc
            R *= 0.5
    raise ContractionFailure(f"no contraction down to box radius {R * 2:g}") from last_err


def _iterate_graph(frame, R, grid_n, W_s, h, N, tol, max_iter, T_back) -> ManifoldGraph:
    k = frame.k_u
    n = frame.base.size
    axes = tuple(np.linspace(-R, R, grid_n) for _ in range(k))
    shape = (grid_n,) * k
    values = np.zeros(shape + (n,))
    grid = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    G = frame.op.G
    changes: list[float] = []
    for it in range(1, max_iter + 1):
        new = _lp_map(frame, axes, values, grid, W_s, h, N).reshape(shape + (n,))
        if not np.all(np.isfinite(new)):
            raise ContractionFailure("graph iterate is not finite")
        diff = (new - values).reshape(-1, n).T
        change = float(np.sqrt(np.max(G.quad(diff)))) if diff.size else 0.0
        changes.append(change)
        values = new
        ratios = [b / a for a, b in zip(changes[:-1], changes[1:]) if a > 1e-12 and b > 1e-13]
        if ratios and max(ratios[-2:]) >= 1.0:
            raise ContractionFailure(f"measured contraction {max(ratios):.3g} >= 1 on box {R:g}")
        if change <= tol:
            break
    else:
        raise ContractionFailure(f"no convergence in {max_iter} iterations on box {R:g}")
    theta = max(ratios) if ratios else 0.0
    flat = values.reshape(-1, n).T
    D = float(np.sqrt(np.max(G.quad(flat))))
    # Lipschitz bound of the multilinear interpolant: sqrt(sum_j L_j^2) over axis slopes
    slopes = []
    for j in range(k):
        dv = np.diff(values, axis=j)
        dx = axes[j][1] - axes[j][0]
        slopes.append(float(np.sqrt(np.max(G.quad(dv.reshape(-1, n).T)))) / dx)
    Delta = float(np.sqrt(np.sum(np.square(slopes))))
    mids = np.stack([m.ravel() for m in np.meshgrid(*[0.5 * (a[1:] + a[:-1]) for a in axes], indexing="ij")],
                    axis=1)
    direct = _lp_map(frame, axes, values, mids, W_s, h, N)
    err = (direct - _interp(axes, values, mids)).T
    interp_error = float(np.sqrt(np.max(G.quad(err))))
    return ManifoldGraph(frame, axes, values, R, D, Delta, theta, it, changes, T_back, interp_error)


def manifold_gap(gA: ManifoldGraph, gB: ManifoldGraph) -> float:
    """sup over the shared grid of |s_A(xi) - s_B(xi)|_{H1}."""
    if gA.values.shape != gB.values.shape or any(not np.allclose(a, b) for a, b in zip(gA.axes, gB.axes)):
        raise ValueError("graphs live on different grids")
    n = gA.values.shape[-1]
    d = (gA.values - gB.values).reshape(-1, n).T
    return float(np.sqrt(np.max(gA.frame.op.G.quad(d))))


def sampled_lipschitz(graph: ManifoldGraph, n_pairs: int = 200, seed: int = 0) -> float:
    """Largest |s(a) - s(b)|_{H1} / |a - b| over random pairs in the box."""
    rng = np.random.default_rng(seed)
    R = graph.box_radius
    A = rng.uniform(-R, R, (n_pairs, graph.dim))
    B = rng.uniform(-R, R, (n_pairs, graph.dim))
    d = (graph.evaluate(A) - graph.evaluate(B)).T
    num = np.sqrt(graph.frame.op.G.quad(d))
    return float(np.max(num / np.linalg.norm(A - B, axis=1)))


# --- checks against the flow -------------------------------------------------------

def _integrate(frame: LocalFrame, u0, t: float, cfg: IntegratorConfig):
    stepper = Stepper(frame.op, frame.nl, cfg.dt, cfg.scheme)
    n_steps = int(round(t / cfg.dt))
    U = np.empty((n_steps + 1, u0.size))
    U[0] = u0
    u = u0
    for i in range(n_steps):
        u = stepper(u)
        U[i + 1] = u
    return np.arange(n_steps + 1) * cfg.dt, U


def trajectory_oracle(graph: ManifoldGraph, cfg: IntegratorConfig | None = None, launch: float = 1e-7,
                      t_flow: float = 0.2, inner: float = 0.9) -> float:
    """Largest H1 distance from graph points (and their forward flows over t_flow)
    to the curve swept by trajectories launched at +-launch along the unstable eigenvector.

    One-dimensional manifolds only.
    """
    if graph.dim != 1:
        raise ValueError("trajectory oracle covers one-dimensional manifolds")
    cfg = cfg or IntegratorConfig(dt=1e-3)
    fr = graph.frame
    op = fr.op
    R = graph.box_radius
    rate = -float(fr.sigma[0])
    t_end = math.log(R / launch) / rate + 1.0
    curves = []
    for sign in (1.0, -1.0):
        _, U = _integrate(fr, fr.base + sign * launch * fr.phi_u[:, 0], t_end, cfg)
        xi, _ = fr.split((U - fr.base).T)
        inside = np.abs(xi[0]) <= 1.05 * R
        stop = int(np.argmin(inside)) if not np.all(inside) else U.shape[0]
        curves.append(U[:stop][::-1] if sign > 0 else U[:stop])
    # one polyline through the base: minus branch reversed, base, plus branch
    poly = np.vstack([curves[1][::-1], fr.base[None, :], curves[0][::-1]])
    P = norm_coordinates(op, poly)
    xs = graph.axes[0]
    xs = xs[np.abs(xs) <= inner * R]
    queries = [graph.point(x[None])[0] for x in xs[:, None]]
    stepper = Stepper(op, fr.nl, cfg.dt, cfg.scheme)
    n_flow = int(round(t_flow / cfg.dt))
    for x in xs:
        if abs(x) * math.exp(rate * t_flow) > inner * R:
            continue
        u = graph.point(np.array([x]))
        for _ in range(n_flow):
            u = stepper(u)
        queries.append(u)
    Q = norm_coordinates(op, np.array(queries))
    return max(_polyline_distance(q, P) for q in Q)


def graph_distance(graph: ManifoldGraph, U: np.ndarray):
    """(xi, |z - s(xi)|_{H1}) for states U (rows)."""
    fr = graph.frame
    xi, z = fr.split((np.atleast_2d(U) - fr.base).T)
    d = z - graph.evaluate(xi.T).T
    return xi.T, np.sqrt(fr.op.G.quad(d))


@dataclass(frozen=True)
class AttractionFit:
    gamma: float  # median fitted rate over trials
    gammas: tuple[float, ...]
    r_squared: tuple[float, ...]
    alpha: float  # first stable eigenvalue of the linearization

    @property
    def r2_min(self) -> float:
        return min(self.r_squared)

    @property
    def relative_error(self) -> float:
        return abs(self.gamma - self.alpha) / self.alpha


def exponential_attraction_check(graph: ManifoldGraph, trials: int = 8, cfg: IntegratorConfig | None = None,
                                 xi_range=(0.002, 0.01), stable_size: float = 5e-2, n_stable_modes: int = 4,
                                 t_start: float = 0.3, t_end: float = 2.0, floor: float = 1e-7,
                                 seed: int = 0) -> AttractionFit:
    """Fit the decay rate of |z(t) - s(xi(t))|_{H1} along the flow from random states near the base.

    Points below max(floor, 30 x interpolation error of the graph) are left out of the fit.
    """
    cfg = cfg or IntegratorConfig(dt=1e-3)
    floor = max(floor, 30.0 * graph.interp_error)
    fr = graph.frame
    rng = np.random.default_rng(seed)
    k = fr.k_u
    gammas, r2s = [], []
    for _ in range(trials):
        xi0 = rng.uniform(*xi_range, size=k) * rng.choice([-1.0, 1.0], size=k)
        c = rng.normal(size=n_stable_modes)
        z0 = fr.right[:, k : k + n_stable_modes] @ c
        z0 *= stable_size / math.sqrt(fr.op.G.quad(z0))
        u0 = fr.base + fr.phi_u @ xi0 + graph.evaluate(xi0) + z0
        times, U = _integrate(fr, u0, t_end, cfg)
        xi, dist = graph_distance(graph, U)
        inside = np.all(np.abs(xi) <= graph.box_radius, axis=1)
        sel = (times >= t_start) & inside & (dist > floor)
        if np.sum(sel) < 10:
            raise NonDecayError("too few usable points for the decay fit", times, dist)
        t, y = times[sel], np.log(dist[sel])
        slope, icept = np.polyfit(t, y, 1)
        resid = y - (slope * t + icept)
        r2 = 1.0 - float(np.sum(resid**2) / np.sum((y - y.mean()) ** 2))
        if slope >= 0:
            raise NonDecayError(f"distance to the manifold grows (rate {-slope:.3g})", times, dist)
        gammas.append(-float(slope))
        r2s.append(r2)
    return AttractionFit(float(np.median(gammas)), tuple(gammas), tuple(r2s), float(fr.sigma[k]))


def invariance_defect(graph: ManifoldGraph, xi0, t: float = 5.0, cfg: IntegratorConfig | None = None) -> float:
    """Largest distance to the graph along the flow from the graph point over xi0 (while inside the box)."""
    cfg = cfg or IntegratorConfig(dt=1e-3)
    _, U = _integrate(graph.frame, graph.point(np.atleast_1d(np.asarray(xi0, dtype=float))), t, cfg)
    xi, dist = graph_distance(graph, U)
    inside = np.all(np.abs(xi) <= graph.box_radius, axis=1)
    return float(np.max(dist[inside]))


# --- attractor samples ------------------------------------------------------------

@dataclass(frozen=True)
class AttractorConfig:
    samples_per_connection: int = 200
    launch: float = 1e-4
    arrive_tol: float = 1e-6
    t_max: float = 500.0
    integrator: IntegratorConfig = IntegratorConfig(dt=1e-3)
    fan_per_dim: int = 16
    norm_tag: NormTag = "H1"


@dataclass(eq=False)
class AttractorSample:
    points: np.ndarray  # (N, n)
    provenance: list[str]
    eps: float
    op: DiscreteOperator
    norm_tag: NormTag = "H1"
    equilibria: EquilibriumSet | None = None
    connections: list[tuple[int, int, int, int]] = field(default_factory=list)  # (src, dst, start, stop)
    resolution: float = 0.0

    def __len__(self) -> int:
        return self.points.shape[0]

    def states(self) -> list[DiscreteState]:
        return [DiscreteState(p, self.op.mesh) for p in self.points]

    def coordinates(self) -> np.ndarray:
        return norm_coordinates(self.op, self.points, self.norm_tag)


def _resample_arclength(states: np.ndarray, op: DiscreteOperator, n_samples: int, tag: NormTag):
    Y = norm_coordinates(op, states, tag)
    seg = np.linalg.norm(np.diff(Y, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    target = np.linspace(0.0, s[-1], n_samples)
    j = np.clip(np.searchsorted(s, target, side="right") - 1, 0, len(seg) - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(seg[j] > 0, (target - s[j]) / seg[j], 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    out = states[j] + frac[:, None] * (states[j + 1] - states[j])
    return out, float(s[-1])


def _launch_directions(k: int, fan: int, seed: int = 0) -> np.ndarray:
    if k == 1:
        return np.array([[1.0], [-1.0]])
    if k == 2:
        ang = np.linspace(0, 2 * np.pi, 2 * fan, endpoint=False)
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(fan * k, k))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def build_attractor(fam: CoefficientFamily, mesh: Mesh1D, eps: float,
                    cfg: AttractorConfig | None = None, eqs: EquilibriumSet | None = None) -> AttractorSample:
    """Equilibria plus arc-length samples of the connections leaving each unstable equilibrium."""
    cfg = cfg or AttractorConfig()
    op = assemble_operator(fam, mesh, eps)
    nl = NonlinearTerm(fam, eps)
    eqs = eqs or find_equilibria(fam, mesh, eps, op=op)
    if not all(eqs.hyperbolic):
        raise NonHyperbolicError("attractor sampling needs hyperbolic equilibria")
    E = eqs.points
    EY = norm_coordinates(op, E, cfg.norm_tag)
    points = [e for e in E]
    prov = ["equilibrium"] * len(E)
    connections = []
    resolution = 0.0
    stepper = Stepper(op, nl, cfg.integrator.dt, cfg.integrator.scheme)
    max_steps = int(math.ceil(cfg.t_max / cfg.integrator.dt))
    for i, (u_eq, k) in enumerate(zip(E, eqs.unstable_dims)):
        if k == 0:
            continue
        fr = local_frame(op, nl, u_eq)
        for d in _launch_directions(k, cfg.fan_per_dim):
            u = u_eq + cfg.launch * (fr.phi_u @ d)
            traj = [u_eq, u]
            target = None
            for _ in range(max_steps):
                u = stepper(u)
                traj.append(u)
                dist = np.linalg.norm(EY - norm_coordinates(op, u, cfg.norm_tag), axis=1)
                dist[i] = np.inf
                j = int(np.argmin(dist))
                if dist[j] <= cfg.arrive_tol:
                    target = j
                    break
            if target is None:
                raise ConnectionFailure(f"trajectory from equilibrium {i} reached no equilibrium by t={cfg.t_max:g}")
            traj.append(E[target])
            samples, length = _resample_arclength(np.array(traj), op, cfg.samples_per_connection, cfg.norm_tag)
            resolution = max(resolution, length / (cfg.samples_per_connection - 1))
            start = len(points)
            # endpoints coincide with equilibria already in the set
            inner = samples[1:-1]
            points.extend(inner)
            prov.extend(["heteroclinic-sample"] * inner.shape[0])
            connections.append((i, target, start, len(points)))
    return AttractorSample(np.array(points), prov, float(eps), op, cfg.norm_tag, eqs, connections, resolution)


def hausdorff_distance(A: AttractorSample, B: AttractorSample, ordered: bool = True):
    """(dist_H(A, B), dist_H(B, A), symmetric d_H) exactly over the finite samples."""
    if len(A) == 0 or len(B) == 0:
        raise ValueError("empty sample")
    if A.norm_tag != B.norm_tag:
        raise ValueError("samples use different norms")
    if A.op.n != B.op.n or not np.array_equal(A.op.mesh.nodes, B.op.mesh.nodes):
        raise ValueError("samples live on different meshes")
    # ENERGY depends on eps; H1 and L2 Gram matrices do not
    YA = norm_coordinates(A.op, A.points, A.norm_tag)
    YB = norm_coordinates(A.op, B.points, A.norm_tag)
    return hausdorff_points(YA, YB, ordered)


def hausdorff_points(YA: np.ndarray, YB: np.ndarray, ordered: bool = False):
    """Euclidean Hausdorff semidistances between point clouds (rows)."""
    dab = kernels.directed_hausdorff(YA, YB, ordered=ordered)[0]
    dba = kernels.directed_hausdorff(YB, YA, ordered=ordered)[0]
    return dab, dba, max(dab, dba)


def distance_to_sample(u, sample: AttractorSample) -> float:
    Y = sample.coordinates()
    y = norm_coordinates(sample.op, np.asarray(u, dtype=float), sample.norm_tag)
    return float(np.sqrt(np.min(np.sum((Y - y) ** 2, axis=1))))


def write_attractor(path, sample: AttractorSample) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point_index", "provenance"] + [f"node_{i}" for i in range(sample.points.shape[1])])
        for i, (p, tag) in enumerate(zip(sample.points, sample.provenance)):
            w.writerow([i, tag] + [f"{v:.17g}" for v in p])


# --- rate experiments ----------------------------------------------------------------

@dataclass
class AttractorRateResult:
    series: RateSeries
    power: RateFit | None
    logcorrected: RateFit | None
    notes: list[str]


def attractor_rate_experiment(fam: CoefficientFamily, mesh: Mesh1D, eps_sweep: Sequence[float],
                              cfg: AttractorConfig | None = None, resolution_factor: float = 5.0
                              ) -> AttractorRateResult:
    """d_H(A_eps, A_0) across a sweep; points with d_H < resolution_factor * resolution are excluded."""
    cfg = cfg or AttractorConfig()
    ref = build_attractor(fam, mesh, 0.0, cfg)
    notes = []
    eps_l, d_l, res_l, excl = [], [], [], []
    for eps in eps_sweep:
        if eps == 0:
            eps_l.append(0.0)
            d_l.append(0.0)
            res_l.append(ref.resolution)
            excl.append(True)
            continue
        eqs = find_equilibria(fam, mesh, eps)
        if len(eqs) != len(ref.equilibria):
            notes.append(f"equilibrium count {len(eqs)} at eps={eps:g} differs from {len(ref.equilibria)}; sweep truncated")
            break
        A = build_attractor(fam, mesh, eps, cfg, eqs=eqs)
        d = hausdorff_distance(A, ref)[2]
        res = max(A.resolution, ref.resolution)
        eps_l.append(eps)
        d_l.append(d)
        res_l.append(res)
        excl.append(d < resolution_factor * res)
    eps_a = np.array(eps_l)
    series = RateSeries(eps_a, np.array(d_l), np.array([fam.delta(e) for e in eps_a]),
                        excluded=np.array(excl), extra={"resolution": np.array(res_l)}, name="attractor")
    n_excl = int(np.sum(series.excluded & (series.eps > 0)))
    if n_excl:
        notes.append(f"{n_excl} resolution-dominated point(s) excluded")
    try:
        power = fit_rate(series, mode="power")
        logc = fit_rate(series, mode="logcorrected")
    except ValueError as exc:
        notes.append(str(exc))
        power = logc = None
    return AttractorRateResult(series, power, logc, notes)


def manifold_rate_experiment(fam: CoefficientFamily, mesh: Mesh1D, eps_sweep: Sequence[float],
                             eq_index: int | None = None, box_radius: float = 0.25, grid_n: int = 81):
    """|||s_eps - s_0||| on a shared grid across a sweep (graphs of the index-1 equilibrium by default)."""
    eq0 = find_equilibria(fam, mesh, 0.0)
    if eq_index is None:
        eq_index = next(i for i, k in enumerate(eq0.unstable_dims) if k in (1, 2))
    g0 = unstable_graph(eq0.points[eq_index], fam, mesh, 0.0, box_radius, grid_n, max_halvings=0)
    gaps, thetas = [], []
    for eps in eps_sweep:
        eqs = find_equilibria(fam, mesh, eps)
        op = assemble_operator(fam, mesh, eps)
        dist = [np.sqrt(op.G.quad(u - eq0.points[eq_index])) for u in eqs.points]
        ge = unstable_graph(eqs.points[int(np.argmin(dist))], fam, mesh, eps, g0.box_radius, grid_n,
                            max_halvings=0, op=op)
        gaps.append(manifold_gap(ge, g0))
        thetas.append(ge.theta_contraction)
    series = RateSeries(np.asarray(eps_sweep, dtype=float), np.array(gaps),
                        np.array([fam.delta(e) for e in eps_sweep]),
                        extra={"theta": np.array(thetas)}, name="manifold")
    return series, fit_rate(series, mode="power")
