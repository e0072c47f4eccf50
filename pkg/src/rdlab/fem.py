"""P1 finite elements on (0, 1) with Robin boundary terms.

Matrices are tridiagonal and stored as bands: ``diag`` of length n and
``off`` of length n - 1 (the super- and subdiagonal coincide).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Literal

import numpy as np
from scipy import linalg

from . import kernels
from ._pykernels import GAUSS_X
from .family import CoefficientError, CoefficientFamily

NormTag = Literal["L2", "H1", "ENERGY"]
NORM_TAGS = ("L2", "H1", "ENERGY")


class SingularOperatorError(linalg.LinAlgError):
    """The (shifted) operator is singular or indefinite."""


class ConvergenceFailure(RuntimeError):
    """An iterative method stopped before reaching its tolerance."""


@dataclass(frozen=True)
class Mesh1D:
    nodes: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.nodes, dtype=float)
        if x.ndim != 1 or x.size < 2:
            raise ValueError("mesh needs at least two nodes")
        if x[0] != 0.0 or x[-1] != 1.0:
            raise ValueError("mesh must span [0, 1]")
        if np.any(np.diff(x) <= 0):
            raise ValueError("mesh nodes must be strictly increasing")
        x.setflags(write=False)
        object.__setattr__(self, "nodes", x)

    @classmethod
    def uniform(cls, n_elements: int) -> "Mesh1D":
        if n_elements < 1:
            raise ValueError("n_elements must be positive")
        x = np.linspace(0.0, 1.0, n_elements + 1)
        return cls(x)

    @property
    def n_elements(self) -> int:
        return self.nodes.size - 1

    @property
    def n_nodes(self) -> int:
        return self.nodes.size

    @property
    def h(self) -> float:
        return float(np.max(np.diff(self.nodes)))

    def refine(self) -> "Mesh1D":
        """Split every element in two."""
        mid = 0.5 * (self.nodes[:-1] + self.nodes[1:])
        x = np.empty(2 * self.n_elements + 1)
        x[0::2] = self.nodes
        x[1::2] = mid
        return Mesh1D(x)


@dataclass(frozen=True)
class DiscreteState:
    values: np.ndarray
    mesh: Mesh1D

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.mesh.n_nodes,):
            raise ValueError("state length must equal the node count")
        object.__setattr__(self, "values", v)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def tri_matvec(diag, off, x):
    """y = T x for a symmetric tridiagonal T; x may be (n,) or (n, k)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        y = diag * x
        y[:-1] += off * x[1:]
        y[1:] += off * x[:-1]
        return y
    y = diag[:, None] * x
    y[:-1] += off[:, None] * x[1:]
    y[1:] += off[:, None] * x[:-1]
    return y


def tri_dense(diag, off):
    return np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)


@dataclass(frozen=True, eq=False)
class SymTridiag:
    """Symmetric positive definite tridiagonal matrix with a cached Cholesky factor."""

    diag: np.ndarray
    off: np.ndarray

    def __post_init__(self):
        self.diag.setflags(write=False)
        self.off.setflags(write=False)

    @property
    def n(self) -> int:
        return self.diag.size

    def matvec(self, x):
        return tri_matvec(self.diag, self.off, x)

    def dense(self) -> np.ndarray:
        return tri_dense(self.diag, self.off)

    def upper_band(self) -> np.ndarray:
        ab = np.zeros((2, self.n))
        ab[0, 1:] = self.off
        ab[1] = self.diag
        return ab

    @cached_property
    def cholesky(self) -> np.ndarray:
        """Lower band form of the Cholesky factor (row 0 diag, row 1 subdiag)."""
        ab = np.zeros((2, self.n))
        ab[0] = self.diag
        ab[1, :-1] = self.off
        try:
            return linalg.cholesky_banded(ab, lower=True)
        except linalg.LinAlgError as exc:
            raise SingularOperatorError("matrix is not positive definite") from exc

    def solve(self, b):
        return linalg.cho_solve_banded((self.cholesky, True), np.asarray(b, dtype=float), check_finite=False)

    def quad(self, u):
        """u^T T u (columnwise for 2D u)."""
        u = np.asarray(u, dtype=float)
        y = self.matvec(u)
        return np.sum(u * y, axis=0)

    def __add__(self, other: "SymTridiag") -> "SymTridiag":
        return SymTridiag(self.diag + other.diag, self.off + other.off)

    def scaled(self, a: float) -> "SymTridiag":
        return SymTridiag(a * self.diag, a * self.off)


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    """Assembled operator: K realizes the bilinear form, M the L2 product,
    K1 the unit stiffness used in the reference H1 norm."""

    K: SymTridiag
    M: SymTridiag
    K1: SymTridiag
    eps: float
    mesh: Mesh1D
    boundary_nodes: tuple[int, int]
    boundary_weights: tuple[float, float] = (0.0, 0.0)

    @property
    def n(self) -> int:
        return self.mesh.n_nodes

    @cached_property
    def G(self) -> SymTridiag:
        """Gram matrix of the H1 norm, K1 + M."""
        return self.K1 + self.M

    def gram(self, tag: NormTag) -> SymTridiag:
        if tag == "L2":
            return self.M
        if tag == "H1":
            return self.G
        if tag == "ENERGY":
            return self.K
        raise ValueError(f"unknown norm tag {tag!r}")

    @cached_property
    def spectrum(self) -> np.ndarray:
        """All generalized eigenvalues of (K, M), ascending."""
        return linalg.eigh(self.K.dense(), self.M.dense(), eigvals_only=True)

    def boundary_load(self, values) -> np.ndarray:
        """Vector B y placing two endpoint values at the endpoint rows."""
        out = np.zeros(self.n)
        out[self.boundary_nodes[0]] += values[0]
        out[self.boundary_nodes[1]] += values[1]
        return out


def assemble_operator(fam: CoefficientFamily, mesh: Mesh1D, eps: float) -> DiscreteOperator:
    """Assemble K, M, K1 for the family at parameter eps."""
    eps = float(eps)
    if eps < 0 or eps > fam.eps_max * (1 + 1e-12):
        raise ValueError(f"eps={eps} outside [0, {fam.eps_max}]")
    x = mesh.nodes
    h = np.diff(x)
    xq = x[:-1, None] + h[:, None] * GAUSS_X[None, :]
    pq = np.asarray(fam.p(xq, eps), dtype=float) * np.ones_like(xq)
    if np.min(pq) < fam.m0 - 1e-12:
        raise CoefficientError(f"diffusion below m0={fam.m0} at a quadrature point")
    cq = fam.lam + np.asarray(fam.V(xq, eps), dtype=float) * np.ones_like(xq)
    kd, ko = kernels.assemble_bands(h, pq, cq)
    w0 = fam.lam + fam.b(0, eps)
    w1 = fam.lam + fam.b(1, eps)
    kd[0] += w0
    kd[-1] += w1
    ones = np.ones_like(xq)
    zeros = np.zeros_like(xq)
    md, mo = kernels.assemble_bands(h, zeros, ones)
    sd, so = kernels.assemble_bands(h, ones, zeros)
    K = SymTridiag(kd, ko)
    op = DiscreteOperator(
        K=K,
        M=SymTridiag(md, mo),
        K1=SymTridiag(sd, so),
        eps=eps,
        mesh=mesh,
        boundary_nodes=(0, mesh.n_nodes - 1),
        boundary_weights=(w0, w1),
    )
    if not fam.test_mode:
        _ = K.cholesky  # raises on an indefinite K
    return op


def _vec(u, n: int) -> np.ndarray:
    v = np.asarray(u, dtype=float)
    if v.shape[0] != n:
        raise ValueError(f"dimension mismatch: got {v.shape[0]}, expected {n}")
    return v


def energy_norm(op: DiscreteOperator, u) -> float:
    u = _vec(u, op.n)
    return float(np.sqrt(max(op.K.quad(u), 0.0)))


def h1_norm(op: DiscreteOperator, u) -> float:
    u = _vec(u, op.n)
    return float(np.sqrt(op.G.quad(u)))


def l2_norm(op: DiscreteOperator, u) -> float:
    u = _vec(u, op.n)
    return float(np.sqrt(op.M.quad(u)))


def norm(op: DiscreteOperator, u, tag: NormTag) -> float:
    u = _vec(u, op.n)
    return float(np.sqrt(max(op.gram(tag).quad(u), 0.0)))


def solve_elliptic(op: DiscreteOperator, rhs_interior, rhs_boundary=(0.0, 0.0)) -> np.ndarray:
    """Solve K u = M rhs_interior + B rhs_boundary."""
    f = _vec(rhs_interior, op.n)
    load = op.M.matvec(f) + op.boundary_load(rhs_boundary)
    u = op.K.solve(load)
    scale = max(np.max(np.abs(load)), np.finfo(float).tiny)
    if np.max(np.abs(op.K.matvec(u) - load)) > 1e-10 * scale:
        raise SingularOperatorError("elliptic solve residual above tolerance")
    return u


def resolvent_solve(op: DiscreteOperator, mu: float, load) -> np.ndarray:
    """Solve (mu M + K) u = load."""
    b = _vec(load, op.n)
    if mu >= 0:
        A = op.K + op.M.scaled(mu)
        u = A.solve(b)
    else:
        lam = op.spectrum
        if np.min(np.abs(lam + mu)) <= 1e-10 * max(1.0, abs(mu)):
            raise SingularOperatorError(f"mu={mu} lies on the spectrum")
        ab = np.zeros((3, op.n))
        ab[0, 1:] = op.K.off + mu * op.M.off
        ab[1] = op.K.diag + mu * op.M.diag
        ab[2, :-1] = op.K.off + mu * op.M.off
        u = linalg.solve_banded((1, 1), ab, b)
    return u


def dense_cholesky(T: SymTridiag) -> np.ndarray:
    """Lower triangular L with T = L L^T (dense)."""
    return np.linalg.cholesky(T.dense())


def operator_gap_norm(
    A: DiscreteOperator,
    B: DiscreteOperator,
    in_norm: NormTag = "L2",
    out_norm: NormTag = "H1",
    tol: float = 1e-8,
    max_iter: int = 20000,
    seed: int = 0,
    agree: float = 1e-6,
) -> float:
    """Norm of (K_A^{-1} - K_B^{-1}) M from in_norm to out_norm.

    Power iteration on S = T* T, with T = (K_A^{-1} - K_B^{-1}) M and the
    adjoint taken in the Gram inner products; two random starts must agree.
    ENERGY refers to the energy norm of A.
    """
    if A.n != B.n:
        raise ValueError("operators live on different meshes")
    Gi = A.gram(in_norm)
    Go = A.gram(out_norm)

    def T(x):
        load = A.M.matvec(x)
        return A.K.solve(load) - B.K.solve(load)

    def T_adj(y):
        # <T x, y>_Go = <x, T* y>_Gi with T^T = M (K_A^{-1} - K_B^{-1})
        r = Go.matvec(y)
        z = A.M.matvec(A.K.solve(r) - B.K.solve(r))
        return Gi.solve(z)

    rng = np.random.default_rng(seed)
    estimates = []
    for _ in range(2):
        x = rng.standard_normal(A.n)
        nx = np.sqrt(Gi.quad(x))
        x /= nx
        sigma2 = 0.0
        for it in range(max_iter):
            y = T_adj(T(x))
            new = float(np.dot(x, Gi.matvec(y)))
            ny = np.sqrt(Gi.quad(y))
            if ny == 0.0:
                sigma2 = 0.0
                break
            x = y / ny
            if abs(new - sigma2) <= tol * max(abs(new), 1e-300):
                sigma2 = new
                break
            sigma2 = new
        else:
            raise ConvergenceFailure("power iteration did not converge")
        estimates.append(np.sqrt(max(sigma2, 0.0)))
    s1, s2 = estimates
    scale = max(s1, s2)
    if scale > 1e-14 and abs(s1 - s2) > agree * scale:
        raise ConvergenceFailure(f"power iteration starts disagree: {s1} vs {s2}")
    return float(scale)


def weighted_operator_norm(D: np.ndarray, op: DiscreteOperator, in_norm: NormTag, out_norm: NormTag) -> float:
    """Norm of the nodal matrix D as a map between the tagged norms (dense SVD)."""
    Li = dense_cholesky(op.gram(in_norm))
    Lo = dense_cholesky(op.gram(out_norm))
    X = linalg.solve_triangular(Li, (Lo.T @ D).T, lower=True).T  # Lo^T D Li^{-T}
    return float(np.linalg.svd(X, compute_uv=False)[0])


def operator_gap_norm_dense(A: DiscreteOperator, B: DiscreteOperator, in_norm: NormTag = "L2",
                            out_norm: NormTag = "H1") -> float:
    """Same quantity as operator_gap_norm by dense SVD (independent check, small meshes)."""
    D = (np.linalg.inv(A.K.dense()) - np.linalg.inv(B.K.dense())) @ A.M.dense()
    return weighted_operator_norm(D, A, in_norm, out_norm)


def write_matrix(path, matrix, fmt: Literal["dense", "banded"] = "dense") -> None:
    """Text format: one row per line, space-separated, 17 significant digits.

    Banded files store the symmetric tridiagonal upper band form: a first row
    with the superdiagonal (left-padded with 0) and a second row with the
    diagonal, preceded by a ``# banded`` comment line.
    """
    if isinstance(matrix, SymTridiag):
        dense_rows = matrix.dense() if fmt == "dense" else matrix.upper_band()
    else:
        dense_rows = np.atleast_2d(np.asarray(matrix, dtype=float))
    header = "banded" if fmt == "banded" else ""
    np.savetxt(path, dense_rows, fmt="%.17g", delimiter=" ", header=header, comments="# ", newline="\n")


def read_matrix(path) -> np.ndarray | SymTridiag:
    with open(path) as fh:
        first = fh.readline()
    data = np.loadtxt(path, ndmin=2, comments="#")
    if first.startswith("# banded"):
        return SymTridiag(data[1].copy(), data[0, 1:].copy())
    return data
