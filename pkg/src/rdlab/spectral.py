"""Generalized eigenpairs K phi = lambda M phi and rank-m spectral projections."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .fem import DiscreteOperator, NormTag, weighted_operator_norm

CLUSTER_TOL = 1e-8


class ClusterAmbiguityError(ValueError):
    """Eigenvalues too close to be matched reliably by index."""


class DegenerateCutError(ValueError):
    """No spectral gap at the requested projection rank."""


@dataclass(frozen=True, eq=False)
class EigenSystem:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns, M-orthonormal
    op: DiscreteOperator

    @property
    def count(self) -> int:
        return self.eigenvalues.size

    def residual(self) -> float:
        """max_k |K phi_k - lambda_k M phi_k|_{M^-1} / lambda_k."""
        Phi = self.eigenvectors
        R = self.op.K.matvec(Phi) - self.op.M.matvec(Phi) * self.eigenvalues[None, :]
        dual = np.sum(R * self.op.M.solve(R), axis=0)
        return float(np.max(np.sqrt(dual) / np.maximum(np.abs(self.eigenvalues), 1e-300)))

    def orthonormality_error(self) -> float:
        Phi = self.eigenvectors
        return float(np.max(np.abs(Phi.T @ self.op.M.matvec(Phi) - np.eye(self.count))))


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs[None, :]


def eigenpairs(op: DiscreteOperator, count: int | None = None) -> EigenSystem:
    """Lowest ``count`` eigenpairs (all when None), largest entry of each vector positive."""
    n = op.n
    if count is None:
        count = n
    if not 0 < count <= n:
        raise ValueError(f"count must be in [1, {n}]")
    try:
        vals, vecs = linalg.eigh(op.K.dense(), op.M.dense(), subset_by_index=[0, count - 1])
    except linalg.LinAlgError as exc:
        raise RuntimeError("generalized eigensolver failed") from exc
    vecs = _fix_signs(vecs)
    vals.setflags(write=False)
    vecs.setflags(write=False)
    return EigenSystem(vals, vecs, op)


@dataclass(frozen=True, eq=False)
class SpectralProjector:
    rank: int
    basis: np.ndarray  # n x rank
    op: DiscreteOperator

    def apply(self, u):
        u = np.asarray(u, dtype=float)
        if self.rank == 0:
            return np.zeros_like(u)
        return self.basis @ (self.basis.T @ self.op.M.matvec(u))

    def matrix(self) -> np.ndarray:
        if self.rank == 0:
            return np.zeros((self.op.n, self.op.n))
        return self.basis @ (self.op.M.matvec(self.basis)).T


def spectral_projection(sys: EigenSystem, m: int) -> SpectralProjector:
    if not 0 <= m <= sys.count:
        raise ValueError(f"rank {m} outside [0, {sys.count}]")
    lam = sys.eigenvalues
    if 0 < m < sys.count and abs(lam[m] - lam[m - 1]) <= CLUSTER_TOL * max(1.0, abs(lam[m])):
        raise DegenerateCutError(f"lambda_{m - 1} and lambda_{m} coincide; no gap at rank {m}")
    return SpectralProjector(m, sys.eigenvectors[:, :m], sys.op)


def projection_gap(Qa: SpectralProjector, Qb: SpectralProjector, in_norm: NormTag = "L2",
                   out_norm: NormTag = "H1") -> float:
    """Norm of Qa - Qb between the tagged norms (norms of Qa's operator)."""
    if Qa.rank != Qb.rank:
        raise ValueError("projection ranks differ")
    if Qa.op.n != Qb.op.n:
        raise ValueError("projections live on different meshes")
    D = Qa.matrix() - Qb.matrix()
    return weighted_operator_norm(D, Qa.op, in_norm, out_norm)


def _check_cluster(lam: np.ndarray, k: int) -> None:
    for j in (k - 1, k + 1):
        if 0 <= j < lam.size and abs(lam[j] - lam[k]) < CLUSTER_TOL * max(1.0, abs(lam[k])):
            raise ClusterAmbiguityError(f"eigenvalue {k} is in a cluster; index matching unreliable")


def eigenvalue_gap(sysA: EigenSystem, sysB: EigenSystem, k: int) -> float:
    if not (0 <= k < sysA.count and k < sysB.count):
        raise IndexError(f"eigenvalue index {k} out of range")
    _check_cluster(sysA.eigenvalues, k)
    _check_cluster(sysB.eigenvalues, k)
    return float(abs(sysA.eigenvalues[k] - sysB.eigenvalues[k]))


def gap_condition_profile(sys: EigenSystem) -> np.ndarray:
    """Consecutive gaps lambda_m - lambda_{m-1}, m = 1 .. count-1."""
    if sys.count < 2:
        raise ValueError("need at least two eigenvalues")
    return np.diff(sys.eigenvalues)


def select_reduction_rank(sys: EigenSystem, cap: int) -> int:
    """Rank M <= cap placed at the largest gap among the first cap eigenvalues."""
    gaps = gap_condition_profile(sys)
    cap = min(cap, gaps.size)
    if cap < 1:
        raise ValueError("cap must be at least 1")
    return int(np.argmax(gaps[:cap])) + 1


def write_eigen_report(path, rows) -> None:
    """rows: iterable of (k, lambda_eps, lambda_0, abs_gap, eps)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "lambda_eps", "lambda_0", "abs_gap", "eps"])
        for k, le, l0, gap, eps in rows:
            w.writerow([int(k)] + [f"{float(v):.17g}" for v in (le, l0, gap, eps)])


def eigen_report_rows(sys_eps: EigenSystem, sys_0: EigenSystem, count: int):
    return [
        (k, sys_eps.eigenvalues[k], sys_0.eigenvalues[k],
         abs(sys_eps.eigenvalues[k] - sys_0.eigenvalues[k]), sys_eps.op.eps)
        for k in range(count)
    ]
