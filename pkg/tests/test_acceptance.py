"""Acceptance gate: one test per criterion, each run from the shipped config at full scale.

Every test records a single PASS/FAIL line (see the terminal summary).  Rate
criteria that the measurements do not meet fail here on purpose.
"""
import functools
import time
from pathlib import Path

import numpy as np
import pytest

from rdlab import Mesh1D, assemble_operator, default_family
from rdlab import experiments as ex
from rdlab.dynamics import IntegratorConfig, NonlinearTerm, evolve, find_equilibria, residual_norm
from rdlab.fem import energy_norm, h1_norm
from rdlab.manifolds import hausdorff_points
from rdlab.spectral import eigenpairs, spectral_projection

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@functools.cache
def _result(name: str) -> ex.ExperimentResult:
    return ex.execute(ex.load_config(CONFIGS / f"{name}.toml"))


def _fmt(c: ex.Check) -> str:
    meas = "n/a" if c.measured is None else f"{c.measured:.4g}"
    return f"{c.name} = {meas} (want {c.threshold}){'' if c.passed else ' FAIL'}"


def _gate(verdict, criterion: str, experiments: list[str]):
    checks = []
    for name in experiments:
        checks += [c for c in _result(name).checks if c.criterion in (criterion, "mesh", "dt")]
    ok = bool(checks) and all(c.passed for c in checks)
    verdict(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | " + "; ".join(_fmt(c) for c in checks))
    assert ok, "failed: " + "; ".join(_fmt(c) for c in checks if not c.passed)


def test_criterion_1_resolvent(verdict):
    _gate(verdict, "1", ["resolvent-rate"])


def test_criterion_2_eigen_and_projection(verdict):
    _gate(verdict, "2", ["eigen-rate", "projection-rate"])


def test_criterion_3_equilibria(verdict):
    _gate(verdict, "3", ["equilibria-rate"])


def test_criterion_4_linear_semigroup(verdict):
    _gate(verdict, "4", ["linear-semigroup-rate"])


def test_criterion_5_nonlinear_semigroup(verdict):
    _gate(verdict, "5", ["semigroup-rate"])


def test_criterion_6_unstable_manifolds(verdict):
    _gate(verdict, "6", ["manifold-rate"])


def test_criterion_7_attractors(verdict):
    _gate(verdict, "7", ["attractor-rate"])


def test_criterion_8_equi_attraction(verdict):
    _gate(verdict, "8", ["equi-attraction-table", "ode-example"])


def test_criterion_9_shadowing(verdict):
    _gate(verdict, "9", ["shadowing", "reduced-map-rate"])


def _structural_suite() -> dict[str, bool]:
    fam = default_family()
    mesh = Mesh1D.uniform(256)
    rng = np.random.default_rng(10)
    eps_list = [2.0**-k for k in range(4, 11)] + [0.0]
    out = {}

    sym = True
    for e in eps_list:
        op = assemble_operator(fam, mesh, e)
        for T in (op.K, op.M):
            D = T.dense()
            sym &= bool(np.max(np.abs(D - D.T)) == 0.0)
    out["matrix symmetry"] = sym

    ok = True
    for e in (0.0, 2.0**-7, 2.0**-4):
        op = assemble_operator(fam, mesh, e)
        for _ in range(100):
            u = rng.normal(size=op.n)
            r = energy_norm(op, u) ** 2 / h1_norm(op, u) ** 2
            ok &= fam.m0 <= r <= fam.M0
    out["norm sandwich"] = ok

    op = assemble_operator(fam, mesh, 2.0**-6)
    sys = eigenpairs(op, 8)
    ok = True
    for m in range(1, 7):
        Q = spectral_projection(sys, m)
        for _ in range(20):
            u = rng.normal(size=op.n)
            Qu = Q.apply(u)
            ok &= np.max(np.abs(Q.apply(Qu) - Qu)) <= 1e-10 * max(1.0, np.max(np.abs(u)))
    out["projector idempotence"] = bool(ok)

    small = Mesh1D.uniform(64)
    opn = assemble_operator(fam, small, 2.0**-5)
    nl = NonlinearTerm(fam, 2.0**-5)
    cfg = IntegratorConfig(dt=1e-3)
    u0 = np.cos(np.pi * small.nodes) * 1.5
    ok = True
    for s, t in ((0.1, 0.2), (0.25, 0.05), (0.0, 0.3)):
        ok &= np.array_equal(evolve(u0, s + t, opn, nl, cfg), evolve(evolve(u0, s, opn, nl, cfg), t, opn, nl, cfg))
    ok &= np.array_equal(evolve(u0, 0.0, opn, nl, cfg), u0)
    out["semigroup law"] = bool(ok)

    eqs = find_equilibria(fam, mesh, 0.0)
    op0 = assemble_operator(fam, mesh, 0.0)
    out["Newton residuals"] = (len(eqs) == 3 and max(eqs.residuals) <= 1e-10
                               and residual_norm(op0, NonlinearTerm(fam, 0.0), np.zeros(op0.n)) <= 1e-12)

    ok = True
    for _ in range(50):
        A, B, C = (rng.normal(size=(rng.integers(1, 60), 4)) for _ in range(3))
        dab, dbc, dac = hausdorff_points(A, B)[2], hausdorff_points(B, C)[2], hausdorff_points(A, C)[2]
        ok &= dab == hausdorff_points(B, A)[2] and dac <= dab + dbc + 1e-12 and hausdorff_points(A, A)[2] == 0.0
    out["Hausdorff pseudometric"] = bool(ok)
    return out


def test_criterion_10_structural_suite(verdict):
    t0 = time.perf_counter()
    parts = _structural_suite()
    elapsed = time.perf_counter() - t0
    ok = all(parts.values()) and elapsed <= 120.0
    verdict(f"criterion 10: {'PASS' if ok else 'FAIL'} | "
            + "; ".join(f"{k} {'ok' if v else 'FAIL'}" for k, v in parts.items()) + f"; runtime {elapsed:.1f} s (want <= 120)")
    assert ok, parts
