import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from rdlab import Mesh1D, assemble_operator, default_family, linear_family
from rdlab.family import CoefficientError, CoefficientFamily, zero_reaction
from rdlab.fem import (
    SingularOperatorError,
    energy_norm,
    h1_norm,
    l2_norm,
    operator_gap_norm,
    operator_gap_norm_dense,
    read_matrix,
    resolvent_solve,
    solve_elliptic,
    write_matrix,
)
from rdlab.spectral import eigenpairs


def _family(p, lam=0.0, b=0.0, V=None):
    return CoefficientFamily(
        p=p,
        V=V or (lambda x, eps: np.zeros_like(np.asarray(x, dtype=float))),
        b=lambda e, eps: b,
        lam=lam,
        reaction=zero_reaction(),
        m0=0.0,
        test_mode=True,
    )


def test_unit_stiffness_two_elements():
    fam = _family(lambda x, eps: np.ones_like(np.asarray(x, dtype=float)))
    op = assemble_operator(fam, Mesh1D.uniform(2), 0.0)
    npt.assert_array_equal(op.K.dense(), 2.0 * np.array([[1, -1, 0], [-1, 2, -1], [0, -1, 1]]))


def test_variable_diffusion_matches_exact_integrals():
    fam = _family(lambda x, eps: 1.0 + np.asarray(x, dtype=float))
    op = assemble_operator(fam, Mesh1D.uniform(2), 0.0)
    # dphi = +-2 on each element, so entries are +-4 * int (1 + x) over the element
    e0 = integrate.quad(lambda x: 1 + x, 0.0, 0.5, epsabs=1e-14)[0]
    e1 = integrate.quad(lambda x: 1 + x, 0.5, 1.0, epsabs=1e-14)[0]
    want = 4.0 * np.array([[e0, -e0, 0], [-e0, e0 + e1, -e1], [0, -e1, e1]])
    npt.assert_allclose(op.K.dense(), want, rtol=1e-14, atol=1e-14)


@pytest.mark.parametrize("eps", [0.0, 0.01, 0.0625])
def test_operator_exactly_symmetric(fam, mesh64, eps):
    op = assemble_operator(fam, mesh64, eps)
    for T in (op.K, op.M, op.K1):
        D = T.dense()
        assert np.max(np.abs(D - D.T)) == 0.0
    assert np.all(np.linalg.eigvalsh(op.M.dense()) > 0)
    assert np.all(np.linalg.eigvalsh(op.K.dense()) > 0)


def test_indefinite_operator_rejected():
    fam = CoefficientFamily(
        p=lambda x, eps: np.ones_like(np.asarray(x, dtype=float)),
        V=lambda x, eps: np.zeros_like(np.asarray(x, dtype=float)),
        b=lambda e, eps: -40.0,
        lam=1.0,
        reaction=zero_reaction(),
        m0=0.5,
    )
    with pytest.raises(SingularOperatorError):
        assemble_operator(fam, Mesh1D.uniform(16), 0.0)


def test_diffusion_below_floor_rejected():
    fam = CoefficientFamily(
        p=lambda x, eps: 0.1 * np.ones_like(np.asarray(x, dtype=float)),
        V=lambda x, eps: np.zeros_like(np.asarray(x, dtype=float)),
        b=lambda e, eps: 0.0,
        lam=1.0,
        reaction=zero_reaction(),
        m0=0.5,
    )
    with pytest.raises(CoefficientError):
        assemble_operator(fam, Mesh1D.uniform(8), 0.0)


def test_default_family_declared_bounds_hold(fam):
    fam.check()


def test_mesh_validation():
    with pytest.raises(ValueError):
        Mesh1D(np.array([0.0, 0.6, 0.5, 1.0]))
    with pytest.raises(ValueError):
        Mesh1D(np.array([0.1, 1.0]))
    m = Mesh1D.uniform(8)
    assert m.n_nodes == 9 and m.refine().n_elements == 16


def test_norms_zero_and_dimension(fam, mesh64):
    op = assemble_operator(fam, mesh64, 0.01)
    z = np.zeros(op.n)
    assert energy_norm(op, z) == 0.0 and h1_norm(op, z) == 0.0 and l2_norm(op, z) == 0.0
    with pytest.raises(ValueError):
        energy_norm(op, np.zeros(op.n + 1))


def test_energy_equals_h1_for_unit_coefficients(rng):
    fam = linear_family(lam=1.0, boundary=0.0, test_mode=True)
    op = assemble_operator(fam, Mesh1D.uniform(32), 0.0)
    for _ in range(10):
        u = rng.normal(size=op.n)
        npt.assert_allclose(energy_norm(op, u) ** 2, h1_norm(op, u) ** 2, rtol=1e-13)


@pytest.mark.parametrize("eps", [0.0, 0.03, 0.0625])
def test_norm_sandwich(fam, mesh64, rng, eps):
    op = assemble_operator(fam, mesh64, eps)
    M0 = fam.M0
    for _ in range(100):
        u = rng.normal(size=op.n) * rng.uniform(0.1, 10.0)
        r = energy_norm(op, u) ** 2 / h1_norm(op, u) ** 2
        assert fam.m0 <= r <= M0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6), st.floats(0.0, 0.0625))
def test_norm_sandwich_property(coeffs, eps):
    fam = default_family()
    op = assemble_operator(fam, Mesh1D.uniform(32), eps)
    x = op.mesh.nodes
    u = sum(c * np.cos(k * np.pi * x + k) for k, c in enumerate(coeffs))
    if h1_norm(op, u) < 1e-8:
        return
    r = energy_norm(op, u) ** 2 / h1_norm(op, u) ** 2
    assert fam.m0 - 1e-12 <= r <= fam.M0 + 1e-12


def test_solve_elliptic_zero_and_round_trip(fam, mesh64, rng):
    op = assemble_operator(fam, mesh64, 0.02)
    npt.assert_array_equal(solve_elliptic(op, np.zeros(op.n)), np.zeros(op.n))
    w = rng.normal(size=op.n)
    load = op.K.matvec(w)
    # load = M f  for f = M^{-1} K w
    f = op.M.solve(load)
    npt.assert_allclose(solve_elliptic(op, f), w, atol=1e-9)


def _manufactured_error(n):
    # -u'' + u = (1 + pi^2) cos(pi x) with Robin weight 2; for u = cos(pi x) the boundary data are (2, -2)
    fam = linear_family(lam=1.0, boundary=2.0)
    mesh = Mesh1D.uniform(n)
    op = assemble_operator(fam, mesh, 0.0)
    x = mesh.nodes
    from rdlab._pykernels import GAUSS_W, GAUSS_X

    h = np.diff(x)
    xq = x[:-1, None] + h[:, None] * GAUSS_X[None, :]
    fq = (1.0 + np.pi**2) * np.cos(np.pi * xq)
    load = np.zeros(op.n)
    load[:-1] += np.sum(GAUSS_W * fq * (1 - GAUSS_X), axis=1) * h
    load[1:] += np.sum(GAUSS_W * fq * GAUSS_X, axis=1) * h
    load[0] += 2.0
    load[-1] += -2.0
    u = op.K.solve(load)
    e = u - np.cos(np.pi * x)
    return l2_norm(op, e)


def test_manufactured_solution_second_order():
    errs = [_manufactured_error(n) for n in (8, 16, 32, 64)]
    for a, b in zip(errs, errs[1:]):
        assert a / b >= 3.5


def test_resolvent_solve(fam, mesh64):
    op = assemble_operator(fam, mesh64, 0.01)
    sys = eigenpairs(op, 3)
    phi, lam = sys.eigenvectors[:, 0], sys.eigenvalues[0]
    load = op.M.matvec(phi)
    npt.assert_allclose(resolvent_solve(op, 1.0, load), phi / (1.0 + lam), atol=1e-10)
    npt.assert_allclose(resolvent_solve(op, 0.0, load), solve_elliptic(op, phi), atol=1e-12)
    with pytest.raises(SingularOperatorError):
        resolvent_solve(op, -float(op.spectrum[0]), load)


@pytest.mark.parametrize("mu", [0.0, 0.5, 3.0, -1.0])
def test_resolvent_consistency(fam, mesh64, rng, mu):
    op = assemble_operator(fam, mesh64, 0.03)
    b = rng.normal(size=op.n)
    u = resolvent_solve(op, mu, b)
    r = op.K.matvec(u) + mu * op.M.matvec(u) - b
    assert np.max(np.abs(r)) <= 1e-10 * np.max(np.abs(b))


def test_operator_gap_identical_is_zero(fam, mesh64):
    op = assemble_operator(fam, mesh64, 0.02)
    assert operator_gap_norm(op, op) <= 1e-12


@pytest.mark.parametrize("tags", [("L2", "H1"), ("L2", "L2"), ("H1", "H1"), ("L2", "ENERGY")])
def test_operator_gap_power_iteration_vs_svd(fam, tags):
    mesh = Mesh1D.uniform(48)
    A, B = assemble_operator(fam, mesh, 0.05), assemble_operator(fam, mesh, 0.0)
    npt.assert_allclose(operator_gap_norm(A, B, *tags), operator_gap_norm_dense(A, B, *tags), rtol=1e-6)


def test_operator_gap_monotone(fam, mesh64):
    B = assemble_operator(fam, mesh64, 0.0)
    gaps = [operator_gap_norm(assemble_operator(fam, mesh64, 2.0**-k), B) for k in range(4, 9)]
    for a, b in zip(gaps, gaps[1:]):
        assert b <= 1.05 * a


def test_matrix_text_round_trip(tmp_path, fam):
    op = assemble_operator(fam, Mesh1D.uniform(6), 0.03)
    write_matrix(tmp_path / "k.txt", op.K, "dense")
    write_matrix(tmp_path / "kb.txt", op.K, "banded")
    npt.assert_array_equal(read_matrix(tmp_path / "k.txt"), op.K.dense())
    back = read_matrix(tmp_path / "kb.txt")
    npt.assert_array_equal(back.dense(), op.K.dense())
    line = (tmp_path / "k.txt").read_text().splitlines()[0]
    assert len(line.split(" ")) == op.n
