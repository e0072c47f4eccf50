import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdlab import Mesh1D, assemble_operator, linear_family
from rdlab.dynamics import (
    CardinalityMismatch,
    DivergenceError,
    IntegratorConfig,
    NonlinearTerm,
    absorbing_radius,
    default_guesses,
    equilibrium_gap,
    evolve,
    find_equilibria,
    linear_semigroup_gap,
    linearization_spectrum,
    lipschitz_ratio_sample,
    nonlinear_semigroup_gap,
    residual_norm,
    step,
    write_equilibria,
    write_trajectory,
)
from rdlab.family import Reaction
from rdlab.spectral import eigenpairs


@pytest.fixture(scope="module")
def linear_setup():
    fam = linear_family(lam=1.0, boundary=2.0)
    mesh = Mesh1D.uniform(64)
    op = assemble_operator(fam, mesh, 0.0)
    return fam, op, NonlinearTerm(fam, 0.0), eigenpairs(op, 8)


@pytest.fixture(scope="module")
def eq64(fam, mesh64):
    return find_equilibria(fam, mesh64, 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig(dt=0.0)
    with pytest.raises(ValueError):
        IntegratorConfig(scheme="RK4")


@pytest.mark.parametrize("k", [0, 3, 7])
def test_euler_mode_recursion(linear_setup, k):
    fam, op, nl, sys = linear_setup
    dt = 1e-2
    phi = sys.eigenvectors[:, k]
    out = step(phi, op, nl, IntegratorConfig(dt=dt, scheme="IMEX-Euler"))
    npt.assert_allclose(out, phi / (1.0 + dt * sys.eigenvalues[k]), atol=1e-12)


@pytest.mark.parametrize("scheme", ["IMEX-Euler", "IMEX-CN"])
@pytest.mark.parametrize("dt", [1e-3, 5e-4])
def test_equilibrium_is_fixed_point(fam, mesh64, eq64, scheme, dt):
    op = assemble_operator(fam, mesh64, 0.0)
    nl = NonlinearTerm(fam, 0.0)
    for u in eq64.points:
        out = step(u, op, nl, IntegratorConfig(dt=dt, scheme=scheme))
        scale = max(1.0, float(np.max(np.abs(u))))
        assert np.max(np.abs(out - u)) <= 1e-9 * scale


def _halving_slope(fam, mesh, scheme):
    op = assemble_operator(fam, mesh, 0.03)
    nl = NonlinearTerm(fam, 0.03)
    u0 = 0.5 * np.cos(np.pi * mesh.nodes) + 0.3
    # CN damps stiff modes poorly, so larger steps are pre-asymptotic
    dts = [4e-3, 2e-3, 1e-3, 5e-4]
    sols = [evolve(u0, 1.0, op, nl, IntegratorConfig(dt=d, scheme=scheme)) for d in dts]
    diffs = [np.sqrt(op.G.quad(a - b)) for a, b in zip(sols, sols[1:])]
    return np.polyfit(np.log(dts[:-1]), np.log(diffs), 1)[0]


def test_self_convergence_orders(fam):
    mesh = Mesh1D.uniform(32)
    assert 0.85 <= _halving_slope(fam, mesh, "IMEX-Euler") <= 1.15
    assert 1.8 <= _halving_slope(fam, mesh, "IMEX-CN") <= 2.2


def test_evolve_zero_time_identity(fam, mesh64):
    op = assemble_operator(fam, mesh64, 0.01)
    u0 = np.cos(np.pi * mesh64.nodes)
    npt.assert_array_equal(evolve(u0, 0.0, op, NonlinearTerm(fam, 0.01), IntegratorConfig()), u0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 40), st.integers(0, 40), st.sampled_from(["IMEX-Euler", "IMEX-CN"]))
def test_semigroup_law_exact(s_steps, t_steps, scheme):
    from rdlab import default_family

    fam = default_family()
    mesh = Mesh1D.uniform(24)
    op = assemble_operator(fam, mesh, 0.02)
    nl = NonlinearTerm(fam, 0.02)
    cfg = IntegratorConfig(dt=0.01, scheme=scheme)
    u0 = 1.5 * np.cos(2 * np.pi * mesh.nodes) - 0.2
    s, t = s_steps * cfg.dt, t_steps * cfg.dt
    npt.assert_array_equal(evolve(u0, s + t, op, nl, cfg), evolve(evolve(u0, s, op, nl, cfg), t, op, nl, cfg))


def test_linear_evolution_matches_eigen_expansion(linear_setup):
    fam, op, nl, _ = linear_setup
    full = eigenpairs(op)
    x = op.mesh.nodes
    u0 = np.cos(np.pi * x) + 0.3 * x**2
    coef = full.eigenvectors.T @ op.M.matvec(u0)
    exact = full.eigenvectors @ (np.exp(-0.5 * full.eigenvalues) * coef)
    errs = []
    for dt in (2e-3, 1e-3):
        u = evolve(u0, 0.5, op, nl, IntegratorConfig(dt=dt))
        errs.append(np.sqrt(op.G.quad(u - exact)))
    assert errs[1] < 1e-4
    assert errs[0] / errs[1] > 3.0


def test_mode_decay_amplitude(linear_setup):
    fam, op, nl, sys = linear_setup
    phi = sys.eigenvectors[:, 2]
    dt, lam = 5e-4, sys.eigenvalues[2]
    u = evolve(phi, 0.2, op, nl, IntegratorConfig(dt=dt))
    amp = phi @ op.M.matvec(u)
    # exact CN amplification over 400 steps, then the continuous decay at O(dt^2)
    npt.assert_allclose(amp, ((1 - dt * lam / 2) / (1 + dt * lam / 2)) ** 400, rtol=1e-9)
    npt.assert_allclose(amp, np.exp(-0.2 * lam), rtol=1e-3)


def test_divergence_guard():
    from rdlab.family import CoefficientFamily

    blow = Reaction(a=1.0, cubic=-1.0, tanh_g=lambda eps: 0.0, u_max=None)
    fam = CoefficientFamily(
        p=lambda x, eps: np.ones_like(np.asarray(x, dtype=float)),
        V=lambda x, eps: np.zeros_like(np.asarray(x, dtype=float)),
        b=lambda e, eps: 0.0,
        lam=1.0,
        reaction=blow,
    )
    mesh = Mesh1D.uniform(16)
    op = assemble_operator(fam, mesh, 0.0)
    with pytest.raises(DivergenceError), np.errstate(all="ignore"):
        evolve(np.full(op.n, 3.0), 5.0, op, NonlinearTerm(fam, 0.0), IntegratorConfig(dt=1e-3))


def test_absorbing_radius_stable_under_dt_halving(fam):
    mesh = Mesh1D.uniform(32)
    op = assemble_operator(fam, mesh, 0.02)
    nl = NonlinearTerm(fam, 0.02)
    r1 = absorbing_radius(op, nl, IntegratorConfig(dt=0.02, scheme="IMEX-Euler"), n_trials=20, t=50.0)
    r2 = absorbing_radius(op, nl, IntegratorConfig(dt=0.01, scheme="IMEX-Euler"), n_trials=20, t=50.0)
    assert r1 < 10.0
    assert abs(r1 - r2) <= 0.1 * r2


def test_lipschitz_sampling_below_bound(fam, mesh64):
    op = assemble_operator(fam, mesh64, 0.03)
    nl = NonlinearTerm(fam, 0.03)
    assert lipschitz_ratio_sample(nl, op, n_pairs=100) <= nl.lipschitz_bound()


def test_linear_semigroup_gap_identity(fam, mesh64):
    op = assemble_operator(fam, mesh64, 0.03)
    assert linear_semigroup_gap(op, op, 1.0) == 0.0
    with pytest.raises(ValueError):
        linear_semigroup_gap(op, op, 0.0)


def test_nonlinear_gap_zero_eps_exact(fam, mesh64):
    u0 = 0.5 * np.cos(np.pi * mesh64.nodes)
    assert nonlinear_semigroup_gap(fam, mesh64, 0.0, u0, 0.5, IntegratorConfig(dt=1e-3)) == 0.0


def test_zero_is_equilibrium(fam, mesh64, eq64):
    op = assemble_operator(fam, mesh64, 0.0)
    assert residual_norm(op, NonlinearTerm(fam, 0.0), np.zeros(op.n)) <= 1e-12
    zero = [i for i, u in enumerate(eq64.points) if np.max(np.abs(u)) < 1e-10]
    assert len(zero) == 1 and eq64.residuals[zero[0]] <= 1e-12


def test_three_equilibria_with_morse_indices(eq64):
    assert len(eq64) == 3
    assert eq64.unstable_dims == (0, 1, 0)
    assert all(eq64.hyperbolic)
    assert max(eq64.residuals) <= 1e-10


def test_equilibrium_count_dense_guess_oracle(fam, mesh64, eq64):
    op = assemble_operator(fam, mesh64, 0.0)
    dense = find_equilibria(fam, mesh64, 0.0, guesses=default_guesses(fam, op, n_const=210))
    assert len(dense) == len(eq64)
    assert np.max(equilibrium_gap(dense, eq64, op)) < 1e-8


def test_local_uniqueness_small_eps(fam, mesh64, eq64):
    eps = 2.0**-8
    delta = fam.delta(eps)
    op = assemble_operator(fam, mesh64, eps)
    found = find_equilibria(fam, mesh64, eps)
    for u0 in eq64.points:
        close = [u for u in found.points if np.sqrt(op.G.quad(u - u0)) < delta]
        assert len(close) == 1


def test_equilibrium_gap_identity_and_mismatch(fam, mesh64, eq64):
    op = assemble_operator(fam, mesh64, 0.0)
    npt.assert_array_equal(equilibrium_gap(eq64, eq64, op), np.zeros(3))
    from rdlab.dynamics import EquilibriumSet

    two = EquilibriumSet(eq64.points[:2], eq64.unstable_dims[:2], eq64.hyperbolic[:2], eq64.residuals[:2], 0.0)
    with pytest.raises(CardinalityMismatch):
        equilibrium_gap(two, eq64, op)


def test_linearization_vectors_biorthonormal(fam, mesh64, eq64):
    op = assemble_operator(fam, mesh64, 0.0)
    nl = NonlinearTerm(fam, 0.0)
    sigma, right, left = linearization_spectrum(op, nl, eq64.points[1], vectors=True)
    M = op.M.dense()
    npt.assert_allclose(left.T @ M @ right, np.eye(op.n), atol=1e-8)
    assert int(np.sum(sigma < 0)) == 1


def test_report_files(tmp_path, eq64):
    write_equilibria(tmp_path / "eq.csv", eq64)
    lines = (tmp_path / "eq.csv").read_text().splitlines()
    assert lines[0].startswith("index,morse_index,hyperbolic,residual,node_0")
    assert len(lines) == 4
    write_trajectory(tmp_path / "traj.csv", [0.0, 0.5], eq64.points[:2])
    rows = (tmp_path / "traj.csv").read_text().splitlines()
    assert rows[0].split(",")[0] == "t" and len(rows) == 3
