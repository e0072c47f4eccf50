import numpy as np
import numpy.testing as npt
import pytest

from rdlab import Mesh1D, default_family, linear_family
from rdlab.dynamics import find_equilibria
from rdlab.manifolds import build_attractor, hausdorff_points, norm_coordinates
from rdlab.reduction import (
    Neighborhood,
    OutsideNeighborhood,
    ShadowingFailure,
    SlavingDivergence,
    default_reduced_guesses,
    lpsp_attractor_bound,
    map_fixed_point,
    map_gap,
    noisy_orbit,
    orbit,
    pseudo_trajectory_defect,
    reduce,
    reduced_attractor,
    reduced_equilibria,
    reduced_hausdorff,
    reduced_map,
    shadow_solve,
    shadowing_trials,
    window_sensitivity,
    write_map_trace,
    write_shadowing_report,
)

DT = 0.02


@pytest.fixture(scope="module")
def r0(fam, mesh64):
    return reduce(fam, mesh64, 0.0, 4)


@pytest.fixture(scope="module")
def T0(r0):
    return reduced_map(r0, dt=DT)


@pytest.fixture(scope="module")
def A0(r0):
    return reduced_attractor(r0)


def test_linear_case_has_no_tail(mesh64, rng):
    rs = reduce(linear_family(lam=1.0, boundary=2.0), mesh64, 0.0, 4)
    V = rng.normal(size=(5, 4))
    npt.assert_array_equal(rs.slave(V), 0.0)
    npt.assert_allclose(rs.rhs(V), -V * rs.Lambda, atol=1e-12)
    T = reduced_map(rs, dt=DT)
    npt.assert_allclose(T(V), V * np.exp(-rs.Lambda), atol=1e-6)
    # RK4 is fourth order: halving the step cuts the error about 16x
    e1 = np.max(np.abs(T(V) - V * np.exp(-rs.Lambda)))
    e2 = np.max(np.abs(reduced_map(rs, dt=DT / 2)(V) - V * np.exp(-rs.Lambda)))
    assert e1 / e2 > 12.0


def test_slaving_residual_on_box(r0, rng):
    assert r0.contraction < 1.0
    box = rng.uniform(-1, 1, (64, 4)) * np.r_[3.0, 0.5, 0.5, 0.5]
    assert r0.slaving_residual(box) <= 1e-8


def test_slaving_divergence_reported(mesh64):
    with pytest.raises(SlavingDivergence):
        reduce(default_family(a=400.0), mesh64, 0.0, 1)


def test_reduced_equilibria_lift_to_full_newton(fam, mesh64, r0):
    eqs, dims = reduced_equilibria(r0, default_reduced_guesses(4))
    assert dims == (0, 1, 0)
    full = find_equilibria(fam, mesh64, 0.0)
    for v in eqs:
        u = r0.lift(v)[0]
        assert min(np.max(np.abs(u - p)) for p in full.points) <= 10 * r0.slaving_tol


def test_map_fixed_points_are_equilibria(r0, T0):
    eqs, _ = reduced_equilibria(r0, default_reduced_guesses(4))
    for e in eqs:
        assert np.linalg.norm(map_fixed_point(T0, e + 1e-3) - e) <= 1e-8


def test_map_requires_step_multiple(r0):
    with pytest.raises(ValueError):
        reduced_map(r0, dt=0.3)


def test_defect_trivial_cases(T0, A0):
    X = orbit(T0, A0.points[50], 30)
    assert pseudo_trajectory_defect(X, T0) <= 1e-12
    P = np.tile(A0.equilibria[2], (10, 1))
    assert pseudo_trajectory_defect(P, T0) <= 1e-12
    with pytest.raises(ValueError):
        pseudo_trajectory_defect(X[:1], T0)


def test_defect_noise_bounds(T0, A0):
    L = T0.record_lipschitz(A0.points[::10])
    rng = np.random.default_rng(3)
    for delta in (1e-5, 1e-4):
        Y, _ = noisy_orbit(T0, A0.points[50], 30, delta, rng)
        d = pseudo_trajectory_defect(Y, T0)
        assert delta / 2 <= d <= (1 + L) * delta


def test_shadow_exact_orbit_is_fixed(T0, A0):
    X = orbit(T0, A0.points[120], 40)
    res = shadow_solve(X, T0)
    assert res.distance <= 1e-10
    npt.assert_array_equal(res.orbit, X)


@pytest.mark.parametrize("which", [1, 2])
def test_shadow_pinned_fixed_point(T0, A0, which):
    e = A0.equilibria[which]
    off = np.zeros(4)
    off[1] = 1e-5
    res = shadow_solve(np.tile(e, (20, 1)) + off, T0)
    npt.assert_allclose(res.distance, 1e-5, rtol=1e-3)
    assert np.max(np.abs(res.orbit - e)) <= 1.01e-5


def test_shadow_failure_reported(T0, A0):
    Y = np.tile(A0.equilibria[1], (10, 1))
    Y[5] += 50.0
    with pytest.raises(ShadowingFailure):
        shadow_solve(Y, T0, max_iter=1)


def test_shadowing_ratio_statistics(T0, A0):
    starts = A0.points[np.random.default_rng(0).choice(len(A0.points), 10, replace=False)]
    rows = shadowing_trials(T0, starts, window=100, noise=1e-4)
    ratios = np.array([r[3] for r in rows])
    L_hat = ratios.max()
    assert L_hat >= 1.0 and L_hat / ratios.min() <= 2.0
    for _, defect, dist, _ in rows:
        assert dist <= L_hat * defect * (1 + 1e-12)


def test_window_doubling_stable(T0, A0):
    starts = A0.points[[40, 150, 300]]
    a, b, rel = window_sensitivity(T0, starts, 50)
    assert rel < 0.1


def test_lpsp_identity_and_outside(T0, A0):
    nb = Neighborhood.around(A0.points)
    assert np.all(nb.contains(A0.points))
    assert lpsp_attractor_bound(T0, T0, nb, 2.0) == 0.0
    with pytest.raises(OutsideNeighborhood):
        lpsp_attractor_bound(T0, T0, Neighborhood(nb.center, nb.radii / 10), 2.0, attractors=[A0])


def test_lpsp_bound_dominates_reduced_distance(fam, mesh64, T0, A0):
    starts = A0.points[[40, 150, 300]]
    L_hat = max(r[3] for r in shadowing_trials(T0, starts, window=100))
    for eps in (2.0**-4, 2.0**-6):
        rs = reduce(fam, mesh64, eps, 4)
        Ae = reduced_attractor(rs)
        nb = Neighborhood.around(np.vstack([Ae.points, A0.points]))
        bound = lpsp_attractor_bound(reduced_map(rs, dt=DT), T0, nb, L_hat, attractors=[Ae, A0],
                                     extra_points=np.vstack([Ae.points, A0.points])[::4])
        assert bound >= reduced_hausdorff(Ae, A0)[2]


def test_map_gap_shrinks_with_eps(fam, mesh64, T0, A0):
    gaps = [map_gap(reduced_map(reduce(fam, mesh64, e, 4), dt=DT), T0, A0.points[::8])
            for e in (2.0**-4, 2.0**-6, 2.0**-8)]
    assert gaps[0] > gaps[1] > gaps[2] > 0


def test_lifted_attractor_matches_full(fam, mesh64, r0, A0):
    full = build_attractor(fam, mesh64, 0.0)
    lifted = norm_coordinates(full.op, r0.lift(A0.points))
    d = hausdorff_points(lifted, full.coordinates())[2]
    assert d <= r0.slaving_residual(A0.points) + full.resolution + A0.resolution


def test_report_files(tmp_path, T0, A0):
    write_map_trace(tmp_path / "trace.csv", orbit(T0, A0.points[10], 5))
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "k,v0,v1,v2,v3" and len(lines) == 6
    write_shadowing_report(tmp_path / "sh.csv", [(0, 1e-4, 1.1e-4, 1.1)])
    lines = (tmp_path / "sh.csv").read_text().splitlines()
    assert lines[0] == "trial,defect,shadow_distance,ratio"
    assert lines[1].startswith("0,")
