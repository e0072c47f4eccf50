import math

import numpy as np
import numpy.testing as npt
import pytest

from rdlab.odeexample import (
    ODEConfig,
    bisect_positive_root,
    build_ode_attractor,
    flow,
    limit_equilibria,
    measure_attraction_rate,
    measure_lipschitz_growth,
    nonlinearity,
    ode_example_experiment,
    ode_hausdorff,
    rhs,
)

FAST = ODEConfig(samples_per_connection=2000, t_max=60.0)


def test_limit_equilibria_match_bisection():
    nl = nonlinearity("tanh")
    xe = limit_equilibria(1.0, nl)
    xb = bisect_positive_root(1.0)
    assert xe.size == 3
    npt.assert_allclose(xe, [-xb, 0.0, xb], atol=1e-12)
    assert abs(xb - 2.0 * math.tanh(xb)) <= 1e-13


def test_strong_damping_single_equilibrium():
    assert limit_equilibria(3.0, nonlinearity("tanh")).size == 1


def test_unknown_nonlinearity():
    with pytest.raises(ValueError):
        nonlinearity("cubic")


def test_jacobian_matches_finite_differences():
    F, J = rhs(0.05, 1.0, nonlinearity("tanh"))
    y = np.array([0.4, -0.2])
    h = 1e-6
    fd = np.column_stack([(np.array(F(0, y + h * e)) - np.array(F(0, y - h * e))) / (2 * h) for e in np.eye(2)])
    npt.assert_allclose(np.array(J(0, y)), fd, rtol=1e-6, atol=1e-6)


def test_limit_flow_embedding():
    nl = nonlinearity("tanh")
    t = np.linspace(0.0, 2.0, 5)
    Y = flow(0.0, 1.0, nl, [0.5, 0.7], t, FAST)
    assert Y[0, 1] == 0.7
    npt.assert_array_equal(Y[1:, 1], 0.0)
    assert np.all(np.diff(Y[:, 0]) > 0)


def test_zero_nonlinearity_trivial_attractors():
    nl = nonlinearity("zero")
    A0 = build_ode_attractor(0.0, 1.0, nl, FAST)
    for eps in (2.0**-4, 2.0**-8):
        A = build_ode_attractor(eps, 1.0, nl, FAST)
        npt.assert_array_equal(A.points, [[0.0, 0.0]])
        assert ode_hausdorff(A, A0) == 0.0


def test_zero_nonlinearity_experiment_reports_zero():
    res = ode_example_experiment(f_choice="zero", eps_sweep=[2.0**-4, 2.0**-5, 2.0**-6, 2.0**-7], cfg=FAST)
    npt.assert_array_equal(res.series.value, 0.0)
    assert res.fit is None and res.notes


def test_attractor_structure_and_shrinking_gap():
    nl = nonlinearity("tanh")
    A0 = build_ode_attractor(0.0, 1.0, nl, FAST)
    assert len(A0.points) == 3 + 2 * (FAST.samples_per_connection - 2)
    npt.assert_array_equal(A0.points[:, 1], 0.0)
    gaps = [ode_hausdorff(build_ode_attractor(e, 1.0, nl, FAST), A0) for e in (2.0**-4, 2.0**-5, 2.0**-6)]
    assert gaps[0] > gaps[1] > gaps[2] > 0
    # linear in eps: each halving roughly halves the gap
    for a, b in zip(gaps, gaps[1:]):
        assert 1.6 < a / b < 2.4


def test_measured_rates_positive():
    nl = nonlinearity("tanh")
    eps = 2.0**-6
    A = build_ode_attractor(eps, 1.0, nl, FAST)
    gamma, r2 = measure_attraction_rate(eps, 1.0, nl, A, trials=4, cfg=FAST)
    L = measure_lipschitz_growth(eps, 1.0, nl, pairs=4, cfg=FAST)
    assert gamma > 0 and r2 > 0.9
    # the saddle at 0 expands at rate f'(0) - mu = 1 in the limit
    assert L >= 0.9
