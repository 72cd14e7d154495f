import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from convexflow.envelope import reference_envelope
from convexflow.grid import AXES, STENCIL8, Grid, ScalarField, second_differences_field
from convexflow.problems import problem_library
from convexflow.solver import CFLError, NumericalAbort, cfl_dt, solve, step, time_lipschitz_check


def test_cfl_examples():
    g1 = Grid.square(0, 1, 11, 1)
    assert cfl_dt(g1, AXES(1), 1.0) == pytest.approx(0.005)
    g2 = Grid.square(0, 1, 11, 2)
    assert cfl_dt(g2, STENCIL8, 0.5) == pytest.approx(0.0025)
    g3 = Grid.square(0, 1, 21, 2)
    assert cfl_dt(g3, STENCIL8, 0.5) == pytest.approx(cfl_dt(g2, STENCIL8, 0.5) / 4)
    with pytest.raises(ValueError):
        cfl_dt(g1, AXES(1), 1.5)


def test_step_rejects_cfl_violation():
    g = Grid.square(0, 1, 11, 1)
    u = ScalarField(g, np.zeros(g.shape))
    with pytest.raises(CFLError, match="CFL"):
        step(u, 0.006, AXES(1))


def test_step_convex_quadratic_stationary():
    g = Grid.square(-1, 1, 21, 2)
    u = ScalarField.sample(g, lambda x, y: x * x + x * y + y * y)
    assert np.array_equal(step(u, cfl_dt(g, STENCIL8, 1.0), STENCIL8).values, u.values)


def test_step_concave_parabola_drops_by_2dt():
    g = Grid.square(-1, 1, 21, 1)
    u = ScalarField.sample(g, lambda x: -x * x)
    dt = cfl_dt(g, AXES(1), 0.7)
    new = step(u, dt, AXES(1))
    assert np.allclose(new.values[1:-1] - u.values[1:-1], -2 * dt, atol=1e-14)
    assert new.values[0] == u.values[0] and new.values[-1] == u.values[-1]


def test_step_double_well_origin():
    p = problem_library("double_well_1d")
    g = p.grid()
    u = p.sample(g)
    dt = cfl_dt(g, AXES(1), 1.0)
    i0 = 100
    drop = step(u, dt, AXES(1)).values[i0] - u.values[i0]
    # u0''(0) = -4; the centred difference of a quartic is off by h^2 * u''''/12 = 2 h^2
    assert drop == pytest.approx(-4 * dt, rel=3 * g.h**2)


@settings(max_examples=30, deadline=None)
@given(arrays(float, (9, 9), elements=st.floats(-1, 1)), arrays(float, (9, 9), elements=st.floats(0, 1)))
def test_step_is_monotone_and_nonincreasing(vals, bump):
    g = Grid.square(-1, 1, 9, 2)
    u = ScalarField(g, vals)
    v = ScalarField(g, vals + bump)
    dt = cfl_dt(g, STENCIL8, 1.0)
    su, sv = step(u, dt, STENCIL8), step(v, dt, STENCIL8)
    assert np.all(su.values <= u.values)
    assert np.all(su.values <= sv.values + 1e-15)


def test_solve_convex_all_equal():
    p = problem_library("convex_quadratic_2d")
    s = solve(p, 1.0, [0.0, 0.5, 1.0], n=21)
    for v in s.values:
        assert np.array_equal(v, s.values[0])
    assert s.steady_state_reached


def test_solve_snapshot_bookkeeping():
    p = problem_library("double_well_1d")
    s = solve(p, 0.5, [0.0, 0.1, 0.25, 0.5], n=41)
    assert s.times[0] == 0.0 and s.times[-1] == 0.5
    assert len(s) == 4
    assert np.array_equal(s.values[0], p.sample(p.grid(41)).values)
    dt = s.dt_used
    assert dt <= cfl_dt(s.grid, s.dirs, 0.9)
    assert np.allclose(s.times, np.array(s.steps) * dt, atol=1e-12)
    assert np.all(np.abs(s.times - [0.0, 0.1, 0.25, 0.5]) <= dt / 2 + 1e-12)
    assert np.all(np.diff(s.values, axis=0) <= 0)
    assert np.array_equal(s.values[:, 0], s.values[0, 0].repeat(4))


def test_solve_rejects_bad_snapshot_times():
    p = problem_library("double_well_1d")
    with pytest.raises(ValueError):
        solve(p, 1.0, [0.5, 0.2], n=21)
    with pytest.raises(ValueError):
        solve(p, 1.0, [0.0, 2.0], n=21)


def test_solve_unstable_run_aborts(tmp_path):
    p = problem_library("double_well_1d")
    with pytest.raises(NumericalAbort, match="non-finite") as info:
        with np.errstate(all="ignore"):
            solve(p, 50.0, [0.0, 50.0], n=41, safety=40.0, enforce_cfl=False, dump_dir=tmp_path)
    assert "dumped" in str(info.value)
    assert list(tmp_path.glob("abort_step*.npy"))


def test_double_well_error_decreases():
    p = problem_library("double_well_1d")
    s = solve(p, 2.0, [1.0, 2.0], n=101)
    env = reference_envelope(s.initial).envelope.values
    e1 = np.max(s.values[1] - env)
    e2 = np.max(s.values[2] - env)
    assert e2 < e1


def test_time_lipschitz_examples():
    p = problem_library("convex_quadratic_1d")
    rep = time_lipschitz_check(solve(p, 0.5, [0.0, 0.25, 0.5], n=41))
    assert rep.worst_ratio == 0.0 and rep.passed
    g = Grid.square(-1, 1, 41, 1)
    u = ScalarField.sample(g, lambda x: -x * x)
    s = solve(u, 0.1, [0.0, 0.05, 0.1])
    rep = time_lipschitz_check(s)
    md = np.max(np.abs(second_differences_field(u.values, g.h, AXES(1))))
    # nodes next to the frozen band slow down slightly, everything else drops by exactly 2 dt
    assert rep.worst_ratio == pytest.approx(2.0 / md, rel=1e-3)
    assert rep.worst_ratio <= 1.0
    dw = problem_library("double_well_1d")
    rep = time_lipschitz_check(solve(dw, 1.0, np.linspace(0, 1, 11)), dw.hessian_bound_M)
    assert rep.passed and rep.worst_ratio <= 1 + 1e-6
