import numpy as np
import pytest

from convexflow.diagnostics import (
    FitError,
    fit_rate,
    grad_error_series,
    lemma2_gradient_bound_check,
    rate_floor,
    structural_audit,
    sup_error_series,
)
from convexflow.envelope import reference_envelope
from convexflow.grid import AXES, Grid, ScalarField, second_differences_field
from convexflow.problems import problem_library
from convexflow.solver import Snapshots, solve


def _m_disc(s):
    return float(np.max(np.abs(second_differences_field(s.values[0], s.grid.h, s.dirs))))


def test_fit_rate_exact_exponential():
    t = np.linspace(0, 5, 51)
    fit = fit_rate((t, 3.0 * np.exp(-0.7 * t)))
    assert fit.C == pytest.approx(3.0, rel=1e-10)
    assert fit.lam == pytest.approx(0.7, rel=1e-10)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
    assert fit.window[1] == 5.0 and fit.window[0] == pytest.approx(2.5)


def test_fit_rate_noise_robust():
    rng = np.random.default_rng(7)
    t = np.linspace(0, 5, 51)
    e = 3.0 * np.exp(-0.7 * t) * (1 + 0.01 * rng.standard_normal(t.size))
    assert fit_rate((t, e)).lam == pytest.approx(0.7, rel=0.1)


def test_fit_rate_floor_excludes_and_errors():
    t = np.linspace(0, 1, 11)
    e = np.exp(-20 * t)
    fit = fit_rate((t, e), floor=1e-6)
    assert fit.excluded and all(ex > 0.6 for ex in fit.excluded)
    assert fit.lam == pytest.approx(20.0, rel=1e-9)
    with pytest.raises(FitError, match="converged-too-fast"):
        fit_rate((t, e), floor=0.1)


def test_fit_rate_rejects_bad_fraction():
    with pytest.raises(ValueError):
        fit_rate((np.arange(6.0), np.ones(6)), tail_fraction=0.0)


def test_convex_problem_series_zero():
    p = problem_library("convex_quadratic_1d")
    s = solve(p, 1.0, [0, 0.5, 1.0], n=41)
    env = s.initial
    assert np.all(sup_error_series(s, env).errors == 0)
    assert np.all(grad_error_series(s, env).errors == 0)
    rep = structural_audit(s, env, p)
    assert rep.passed


def test_sup_series_double_well(double_well_run):
    p, s, env = double_well_run
    se = sup_error_series(s, env)
    assert se.errors[0] == 1.0
    assert np.all(np.diff(se.errors) <= 0)
    assert se.clamped == 0


def test_grid_mismatch_rejected(double_well_run):
    p, s, env = double_well_run
    other = ScalarField.sample(Grid.square(-2, 2, 101, 1), p.u0)
    with pytest.raises(ValueError):
        sup_error_series(s, other)


def test_grad_series_decays_and_respects_local_bound(double_well_run):
    p, s, env = double_well_run
    ge = grad_error_series(s, env)
    se = sup_error_series(s, env)
    fit = fit_rate(ge, 0.5, rate_floor(s.initial.scale, s.grid.h))
    assert fit.lam > 0
    tail = ge.errors[s.times >= 3.0]
    assert tail[0] / tail[-1] >= 10
    Md = _m_disc(s)
    bound = 2 * np.sqrt(Md * se.errors) * (1 + s.grid.h)
    assert np.all(ge.errors <= bound + 1e-12)


def test_gradient_bound_zero_field():
    g = Grid.square(-2, 2, 41, 1)
    u = ScalarField.sample(g, lambda x: x * x)
    s = Snapshots(g, np.array([0.0]), u.values[None], 0.01, AXES(1))
    rep = lemma2_gradient_bound_check(s, u, 2.0, 0.5)
    assert rep.worst_ratio == 0.0 and rep.passed


def test_gradient_bound_smooth_bump():
    # v = eps (1 - |x|^2/r^2)_+^3 on top of the convex envelope |x|^2
    g = Grid.square(-2, 2, 401, 1)
    x = g.axis(0)
    r, eps = 0.5, 1e-3
    bump = eps * np.maximum(0.0, 1 - x**2 / r**2) ** 3
    env = ScalarField(g, x * x)
    s = Snapshots(g, np.array([0.0]), (x * x + bump)[None], 0.01, AXES(1))
    M = 6 * eps / r**2 + 2
    rep = lemma2_gradient_bound_check(s, env, M, 0.5)
    # direct evaluation of both sides for this bump
    lhs = np.max(np.abs(np.gradient(bump, g.h))[np.abs(x) <= 0.5])
    rhs = 2 * np.sqrt(M * eps)
    assert rep.lhs[0] == pytest.approx(lhs, rel=1e-2)
    assert rep.rhs[0] == pytest.approx(rhs, rel=1e-12)
    assert rep.passed


def test_gradient_bound_shrinks_radius_with_warning(double_well_run):
    p, s, env = double_well_run
    with pytest.warns(UserWarning, match="shrinking"):
        rep = lemma2_gradient_bound_check(s, env, _m_disc(s), 1.5, indices=[0, 10])
    assert rep.r_used < 1.5


def test_audit_double_well_all_pass(double_well_run):
    p, s, env = double_well_run
    rep = structural_audit(s, env, p)
    assert rep.passed, rep.failures()
    d = rep.to_dict()
    assert set(d["checks"]) >= {"sandwich_upper", "sandwich_lower", "time_monotone", "semiconcavity",
                                "lambda_min_nondecreasing", "lambda_max_nonincreasing", "time_lipschitz"}


def test_audit_flags_cfl_violating_run():
    p = problem_library("double_well_1d")
    with np.errstate(all="ignore"):
        s = solve(p, 0.2, np.linspace(0, 0.2, 5), n=41, safety=3.0, enforce_cfl=False)
    rep = structural_audit(s, reference_envelope(s.initial).envelope, p)
    assert not rep.passed
    assert {"sandwich_lower", "semiconcavity", "time_lipschitz"} <= set(rep.failures())


def test_audit_flags_mild_cfl_violation():
    p = problem_library("double_well_1d")
    with np.errstate(all="ignore"):
        s = solve(p, 0.1, np.linspace(0, 0.1, 5), n=41, safety=1.6, enforce_cfl=False)
    rep = structural_audit(s, reference_envelope(s.initial).envelope, p)
    assert "lambda_min_nondecreasing" in rep.failures()
