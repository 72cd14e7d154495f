"""End-to-end acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from convexflow.cli import main
from convexflow.diagnostics import (
    DEFAULT_C_DIR,
    fit_rate,
    grad_error_series,
    lemma2_gradient_bound_check,
    rate_floor,
    structural_audit,
    sup_error_series,
)
from convexflow.envelope import biconjugate, caratheodory_bruteforce, lower_hull_envelope_1d, reference_envelope
from convexflow.flow import GradientField, integrate
from convexflow.grid import Grid, ScalarField, second_differences_field
from convexflow.io import read_json
from convexflow.problems import problem_library
from convexflow.solver import solve
from convexflow.stochastic import DEFAULT_C_DISC, MCConfig, exit_time_tail, facet_walk_1d, feedback_value_estimate, q_of_r

pytestmark = pytest.mark.slow

# independent oracles (mpmath, 40 digits)
Q_HALF = 0.6826894921370858971704650912640758449558
ASYM_ARGMIN = -1.035578714088853741415836255493485779301

ASYM_STARTS = (-1.8, -0.8, 0.2, 0.96, 1.8)  # 0.96 sits in the basin of the shallow local minimum


def _m_disc(s):
    return float(np.max(np.abs(second_differences_field(s.values[0], s.grid.h, s.dirs))))


def _rate_check(p, s, env, r2_min):
    se = sup_error_series(s, env)
    fit = fit_rate(se, 0.5, rate_floor(s.initial.scale, s.grid.h, DEFAULT_C_DIR))
    monotone = bool(np.all(np.diff(se.errors) <= 0))
    final_ok = se.errors[-1] <= max(0.02 * se.errors[0], 5 * DEFAULT_C_DIR * s.grid.h)
    ok = monotone and fit.lam > 0 and fit.r_squared >= r2_min and final_ok
    detail = (f"{p.name}: monotone={monotone} lambda={fit.lam:.4g} R2={fit.r_squared:.5f} "
              f"e(T)={se.errors[-1]:.3g}")
    return ok, detail, fit


def _flow_finals(s, env, method="rk4", dt=0.01, t_end=10.0):
    G = GradientField(s)
    p = problem_library("asymmetric_quartic_1d")
    return [integrate(s, [x0], t_end, dt, method, u0=p.u0, envelope=env, field=G) for x0 in ASYM_STARTS]


@pytest.fixture(scope="module")
def asym_fine():
    p = problem_library("asymmetric_quartic_1d")
    s = solve(p, 6.0, np.arange(0.0, 6.0 + 1e-9, 0.05), n=2 * p.n - 1)
    return p, s, reference_envelope(s.initial).envelope


def test_criterion_01_envelope_oracles(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_1d = 0.0
    fields = [ScalarField.sample(Grid.square(-2, 2, 401, 1), problem_library(n).u0)
              for n in ("double_well_1d", "asymmetric_quartic_1d")]
    fields += [ScalarField(Grid.square(-1, 1, n, 1), rng.standard_normal(n)) for n in (5, 17, 64, 200, 401)]
    for u in fields:
        d = np.max(np.abs(lower_hull_envelope_1d(u).envelope.values - caratheodory_bruteforce(u).envelope.values))
        worst_1d = max(worst_1d, d / u.scale)
    worst_2d = 0.0
    f2 = [ScalarField.sample(Grid.square(-2, 2, 9, 2), problem_library("radial_double_well_2d").u0)]
    f2 += [ScalarField(Grid.square(-1, 1, 9, 2), rng.uniform(-1, 1, (9, 9))) for _ in range(3)]
    for u in f2:
        d = np.max(np.abs(biconjugate(u, slope_count=36).envelope.values - caratheodory_bruteforce(u).envelope.values))
        worst_2d = max(worst_2d, d / u.scale)
    elapsed = time.perf_counter() - t0
    ok = worst_1d <= 1e-12 and worst_2d <= 5e-3 and elapsed < 10
    criterion(1, ok, f"1D worst {worst_1d:.2e}/scale, 2D worst {worst_2d:.2e}/scale, {elapsed:.1f}s")
    assert ok


def test_criterion_02_exponential_convergence(criterion, double_well_run, radial_run):
    ok1, d1, _ = _rate_check(*double_well_run, r2_min=0.9)
    ok2, d2, _ = _rate_check(*radial_run, r2_min=0.85)
    criterion(2, ok1 and ok2, f"{d1}; {d2}")
    assert ok1 and ok2


def test_criterion_03_gradient_convergence(criterion, double_well_run):
    p, s, env = double_well_run
    ge = grad_error_series(s, env)
    T = s.times[-1]
    tail = ge.errors[s.times >= T / 2]
    decay = tail.max() / max(tail[-1], np.finfo(float).tiny)
    lem = lemma2_gradient_bound_check(s, env, _m_disc(s), 0.5, C_dir=DEFAULT_C_DIR)
    ok = decay >= 10 and lem.worst_ratio <= 1 + lem.tol_h
    criterion(3, ok, f"tail decay {decay:.4g}x, local gradient bound worst ratio {lem.worst_ratio:.4f} (limit {1 + lem.tol_h:.3f})")
    assert ok


def test_criterion_04_structural_audit(criterion, double_well_run, radial_run):
    parts, ok = [], True
    for p, s, env in (double_well_run, radial_run):
        rep = structural_audit(s, env, p, C_dir=DEFAULT_C_DIR)
        ok &= rep.passed
        parts.append(f"{p.name}: {'all pass' if rep.passed else 'failed ' + ','.join(rep.failures())}")
    criterion(4, ok, "; ".join(parts))
    assert ok


def test_criterion_05_stochastic_representation(criterion, double_well_run):
    p, s, _ = double_well_run
    t0 = time.perf_counter()
    cfg = MCConfig(n_paths=20_000, dt_mc=1e-3, seed=0, horizon=2.0)
    fb = feedback_value_estimate(s, [0.0], 2.0, cfg, u0=p.u0, C_disc=DEFAULT_C_DISC)
    zero = feedback_value_estimate(s, [0.0], 2.0, cfg, u0=p.u0, control="zero", C_disc=DEFAULT_C_DISC)
    elapsed = time.perf_counter() - t0
    ok = fb.within and fb.lower_ok and zero.lower_ok and elapsed < 60
    criterion(5, ok, f"feedback {fb.mean:.5f}+-{fb.se:.5f} vs solver {fb.solver_value:.5f} (tol {fb.tolerance:.4f}); "
                     f"zero-control mean {zero.mean:.4f} lower_ok={zero.lower_ok}; {elapsed:.1f}s")
    assert ok


def test_criterion_06_facet_walk(criterion):
    p = problem_library("double_well_1d")
    cfg = MCConfig(n_paths=20_000, dt_mc=1e-3, seed=0, horizon=10.0)
    fw = facet_walk_1d(p, 0.5, cfg)
    hit_ok = abs(fw.hit_a_fraction - 0.25) <= 3 * fw.hit_a_se
    mean_ok = abs(fw.mean - fw.expected) <= 3 * fw.se + DEFAULT_C_DISC * math.sqrt(cfg.dt_mc)
    ok = hit_ok and mean_ok
    criterion(6, ok, f"P(hit -1) {fw.hit_a_fraction:.4f}+-{fw.hit_a_se:.4f} vs 0.25; "
                     f"E[u0(Y)] {fw.mean:.3g}+-{fw.se:.2g} vs {fw.expected}")
    assert ok


def test_criterion_07_exit_time_bound(criterion):
    q = q_of_r(0.5)
    rep = exit_time_tail(0.5, list(range(2, 9)), MCConfig(n_paths=100_000, dt_mc=1e-3, seed=0, horizon=8.0))
    q_ok = abs(q - Q_HALF) <= 1e-9
    ok = rep.passed and q_ok
    criterion(7, ok, f"q(0.5) error {abs(q - Q_HALF):.1e}; tail {['%.1e' % v for v in rep.empirical_tail]} "
                     f"<= bound {['%.1e' % v for v in rep.bound]} + 3SE")
    assert ok


def test_criterion_08_global_minimization(criterion, asym_run):
    p, s, env = asym_run
    t0 = time.perf_counter()
    h = s.grid.h
    scale = s.initial.scale
    env_min = float(env.values.min())
    finals = _flow_finals(s, env)
    gaps = [tr.values_env[-1] - env_min for tr in finals]
    dists = [abs(tr.final_point[0] - ASYM_ARGMIN) for tr in finals]
    reach = all(tr.terminated_reason != "left_box" for tr in finals)
    reach &= all(g <= 1e-3 * scale for g in gaps) and all(d <= 5 * h for d in dists)
    # integrator agreement: the four end points coincide within h, and Euler halves its error at a fixed time
    ends = np.array([[tr.final_point[0] for tr in _flow_finals(s, env, m, dt)]
                     for m, dt in (("euler", 0.01), ("euler", 0.005), ("rk4", 0.005))] + [[tr.final_point[0] for tr in finals]])
    spread = float(np.max(ends.max(axis=0) - ends.min(axis=0)))
    G = GradientField(s)
    ratios = []
    for x0 in ASYM_STARTS:
        ref = integrate(s, [x0], 1.0, 0.0005, "rk4", field=G).final_point[0]
        e1 = abs(integrate(s, [x0], 1.0, 0.01, "euler", field=G).final_point[0] - ref)
        e2 = abs(integrate(s, [x0], 1.0, 0.005, "euler", field=G).final_point[0] - ref)
        ratios.append(e1 / e2)
    halving_ok = all(1.5 <= r <= 2.5 for r in ratios)
    elapsed = time.perf_counter() - t0
    ok = reach and spread <= h and halving_ok and elapsed < 30
    criterion(8, ok, f"max env gap {max(gaps):.2e} (tol {1e-3 * scale:.2e}), max |x-argmin| {max(dists):.2e} "
                     f"(tol {5 * h:.3f}); euler/rk4 spread {spread:.1e}; euler halving ratios "
                     f"{min(ratios):.2f}-{max(ratios):.2f}; {elapsed:.1f}s")
    assert ok


def test_criterion_09_refinement(criterion, double_well_run, radial_run, asym_run, asym_fine):
    parts, ok = [], True
    for p, s, env in (double_well_run, radial_run):
        n_fine = 2 * s.grid.n[0] - 1
        sf = solve(p, float(s.times[-1]), s.times, s.dirs, n=n_fine)
        envf = reference_envelope(sf.initial).envelope
        _, _, coarse = _rate_check(p, s, env, 0.0)
        _, _, fine = _rate_check(p, sf, envf, 0.0)
        rel = abs(fine.lam - coarse.lam) / coarse.lam
        ok &= rel <= 0.25
        parts.append(f"{p.name} lambda {coarse.lam:.4g}->{fine.lam:.4g} ({100 * rel:.1f}%)")
    _, s, env = asym_run
    _, sf, envf = asym_fine
    move = max(abs(a.final_point[0] - b.final_point[0]) for a, b in zip(_flow_finals(s, env), _flow_finals(sf, envf)))
    ok &= move <= 5 * s.grid.h
    parts.append(f"flow end points move {move:.2e} (tol {5 * s.grid.h:.2f})")
    criterion(9, ok, "; ".join(parts))
    assert ok


def test_criterion_10_determinism(criterion, tmp_path, monkeypatch):
    monkeypatch.delenv("CONVEXFLOW_OUT", raising=False)
    codes = [main(["all", "--out", str(tmp_path / name)]) for name in ("a", "b")]
    ma, mb = (read_json(tmp_path / name / "manifest.json") for name in ("a", "b"))
    same = ma["artifacts"] == mb["artifacts"]
    ok = same and codes == [0, 0] and len(ma["artifacts"]) > 0
    criterion(10, ok, f"{len(ma['artifacts'])} artifacts, checksums identical={same}, exit codes {codes}")
    assert ok
