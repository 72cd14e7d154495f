"""Command-line driver: ``convexflow {solve,envelope,flow,mc-validate,rates,audit,all}``.

Configuration precedence is flags > JSON file > defaults; the environment
variable ``CONVEXFLOW_OUT`` overrides the output directory.  Exit codes:
0 ok, 1 invariant failure, 2 config or validation error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .diagnostics import (
    DEFAULT_C_DIR,
    FitError,
    fit_rate,
    grad_error_series,
    lemma2_gradient_bound_check,
    rate_floor,
    structural_audit,
    sup_error_series,
)
from .envelope import reference_envelope
from .flow import GradientField, argmin_nodes, distance_to_set, gradient_error_integrability_report, integrate
from .grid import direction_preset, second_differences_field
from .problems import PROBLEMS, Problem, UnknownProblemError, polynomial_problem, problem_library
from .solver import CFLError, NumericalAbort, Snapshots, cfl_dt, solve
from .stochastic import MCConfig, dynamic_programming_check, exit_time_tail, facet_walk_1d, feedback_value_estimate

__all__ = ["ConfigError", "RunConfig", "build_config", "run", "main", "COMMANDS"]

log = logging.getLogger("convexflow")

COMMANDS = ("solve", "envelope", "flow", "mc-validate", "rates", "audit", "all")
EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "problem": "double_well_1d",
    "n": None,
    "lower": None,
    "upper": None,
    "dirs": None,
    "safety": 0.9,
    "dt": None,
    "T": None,
    "snapshot_dt": None,
    "snapshot_times": None,
    "snapshot_files": 26,
    "seed": 0,
    "out": "convexflow_out",
    "C_dir": DEFAULT_C_DIR,
    "C_disc": 1.0,
    "tail_fraction": 0.5,
    "r2_min": 0.85,
    "gradient_bound_r": 0.5,
    "gnuplot": True,
    "flow": {"x0": None, "dt_ode": 0.01, "method": "rk4", "t_end": 10.0, "gap_tol": 1e-3},
    "mc": {"n_paths": 20000, "dt_mc": 1e-3, "t": None, "x0": None, "exit_r": 0.5, "exit_ts": [2, 3, 4, 5, 6, 7, 8],
           "exit_paths": 100000, "facet_horizon": 10.0, "block": 4096},
}


@dataclass
class RunConfig:
    raw: dict
    problem: Problem
    n: int
    dirs_name: str
    safety: float
    T: float
    snapshot_times: np.ndarray
    out: Path
    flow: dict = field(default_factory=dict)
    mc: dict = field(default_factory=dict)

    @property
    def grid(self):
        return self.problem.grid(self.n)

    @property
    def dirs(self):
        return direction_preset(self.dirs_name, self.problem.dim)

    def mc_config(self, n_paths: int | None = None, horizon: float | None = None, seed_offset: int = 0) -> MCConfig:
        return MCConfig(
            n_paths=int(n_paths or self.mc["n_paths"]),
            dt_mc=float(self.mc["dt_mc"]),
            seed=(int(self.raw["seed"]) + seed_offset) % 2**64,
            horizon=float(horizon if horizon is not None else self.mc["t"]),
            block=int(self.mc["block"]),
        )

    def recorded(self) -> dict:
        """Resolved config as written to disk; the output path is left out so reruns elsewhere hash identically."""
        d = copy.deepcopy(self.raw)
        d.pop("out", None)
        return d


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        elif v is not None or k not in out:
            out[k] = v
    return out


def _resolve_problem(spec) -> Problem:
    if isinstance(spec, str):
        return problem_library(spec)
    if isinstance(spec, dict):
        if "name" in spec and "coefficients" not in spec:
            return problem_library(spec["name"])
        try:
            return polynomial_problem(
                spec["coefficients"], dim=int(spec.get("dim", 1)), lower=float(spec.get("lower", -2.0)),
                upper=float(spec.get("upper", 2.0)), n=spec.get("n"), name=spec.get("name", "custom"),
                R0=spec.get("R0"),
            )
        except KeyError as exc:
            raise ConfigError(f"custom problem spec missing {exc}") from None
    raise ConfigError("problem must be a library name or a polynomial spec object")


def build_config(file_cfg: dict | None = None, flags: dict | None = None, env: dict | None = None) -> RunConfig:
    """Merge defaults, file and flags, then validate every cross-module precondition."""
    raw = _merge(DEFAULTS, file_cfg or {})
    raw = _merge(raw, {k: v for k, v in (flags or {}).items() if v is not None})
    env = os.environ if env is None else env
    if env.get("CONVEXFLOW_OUT"):
        raw["out"] = env["CONVEXFLOW_OUT"]
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        problem = _resolve_problem(raw["problem"])
    except UnknownProblemError as exc:
        raise ConfigError(exc.args[0]) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if raw["lower"] is not None or raw["upper"] is not None:
        lo = problem.lower if raw["lower"] is None else float(raw["lower"])
        hi = problem.upper if raw["upper"] is None else float(raw["upper"])
        try:
            problem = Problem(problem.name, problem.dim, problem.u0, problem.hessian_bound_M, problem.R0, lo, hi,
                              problem.n, problem.analytic_envelope, problem.spec)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    dim = problem.dim
    n = int(raw["n"] if raw["n"] is not None else problem.n)
    if n < 5:
        raise ConfigError("n must be at least 5")
    dirs_name = raw["dirs"] or ("axes" if dim == 1 else "stencil8")
    try:
        dirs = direction_preset(dirs_name, dim)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    grid = problem.grid(n)
    inner = problem.upper - dirs.band * grid.h
    if problem.R0 >= inner or -problem.R0 <= problem.lower + dirs.band * grid.h:
        raise ConfigError(f"box [{problem.lower}, {problem.upper}] minus the frozen band does not contain B_R0 (R0={problem.R0})")

    limit = cfl_dt(grid, dirs, 1.0)
    safety = float(raw["safety"])
    if raw["dt"] is not None:
        dt = float(raw["dt"])
        if dt > limit * (1 + 1e-12) or dt <= 0:
            raise ConfigError(f"dt={dt:.6g} violates the CFL bound dt <= (h*min|p|)^2/2 = {limit:.6g}")
        safety = dt / limit
        raw["safety"] = safety
    if not 0 < safety <= 1:
        raise ConfigError(f"safety={safety} violates the CFL bound: safety must lie in (0, 1] "
                          f"so that dt <= (h*min|p|)^2/2 = {limit:.6g}")

    T = float(raw["T"] if raw["T"] is not None else (6.0 if dim == 1 else 2.0))
    if T <= 0:
        raise ConfigError("T must be positive")
    if raw["snapshot_times"] is not None:
        st = np.asarray(raw["snapshot_times"], dtype=float)
        if st.ndim != 1 or np.any(np.diff(st) <= 0) or st.min() < 0 or st.max() > T:
            raise ConfigError("snapshot_times must be strictly increasing within [0, T]")
    else:
        sdt = float(raw["snapshot_dt"] if raw["snapshot_dt"] is not None else (0.05 if dim == 1 else 0.02))
        if sdt <= 0:
            raise ConfigError("snapshot_dt must be positive")
        st = np.linspace(0.0, T, int(round(T / sdt)) + 1)
    raw.update({"n": n, "dirs": dirs_name, "T": T})

    flow = dict(raw["flow"])
    if flow["method"] not in ("euler", "rk4"):
        raise ConfigError("flow.method must be euler or rk4")
    if float(flow["dt_ode"]) <= 0 or float(flow["t_end"]) <= 0:
        raise ConfigError("flow.dt_ode and flow.t_end must be positive")
    if flow["x0"] is None:
        span = problem.upper - problem.lower
        if dim == 1:
            flow["x0"] = [[problem.lower + span * f] for f in (0.05, 0.3, 0.55, 0.74, 0.95)]
        else:
            c = 0.5 * (problem.upper + problem.lower)
            flow["x0"] = [[c + span * a, c + span * b] for a, b in
                          ((0.375, 0.075), (-0.3, 0.225), (0.05, 0.025), (-0.1, -0.4), (0.25, -0.25))]
    flow["x0"] = [[float(v) for v in np.atleast_1d(p)] for p in flow["x0"]]
    for p in flow["x0"]:
        if len(p) != dim or not grid.contains(p):
            raise ConfigError(f"flow start point {p} is not inside the box")
    raw["flow"] = flow

    mc = dict(raw["mc"])
    mc["t"] = float(mc["t"] if mc["t"] is not None else min(2.0, T))
    if mc["t"] > T:
        raise ConfigError(f"mc.t={mc['t']} exceeds the solve horizon T={T}")
    if mc["x0"] is None:
        mc["x0"] = [0.5 * (problem.upper + problem.lower)] * dim
    mc["x0"] = [float(v) for v in np.atleast_1d(mc["x0"])]
    if len(mc["x0"]) != dim or not grid.contains(mc["x0"]):
        raise ConfigError("mc.x0 must be a point inside the box")
    raw["mc"] = mc
    cfg = RunConfig(raw, problem, n, dirs_name, safety, T, st, Path(raw["out"]), flow, mc)
    try:
        cfg.mc_config()
        cfg.mc_config(n_paths=mc["exit_paths"], horizon=max(mc["exit_ts"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


class _Run:
    """Shared state for one invocation: a single solve, reused by every stage."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = cfg.out
        self.written: list[Path] = []
        self.failures: list[str] = []
        self._snap: Snapshots | None = None
        self._env = None
        self.hash = io.config_hash(cfg.recorded())

    @property
    def snapshots(self) -> Snapshots:
        if self._snap is None:
            c = self.cfg
            self._snap = solve(c.problem, c.T, c.snapshot_times, c.dirs, c.safety, c.n,
                               dump_dir=self.out / "abort")
        return self._snap

    @property
    def envelope(self):
        if self._env is None:
            self._env = reference_envelope(self.cfg.problem.sample(self.cfg.grid))
        return self._env

    def write(self, paths):
        if isinstance(paths, Path):
            paths = [paths]
        self.written.extend(paths)

    def fail(self, what: str):
        log.error("invariant failure: %s", what)
        self.failures.append(what)

    # stages -----------------------------------------------------------------

    def stage_envelope(self):
        env = self.envelope
        self.write(io.write_field_csv(self.out / "envelope.csv", env.envelope))
        report = {"method": env.method, "max_gap_to_input": env.max_gap_to_input, "min": float(env.envelope.values.min())}
        ana = self.cfg.problem.envelope_values(self.cfg.grid)
        if ana is not None:
            report["max_abs_diff_to_analytic"] = float(np.max(np.abs(ana - env.envelope.values)))
        self.write(io.write_json(self.out / "envelope.json", report))

    def stage_solve(self):
        s = self.snapshots
        k = len(s)
        m = min(k, int(self.cfg.raw["snapshot_files"]))
        idx = np.unique(np.round(np.linspace(0, k - 1, m)).astype(int))
        self.write(io.write_snapshots(s, self.out / "snapshots", self.hash, idx))

    def stage_audit(self):
        s = self.snapshots
        env = self.envelope.envelope
        c = self.cfg
        audit = structural_audit(s, env, c.problem, C_dir=float(c.raw["C_dir"]))
        sd = second_differences_field(s.values[0], s.grid.h, s.dirs)
        lem = lemma2_gradient_bound_check(s, env, float(np.max(np.abs(sd))), float(c.raw["gradient_bound_r"]),
                                          C_dir=float(c.raw["C_dir"]))
        report = audit.to_dict()
        report["gradient_bound"] = lem.to_dict()
        report["steady_state_reached"] = bool(s.steady_state_reached)
        report["dt"] = s.dt_used
        self.write(io.write_json(self.out / "audit.json", report))
        for name in audit.failures():
            self.fail(f"audit:{name}")
        if not lem.passed:
            self.fail("audit:gradient_bound")

    def stage_rates(self):
        s = self.snapshots
        env = self.envelope.envelope
        c = self.cfg
        sup = sup_error_series(s, env)
        grad = grad_error_series(s, env)
        floor = rate_floor(s.initial.scale, s.grid.h, float(c.raw["C_dir"]))
        report = {"floor": floor, "sup_clamped": sup.clamped, "sup_raw_min": sup.raw_min}
        rd = self.out / "rates"
        self.write(io.write_series_csv(rd / "errors.csv", {"t": s.times, "sup_error": sup.errors,
                                                           "grad_error": grad.errors}))
        for key, series in (("sup", sup), ("grad", grad)):
            try:
                fit = fit_rate(series, float(c.raw["tail_fraction"]), floor)
                report[key] = fit.to_dict()
                report[key].pop("series")
            except FitError as exc:
                report[key] = {"error": str(exc)}
                if key == "sup":
                    self.fail(f"rates:{exc}")
        if "lambda" in report["sup"]:
            ok = report["sup"]["lambda"] > 0 and report["sup"]["r_squared"] >= float(c.raw["r2_min"])
            report["sup"]["passed"] = ok
            if not ok:
                self.fail("rates:sup fit (lambda <= 0 or low R^2)")
        report["sup_monotone"] = bool(np.all(np.diff(sup.errors) <= 0))
        if not report["sup_monotone"]:
            self.fail("rates:sup error not monotone")
        integ = gradient_error_integrability_report(s, env) if len(s) >= 3 else None
        if integ is not None:
            report["grad_error_integral"] = integ.integral
        self.write(io.write_json(rd / "rates.json", report))
        if c.raw["gnuplot"]:
            self.write(io.write_gnuplot_series(rd / "errors.gp", "errors.csv", ["sup_error", "grad_error"],
                                               f"{c.problem.name}: error vs time"))

    def stage_flow(self):
        s = self.snapshots
        c = self.cfg
        env = self.envelope.envelope
        G = GradientField(s)
        am = argmin_nodes(env)
        env_min = float(env.values.min())
        tol = float(c.flow["gap_tol"]) * env.scale if env.scale > 0 else float(c.flow["gap_tol"])
        summaries = []
        fd = self.out / "flow"
        for i, x0 in enumerate(c.flow["x0"]):
            tr = integrate(s, x0, float(c.flow["t_end"]), float(c.flow["dt_ode"]), c.flow["method"],
                           u0=c.problem.u0, envelope=env, field=G)
            self.write(io.write_trajectory_csv(fd / f"trajectory_{i:02d}.csv", tr))
            summ = tr.summary(env_min)
            summ["x0"] = x0
            summ["distance_to_argmin"] = distance_to_set(tr.final_point, am) if tr.terminated_reason != "left_box" else None
            summ["passed"] = tr.terminated_reason != "left_box" and summ["final_env_gap"] <= tol
            summaries.append(summ)
            if not summ["passed"]:
                self.fail(f"flow:start {x0}")
        self.write(io.write_json(fd / "summary.json", {"env_min": env_min, "gap_tol": tol,
                                                       "argmin_nodes": am, "trajectories": summaries}))

    def stage_mc(self):
        s = self.snapshots
        c = self.cfg
        p = c.problem
        rep: dict = {}
        cfg = c.mc_config()
        C_disc = float(c.raw["C_disc"])
        for ctl in ("feedback", "zero"):
            r = feedback_value_estimate(s, c.mc["x0"], c.mc["t"], cfg, u0=p.u0, control=ctl, C_disc=C_disc)
            rep[ctl] = r.to_dict()
            if not r.lower_ok:
                self.fail(f"mc:{ctl} lower bound")
            if ctl == "feedback" and not r.within:
                self.fail("mc:feedback bracket")
        t = c.mc["t"]
        rep["dynamic_programming"] = dynamic_programming_check(s, c.mc["x0"], t, 0.5 * t, c.mc_config(seed_offset=1),
                                                               C_disc=C_disc).to_dict()
        ecfg = c.mc_config(n_paths=c.mc["exit_paths"], horizon=max(c.mc["exit_ts"]), seed_offset=2)
        ex = exit_time_tail(float(c.mc["exit_r"]), c.mc["exit_ts"], ecfg)
        rep["exit_time"] = ex.to_dict()
        if not ex.passed:
            self.fail("mc:exit-time tail")
        if p.dim == 1:
            try:
                fw = facet_walk_1d(p, c.mc["x0"][0], c.mc_config(horizon=float(c.mc["facet_horizon"]), seed_offset=3), c.n)
            except ValueError as exc:
                rep["facet_walk"] = {"skipped": str(exc)}
            else:
                d = fw.to_dict()
                slack = C_disc * math.sqrt(cfg.dt_mc)
                d["hit_ok"] = abs(fw.hit_a_fraction - fw.weight_a) <= 3 * fw.hit_a_se + 1e-15
                d["mean_ok"] = abs(fw.mean - fw.expected) <= 3 * fw.se + slack
                rep["facet_walk"] = d
                if not (d["hit_ok"] and d["mean_ok"]):
                    self.fail("mc:facet walk")
        self.write(io.write_json(self.out / "mc" / "report.json", rep))

    def finish(self, command: str, code: int) -> int:
        root = self.out
        cfg_path = io.write_json(root / "config.json", self.cfg.recorded())
        self.written.append(cfg_path)
        arts = {str(p.relative_to(root)): io.sha256_file(p) for p in sorted(set(self.written))}
        io.write_json(root / "manifest.json", {
            "command": command,
            "config": self.cfg.recorded(),
            "config_hash": self.hash,
            "artifacts": arts,
            "failures": self.failures,
            "exit_code": code,
        })
        return code


STAGES = {
    "solve": ("envelope", "solve", "audit"),
    "envelope": ("envelope",),
    "flow": ("envelope", "flow"),
    "mc-validate": ("mc",),
    "rates": ("envelope", "rates"),
    "audit": ("envelope", "audit"),
    "all": ("envelope", "solve", "audit", "rates", "flow", "mc"),
}


def run(command: str, cfg: RunConfig) -> int:
    if command not in STAGES:
        raise ConfigError(f"unknown command {command!r}")
    r = _Run(cfg)
    r.out.mkdir(parents=True, exist_ok=True)
    try:
        for stage in STAGES[command]:
            log.info("stage %s", stage)
            getattr(r, f"stage_{stage}")()
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return r.finish(command, EXIT_NUMERIC)
    except CFLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return r.finish(command, EXIT_CONFIG)
    code = EXIT_INVARIANT if r.failures else EXIT_OK
    for f in r.failures:
        print(f"invariant failure: {f}", file=sys.stderr)
    return r.finish(command, code)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="convexflow", description="Convex envelopes via the convexifying evolution equation.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", type=Path, help="JSON config file")
    ap.add_argument("--problem", help=f"built-in problem: {', '.join(sorted(PROBLEMS))}")
    ap.add_argument("--n", type=int, help="nodes per axis")
    ap.add_argument("--T", type=float, help="final solve time")
    ap.add_argument("--dirs", choices=("axes", "stencil8", "stencil16"))
    ap.add_argument("--safety", type=float, help="CFL safety factor in (0, 1]")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="output directory (CONVEXFLOW_OUT overrides)")
    ap.add_argument("--method", choices=("euler", "rk4"), help="gradient-flow integrator")
    ap.add_argument("--paths", type=int, help="Monte Carlo paths")
    ap.add_argument("--dt-mc", type=float, dest="dt_mc", help="Monte Carlo time step")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = _parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        file_cfg = json.loads(args.config.read_text()) if args.config else {}
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    flags = {"problem": args.problem, "n": args.n, "T": args.T, "dirs": args.dirs, "safety": args.safety,
             "seed": args.seed, "out": args.out}
    nested = {"flow": {"method": args.method}, "mc": {"n_paths": args.paths, "dt_mc": args.dt_mc}}
    for k, v in nested.items():
        v = {a: b for a, b in v.items() if b is not None}
        if v:
            flags[k] = v
    try:
        cfg = build_config(file_cfg, flags)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.command, cfg)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
