"""Monte Carlo checks of the control representation of the evolution equation.

Random streams are counter-based (Philox) and keyed by ``(seed, block)``,
where a block is a fixed-size batch of paths.  Results therefore depend only
on the seed and the configuration, never on scheduling.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .envelope import reference_envelope
from .grid import ScalarField, interp_many, second_differences_field
from .problems import Problem
from .solver import Snapshots

__all__ = [
    "MCConfig",
    "ExitTimeReport",
    "FacetWalkResult",
    "FeedbackResult",
    "DPReport",
    "q_of_r",
    "exit_time_tail",
    "facet_walk_1d",
    "feedback_value_estimate",
    "dynamic_programming_check",
    "DEFAULT_C_DISC",
]

DEFAULT_C_DISC = 1.0
# stand-in for +inf second differences on the frozen band (keeps multilinear weights finite)
_NO_CONTROL = 1e300


@dataclass(frozen=True)
class MCConfig:
    n_paths: int = 10_000
    dt_mc: float = 1e-3
    seed: int = 0
    horizon: float = 2.0
    block: int = 4096
    bridge: bool = True

    def __post_init__(self):
        if self.n_paths < 100:
            raise ValueError("n_paths must be at least 100")
        if not 0 < self.dt_mc <= self.horizon:
            raise ValueError("dt_mc must be positive and no larger than the horizon")
        if self.block < 1:
            raise ValueError("block must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def blocks(self):
        """Yield ``(generator, size)`` for each path block."""
        for b, start in enumerate(range(0, self.n_paths, self.block)):
            size = min(self.block, self.n_paths - start)
            yield np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, b]))), size

    def to_dict(self) -> dict:
        return asdict(self)


def _simpson(f: Callable[[float], float], a: float, b: float, tol: float, max_depth: int = 60) -> float:
    """Adaptive Simpson with Richardson correction, iterative."""
    fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
    whole = (b - a) / 6.0 * (fa + 4 * fm + fb)
    stack = [(a, b, fa, fm, fb, whole, tol, 0)]
    total = 0.0
    while stack:
        a_, b_, fa_, fm_, fb_, S, eps, depth = stack.pop()
        m = 0.5 * (a_ + b_)
        lm, rm = 0.5 * (a_ + m), 0.5 * (m + b_)
        flm, frm = f(lm), f(rm)
        left = (m - a_) / 6.0 * (fa_ + 4 * flm + fm_)
        right = (b_ - m) / 6.0 * (fm_ + 4 * frm + fb_)
        delta = left + right - S
        if depth >= max_depth or abs(delta) <= 15.0 * eps:
            total += left + right + delta / 15.0
        else:
            stack.append((m, b_, fm_, frm, fb_, right, eps / 2, depth + 1))
            stack.append((a_, m, fa_, flm, fm_, left, eps / 2, depth + 1))
    return total


def q_of_r(r: float, tol: float = 1e-12) -> float:
    """Gaussian mass of ``[-2r, 2r]`` by adaptive Simpson quadrature."""
    if r < 0 or math.isnan(r):
        raise ValueError("r must be nonnegative")
    if r == 0:
        return 0.0
    top = min(2.0 * r, 40.0)
    c = 1.0 / math.sqrt(2.0 * math.pi)
    return min(1.0, 2.0 * _simpson(lambda s: c * math.exp(-0.5 * s * s), 0.0, top, tol / 2))


def _bridge_cross(rng, y0, y1, lo, hi, var):
    """Probability-sampled crossing of ``[lo, hi]`` between two in-range points."""
    p_hi = np.exp(-2.0 * (hi - y0) * (hi - y1) / var)
    p_lo = np.exp(-2.0 * (y0 - lo) * (y1 - lo) / var)
    u = rng.random(len(y0))
    hit_hi = u < p_hi
    hit_lo = ~hit_hi & (u < p_hi + p_lo * (1 - p_hi))
    return hit_lo, hit_hi


@dataclass(frozen=True)
class ExitTimeReport:
    r: float
    ts: tuple[int, ...]
    empirical_tail: tuple[float, ...]
    se: tuple[float, ...]
    bound: tuple[float, ...]
    q: float
    log_slope: float | None
    passed: bool
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _tail_se(p: np.ndarray, n: int) -> np.ndarray:
    return np.sqrt(np.maximum(p * (1 - p), 0.0) / n)


def exit_time_tail(r: float, ts: Sequence[int], cfg: MCConfig) -> ExitTimeReport:
    """Empirical ``P(tau >= t)`` for standard Brownian motion leaving ``[-r, r]`` from 0."""
    if r <= 0:
        raise ValueError("r must be positive")
    ts = tuple(int(t) for t in ts)
    t_max = max(ts) if ts else 0
    n_steps = int(math.ceil(t_max / cfg.dt_mc - 1e-9))
    taus = []
    for rng, size in cfg.blocks():
        tau = np.full(size, np.inf)
        y = np.zeros(size)
        alive = np.arange(size)
        sd = math.sqrt(cfg.dt_mc)
        for k in range(n_steps):
            if alive.size == 0:
                break
            y0 = y[alive]
            y1 = y0 + sd * rng.standard_normal(alive.size)
            out = (y1 <= -r) | (y1 >= r)
            if cfg.bridge:
                inside = ~out
                lo, hi = _bridge_cross(rng, y0[inside], y1[inside], -r, r, cfg.dt_mc)
                crossed = np.zeros_like(out)
                crossed[inside] = lo | hi
                out = out | crossed
            t_now = (k + 1) * cfg.dt_mc
            tau[alive[out]] = t_now
            y[alive] = y1
            alive = alive[~out]
        taus.append(tau)
    tau = np.concatenate(taus)
    q = q_of_r(r)
    tail = np.array([float(np.mean(tau >= t)) if t > 0 else 1.0 for t in ts])
    se = _tail_se(tail, len(tau))
    bound = np.array([q ** (t - 1) if t >= 1 else 1.0 for t in ts])
    passed = bool(np.all(tail <= bound + 3 * se))
    pos = [(t, p) for t, p in zip(ts, tail) if p > 0 and t >= 1]
    slope = float(np.polyfit([t for t, _ in pos], np.log([p for _, p in pos]), 1)[0]) if len(pos) >= 2 else None
    return ExitTimeReport(float(r), ts, tuple(tail.tolist()), tuple(se.tolist()), tuple(bound.tolist()), q, slope,
                          passed, cfg.to_dict())


@dataclass(frozen=True)
class FacetWalkResult:
    mean: float
    se: float
    interval: tuple[float, float]
    weight_a: float
    expected: float
    hit_a_fraction: float
    hit_a_se: float
    censored_fraction: float
    censor_bound: float
    mean_stop: float
    mean_stop_se: float
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _nonconvex_interval(u0: ScalarField, env: ScalarField, x0: float, rtol: float = 1e-9) -> tuple[float, float]:
    xs = u0.grid.axis(0)
    gap = u0.values - env.values
    contact = gap <= rtol * max(u0.scale, np.finfo(float).tiny)
    left = np.nonzero(contact & (xs <= x0))[0]
    right = np.nonzero(contact & (xs >= x0))[0]
    if left.size == 0 or right.size == 0:
        raise ValueError(f"x0={x0} is not strictly inside an interval where the envelope lies below u0")
    i, j = left[-1], right[0]
    if j - i < 2 or not (xs[i] < x0 < xs[j]):
        raise ValueError(f"x0={x0} is not strictly inside an interval where the envelope lies below u0")
    chord = env.values[i] + (env.values[j] - env.values[i]) * (xs[i:j + 1] - xs[i]) / (xs[j] - xs[i])
    if np.max(np.abs(chord - env.values[i:j + 1])) > 1e-9 * max(u0.scale, 1.0):
        raise ValueError(f"envelope is not affine on [{xs[i]}, {xs[j]}] around x0={x0}")
    return float(xs[i]), float(xs[j])


def facet_walk_1d(problem: Problem, x0: float, cfg: MCConfig, n: int | None = None) -> FacetWalkResult:
    """Run ``dY = sqrt(2) dW`` from ``x0`` until it leaves the non-convexity interval.

    Paths still inside at ``cfg.horizon`` are censored and stop where they are.
    """
    if problem.dim != 1:
        raise ValueError("facet walk is implemented in one dimension only")
    grid = problem.grid(n)
    u0 = problem.sample(grid)
    env = reference_envelope(u0).envelope
    a, b = _nonconvex_interval(u0, env, x0)
    lam = (b - x0) / (b - a)
    n_steps = int(math.ceil(cfg.horizon / cfg.dt_mc - 1e-9))
    stops, hit_a, censored = [], [], []
    var = 2.0 * cfg.dt_mc
    sd = math.sqrt(var)
    for rng, size in cfg.blocks():
        y = np.full(size, float(x0))
        state = np.zeros(size, dtype=np.int8)  # 0 running, -1 hit a, +1 hit b
        alive = np.arange(size)
        for _ in range(n_steps):
            if alive.size == 0:
                break
            y0 = y[alive]
            y1 = y0 + sd * rng.standard_normal(alive.size)
            lo = y1 <= a
            hi = y1 >= b
            if cfg.bridge:
                inside = ~(lo | hi)
                blo, bhi = _bridge_cross(rng, y0[inside], y1[inside], a, b, var)
                lo[inside] |= blo
                hi[inside] |= bhi
            y[alive] = np.where(lo, a, np.where(hi, b, y1))
            state[alive[lo]] = -1
            state[alive[hi]] = 1
            alive = alive[~(lo | hi)]
        stops.append(y)
        hit_a.append(state == -1)
        censored.append(state == 0)
    y = np.concatenate(stops)
    ha = np.concatenate(hit_a)
    cz = np.concatenate(censored)
    vals = np.asarray(problem.u0(y), dtype=float)
    N = len(y)
    p_a = float(ha.mean())
    expected = lam * float(problem.u0(a)) + (1 - lam) * float(problem.u0(b))
    q = q_of_r((b - a) / math.sqrt(2.0))
    # diffusion rate 2 stretches time by 2 relative to the standard exit-time bound
    censor_bound = min(1.0, q ** max(cfg.horizon - 1.0, 0.0))
    return FacetWalkResult(
        float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(N)), (a, b), lam, expected, p_a,
        math.sqrt(p_a * (1 - p_a) / N), float(cz.mean()), censor_bound, float(y.mean()),
        float(y.std(ddof=1) / math.sqrt(N)), cfg.to_dict(),
    )


class _ControlField:
    """Per-snapshot interpolants of the directional second differences."""

    def __init__(self, snapshots: Snapshots):
        self.s = snapshots
        self._cache: dict[int, np.ndarray] = {}
        band = snapshots.dirs.band
        self._inner = (slice(None),) + tuple(slice(band, k - band) for k in snapshots.grid.shape)

    def diffs(self, k: int) -> np.ndarray:
        d = self._cache.get(k)
        if d is None:
            s = self.s
            d = np.full((len(s.dirs),) + s.grid.shape, _NO_CONTROL)
            d[self._inner] = second_differences_field(s.values[k], s.grid.h, s.dirs)
            self._cache[k] = d
        return d

    def direction(self, k: int, y: np.ndarray, eig_tol: float) -> tuple[np.ndarray, np.ndarray]:
        """Index of the most negative direction per path, and whether to move."""
        d = self.diffs(k)
        lam = np.stack([interp_many(dk, self.s.grid, y) for dk in d])
        best = np.argmin(lam, axis=0)  # first minimum -> lexicographically smallest offset
        return best, lam[best, np.arange(len(best))] < -eig_tol


@dataclass(frozen=True)
class FeedbackResult:
    mean: float
    se: float
    solver_value: float
    tolerance: float
    lower_ok: bool
    upper_ok: bool
    absorbed: int
    control: str
    supermartingale: tuple[tuple[float, float, float], ...]
    supermartingale_ok: bool
    config: dict = field(default_factory=dict)

    @property
    def within(self) -> bool:
        return self.lower_ok and self.upper_ok

    def to_dict(self) -> dict:
        d = asdict(self)
        d["within"] = self.within
        return d


def _run_controlled(
    snapshots: Snapshots,
    x0,
    t_total: float,
    t_start_field: float,
    cfg: MCConfig,
    control: str,
    eig_tol: float,
    checkpoints: Sequence[int] = (),
):
    """Simulate the controlled diffusion for ``t_total``; controls at elapsed
    ``s`` use the field at time ``t_start_field - s``.  Returns endpoints,
    absorbed count, and path positions at the requested step checkpoints.
    """
    grid = snapshots.grid
    lower, upper = np.array(grid.lower), np.array(grid.upper)
    ctl = _ControlField(snapshots)
    units = snapshots.dirs.units()
    n_steps = int(round(t_total / cfg.dt_mc))
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    sd = math.sqrt(2.0 * cfg.dt_mc)
    ends, absorbed_total = [], 0
    snaps: dict[int, list[np.ndarray]] = {c: [] for c in checkpoints}
    for rng, size in cfg.blocks():
        y = np.tile(x0, (size, 1))
        stuck = np.zeros(size, dtype=bool)
        if 0 in snaps:
            snaps[0].append(y.copy())
        for j in range(n_steps):
            dW = rng.standard_normal(size)
            if control == "feedback":
                k = snapshots.nearest_index(t_start_field - j * cfg.dt_mc)
                best, move = ctl.direction(k, y, eig_tol)
                move &= ~stuck
                y[move] += (sd * dW[move])[:, None] * units[best[move]]
                out = np.any((y < lower) | (y > upper), axis=1)
                if np.any(out):
                    y[out] = np.clip(y[out], lower, upper)
                    stuck |= out
            if j + 1 in snaps:
                snaps[j + 1].append(y.copy())
        ends.append(y)
        absorbed_total += int(stuck.sum())
    return np.concatenate(ends), absorbed_total, {c: np.concatenate(v) for c, v in snaps.items()}


def _eval_u0(snapshots: Snapshots, u0: Callable | None, y: np.ndarray) -> np.ndarray:
    if u0 is not None:
        return np.asarray(u0(*y.T), dtype=float)
    return interp_many(snapshots.values[0], snapshots.grid, y)


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def feedback_value_estimate(
    snapshots: Snapshots,
    x0,
    t: float,
    cfg: MCConfig,
    u0: Callable | None = None,
    control: str = "feedback",
    eig_tol: float | None = None,
    C_disc: float = DEFAULT_C_DISC,
    n_checkpoints: int = 8,
) -> FeedbackResult:
    """Monte Carlo value of the rank-one feedback control (or the zero control).

    Returns the mean of ``u0(Y_t)`` and compares it to the solver value
    ``u(t, x0)`` within ``3 SE + C_disc (h + sqrt(dt_mc))``.  Along the way
    the mean of ``u(t - s, Y_s)`` is recorded at ``n_checkpoints`` times;
    it should not rise by more than the same slack between checkpoints.
    """
    if control not in ("feedback", "zero"):
        raise ValueError("control must be 'feedback' or 'zero'")
    if t > snapshots.times[-1] * (1 + 1e-12):
        raise ValueError("t exceeds the last snapshot time")
    grid = snapshots.grid
    eig_tol = 1e-8 * snapshots.initial.scale if eig_tol is None else eig_tol
    n_steps = int(round(t / cfg.dt_mc))
    cps = sorted({int(round(c)) for c in np.linspace(0, n_steps, n_checkpoints + 1)})
    ends, absorbed, snaps = _run_controlled(snapshots, x0, t, t, cfg, control, eig_tol, cps)
    mean, se = _mean_se(_eval_u0(snapshots, u0, ends))
    x0a = np.atleast_1d(np.asarray(x0, dtype=float))[None, :]
    k_t = snapshots.nearest_index(t)
    solver_value = float(interp_many(snapshots.values[k_t], grid, x0a)[0])
    tol = 3 * se + C_disc * (grid.h + math.sqrt(cfg.dt_mc))
    sm = []
    for c in cps:
        s = c * cfg.dt_mc
        k = snapshots.nearest_index(t - s)
        m, e = _mean_se(interp_many(snapshots.values[k], grid, snaps[c]))
        sm.append((float(s), m, e))
    slack = C_disc * (grid.h + math.sqrt(cfg.dt_mc))
    sm_ok = all(b[1] <= a[1] + 3 * math.hypot(a[2], b[2]) + slack for a, b in zip(sm, sm[1:]))
    return FeedbackResult(mean, se, solver_value, tol, mean + tol >= solver_value, mean - tol <= solver_value,
                          absorbed, control, tuple(sm), sm_ok, cfg.to_dict())


@dataclass(frozen=True)
class DPReport:
    gap: float
    se: float
    tolerance: float
    within: bool
    absorbed: int
    t: float
    s: float

    def to_dict(self) -> dict:
        return asdict(self)


def dynamic_programming_check(
    snapshots: Snapshots,
    y,
    t: float,
    s: float,
    cfg: MCConfig,
    eig_tol: float | None = None,
    C_disc: float = DEFAULT_C_DISC,
) -> DPReport:
    """Compare ``u(t, y)`` with ``E[u(s, Y_{t-s})]`` along feedback paths from ``y``."""
    if not 0 <= s <= t <= snapshots.times[-1] + 1e-12:
        raise ValueError("need 0 <= s <= t <= last snapshot time")
    grid = snapshots.grid
    eig_tol = 1e-8 * snapshots.initial.scale if eig_tol is None else eig_tol
    ends, absorbed, _ = _run_controlled(snapshots, y, t - s, t, cfg, "feedback", eig_tol)
    ks = snapshots.nearest_index(s)
    mean, se = _mean_se(interp_many(snapshots.values[ks], grid, ends))
    ya = np.atleast_1d(np.asarray(y, dtype=float))[None, :]
    ut = float(interp_many(snapshots.values[snapshots.nearest_index(t)], grid, ya)[0])
    tol = 3 * se + C_disc * (grid.h + math.sqrt(cfg.dt_mc))
    gap = mean - ut
    return DPReport(float(gap), se, tol, abs(gap) <= tol, absorbed, float(t), float(s))
