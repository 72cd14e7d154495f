"""Convergence-rate fitting and structural invariant audits of solver output."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .grid import STENCIL16, ScalarField, gradient_field, second_differences_field
from .solver import Snapshots, time_lipschitz_check

__all__ = [
    "ErrorSeries",
    "RateFit",
    "FitError",
    "GradientBoundReport",
    "Check",
    "AuditReport",
    "sup_error_series",
    "grad_error_series",
    "rate_floor",
    "fit_rate",
    "lemma2_gradient_bound_check",
    "structural_audit",
    "max_second_difference",
]

DEFAULT_C_DIR = 1.0


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class ErrorSeries:
    times: np.ndarray
    errors: np.ndarray
    clamped: int = 0
    raw_min: float = 0.0

    def to_dict(self) -> dict:
        return {
            "times": [float(t) for t in self.times],
            "errors": [float(e) for e in self.errors],
            "clamped": int(self.clamped),
            "raw_min": float(self.raw_min),
        }


def _envelope_array(snapshots: Snapshots, envelope) -> np.ndarray:
    if isinstance(envelope, ScalarField):
        if envelope.grid != snapshots.grid:
            raise ValueError("envelope grid does not match the snapshot grid")
        return envelope.values
    env = np.asarray(envelope, dtype=float)
    if env.shape != snapshots.grid.shape:
        raise ValueError(f"envelope shape {env.shape} does not match grid shape {snapshots.grid.shape}")
    return env


def sup_error_series(snapshots: Snapshots, envelope) -> ErrorSeries:
    """One-sided sup error ``max(u(t_k) - env)`` clamped at zero."""
    env = _envelope_array(snapshots, envelope)
    raw = np.array([np.max(v - env) for v in snapshots.values])
    clamped = int(np.sum(raw < 0))
    return ErrorSeries(snapshots.times.copy(), np.maximum(raw, 0.0), clamped, float(raw.min()))


def _grad_diff_norms(values: np.ndarray, env: np.ndarray, grid) -> np.ndarray:
    g = gradient_field(ScalarField(grid, values - env))
    inner = (slice(None),) + tuple(slice(1, -1) for _ in range(grid.dim))
    return np.sqrt(np.sum(g[inner] ** 2, axis=0))


def grad_error_series(snapshots: Snapshots, envelope) -> ErrorSeries:
    """``max |grad u(t_k) - grad env|`` over interior nodes, central differences."""
    env = _envelope_array(snapshots, envelope)
    errs = np.array([np.max(_grad_diff_norms(v, env, snapshots.grid)) for v in snapshots.values])
    return ErrorSeries(snapshots.times.copy(), errs)


def rate_floor(scale: float, h: float, C_dir: float = DEFAULT_C_DIR) -> float:
    return max(1e-12 * scale, C_dir * h / 10.0)


@dataclass(frozen=True)
class RateFit:
    C: float
    lam: float
    r_squared: float
    window: tuple[float, float]
    series: tuple[tuple[float, float], ...]
    excluded: tuple[float, ...] = ()
    floor: float = 0.0
    n_points: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


def fit_rate(series, tail_fraction: float = 0.5, floor: float = 0.0) -> RateFit:
    """Least-squares fit of ``log e(t) = log C - lam t`` on the tail of the window.

    The window spans the points with ``e > floor``; only the last
    ``tail_fraction`` of it (in time) enters the regression.
    """
    if isinstance(series, ErrorSeries):
        t, e = series.times, series.errors
    else:
        t, e = (np.asarray(a, dtype=float) for a in series)
    if not 0.0 < tail_fraction <= 1.0:
        raise ValueError("tail_fraction must lie in (0, 1]")
    usable = np.isfinite(e) & (e > floor)
    excluded = tuple(float(x) for x in t[~usable])
    tu, eu = t[usable], e[usable]
    if len(tu) < 5:
        raise FitError(f"converged-too-fast; enlarge grid or shrink snapshot spacing ({len(tu)} points above floor {floor:.3g})")
    t_lo, t_hi = float(tu[0]), float(tu[-1])
    cut = t_hi - tail_fraction * (t_hi - t_lo)
    sel = tu >= cut
    ts, ys = tu[sel], np.log(eu[sel])
    if len(ts) < 5:
        # fall back to the last five usable points
        ts, ys = tu[-5:], np.log(eu[-5:])
    slope, intercept = np.polyfit(ts, ys, 1)
    resid = ys - (slope * ts + intercept)
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    pairs = tuple((float(a), float(b)) for a, b in zip(t, e))
    return RateFit(float(np.exp(intercept)), float(-slope), r2, (float(ts[0]), float(ts[-1])), pairs,
                   excluded, float(floor), int(len(ts)))


@dataclass(frozen=True)
class GradientBoundReport:
    times: tuple[float, ...]
    lhs: tuple[float, ...]
    rhs: tuple[float, ...]
    ratios: tuple[float, ...]
    worst_ratio: float
    r_used: float
    tol_h: float
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def lemma2_gradient_bound_check(
    snapshots: Snapshots,
    envelope,
    M_disc: float,
    r: float = 0.5,
    center: Sequence[float] | None = None,
    C_dir: float = DEFAULT_C_DIR,
    indices: Sequence[int] | None = None,
) -> GradientBoundReport:
    """Check ``|grad v|_{B_r} <= 2 sqrt(M |v|_{B_{r+r'}})`` with ``v = u(t) - env``.

    ``r' = 2 |v|_{B_{2r}} / (M r) + r / 2``.  Sup norms are taken over grid
    nodes inside each ball; balls are intersected with the box, which is
    harmless when ``v`` vanishes near the box edge.  ``r`` shrinks (with a
    warning) until ``B_{2r}`` fits inside the box.
    """
    grid = snapshots.grid
    env = _envelope_array(snapshots, envelope)
    c = np.zeros(grid.dim) if center is None else np.asarray(center, dtype=float)
    room = min(min(c[k] - grid.lower[k], grid.upper[k] - c[k]) for k in range(grid.dim)) - grid.h
    if 2 * r > room:
        warnings.warn(f"ball B_2r with r={r} leaves the box; shrinking r to {room / 2:.6g}", stacklevel=2)
        r = room / 2
    dist = np.sqrt(sum((m - c[k]) ** 2 for k, m in enumerate(grid.mesh())))
    inner = tuple(slice(1, -1) for _ in range(grid.dim))
    dist_in = dist[inner]
    tol_h = C_dir * grid.h
    idx = range(len(snapshots)) if indices is None else indices
    ts, L, R, Q = [], [], [], []
    for k in idx:
        v = snapshots.values[k] - env
        gn = _grad_diff_norms(snapshots.values[k], env, grid)
        lhs = float(np.max(gn[dist_in <= r], initial=0.0))
        v2r = float(np.max(np.abs(v[dist <= 2 * r]), initial=0.0))
        r_prime = 2.0 * v2r / (M_disc * r) + r / 2.0
        vb = float(np.max(np.abs(v[dist <= r + r_prime]), initial=0.0))
        rhs = 2.0 * np.sqrt(M_disc * vb)
        ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else np.inf)
        ts.append(float(snapshots.times[k]))
        L.append(lhs)
        R.append(float(rhs))
        Q.append(float(ratio))
    worst = max(Q) if Q else 0.0
    return GradientBoundReport(tuple(ts), tuple(L), tuple(R), tuple(Q), worst, float(r), tol_h, worst <= 1.0 + tol_h)


def _wide_offsets(dim: int) -> list[tuple[int, ...]]:
    if dim == 1:
        return [(1,), (2,)]
    return list(STENCIL16.offsets) + [(2, 0), (0, 2), (2, 2), (2, -2)]


def max_second_difference(values: np.ndarray, h: float, offsets: Sequence[Sequence[int]]) -> float:
    """Largest second difference over integer translations ``z`` (not necessarily primitive)."""
    reach = max(max(abs(v) for v in z) for z in offsets)
    center = values[tuple(slice(reach, k - reach) for k in values.shape)]
    best = -np.inf
    for z in offsets:
        plus = values[tuple(slice(reach + v, k - reach + v) for v, k in zip(z, values.shape))]
        minus = values[tuple(slice(reach - v, k - reach - v) for v, k in zip(z, values.shape))]
        d = (plus - 2.0 * center + minus) / (h * h * float(sum(v * v for v in z)))
        best = max(best, float(d.max()))
    return best


@dataclass(frozen=True)
class Check:
    passed: bool
    margin: float
    detail: str = ""


@dataclass(frozen=True)
class AuditReport:
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def failures(self) -> list[str]:
        return [k for k, c in self.checks.items() if not c.passed]

    def to_dict(self) -> dict:
        return {
            "passed": bool(self.passed),
            "checks": {k: {"passed": bool(c.passed), "margin": float(c.margin), "detail": c.detail}
                       for k, c in self.checks.items()},
        }


def _nonincreasing(seq: np.ndarray, tol: float) -> tuple[bool, float]:
    if len(seq) < 2:
        return True, np.inf
    worst_rise = float(np.max(np.diff(seq)))
    return worst_rise <= tol, tol - worst_rise


def structural_audit(
    snapshots: Snapshots,
    envelope,
    problem=None,
    C_dir: float = DEFAULT_C_DIR,
    rtol: float = 1e-8,
) -> AuditReport:
    """Sandwich, monotonicity, semiconcavity, eigenvalue extremes, time-Lipschitz.

    Margins are positive when a check passes with room to spare.
    """
    grid = snapshots.grid
    env = _envelope_array(snapshots, envelope)
    vals = snapshots.values
    u0 = vals[0]
    scale = float(np.ptp(u0))
    tol = rtol * scale
    h = grid.h
    checks: dict[str, Check] = {}
    finite = bool(np.all(np.isfinite(vals)))
    checks["finite"] = Check(finite, 0.0 if finite else -np.inf)
    if not finite:
        return AuditReport(checks)

    over = float(np.max(vals - u0))
    checks["sandwich_upper"] = Check(over <= 0.0, -over, "max(u - u0), zero tolerance")
    under = float(np.min(vals - env))
    checks["sandwich_lower"] = Check(under >= -C_dir * h, under + C_dir * h, f"min(u - env) >= -C_dir*h = {-C_dir * h:.3g}")

    rise = float(np.max(np.diff(vals, axis=0))) if len(vals) > 1 else 0.0
    checks["time_monotone"] = Check(rise <= 0.0, -rise, "max(u(t_k+1) - u(t_k)), zero tolerance")

    band = snapshots.dirs.band
    mask = np.ones(grid.shape, dtype=bool)
    mask[tuple(slice(band, k - band) for k in grid.shape)] = False
    frozen = bool(np.all(vals[:, mask] == u0[mask]))
    checks["frozen_band"] = Check(frozen, 0.0 if frozen else -float(np.max(np.abs(vals[:, mask] - u0[mask]))))

    offsets = _wide_offsets(grid.dim)
    semi = np.array([max_second_difference(v, h, offsets) for v in vals])
    ok, margin = _nonincreasing(semi, tol)
    margin = min(margin, tol - float(np.max(semi - semi[0])))
    checks["semiconcavity"] = Check(ok and margin >= 0, margin, "max wide second difference nonincreasing")

    lmin = np.array([second_differences_field(v, h, snapshots.dirs).min(axis=0).min() for v in vals])
    lmax = np.array([second_differences_field(v, h, snapshots.dirs).max(axis=0).max() for v in vals])
    ok, margin = _nonincreasing(-lmin, tol)
    checks["lambda_min_nondecreasing"] = Check(ok, margin)
    ok, margin = _nonincreasing(lmax, tol)
    checks["lambda_max_nonincreasing"] = Check(ok, margin)

    lip = time_lipschitz_check(snapshots, getattr(problem, "hessian_bound_M", None))
    checks["time_lipschitz"] = Check(bool(lip.passed), 1.0 + 1e-6 - lip.worst_ratio, f"worst ratio {lip.worst_ratio:.6g}")
    return AuditReport(checks)
