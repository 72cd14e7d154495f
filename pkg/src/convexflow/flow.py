"""Non-autonomous gradient flow  x' = -grad u(t, x)  driven by solver snapshots."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diagnostics import ErrorSeries, grad_error_series
from .envelope import reference_envelope
from .grid import OutOfBoxError, ScalarField, _locate, _multilinear, gradient_field, interp_value
from .solver import Snapshots

__all__ = [
    "GradientField",
    "Trajectory",
    "IntegrabilityReport",
    "eval_gradient_field",
    "integrate",
    "argmin_nodes",
    "distance_to_set",
    "gradient_error_integrability_report",
]

TERMINATION_REASONS = ("t_end", "stationary", "left_box")


class GradientField:
    """``grad u(t, x)``: multilinear in space, linear in time, frozen after the last snapshot."""

    def __init__(self, snapshots: Snapshots):
        self.snapshots = snapshots
        self._grads: dict[int, np.ndarray] = {}

    def _g(self, k: int) -> np.ndarray:
        g = self._grads.get(k)
        if g is None:
            g = gradient_field(self.snapshots.field(k))
            self._grads[k] = g
        return g

    def bracket(self, t: float) -> tuple[int, float]:
        times = self.snapshots.times
        if t >= times[-1]:
            return len(times) - 1, 0.0
        if t <= times[0]:
            return 0, 0.0
        k = int(np.searchsorted(times, t, side="right")) - 1
        return k, (t - times[k]) / (times[k + 1] - times[k])

    def __call__(self, t: float, x, clamp: bool = False) -> np.ndarray:
        i, w = _locate(self.snapshots.grid, x, clamp)
        k, s = self.bracket(t)
        ga = np.array([_multilinear(g, i, w) for g in self._g(k)])
        if s == 0.0:
            return ga
        gb = np.array([_multilinear(g, i, w) for g in self._g(k + 1)])
        return (1.0 - s) * ga + s * gb


def eval_gradient_field(snapshots: Snapshots, t: float, x) -> np.ndarray:
    """One-off evaluation; build a :class:`GradientField` for repeated queries."""
    return GradientField(snapshots)(t, x)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    points: np.ndarray
    values_u0: np.ndarray
    values_env: np.ndarray
    grad_norms: np.ndarray
    terminated_reason: str
    method: str = "rk4"
    dt_ode: float = 0.0

    @property
    def final_point(self) -> np.ndarray:
        return self.points[-1]

    def summary(self, env_min: float | None = None) -> dict:
        out = {
            "final_point": [float(v) for v in self.points[-1]],
            "final_time": float(self.times[-1]),
            "final_env": float(self.values_env[-1]),
            "terminated_reason": self.terminated_reason,
            "method": self.method,
            "dt_ode": float(self.dt_ode),
            "steps": int(len(self.times) - 1),
        }
        if env_min is not None:
            out["final_env_gap"] = float(self.values_env[-1] - env_min)
        return out


def _inside(grid, x) -> bool:
    eps = 1e-12 * (np.array(grid.upper) - np.array(grid.lower))
    return bool(np.all(x >= np.array(grid.lower) - eps) and np.all(x <= np.array(grid.upper) + eps))


def integrate(
    snapshots: Snapshots,
    x0,
    t_end: float,
    dt_ode: float,
    method: str = "rk4",
    u0: Callable | None = None,
    envelope: ScalarField | None = None,
    grad_tol: float | None = None,
    stationary_patience: int = 50,
    field: GradientField | None = None,
) -> Trajectory:
    """Fixed-step integration of ``x' = -grad u(t, x)`` from ``x0``.

    Early stop on ``|grad| < grad_tol`` for ``stationary_patience``
    consecutive steps is only allowed once ``t`` is past the last snapshot,
    where the field no longer changes.  Leaving the box ends the run with
    ``left_box`` and the offending point recorded last.
    """
    if method not in ("euler", "rk4"):
        raise ValueError(f"method must be 'euler' or 'rk4', got {method!r}")
    if not dt_ode > 0:
        raise ValueError("dt_ode must be positive")
    grid = snapshots.grid
    x = np.atleast_1d(np.asarray(x0, dtype=float))
    if x.shape != (grid.dim,):
        raise ValueError(f"x0 must have {grid.dim} components")
    if not _inside(grid, x):
        raise OutOfBoxError(f"x0={x.tolist()} lies outside the box")
    G = field if field is not None else GradientField(snapshots)
    initial = snapshots.initial
    env = envelope if envelope is not None else reference_envelope(initial).envelope
    if grad_tol is None:
        grad_tol = 1e-6 * initial.scale / grid.diameter
    t_last = float(snapshots.times[-1])

    def f_u0(p):
        return float(u0(*p)) if u0 is not None else interp_value(initial, p)

    def rhs(t, p):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return -G(t, p, clamp=True)

    n_steps = int(np.ceil(t_end / dt_ode - 1e-9))
    ts, xs, gnorms = [0.0], [x.copy()], [float(np.linalg.norm(rhs(0.0, x)))]
    reason = "t_end"
    quiet = 0
    t = 0.0
    for k in range(n_steps):
        h = min(dt_ode, t_end - t)
        if method == "euler":
            x_new = x + h * rhs(t, x)
        else:
            k1 = rhs(t, x)
            k2 = rhs(t + 0.5 * h, x + 0.5 * h * k1)
            k3 = rhs(t + 0.5 * h, x + 0.5 * h * k2)
            k4 = rhs(t + h, x + h * k3)
            x_new = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t = (k + 1) * dt_ode if k + 1 < n_steps else t_end
        x = x_new
        ts.append(t)
        xs.append(x.copy())
        if not _inside(grid, x):
            gnorms.append(np.nan)
            reason = "left_box"
            break
        gn = float(np.linalg.norm(rhs(t, x)))
        gnorms.append(gn)
        if t >= t_last and gn < grad_tol:
            quiet += 1
            if quiet >= stationary_patience:
                reason = "stationary"
                break
        else:
            quiet = 0
    pts = np.array(xs)
    inside = [_inside(grid, p) for p in pts]
    vu0 = np.array([f_u0(p) if ok else np.nan for p, ok in zip(pts, inside)])
    venv = np.array([interp_value(env, p) if ok else np.nan for p, ok in zip(pts, inside)])
    return Trajectory(np.array(ts), pts, vu0, venv, np.array(gnorms), reason, method, float(dt_ode))


def argmin_nodes(envelope: ScalarField, rtol: float = 1e-9) -> np.ndarray:
    """Coordinates of nodes within ``rtol * scale`` of the envelope minimum."""
    v = envelope.values
    mask = v <= v.min() + rtol * max(envelope.scale, np.finfo(float).tiny)
    return envelope.grid.points()[mask.ravel()]


def distance_to_set(x, nodes: np.ndarray) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(np.min(np.linalg.norm(nodes - x, axis=1)))


@dataclass(frozen=True)
class IntegrabilityReport:
    integral: float
    per_interval: tuple[float, ...]
    series: ErrorSeries
    finite: bool

    def to_dict(self) -> dict:
        return {
            "integral": self.integral,
            "per_interval": list(self.per_interval),
            "series": self.series.to_dict(),
            "finite": self.finite,
        }


def gradient_error_integrability_report(snapshots: Snapshots, envelope) -> IntegrabilityReport:
    """Trapezoid estimate of the time integral of ``sup |grad u - grad env|``."""
    if len(snapshots) < 3:
        raise ValueError("need at least 3 snapshots")
    s = grad_error_series(snapshots, envelope)
    pieces = 0.5 * (s.errors[1:] + s.errors[:-1]) * np.diff(s.times)
    total = float(np.sum(pieces))
    return IntegrabilityReport(total, tuple(float(p) for p in pieces), s, bool(np.isfinite(total)))
