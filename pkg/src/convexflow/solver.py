"""Explicit monotone scheme for  u_t = min(0, lambda_1(D^2 u)).

Forward Euler in time, wide-stencil directional second differences in
space, frozen Dirichlet values on the boundary band.  Under the CFL bound of
:func:`cfl_dt` the update is a minimum of averaging operators with
nonnegative weights, which is what makes the discrete comparison,
monotonicity and semiconcavity statements exact.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import DirectionSet, Grid, ScalarField, AXES, STENCIL8, second_differences_field
from .problems import Problem

__all__ = [
    "CFLError",
    "NumericalAbort",
    "Snapshots",
    "LipschitzReport",
    "cfl_dt",
    "step",
    "solve",
    "default_dirs",
    "time_lipschitz_check",
]

log = logging.getLogger(__name__)


class CFLError(ValueError):
    pass


class NumericalAbort(RuntimeError):
    pass


def default_dirs(dim: int) -> DirectionSet:
    return AXES(1) if dim == 1 else STENCIL8


@dataclass(frozen=True, eq=False)
class Snapshots:
    """Time-indexed solver output; ``values[k]`` is u at ``times[k]``."""

    grid: Grid
    times: np.ndarray
    values: np.ndarray
    dt_used: float
    dirs: DirectionSet
    steady_state_reached: bool = False
    steps: tuple[int, ...] = ()

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.shape != (len(times),) + self.grid.shape:
            raise ValueError("values must have shape (len(times), *grid.shape)")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.times)

    def field(self, k: int) -> ScalarField:
        return ScalarField(self.grid, self.values[k])

    @property
    def fields(self) -> list[ScalarField]:
        return [self.field(k) for k in range(len(self))]

    @property
    def initial(self) -> ScalarField:
        return self.field(0)

    @property
    def final(self) -> ScalarField:
        return self.field(len(self) - 1)

    def nearest_index(self, t: float) -> int:
        """Snapshot closest to ``t``; ties go to the earlier snapshot."""
        k = int(np.searchsorted(self.times, t))
        if k == 0:
            return 0
        if k >= len(self.times):
            return len(self.times) - 1
        return k if self.times[k] - t < t - self.times[k - 1] else k - 1


def cfl_dt(grid: Grid, dirs: DirectionSet, safety: float = 1.0) -> float:
    """Largest monotone time step ``safety * (h min|p|)^2 / 2``."""
    if not 0.0 < safety <= 1.0:
        raise ValueError(f"safety must lie in (0, 1], got {safety}")
    delta = grid.h * dirs.min_norm
    return safety * delta * delta / 2.0


def _check_dt(grid: Grid, dirs: DirectionSet, dt: float):
    limit = cfl_dt(grid, dirs, 1.0)
    if not dt > 0:
        raise CFLError(f"time step must be positive, got {dt}")
    if dt > limit * (1.0 + 1e-12):
        raise CFLError(f"dt={dt:.6g} violates the CFL bound dt <= (h*min|p|)^2/2 = {limit:.6g}")


def _increment(values: np.ndarray, h: float, dirs: DirectionSet, band: int, dt: float) -> np.ndarray:
    lam = second_differences_field(values, h, dirs, band).min(axis=0)
    return dt * np.minimum(0.0, lam)


def step(u: ScalarField, dt: float, dirs: DirectionSet, check_cfl: bool = True) -> ScalarField:
    """One explicit step; the boundary band keeps the values of ``u``."""
    if check_cfl:
        _check_dt(u.grid, dirs, dt)
    band = dirs.band
    new = np.array(u.values)
    inner = tuple(slice(band, k - band) for k in u.grid.shape)
    new[inner] += _increment(u.values, u.grid.h, dirs, band, dt)
    return ScalarField(u.grid, new)


def _step_indices(times: Sequence[float], dt: float, T: float) -> tuple[np.ndarray, int]:
    n_total = int(round(T / dt))
    idx = np.clip(np.rint(np.asarray(times, dtype=float) / dt).astype(int), 0, n_total)
    idx = np.unique(np.concatenate([[0], idx]))
    return idx, n_total


def _commensurate_dt(dt_max: float, T: float) -> float:
    """Largest ``dt <= dt_max`` that divides ``T`` into whole steps."""
    if T == 0:
        return dt_max
    return T / math.ceil(T / dt_max * (1 - 1e-12))


def solve(
    initial: Problem | ScalarField,
    T: float,
    snapshot_times: Sequence[float] | None = None,
    dirs: DirectionSet | None = None,
    safety: float = 0.9,
    n: int | None = None,
    steady_tol: float | None = None,
    dump_dir: str | Path | None = None,
    enforce_cfl: bool = True,
) -> Snapshots:
    """Evolve the initial data up to time ``T``.

    The step is the largest CFL-admissible ``dt`` that divides ``T`` evenly,
    so ``T`` itself is always reached.  Snapshot times are snapped to the
    nearest completed step and the snapped times are what gets recorded.  ``steady_state_reached`` is set once
    ``max|u^{n+1} - u^n| / dt`` drops below ``steady_tol`` (default
    ``1e-8 * scale``).  ``enforce_cfl=False`` exists only to build unstable
    runs for negative tests of the audit.
    """
    u0 = initial.sample(initial.grid(n)) if isinstance(initial, Problem) else initial
    grid = u0.grid
    dirs = default_dirs(grid.dim) if dirs is None else dirs
    if dirs.dim != grid.dim:
        raise ValueError("direction set dimension does not match the grid")
    if T < 0:
        raise ValueError("T must be nonnegative")
    if snapshot_times is None:
        snapshot_times = np.linspace(0.0, T, 11)
    snapshot_times = np.asarray(snapshot_times, dtype=float)
    if np.any(np.diff(snapshot_times) < 0) or np.any(snapshot_times < 0) or np.any(snapshot_times > T * (1 + 1e-12)):
        raise ValueError("snapshot_times must be sorted and lie in [0, T]")
    if enforce_cfl:
        dt = _commensurate_dt(cfl_dt(grid, dirs, safety), T)
    else:
        dt = _commensurate_dt(safety * (grid.h * dirs.min_norm) ** 2 / 2.0, T)
    scale = u0.scale
    steady_tol = 1e-8 * scale if steady_tol is None else steady_tol

    idx, n_total = _step_indices(snapshot_times, dt, T)
    band = dirs.band
    inner = tuple(slice(band, k - band) for k in grid.shape)
    u = np.array(u0.values)
    out = np.empty((len(idx),) + grid.shape)
    out[0] = u
    steady = False
    nxt = 1
    for k in range(1, n_total + 1):
        inc = _increment(u, grid.h, dirs, band, dt)
        u[inner] += inc
        if not steady and inc.size and -inc.min() / dt < steady_tol:
            steady = True
            log.debug("steady state at step %d (t=%.6g)", k, k * dt)
        if k % 256 == 0 or (nxt < len(idx) and k == idx[nxt]):
            if not np.all(np.isfinite(u)):
                msg = f"non-finite values at step {k} (t={k * dt:.6g}); dt={dt:.3g}"
                if dump_dir is not None:
                    path = Path(dump_dir) / f"abort_step{k}.npy"
                    path.parent.mkdir(parents=True, exist_ok=True)
                    np.save(path, u)
                    msg += f"; field dumped to {path}"
                raise NumericalAbort(msg)
        while nxt < len(idx) and k == idx[nxt]:
            out[nxt] = u
            nxt += 1
    times = np.where(idx == n_total, T, idx * dt)
    return Snapshots(grid, times, out, dt, dirs, steady, tuple(int(i) for i in idx))


@dataclass(frozen=True)
class LipschitzReport:
    worst_ratio: float
    M_disc: float
    M: float | None
    worst_ratio_vs_M: float | None
    passed: bool


def time_lipschitz_check(snapshots: Snapshots, M: float | None = None, tol: float = 1e-6) -> LipschitzReport:
    """Worst ``|u(t_{k+1}) - u(t_k)| / (M_disc (t_{k+1} - t_k))`` over nodes and k.

    ``M_disc`` is the largest absolute directional second difference of the
    initial data; the bound with the analytic ``M`` is reported
    alongside when given.
    """
    sd = second_differences_field(snapshots.values[0], snapshots.grid.h, snapshots.dirs)
    M_disc = float(np.max(np.abs(sd))) if sd.size else 0.0
    worst = 0.0
    for k in range(len(snapshots) - 1):
        gap = float(np.max(np.abs(snapshots.values[k + 1] - snapshots.values[k])))
        dt = snapshots.times[k + 1] - snapshots.times[k]
        if gap == 0.0:
            continue
        ratio = gap / (M_disc * dt) if M_disc > 0 and dt > 0 else np.inf
        worst = max(worst, ratio)
    vs_M = worst * M_disc / M if M else None
    return LipschitzReport(worst, M_disc, M, vs_M, worst <= 1.0 + tol)
