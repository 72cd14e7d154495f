"""CSV/JSON artifact writers and readers.

Floats go to CSV with 17 significant digits, which round-trips IEEE doubles
exactly; JSON uses Python's shortest-repr floats, also exact.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grid import DirectionSet, Grid, ScalarField
from .solver import Snapshots

__all__ = [
    "to_jsonable",
    "write_json",
    "read_json",
    "config_hash",
    "sha256_file",
    "write_csv",
    "write_field_csv",
    "read_field_csv",
    "write_snapshots",
    "read_snapshots",
    "write_series_csv",
    "write_trajectory_csv",
    "write_gnuplot_series",
]

FLOAT_FMT = "%.17g"


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if np.isnan(v) or np.isinf(v):
            return repr(v)
        return v
    return obj


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())


def config_hash(config: dict) -> str:
    blob = json.dumps(to_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return FLOAT_FMT % float(v)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _field_rows(u: ScalarField):
    grid = u.grid
    idx = np.indices(grid.shape).reshape(grid.dim, -1).T
    pts = grid.points()
    vals = u.values.ravel()
    for i in range(grid.size):
        yield (*[int(v) for v in idx[i]], *pts[i], vals[i])


def _field_header(dim: int) -> list[str]:
    return ["i", "x", "value"] if dim == 1 else ["i", "j", "x", "y", "value"]


def write_field_csv(path: str | Path, u: ScalarField) -> Path:
    return write_csv(path, _field_header(u.grid.dim), _field_rows(u))


def read_field_csv(path: str | Path, grid: Grid) -> ScalarField:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    dim = grid.dim
    values = np.empty(grid.shape)
    idx = tuple(data[:, k].astype(int) for k in range(dim))
    values[idx] = data[:, -1]
    return ScalarField(grid, values)


def write_snapshots(
    snapshots: Snapshots,
    out_dir: str | Path,
    config_hash_: str | None = None,
    indices: Sequence[int] | None = None,
) -> list[Path]:
    """One CSV per snapshot plus ``snapshots.json``; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    indices = list(range(len(snapshots))) if indices is None else sorted(set(int(k) for k in indices))
    files, paths = [], []
    for k in indices:
        name = f"snapshot_{k:05d}.csv"
        paths.append(write_field_csv(out_dir / name, snapshots.field(k)))
        files.append(name)
    manifest = {
        "grid": snapshots.grid.to_dict(),
        "times": [float(snapshots.times[k]) for k in indices],
        "steps": [int(snapshots.steps[k]) for k in indices] if snapshots.steps else [],
        "files": files,
        "dt": float(snapshots.dt_used),
        "dirs": {"name": snapshots.dirs.name, "offsets": [list(p) for p in snapshots.dirs.offsets]},
        "steady_state_reached": bool(snapshots.steady_state_reached),
        "config_hash": config_hash_,
    }
    paths.append(write_json(out_dir / "snapshots.json", manifest))
    return paths


def read_snapshots(out_dir: str | Path) -> Snapshots:
    out_dir = Path(out_dir)
    m = read_json(out_dir / "snapshots.json")
    grid = Grid.from_dict(m["grid"])
    dirs = DirectionSet(tuple(tuple(p) for p in m["dirs"]["offsets"]), name=m["dirs"]["name"])
    values = np.stack([read_field_csv(out_dir / f, grid).values for f in m["files"]])
    return Snapshots(grid, np.array(m["times"]), values, m["dt"], dirs, m["steady_state_reached"],
                     tuple(m["steps"]))


def write_series_csv(path: str | Path, columns: dict[str, Sequence[float]]) -> Path:
    names = list(columns)
    return write_csv(path, names, zip(*[columns[c] for c in names]))


def write_trajectory_csv(path: str | Path, traj) -> Path:
    dim = traj.points.shape[1]
    header = ["t"] + (["x"] if dim == 1 else ["x", "y"]) + ["u0", "env", "grad_norm"]
    rows = (
        (t, *p, a, b, g)
        for t, p, a, b, g in zip(traj.times, traj.points, traj.values_u0, traj.values_env, traj.grad_norms)
    )
    return write_csv(path, header, rows)


def write_gnuplot_series(path: str | Path, csv_name: str, columns: Sequence[str], title: str, logscale: bool = True) -> Path:
    """Gnuplot script plotting ``columns`` of ``csv_name`` (relative path) against column 1."""
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set title '{title}'",
        "set xlabel 't'",
    ]
    if logscale:
        lines.append("set logscale y")
    plots = [f"'{csv_name}' using 1:{k + 2} with linespoints" for k in range(len(columns))]
    lines.append("plot " + ", \\\n     ".join(plots))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path
