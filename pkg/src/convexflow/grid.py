"""Uniform box grids, scalar fields and wide-stencil difference operators.

Fields are stored as numpy arrays of shape ``grid.shape`` (C order, so the
flattened values are row-major).  Stencil operators come in two flavours:
node-wise functions that mirror the mathematical definitions one node at a
time, and vectorised ``*_field`` variants used by the solver and the
diagnostics.  Both share the same arithmetic so they agree bit for bit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "Grid",
    "ScalarField",
    "DirectionSet",
    "StencilError",
    "OutOfBoxError",
    "AXES",
    "STENCIL8",
    "STENCIL16",
    "direction_preset",
    "directional_second_difference",
    "discrete_lambda_min",
    "discrete_lambda_max",
    "second_differences_field",
    "lambda_min_field",
    "lambda_max_field",
    "gradient_central",
    "gradient_field",
    "interp_value",
    "interp_gradient",
    "interp_many",
]


class StencilError(IndexError):
    """A stencil would reach outside the grid."""


class OutOfBoxError(ValueError):
    """A query point lies outside the grid box."""


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on a box with square cells."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    n: tuple[int, ...]

    def __post_init__(self):
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        n = tuple(int(v) for v in np.atleast_1d(self.n))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "n", n)
        if not (len(lower) == len(upper) == len(n)):
            raise ValueError("lower, upper and n must have the same length")
        if len(n) not in (1, 2):
            raise ValueError(f"only 1D and 2D grids are supported, got dim={len(n)}")
        if min(n) < 5:
            raise ValueError(f"need at least 5 nodes per axis, got {n}")
        for lo, hi in zip(lower, upper):
            if not hi > lo:
                raise ValueError(f"empty axis [{lo}, {hi}]")
        hs = self.spacing
        if len(hs) == 2 and not math.isclose(hs[0], hs[1], rel_tol=1e-12):
            raise ValueError(f"cells must be square, got spacings {hs}")

    @classmethod
    def square(cls, lower: float, upper: float, n: int, dim: int) -> "Grid":
        return cls((lower,) * dim, (upper,) * dim, (n,) * dim)

    @property
    def dim(self) -> int:
        return len(self.n)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (k - 1) for lo, hi, k in zip(self.lower, self.upper, self.n))

    @property
    def h(self) -> float:
        return self.spacing[0]

    @property
    def diameter(self) -> float:
        return float(np.hypot.reduce(np.subtract(self.upper, self.lower)))

    def axis(self, k: int) -> np.ndarray:
        return np.linspace(self.lower[k], self.upper[k], self.n[k])

    def axes(self) -> list[np.ndarray]:
        return [self.axis(k) for k in range(self.dim)]

    def mesh(self) -> list[np.ndarray]:
        """Coordinate arrays of shape ``self.shape``, one per axis."""
        return np.meshgrid(*self.axes(), indexing="ij")

    def points(self) -> np.ndarray:
        """All node coordinates, shape ``(size, dim)``, row-major order."""
        return np.stack([c.ravel() for c in self.mesh()], axis=-1)

    def node_coords(self, node: Sequence[int]) -> np.ndarray:
        return np.array([self.lower[k] + node[k] * self.spacing[k] for k in range(self.dim)])

    def contains(self, x, atol: float = 0.0) -> bool:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return bool(np.all(x >= np.array(self.lower) - atol) and np.all(x <= np.array(self.upper) + atol))

    def refined(self) -> "Grid":
        """Same box with the spacing halved."""
        return Grid(self.lower, self.upper, tuple(2 * k - 1 for k in self.n))

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper), "n": list(self.n)}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(tuple(d["lower"]), tuple(d["upper"]), tuple(d["n"]))


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Node values of a function on a :class:`Grid` (read-only)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(self.grid.shape)
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def sample(cls, grid: Grid, fn) -> "ScalarField":
        return cls(grid, fn(*grid.mesh()))

    @property
    def scale(self) -> float:
        """Oscillation max - min, used to make tolerances relative."""
        return float(np.ptp(self.values))

    def with_values(self, values: np.ndarray) -> "ScalarField":
        return ScalarField(self.grid, values)

    def __getitem__(self, node):
        return self.values[tuple(node)]


@dataclass(frozen=True)
class DirectionSet:
    """Integer stencil offsets, one per antipodal pair, sorted lexicographically.

    The sort order matters: whenever several offsets attain a minimum the
    first one in this order wins, which keeps control selection deterministic.
    """

    offsets: tuple[tuple[int, ...], ...]
    name: str = "custom"
    norms: tuple[float, ...] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.offsets:
            raise ValueError("direction set is empty")
        dim = len(self.offsets[0])
        canon = []
        for p in self.offsets:
            p = tuple(int(v) for v in p)
            if len(p) != dim or not any(p):
                raise ValueError(f"bad offset {p}")
            if math.gcd(*p) != 1:
                raise ValueError(f"offset {p} is not primitive")
            # antipodal representative: first nonzero component positive
            first = next(v for v in p if v != 0)
            if first < 0:
                p = tuple(-v for v in p)
            canon.append(p)
        if len(set(canon)) != len(canon):
            raise ValueError("parallel offsets in direction set")
        for k in range(dim):
            axis = tuple(int(i == k) for i in range(dim))
            if axis not in canon:
                raise ValueError(f"direction set must contain axis offset {axis}")
        canon.sort()
        object.__setattr__(self, "offsets", tuple(canon))
        object.__setattr__(self, "norms", tuple(float(np.hypot.reduce(p)) for p in canon))

    @property
    def dim(self) -> int:
        return len(self.offsets[0])

    @property
    def band(self) -> int:
        """Width of the boundary band where stencils do not fit."""
        return max(max(abs(v) for v in p) for p in self.offsets)

    @property
    def min_norm(self) -> float:
        return min(self.norms)

    def units(self) -> np.ndarray:
        return np.array(self.offsets, dtype=float) / np.array(self.norms)[:, None]

    def __len__(self):
        return len(self.offsets)


def AXES(dim: int) -> DirectionSet:
    return DirectionSet(tuple(tuple(int(i == k) for i in range(dim)) for k in range(dim)), name="axes")


STENCIL8 = DirectionSet(((1, 0), (0, 1), (1, 1), (1, -1)), name="stencil8")
STENCIL16 = DirectionSet(
    ((1, 0), (0, 1), (1, 1), (1, -1), (2, 1), (1, 2), (2, -1), (1, -2)), name="stencil16"
)


def direction_preset(name: str, dim: int) -> DirectionSet:
    name = name.lower()
    if name == "axes":
        return AXES(dim)
    if dim != 2:
        raise ValueError(f"direction set {name!r} is only defined in 2D")
    if name == "stencil8":
        return STENCIL8
    if name == "stencil16":
        return STENCIL16
    raise ValueError(f"unknown direction set {name!r}; choose axes, stencil8 or stencil16")


def _check_interior(grid: Grid, node: Sequence[int], reach: int) -> tuple[int, ...]:
    node = tuple(int(i) for i in node)
    if len(node) != grid.dim:
        raise StencilError(f"node {node} has wrong dimension for a {grid.dim}D grid")
    for i, k in zip(node, grid.n):
        if i - reach < 0 or i + reach > k - 1:
            raise StencilError(f"stencil of reach {reach} at node {node} leaves grid of shape {grid.n}")
    return node


def directional_second_difference(u: ScalarField, node: Sequence[int], p: Sequence[int]) -> float:
    """Centered second difference of ``u`` along the lattice offset ``p``.

    ``(u(x + h p) - 2 u(x) + u(x - h p)) / (h |p|)^2``; exact for quadratics.
    """
    p = tuple(int(v) for v in p)
    node = _check_interior(u.grid, node, max(abs(v) for v in p))
    fwd = tuple(i + v for i, v in zip(node, p))
    bwd = tuple(i - v for i, v in zip(node, p))
    delta2 = u.grid.h**2 * float(sum(v * v for v in p))
    vals = u.values
    return float((vals[fwd] - 2.0 * vals[node] + vals[bwd]) / delta2)


def discrete_lambda_min(u: ScalarField, node: Sequence[int], dirs: DirectionSet) -> float:
    return min(directional_second_difference(u, node, p) for p in dirs.offsets)


def discrete_lambda_max(u: ScalarField, node: Sequence[int], dirs: DirectionSet) -> float:
    return max(directional_second_difference(u, node, p) for p in dirs.offsets)


def _shifted(values: np.ndarray, band: int, p: Sequence[int]) -> np.ndarray:
    idx = tuple(slice(band + v, k - band + v) for v, k in zip(p, values.shape))
    return values[idx]


def second_differences_field(values: np.ndarray, h: float, dirs: DirectionSet, band: int | None = None) -> np.ndarray:
    """All directional second differences on the interior block.

    Returns an array of shape ``(len(dirs), *interior_shape)`` where the
    interior excludes ``band`` layers (default ``dirs.band``) on every side.
    """
    band = dirs.band if band is None else band
    if band < dirs.band:
        raise StencilError("band narrower than the stencil reach")
    zero = (0,) * values.ndim
    center = _shifted(values, band, zero)
    out = np.empty((len(dirs),) + center.shape)
    for k, p in enumerate(dirs.offsets):
        neg = tuple(-v for v in p)
        delta2 = h * h * float(sum(v * v for v in p))
        out[k] = (_shifted(values, band, p) - 2.0 * center + _shifted(values, band, neg)) / delta2
    return out


def lambda_min_field(values: np.ndarray, h: float, dirs: DirectionSet, band: int | None = None) -> np.ndarray:
    return second_differences_field(values, h, dirs, band).min(axis=0)


def lambda_max_field(values: np.ndarray, h: float, dirs: DirectionSet, band: int | None = None) -> np.ndarray:
    return second_differences_field(values, h, dirs, band).max(axis=0)


def gradient_central(u: ScalarField, node: Sequence[int]) -> np.ndarray:
    node = _check_interior(u.grid, node, 1)
    g = np.empty(u.grid.dim)
    for k in range(u.grid.dim):
        fwd = list(node)
        bwd = list(node)
        fwd[k] += 1
        bwd[k] -= 1
        g[k] = (u.values[tuple(fwd)] - u.values[tuple(bwd)]) / (2.0 * u.grid.spacing[k])
    return g


def gradient_field(u: ScalarField) -> np.ndarray:
    """Nodal gradients, shape ``(dim, *grid.shape)``.

    Central differences in the interior (identical to :func:`gradient_central`)
    and second-order one-sided differences on the outermost layer.
    """
    grads = np.gradient(u.values, *u.grid.spacing, edge_order=2)
    if u.grid.dim == 1:
        grads = [grads]
    return np.stack(grads)


def _locate(grid: Grid, x, clamp: bool):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
    lower = np.array(grid.lower)
    upper = np.array(grid.upper)
    eps = 1e-12 * (upper - lower)
    outside = (x < lower - eps) | (x > upper + eps)
    if np.any(outside):
        if not clamp:
            raise OutOfBoxError(f"point {x.tolist()} is outside the box {grid.lower}..{grid.upper}")
        warnings.warn(f"point {x.tolist()} clamped into the grid box", stacklevel=3)
    x = np.clip(x, lower, upper)
    s = (x - lower) / np.array(grid.spacing)
    i = np.clip(np.floor(s).astype(int), 0, np.array(grid.n) - 2)
    return i, s - i


def _multilinear(arr: np.ndarray, i: np.ndarray, w: np.ndarray) -> float:
    if len(i) == 1:
        return float((1.0 - w[0]) * arr[i[0]] + w[0] * arr[i[0] + 1])
    a, b = i
    s, t = w
    return float(
        (1 - s) * (1 - t) * arr[a, b]
        + s * (1 - t) * arr[a + 1, b]
        + (1 - s) * t * arr[a, b + 1]
        + s * t * arr[a + 1, b + 1]
    )


def interp_value(u: ScalarField, x, clamp: bool = False) -> float:
    """Multilinear interpolation of ``u`` at the point ``x``."""
    i, w = _locate(u.grid, x, clamp)
    return _multilinear(u.values, i, w)


def interp_gradient(u: ScalarField, x, clamp: bool = False, grads: np.ndarray | None = None) -> np.ndarray:
    """Gradient at ``x``: nodal differences interpolated componentwise.

    ``grads`` may carry a precomputed :func:`gradient_field` to avoid
    recomputation inside integrators.
    """
    if grads is None:
        grads = gradient_field(u)
    i, w = _locate(u.grid, x, clamp)
    return np.array([_multilinear(g, i, w) for g in grads])


def interp_many(values: np.ndarray, grid: Grid, pts: np.ndarray) -> np.ndarray:
    """Multilinear interpolation at many points at once.

    ``pts`` has shape ``(m, dim)`` (or ``(m,)`` in 1D) and must already lie
    in the box; callers clamp beforehand.  Works on any trailing-free array
    of shape ``grid.shape``.
    """
    pts = np.asarray(pts, dtype=float).reshape(len(pts), grid.dim)
    lower = np.array(grid.lower)
    s = (pts - lower) / np.array(grid.spacing)
    i = np.clip(np.floor(s).astype(int), 0, np.array(grid.n) - 2)
    w = s - i
    if grid.dim == 1:
        a, t = i[:, 0], w[:, 0]
        return (1.0 - t) * values[a] + t * values[a + 1]
    a, b = i[:, 0], i[:, 1]
    s_, t = w[:, 0], w[:, 1]
    return (
        (1 - s_) * (1 - t) * values[a, b]
        + s_ * (1 - t) * values[a + 1, b]
        + (1 - s_) * t * values[a, b + 1]
        + s_ * t * values[a + 1, b + 1]
    )
