"""Built-in initial data and polynomial custom problems.

Every built-in is C^{1,1}, coercive, and coincides with its convex envelope
outside the ball of radius ``R0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial import polynomial as P

from .grid import Grid, ScalarField

__all__ = ["Problem", "PROBLEMS", "problem_library", "polynomial_problem", "UnknownProblemError"]


class UnknownProblemError(KeyError):
    pass


@dataclass(frozen=True)
class Problem:
    name: str
    dim: int
    u0: Callable[..., np.ndarray]
    hessian_bound_M: float
    R0: float
    lower: float = -2.0
    upper: float = 2.0
    n: int = 201
    analytic_envelope: Optional[Callable[..., np.ndarray]] = None
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.hessian_bound_M <= 0:
            raise ValueError("hessian bound M must be positive")
        if not (self.lower < -self.R0 and self.upper > self.R0):
            raise ValueError(f"box [{self.lower}, {self.upper}]^{self.dim} must strictly contain B_R0, R0={self.R0}")

    def grid(self, n: int | None = None) -> Grid:
        return Grid.square(self.lower, self.upper, self.n if n is None else n, self.dim)

    def sample(self, grid: Grid) -> ScalarField:
        return ScalarField.sample(grid, self.u0)

    def envelope_values(self, grid: Grid) -> np.ndarray | None:
        if self.analytic_envelope is None:
            return None
        return np.asarray(self.analytic_envelope(*grid.mesh()), dtype=float)

    def __call__(self, *x):
        return self.u0(*x)


def _double_well(x):
    return (x * x - 1.0) ** 2


def _double_well_env(x):
    return np.where(np.abs(x) < 1.0, 0.0, _double_well(x))


def _asym(x):
    return x**4 - 2.0 * x**2 + 0.3 * x


def _asym_env(x):
    # x^4 - 2x^2 = (x^2 - 1)^2 - 1; adding an affine term shifts the envelope by it
    return np.where(np.abs(x) < 1.0, -1.0 + 0.3 * x, _asym(x))


def _radial(x, y):
    return (x * x + y * y - 1.0) ** 2


def _radial_env(x, y):
    return np.where(x * x + y * y < 1.0, 0.0, _radial(x, y))


def _quad1(x):
    return x * x


def _quad2(x, y):
    return x * x + y * y


# M: sup of the Hessian spectral norm over the default box [-2, 2]^d.
#   quartic wells: |12 x^2 - 4| <= 44 on [-2, 2]
#   radial well: eigenvalues 4(r^2 - 1) and 12 r^2 - 4, r^2 <= 8 -> 92
PROBLEMS: dict[str, Callable[[], Problem]] = {
    "double_well_1d": lambda: Problem("double_well_1d", 1, _double_well, 44.0, 1.0, n=201,
                                      analytic_envelope=_double_well_env),
    "asymmetric_quartic_1d": lambda: Problem("asymmetric_quartic_1d", 1, _asym, 44.0, 1.0, n=201,
                                             analytic_envelope=_asym_env),
    "radial_double_well_2d": lambda: Problem("radial_double_well_2d", 2, _radial, 92.0, 1.0, n=101,
                                             analytic_envelope=_radial_env),
    "convex_quadratic_1d": lambda: Problem("convex_quadratic_1d", 1, _quad1, 2.0, 0.5, n=201,
                                           analytic_envelope=_quad1),
    "convex_quadratic_2d": lambda: Problem("convex_quadratic_2d", 2, _quad2, 2.0, 0.5, n=101,
                                           analytic_envelope=_quad2),
}


def problem_library(name: str) -> Problem:
    try:
        return PROBLEMS[name]()
    except KeyError:
        raise UnknownProblemError(f"unknown problem {name!r}; available: {', '.join(sorted(PROBLEMS))}") from None


def _terms_2d(terms) -> list[tuple[int, int, float]]:
    out = []
    for t in terms:
        i, j, c = t
        out.append((int(i), int(j), float(c)))
    return out


def polynomial_problem(
    coefficients: Sequence,
    dim: int = 1,
    lower: float = -2.0,
    upper: float = 2.0,
    n: int | None = None,
    name: str = "custom",
    R0: float | None = None,
) -> Problem:
    """Problem from polynomial coefficients.

    1D: ``coefficients`` lists c_0, c_1, ... (increasing degree).
    2D: ``coefficients`` lists terms ``[i, j, c]`` meaning ``c x^i y^j``.

    Coercivity is checked on the leading homogeneous part; ``M`` is the
    sup of the Hessian spectral norm, sampled on a fine grid of the box.
    ``R0`` defaults to the radius of the region where the discrete envelope
    detaches from the data, plus two cells.
    """
    n = n if n is not None else (201 if dim == 1 else 101)
    if dim == 1:
        c = np.trim_zeros(np.asarray(coefficients, dtype=float), "b")
        deg = len(c) - 1
        if deg < 2 or deg % 2 or c[-1] <= 0:
            raise ValueError("1D polynomial must have even degree >= 2 and positive leading coefficient")

        def u0(x, c=c):
            return P.polyval(x, c)

        d2 = P.polyder(c, 2)
        xs = np.linspace(lower, upper, 20001)
        crit = [r.real for r in np.roots(P.polyder(d2)[::-1]) if abs(r.imag) < 1e-12 and lower <= r.real <= upper] if len(d2) > 1 else []
        M = float(np.max(np.abs(P.polyval(np.concatenate([xs, crit]), d2))))
        spec = {"dim": 1, "coefficients": c.tolist()}
    elif dim == 2:
        terms = _terms_2d(coefficients)
        deg = max(i + j for i, j, c in terms if c != 0)
        theta = np.linspace(0, 2 * np.pi, 3600, endpoint=False)
        lead = sum(c * np.cos(theta) ** i * np.sin(theta) ** j for i, j, c in terms if i + j == deg)
        if deg < 2 or deg % 2 or np.min(lead) <= 0:
            raise ValueError("2D polynomial must have even degree >= 2 and a positive definite leading part")

        def u0(x, y, terms=tuple(terms)):
            return sum(c * x**i * y**j for i, j, c in terms)

        def d(term, a, b):
            i, j, c = term
            if a > i or b > j:
                return (0, 0, 0.0)
            k = np.prod(range(i - a + 1, i + 1)) * np.prod(range(j - b + 1, j + 1))
            return (i - a, j - b, c * float(k))

        X, Y = np.meshgrid(np.linspace(lower, upper, 401), np.linspace(lower, upper, 401), indexing="ij")

        def ev(ts):
            return sum(c * X**i * Y**j for i, j, c in ts)

        hxx = ev([d(t, 2, 0) for t in terms])
        hyy = ev([d(t, 0, 2) for t in terms])
        hxy = ev([d(t, 1, 1) for t in terms])
        rad = np.sqrt(0.25 * (hxx - hyy) ** 2 + hxy**2)
        M = float(np.max(np.abs(0.5 * (hxx + hyy)) + rad))
        spec = {"dim": 2, "coefficients": [list(t) for t in terms]}
    else:
        raise ValueError("dim must be 1 or 2")
    M = max(M, 1e-12)
    spec.update({"lower": lower, "upper": upper, "n": n})
    if R0 is None:
        from .envelope import reference_envelope

        grid = Grid.square(lower, upper, n, dim)
        field_ = ScalarField.sample(grid, u0)
        env = reference_envelope(field_).envelope.values
        detached = field_.values - env > 1e-9 * max(field_.scale, 1e-300)
        radii = np.sqrt(sum(c**2 for c in grid.mesh()))
        R0 = float(radii[detached].max()) + 2 * grid.h if np.any(detached) else grid.h
    return Problem(name, dim, u0, M, R0, lower, upper, n, None, spec)
