"""Discrete convex envelopes of sampled fields.

Three routes are provided:

* :func:`lower_hull_envelope_1d` -- exact lower convex hull (monotone chain).
* :func:`biconjugate` -- Legendre-Fenchel transform applied twice, factored
  axis by axis in 2D.
* :func:`caratheodory_bruteforce` -- minimises over all convex combinations of
  ``dim + 1`` grid nodes.  Expensive; used as an independent oracle.

All envelopes are defined on the grid nodes only: the candidate supporting
points are the nodes themselves.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np

from .grid import ScalarField

__all__ = [
    "EnvelopeResult",
    "lower_hull_indices",
    "lower_hull_envelope_1d",
    "legendre_conjugate_1d",
    "biconjugate",
    "caratheodory_bruteforce",
    "reference_envelope",
    "convexity_defect",
    "CARATHEODORY_MAX_NODES",
]

CARATHEODORY_MAX_NODES = 2000


@dataclass(frozen=True)
class EnvelopeResult:
    envelope: ScalarField
    method: str
    max_gap_to_input: float


def _result(u: ScalarField, env: np.ndarray, method: str) -> EnvelopeResult:
    # every route produces a minorant; clip the last few ulps of rounding
    env = np.minimum(env, u.values)
    return EnvelopeResult(ScalarField(u.grid, env), method, float(np.max(u.values - env)))


def lower_hull_indices(xs: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Indices of the vertices of the lower convex hull of ``(xs, vals)``.

    ``xs`` must be strictly increasing.  Collinear middle points are dropped,
    so among equal-slope candidates the earliest index survives.
    """
    hull: list[int] = []
    for k in range(len(xs)):
        while len(hull) >= 2:
            i, j = hull[-2], hull[-1]
            # pop j unless it lies strictly below the chord i -> k
            cross = (xs[j] - xs[i]) * (vals[k] - vals[i]) - (vals[j] - vals[i]) * (xs[k] - xs[i])
            if cross <= 0:
                hull.pop()
            else:
                break
        hull.append(k)
    return np.asarray(hull, dtype=int)


def _check_increasing(a: np.ndarray, what: str):
    if a.ndim != 1 or (len(a) > 1 and not np.all(np.diff(a) > 0)):
        raise ValueError(f"{what} must be a strictly increasing 1D array")


def lower_hull_envelope_1d(u: ScalarField) -> EnvelopeResult:
    if u.grid.dim != 1:
        raise ValueError("lower_hull_envelope_1d needs a 1D field")
    xs = u.grid.axis(0)
    vals = u.values
    idx = lower_hull_indices(xs, vals)
    env = np.interp(xs, xs[idx], vals[idx])
    return _result(u, env, "hull1d")


class _Conjugator:
    """Precomputed lower hull of one 1D data set, for repeated conjugation."""

    def __init__(self, xs: np.ndarray, vals: np.ndarray):
        self.xs = xs
        self.vals = vals
        self.idx = lower_hull_indices(xs, vals)
        hx = xs[self.idx]
        self.edge_slopes = np.diff(vals[self.idx]) / np.diff(hx)

    def __call__(self, slopes: np.ndarray):
        # the maximiser of s*x - f is the hull vertex whose two edge slopes
        # bracket s; side="left" resolves ties toward the smaller index
        k = np.searchsorted(self.edge_slopes, slopes, side="left")
        arg = self.idx[k]
        return slopes * self.xs[arg] - self.vals[arg], arg


def legendre_conjugate_1d(xs, vals, slopes, return_argmax: bool = False):
    """Discrete conjugate ``s -> max_i (s * xs[i] - vals[i])``.

    The maximiser is monotone in ``s`` and always a vertex of the lower hull,
    so after one O(n) hull pass every slope is answered by locating it among
    the sorted hull edge slopes.
    """
    xs = np.asarray(xs, dtype=float)
    vals = np.asarray(vals, dtype=float)
    slopes = np.asarray(slopes, dtype=float)
    _check_increasing(xs, "xs")
    _check_increasing(slopes, "slopes")
    if vals.shape != xs.shape:
        raise ValueError("xs and vals must have the same length")
    conj, arg = _Conjugator(xs, vals)(slopes)
    return (conj, arg) if return_argmax else conj


def _slope_range(values: np.ndarray, h: float, axis: int) -> tuple[float, float]:
    dq = np.diff(values, axis=axis) / h
    return float(dq.min()), float(dq.max())


def _uniform_slopes(lo: float, hi: float, count: int) -> np.ndarray:
    if hi - lo <= 1e-14 * max(1.0, abs(lo), abs(hi)):
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, count)


def _biconjugate_uniform(u: ScalarField, slope_count: int) -> np.ndarray:
    grid = u.grid
    f = u.values
    if grid.dim == 1:
        xs = grid.axis(0)
        s = _uniform_slopes(*_slope_range(f, grid.h, 0), slope_count)
        fstar = legendre_conjugate_1d(xs, f, s)
        return legendre_conjugate_1d(s, fstar, xs)
    x1, x2 = grid.axes()
    s1 = _uniform_slopes(*_slope_range(f, grid.h, 0), slope_count)
    s2 = _uniform_slopes(*_slope_range(f, grid.h, 1), slope_count)
    # g(x1, s2) = max_x2 (s2 x2 - f)
    g = np.stack([legendre_conjugate_1d(x2, f[i], s2) for i in range(len(x1))])
    # f*(s1, s2) = max_x1 (s1 x1 + g(x1, s2))
    fstar = np.stack([legendre_conjugate_1d(x1, -g[:, j], s1) for j in range(len(s2))], axis=1)
    # back again: h(s1, x2) = max_s2 (s2 x2 - f*), then max_s1 (s1 x1 + h)
    hh = np.stack([legendre_conjugate_1d(s2, fstar[i], x2) for i in range(len(s1))])
    return np.stack([legendre_conjugate_1d(s1, -hh[:, k], x1) for k in range(len(x2))], axis=1)


class _Dual:
    """Concave profiles ``H(s1, x2_k)`` used by the refined biconjugate.

    Writing ``phi_s(j) = min_i (f[i, j] - s x1_i)`` one has
    ``f**(x1, x2_k) = sup_s (s x1 + hull_x2(phi_s)(x2_k))``: the inner pair of
    conjugates collapses to a 1D lower hull, which is exact.  Only the outer
    slope ``s`` needs sampling.  Each sample also yields a supergradient of
    ``s -> H(s, x2_k)``, used to bound what lies between samples.
    """

    def __init__(self, x1: np.ndarray, x2: np.ndarray, f: np.ndarray):
        self.x1 = x1
        self.x2 = x2
        self.columns = [_Conjugator(x1, f[:, j]) for j in range(f.shape[1])]

    def evaluate(self, s: np.ndarray):
        m, n2 = len(s), len(self.x2)
        phi = np.empty((m, n2))
        arg = np.empty((m, n2), dtype=int)
        for j, col in enumerate(self.columns):
            c, a = col(s)
            phi[:, j] = -c
            arg[:, j] = a
        xa = self.x1[arg]
        if n2 == 1:
            return phi, -xa
        H = np.empty((m, n2))
        G = np.empty((m, n2))
        x2 = self.x2
        nodes = np.arange(n2)
        for r in range(m):
            idx = lower_hull_indices(x2, phi[r])
            e = np.clip(np.searchsorted(idx, nodes, side="right") - 1, 0, len(idx) - 2)
            left, right = idx[e], idx[e + 1]
            w = (x2[right] - x2) / (x2[right] - x2[left])
            H[r] = w * phi[r, left] + (1.0 - w) * phi[r, right]
            G[r] = -(w * xa[r, left] + (1.0 - w) * xa[r, right])
        return H, G


def _argmax_samples(S: np.ndarray, h: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Index maximising ``S * x + h`` for each ``x`` (``h`` concave in ``S``)."""
    if len(S) == 1:
        return np.zeros(len(x), dtype=int)
    neg_secant = np.maximum.accumulate(-np.diff(h) / np.diff(S))
    a = np.searchsorted(neg_secant, x, side="left")
    # rounding can break exact concavity; compare with the neighbours
    best = a.copy()
    bestval = S[a] * x + h[a]
    for off in (-1, 1):
        b = np.clip(a + off, 0, len(S) - 1)
        val = S[b] * x + h[b]
        better = val > bestval
        best[better] = b[better]
        bestval[better] = val[better]
    return best


def _drop_close(new: np.ndarray, S: np.ndarray, room: float) -> np.ndarray:
    """Sorted ``new`` minus points within ``room`` of ``S`` or of each other."""
    if len(new) == 0:
        return new
    pos = np.clip(np.searchsorted(S, new), 1, len(S) - 1)
    dist = np.minimum(np.abs(new - S[pos - 1]), np.abs(new - S[pos]))
    new = new[dist > room]
    if len(new) > 1:
        keep = np.concatenate([[True], np.diff(new) > room])
        new = new[keep]
    return new


def _biconjugate_refined(u: ScalarField, slope_count: int, rtol: float, max_rounds: int) -> np.ndarray:
    grid = u.grid
    f = u.values if grid.dim == 2 else u.values[:, None]
    x1 = grid.axis(0)
    x2 = grid.axis(1) if grid.dim == 2 else np.zeros(1)
    dual = _Dual(x1, x2, f)
    S = _uniform_slopes(*_slope_range(f, grid.h, 0), slope_count)
    H, G = dual.evaluate(S)
    tol = rtol * max(u.scale, np.finfo(float).tiny) + 64 * np.finfo(float).eps * float(np.max(np.abs(f)))
    span = S[-1] - S[0]
    for _ in range(max_rounds):
        fresh = []
        for k in range(len(x2)):
            a = _argmax_samples(S, H[:, k], x1)
            o_a = S[a] * x1 + H[a, k]
            d_a = x1 + G[a, k]
            b = np.where(d_a > 0, a + 1, a - 1)
            ok = (b >= 0) & (b < len(S)) & (d_a != 0)
            if not np.any(ok):
                continue
            a, b, o_a, d_a, xi = a[ok], b[ok], o_a[ok], d_a[ok], x1[ok]
            o_b = S[b] * xi + H[b, k]
            d_b = xi + G[b, k]
            denom = d_a - d_b
            with np.errstate(divide="ignore", invalid="ignore"):
                s_c = (o_b - o_a + d_a * S[a] - d_b * S[b]) / denom
            lo = np.minimum(S[a], S[b])
            hi = np.maximum(S[a], S[b])
            s_c = np.clip(s_c, lo, hi)
            upper = o_a + d_a * (s_c - S[a])
            gap = upper - np.maximum(o_a, o_b)
            room = 1e-13 * span
            need = (np.abs(denom) > 0) & (gap > tol) & (s_c - lo > room) & (hi - s_c > room)
            fresh.append(s_c[need])
        new = np.unique(np.concatenate(fresh)) if fresh else np.empty(0)
        new = _drop_close(new, S, 1e-12 * span)
        if len(new) == 0:
            break
        Hn, Gn = dual.evaluate(new)
        S = np.concatenate([S, new])
        order = np.argsort(S, kind="stable")
        S, H, G = S[order], np.vstack([H, Hn])[order], np.vstack([G, Gn])[order]
    else:
        warnings.warn("biconjugate refinement hit the round limit; envelope may be loose", stacklevel=3)
    env = np.empty_like(f)
    for k in range(len(x2)):
        a = _argmax_samples(S, H[:, k], x1)
        env[:, k] = S[a] * x1 + H[a, k]
    return env if grid.dim == 2 else env[:, 0]


def biconjugate(
    u: ScalarField,
    slope_count: int | None = None,
    refine: bool = True,
    rtol: float = 1e-12,
    max_rounds: int = 200,
) -> EnvelopeResult:
    """Convex envelope as the Legendre-Fenchel biconjugate of the node data.

    Slopes are uniform between the extreme difference quotients along each
    axis.  In 2D the transform is factored, using
    ``max_x (s.x - f) = max_x1 (s1 x1 + max_x2 (s2 x2 - f))``.

    With ``refine=False`` both slope axes stay uniform with ``slope_count``
    points; the result then sits below the true envelope by roughly
    (slope spacing) x (facet width).  With ``refine=True`` (default) the
    inner pair of transforms along axis 2 is carried out exactly, and the
    outer slope grid is refined adaptively until every node is within
    ``rtol * scale`` of the supremum.
    """
    n = max(u.grid.n)
    if slope_count is None:
        slope_count = 4 * n
    if slope_count < n:
        warnings.warn(f"slope_count={slope_count} below grid size {n}: envelope may be loose", stacklevel=2)
    if refine:
        env = _biconjugate_refined(u, slope_count, rtol, max_rounds)
    else:
        env = _biconjugate_uniform(u, slope_count)
    return _result(u, env, "biconjugate")


def _caratheodory_1d(xs: np.ndarray, f: np.ndarray) -> np.ndarray:
    n = len(xs)
    env = f.copy()
    for k in range(1, n - 1):
        xi, fi = xs[:k, None], f[:k, None]
        xj, fj = xs[None, k + 1 :], f[None, k + 1 :]
        # base-plus-increment form is exact on constant data
        vals = fi + (fj - fi) * ((xs[k] - xi) / (xj - xi))
        env[k] = min(f[k], vals.min())
    return env


def _caratheodory_2d(points: np.ndarray, f: np.ndarray, chunk: int = 200_000) -> np.ndarray:
    N = len(points)
    env = f.copy()
    tri_iter = itertools.combinations(range(N), 3)
    while True:
        tri = np.fromiter(itertools.chain.from_iterable(itertools.islice(tri_iter, chunk)), dtype=int)
        if tri.size == 0:
            break
        tri = tri.reshape(-1, 3)
        A, B, C = points[tri[:, 0]], points[tri[:, 1]], points[tri[:, 2]]
        det = (B[:, 0] - A[:, 0]) * (C[:, 1] - A[:, 1]) - (C[:, 0] - A[:, 0]) * (B[:, 1] - A[:, 1])
        keep = np.abs(det) > 1e-12 * np.max(np.abs(det))
        tri, A, B, C, det = tri[keep], A[keep], B[keep], C[keep], det[keep]
        fa, fb, fc = f[tri[:, 0]], f[tri[:, 1]], f[tri[:, 2]]
        for k in range(N):
            x, y = points[k]
            lb = ((x - A[:, 0]) * (C[:, 1] - A[:, 1]) - (C[:, 0] - A[:, 0]) * (y - A[:, 1])) / det
            lc = ((B[:, 0] - A[:, 0]) * (y - A[:, 1]) - (x - A[:, 0]) * (B[:, 1] - A[:, 1])) / det
            la = 1.0 - lb - lc
            inside = (la >= -1e-12) & (lb >= -1e-12) & (lc >= -1e-12)
            if np.any(inside):
                val = (fa + lb * (fb - fa) + lc * (fc - fa))[inside].min()
                env[k] = min(env[k], val)
    return env


def caratheodory_bruteforce(u: ScalarField) -> EnvelopeResult:
    """Minimise ``sum_i l_i u(x_i)`` over node tuples whose hull contains ``x``.

    Cost grows like ``N^(dim+2)``; refuses grids above
    ``CARATHEODORY_MAX_NODES`` nodes.
    """
    if u.grid.size > CARATHEODORY_MAX_NODES:
        raise ValueError(
            f"caratheodory_bruteforce refuses {u.grid.size} nodes (limit {CARATHEODORY_MAX_NODES})"
        )
    if u.grid.dim == 1:
        env = _caratheodory_1d(u.grid.axis(0), u.values.copy())
    else:
        env = _caratheodory_2d(u.grid.points(), u.values.ravel().copy()).reshape(u.grid.shape)
    return _result(u, env, "caratheodory")


def reference_envelope(u: ScalarField) -> EnvelopeResult:
    """Envelope used by every diagnostic: exact hull in 1D, biconjugate in 2D."""
    if u.grid.dim == 1:
        return lower_hull_envelope_1d(u)
    return biconjugate(u, slope_count=4 * max(u.grid.n))


def convexity_defect(v: np.ndarray) -> float:
    """Most negative ``v(x-d) - 2 v(x) + v(x+d)`` over axis and diagonal lines."""
    if v.ndim == 1:
        return float(np.min(v[:-2] - 2 * v[1:-1] + v[2:]))
    worst = np.inf
    c = v[1:-1, 1:-1]
    for p in ((1, 0), (0, 1), (1, 1), (1, -1)):
        fwd = v[1 + p[0] : v.shape[0] - 1 + p[0], 1 + p[1] : v.shape[1] - 1 + p[1]]
        bwd = v[1 - p[0] : v.shape[0] - 1 - p[0], 1 - p[1] : v.shape[1] - 1 - p[1]]
        worst = min(worst, float(np.min(fwd - 2 * c + bwd)))
    return worst

