"""Box-constrained derivative-free search utilities.

Latin hypercube designs, a clipped Nelder-Mead simplex search and a
multistart wrapper on top of it. All randomness flows through an explicit
``numpy.random.Generator`` so results are reproducible under a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Objective = Callable[[np.ndarray], float]

# standard simplex coefficients: reflection, expansion, contraction, shrink
_ALPHA, _GAMMA, _RHO, _SIGMA = 1.0, 2.0, 0.5, 0.5
_DIAM_TOL = 1e-6


@dataclass(frozen=True)
class BoxBounds:
    """Axis-aligned box with lower[d] < upper[d] in every dimension."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        if lo.ndim != 1 or lo.shape != hi.shape:
            raise ValueError("bounds must be 1-d arrays of equal length")
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise ValueError("bounds must be finite")
        if not (lo < hi).all():
            raise ValueError("need lower < upper in every dimension")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def from_pairs(cls, pairs: Sequence[Sequence[float]]) -> "BoxBounds":
        arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1])

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x, atol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool((x >= self.lower - atol).all() and (x <= self.upper + atol).all())

    def clip(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def concat(self, other: "BoxBounds") -> "BoxBounds":
        return BoxBounds(
            np.concatenate([self.lower, other.lower]),
            np.concatenate([self.upper, other.upper]),
        )


def lhs_sample(n: int, bounds: BoxBounds, rng: np.random.Generator) -> np.ndarray:
    """Latin hypercube sample of ``n`` points inside ``bounds``.

    Per dimension each of the n equal-width bins receives exactly one
    point, uniformly placed within its bin; the bin-to-point pairing is an
    independent random permutation per dimension.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    pts = np.empty((n, bounds.dim), dtype=float)
    if n == 0:
        return pts
    for d in range(bounds.dim):
        bins = rng.permutation(n)
        offsets = rng.uniform(size=n)
        unit = (bins + offsets) / n
        pts[:, d] = bounds.lower[d] + unit * (bounds.upper[d] - bounds.lower[d])
    return pts


def _safe_eval(f: Objective, x: np.ndarray) -> float:
    val = f(x)
    val = float(val)
    if not np.isfinite(val):
        return -np.inf
    return val


def nelder_mead_max(
    f: Objective,
    bounds: BoxBounds,
    start,
    max_evals: int = 100,
) -> tuple[np.ndarray, float]:
    """Maximise ``f`` over ``bounds`` with a clipped Nelder-Mead simplex.

    Proposals outside the box are clipped onto it; non-finite objective
    values are treated as -inf. Returns the best point evaluated anywhere
    during the search (which is at least as good as the start point).
    """
    dim = bounds.dim
    x0 = bounds.clip(start)
    if not bounds.contains(start, atol=1e-12):
        raise ValueError("start point must lie within bounds")

    best_x = x0.copy()
    best_f = -np.inf
    evals = 0

    def ev(x: np.ndarray) -> float:
        nonlocal best_x, best_f, evals
        val = _safe_eval(f, x)
        evals += 1
        if val > best_f:
            best_f = val
            best_x = x.copy()
        return val

    # initial simplex: perturb each coordinate by 5% of the box width
    verts = [x0]
    step = 0.05 * bounds.width
    for d in range(dim):
        v = x0.copy()
        v[d] = x0[d] + step[d]
        if v[d] > bounds.upper[d]:
            v[d] = x0[d] - step[d]
        verts.append(bounds.clip(v))
    verts = np.asarray(verts)
    fvals = np.array([ev(v) for v in verts[: max(1, min(len(verts), max_evals))]])
    if fvals.size < len(verts):  # eval budget exhausted during setup
        return best_x, best_f

    while evals < max_evals:
        order = np.argsort(-fvals)
        verts, fvals = verts[order], fvals[order]

        spread = verts.max(axis=0) - verts.min(axis=0)
        if np.max(spread / bounds.width) < _DIAM_TOL:
            break

        centroid = verts[:-1].mean(axis=0)
        worst = verts[-1]

        xr = bounds.clip(centroid + _ALPHA * (centroid - worst))
        fr = ev(xr)
        if fr > fvals[0]:
            if evals >= max_evals:
                verts[-1], fvals[-1] = xr, fr
                break
            xe = bounds.clip(centroid + _GAMMA * (centroid - worst))
            fe = ev(xe)
            if fe > fr:
                verts[-1], fvals[-1] = xe, fe
            else:
                verts[-1], fvals[-1] = xr, fr
        elif fr > fvals[-2]:
            verts[-1], fvals[-1] = xr, fr
        else:
            if evals >= max_evals:
                break
            if fr > fvals[-1]:  # outside contraction
                xc = bounds.clip(centroid + _RHO * (centroid - worst))
            else:  # inside contraction
                xc = bounds.clip(centroid - _RHO * (centroid - worst))
            fc = ev(xc)
            if fc > min(fr, fvals[-1]):
                verts[-1], fvals[-1] = xc, fc
            else:  # shrink toward the best vertex
                for i in range(1, len(verts)):
                    if evals >= max_evals:
                        break
                    verts[i] = bounds.clip(verts[0] + _SIGMA * (verts[i] - verts[0]))
                    fvals[i] = ev(verts[i])

    return best_x, best_f


def _start_stream(n: int, bounds: BoxBounds, rng: np.random.Generator) -> list[np.ndarray]:
    # LHS drawn in doubling blocks (1, 2, 4, ...) so that the first k starts
    # are identical whenever n grows: adding restarts never changes or loses
    # earlier ones.
    pts: list[np.ndarray] = []
    block = 1
    while len(pts) < n:
        pts.extend(lhs_sample(block, bounds, rng))
        block *= 2
    return pts[:n]


def multistart_max(
    f: Objective,
    bounds: BoxBounds,
    n_starts: int,
    max_evals: int,
    rng: np.random.Generator,
    seeds: Sequence[np.ndarray] | None = None,
) -> tuple[np.ndarray, float]:
    """Best of ``n_starts`` Nelder-Mead runs plus runs from ``seeds``."""
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    starts = _start_stream(n_starts, bounds, rng)
    if seeds is not None:
        starts = starts + [bounds.clip(s) for s in seeds]
    best_x, best_f = None, -np.inf
    for s in starts:
        x, val = nelder_mead_max(f, bounds, s, max_evals=max_evals)
        if best_x is None or val > best_f:
            best_x, best_f = x, val
    return best_x, best_f
