"""Value computations driving the budgeted loop.

Predicted performance of a solution under parameter uncertainty, the
recommended solution, the analytic discrete knowledge-gradient core, the
value of one more simulation, and the value of one more external source
sample (Monte Carlo with importance weighting).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import ndtr

from .gp import (
    GpPosterior,
    JointPoint,
    posterior_mean,
    sigma_tilde,
)
from .optim import BoxBounds, lhs_sample, multistart_max
from .posterior import (
    ParameterPosterior,
    SourceDataset,
    SourceSpec,
    log_pdf,
    predictive_sample,
    sample_posterior,
    update_posterior,
)

_SLOPE_TIE_TOL = 1e-12
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class InnerOptConfig:
    """Multistart Nelder-Mead budget for the inner optimisations."""

    n_starts: int = 10
    max_evals: int = 100


@dataclass(frozen=True)
class DiscretizationSet:
    """Solution grid plus parameter samples from the current posterior."""

    x_grid: np.ndarray  # (n_x, D)
    a_samples: np.ndarray  # (N_A, J)

    def __post_init__(self):
        xg = np.atleast_2d(np.asarray(self.x_grid, dtype=float))
        asamp = np.atleast_2d(np.asarray(self.a_samples, dtype=float))
        if xg.shape[0] < 1 or asamp.shape[0] < 1:
            raise ValueError("discretization needs at least one grid point and one sample")
        object.__setattr__(self, "x_grid", xg)
        object.__setattr__(self, "a_samples", asamp)

    @property
    def n_x(self) -> int:
        return self.x_grid.shape[0]

    @property
    def n_a(self) -> int:
        return self.a_samples.shape[0]


@dataclass(frozen=True)
class VoiEstimate:
    """Value of information per unit cost, with Monte Carlo standard error."""

    value: float
    std_err: float
    payload: object = None


def make_discretization(
    post: ParameterPosterior,
    x_bounds: BoxBounds,
    n_x: int,
    n_a: int,
    rng: np.random.Generator,
) -> DiscretizationSet:
    """LHS solution grid and fresh posterior parameter samples."""
    return DiscretizationSet(lhs_sample(n_x, x_bounds, rng), sample_posterior(post, n_a, rng))


def _joint_rows(xs: np.ndarray, a_samples: np.ndarray) -> np.ndarray:
    # x-major layout: all parameter samples for xs[0], then xs[1], ...
    n_x, n_a = xs.shape[0], a_samples.shape[0]
    return np.concatenate(
        [np.repeat(xs, n_a, axis=0), np.tile(a_samples, (n_x, 1))], axis=1
    )


def grid_means(g: GpPosterior, disc: DiscretizationSet) -> np.ndarray:
    """Posterior means mu(x_i, a_j) on the grid, shape (n_x, N_A)."""
    rows = _joint_rows(disc.x_grid, disc.a_samples)
    return np.asarray(posterior_mean(g, rows)).reshape(disc.n_x, disc.n_a)


def predicted_performance(x, g: GpPosterior, disc: DiscretizationSet) -> float:
    """Monte Carlo estimate of the expected true quality of solution ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    rows = _joint_rows(x[None, :], disc.a_samples)
    return float(np.asarray(posterior_mean(g, rows)).mean())


def kg_discrete(means, slopes) -> float:
    """E_Z[max_i (means_i + slopes_i Z)] - max_i means_i for Z ~ N(0, 1).

    Evaluated exactly by the epigraph sweep: sort lines by slope, drop
    dominated ones, and accumulate Gaussian cdf/pdf terms between the
    breakpoints of the upper envelope. Nonnegative by construction.
    """
    a = np.atleast_1d(np.asarray(means, dtype=float))
    b = np.atleast_1d(np.asarray(slopes, dtype=float))
    if a.size == 0 or a.shape != b.shape:
        raise ValueError("means and slopes must be equal-length nonempty vectors")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("means and slopes must be finite")
    m0 = float(a.max())

    order = np.lexsort((a, b))
    a, b = a[order], b[order]
    # slope ties (within tolerance) keep only the largest intercept
    keep = np.empty(a.size, dtype=bool)
    keep[:-1] = np.diff(b) > _SLOPE_TIE_TOL
    keep[-1] = True
    a, b = a[keep], b[keep]
    al = a.tolist()
    bl = b.tolist()

    sel: list[int] = [0]
    breaks: list[float] = [-np.inf]
    for i in range(1, len(al)):
        ai, bi = al[i], bl[i]
        while sel:
            j = sel[-1]
            z_new = (al[j] - ai) / (bi - bl[j])
            if z_new <= breaks[-1]:
                sel.pop()
                breaks.pop()
            else:
                sel.append(i)
                breaks.append(z_new)
                break
        if not sel:
            sel.append(i)
            breaks.append(-np.inf)

    zs = np.asarray(breaks[1:] + [np.inf])
    lo = np.asarray(breaks)
    idx = np.asarray(sel)
    cdf_hi, cdf_lo = ndtr(zs), ndtr(lo)
    with np.errstate(over="ignore"):
        pdf_hi = np.where(np.isfinite(zs), np.exp(-0.5 * zs * zs) * _INV_SQRT_2PI, 0.0)
        pdf_lo = np.where(np.isfinite(lo), np.exp(-0.5 * lo * lo) * _INV_SQRT_2PI, 0.0)
    emax = float(np.sum(a[idx] * (cdf_hi - cdf_lo) + b[idx] * (pdf_lo - pdf_hi)))
    return max(0.0, emax - m0)


def voi_simulation(
    next_point: JointPoint,
    g: GpPosterior,
    post: ParameterPosterior,
    disc: DiscretizationSet,
    c_f: float,
    means: np.ndarray | None = None,
) -> VoiEstimate:
    """Expected one-step gain in best predicted performance per unit cost.

    The grid is the discretization's solution grid plus the fantasised
    solution coordinate of ``next_point``; slopes are parameter-posterior
    averages of the one-step update coefficient.
    """
    if c_f <= 0:
        raise ValueError("c_f must be positive")
    xs = np.vstack([disc.x_grid, next_point.x[None, :]])
    if means is not None:
        fant = _joint_rows(next_point.x[None, :], disc.a_samples)
        mean_vec = np.append(
            means.mean(axis=1), float(np.asarray(posterior_mean(g, fant)).mean())
        )
        rows = _joint_rows(xs, disc.a_samples)
    else:
        rows = _joint_rows(xs, disc.a_samples)
        mean_vec = np.asarray(posterior_mean(g, rows)).reshape(xs.shape[0], disc.n_a).mean(axis=1)
    slope_vec = (
        np.asarray(sigma_tilde(g, rows, next_point)).reshape(xs.shape[0], disc.n_a).mean(axis=1)
    )
    return VoiEstimate(kg_discrete(mean_vec, slope_vec) / c_f, 0.0, next_point)


class _FastSimVoi:
    """Separable-kernel evaluator for the simulation VoI surface.

    Exploits the product structure of the squared-exponential kernel over
    the solution and parameter blocks so that one candidate costs O(n_x n)
    instead of O(n_x N_A n). Agrees with ``voi_simulation`` to floating
    point roundoff; the returned optimum is re-scored through the public
    path by the caller.
    """

    def __init__(self, g: GpPosterior, disc: DiscretizationSet, c_f: float):
        self.g = g
        self.c_f = c_f
        self.d_sol = disc.x_grid.shape[1]
        h = g.hyper
        dim = g.dataset.joint_dim
        ls = h.lengthscales(dim)
        self.inv_l2_x = 1.0 / (ls[: self.d_sol] ** 2)
        self.inv_l2_a = 1.0 / (ls[self.d_sol :] ** 2)
        self.gx = disc.x_grid
        self.ga = disc.a_samples
        self.sigma0_sq = h.sigma0_sq
        self.noise_sq = h.noise_sq
        if g.n:
            self.tx = g.x_train[:, : self.d_sol]
            self.ta = g.x_train[:, self.d_sol :]
            ex = np.exp(-0.5 * _sqd(self.gx, self.tx, self.inv_l2_x))  # (n_x, n)
            ea = np.exp(-0.5 * _sqd(self.ga, self.ta, self.inv_l2_a))  # (N_A, n)
            self.ea_mean = ea.mean(axis=0)
            self.bmat = h.sigma0_sq * ex * self.ea_mean[None, :]
            self.base_means = g.mean_offset + self.bmat @ g.weights
        else:
            self.base_means = np.full(disc.n_x, g.mean_offset)

    def value(self, joint: np.ndarray) -> float:
        g = self.g
        nx, na = joint[: self.d_sol], joint[self.d_sol :]
        exn_tx = np.exp(-0.5 * _sqd(nx[None, :], self.tx, self.inv_l2_x)[0]) if g.n else None
        exn_x = np.exp(-0.5 * _sqd(self.gx, nx[None, :], self.inv_l2_x)[:, 0])
        mean_ea = float(
            np.exp(-0.5 * _sqd(self.ga, na[None, :], self.inv_l2_a)[:, 0]).mean()
        )
        n_x = self.gx.shape[0]
        means = np.empty(n_x + 1)
        slopes = np.empty(n_x + 1)
        means[:n_x] = self.base_means
        if g.n:
            exn_ta = np.exp(-0.5 * _sqd(na[None, :], self.ta, self.inv_l2_a)[0])
            kxn = self.sigma0_sq * exn_tx * exn_ta
            half = solve_triangular(g.chol, kxn, lower=True, check_finite=False)
            var_next = max(self.sigma0_sq - float(half @ half), 0.0)
            denom_sq = var_next + self.noise_sq
            if denom_sq <= 1e-12 * (self.sigma0_sq + self.noise_sq):
                return 0.0
            denom = np.sqrt(denom_sq)
            alpha = solve_triangular(g.chol, half, trans="T", lower=True, check_finite=False)
            slopes[:n_x] = (self.sigma0_sq * exn_x * mean_ea - self.bmat @ alpha) / denom
            bx = self.sigma0_sq * exn_tx * self.ea_mean
            means[n_x] = g.mean_offset + bx @ g.weights
            slopes[n_x] = (self.sigma0_sq * mean_ea - bx @ alpha) / denom
        else:
            denom = np.sqrt(self.sigma0_sq + self.noise_sq)
            slopes[:n_x] = self.sigma0_sq * exn_x * mean_ea / denom
            means[n_x] = g.mean_offset
            slopes[n_x] = self.sigma0_sq * mean_ea / denom
        return kg_discrete(means, slopes) / self.c_f


def _sqd(p: np.ndarray, q: np.ndarray, inv_l2: np.ndarray) -> np.ndarray:
    out = np.zeros((p.shape[0], q.shape[0]))
    for k in range(p.shape[1]):
        diff = p[:, k, None] - q[None, :, k]
        out += (diff * diff) * inv_l2[k]
    return out


def max_voi_simulation(
    g: GpPosterior,
    post: ParameterPosterior,
    disc: DiscretizationSet,
    bounds: BoxBounds,
    inner_opt: InnerOptConfig,
    c_f: float,
    rng: np.random.Generator,
    means: np.ndarray | None = None,
) -> VoiEstimate:
    """Maximise the simulation VoI over the joint solution-parameter box."""
    fast = _FastSimVoi(g, disc, c_f)
    best, _ = multistart_max(
        fast.value, bounds, inner_opt.n_starts, inner_opt.max_evals, rng
    )
    point = JointPoint(best[: fast.d_sol], best[fast.d_sol :])
    exact = voi_simulation(point, g, post, disc, c_f, means=means)
    return VoiEstimate(exact.value, 0.0, point)


def voi_source(
    spec: SourceSpec,
    g: GpPosterior,
    post: ParameterPosterior,
    data: SourceDataset,
    specs: Sequence[SourceSpec],
    disc: DiscretizationSet,
    n_draws: int,
    rng: np.random.Generator,
    means: np.ndarray | None = None,
) -> VoiEstimate:
    """Monte Carlo value of one more sample from ``spec`` per unit cost.

    Each predictive draw forms the hypothetical one-sample posterior and
    reweights the frozen parameter samples by the exact density ratio; the
    draw's gain is the reweighted predicted performance at the new best
    grid solution minus at the incumbent, so draws that do not move the
    recommendation contribute exactly zero.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    mat = grid_means(g, disc) if means is None else means
    g_old_vec = mat.mean(axis=1)
    ix_old = int(np.argmax(g_old_vec))
    lp_old = np.asarray(log_pdf(post, disc.a_samples))
    deltas = []
    skipped = 0
    for _ in range(n_draws):
        delta = None
        for _attempt in range(2):
            r = predictive_sample(spec, post, rng)
            hyp = update_posterior(specs, data.with_sample(spec.id, r), post.box)
            w = np.exp(np.asarray(log_pdf(hyp, disc.a_samples)) - lp_old)
            if not np.isfinite(w).all() or float(w.max()) <= 0.0:
                continue
            g_new_vec = (mat * w).mean(axis=1)
            ix_new = int(np.argmax(g_new_vec))
            delta = float(g_new_vec[ix_new] - g_new_vec[ix_old])
            break
        if delta is None:
            skipped += 1
        else:
            deltas.append(delta)
    if not deltas:
        return VoiEstimate(0.0, 0.0, spec.id)
    arr = np.asarray(deltas)
    value = float(arr.mean()) / spec.cost
    se = float(arr.std(ddof=1) / np.sqrt(arr.size)) / spec.cost if arr.size > 1 else 0.0
    return VoiEstimate(value, se, spec.id)


class _FastPredicted:
    """Separable-kernel evaluator of predicted performance over solutions."""

    def __init__(self, g: GpPosterior, disc: DiscretizationSet):
        self.g = g
        self.d_sol = disc.x_grid.shape[1]
        if g.n:
            h = g.hyper
            ls = h.lengthscales(g.dataset.joint_dim)
            self.inv_l2_x = 1.0 / (ls[: self.d_sol] ** 2)
            inv_l2_a = 1.0 / (ls[self.d_sol :] ** 2)
            self.tx = g.x_train[:, : self.d_sol]
            ea = np.exp(-0.5 * _sqd(disc.a_samples, g.x_train[:, self.d_sol :], inv_l2_a))
            self.v = h.sigma0_sq * ea.mean(axis=0) * g.weights

    def __call__(self, x: np.ndarray) -> float:
        if self.g.n == 0:
            return self.g.mean_offset
        ex = np.exp(-0.5 * _sqd(x[None, :], self.tx, self.inv_l2_x)[0])
        return float(self.g.mean_offset + ex @ self.v)


def recommend(
    g: GpPosterior,
    post: ParameterPosterior,
    disc: DiscretizationSet,
    x_bounds: BoxBounds,
    inner_opt: InnerOptConfig,
    rng: np.random.Generator,
    means: np.ndarray | None = None,
) -> np.ndarray:
    """Solution maximising predicted performance, polished from the grid."""
    mat = grid_means(g, disc) if means is None else means
    seed = disc.x_grid[int(np.argmax(mat.mean(axis=1)))]
    fast = _FastPredicted(g, disc)
    best, _ = multistart_max(
        fast, x_bounds, inner_opt.n_starts, inner_opt.max_evals, rng, seeds=[seed]
    )
    return best
