"""Bayesian belief over the true simulator parameters.

Uniform box prior, Gaussian source likelihoods with known noise, exact
truncated-Gaussian posteriors per dimension, posterior-predictive draws
for future source samples, and importance weights between successive
posteriors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

from .optim import BoxBounds

_LOG_SQRT_2PI = 0.5 * float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class SourceSpec:
    """An external data source informing one parameter coordinate."""

    id: int
    target_dim: int
    obs_noise_sq: float
    cost: float = 1.0

    def __post_init__(self):
        if self.target_dim < 0:
            raise ValueError("target_dim must be a valid parameter index")
        if not np.isfinite(self.obs_noise_sq) or self.obs_noise_sq <= 0:
            raise ValueError("obs_noise_sq must be positive and finite")
        if not np.isfinite(self.cost) or self.cost <= 0:
            raise ValueError("cost must be positive and finite")


class SourceDataset:
    """Ordered list of (source id, observed value) pairs."""

    def __init__(self, samples: Sequence[tuple[int, float]] | None = None):
        self._samples: list[tuple[int, float]] = [
            (int(s), float(r)) for s, r in (samples or [])
        ]

    def append(self, source_id: int, r: float) -> None:
        if not np.isfinite(r):
            raise ValueError("observation must be finite")
        self._samples.append((int(source_id), float(r)))

    def with_sample(self, source_id: int, r: float) -> "SourceDataset":
        out = SourceDataset(self._samples)
        out.append(source_id, r)
        return out

    @property
    def samples(self) -> list[tuple[int, float]]:
        return list(self._samples)

    def __len__(self) -> int:
        return len(self._samples)

    def count_for(self, source_id: int) -> int:
        return sum(1 for s, _ in self._samples if s == source_id)


@dataclass(frozen=True)
class DimensionBelief:
    """Belief over one coordinate: uniform on [lo, hi] or truncated Gaussian."""

    lo: float
    hi: float
    mean: float | None = None  # None => uniform over [lo, hi]
    var: float | None = None

    @property
    def is_uniform(self) -> bool:
        return self.mean is None


def _trunc_log_norm(mean: float, sd: float, lo: float, hi: float) -> float:
    """log( Phi((hi-mean)/sd) - Phi((lo-mean)/sd) ), tail-safe."""
    alpha = (lo - mean) / sd
    beta = (hi - mean) / sd
    if mean > 0.5 * (lo + hi):
        # reflect so both CDF arguments sit in the accurate left tail
        alpha, beta = -beta, -alpha
    la, lb = log_ndtr(alpha), log_ndtr(beta)
    with np.errstate(divide="ignore"):
        return float(lb + np.log1p(-np.exp(la - lb)))


def _trunc_log_pdf(x: np.ndarray, mean: float, sd: float, lo: float, hi: float) -> np.ndarray:
    z = (x - mean) / sd
    logp = -0.5 * z * z - np.log(sd) - _LOG_SQRT_2PI - _trunc_log_norm(mean, sd, lo, hi)
    return np.where((x >= lo) & (x <= hi), logp, -np.inf)


def _trunc_sample(mean: float, sd: float, lo: float, hi: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling on the truncated interval (no rejection)."""
    u = rng.uniform(size=n)
    flip = mean > 0.5 * (lo + hi)
    if flip:
        alpha, beta = (mean - hi) / sd, (mean - lo) / sd
    else:
        alpha, beta = (lo - mean) / sd, (hi - mean) / sd
    ca, cb = ndtr(alpha), ndtr(beta)
    z = ndtri(np.clip(ca + u * (cb - ca), 1e-300, 1.0 - 1e-16))
    vals = mean - sd * z if flip else mean + sd * z
    return np.clip(vals, lo, hi)


@dataclass(frozen=True)
class ParameterPosterior:
    """Independent per-dimension belief over the true parameter vector."""

    box: BoxBounds
    dims: tuple[DimensionBelief, ...] = field(default=())

    def __post_init__(self):
        if len(self.dims) != self.box.dim:
            raise ValueError("one belief per box dimension required")

    @classmethod
    def uniform(cls, box: BoxBounds) -> "ParameterPosterior":
        dims = tuple(DimensionBelief(lo, hi) for lo, hi in zip(box.lower, box.upper))
        return cls(box, dims)

    @property
    def dim(self) -> int:
        return self.box.dim

    def interval_mass(self, dim: int, lo: float, hi: float) -> float:
        """Posterior probability that coordinate ``dim`` lies in [lo, hi]."""
        d = self.dims[dim]
        lo, hi = max(lo, d.lo), min(hi, d.hi)
        if hi <= lo:
            return 0.0
        if d.is_uniform:
            return (hi - lo) / (d.hi - d.lo)
        sd = float(np.sqrt(d.var))
        num = _trunc_log_norm(d.mean, sd, lo, hi)
        den = _trunc_log_norm(d.mean, sd, d.lo, d.hi)
        return float(np.exp(num - den))


def update_posterior(
    specs: Sequence[SourceSpec], data: SourceDataset, box: BoxBounds
) -> ParameterPosterior:
    """Exact posterior under the uniform box prior and Gaussian likelihoods.

    A dimension with observations r_1..r_m of noise sigma_s^2 becomes a
    truncated Gaussian with pre-truncation mean rbar and variance
    sigma_s^2 / m (precision-weighted when sources of different noise
    inform the same dimension); dimensions without data stay uniform.
    """
    by_id = {s.id: s for s in specs}
    if len(by_id) != len(specs):
        raise ValueError("duplicate source ids")
    for s in specs:
        if s.target_dim >= box.dim:
            raise ValueError(f"source {s.id} targets dimension {s.target_dim} outside the box")
    prec = np.zeros(box.dim)
    prec_mean = np.zeros(box.dim)
    for sid, r in data.samples:
        spec = by_id.get(sid)
        if spec is None:
            raise ValueError(f"observation from undeclared source {sid}")
        prec[spec.target_dim] += 1.0 / spec.obs_noise_sq
        prec_mean[spec.target_dim] += r / spec.obs_noise_sq
    dims = []
    for j in range(box.dim):
        lo, hi = float(box.lower[j]), float(box.upper[j])
        if prec[j] == 0.0:
            dims.append(DimensionBelief(lo, hi))
        else:
            dims.append(DimensionBelief(lo, hi, prec_mean[j] / prec[j], 1.0 / prec[j]))
    return ParameterPosterior(box, tuple(dims))


def log_pdf(post: ParameterPosterior, a) -> float | np.ndarray:
    """Log posterior density at one parameter vector or a batch of rows."""
    arr = np.asarray(a, dtype=float)
    single = arr.ndim == 1
    rows = arr[None, :] if single else arr
    if rows.shape[1] != post.dim:
        raise ValueError("parameter dimension mismatch")
    total = np.zeros(rows.shape[0])
    for j, d in enumerate(post.dims):
        col = rows[:, j]
        if d.is_uniform:
            contrib = np.where(
                (col >= d.lo) & (col <= d.hi), -np.log(d.hi - d.lo), -np.inf
            )
        else:
            contrib = _trunc_log_pdf(col, d.mean, float(np.sqrt(d.var)), d.lo, d.hi)
        total = total + contrib
    return float(total[0]) if single else total


def sample_posterior(post: ParameterPosterior, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. draws from the posterior, shape (n, J)."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    out = np.empty((n, post.dim))
    for j, d in enumerate(post.dims):
        if d.is_uniform:
            out[:, j] = rng.uniform(d.lo, d.hi, size=n)
        else:
            out[:, j] = _trunc_sample(d.mean, float(np.sqrt(d.var)), d.lo, d.hi, n, rng)
    return out


def predictive_sample(spec: SourceSpec, post: ParameterPosterior, rng: np.random.Generator) -> float:
    """One draw from the predictive density of the next source observation."""
    a_j = sample_posterior(post, 1, rng)[0, spec.target_dim]
    return float(a_j + np.sqrt(spec.obs_noise_sq) * rng.standard_normal())


def importance_weight(
    a,
    d_old: SourceDataset,
    d_new: SourceDataset,
    specs: Sequence[SourceSpec],
    box: BoxBounds,
) -> float | np.ndarray:
    """Density ratio pdf(a | d_new) / pdf(a | d_old) with exact normalisers."""
    extends = len(d_new) == len(d_old) + 1 and d_new.samples[: len(d_old)] == d_old.samples
    if not extends and d_new.samples != d_old.samples:
        raise ValueError("d_new must equal d_old or extend it by exactly one sample")
    post_old = update_posterior(specs, d_old, box)
    post_new = update_posterior(specs, d_new, box)
    lp_old = log_pdf(post_old, a)
    lp_new = log_pdf(post_new, a)
    if np.any(np.isneginf(np.atleast_1d(lp_old))):
        raise ValueError("a has zero density under the old posterior")
    return np.exp(lp_new - lp_old)
