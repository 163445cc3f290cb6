"""Deterministic, splittable random streams and the sampling distributions the samplers need.

Streams are backed by PCG64 keyed through ``numpy.random.SeedSequence``, so a
(master_seed, stream_id) pair always yields the same sequence regardless of
platform, process, or thread schedule, and distinct stream ids give
statistically independent generators. One replication or chain owns one
stream; nothing is ever shared concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import special


class InvalidParameterError(ValueError):
    """A distribution parameter is outside its valid range."""


@dataclass
class RngStream:
    """A single-owner random stream identified by (master_seed, key path)."""

    generator: np.random.Generator
    master_seed: int
    key: tuple[int, ...]

    @property
    def stream_id(self) -> int:
        return self.key[0] if self.key else 0

    def uniform(self, size=None):
        return self.generator.random(size)


def derive_stream(master_seed: int, stream_id: int) -> RngStream:
    """Derive the independent, reproducible stream `stream_id` from a master seed."""
    if master_seed < 0:
        raise InvalidParameterError(f"master_seed must be >= 0 (got {master_seed})")
    if stream_id < 0:
        raise InvalidParameterError(f"stream_id must be >= 0 (got {stream_id})")
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(stream_id,))
    return RngStream(np.random.Generator(np.random.PCG64(seq)), master_seed, (stream_id,))


def substream(stream: RngStream, index: int) -> RngStream:
    """Derive a child stream; children of distinct (parent, index) pairs are independent."""
    if index < 0:
        raise InvalidParameterError(f"index must be >= 0 (got {index})")
    key = stream.key + (index,)
    seq = np.random.SeedSequence(entropy=stream.master_seed, spawn_key=key)
    return RngStream(np.random.Generator(np.random.PCG64(seq)), stream.master_seed, key)


# --------------------------------------------------------------------------
# Distribution specs


@dataclass(frozen=True)
class Exponential:
    rate: float

    def validate(self):
        if not self.rate > 0:
            raise InvalidParameterError(f"rate must be > 0 (got {self.rate})")


@dataclass(frozen=True)
class Normal:
    mu: float
    sigma: float

    def validate(self):
        if not self.sigma > 0:
            raise InvalidParameterError(f"sigma must be > 0 (got {self.sigma})")


@dataclass(frozen=True)
class TruncatedNormal:
    """Normal(mu, sigma) truncated to the positive or negative half-line."""

    mu: float
    sigma: float
    side: str = "positive"

    def validate(self):
        if not self.sigma > 0:
            raise InvalidParameterError(f"sigma must be > 0 (got {self.sigma})")
        if self.side not in ("positive", "negative"):
            raise InvalidParameterError(f"side must be 'positive' or 'negative' (got {self.side!r})")


@dataclass(frozen=True)
class Bernoulli:
    p: float

    def validate(self):
        if not 0.0 <= self.p <= 1.0:
            raise InvalidParameterError(f"p must be in [0, 1] (got {self.p})")


@dataclass(frozen=True)
class Categorical:
    weights: tuple

    def validate(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise InvalidParameterError("weights must be a nonempty vector")
        if np.any(w < 0):
            raise InvalidParameterError(f"weights must be nonnegative (got {self.weights})")
        if not w.sum() > 0:
            raise InvalidParameterError("weights must not all be zero")


@dataclass(frozen=True)
class Dirichlet:
    alpha: tuple

    def validate(self):
        a = np.asarray(self.alpha, dtype=float)
        if a.ndim != 1 or a.size == 0:
            raise InvalidParameterError("alpha must be a nonempty vector")
        if np.any(a <= 0):
            raise InvalidParameterError(f"alpha entries must be > 0 (got {self.alpha})")


@dataclass(frozen=True)
class ScaledInvChiSq:
    """Scaled inverse chi-square: df * scale / X ~ chi^2(df)."""

    df: float
    scale: float

    def validate(self):
        if not self.df > 0:
            raise InvalidParameterError(f"df must be > 0 (got {self.df})")
        if not self.scale > 0:
            raise InvalidParameterError(f"scale must be > 0 (got {self.scale})")


@dataclass(frozen=True)
class Uniform:
    a: float
    b: float

    def validate(self):
        if not self.a < self.b:
            raise InvalidParameterError(f"a must be < b (got a={self.a}, b={self.b})")


DistributionSpec = Union[
    Exponential, Normal, TruncatedNormal, Bernoulli, Categorical, Dirichlet, ScaledInvChiSq, Uniform
]


def sample(rng: RngStream, dist: DistributionSpec, size: Optional[int] = None):
    """Draw exactly from `dist`. Scalar draws for size=None, else a vector (matrix for Dirichlet)."""
    dist.validate()
    g = rng.generator
    if isinstance(dist, Exponential):
        return g.exponential(1.0 / dist.rate, size)
    if isinstance(dist, Normal):
        return g.normal(dist.mu, dist.sigma, size)
    if isinstance(dist, TruncatedNormal):
        n = 1 if size is None else size
        mu = np.full(n, float(dist.mu))
        out = truncated_normal_vector(g, mu, dist.sigma, positive=(dist.side == "positive"))
        return float(out[0]) if size is None else out
    if isinstance(dist, Bernoulli):
        if size is None:
            return int(g.random() < dist.p)
        return (g.random(size) < dist.p).astype(np.int64)
    if isinstance(dist, Categorical):
        w = np.asarray(dist.weights, dtype=float)
        cum = np.cumsum(w)
        u = g.random(size) * cum[-1]
        idx = np.searchsorted(cum, u, side="right")
        return int(idx) if size is None else idx.astype(np.int64)
    if isinstance(dist, Dirichlet):
        a = np.asarray(dist.alpha, dtype=float)
        if size is None:
            gm = g.standard_gamma(a)
            return gm / gm.sum()
        gm = g.standard_gamma(np.broadcast_to(a, (size, a.size)))
        return gm / gm.sum(axis=1, keepdims=True)
    if isinstance(dist, ScaledInvChiSq):
        c = g.chisquare(dist.df, size)
        return dist.df * dist.scale / c
    if isinstance(dist, Uniform):
        return g.uniform(dist.a, dist.b, size)
    raise TypeError(f"unknown distribution spec: {dist!r}")


# --------------------------------------------------------------------------
# Truncated-normal internals
#
# Inverse-CDF when the standardized truncation point is <= _TAIL_SWITCH,
# exponential rejection (Robert 1995) deeper in the tail, where the inverse
# CDF loses precision.

_TAIL_SWITCH = 4.0


def _std_normal_above(g: np.random.Generator, a: np.ndarray) -> np.ndarray:
    """Draw Z ~ N(0,1) conditional on Z > a, elementwise over `a`."""
    out = np.empty_like(a, dtype=float)
    easy = a <= _TAIL_SWITCH
    if easy.any():
        ae = a[easy]
        # map u ~ U(0,1) through the upper-tail mass P(Z > a) = ndtr(-a);
        # evaluating ndtri near 0 keeps the tail accurate
        u = g.random(ae.size)
        out[easy] = -special.ndtri(u * special.ndtr(-ae))
    hard = ~easy
    if hard.any():
        ah = a[hard]
        res = np.empty_like(ah)
        pending = np.ones(ah.size, dtype=bool)
        while pending.any():
            ap = ah[pending]
            alpha = 0.5 * (ap + np.sqrt(ap * ap + 4.0))
            z = ap + g.exponential(1.0, ap.size) / alpha
            accept = g.random(ap.size) < np.exp(-0.5 * (z - alpha) ** 2)
            idx = np.flatnonzero(pending)[accept]
            res[idx] = z[accept]
            pending[idx] = False
        out[hard] = res
    return out


def truncated_normal_vector(
    g: np.random.Generator, mu: np.ndarray, sigma: float, positive
) -> np.ndarray:
    """Vector of draws from N(mu_i, sigma^2) truncated to (0, inf) or (-inf, 0).

    `positive` is a bool or bool vector selecting the half-line per element.
    """
    mu = np.asarray(mu, dtype=float)
    pos = np.broadcast_to(np.asarray(positive, dtype=bool), mu.shape)
    # reflect negative-side draws onto the positive-side sampler
    sign = np.where(pos, 1.0, -1.0)
    a = -sign * mu / sigma
    z = _std_normal_above(g, a)
    return sign * (sign * mu + sigma * z)


def kolmogorov_smirnov_distance(draws: np.ndarray, cdf) -> float:
    """Sup distance between the empirical CDF of `draws` and `cdf` (test helper)."""
    x = np.sort(np.asarray(draws, dtype=float))
    n = x.size
    c = cdf(x)
    hi = np.max(np.arange(1, n + 1) / n - c)
    lo = np.max(c - np.arange(0, n) / n)
    return float(max(hi, lo))
