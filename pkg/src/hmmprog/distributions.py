"""Shared exponential-family components for tied-mixture emissions.

A component is a product of independent univariate densities, one per sensor
channel. Each channel has its own family. Missing channels contribute nothing
to the log-density (they are marginalised out).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln, polygamma

from .errors import InvalidInputError, StarvedComponentError

LOG_2PI = math.log(2.0 * math.pi)
STARVED_WEIGHT = 1e-8
DEFAULT_VARIANCE_FLOOR = 1e-6


class Family(str, enum.Enum):
    GAUSSIAN = "gaussian"
    GAMMA = "gamma"
    POISSON = "poisson"
    EXPONENTIAL = "exponential"

    @property
    def n_params(self) -> int:
        return 2 if self in (Family.GAUSSIAN, Family.GAMMA) else 1


def _as_families(families) -> tuple[Family, ...]:
    return tuple(Family(f) for f in families)


@dataclass(frozen=True)
class ComponentParams:
    """Parameters of one shared component.

    ``params[d]`` is ``(mean, variance)`` for Gaussian channels,
    ``(shape, rate)`` for Gamma and ``(rate,)`` for Poisson and Exponential.
    """

    families: tuple[Family, ...]
    params: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        families = _as_families(self.families)
        params = tuple(tuple(float(v) for v in p) for p in self.params)
        if len(families) != len(params):
            raise InvalidInputError(
                f"{len(families)} families but {len(params)} parameter tuples"
            )
        for d, (fam, p) in enumerate(zip(families, params)):
            if len(p) != fam.n_params:
                raise InvalidInputError(
                    f"dimension {d}: {fam.value} takes {fam.n_params} parameters, got {len(p)}"
                )
            if fam is Family.GAUSSIAN:
                ok = math.isfinite(p[0]) and p[1] > 0 and math.isfinite(p[1])
            else:
                ok = all(v > 0 and math.isfinite(v) for v in p)
            if not ok:
                raise InvalidInputError(f"dimension {d}: invalid {fam.value} parameters {p}")
        object.__setattr__(self, "families", families)
        object.__setattr__(self, "params", params)

    @property
    def dim(self) -> int:
        return len(self.families)

    @classmethod
    def gaussian(cls, means, variances) -> "ComponentParams":
        means = np.atleast_1d(means)
        variances = np.broadcast_to(variances, means.shape)
        return cls(
            (Family.GAUSSIAN,) * len(means),
            tuple((m, v) for m, v in zip(means, variances)),
        )


def _check_observed(families, x, mask):
    x = np.asarray(x, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if x.shape[-1] != len(families) or mask.shape != x.shape:
        raise InvalidInputError(
            f"observation has shape {x.shape} (mask {mask.shape}); expected {len(families)} channels"
        )
    if not np.all(np.isfinite(x[mask])):
        raise InvalidInputError("non-finite value in an observed position")
    return x, mask


def _channel_logpdf(fam: Family, p, x):
    # x may hold junk where unobserved; callers zero those entries out
    with np.errstate(divide="ignore", invalid="ignore"):
        if fam is Family.GAUSSIAN:
            mean, var = p
            return -0.5 * (LOG_2PI + math.log(var) + (x - mean) ** 2 / var)
        if fam is Family.GAMMA:
            shape, rate = p
            out = shape * math.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x
            return np.where(x > 0, out, -np.inf)
        if fam is Family.POISSON:
            (rate,) = p
            out = x * math.log(rate) - rate - gammaln(x + 1.0)
            return np.where(x >= 0, out, -np.inf)
        (rate,) = p
        return np.where(x >= 0, math.log(rate) - rate * x, -np.inf)


def _check_poisson(families, x, mask):
    for d, fam in enumerate(families):
        if fam is Family.POISSON:
            col = x[..., d][mask[..., d]]
            if np.any(col != np.round(col)):
                raise InvalidInputError(f"dimension {d}: Poisson observation is not an integer")


def log_pdf(c: ComponentParams, x, mask=None) -> float:
    """Log-density of one sensor vector, summed over observed channels only.

    A fully masked vector has log-density 0.
    """
    x = np.asarray(x, dtype=float)
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    return float(log_pdf_rows(c, x[None, :], np.asarray(mask, dtype=bool)[None, :])[0])


def log_pdf_rows(c: ComponentParams, X, M) -> np.ndarray:
    """Vectorised :func:`log_pdf` over the rows of ``X`` (shape ``(T, D)``)."""
    X, M = _check_observed(c.families, X, M)
    _check_poisson(c.families, X, M)
    total = np.zeros(X.shape[0])
    for d, (fam, p) in enumerate(zip(c.families, c.params)):
        col = np.where(M[:, d], X[:, d], 1.0)
        total += np.where(M[:, d], _channel_logpdf(fam, p, col), 0.0)
    return total


def component_loglik(components, X, M) -> np.ndarray:
    """``(T, K)`` matrix of per-component log-densities."""
    if not components:
        raise InvalidInputError("no components")
    X, M = _check_observed(components[0].families, X, M)
    _check_poisson(components[0].families, X, M)
    out = np.empty((X.shape[0], len(components)))
    for k, c in enumerate(components):
        if c.families != components[0].families:
            raise InvalidInputError("components disagree on channel families")
        total = np.zeros(X.shape[0])
        for d, (fam, p) in enumerate(zip(c.families, c.params)):
            col = np.where(M[:, d], X[:, d], 1.0)
            total += np.where(M[:, d], _channel_logpdf(fam, p, col), 0.0)
        out[:, k] = total
    return out


@dataclass(frozen=True)
class SuffStats:
    """Per-channel weighted accumulators for closed-form M-steps."""

    weight: np.ndarray
    total: np.ndarray
    sumsq: np.ndarray
    sumlog: np.ndarray = field(repr=False)

    @classmethod
    def empty(cls, dim: int) -> "SuffStats":
        z = np.zeros(dim)
        return cls(z.copy(), z.copy(), z.copy(), z.copy())

    @property
    def dim(self) -> int:
        return len(self.weight)

    def merge(self, other: "SuffStats") -> "SuffStats":
        return merge(self, other)


def merge(a: SuffStats, b: SuffStats) -> SuffStats:
    if a.dim != b.dim:
        raise InvalidInputError("cannot merge statistics of different dimension")
    return SuffStats(a.weight + b.weight, a.total + b.total, a.sumsq + b.sumsq, a.sumlog + b.sumlog)


def accumulate(s: SuffStats, x, mask=None, w: float = 1.0) -> SuffStats:
    """Add one weighted observation; unobserved channels are skipped."""
    x = np.asarray(x, dtype=float)
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    return accumulate_rows(s, x[None, :], np.asarray(mask, dtype=bool)[None, :], np.array([w], dtype=float))


def accumulate_rows(s: SuffStats, X, M, w) -> SuffStats:
    """Add a batch of weighted rows. ``w`` has one weight per row."""
    X = np.asarray(X, dtype=float)
    M = np.asarray(M, dtype=bool)
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidInputError("weights must be finite and non-negative")
    if X.ndim != 2 or X.shape[1] != s.dim or M.shape != X.shape:
        raise InvalidInputError(f"rows of shape {X.shape} do not match statistics of dimension {s.dim}")
    if not np.all(np.isfinite(X[M])):
        raise InvalidInputError("non-finite value in an observed position")
    Xz = np.where(M, X, 0.0)
    W = w[:, None] * M
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(M & (Xz > 0), np.log(np.where(Xz > 0, Xz, 1.0)), 0.0)
    return SuffStats(
        s.weight + W.sum(axis=0),
        s.total + (W * Xz).sum(axis=0),
        s.sumsq + (W * Xz * Xz).sum(axis=0),
        s.sumlog + (W * logs).sum(axis=0),
    )


def _gamma_shape(mean: float, mean_log: float, tol: float = 1e-10, max_iter: int = 50) -> float:
    """Solve log(a) - digamma(a) = log(mean) - mean_log for the shape a."""
    s = math.log(mean) - mean_log
    if not s > 1e-12:
        # all mass at a single point; the MLE diverges
        return 1e8
    a = (3.0 - s + math.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)
    for _ in range(max_iter):
        f = math.log(a) - digamma(a) - s
        fprime = 1.0 / a - float(polygamma(1, a))
        step = f / fprime
        new = a - step
        while new <= 0:
            step *= 0.5
            new = a - step
        if abs(new - a) <= tol * a:
            return new
        a = new
    return a


def mle_update(s: SuffStats, families, floor: float = DEFAULT_VARIANCE_FLOOR) -> ComponentParams:
    """Closed-form weighted maximum-likelihood parameters from statistics.

    Raises :class:`StarvedComponentError` when any channel carries
    (essentially) no weight.
    """
    families = _as_families(families)
    if len(families) != s.dim:
        raise InvalidInputError("family list does not match statistics dimension")
    starved = np.flatnonzero(s.weight < STARVED_WEIGHT)
    if starved.size:
        raise StarvedComponentError(f"no weight on dimension(s) {starved.tolist()}")
    params = []
    for d, fam in enumerate(families):
        w = s.weight[d]
        mean = s.total[d] / w
        if fam is Family.GAUSSIAN:
            var = max(s.sumsq[d] / w - mean * mean, floor)
            params.append((mean, var))
        elif fam is Family.GAMMA:
            mean = max(mean, floor)
            shape = _gamma_shape(mean, s.sumlog[d] / w)
            params.append((shape, shape / mean))
        elif fam is Family.POISSON:
            params.append((max(mean, floor),))
        else:
            params.append((1.0 / max(mean, floor),))
    return ComponentParams(families, tuple(params))


def sample(c: ComponentParams, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Independent per-channel draws. Returns shape ``(dim,)`` or ``(size, dim)``."""
    n = 1 if size is None else size
    out = np.empty((n, c.dim))
    for d, (fam, p) in enumerate(zip(c.families, c.params)):
        if fam is Family.GAUSSIAN:
            out[:, d] = rng.normal(p[0], math.sqrt(p[1]), size=n)
        elif fam is Family.GAMMA:
            out[:, d] = rng.gamma(p[0], 1.0 / p[1], size=n)
        elif fam is Family.POISSON:
            out[:, d] = rng.poisson(p[0], size=n)
        else:
            out[:, d] = rng.exponential(1.0 / p[0], size=n)
    return out[0] if size is None else out
