"""Online health tracking and failure-time prediction.

Beliefs are filtered state posteriors. Failure-time distributions are
first-passage probabilities into the terminal state, computed by repeated
vector-matrix products over the transient block of the transition matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from . import tmhmm
from .errors import InvalidInputError, ZeroLikelihoodError
from .tmhmm import EmConfig, ObservationSequence, SampleBatch, TiedMixtureHmm

BELIEF_TOL = 1e-9
DEFAULT_LOOKAHEAD = 5
DEFAULT_OPERATING_RISK = 0.125


@dataclass(frozen=True)
class Belief:
    probs: np.ndarray
    step: int = 0

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > BELIEF_TOL:
            raise InvalidInputError(f"belief must be a probability vector, got {p}")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)


def _posterior(prior: np.ndarray, loglik: np.ndarray, step: int) -> np.ndarray:
    shift = loglik.max()
    if not np.isfinite(shift):
        raise ZeroLikelihoodError(f"observation is impossible under every state at step {step}", step=step)
    post = prior * np.exp(loglik - shift)
    total = post.sum()
    if not total > 0:
        raise ZeroLikelihoodError(f"zero posterior mass at step {step}", step=step)
    return post / total


def _obs_loglik(m: TiedMixtureHmm, x, mask) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(1, -1)
    mask = np.isfinite(x) if mask is None else np.asarray(mask, dtype=bool).reshape(1, -1)
    if x.shape[1] != m.dim:
        raise InvalidInputError(f"observation has {x.shape[1]} channels, model expects {m.dim}")
    return tmhmm.emission_rows(m, x, mask)[0][0]


def initial_belief(m: TiedMixtureHmm, x, mask=None) -> Belief:
    """Belief after the first observation of an asset."""
    return Belief(_posterior(m.initial, _obs_loglik(m, x, mask), 0), 0)


def update_belief(m: TiedMixtureHmm, b: Belief, x, mask=None) -> Belief:
    """One step of sequential Bayes: predict through the chain, then weigh by the reading.

    ``mask`` defaults to the finite entries of ``x``.
    """
    step = b.step + 1
    return Belief(_posterior(b.probs @ m.trans, _obs_loglik(m, x, mask), step), step)


def condition_operating(m: TiedMixtureHmm, b: Belief) -> Belief:
    """Condition a belief on the asset still running (terminal mass removed)."""
    p = b.probs.copy()
    p[m.terminal] = 0.0
    if not p.sum() > 0:
        raise ZeroLikelihoodError("belief has all its mass on the failure state", step=b.step)
    return Belief(p / p.sum(), b.step)


@dataclass(frozen=True)
class FailureTimeDistribution:
    """First entry into the failure state at steps ``step+1 .. step+H``.

    ``residual`` is the probability of surviving past the horizon and
    ``already_failed`` the belief mass already on the failure state; the
    three parts sum to one.
    """

    pmf: np.ndarray
    residual: float
    already_failed: float
    step: int = 0

    @property
    def horizon(self) -> int:
        return len(self.pmf)

    def most_probable_step(self) -> int:
        """Absolute step index of the pmf mode."""
        return self.step + 1 + int(np.argmax(self.pmf))

    def within(self, lookahead: int) -> float:
        return float(self.pmf[:lookahead].sum())


def _transient_blocks(m: TiedMixtureHmm):
    nt = m.transient
    return nt, m.trans[np.ix_(nt, nt)], m.trans[nt, m.terminal]


def failure_time_distribution(m: TiedMixtureHmm, b: Belief, horizon: int) -> FailureTimeDistribution:
    if horizon < 1:
        raise InvalidInputError("horizon must be at least 1")
    nt, Q, r = _transient_blocks(m)
    v = b.probs[nt]
    pmf = np.empty(horizon)
    for h in range(horizon):
        pmf[h] = v @ r
        v = v @ Q
    return FailureTimeDistribution(pmf, float(v.sum()), float(b.probs[m.terminal]), b.step)


def survival_curve(m: TiedMixtureHmm, b: Belief, horizon: int) -> np.ndarray:
    """``S[h-1]`` = probability the asset has not failed by step ``step + h``."""
    ftd = failure_time_distribution(m, b, horizon)
    return np.clip(1.0 - ftd.already_failed - np.cumsum(ftd.pmf), 0.0, 1.0)


def failure_within(m: TiedMixtureHmm, lookahead: int) -> np.ndarray:
    """Per-state probability of reaching the failure state within ``lookahead`` steps."""
    nt, Q, _ = _transient_blocks(m)
    stay = np.ones(len(nt))
    for _ in range(lookahead):
        stay = Q @ stay
    risk = np.ones(m.n_states)
    risk[nt] = 1.0 - stay
    return risk


# -- degradation profiles ----------------------------------------------------


@dataclass(frozen=True)
class ProfileLibrary:
    """Alternative degradation processes with a prior over which one an asset follows."""

    profiles: tuple[TiedMixtureHmm, ...]
    prior: np.ndarray

    def __post_init__(self):
        profiles = tuple(self.profiles)
        prior = np.array(self.prior, dtype=float)
        if not profiles:
            raise InvalidInputError("a library needs at least one profile")
        if prior.shape != (len(profiles),) or np.any(prior < 0) or abs(prior.sum() - 1.0) > BELIEF_TOL:
            raise InvalidInputError("profile prior must be a probability vector with one entry per profile")
        if len({p.dim for p in profiles}) != 1:
            raise InvalidInputError("all profiles must share the sensor dimensionality")
        prior.flags.writeable = False
        object.__setattr__(self, "profiles", profiles)
        object.__setattr__(self, "prior", prior)

    def __len__(self):
        return len(self.profiles)

    @property
    def dim(self) -> int:
        return self.profiles[0].dim


def entropy_bits(p) -> float:
    p = np.asarray(p, dtype=float)
    nz = p[p > 0]
    return float(max(-(nz * np.log2(nz)).sum(), 0.0))


def _normalise_log(logp: np.ndarray, axis=-1) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return np.exp(logp - logsumexp(logp, axis=axis, keepdims=True))


def profile_posterior(lib: ProfileLibrary, seq: ObservationSequence):
    """Posterior over profiles given a sequence (prefix) and its entropy in bits."""
    ll = np.empty(len(lib))
    for i, m in enumerate(lib.profiles):
        try:
            ll[i] = tmhmm.forward_filter(m, seq)[1]
        except ZeroLikelihoodError:
            ll[i] = -np.inf
    with np.errstate(divide="ignore"):
        logp = np.log(lib.prior) + ll
    if not np.any(np.isfinite(logp)):
        raise ZeroLikelihoodError("every profile assigns zero likelihood to the sequence")
    post = _normalise_log(logp)
    return post, entropy_bits(post)


def profile_trajectory(lib: ProfileLibrary, seq: ObservationSequence):
    """Profile posterior and entropy after each prefix length (``(T, P)``, ``(T,)``).

    Prefix ``t`` treats the asset as still running at step ``t``; rows are
    NaN from the first prefix that every profile rules out.
    """
    lls = np.stack([tmhmm.filter_prefixes(m, seq)[1] for m in lib.profiles], axis=1)
    with np.errstate(divide="ignore"):
        logp = np.log(lib.prior)[None, :] + lls
    post = np.full(lls.shape, np.nan)
    ok = np.isfinite(logp).any(axis=1)
    post[ok] = _normalise_log(logp[ok])
    ent = np.array([entropy_bits(p) if k else np.nan for p, k in zip(post, ok)])
    return post, ent


def fit_profile_library(
    data: Sequence[ObservationSequence],
    n_profiles: int,
    n_states: int,
    n_components: int,
    labels=None,
    families=None,
    cfg: EmConfig | None = None,
    max_rounds: int = 20,
) -> ProfileLibrary:
    """Fit one model per degradation profile over a shared component pool.

    The components come from a joint fit on all data and are frozen; each
    profile then learns its own initial, transition and mixing parameters.
    With ``labels`` the profiles are fitted on their labelled subsets;
    otherwise sequences are seeded into groups by lifetime and reassigned
    to their most likely profile until assignments stop changing.
    """
    cfg = cfg or EmConfig()
    data = list(data)
    joint = tmhmm.em_fit(tmhmm.initial_model(data, n_states, n_components, families, seed=cfg.seed), data, cfg).model
    frozen = EmConfig(**{**cfg.__dict__, "fit_components": False})

    if labels is not None:
        assign = np.asarray(labels, dtype=np.int64)
        if assign.shape != (len(data),) or assign.min() < 0 or assign.max() >= n_profiles:
            raise InvalidInputError("labels must give a profile index in 0..n_profiles-1 for every sequence")
        rounds = 1
    else:
        order = np.argsort([len(s) for s in data], kind="stable")
        assign = np.empty(len(data), dtype=np.int64)
        for p, chunk in enumerate(np.array_split(order, n_profiles)):
            assign[chunk] = p
        rounds = max_rounds

    profiles = [joint] * n_profiles
    for _ in range(rounds):
        fitted = []
        for p in range(n_profiles):
            subset = [data[i] for i in np.flatnonzero(assign == p)]
            fitted.append(tmhmm.em_fit(profiles[p], subset, frozen).model if subset else profiles[p])
        profiles = fitted
        if labels is not None:
            break
        ll = np.array([[_safe_loglik(m, s) for m in profiles] for s in data])
        new = np.argmax(ll, axis=1)
        if np.array_equal(new, assign):
            break
        assign = new
    counts = np.bincount(assign, minlength=n_profiles).astype(float)
    return ProfileLibrary(tuple(profiles), counts / counts.sum())


def _safe_loglik(m, seq) -> float:
    try:
        return tmhmm.forward_filter(m, seq)[1]
    except ZeroLikelihoodError:
        return -np.inf


# -- posterior predictive checks ---------------------------------------------


def _mean_ttf(batch: SampleBatch) -> float:
    if not batch.failed.any():
        return np.nan
    return float((batch.lengths[batch.failed] - 1).mean())


def _censor_frac(batch: SampleBatch) -> float:
    return float(1.0 - batch.failed.mean())


def _channel_stat(d: int, fn) -> Callable[[SampleBatch], float]:
    def stat(batch: SampleBatch) -> float:
        col = batch.obs[:, :, d]
        vals = col[np.isfinite(col)]
        return float(fn(vals)) if vals.size else np.nan

    return stat


def builtin_statistics(dim: int) -> dict[str, Callable[[SampleBatch], float]]:
    """Mean time-to-failure, censoring fraction and per-channel mean and variance."""
    stats = {"mean_ttf": _mean_ttf, "censor_frac": _censor_frac}
    for d in range(dim):
        stats[f"obs_mean[{d}]"] = _channel_stat(d, np.mean)
        stats[f"obs_var[{d}]"] = _channel_stat(d, np.var)
    return stats


def posterior_predictive_check(
    m: TiedMixtureHmm,
    data: Sequence[ObservationSequence],
    stats: Mapping[str, Callable[[SampleBatch], float]] | None = None,
    nreps: int = 200,
    rng: np.random.Generator | int = 0,
    maxlen: int | None = None,
) -> dict[str, float]:
    """One-sided p-values: fraction of replicate datasets whose statistic is >= the observed one.

    Replicates have as many sequences as ``data`` and are censored at
    ``maxlen`` (default: the longest observed sequence). Replicates where a
    statistic is undefined (NaN) are left out of its p-value.
    """
    if nreps < 100:
        raise InvalidInputError("use at least 100 replicates")
    rng = np.random.default_rng(rng)
    data = list(data)
    observed_batch = SampleBatch.from_sequences(data, m.failure_emits)
    maxlen = int(observed_batch.lengths.max()) if maxlen is None else maxlen
    stats = dict(stats) if stats is not None else builtin_statistics(m.dim)
    observed = {name: fn(observed_batch) for name, fn in stats.items()}
    reps = {name: [] for name in stats}
    for _ in range(nreps):
        rep = tmhmm.sample_batch(m, len(data), maxlen, rng)
        for name, fn in stats.items():
            reps[name].append(fn(rep))
    out = {}
    for name, values in reps.items():
        values = np.asarray(values, dtype=float)
        values = values[np.isfinite(values)]
        obs = observed[name]
        out[name] = float(np.mean(values >= obs)) if values.size and np.isfinite(obs) else np.nan
    return out


# -- risk / uptime trade-off ---------------------------------------------------


@dataclass(frozen=True)
class TradeoffCurve:
    """Replacement policy outcomes per risk threshold.

    ``failure_rate`` is the fleet fraction that failed before being replaced
    and ``mean_uptime`` the mean number of operating steps per asset.
    """

    thresholds: np.ndarray
    failure_rate: np.ndarray
    mean_uptime: np.ndarray
    lookahead: int = DEFAULT_LOOKAHEAD

    def rows(self):
        return list(zip(self.thresholds.tolist(), self.failure_rate.tolist(), self.mean_uptime.tolist()))

    def uptime_at_risk(self, risk: float) -> float:
        """Longest mean uptime achievable at a fleet failure rate of ``risk`` (linear interpolation)."""
        rates, idx = np.unique(self.failure_rate, return_inverse=True)
        best = np.full(len(rates), -np.inf)
        np.maximum.at(best, idx, self.mean_uptime)
        if not rates[0] <= risk <= rates[-1]:
            raise InvalidInputError(f"risk {risk} outside the curve's range [{rates[0]}, {rates[-1]}]")
        return float(np.interp(risk, rates, best))

    def operating_point(self, risk: float = DEFAULT_OPERATING_RISK):
        """``(threshold, mean_uptime)`` where the fleet failure rate equals ``risk``."""
        rates, first = np.unique(self.failure_rate, return_index=True)
        return float(np.interp(risk, rates, self.thresholds[first])), self.uptime_at_risk(risk)


def _risk_trace(model, seq: ObservationSequence, lookahead: int) -> np.ndarray:
    """Predicted probability of failing within ``lookahead`` steps after each operating step."""
    n_op = len(seq) - 1 if seq.failed else len(seq)
    if n_op == 0:
        return np.zeros(0)
    if isinstance(model, ProfileLibrary):
        risks, lls = [], []
        for m in model.profiles:
            beliefs, ll = tmhmm.filter_prefixes(m, seq)
            risks.append(np.nan_to_num(beliefs[:n_op]) @ failure_within(m, lookahead))
            lls.append(ll[:n_op])
        with np.errstate(divide="ignore"):
            logp = np.log(model.prior)[None, :] + np.stack(lls, axis=1)
        w = _normalise_log(logp)
        return np.nan_to_num((w * np.stack(risks, axis=1)).sum(axis=1), nan=1.0)
    beliefs, _ = tmhmm.filter_prefixes(model, seq)
    return np.nan_to_num(beliefs[:n_op] @ failure_within(model, lookahead), nan=1.0)


def tradeoff_curve(model, fleet: Sequence[ObservationSequence], thresholds, lookahead: int = DEFAULT_LOOKAHEAD) -> TradeoffCurve:
    """Failure rate and mean uptime of "replace once predicted risk >= threshold".

    ``model`` is a :class:`TiedMixtureHmm` or a :class:`ProfileLibrary`.
    Risk is the predicted probability of failing within ``lookahead`` steps.
    An asset replaced after operating step ``t`` has uptime ``t + 1``; one
    that fails first has uptime equal to its operating steps.
    """
    thresholds = np.asarray(thresholds, dtype=float)
    if np.any((thresholds < 0) | (thresholds > 1)):
        raise InvalidInputError("thresholds must lie in [0, 1]")
    peaks = [np.maximum.accumulate(_risk_trace(model, s, lookahead)) for s in fleet]
    failed = np.array([s.failed for s in fleet])
    n_op = np.array([len(s) - 1 if s.failed else len(s) for s in fleet])
    rate = np.empty(len(thresholds))
    uptime = np.empty(len(thresholds))
    for j, th in enumerate(thresholds):
        trig = np.array([np.searchsorted(p, th, side="left") for p in peaks])
        replaced = trig < n_op
        up = np.where(replaced, trig + 1, n_op)
        rate[j] = np.mean(failed & ~replaced)
        uptime[j] = up.mean()
    return TradeoffCurve(thresholds, rate, uptime, lookahead)
