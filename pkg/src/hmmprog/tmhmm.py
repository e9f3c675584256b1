"""Tied-mixture absorbing hidden Markov model.

Every hidden state emits from a mixture over one shared pool of ``K``
components; states differ only in their mixing weights. One state is the
absorbing failure (terminal) state. Sequences end either in a failure event
(the final step is clamped to the terminal state) or are right-censored (the
final step is known to be non-terminal).

Forward/backward use per-step scaling; Viterbi runs in log space.
"""

from __future__ import annotations

import enum
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp

from . import distributions as dist
from .distributions import ComponentParams, Family, SuffStats
from .errors import InvalidInputError, StarvedComponentError, ZeroLikelihoodError

log = logging.getLogger(__name__)

ROW_TOL = 1e-9


class EndLabel(str, enum.Enum):
    FAILED = "failed"
    CENSORED = "censored"


@dataclass(frozen=True, eq=False)
class ObservationSequence:
    """One asset's sensor history.

    ``masks[t, d]`` is True where channel ``d`` was observed at step ``t``.
    Steps need not be contiguous; gaps are treated as fully missing steps.
    For failed sequences the last step is the failure event.
    """

    times: np.ndarray
    obs: np.ndarray
    masks: np.ndarray
    endlabel: EndLabel = EndLabel.CENSORED

    def __post_init__(self):
        obs = np.array(self.obs, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        masks = np.array(self.masks, dtype=bool).reshape(obs.shape)
        times = np.array(self.times, dtype=np.int64).reshape(-1)
        if obs.ndim != 2 or obs.shape[0] == 0:
            raise InvalidInputError("a sequence needs at least one step")
        if len(times) != obs.shape[0]:
            raise InvalidInputError(f"{len(times)} time stamps for {obs.shape[0]} observations")
        if np.any(np.diff(times) <= 0):
            raise InvalidInputError("time stamps must be strictly increasing")
        if not np.all(np.isfinite(obs[masks])):
            raise InvalidInputError("non-finite value in an observed position")
        for name, arr in (("times", times), ("obs", obs), ("masks", masks)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "endlabel", EndLabel(self.endlabel))

    @classmethod
    def from_array(cls, obs, endlabel=EndLabel.CENSORED, times=None) -> "ObservationSequence":
        """Build from a ``(T, D)`` array where NaN marks a missing value."""
        obs = np.asarray(obs, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        if times is None:
            times = np.arange(obs.shape[0])
        return cls(times, obs, np.isfinite(obs), endlabel)

    def __len__(self) -> int:
        return self.obs.shape[0]

    @property
    def dim(self) -> int:
        return self.obs.shape[1]

    @property
    def failed(self) -> bool:
        return self.endlabel is EndLabel.FAILED

    def on_grid(self) -> "ObservationSequence":
        """Expand time gaps into fully-missing steps on a unit grid."""
        span = int(self.times[-1] - self.times[0]) + 1
        if span == len(self):
            return self
        idx = self.times - self.times[0]
        obs = np.full((span, self.dim), np.nan)
        masks = np.zeros((span, self.dim), dtype=bool)
        obs[idx] = self.obs
        masks[idx] = self.masks
        return ObservationSequence(np.arange(self.times[0], self.times[-1] + 1), obs, masks, self.endlabel)

    def prefix(self, n: int) -> "ObservationSequence":
        """First ``n`` steps. Shorter prefixes are censored (asset still running)."""
        if not 1 <= n <= len(self):
            raise InvalidInputError(f"prefix length {n} outside 1..{len(self)}")
        if n == len(self):
            return self
        return ObservationSequence(self.times[:n], self.obs[:n], self.masks[:n], EndLabel.CENSORED)


def absorbing_mask(n_states: int, terminal: int | None = None) -> np.ndarray:
    """Upper-triangular support with an absorbing terminal row."""
    terminal = n_states - 1 if terminal is None else terminal
    mask = np.triu(np.ones((n_states, n_states), dtype=bool))
    mask[terminal] = False
    mask[terminal, terminal] = True
    return mask


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TiedMixtureHmm:
    """All learned parameters of the model.

    ``mask`` marks the allowed transitions (structural zeros elsewhere). With
    ``absorbing=True`` the mask must not allow moving to a lower state index.
    ``failure_emits`` decides whether the failure step carries a sensor
    reading; by default it does not.
    """

    initial: np.ndarray
    trans: np.ndarray
    mixweights: np.ndarray
    components: tuple[ComponentParams, ...]
    terminal: int = -1
    mask: np.ndarray | None = None
    absorbing: bool = True
    failure_emits: bool = False

    def __post_init__(self):
        trans = _frozen(self.trans)
        n = trans.shape[0]
        if trans.ndim != 2 or trans.shape != (n, n) or n < 2:
            raise InvalidInputError(f"transition matrix must be square with N >= 2, got {trans.shape}")
        terminal = self.terminal % n if -n <= self.terminal < n else self.terminal
        if not 0 <= terminal < n:
            raise InvalidInputError(f"terminal index {self.terminal} out of range")
        if self.mask is None:
            mask = absorbing_mask(n, terminal) if self.absorbing else np.ones((n, n), dtype=bool)
        else:
            mask = self.mask
        components = tuple(self.components)
        mix = _frozen(self.mixweights)
        init = _frozen(self.initial)
        if init.shape != (n,):
            raise InvalidInputError(f"initial distribution must have length {n}")
        if mix.ndim != 2 or mix.shape != (n, len(components)):
            raise InvalidInputError(f"mixing weights must be {n}x{len(components)}, got {mix.shape}")
        if not components:
            raise InvalidInputError("need at least one shared component")
        mask = _frozen(mask, dtype=bool)
        if mask.shape != (n, n):
            raise InvalidInputError("mask shape does not match transition matrix")
        object.__setattr__(self, "trans", trans)
        object.__setattr__(self, "initial", init)
        object.__setattr__(self, "mixweights", mix)
        object.__setattr__(self, "components", components)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "terminal", int(terminal))

    @property
    def n_states(self) -> int:
        return self.trans.shape[0]

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def families(self) -> tuple[Family, ...]:
        return self.components[0].families

    @property
    def transient(self) -> np.ndarray:
        return np.flatnonzero(np.arange(self.n_states) != self.terminal)

    def replace(self, **changes) -> "TiedMixtureHmm":
        return replace(self, **changes)


@dataclass(frozen=True)
class Violation:
    what: str
    row: int | None = None
    col: int | None = None

    def __str__(self):
        where = ""
        if self.row is not None:
            where = f" at row {self.row}" + ("" if self.col is None else f", column {self.col}")
        return self.what + where


def validate(m: TiedMixtureHmm) -> list[Violation]:
    """Every invariant violation of ``m``; an empty list means valid."""
    out = []
    n = m.n_states
    if np.any(m.initial < 0) or abs(m.initial.sum() - 1.0) > ROW_TOL:
        out.append(Violation("initial distribution is not a probability vector"))
    for i in range(n):
        row = m.trans[i]
        if np.any(row < 0) or abs(row.sum() - 1.0) > ROW_TOL:
            out.append(Violation(f"transition row sums to {row.sum():.12g}", i))
        for j in np.flatnonzero(~m.mask[i] & (row != 0)):
            out.append(Violation("non-zero transition outside the mask", i, int(j)))
        w = m.mixweights[i]
        if np.any(w < 0) or abs(w.sum() - 1.0) > ROW_TOL:
            out.append(Violation(f"mixing weights sum to {w.sum():.12g}", i))
    if m.trans[m.terminal, m.terminal] != 1.0:
        out.append(Violation("terminal state is not absorbing", m.terminal, m.terminal))
    if m.absorbing:
        below = np.tril(np.ones((n, n), dtype=bool), -1)
        for i, j in zip(*np.nonzero(below & m.mask)):
            out.append(Violation("mask allows a transition back towards a healthier state", int(i), int(j)))
    fams = m.components[0].families
    for k, c in enumerate(m.components):
        if c.families != fams:
            out.append(Violation(f"component {k} has channel families {c.families}, expected {fams}"))
    return out


def check(m: TiedMixtureHmm) -> TiedMixtureHmm:
    problems = validate(m)
    if problems:
        raise InvalidInputError("invalid model: " + "; ".join(map(str, problems)))
    return m


# -- emissions ---------------------------------------------------------------


def _log_mix(m: TiedMixtureHmm) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(m.mixweights)


def _state_loglik_rows(m: TiedMixtureHmm, X, M):
    comp = dist.component_loglik(m.components, X, M)
    states = logsumexp(_log_mix(m)[None, :, :] + comp[:, None, :], axis=2)
    return states, comp


def state_loglik(m: TiedMixtureHmm, x, mask=None) -> np.ndarray:
    """Per-state log mixture density of one sensor vector.

    This is the plain tied-mixture density for every state, the terminal
    one included; see :func:`emission_rows` for how a silent terminal state
    is treated inside sequences.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != m.dim:
        raise InvalidInputError(f"observation has {x.shape[0]} channels, model expects {m.dim}")
    mask = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    return _state_loglik_rows(m, x[None, :], mask[None, :])[0][0]


def emission_rows(m: TiedMixtureHmm, X, M):
    """Per-step log emission terms without end-of-sequence conditioning.

    Unless ``m.failure_emits``, the terminal state produces no readings: a
    step with any observed channel rules it out, a fully missing step is
    neutral. Returns the ``(T, N)`` emission terms and the ``(T, K)``
    component log-densities.
    """
    X = np.asarray(X, dtype=float)
    M = np.asarray(M, dtype=bool)
    states, comp = _state_loglik_rows(m, np.where(M, X, 0.0), M)
    if not m.failure_emits:
        states[:, m.terminal] = np.where(M.any(axis=1), -np.inf, 0.0)
    return states, comp


def effective_masks(m: TiedMixtureHmm, seq: ObservationSequence) -> np.ndarray:
    """Observation masks with the failure step blanked when it carries no reading."""
    masks = seq.masks
    if seq.failed and not m.failure_emits:
        masks = masks.copy()
        masks[-1] = False
    return masks


def _condition_end(m: TiedMixtureHmm, row: np.ndarray, failed: bool) -> np.ndarray:
    row = row.copy()
    if failed:
        keep = row[m.terminal]
        row[:] = -np.inf
        row[m.terminal] = keep
    else:
        row[m.terminal] = -np.inf
    return row


def emission_loglik(m: TiedMixtureHmm, seq: ObservationSequence) -> np.ndarray:
    """``(T, N)`` log emission terms including end-of-sequence conditioning."""
    return _Batch.build(m, [seq.on_grid()]).E[0]


@dataclass
class _Batch:
    """Sequences padded to a common length for vectorised recursions."""

    E: np.ndarray  # (B, T, N) conditioned emission terms, 0 on padding
    states: np.ndarray  # (R, N) unconditioned terms on the concatenated rows
    comp: np.ndarray  # (R, K)
    X: np.ndarray  # (R, D)
    M: np.ndarray  # (R, D) effective masks
    lengths: np.ndarray
    offsets: np.ndarray

    @classmethod
    def build(cls, m: TiedMixtureHmm, seqs, condition_end: bool = True) -> "_Batch":
        for s in seqs:
            if s.dim != m.dim:
                raise InvalidInputError(f"sequence has {s.dim} channels, model expects {m.dim}")
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(lengths)])
        X = np.concatenate([s.obs for s in seqs])
        M = np.concatenate([effective_masks(m, s) for s in seqs])
        states, comp = emission_rows(m, X, M)
        E = np.zeros((len(seqs), lengths.max(), m.n_states))
        for b, s in enumerate(seqs):
            rows = states[offsets[b] : offsets[b + 1]]
            E[b, : lengths[b]] = rows
            if condition_end:
                E[b, lengths[b] - 1] = _condition_end(m, rows[-1], s.failed)
        return cls(E, states, comp, X, M, lengths, offsets)

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.E.shape[1])[None, :] < self.lengths[:, None]


# -- inference ---------------------------------------------------------------


def _forward(m: TiedMixtureHmm, batch: _Batch):
    """Scaled forward pass over a padded batch.

    Returns normalised alphas, per-step log scales (0 on padding), the
    shifted emission likelihoods and the raw scaling constants.
    """
    E = batch.E
    B, T, _ = E.shape
    valid = batch.valid
    shift = E.max(axis=2)
    bad = valid & ~np.isfinite(shift)
    if bad.any():
        b, t = np.argwhere(bad)[0]
        raise ZeroLikelihoodError(f"observation at step {t} is impossible under every state", step=int(t), sequence=int(b))
    shift = np.where(valid, shift, 0.0)
    e = np.exp(E - shift[:, :, None])
    alpha = np.empty_like(e)
    c = np.ones((B, T))
    a = m.initial * e[:, 0]
    for t in range(T):
        if t:
            a = (alpha[:, t - 1] @ m.trans) * e[:, t]
        ct = a.sum(axis=1)
        zero = valid[:, t] & ~(ct > 0)
        if zero.any():
            b = int(np.flatnonzero(zero)[0])
            raise ZeroLikelihoodError(f"zero likelihood at step {t}", step=t, sequence=b)
        ct = np.where(valid[:, t], ct, 1.0)
        alpha[:, t] = a / ct[:, None]
        c[:, t] = ct
    logc = np.where(valid, np.log(c) + shift, 0.0)
    return alpha, logc, e, c


def _backward(m: TiedMixtureHmm, batch: _Batch, e, c):
    B, T, N = e.shape
    beta = np.ones((B, T, N))
    for t in range(T - 2, -1, -1):
        nxt = (e[:, t + 1] * beta[:, t + 1]) @ m.trans.T / c[:, t + 1, None]
        beta[:, t] = np.where((t + 1 < batch.lengths)[:, None], nxt, 1.0)
    return beta


def forward_filter(m: TiedMixtureHmm, seq: ObservationSequence):
    """Filtered beliefs ``p(z_t | x_1..x_t)`` and the sequence log-likelihood."""
    batch = _Batch.build(m, [seq.on_grid()])
    alpha, logc, _, _ = _forward(m, batch)
    return alpha[0], float(logc[0].sum())


def filter_prefixes(m: TiedMixtureHmm, seq: ObservationSequence):
    """Beliefs and log-likelihoods for every prefix of ``seq``.

    Entry ``t`` conditions on the asset still operating at step ``t``
    (censored prefix), except the full length of a failed sequence, which
    uses the failure conditioning. A prefix that is impossible gets
    log-likelihood ``-inf`` and a NaN belief row; later prefixes are then
    impossible too.
    """
    seq = seq.on_grid()
    T = len(seq)
    batch = _Batch.build(m, [seq], condition_end=False)
    E = batch.E[0]
    nonterm = m.transient
    beliefs = np.full((T, m.n_states), np.nan)
    logliks = np.full(T, -np.inf)
    alpha = None
    cum = 0.0
    for t in range(T - 1 if seq.failed else T):
        row = E[t]
        shift = row.max()
        if not np.isfinite(shift):
            break
        a = (m.initial if t == 0 else alpha @ m.trans) * np.exp(row - shift)
        ct = a.sum()
        if not ct > 0:
            break
        alpha = a / ct
        cum += np.log(ct) + shift
        alive = alpha[nonterm].sum()
        if not alive > 0:
            break
        b = np.zeros(m.n_states)
        b[nonterm] = alpha[nonterm] / alive
        beliefs[t] = b
        logliks[t] = cum + np.log(alive)
    if seq.failed:
        try:
            b, ll = forward_filter(m, seq)
            beliefs[-1] = b[-1]
            logliks[-1] = ll
        except ZeroLikelihoodError:
            pass
    return beliefs, logliks


class PosteriorBundle(NamedTuple):
    gamma: np.ndarray
    xi: np.ndarray
    comp_resp: np.ndarray
    loglik: float


def _responsibilities(m, states, comp):
    """``p(component | state, x)`` for each concatenated row, shape ``(R, N, K)``."""
    with np.errstate(invalid="ignore"):
        r = np.exp(_log_mix(m)[None, :, :] + comp[:, None, :] - states[:, :, None])
    return np.where(np.isfinite(r), r, 0.0)


def forward_backward(m: TiedMixtureHmm, seq: ObservationSequence) -> PosteriorBundle:
    """Smoothed state, pairwise and component posteriors."""
    batch = _Batch.build(m, [seq.on_grid()])
    alpha, logc, e, c = _forward(m, batch)
    beta = _backward(m, batch, e, c)
    alpha, e, c, beta = alpha[0], e[0], c[0], beta[0]
    gamma = alpha * beta
    gamma /= gamma.sum(axis=1, keepdims=True)
    N = m.n_states
    if len(gamma) > 1:
        xi = alpha[:-1, :, None] * m.trans[None] * (e[1:] * beta[1:])[:, None, :] / c[1:, None, None]
        xi /= xi.sum(axis=(1, 2), keepdims=True)
    else:
        xi = np.zeros((0, N, N))
    resp = gamma[:, :, None] * _responsibilities(m, batch.states, batch.comp)
    return PosteriorBundle(gamma, xi, resp, float(logc[0].sum()))


def viterbi(m: TiedMixtureHmm, seq: ObservationSequence):
    """Most probable state path and its joint log-probability.

    Ties resolve to the lowest state index.
    """
    E = emission_loglik(m, seq)
    T, N = E.shape
    with np.errstate(divide="ignore"):
        logA = np.log(m.trans)
        delta = np.log(m.initial) + E[0]
    back = np.zeros((T, N), dtype=np.int64)
    for t in range(1, T):
        scores = delta[:, None] + logA
        back[t] = np.argmax(scores, axis=0)
        delta = scores[back[t], np.arange(N)] + E[t]
    end = int(np.argmax(delta))
    if not np.isfinite(delta[end]):
        raise ZeroLikelihoodError("no feasible state path")
    path = np.empty(T, dtype=np.int64)
    path[-1] = end
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, float(delta[end])


# -- learning ----------------------------------------------------------------

CHUNK = 64


@dataclass
class EmConfig:
    max_iters: int = 100
    tol: float = 1e-6
    dirichlet_alpha: float = 1.05
    seed: int = 0
    variance_floor: float = dist.DEFAULT_VARIANCE_FLOOR
    threads: int | None = None
    fit_components: bool = True


class FitResult(NamedTuple):
    model: TiedMixtureHmm
    loglik_trace: np.ndarray
    converged: bool


@dataclass
class _Partial:
    loglik: float
    start: np.ndarray
    trans: np.ndarray
    mix: np.ndarray
    stats: list


def _estep_chunk(m: TiedMixtureHmm, seqs, first: int) -> _Partial:
    try:
        batch = _Batch.build(m, seqs)
        alpha, logc, e, c = _forward(m, batch)
    except ZeroLikelihoodError as exc:
        i = first + (exc.sequence or 0)
        raise ZeroLikelihoodError(f"sequence {i}: {exc}", step=exc.step, sequence=i) from exc
    beta = _backward(m, batch, e, c)
    valid = batch.valid
    gamma = alpha * beta
    gamma /= gamma.sum(axis=2, keepdims=True)

    pair_ok = valid[:, 1:, None]
    left = np.where(pair_ok, alpha[:, :-1], 0.0)
    right = (e[:, 1:] * beta[:, 1:]) / c[:, 1:, None]
    xi = np.einsum("btn,btm->nm", left, right) * m.trans

    g = gamma[valid]  # concatenated rows, same order as batch.X
    resp = g[:, :, None] * _responsibilities(m, batch.states, batch.comp)
    per_comp = resp.sum(axis=1)
    stats = [
        dist.accumulate_rows(SuffStats.empty(m.dim), batch.X, batch.M, per_comp[:, k])
        for k in range(m.n_components)
    ]
    return _Partial(float(logc.sum()), gamma[:, 0].sum(axis=0), xi, resp.sum(axis=0), stats)


def _thread_count(cfg: EmConfig) -> int:
    if cfg.threads is not None:
        return max(1, cfg.threads)
    env = os.environ.get("PROGNOSTIC_THREADS")
    return max(1, int(env)) if env else 1


def _estep(m, data, threads) -> _Partial:
    # chunking is independent of the thread count, and partials are merged in
    # chunk order, so results are bitwise identical for any thread count
    starts = range(0, len(data), CHUNK)
    jobs = [(data[i : i + CHUNK], i) for i in starts]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda job: _estep_chunk(m, *job), jobs))
    else:
        parts = [_estep_chunk(m, *job) for job in jobs]
    total = parts[0]
    for p in parts[1:]:
        total = _Partial(
            total.loglik + p.loglik,
            total.start + p.start,
            total.trans + p.trans,
            total.mix + p.mix,
            [dist.merge(a, b) for a, b in zip(total.stats, p.stats)],
        )
    return total


def log_prior(m: TiedMixtureHmm, alpha: float) -> float:
    """Symmetric Dirichlet log-prior (up to a constant) on transition rows."""
    if alpha == 1.0:
        return 0.0
    rows = np.ones(m.n_states, dtype=bool)
    rows[m.terminal] = False
    sel = m.mask & rows[:, None] & (m.trans > 0)
    return float((alpha - 1.0) * np.log(m.trans[sel]).sum())


def _mstep(m: TiedMixtureHmm, acc: _Partial, cfg: EmConfig) -> TiedMixtureHmm:
    initial = acc.start / acc.start.sum()

    counts = np.where(m.mask, acc.trans + (cfg.dirichlet_alpha - 1.0), 0.0)
    counts = np.clip(counts, 0.0, None)
    trans = m.trans.copy()
    for i in range(m.n_states):
        tot = counts[i].sum()
        if i != m.terminal and tot > 0:
            trans[i] = counts[i] / tot
    trans[m.terminal] = 0.0
    trans[m.terminal, m.terminal] = 1.0

    mix = m.mixweights.copy()
    tot = acc.mix.sum(axis=1)
    ok = tot > 0
    mix[ok] = acc.mix[ok] / tot[ok, None]

    comps = list(m.components)
    for k, s in enumerate(acc.stats if cfg.fit_components else ()):
        try:
            comps[k] = dist.mle_update(s, m.families, cfg.variance_floor)
        except StarvedComponentError:
            warnings.warn(f"component {k} received no responsibility; keeping previous parameters", stacklevel=3)
    return m.replace(initial=initial, trans=trans, mixweights=mix, components=tuple(comps))


def em_fit(init: TiedMixtureHmm, data: Sequence[ObservationSequence], cfg: EmConfig | None = None) -> FitResult:
    """Fit by expectation maximisation with tied (pooled) component updates.

    The trace holds the penalised log-likelihood (log-likelihood plus the
    Dirichlet log-prior on transitions) of each visited parameter set; with
    ``dirichlet_alpha=1`` that is the plain log-likelihood.
    """
    cfg = cfg or EmConfig()
    check(init)
    data = [s.on_grid() for s in data]
    if not data:
        raise InvalidInputError("no training sequences")
    for i, s in enumerate(data):
        if s.dim != init.dim:
            raise InvalidInputError(f"sequence {i} has {s.dim} channels, model expects {init.dim}")
    threads = _thread_count(cfg)
    model = init
    trace = []
    for it in range(cfg.max_iters):
        acc = _estep(model, data, threads)
        trace.append(acc.loglik + log_prior(model, cfg.dirichlet_alpha))
        log.debug("EM iteration %d: objective %.6f", it, trace[-1])
        if it and trace[-1] - trace[-2] < cfg.tol:
            return FitResult(model, np.array(trace), True)
        model = _mstep(model, acc, cfg)
    acc = _estep(model, data, threads)
    trace.append(acc.loglik + log_prior(model, cfg.dirichlet_alpha))
    converged = len(trace) > 1 and trace[-1] - trace[-2] < cfg.tol
    return FitResult(model, np.array(trace), converged)


def initial_model(
    data: Sequence[ObservationSequence],
    n_states: int,
    n_components: int,
    families=None,
    mask=None,
    seed: int = 0,
    failure_emits: bool = False,
) -> TiedMixtureHmm:
    """Deterministic starting point for :func:`em_fit`.

    Components come from k-means on the pooled (standardised) complete
    observations. Clusters are ordered by where in an asset's life they tend
    to occur, and earlier states favour earlier clusters. Transitions start
    uniform over the mask support; the initial distribution is uniform over
    non-terminal states.
    """
    if n_states < 2:
        raise InvalidInputError("need at least two states (one is the terminal failure state)")
    if n_components < 1:
        raise InvalidInputError("need at least one component")
    data = [s.on_grid() for s in data]
    if not data:
        raise InvalidInputError("no training sequences")
    dim = data[0].dim
    families = tuple(Family(f) for f in (families or [Family.GAUSSIAN] * dim))
    if len(families) != dim:
        raise InvalidInputError(f"{len(families)} families given for {dim} channels")
    rng = np.random.default_rng(seed)
    terminal = n_states - 1
    mask = absorbing_mask(n_states) if mask is None else np.asarray(mask, dtype=bool)

    rows, ms, pos = [], [], []
    for s in data:
        msk = s.masks.copy()
        if s.failed and not failure_emits:
            msk[-1] = False
        n_op = max(len(s) - 1, 1)
        rows.append(s.obs)
        ms.append(msk)
        pos.append(np.arange(len(s)) / n_op)
    X = np.concatenate(rows)
    M = np.concatenate(ms)
    P = np.concatenate(pos)
    complete = M.all(axis=1)
    if complete.sum() < n_components:
        raise InvalidInputError("too few fully observed steps to seed the components")
    Xc, Pc = X[complete], P[complete]
    mu, sd = Xc.mean(axis=0), Xc.std(axis=0)
    sd[sd == 0] = 1.0
    Z = (Xc - mu) / sd
    _, labels = kmeans2(Z, n_components, minit="++", seed=rng)

    pooled = dist.accumulate_rows(SuffStats.empty(dim), X, M, np.ones(len(X)))
    comps, order_key = [], []
    for k in range(n_components):
        sel = labels == k
        stats = dist.accumulate_rows(SuffStats.empty(dim), Xc[sel], np.ones_like(Xc[sel], dtype=bool), np.ones(sel.sum()))
        try:
            comps.append(dist.mle_update(stats, families))
            order_key.append(Pc[sel].mean())
        except StarvedComponentError:
            comps.append(dist.mle_update(pooled, families))
            order_key.append(0.5)
    order = np.argsort(order_key, kind="stable")
    comps = [comps[k] for k in order]

    n_trans = n_states - 1
    state_pos = np.linspace(0.0, 1.0, n_trans) if n_trans > 1 else np.zeros(1)
    comp_pos = np.linspace(0.0, 1.0, n_components) if n_components > 1 else np.zeros(1)
    mix = np.full((n_states, n_components), 1.0 / n_components)
    w = np.exp(-((state_pos[:, None] - comp_pos[None, :]) ** 2) / (2 * 0.25**2)) + 0.05
    w *= rng.uniform(0.9, 1.1, size=w.shape)
    mix[:terminal] = w / w.sum(axis=1, keepdims=True)

    trans = mask.astype(float)
    trans[terminal] = 0.0
    trans[terminal, terminal] = 1.0
    trans /= trans.sum(axis=1, keepdims=True)
    initial = np.zeros(n_states)
    initial[:terminal] = 1.0 / n_trans
    absorbing = not np.any(np.tril(mask, -1))
    return TiedMixtureHmm(initial, trans, mix, tuple(comps), terminal, mask, absorbing, failure_emits)


# -- sampling ----------------------------------------------------------------


def _categorical(rng, probs: np.ndarray) -> np.ndarray:
    """One draw per row of ``probs``."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    return np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)


def sample_sequence(m: TiedMixtureHmm, maxlen: int, rng: np.random.Generator):
    """Draw one sequence and its hidden path.

    The sequence stops at the step where the chain enters the terminal state
    (failed) or after ``maxlen`` steps (censored).
    """
    if maxlen < 1:
        raise InvalidInputError("maxlen must be at least 1")
    states, obs = [], []
    z = int(_categorical(rng, m.initial[None, :])[0])
    label = EndLabel.CENSORED
    while True:
        states.append(z)
        if z == m.terminal:
            label = EndLabel.FAILED
            if m.failure_emits:
                k = int(_categorical(rng, m.mixweights[z][None, :])[0])
                obs.append(dist.sample(m.components[k], rng))
            else:
                obs.append(np.full(m.dim, np.nan))
            break
        k = int(_categorical(rng, m.mixweights[z][None, :])[0])
        obs.append(dist.sample(m.components[k], rng))
        if len(states) == maxlen:
            break
        z = int(_categorical(rng, m.trans[z][None, :])[0])
    seq = ObservationSequence.from_array(np.array(obs), label)
    return seq, np.array(states, dtype=np.int64)


@dataclass(frozen=True)
class SampleBatch:
    """Many sequences simulated side by side; padding is ``-1`` / NaN."""

    states: np.ndarray
    symbols: np.ndarray
    obs: np.ndarray
    lengths: np.ndarray
    failed: np.ndarray

    @classmethod
    def from_sequences(cls, seqs, failure_emits: bool = False) -> "SampleBatch":
        """Pad observed sequences into batch form (hidden states unknown, ``-1``)."""
        seqs = [s.on_grid() for s in seqs]
        n, T = len(seqs), max(len(s) for s in seqs)
        obs = np.full((n, T, seqs[0].dim), np.nan)
        for i, s in enumerate(seqs):
            o = np.where(s.masks, s.obs, np.nan)
            if s.failed and not failure_emits:
                o[-1] = np.nan
            obs[i, : len(s)] = o
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        failed = np.array([s.failed for s in seqs])
        blank = np.full((n, T), -1, dtype=np.int64)
        return cls(blank, blank.copy(), obs, lengths, failed)

    def sequences(self) -> list[ObservationSequence]:
        out = []
        for i, n in enumerate(self.lengths):
            label = EndLabel.FAILED if self.failed[i] else EndLabel.CENSORED
            out.append(ObservationSequence.from_array(self.obs[i, :n], label))
        return out

    def paths(self) -> list[np.ndarray]:
        return [self.states[i, :n].copy() for i, n in enumerate(self.lengths)]


def sample_batch(m: TiedMixtureHmm, n: int, maxlen: int, rng: np.random.Generator) -> SampleBatch:
    """Vectorised equivalent of ``n`` calls to :func:`sample_sequence`.

    Same distribution, different random stream.
    """
    if maxlen < 1:
        raise InvalidInputError("maxlen must be at least 1")
    states = np.full((n, maxlen), -1, dtype=np.int64)
    symbols = np.full((n, maxlen), -1, dtype=np.int64)
    obs = np.full((n, maxlen, m.dim), np.nan)
    lengths = np.zeros(n, dtype=np.int64)
    failed = np.zeros(n, dtype=bool)
    z = _categorical(rng, np.broadcast_to(m.initial, (n, m.n_states)))
    alive = np.arange(n)
    for t in range(maxlen):
        if alive.size == 0:
            break
        states[alive, t] = z
        lengths[alive] = t + 1
        dead = z == m.terminal
        failed[alive[dead]] = True
        emit = alive if m.failure_emits else alive[~dead]
        zemit = z if m.failure_emits else z[~dead]
        if emit.size:
            k = _categorical(rng, m.mixweights[zemit])
            symbols[emit, t] = k
            for c in np.unique(k):
                rows = emit[k == c]
                obs[rows, t] = dist.sample(m.components[c], rng, size=rows.size)
        alive, z = alive[~dead], z[~dead]
        if t + 1 < maxlen and alive.size:
            z = _categorical(rng, m.trans[z])
    return SampleBatch(states, symbols, obs, lengths, failed)
