"""Synthetic fleets and closed-loop maintenance simulation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .pomdp import ActionKind, AlphaVectorPolicy, MaintenancePomdp, belief_update_batch
from .prognostics import ProfileLibrary
from .tmhmm import EndLabel, ObservationSequence, sample_batch


@dataclass(frozen=True)
class Fleet:
    sequences: list[ObservationSequence]
    profiles: np.ndarray
    paths: list[np.ndarray]

    def __len__(self):
        return len(self.sequences)

    def digest(self) -> str:
        """SHA-256 over every observation, mask and label; equal fleets hash equal."""
        h = hashlib.sha256()
        for s, prof in zip(self.sequences, self.profiles):
            h.update(np.int64(prof).tobytes())
            h.update(s.times.tobytes())
            h.update(np.where(s.masks, s.obs, 0.0).tobytes())
            h.update(s.masks.tobytes())
            h.update(s.endlabel.value.encode())
        return h.hexdigest()


def generate_fleet(model, nassets: int, maxlen: int, censorfrac: float = 0.0, rng: np.random.Generator | int = 0) -> Fleet:
    """Simulate ``nassets`` asset histories.

    Each asset draws its degradation profile from the library prior (a
    single model counts as a one-profile library). A ``censorfrac`` share of
    the assets is then cut at a uniformly drawn step, leaving a censored
    prefix; assets with a single step cannot be cut.
    """
    if not 0.0 <= censorfrac < 1.0:
        raise InvalidInputError("censorfrac must lie in [0, 1)")
    rng = np.random.default_rng(rng)
    lib = model if isinstance(model, ProfileLibrary) else ProfileLibrary((model,), np.ones(1))
    profiles = rng.choice(len(lib), size=nassets, p=lib.prior)
    seqs: list = [None] * nassets
    paths: list = [None] * nassets
    for p, m in enumerate(lib.profiles):
        idx = np.flatnonzero(profiles == p)
        if idx.size == 0:
            continue
        batch = sample_batch(m, idx.size, maxlen, rng)
        for i, s, path in zip(idx, batch.sequences(), batch.paths()):
            seqs[i], paths[i] = s, path
    n_cut = int(round(censorfrac * nassets))
    for i in np.sort(rng.choice(nassets, size=n_cut, replace=False)):
        s = seqs[i]
        if len(s) < 2:
            continue
        cut = int(rng.integers(1, len(s)))
        seqs[i] = ObservationSequence(s.times[:cut], s.obs[:cut], s.masks[:cut], EndLabel.CENSORED)
        paths[i] = paths[i][:cut]
    return Fleet(seqs, profiles, paths)


@dataclass(frozen=True)
class FleetRun:
    """Per-asset trajectories of a closed-loop run and their aggregates.

    Arrays are ``(nassets, maxsteps)`` (beliefs add a state axis). A step is
    *operating* when the asset runs un-failed under "do nothing", *downtime*
    when it sits failed under "do nothing", and *maintenance* when any other
    action is taken.
    """

    states: np.ndarray
    actions: np.ndarray
    symbols: np.ndarray
    rewards: np.ndarray
    beliefs: np.ndarray
    operating: np.ndarray
    downtime: np.ndarray
    maintenance: np.ndarray
    failures: np.ndarray
    discount: float

    @property
    def nassets(self) -> int:
        return self.states.shape[0]

    @property
    def maxsteps(self) -> int:
        return self.states.shape[1]

    @property
    def uptime(self) -> np.ndarray:
        return self.operating

    @property
    def failure_rate(self) -> float:
        return float(np.mean(self.failures > 0))

    @property
    def mean_uptime(self) -> float:
        return float(self.operating.mean())

    @property
    def total_reward(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    @property
    def discounted_return(self) -> np.ndarray:
        return self.rewards @ (self.discount ** np.arange(self.maxsteps))

    def metrics(self) -> dict[str, float]:
        ret = self.discounted_return
        return {
            "nassets": self.nassets,
            "maxsteps": self.maxsteps,
            "failure_rate": self.failure_rate,
            "mean_uptime": self.mean_uptime,
            "mean_downtime": float(self.downtime.mean()),
            "mean_maintenance": float(self.maintenance.mean()),
            "mean_failures": float(self.failures.mean()),
            "mean_total_reward": float(self.total_reward.mean()),
            "mean_discounted_return": float(ret.mean()),
            "stderr_discounted_return": float(ret.std(ddof=1) / np.sqrt(len(ret))) if len(ret) > 1 else 0.0,
        }


def _as_callable(policy):
    if isinstance(policy, AlphaVectorPolicy):
        return lambda B, t: policy.best_actions(B)[0]
    return policy


def asset_uniforms(rng, nassets: int, ncols: int) -> np.ndarray:
    """Uniform draws from one child stream per asset.

    Asset ``i`` always sees the same numbers for a given root seed, whatever
    the fleet size or the other assets' actions, so two policies run on the
    same seed face common random numbers.
    """
    if isinstance(rng, np.random.Generator):
        rng = int(rng.integers(2**63))
    children = np.random.SeedSequence(rng).spawn(nassets)
    out = np.empty((nassets, ncols))
    for i, c in enumerate(children):
        out[i] = np.random.default_rng(c).random(ncols)
    return out


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((u[:, None] * cdf[:, -1:] >= cdf).sum(axis=1), probs.shape[1] - 1)


def run_policy_loop(
    p: MaintenancePomdp,
    policy,
    nassets: int,
    maxsteps: int,
    rng: np.random.Generator | int = 0,
    env: MaintenancePomdp | None = None,
) -> FleetRun:
    """Simulate a fleet that acts on its beliefs step by step.

    The environment samples true states and component-index observations
    from ``env`` (default: ``p`` itself); beliefs are tracked with ``p``.
    Passing a different ``env`` gives a model-mismatch experiment.
    ``policy`` is an :class:`AlphaVectorPolicy` or any ``(beliefs, t) ->
    actions`` callable. Every asset draws from its own seeded stream.
    """
    env = p if env is None else env
    if env.n_states != p.n_states or env.n_actions != p.n_actions or env.n_obs != p.n_obs:
        raise InvalidInputError("environment and agent POMDPs must agree on states, actions and symbols")
    U = asset_uniforms(rng, nassets, 1 + 2 * maxsteps)
    act = _as_callable(policy)
    N, F = p.n_states, env.terminal
    idle = np.array([k is ActionKind.DONOTHING for k in p.action_kinds])
    shape = (nassets, maxsteps)
    states = np.empty(shape, dtype=np.int64)
    actions = np.empty(shape, dtype=np.int64)
    symbols = np.empty(shape, dtype=np.int64)
    rewards = np.empty(shape)
    beliefs = np.empty(shape + (N,))
    s = _inverse_cdf(np.broadcast_to(env.initial, (nassets, N)), U[:, 0])
    B = np.tile(p.initial, (nassets, 1))
    failures = np.zeros(nassets, dtype=np.int64)
    prev_failed = np.zeros(nassets, dtype=bool)
    for t in range(maxsteps):
        a = np.asarray(act(B, t), dtype=np.int64)
        in_f = s == F
        failures += in_f & ~prev_failed
        states[:, t], actions[:, t], beliefs[:, t] = s, a, B
        rewards[:, t] = env.rewards[a, s]
        s = _inverse_cdf(env.trans[a, s], U[:, 1 + 2 * t])
        k = _inverse_cdf(env.obs[a, s], U[:, 2 + 2 * t])
        symbols[:, t] = k
        B = belief_update_batch(p, B, a, k)
        prev_failed = in_f
    idle_steps = idle[actions]
    in_fail = states == F
    return FleetRun(
        states,
        actions,
        symbols,
        rewards,
        beliefs,
        operating=(idle_steps & ~in_fail).sum(axis=1),
        downtime=(idle_steps & in_fail).sum(axis=1),
        maintenance=(~idle_steps).sum(axis=1),
        failures=failures,
        discount=p.discount,
    )


def state_risk(p: MaintenancePomdp, lookahead: int) -> np.ndarray:
    """Per-state probability of entering the failure state within ``lookahead`` idle steps."""
    T = p.trans[p.action_index(ActionKind.DONOTHING)]
    nt = np.flatnonzero(np.arange(p.n_states) != p.terminal)
    stay = np.ones(len(nt))
    Q = T[np.ix_(nt, nt)]
    for _ in range(lookahead):
        stay = Q @ stay
    risk = np.ones(p.n_states)
    risk[nt] = 1.0 - stay
    return risk


def threshold_replace_policy(p: MaintenancePomdp, theta: float, lookahead: int = 5):
    """Replace when the believed risk of failing within ``lookahead`` steps reaches ``theta``."""
    risk = state_risk(p, lookahead)
    replace = p.action_index(ActionKind.REPLACE)
    idle = p.action_index(ActionKind.DONOTHING)
    return lambda B, t: np.where(B @ risk >= theta, replace, idle)
