"""Maintenance POMDP built from a fitted HMM, solved by alpha-vector value iteration.

The hidden states and the "do nothing" dynamics are the HMM's. The finite
observation alphabet is the shared-component index: a step's reading is
summarised by which component produced it, so ``O[s', k]`` is state ``s'``'s
mixing weight on component ``k``.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linprog

from .distributions import ComponentParams
from .errors import ConfigError, ZeroLikelihoodError
from .prognostics import Belief
from .tmhmm import TiedMixtureHmm, _categorical, check

ROW_TOL = 1e-9
TIE_TOL = 1e-12


class ActionKind(str, enum.Enum):
    DONOTHING = "donothing"
    REPAIR = "repair"
    REPLACE = "replace"
    CUSTOM = "custom"


@dataclass(frozen=True)
class ActionConfig:
    name: str
    kind: ActionKind
    trans: np.ndarray | None = None
    reward: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ActionKind(self.kind))
        for attr in ("trans", "reward"):
            v = getattr(self, attr)
            if v is not None:
                object.__setattr__(self, attr, np.array(v, dtype=float))


@dataclass(frozen=True)
class ActionSpec:
    """Actions, costs and discount for :func:`build_pomdp`.

    Per-action ``trans``/``reward`` override the defaults derived from the
    kind. The numeric defaults are placeholders, not calibrated values.
    """

    actions: tuple[ActionConfig, ...] = field(
        default_factory=lambda: (
            ActionConfig("donothing", ActionKind.DONOTHING),
            ActionConfig("repair", ActionKind.REPAIR),
            ActionConfig("replace", ActionKind.REPLACE),
        )
    )
    discount: float = 0.95
    operate_reward: float = 1.0
    downtime_cost: float = 100.0
    repair_cost: float = 20.0
    replace_cost: float = 50.0
    repair_success: float = 0.8
    repair_from_terminal: bool = False
    reset_state: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ActionSpec":
        """Parse the JSON action file layout.

        ``{"actions": [{"name", "type", "trans"?, "reward"?}], "discount", ...}``;
        any other top-level key matching a field is passed through.
        """
        if not isinstance(d, dict) or "actions" not in d:
            raise ConfigError("action spec needs an 'actions' list")
        try:
            actions = tuple(
                ActionConfig(a["name"], a.get("type", a.get("kind")), a.get("trans"), a.get("reward")) for a in d["actions"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed action entry: {exc}") from exc
        extra = {k: v for k, v in d.items() if k != "actions" and k in cls.__dataclass_fields__}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown action spec keys: {sorted(unknown)}")
        return cls(actions, **extra)

    def to_dict(self) -> dict:
        out = {"actions": []}
        for a in self.actions:
            entry = {"name": a.name, "type": a.kind.value}
            if a.trans is not None:
                entry["trans"] = a.trans.tolist()
            if a.reward is not None:
                entry["reward"] = a.reward.tolist()
            out["actions"].append(entry)
        for name in self.__dataclass_fields__:
            if name != "actions":
                out[name] = getattr(self, name)
        return out


@dataclass(frozen=True, eq=False)
class MaintenancePomdp:
    """``<S, A, T, R, X, O, discount, initial>`` with per-action arrays.

    ``trans[a]`` is ``N x N``, ``rewards[a]`` has one entry per state and
    ``obs[a]`` is ``N x K`` (rows indexed by the state entered).
    """

    trans: np.ndarray
    rewards: np.ndarray
    obs: np.ndarray
    discount: float
    initial: np.ndarray
    action_names: tuple[str, ...]
    action_kinds: tuple[ActionKind, ...]
    terminal: int

    def __post_init__(self):
        T = np.array(self.trans, dtype=float)
        R = np.array(self.rewards, dtype=float)
        O = np.array(self.obs, dtype=float)
        A, N = R.shape
        if T.shape != (A, N, N) or O.shape[:2] != (A, N):
            raise ConfigError("inconsistent POMDP array shapes")
        for name, arr in (("transition", T), ("observation", O)):
            sums = arr.sum(axis=2)
            if np.any(arr < 0) or np.any(np.abs(sums - 1.0) > ROW_TOL):
                a, s = np.argwhere(np.abs(sums - 1.0) > ROW_TOL)[0] if np.any(np.abs(sums - 1.0) > ROW_TOL) else (0, 0)
                raise ConfigError(f"{name} matrix of action {self.action_names[a]!r} is not row-stochastic (row {s})")
        if not 0.0 <= self.discount <= 1.0:
            raise ConfigError("discount must lie in [0, 1]")
        if not np.all(np.isfinite(R)):
            raise ConfigError("rewards must be finite")
        for name, arr in (("trans", T), ("rewards", R), ("obs", O)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        init = np.array(self.initial, dtype=float)
        init.flags.writeable = False
        object.__setattr__(self, "initial", init)
        object.__setattr__(self, "action_names", tuple(self.action_names))
        object.__setattr__(self, "action_kinds", tuple(ActionKind(k) for k in self.action_kinds))

    @property
    def n_states(self) -> int:
        return self.rewards.shape[1]

    @property
    def n_actions(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_obs(self) -> int:
        return self.obs.shape[2]

    def action_index(self, kind_or_name) -> int:
        for i, (n, k) in enumerate(zip(self.action_names, self.action_kinds)):
            if kind_or_name in (n, k, getattr(k, "value", None)):
                return i
        raise ConfigError(f"no action named or of kind {kind_or_name!r}")


def repair_matrix(n_states: int, terminal: int, success: float = 0.8, from_terminal: bool = False) -> np.ndarray:
    """Move one state towards the healthiest (index 0) with probability ``success``."""
    R = np.eye(n_states)
    for i in range(1, n_states):
        if i == terminal and not from_terminal:
            continue
        R[i, i] = 1.0 - success
        R[i, i - 1] = success
    return R


def build_pomdp(m: TiedMixtureHmm, spec: ActionSpec | None = None) -> MaintenancePomdp:
    check(m)
    spec = spec or ActionSpec()
    N, F = m.n_states, m.terminal
    if not any(a.kind is ActionKind.DONOTHING for a in spec.actions):
        raise ConfigError("the action set must include a 'donothing' action")
    if len({a.name for a in spec.actions}) != len(spec.actions):
        raise ConfigError("action names must be unique")
    if not 0 <= spec.reset_state < N:
        raise ConfigError(f"reset state {spec.reset_state} is not one of the {N} model states")
    Ts, Rs = [], []
    for a in spec.actions:
        if a.kind is ActionKind.DONOTHING:
            T = m.trans
            R = np.full(N, spec.operate_reward)
            R[F] = -spec.downtime_cost
        elif a.kind is ActionKind.REPAIR:
            T = repair_matrix(N, F, spec.repair_success, spec.repair_from_terminal)
            R = np.full(N, -spec.repair_cost)
        elif a.kind is ActionKind.REPLACE:
            T = np.zeros((N, N))
            T[:, spec.reset_state] = 1.0
            R = np.full(N, -spec.replace_cost)
        else:
            if a.trans is None or a.reward is None:
                raise ConfigError(f"custom action {a.name!r} needs both 'trans' and 'reward'")
            T, R = a.trans, a.reward
        if a.trans is not None:
            T = a.trans
        if a.reward is not None:
            R = a.reward
        if np.shape(T) != (N, N):
            raise ConfigError(f"action {a.name!r}: transition matrix must be {N}x{N}, got {np.shape(T)}")
        if np.shape(R) != (N,):
            raise ConfigError(f"action {a.name!r}: reward must list one value per state ({N}), got {np.shape(R)}")
        Ts.append(np.asarray(T, dtype=float))
        Rs.append(np.asarray(R, dtype=float))
    O = np.broadcast_to(m.mixweights, (len(spec.actions),) + m.mixweights.shape)
    return MaintenancePomdp(
        np.stack(Ts),
        np.stack(Rs),
        O,
        spec.discount,
        m.initial,
        tuple(a.name for a in spec.actions),
        tuple(a.kind for a in spec.actions),
        F,
    )


def toy_model() -> TiedMixtureHmm:
    """Three-state (healthy, worn, failed) model with two shared components."""
    comps = (ComponentParams.gaussian([0.0], 1.0), ComponentParams.gaussian([3.0], 1.0))
    trans = np.array([[0.9, 0.08, 0.02], [0.0, 0.85, 0.15], [0.0, 0.0, 1.0]])
    mix = np.array([[0.85, 0.15], [0.2, 0.8], [0.5, 0.5]])
    return TiedMixtureHmm(np.array([1.0, 0.0, 0.0]), trans, mix, comps, terminal=2)


def default_instance() -> MaintenancePomdp:
    return build_pomdp(toy_model(), ActionSpec())


# -- beliefs -----------------------------------------------------------------


def _probs(b) -> np.ndarray:
    return b.probs if isinstance(b, Belief) else np.asarray(b, dtype=float)


def belief_update(p: MaintenancePomdp, b, a: int, k: int) -> Belief:
    """Bayes update after taking action ``a`` and observing symbol ``k``."""
    step = b.step + 1 if isinstance(b, Belief) else 0
    pred = _probs(b) @ p.trans[a]
    post = pred * p.obs[a][:, k]
    total = post.sum()
    if not total > 0:
        raise ZeroLikelihoodError(f"symbol {k} is impossible after action {p.action_names[a]!r}", step=step)
    return Belief(post / total, step)


def belief_update_batch(p: MaintenancePomdp, B: np.ndarray, actions: np.ndarray, symbols: np.ndarray) -> np.ndarray:
    """Row-wise :func:`belief_update`. Rows with an impossible symbol keep the prediction."""
    pred = np.einsum("bn,bnm->bm", B, p.trans[actions])
    post = pred * p.obs[actions, :, symbols]
    total = post.sum(axis=1, keepdims=True)
    ok = total[:, 0] > 0
    out = pred.copy()
    out[ok] = post[ok] / total[ok]
    return out


# -- value iteration -----------------------------------------------------------


def simplex_grid(n: int, resolution: float = 0.1) -> np.ndarray:
    """All beliefs whose coordinates are multiples of ``resolution``."""
    steps = int(round(1.0 / resolution))
    rows = []
    for bars in itertools.combinations(range(steps + n - 1), n - 1):
        parts = np.diff(np.concatenate([[-1], bars, [steps + n - 1]])) - 1
        rows.append(parts)
    return np.array(rows, dtype=float) / steps


def default_resolution(n: int, max_points: int = 5000) -> float:
    """0.1 when the grid stays small, otherwise the finest grid within ``max_points``."""
    steps = 10
    while steps > 1 and math.comb(steps + n - 1, n - 1) > max_points:
        steps -= 1
    return 1.0 / steps


def _dominated(a: np.ndarray, others: np.ndarray, epsilon: float) -> bool:
    return others.size > 0 and bool(np.any(np.all(a <= others + epsilon, axis=1)))


def _witness_lp(a: np.ndarray, kept: np.ndarray):
    """Belief maximising ``b.a - max_w b.w`` over the simplex, and that margin."""
    N = len(a)
    # variables: b_1..b_N, margin; maximise margin
    cost = np.zeros(N + 1)
    cost[-1] = -1.0
    A_ub = np.hstack([(kept - a[None, :]), np.ones((len(kept), 1))])
    b_ub = np.zeros(len(kept))
    A_eq = np.concatenate([np.ones(N), [0.0]])[None, :]
    bounds = [(0.0, 1.0)] * N + [(None, None)]
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0], bounds=bounds, method="highs")
    if res.status != 0:
        return None, -np.inf
    return res.x[:N], -res.fun


def prune(
    alphas: np.ndarray,
    epsilon: float = 1e-9,
    witnesses: np.ndarray | None = None,
    resolution: float | None = None,
    exact: bool = True,
) -> np.ndarray:
    """Indices (ascending) of the alpha vectors worth keeping.

    Vectors that attain the maximum at a witness belief (a regular simplex
    grid by default; ties go to the lower index) are kept unless another
    kept vector dominates them pointwise within ``epsilon``; of identical
    vectors the first survives. With ``exact`` every remaining vector is then
    tested by a linear program for a belief where it beats all kept vectors
    by more than ``epsilon``, which makes the pruned value function equal to
    the unpruned one everywhere, not just on the grid.
    """
    alphas = np.asarray(alphas, dtype=float)
    N = alphas.shape[1]
    if witnesses is None:
        witnesses = simplex_grid(N, resolution or default_resolution(N))
    cand = np.unique(np.argmax(witnesses @ alphas.T, axis=1))
    A = alphas[cand]
    weak = np.all(A[:, None, :] <= A[None, :, :] + epsilon, axis=2)
    strict = np.any(A[None, :, :] > A[:, None, :] + epsilon, axis=2)
    earlier = np.arange(len(cand))[None, :] < np.arange(len(cand))[:, None]
    dominated = weak & (strict | earlier)
    np.fill_diagonal(dominated, False)
    kept = list(cand[~dominated.any(axis=1)])
    if not exact:
        return np.array(kept, dtype=np.int64)

    in_grid = set(cand.tolist())
    rest = [i for i in range(len(alphas)) if i not in in_grid]
    while rest:
        i = rest[0]
        if _dominated(alphas[i], alphas[kept], epsilon):
            rest.pop(0)
            continue
        b, margin = _witness_lp(alphas[i], alphas[kept])
        if margin > epsilon:
            vals = alphas[rest] @ b
            j = rest[int(np.argmax(vals))]
            kept.append(j)
            rest.remove(j)
        else:
            rest.pop(0)
    return np.array(sorted(kept), dtype=np.int64)


@dataclass(frozen=True)
class AlphaSet:
    alphas: np.ndarray
    actions: np.ndarray

    def __len__(self):
        return len(self.actions)

    def values(self, B) -> np.ndarray:
        return np.asarray(B, dtype=float) @ self.alphas.T


@dataclass(frozen=True)
class AlphaVectorPolicy:
    """Alpha-vector sets for horizons ``1 .. len(sets)``."""

    sets: tuple[AlphaSet, ...]
    action_names: tuple[str, ...] = ()

    @property
    def horizon(self) -> int:
        return len(self.sets)

    def at(self, horizon: int | None = None) -> AlphaSet:
        h = self.horizon if horizon is None else horizon
        if not 1 <= h <= self.horizon:
            raise ValueError(f"policy has horizons 1..{self.horizon}, asked for {h}")
        return self.sets[h - 1]

    def value(self, b, horizon: int | None = None) -> float:
        return float(np.max(self.at(horizon).values(_probs(b))))

    def best_actions(self, B, horizon: int | None = None):
        """Vectorised :func:`best_action` over the rows of ``B``."""
        s = self.at(horizon)
        B = np.atleast_2d(np.asarray(B, dtype=float))
        vals = s.values(B)
        best = vals.max(axis=1, keepdims=True)
        tied = vals >= best - TIE_TOL * np.maximum(1.0, np.abs(best))
        # lowest action id among tied vectors, then lowest vector index
        key = np.where(tied, s.actions[None, :] * len(s) + np.arange(len(s))[None, :], np.iinfo(np.int64).max)
        pick = np.argmin(key, axis=1)
        return s.actions[pick], vals[np.arange(len(B)), pick]

    def __call__(self, B, t: int = 0):
        return self.best_actions(B)[0]


def best_action(policy: AlphaVectorPolicy, b, horizon: int | None = None):
    """``(action, value)`` of the maximising alpha vector at belief ``b``."""
    a, v = policy.best_actions(_probs(b)[None, :], horizon)
    return int(a[0]), float(v[0])


def _backproject(p: MaintenancePomdp, a: int, alphas: np.ndarray) -> list[np.ndarray]:
    """``g[k][m, s] = sum_s' O[s', k] T_a[s, s'] alpha_m[s']`` for each symbol ``k``."""
    return [alphas @ (p.trans[a] * p.obs[a][:, k][None, :]).T for k in range(p.n_obs)]


def value_iteration(
    p: MaintenancePomdp,
    horizon: int = 30,
    epsilon: float = 1e-9,
    resolution: float | None = None,
    stop_tol: float | None = 1e-6,
    exact: bool = True,
) -> AlphaVectorPolicy:
    """Exact finite-horizon value iteration over alpha vectors.

    Horizon ``n+1`` vectors for action ``a`` are ``R_a + discount * sum_k
    g_{a,k}``, one ``g`` picked per symbol from the back-projected horizon-``n``
    set, with pruning after every cross-sum. The iteration stops early once
    successive value functions differ by less than ``stop_tol`` on the
    witness grid (``None`` runs the full horizon). ``exact=False`` prunes on the witness grid only,
    which is faster but may drop vectors that win only between grid points.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    N = p.n_states
    grid = simplex_grid(N, resolution or default_resolution(N))

    def pruned(alphas, actions):
        idx = prune(alphas, epsilon, grid, exact=exact)
        return AlphaSet(alphas[idx], actions[idx])

    current = pruned(p.rewards.copy(), np.arange(p.n_actions))
    sets = [current]
    for _ in range(1, horizon):
        vecs, tags = [], []
        for a in range(p.n_actions):
            cross = None
            for g in _backproject(p, a, current.alphas):
                g = g[prune(g, epsilon, grid, exact=exact)]
                cross = g if cross is None else (cross[:, None, :] + g[None, :, :]).reshape(-1, N)
                cross = cross[prune(cross, epsilon, grid, exact=exact)]
            vecs.append(p.rewards[a] + p.discount * cross)
            tags.append(np.full(len(cross), a))
        nxt = pruned(np.concatenate(vecs), np.concatenate(tags))
        sets.append(nxt)
        if stop_tol is not None:
            diff = np.max(np.abs(nxt.values(grid).max(axis=1) - current.values(grid).max(axis=1)))
            if diff < stop_tol:
                break
        current = nxt
    return AlphaVectorPolicy(tuple(sets), p.action_names)


# -- simulation --------------------------------------------------------------


Policy = Callable[[np.ndarray, int], np.ndarray]


def constant_policy(action: int) -> Policy:
    return lambda B, t: np.full(len(B), action, dtype=np.int64)


def periodic_policy(period: int, action: int, default: int = 0) -> Policy:
    """Take ``action`` every ``period`` steps (at ``t = period-1, 2*period-1, ...``), else ``default``."""
    return lambda B, t: np.full(len(B), action if (t + 1) % period == 0 else default, dtype=np.int64)


def evaluate_policy(p: MaintenancePomdp, policy, episodes: int, maxsteps: int, rng: np.random.Generator | int = 0):
    """Mean discounted return over simulated episodes and its standard error.

    ``policy`` is an :class:`AlphaVectorPolicy` or any callable mapping a
    batch of beliefs and the step index to actions.
    """
    if episodes < 1:
        raise ValueError("need at least one episode")
    rng = np.random.default_rng(rng)
    returns = _rollout(p, policy, episodes, maxsteps, rng)
    stderr = returns.std(ddof=1) / np.sqrt(episodes) if episodes > 1 else 0.0
    return float(returns.mean()), float(stderr)


def _rollout(p: MaintenancePomdp, policy, episodes, maxsteps, rng) -> np.ndarray:
    s = _categorical(rng, np.broadcast_to(p.initial, (episodes, p.n_states)))
    B = np.tile(p.initial, (episodes, 1))
    ret = np.zeros(episodes)
    for t in range(maxsteps):
        a = np.asarray(policy(B, t), dtype=np.int64)
        ret += p.discount**t * p.rewards[a, s]
        s = _categorical(rng, p.trans[a, s])
        k = _categorical(rng, p.obs[a, s])
        B = belief_update_batch(p, B, a, k)
    return ret
