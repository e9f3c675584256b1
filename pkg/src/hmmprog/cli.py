"""Command-line interface.

Exit codes: 0 success, 1 input or configuration error, 2 numerical failure
(zero likelihood), 3 EM stopped at ``--max-iters`` without converging.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import files
from .distributions import Family
from .errors import ConfigError, HmmprogError, InvalidInputError, StarvedComponentError, ZeroLikelihoodError
from .fleetsim import generate_fleet, run_policy_loop, threshold_replace_policy
from .pomdp import ActionKind, ActionSpec, build_pomdp, constant_policy, periodic_policy, toy_model, value_iteration
from .prognostics import (
    DEFAULT_OPERATING_RISK,
    Belief,
    ProfileLibrary,
    entropy_bits,
    failure_time_distribution,
    fit_profile_library,
    posterior_predictive_check,
    tradeoff_curve,
)
from .tmhmm import EmConfig, absorbing_mask, em_fit, filter_prefixes, initial_model

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_NOT_CONVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for numerical failures here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers -------------------------------------------------------------------


def _single_model(model, what: str):
    if isinstance(model, ProfileLibrary):
        raise InvalidInputError(f"{what} needs a single model, not a profile library")
    return model


def _check_dims(model, seqs):
    dim = model.dim
    for i, s in enumerate(seqs):
        if s.dim != dim:
            raise InvalidInputError(f"asset #{i} has {s.dim} sensor channels, model expects {dim}")


def _families(text: str | None, dim: int):
    if text is None:
        return None
    names = [t.strip() for t in text.split(",") if t.strip()]
    try:
        fams = tuple(Family(n) for n in names)
    except ValueError as exc:
        raise InvalidInputError(f"--families: {exc}") from None
    if len(fams) == 1:
        fams = fams * dim
    if len(fams) != dim:
        raise InvalidInputError(f"--families lists {len(fams)} families for {dim} sensor channels")
    return fams


def _floats(text: str, what: str) -> np.ndarray:
    """Comma list, or ``start:stop:step`` with ``stop`` included."""
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            n = int(round((stop - start) / step))
            return np.round(start + step * np.arange(n + 1), 12)
        return np.array([float(v) for v in text.split(",")], dtype=float)
    except ValueError:
        raise InvalidInputError(f"{what}: cannot parse {text!r}") from None


def _load_pomdp(args):
    model = _single_model(files.load_model(args.model), "a POMDP") if args.model else toy_model()
    spec = ActionSpec()
    if args.actions:
        try:
            spec = ActionSpec.from_dict(json.loads(Path(args.actions).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"action spec is not valid JSON: {exc}") from None
    return build_pomdp(model, spec)


def _solve(p, args):
    return value_iteration(p, horizon=args.horizon, epsilon=args.epsilon, exact=args.prune == "exact")


# -- commands ------------------------------------------------------------------


def cmd_train(args) -> int:
    ids, seqs, _ = files.load_sequences(args.data)
    if args.states < 2:
        raise InvalidInputError("--states must be at least 2 (one operating state plus the failure state)")
    if args.components < 1:
        raise InvalidInputError("--components must be at least 1")
    n = args.states
    if args.mask == "absorbing":
        mask = absorbing_mask(n)
    else:
        try:
            mask = np.loadtxt(args.mask, delimiter=",", ndmin=2) != 0
        except (OSError, ValueError) as exc:
            raise InvalidInputError(f"--mask: {exc}") from None
        if mask.shape != (n, n):
            raise InvalidInputError(f"--mask file holds a {mask.shape} matrix, expected {n}x{n}")
    fams = _families(args.families, seqs[0].dim)
    cfg = EmConfig(max_iters=args.max_iters, tol=args.tol, dirichlet_alpha=args.dirichlet_alpha, seed=args.seed)
    trace_path = Path(args.trace) if args.trace else Path(args.out).with_suffix(".trace.csv")
    if args.profiles > 1:
        model = fit_profile_library(seqs, args.profiles, n, args.components, families=fams, cfg=cfg)
        files.save_model(args.out, model)
        print(f"wrote {args.profiles}-profile library to {args.out}")
        return EXIT_OK
    init = initial_model(seqs, n, args.components, families=fams, mask=mask, seed=args.seed)
    fit = em_fit(init, seqs, cfg)
    files.save_model(args.out, fit.model)
    files.atomic_write(trace_path, files.dumps_rows(["iteration", "objective"], enumerate(fit.loglik_trace)))
    print(f"{'converged' if fit.converged else 'not converged'} after {len(fit.loglik_trace) - 1} iterations; "
          f"objective {float(fit.loglik_trace[-1])!r}")
    return EXIT_OK if fit.converged else EXIT_NOT_CONVERGED


def _predict_rows(model, aid, seq, H):
    rows = []
    if isinstance(model, ProfileLibrary):
        per = [filter_prefixes(m, seq) for m in model.profiles]
        with np.errstate(divide="ignore"):
            logp = np.log(model.prior)[None, :] + np.stack([ll for _, ll in per], axis=1)
        for t in range(len(seq.on_grid())):
            if not np.isfinite(logp[t]).any():
                break
            w = np.exp(logp[t] - logp[t].max())
            w /= w.sum()
            pmf, res, failed = np.zeros(H), 0.0, 0.0
            for wi, m, (beliefs, _) in zip(w, model.profiles, per):
                if wi == 0:
                    continue
                f = failure_time_distribution(m, Belief(beliefs[t], t), H)
                pmf += wi * f.pmf
                res += wi * f.residual
                failed += wi * f.already_failed
            surv = np.clip(1.0 - failed - np.cumsum(pmf), 0.0, 1.0)
            rows.append([aid, t + 1, *w, entropy_bits(w), failed, *pmf, res, *surv])
        return rows
    beliefs, _ = filter_prefixes(model, seq)
    for t, b in enumerate(beliefs):
        if not np.all(np.isfinite(b)):
            break
        f = failure_time_distribution(model, Belief(b, t), H)
        surv = np.clip(1.0 - f.already_failed - np.cumsum(f.pmf), 0.0, 1.0)
        rows.append([aid, t + 1, *b, f.already_failed, *f.pmf, f.residual, *surv, f.most_probable_step()])
    return rows


def cmd_predict(args) -> int:
    model = files.load_model(args.model)
    ids, seqs, _ = files.load_sequences(args.data)
    _check_dims(model, seqs)
    H = args.horizon
    if H < 1:
        raise InvalidInputError("--horizon must be at least 1")
    tail = ["already_failed", *(f"pmf_{h}" for h in range(1, H + 1)), "residual", *(f"survival_{h}" for h in range(1, H + 1))]
    if isinstance(model, ProfileLibrary):
        header = ["asset_id", "prefix", *(f"profile_{i}" for i in range(len(model))), "entropy_bits", *tail]
    else:
        header = ["asset_id", "prefix", *(f"belief_{i}" for i in range(model.n_states)), *tail, "most_probable_step"]
    rows = []
    for aid, seq in zip(ids, seqs):
        rows.extend(_predict_rows(model, aid, seq, H))
    files.atomic_write(args.out, files.dumps_rows(header, rows))
    return EXIT_OK


def cmd_policy(args) -> int:
    p = _load_pomdp(args)
    policy = _solve(p, args)
    if args.act:
        try:
            b = np.array([float(v) for v in args.belief.split(",")])
        except ValueError:
            raise InvalidInputError(f"--belief: cannot parse {args.belief!r}") from None
        if b.shape != (p.n_states,):
            raise InvalidInputError(f"--belief needs {p.n_states} entries")
        Belief(b)
        a, v = policy.best_actions(b[None, :])
        print(json.dumps({"action": p.action_names[int(a[0])], "action_id": int(a[0]), "value": float(v[0])}))
        return EXIT_OK
    files.atomic_write(args.solve_out, files.dumps_policy(policy, p.discount))
    return EXIT_OK


def cmd_simulate(args) -> int:
    p = _load_pomdp(args)
    env = None
    if args.env_model:
        env = build_pomdp(_single_model(files.load_model(args.env_model), "--env-model"),
                          ActionSpec.from_dict(json.loads(Path(args.actions).read_text())) if args.actions else ActionSpec())
    kind = args.policy_kind
    if kind == "optimal":
        policy = _solve(p, args)
    elif kind == "donothing":
        policy = constant_policy(p.action_index(ActionKind.DONOTHING))
    elif kind == "periodic":
        policy = periodic_policy(args.period, p.action_index(ActionKind.REPLACE), p.action_index(ActionKind.DONOTHING))
    else:
        policy = threshold_replace_policy(p, args.theta, args.lookahead)
    run = run_policy_loop(p, policy, args.nassets, args.maxsteps, rng=args.seed, env=env)
    files.atomic_write(args.out, files.dumps_rows(["metric", "value"], run.metrics().items()))
    return EXIT_OK


def cmd_tradeoff(args) -> int:
    model = files.load_model(args.model)
    if args.data:
        _, fleet, _ = files.load_sequences(args.data)
        _check_dims(model, fleet)
    else:
        if args.seed is None:
            raise InvalidInputError("--seed is required when the fleet is simulated")
        fleet = generate_fleet(model, args.nassets, args.maxlen, 0.0, rng=args.seed).sequences
    thresholds = _floats(args.thresholds, "--thresholds")
    if np.any((thresholds <= 0) | (thresholds >= 1)):
        raise InvalidInputError("--thresholds must lie strictly between 0 and 1")
    curve = tradeoff_curve(model, fleet, thresholds, lookahead=args.lookahead)
    rows = [(th, fr, up, int(abs(th - args.mark) < 1e-12)) for th, fr, up in curve.rows()]
    files.atomic_write(args.out, files.dumps_rows(["threshold", "failure_rate", "mean_uptime", "marked"], rows))
    return EXIT_OK


def cmd_ppc(args) -> int:
    model = _single_model(files.load_model(args.model), "ppc")
    _, seqs, _ = files.load_sequences(args.data)
    _check_dims(model, seqs)
    pvals = posterior_predictive_check(model, seqs, nreps=args.nreps, rng=args.seed, maxlen=args.maxlen)
    files.atomic_write(args.out, files.dumps_rows(["statistic", "p_value"], pvals.items()))
    return EXIT_OK


def cmd_generate(args) -> int:
    model = files.load_model(args.model) if args.model else toy_model()
    fleet = generate_fleet(model, args.nassets, args.maxlen, args.censor_frac, rng=args.seed)
    files.save_sequences(args.out, fleet.sequences)
    if args.profiles_out:
        files.atomic_write(args.profiles_out, files.dumps_rows(["asset_id", "profile"], enumerate(fleet.profiles)))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hmmprog", description="Tied-mixture HMM failure prognostics and maintenance planning.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="fit a model (or profile library) to a sequence file")
    t.add_argument("--data", required=True)
    t.add_argument("--states", type=int, required=True)
    t.add_argument("--components", type=int, required=True)
    t.add_argument("--families", help="comma list, one per sensor channel (or one for all); default gaussian")
    t.add_argument("--mask", default="absorbing", help="'absorbing' or a CSV file of 0/1 allowed transitions")
    t.add_argument("--profiles", type=int, default=1, help="fit a profile library with this many profiles")
    t.add_argument("--max-iters", type=int, default=100)
    t.add_argument("--tol", type=float, default=1e-6)
    t.add_argument("--dirichlet-alpha", type=float, default=1.05)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--trace", help="objective trace CSV (default: <out>.trace.csv)")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="per-prefix beliefs, failure-time pmf and survival curves")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    def pomdp_args(sp):
        sp.add_argument("--model", help="model file (default: built-in 3-state toy)")
        sp.add_argument("--actions", help="JSON action spec (default: donothing/repair/replace)")
        sp.add_argument("--horizon", type=int, default=30)
        sp.add_argument("--epsilon", type=float, default=1e-9)
        sp.add_argument("--prune", choices=("grid", "exact"), default="grid")

    q = sub.add_parser("policy", help="solve the maintenance POMDP or pick an action for a belief")
    pomdp_args(q)
    mode = q.add_mutually_exclusive_group(required=True)
    mode.add_argument("--solve-out", help="write alpha vectors and actions to this JSON file")
    mode.add_argument("--act", action="store_true", help="print the best action for --belief")
    q.add_argument("--belief", help="comma-separated state probabilities (with --act)")
    q.set_defaults(func=cmd_policy)

    s = sub.add_parser("simulate", help="closed-loop fleet simulation; writes metrics CSV")
    pomdp_args(s)
    s.add_argument("--policy-kind", choices=("optimal", "donothing", "periodic", "threshold"), default="optimal")
    s.add_argument("--period", type=int, default=10)
    s.add_argument("--theta", type=float, default=DEFAULT_OPERATING_RISK)
    s.add_argument("--lookahead", type=int, default=5)
    s.add_argument("--env-model", help="simulate the environment from this model instead (mismatch mode)")
    s.add_argument("--nassets", type=int, default=1000)
    s.add_argument("--maxsteps", type=int, default=100)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("tradeoff", help="risk / uptime trade-off curve CSV")
    r.add_argument("--model", required=True)
    r.add_argument("--data", help="fleet sequence file (default: simulate one from the model)")
    r.add_argument("--nassets", type=int, default=300)
    r.add_argument("--maxlen", type=int, default=200)
    r.add_argument("--thresholds", default="0.01:0.5:0.005", help="comma list or start:stop:step")
    r.add_argument("--lookahead", type=int, default=5)
    r.add_argument("--mark", type=float, default=DEFAULT_OPERATING_RISK, help="threshold flagged in the 'marked' column")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_tradeoff)

    c = sub.add_parser("ppc", help="posterior predictive check p-values CSV")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--nreps", type=int, default=200)
    c.add_argument("--maxlen", type=int)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_ppc)

    g = sub.add_parser("generate", help="simulate a fleet sequence file")
    g.add_argument("--model", help="model or library file (default: built-in 3-state toy)")
    g.add_argument("--nassets", type=int, default=300)
    g.add_argument("--maxlen", type=int, default=200)
    g.add_argument("--censor-frac", type=float, default=0.0)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--profiles-out", help="also write each asset's true profile index")
    g.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "act", False) and not args.belief:
            raise UsageError("hmmprog policy: --act needs --belief")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    except (ZeroLikelihoodError, StarvedComponentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (HmmprogError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
