"""
Solving and running a maintenance policy
========================================

The built-in three-state asset (healthy, worn, failed) can do nothing,
repair or replace. Value iteration gives a belief-dependent policy, which
is then run on a simulated fleet next to two fixed rules.
"""

import numpy as np

from hmmprog import default_instance, run_policy_loop, value_iteration
from hmmprog.pomdp import ActionKind, constant_policy, periodic_policy

p = default_instance()
policy = value_iteration(p, horizon=30, exact=False)
print(f"{len(policy.at())} alpha vectors at horizon {policy.horizon}")

# The chosen action along the healthy-to-failed edge of the belief simplex.
for w in np.linspace(0, 1, 6):
    b = np.array([1 - w, 0.0, w])
    a, v = policy.best_actions(b[None])
    print(f"P(failed) = {w:.1f}: {p.action_names[a[0]]:9s} value {v[0]:8.2f}")

idle = p.action_index(ActionKind.DONOTHING)
replace = p.action_index(ActionKind.REPLACE)
rules = {
    "solved policy": policy,
    "never maintain": constant_policy(idle),
    "replace every 10": periodic_policy(10, replace, idle),
}
print("\nrule               discounted return   failure rate   uptime")
for name, rule in rules.items():
    m = run_policy_loop(p, rule, nassets=5000, maxsteps=100, rng=3).metrics()
    print(
        f"{name:18s} {m['mean_discounted_return']:9.1f} ± {m['stderr_discounted_return']:.1f}"
        f"   {m['failure_rate']:12.3f}   {m['mean_uptime']:6.1f}"
    )
