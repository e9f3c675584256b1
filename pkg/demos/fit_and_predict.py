"""
Fitting a degradation model and predicting failure
==================================================

A synthetic fleet of 300 assets is simulated from a known four-state
model, a third of the histories are right-censored, and a fresh model is
fitted by EM. The fitted model then tracks one asset online and reports
its failure-time distribution.
"""

import numpy as np

from hmmprog import (
    ComponentParams,
    EmConfig,
    TiedMixtureHmm,
    em_fit,
    failure_time_distribution,
    generate_fleet,
    initial_model,
)
from hmmprog.prognostics import Belief
from hmmprog.tmhmm import filter_prefixes

np.set_printoptions(precision=3, suppress=True)

# Three shared 2-D Gaussian components; states differ only in how they mix them.
comps = (
    ComponentParams.gaussian([0.0, 0.0], 1.0),
    ComponentParams.gaussian([3.0, 0.0], 1.0),
    ComponentParams.gaussian([6.0, 3.0], 1.0),
)
truth = TiedMixtureHmm(
    np.array([1.0, 0.0, 0.0, 0.0]),
    np.array([[0.85, 0.12, 0.02, 0.01], [0, 0.85, 0.12, 0.03], [0, 0, 0.8, 0.2], [0, 0, 0, 1.0]]),
    np.array([[0.8, 0.15, 0.05], [0.1, 0.8, 0.1], [0.05, 0.15, 0.8], [1 / 3, 1 / 3, 1 / 3]]),
    comps,
)

fleet = generate_fleet(truth, nassets=300, maxlen=100, censorfrac=0.3, rng=1)
n_failed = sum(s.failed for s in fleet.sequences)
print(f"{len(fleet)} assets, {n_failed} observed failures, {len(fleet) - n_failed} censored")

# ---------------------------------------------------------------------------
# EM from a k-means start. Censored assets contribute "still running" only.
fit = em_fit(initial_model(fleet.sequences, 4, 3, seed=0), fleet.sequences, EmConfig(max_iters=500))
print(f"EM: {len(fit.loglik_trace) - 1} iterations, converged={fit.converged}")
print("fitted transitions:\n", fit.model.trans)
print("row-wise L1 error:", np.abs(fit.model.trans - truth.trans).sum(axis=1))

# ---------------------------------------------------------------------------
# Follow one failed asset step by step.
seq = next(s for s in fleet.sequences if s.failed and len(s) > 15)
beliefs, _ = filter_prefixes(fit.model, seq)
for t in (0, len(seq) // 2, len(seq) - 2):
    f = failure_time_distribution(fit.model, Belief(beliefs[t], t), horizon=20)
    print(
        f"after step {t:2d}: belief {beliefs[t]}, P(fail within 5) = {f.pmf[:5].sum():.3f}, "
        f"most probable failure step {f.most_probable_step()}"
    )
print(f"the asset actually failed at step {len(seq) - 1}")
