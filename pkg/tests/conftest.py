import numpy as np
import pytest

from hmmprog.distributions import ComponentParams, Family
from hmmprog.tmhmm import ObservationSequence, TiedMixtureHmm, absorbing_mask, sample_sequence

FAMILY_PARAMS = {
    Family.GAUSSIAN: lambda rng: (rng.normal(0, 2), rng.uniform(0.5, 2.0)),
    Family.GAMMA: lambda rng: (rng.uniform(1.0, 4.0), rng.uniform(0.5, 2.0)),
    Family.POISSON: lambda rng: (rng.uniform(0.5, 5.0),),
    Family.EXPONENTIAL: lambda rng: (rng.uniform(0.3, 2.0),),
}


def random_model(rng, n_states, n_components, dim=1, families=None, failure_emits=False, sparse=True):
    """Random valid absorbing model; the last state is terminal."""
    if families is None:
        families = tuple(list(Family)[i] for i in rng.integers(len(Family), size=dim))
    comps = tuple(
        ComponentParams(families, tuple(FAMILY_PARAMS[f](rng) for f in families)) for _ in range(n_components)
    )
    mask = absorbing_mask(n_states)
    if sparse and n_states > 2:
        # knock out one optional forward transition now and then
        i, j = np.triu_indices(n_states - 1, k=1)
        if len(i) and rng.random() < 0.5:
            pick = rng.integers(len(i))
            mask[i[pick], j[pick]] = False
    trans = np.zeros((n_states, n_states))
    for r in range(n_states - 1):
        support = np.flatnonzero(mask[r])
        trans[r, support] = rng.dirichlet(np.ones(len(support)))
    trans[-1, -1] = 1.0
    mix = rng.dirichlet(np.ones(n_components), size=n_states)
    init = np.zeros(n_states)
    init[:-1] = rng.dirichlet(np.ones(n_states - 1))
    return TiedMixtureHmm(init, trans, mix, comps, mask=mask, failure_emits=failure_emits)


def random_sequence(rng, m, maxlen, mask_prob=0.2):
    """Sequence sampled from ``m`` with some readings hidden."""
    seq, _ = sample_sequence(m, maxlen, rng)
    keep = seq.masks & (rng.random(seq.masks.shape) >= mask_prob)
    return ObservationSequence(seq.times, np.where(keep, seq.obs, np.nan), keep, seq.endlabel)


def reference_model():
    """4-state / 3-component absorbing model used for recovery experiments."""
    comps = (
        ComponentParams.gaussian([0.0, 0.0], 1.0),
        ComponentParams.gaussian([3.0, 0.0], 1.0),
        ComponentParams.gaussian([6.0, 3.0], 1.0),
    )
    trans = np.array(
        [[0.85, 0.12, 0.02, 0.01], [0.0, 0.85, 0.12, 0.03], [0.0, 0.0, 0.8, 0.2], [0.0, 0.0, 0.0, 1.0]]
    )
    mix = np.array([[0.8, 0.15, 0.05], [0.1, 0.8, 0.1], [0.05, 0.15, 0.8], [1 / 3, 1 / 3, 1 / 3]])
    return TiedMixtureHmm(np.array([1.0, 0.0, 0.0, 0.0]), trans, mix, comps)


def slow_hazard_model():
    """Four-state chain whose one-step hazard never exceeds 0.1; used for trade-off curves."""
    comps = (
        ComponentParams.gaussian([0.0, 0.0], 1.0),
        ComponentParams.gaussian([3.0, 0.0], 1.0),
        ComponentParams.gaussian([6.0, 3.0], 1.0),
    )
    trans = np.array(
        [[0.9, 0.09, 0.0, 0.01], [0.0, 0.9, 0.09, 0.01], [0.0, 0.0, 0.9, 0.1], [0.0, 0.0, 0.0, 1.0]]
    )
    mix = np.array([[0.8, 0.15, 0.05], [0.1, 0.8, 0.1], [0.05, 0.15, 0.8], [1 / 3, 1 / 3, 1 / 3]])
    return TiedMixtureHmm(np.array([1.0, 0.0, 0.0, 0.0]), trans, mix, comps)


@pytest.fixture
def ref_model():
    return reference_model()


def two_profile_library():
    """Slow and fast degraders over one shared set of three 1-D components."""
    from hmmprog.prognostics import ProfileLibrary

    comps = tuple(ComponentParams.gaussian([mu], 1.0) for mu in (0.0, 2.0, 4.0))
    slow = TiedMixtureHmm(
        np.array([1.0, 0.0, 0.0, 0.0]),
        np.array([[0.97, 0.03, 0, 0], [0, 0.97, 0.03, 0], [0, 0, 0.95, 0.05], [0, 0, 0, 1.0]]),
        np.array([[0.8, 0.15, 0.05], [0.3, 0.6, 0.1], [0.1, 0.2, 0.7], [1 / 3, 1 / 3, 1 / 3]]),
        comps,
    )
    fast = TiedMixtureHmm(
        np.array([1.0, 0.0, 0.0, 0.0]),
        np.array([[0.9, 0.1, 0, 0], [0, 0.9, 0.1, 0], [0, 0, 0.9, 0.1], [0, 0, 0, 1.0]]),
        np.array([[0.3, 0.5, 0.2], [0.1, 0.4, 0.5], [0.1, 0.2, 0.7], [1 / 3, 1 / 3, 1 / 3]]),
        comps,
    )
    return ProfileLibrary((slow, fast), np.array([0.5, 0.5]))


def pytest_terminal_summary(terminalreporter):
    lines = [
        value
        for key in ("passed", "failed")
        for rep in terminalreporter.stats.get(key, [])
        if rep.when == "call"
        for name, value in rep.user_properties
        if name == "acceptance"
    ]
    if lines:
        terminalreporter.section("acceptance criteria")
        for text in sorted(lines):
            terminalreporter.write_line(text)
