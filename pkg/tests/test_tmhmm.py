import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmmprog import tmhmm
from hmmprog.distributions import ComponentParams, Family
from hmmprog.errors import InvalidInputError, ZeroLikelihoodError
from hmmprog.tmhmm import (
    EmConfig,
    EndLabel,
    ObservationSequence,
    TiedMixtureHmm,
    absorbing_mask,
    em_fit,
    forward_backward,
    forward_filter,
    initial_model,
    sample_batch,
    sample_sequence,
    state_loglik,
    validate,
    viterbi,
)

from conftest import random_model, random_sequence, reference_model
from oracles import brute_force, component_pdf


def two_state(trans=None, mix=None, comps=None, **kw):
    comps = comps or (ComponentParams.gaussian([0.0], 1.0), ComponentParams.gaussian([4.0], 2.0))
    trans = np.array([[0.9, 0.1], [0.0, 1.0]]) if trans is None else trans
    mix = np.array([[0.7, 0.3], [0.5, 0.5]]) if mix is None else mix
    return TiedMixtureHmm(np.array([1.0, 0.0]), trans, mix, comps, **kw)


# -- validation --------------------------------------------------------------


def test_identity_two_state_is_valid():
    m = two_state(trans=np.eye(2), absorbing=False, mask=np.ones((2, 2), dtype=bool))
    assert validate(m) == []


def test_row_sum_violation_names_row():
    m = two_state(trans=np.array([[0.9, 0.08], [0.0, 1.0]]))
    v = validate(m)
    assert len(v) == 1 and v[0].row == 0


def test_below_diagonal_mask_flagged_as_absorbing_violation():
    mask = np.ones((3, 3), dtype=bool)
    trans = np.array([[0.5, 0.3, 0.2], [0.1, 0.6, 0.3], [0.0, 0.0, 1.0]])
    comps = (ComponentParams.gaussian([0.0], 1.0),)
    m = TiedMixtureHmm(np.array([1.0, 0, 0]), trans, np.ones((3, 1)), comps, mask=mask)
    rows_cols = {(x.row, x.col) for x in validate(m)}
    assert (1, 0) in rows_cols


def test_mask_violation_and_non_absorbing_terminal():
    trans = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.0, 0.2, 0.8]])
    mask = absorbing_mask(3)
    mask[0, 1] = False
    comps = (ComponentParams.gaussian([0.0], 1.0),)
    m = TiedMixtureHmm(np.array([1.0, 0, 0]), trans, np.ones((3, 1)), comps, mask=mask)
    what = [x.what for x in validate(m)]
    assert any("outside the mask" in w for w in what)
    assert any("not absorbing" in w for w in what)


def test_single_state_rejected():
    with pytest.raises(InvalidInputError):
        TiedMixtureHmm(np.ones(1), np.ones((1, 1)), np.ones((1, 1)), (ComponentParams.gaussian([0.0], 1.0),))


# -- emissions ----------------------------------------------------------------


def test_state_loglik_fully_masked_is_zero():
    np.testing.assert_allclose(state_loglik(two_state(), [np.nan], [False]), [0.0, 0.0], atol=1e-12)


def test_state_loglik_single_component_is_tied():
    m = two_state(mix=np.ones((2, 1)), comps=(ComponentParams.gaussian([1.0], 1.0),))
    v = state_loglik(m, [0.3])
    assert v[0] == v[1]


def test_state_loglik_hand_mixture():
    m = two_state()
    x = 1.2
    # evaluated by hand from the two Gaussian densities
    p0 = np.exp(-0.5 * x**2) / np.sqrt(2 * np.pi)
    p1 = np.exp(-0.5 * (x - 4.0) ** 2 / 2.0) / np.sqrt(2 * np.pi * 2.0)
    expected = np.log([0.7 * p0 + 0.3 * p1, 0.5 * p0 + 0.5 * p1])
    np.testing.assert_allclose(state_loglik(m, [x]), expected, rtol=1e-12)


# -- inference against path enumeration ---------------------------------------------


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    n_states=st.integers(2, 3),
    n_components=st.integers(1, 2),
    dim=st.integers(1, 2),
    maxlen=st.integers(1, 6),
    failure_emits=st.booleans(),
)
def test_inference_matches_enumeration(seed, n_states, n_components, dim, maxlen, failure_emits):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n_states, n_components, dim, failure_emits=failure_emits)
    seq = random_sequence(rng, m, maxlen)
    ref = brute_force(m, seq)
    beliefs, ll = forward_filter(m, seq)
    post = forward_backward(m, seq)
    path, lp = viterbi(m, seq)
    assert ll == pytest.approx(ref["loglik"], rel=1e-10)
    assert post.loglik == pytest.approx(ll, rel=1e-9)
    np.testing.assert_allclose(post.gamma, ref["gamma"], atol=1e-10)
    np.testing.assert_allclose(post.xi, ref["xi"], atol=1e-10)
    assert lp == pytest.approx(ref["best_logprob"], rel=1e-10)
    assert lp <= ll + 1e-12
    np.testing.assert_allclose(beliefs.sum(axis=1), 1.0, atol=1e-9)


def test_posterior_bundle_identities():
    rng = np.random.default_rng(3)
    m = random_model(rng, 3, 2, 2)
    seq = random_sequence(rng, m, 8)
    post = forward_backward(m, seq)
    np.testing.assert_allclose(post.gamma.sum(axis=1), 1.0, atol=1e-8)
    np.testing.assert_allclose(post.xi.sum(axis=(1, 2)), 1.0, atol=1e-8)
    np.testing.assert_allclose(post.xi.sum(axis=2), post.gamma[:-1], atol=1e-8)
    np.testing.assert_allclose(post.comp_resp.sum(axis=2), post.gamma, atol=1e-8)


def test_single_step_posterior():
    m = two_state()
    seq = ObservationSequence.from_array([[0.5]], EndLabel.CENSORED)
    post = forward_backward(m, seq)
    assert post.xi.shape == (0, 2, 2)
    np.testing.assert_allclose(post.gamma[0], [1.0, 0.0])


def test_deterministic_chain_orbit_under_uninformative_emissions():
    comps = (ComponentParams.gaussian([0.0], 1.0),)
    trans = np.array([[0, 1, 0, 0], [0, 0, 1, 0], [1, 0, 0, 0], [0, 0, 0, 1.0]])
    m = TiedMixtureHmm(
        np.array([0.5, 0.3, 0.2, 0.0]), trans, np.ones((4, 1)), comps,
        mask=np.ones((4, 4), dtype=bool), absorbing=False,
    )
    seq = ObservationSequence.from_array(np.full((4, 1), np.nan), EndLabel.CENSORED)
    beliefs, _ = forward_filter(m, seq)
    b = m.initial
    for t in range(4):
        np.testing.assert_allclose(beliefs[t], b, atol=1e-12)
        b = b @ trans
    path, _ = viterbi(m.replace(initial=np.array([1.0, 0, 0, 0])), seq)
    assert path.tolist() == [0, 1, 2, 0]


def test_masked_steps_reduce_to_prediction():
    rng = np.random.default_rng(8)
    m = random_model(rng, 3, 2, 1, families=(Family.GAUSSIAN,))
    obs = np.array([[0.3], [np.nan], [np.nan], [1.0]])
    beliefs, _ = forward_filter(m, ObservationSequence.from_array(obs, EndLabel.CENSORED))
    # steps 1 and 2 are unobserved and not final
    np.testing.assert_allclose(beliefs[1], beliefs[0] @ m.trans, atol=1e-12)
    np.testing.assert_allclose(beliefs[2], beliefs[1] @ m.trans, atol=1e-12)


def test_end_conditioning():
    m = reference_model()
    rng = np.random.default_rng(2)
    failed = censored = None
    while failed is None or censored is None:
        s, _ = sample_sequence(m, 15, rng)
        if s.failed:
            failed = s
        else:
            censored = s
    b, _ = forward_filter(m, censored)
    assert b[-1, m.terminal] == 0.0
    b, _ = forward_filter(m, failed)
    assert b[-1, m.terminal] == 1.0
    assert viterbi(m, failed)[0][-1] == m.terminal


def test_impossible_observation_raises_with_step():
    comps = (ComponentParams((Family.EXPONENTIAL,), ((1.0,),)),)
    m = TiedMixtureHmm(np.array([1.0, 0.0]), np.array([[0.9, 0.1], [0, 1.0]]), np.ones((2, 1)), comps)
    seq = ObservationSequence.from_array([[1.0], [-2.0], [1.0]], EndLabel.CENSORED)
    with pytest.raises(ZeroLikelihoodError) as info:
        forward_filter(m, seq)
    assert info.value.step == 1


def test_time_gaps_are_missing_steps():
    m = reference_model()
    gappy = ObservationSequence([0, 3], np.array([[0.1, 0.2], [3.0, 0.1]]), np.ones((2, 2), dtype=bool))
    dense = ObservationSequence.from_array(np.array([[0.1, 0.2], [np.nan] * 2, [np.nan] * 2, [3.0, 0.1]]))
    assert forward_filter(m, gappy)[1] == pytest.approx(forward_filter(m, dense)[1], rel=1e-14)


def test_viterbi_tie_breaks_to_lower_state():
    comps = (ComponentParams.gaussian([0.0], 1.0),)
    m = TiedMixtureHmm(
        np.array([0.5, 0.5, 0.0]),
        np.array([[0.5, 0.4, 0.1], [0.0, 0.9, 0.1], [0, 0, 1.0]]),
        np.ones((3, 1)),
        comps,
    )
    path, _ = viterbi(m, ObservationSequence.from_array([[0.0]], EndLabel.CENSORED))
    assert path.tolist() == [0]


# -- learning ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def reference_data():
    return sample_batch(reference_model(), 200, 60, np.random.default_rng(21)).sequences()


def test_em_monotone_and_masks_preserved(reference_data):
    init = initial_model(reference_data, 4, 3, seed=1)
    fit = em_fit(init, reference_data, EmConfig(max_iters=40, tol=0.0, dirichlet_alpha=1.0))
    assert np.all(np.diff(fit.loglik_trace) >= -1e-8)
    assert np.all(fit.model.trans[~fit.model.mask] == 0.0)
    assert validate(fit.model) == []


def test_em_penalised_objective_monotone(reference_data):
    init = initial_model(reference_data, 4, 3, seed=2)
    fit = em_fit(init, reference_data, EmConfig(max_iters=30, tol=0.0, dirichlet_alpha=1.5))
    assert np.all(np.diff(fit.loglik_trace) >= -1e-8)


def test_one_iteration_from_truth_does_not_decrease(reference_data):
    fit = em_fit(reference_model(), reference_data, EmConfig(max_iters=1, tol=0.0, dirichlet_alpha=1.0))
    assert len(fit.loglik_trace) == 2
    assert fit.loglik_trace[1] - fit.loglik_trace[0] >= -1e-8


def test_alpha_one_is_plain_likelihood(reference_data):
    m = reference_model()
    fit = em_fit(m, reference_data, EmConfig(max_iters=1, tol=0.0, dirichlet_alpha=1.0))
    plain = sum(forward_filter(m, s)[1] for s in reference_data)
    assert fit.loglik_trace[0] == pytest.approx(plain, rel=1e-10)


def test_em_identical_across_thread_counts(reference_data):
    init = initial_model(reference_data, 4, 3, seed=0)
    a = em_fit(init, reference_data, EmConfig(max_iters=5, tol=0.0, threads=1))
    b = em_fit(init, reference_data, EmConfig(max_iters=5, tol=0.0, threads=4))
    np.testing.assert_array_equal(a.loglik_trace, b.loglik_trace)
    np.testing.assert_array_equal(a.model.trans, b.model.trans)


def test_em_names_impossible_sequence():
    comps = (ComponentParams((Family.EXPONENTIAL,), ((1.0,),)),)
    m = TiedMixtureHmm(np.array([1.0, 0.0]), np.array([[0.9, 0.1], [0, 1.0]]), np.ones((2, 1)), comps)
    data = [ObservationSequence.from_array([[1.0], [2.0]]), ObservationSequence.from_array([[-1.0]])]
    with pytest.raises(ZeroLikelihoodError) as info:
        em_fit(m, data)
    assert info.value.sequence == 1
    assert "sequence 1" in str(info.value)


def test_non_gaussian_families_fit():
    comps = (
        ComponentParams((Family.POISSON, Family.GAMMA), ((1.0,), (2.0, 2.0))),
        ComponentParams((Family.POISSON, Family.GAMMA), ((6.0,), (5.0, 1.0))),
    )
    m = TiedMixtureHmm(
        np.array([1.0, 0.0, 0.0]),
        np.array([[0.9, 0.08, 0.02], [0.0, 0.85, 0.15], [0, 0, 1.0]]),
        np.array([[0.9, 0.1], [0.15, 0.85], [0.5, 0.5]]),
        comps,
    )
    data = sample_batch(m, 300, 80, np.random.default_rng(4)).sequences()
    init = initial_model(data, 3, 2, families=(Family.POISSON, Family.GAMMA), seed=0)
    fit = em_fit(init, data, EmConfig(max_iters=200, tol=1e-7))
    rates = sorted(c.params[0][0] for c in fit.model.components)
    assert rates == pytest.approx([1.0, 6.0], abs=0.3)
    assert np.all(np.diff(fit.loglik_trace) >= -1e-8)


# -- sampling -----------------------------------------------------------------------


def test_immediate_absorption():
    m = two_state(trans=np.array([[0.0, 1.0], [0.0, 1.0]]))
    for seed in range(20):
        seq, path = sample_sequence(m, 10, np.random.default_rng(seed))
        assert seq.failed and len(seq) == 2 and path.tolist() == [0, 1]
        assert not seq.masks[-1].any()
    # starting in the failure state gives the one-step failed sequence
    seq, _ = sample_sequence(m.replace(initial=np.array([0.0, 1.0])), 10, np.random.default_rng(0))
    assert seq.failed and len(seq) == 1


def test_censoring_at_maxlen():
    m = two_state(trans=np.array([[1.0, 0.0], [0.0, 1.0]]))
    seq, _ = sample_sequence(m, 7, np.random.default_rng(0))
    assert not seq.failed and len(seq) == 7


def test_empirical_transition_frequencies():
    m = reference_model()
    batch = sample_batch(m, 20_000, 40, np.random.default_rng(9))
    counts = np.zeros((4, 4))
    for path in batch.paths():
        np.add.at(counts, (path[:-1], path[1:]), 1)
    freq = counts[:3] / counts[:3].sum(axis=1, keepdims=True)
    np.testing.assert_allclose(freq, m.trans[:3], atol=0.01)


def test_sample_sequence_and_batch_agree_in_distribution():
    m = reference_model()
    rng = np.random.default_rng(10)
    single = np.array([len(sample_sequence(m, 50, rng)[0]) for _ in range(3000)])
    batch = sample_batch(m, 3000, 50, np.random.default_rng(11)).lengths
    assert abs(single.mean() - batch.mean()) < 0.6


def test_sampled_observations_follow_the_component():
    comps = (ComponentParams.gaussian([10.0], 1e-10),)
    m = two_state(mix=np.ones((2, 1)), comps=comps)
    seq, _ = sample_sequence(m, 30, np.random.default_rng(1))
    observed = seq.obs[seq.masks]
    assert np.all(np.abs(observed - 10.0) < 1e-3)
    assert component_pdf(comps[0], [10.0], [True]) > 1e3
