import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxmbrl.core import Policy, PomdpSpec, exact_marginalized_transition
from proxmbrl.envs import FixtureId, make_fixture
from proxmbrl.estimate import (
    EstimatedMatrices,
    _normalize,
    count_tensors,
    diagnose_matrix,
    estimate_matrices,
    estimate_phi,
    invertibility_report,
    merge_counts,
)
from proxmbrl.proximal import population_matrices
from proxmbrl.simulate import Dataset, SimConfig, generate_dataset


def one_state_spec(T=3):
    return PomdpSpec(1, 1, 1, 1, T, [1.0], np.ones((1, 1, 1)), np.ones((1, 1)), [2.5], np.ones((1, 1, 1)))


def slice_dataset(ds, rows):
    return Dataset(
        ds.null_obs[rows], ds.obs[rows], ds.actions[rows], ds.rewards[rows], ds.reward_alphabet,
        ds.num_obs, ds.num_actions, None, None, dict(ds.meta),
    )


def test_degenerate_space_gives_unit_matrices():
    spec = one_state_spec()
    ds = generate_dataset(spec, Policy.uniform(3, 1, 1, "state_based"), SimConfig(20))
    em = estimate_matrices(ds, alpha=0.5)
    np.testing.assert_array_equal(em.m_obs, np.ones((3, 1, 1, 1)))
    np.testing.assert_array_equal(em.m_joint[1:], np.ones((2, 1, 1, 1, 1)))
    np.testing.assert_array_equal(em.m_reward, np.ones((3, 1, 1, 1, 1)))
    np.testing.assert_array_equal(em.p_y0, [1.0])
    np.testing.assert_array_equal(em.naive_reward, np.full((3, 1, 1), 2.5))


def test_proxyrich_converges_to_population(proxyrich, proxyrich_pop):
    ds = generate_dataset(proxyrich.spec, proxyrich.behavioral, SimConfig(100_000, 3))
    em = estimate_matrices(ds, alpha=0.5)
    err = np.abs(em.m_obs - proxyrich_pop.m_obs).max(axis=(2, 3))
    assert err.max() < 0.02


def test_alpha_zero_flags_empty_columns(icu):
    ds = generate_dataset(icu.spec, icu.behavioral, SimConfig(40, 2))
    em = estimate_matrices(ds, alpha=0.0)
    c = em.counts["obs"].sum(axis=2)  # (T, U, Y_prev)
    assert np.any(c == 0)  # rare (y, u) pairs at small N
    np.testing.assert_array_equal(em.untrusted["m_obs"], c == 0)
    t, u, y = np.argwhere(c == 0)[0]
    np.testing.assert_allclose(em.m_obs[t, u, :, y], 0.25)
    # observed columns are raw frequencies
    t, u, y = np.argwhere(c > 0)[0]
    np.testing.assert_allclose(em.m_obs[t, u, :, y], em.counts["obs"][t, u, :, y] / c[t, u, y])


def test_columns_are_distributions(icu_data):
    em = estimate_matrices(icu_data.observable(), alpha=0.5)
    np.testing.assert_allclose(em.m_obs.sum(axis=2), 1.0)
    np.testing.assert_allclose(em.m_joint[1:].sum(axis=(2, 3)), 1.0)
    np.testing.assert_allclose(em.m_reward.sum(axis=(2, 3)), 1.0)
    np.testing.assert_allclose(em.p_y0.sum(), 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.one_of(st.just(0.0), st.floats(1e-6, 3.0)), st.integers(1, 5))
def test_normalize_property(seed, alpha, k):
    rng = np.random.default_rng(seed)
    c = rng.integers(0, 3, size=(k, 3, 4)).astype(float)
    est, bad = _normalize(c, (1,), alpha)
    np.testing.assert_allclose(est.sum(axis=1), 1.0)
    assert np.all(est >= 0)
    np.testing.assert_array_equal(bad, c.sum(axis=1) == 0)
    if alpha > 0:
        assert np.all(est > 0)


def test_shard_counts_merge(icu_data):
    ds = icu_data.observable()
    a = count_tensors(slice_dataset(ds, slice(0, 400)), num_rewards=len(ds.reward_alphabet))
    b = count_tensors(slice_dataset(ds, slice(400, None)), num_rewards=len(ds.reward_alphabet))
    whole = count_tensors(ds)
    merged = merge_counts(a, b)
    for k in whole:
        np.testing.assert_array_equal(merged[k], whole[k])


def test_matrices_round_trip(icu_data):
    em = estimate_matrices(icu_data.observable())
    text = em.dumps({"note": "x"})
    back = EstimatedMatrices.loads(text)
    assert back.dumps({"note": "x"}) == text
    np.testing.assert_array_equal(back.m_reward, em.m_reward)
    with pytest.raises(ValueError):
        EstimatedMatrices.loads("nothing here")


def test_pooled_matrices_share_slices(icu_data):
    em = estimate_matrices(icu_data.observable(), pooled=True)
    np.testing.assert_array_equal(em.m_obs[1], em.m_obs[5])
    np.testing.assert_array_equal(em.m_joint[2], em.m_joint[8])
    assert not np.array_equal(em.m_obs[0], em.m_obs[1])


def test_phi_single_context_matches_kernel():
    fx = make_fixture(FixtureId("tiny", param_overrides={"num_contexts": 1}))
    ds = generate_dataset(fx.spec, fx.behavioral, SimConfig(1_000_000, 5))
    phi = estimate_phi(ds, alpha=0.5)
    assert np.abs(phi.phi[0] - fx.spec.trans).max() < 3e-3


def test_phi_tiny_matches_marginalized(tiny):
    ds = generate_dataset(tiny.spec, tiny.behavioral, SimConfig(100_000, 6))
    phi = estimate_phi(ds, alpha=0.5)
    exact = exact_marginalized_transition(tiny.spec, tiny.behavioral)
    assert np.abs(phi.phi[0] - exact.phi[0]).max() < 0.02


def test_phi_unvisited_rows_are_uniform(icu):
    ds = generate_dataset(icu.spec, icu.behavioral, SimConfig(30, 1))
    phi = estimate_phi(ds, alpha=0.5)
    assert phi.unvisited.any()
    t, x, u = np.argwhere(phi.unvisited)[0]
    np.testing.assert_allclose(phi.phi[t, x, u], 0.25)
    # the last slice has no successor and holds the pooled estimate
    np.testing.assert_array_equal(phi.phi[-1], estimate_phi(ds, 0.5, pooled=True).phi[0])


def test_diagnose_matrix_cases():
    assert diagnose_matrix(np.eye(3)).status == "ok"
    r1 = diagnose_matrix(np.tile([[0.2], [0.3], [0.5]], (1, 3)))
    assert r1.status == "fail" and r1.rank == 1
    ns = diagnose_matrix(np.ones((4, 2)) / 4)
    assert ns.status == "fail" and ns.note == "non-square"
    w = diagnose_matrix(np.diag([1.0, 5e-9]))
    assert w.status == "warn" and w.cond == pytest.approx(2e8)
    # below the pseudo-inverse cutoff a direction counts as lost
    assert diagnose_matrix(np.diag([1.0, 1e-10])).status == "fail"


def test_icu_population_report_records_latent_failures(icu):
    rep = invertibility_report(population_matrices(icu.spec, icu.behavioral))
    kinds = {(r.kind, r.status) for r in rep.rows}
    # p(y_t | y_{t-1}, u) is square and invertible, but the 8 latent states
    # cannot be carried by 4 observations
    assert ("m_obs", "ok") in kinds
    assert rep.verdict == "fail"
    lat = [r for r in rep.rows if r.kind == "latent_state"]
    assert lat and all(r.status == "fail" and r.shape == (8, 4) for r in lat)
    assert rep.to_csv().startswith("kind,t,u,rows,cols,rank,cond,status,note\n")
