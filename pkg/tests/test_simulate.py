import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxmbrl.core import SpecValidationError
from proxmbrl.simulate import (
    Dataset,
    SimConfig,
    block_size,
    generate_dataset,
    sample_batch,
    sample_trajectory,
    trajectory_uniforms,
)


def test_block_size_padding():
    assert block_size(1) == 8  # 2 + 4 = 6 -> 8
    assert block_size(2) == 12  # 10 -> 12
    assert block_size(9) == 40  # 38 -> 40
    assert all(block_size(t) % 4 == 0 for t in range(1, 20))


def test_uniform_counter_contract():
    """Trajectory i reads the stream at counter i * block / 4 regardless of batching."""
    whole = trajectory_uniforms(5, 0, 10, 3)
    part = trajectory_uniforms(5, 6, 3, 3)
    np.testing.assert_array_equal(whole[6:9], part)
    # the same counter read directly from a Philox generator
    k = block_size(3)
    g = np.random.Philox(key=5)
    g.advance(7 * k // 4)
    np.testing.assert_array_equal(np.random.Generator(g).random(k), whole[7])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**40), st.integers(0, 50), st.integers(1, 10))
def test_batches_are_order_free(seed, start, count):
    from proxmbrl.envs import make_fixture

    fx = make_fixture("tiny")
    whole = sample_batch(fx.spec, fx.behavioral, seed, 0, start + count)
    part = sample_batch(fx.spec, fx.behavioral, seed, start, count)
    np.testing.assert_array_equal(whole.states[start:], part.states)
    np.testing.assert_array_equal(whole.rewards[start:], part.rewards)


def test_single_trajectory_matches_batch(icu):
    b = sample_batch(icu.spec, icu.behavioral, 7, 0, 5)
    tr = sample_trajectory(icu.spec, icu.behavioral, 7, index=3)
    assert tr.states == tuple(int(s) for s in b.states[3, : icu.spec.horizon])
    assert tr.actions == tuple(int(a) for a in b.actions[3])
    assert tr.null_obs == int(b.null_obs[3])


def test_icu_observations_are_the_state(icu_data):
    Z = 2
    np.testing.assert_array_equal(icu_data.obs, icu_data.states // Z)
    # the null observation is an independent second look at s_0, so equal to y_0 here
    np.testing.assert_array_equal(icu_data.null_obs, icu_data.obs[:, 0])


def test_empirical_laws_match_kernels(tiny):
    """Simulated conditionals against the spec's kernels at 2e5 trajectories."""
    spec, pol = tiny.spec, tiny.behavioral
    b = sample_batch(spec, pol, 3, 0, 200_000)
    S, U, R = spec.num_full_states, spec.num_actions, spec.num_rewards
    trans = np.zeros((S, U, S))
    np.add.at(trans, (b.states[:, 0], b.actions[:, 0], b.states[:, 1]), 1)
    trans /= trans.sum(axis=-1, keepdims=True)
    assert np.abs(trans - spec.trans).max() < 0.02
    rk = np.zeros((S, U, R))
    np.add.at(rk, (b.states[:, 0], b.actions[:, 0], b.rewards[:, 0]), 1)
    rk /= rk.sum(axis=-1, keepdims=True)
    assert np.abs(rk - spec.reward_kernel).max() < 0.02
    ob = np.zeros((S, spec.num_obs))
    np.add.at(ob, (b.states[:, 0], b.null_obs), 1)
    ob /= ob.sum(axis=-1, keepdims=True)
    assert np.abs(ob - spec.obs).max() < 0.02


def test_dataset_round_trip(icu_data):
    text = icu_data.dumps()
    back = Dataset.loads(text)
    assert back.dumps() == text
    np.testing.assert_array_equal(back.states, icu_data.states)
    np.testing.assert_array_equal(back.reward_alphabet, icu_data.reward_alphabet)
    assert back.meta["seed"] == 7 and back.meta["fixture"] == "icu"
    obs = Dataset.loads(icu_data.observable().dumps())
    assert not obs.has_latent and obs.meta == icu_data.meta


def test_dataset_rejects_foreign_text():
    with pytest.raises(SpecValidationError):
        Dataset.loads("hello\n1; 2,3,4,5\n")


def test_generation_is_deterministic(icu):
    a = generate_dataset(icu.spec, icu.behavioral, SimConfig(200, 9))
    b = generate_dataset(icu.spec, icu.behavioral, SimConfig(200, 9))
    c = generate_dataset(icu.spec, icu.behavioral, SimConfig(200, 10))
    assert a.dumps() == b.dumps()
    assert a.dumps() != c.dumps()
    assert a.meta["policy_hash"] == icu.behavioral.digest()


def test_sim_config_validation():
    with pytest.raises(SpecValidationError):
        SimConfig(0)


def test_deterministic_spec_ignores_seed():
    from test_core import point_spec
    from proxmbrl.core import Policy

    spec = point_spec(S=3, U=1, T=5)
    pol = Policy.uniform(5, 3, 1, "state_based")
    a = sample_batch(spec, pol, 1, 0, 4)
    b = sample_batch(spec, pol, 999, 0, 4)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.states[0], [0, 1, 2, 0, 1, 2])
    np.testing.assert_array_equal(a.rewards[0], [0, 1, 0, 0, 1])


def test_icu_context_is_persistent(icu_data):
    z = icu_data.states % 2
    assert np.all(z == z[:, :1])


def test_icu_default_dataset_shape(icu_data):
    assert icu_data.size == 1000 and icu_data.horizon == 9
    assert icu_data.obs.shape == icu_data.actions.shape == icu_data.rewards.shape == (1000, 9)


def test_latent_projection_matches_plain_dataset(icu, icu_data):
    plain = generate_dataset(icu.spec, icu.behavioral, SimConfig(1000, 7, emit_latent=False), "icu")
    assert icu_data.observable().dumps() == plain.dumps()
