import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grpo_lab.advantage import (
    HyperParams,
    RewardGroup,
    RolloutGroup,
    advantage_moment_oracle,
    advantage_pair_moment_oracle,
    advantages_batch,
    compute_advantages,
    enumerate_reward_vectors,
    max_abs_advantage,
    mean_abs_advantage_closed_form,
    sample_random_rewards,
    token_advantage,
)
from grpo_lab.rng import make_stream

binary_groups = st.lists(st.integers(0, 1), min_size=2, max_size=40)


class TestHyperParams:
    def test_defaults_valid(self):
        p = HyperParams()
        assert (p.G, p.L, p.V) == (16, 1, 2)

    @pytest.mark.parametrize(
        "kwargs, key",
        [
            ({"group_size": 1}, "group_size"),
            ({"step_size": 0.0}, "step_size"),
            ({"clip_ratio": 1.0}, "clip_ratio"),
            ({"rollout_length": 0}, "rollout_length"),
            ({"vocab_size": 1}, "vocab_size"),
            ({"vocab_size": 10, "policy_floor": 0.2}, "policy_floor"),
        ],
    )
    def test_violations_name_the_key(self, kwargs, key):
        with pytest.raises(ValueError, match=key):
            HyperParams(**kwargs)


class TestRandomRewards:
    def test_binary_support(self):
        r = sample_random_rewards(HyperParams(), make_stream(3))
        assert set(np.unique(r.rewards)) <= {0, 1}
        assert r.G == 16

    def test_same_seed_same_bits(self):
        a = sample_random_rewards(HyperParams(), make_stream(99, 4))
        b = sample_random_rewards(HyperParams(), make_stream(99, 4))
        np.testing.assert_array_equal(a.rewards, b.rewards)

    def test_trials_differ(self):
        a = make_stream(1, 0).integers(0, 2, 64)
        b = make_stream(1, 1).integers(0, 2, 64)
        assert not np.array_equal(a, b)

    def test_grand_mean_half(self):
        s = make_stream(2024)
        bits = s.integers(0, 2, size=(10**6, 16), dtype=np.int8)
        assert abs(bits.mean() - 0.5) < 0.002

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            RewardGroup(np.array([0, 2, 1]))


class TestComputeAdvantages:
    def test_half_split(self):
        a = compute_advantages([1, 1, 0, 0])
        np.testing.assert_allclose(a.advantages, [1, 1, -1, -1], atol=1e-15)
        assert not a.degenerate

    def test_degenerate(self):
        a = compute_advantages([1, 1, 1, 1])
        np.testing.assert_array_equal(a.advantages, np.zeros(4))
        assert a.degenerate

    def test_lone_positive(self):
        a = compute_advantages([1, 0, 0, 0])
        s3 = math.sqrt(3)
        np.testing.assert_allclose(a.advantages, [s3, -1 / s3, -1 / s3, -1 / s3], rtol=1e-15)

    @given(binary_groups)
    def test_zero_sum_and_max(self, r):
        a = compute_advantages(r).advantages
        assert abs(a.sum()) <= 1e-12
        assert np.abs(a).max() <= math.sqrt(len(r) - 1) + 1e-12

    @given(binary_groups)
    def test_complement_flips_sign_exactly(self, r):
        a = compute_advantages(r).advantages
        b = compute_advantages([1 - x for x in r]).advantages
        np.testing.assert_array_equal(a, -b)


class TestMomentOracle:
    def test_g16_mean_abs(self):
        assert advantage_moment_oracle(16, 1) == pytest.approx(0.967, abs=5e-4)

    def test_g2_second_moment(self):
        assert advantage_moment_oracle(2, 2) == 0.5

    def test_g4_mean_abs(self):
        assert advantage_moment_oracle(4, 1) == pytest.approx(0.80801, abs=1e-5)

    @pytest.mark.parametrize("G", range(2, 21))
    def test_closed_form_mean_abs(self, G):
        assert abs(advantage_moment_oracle(G, 1) - mean_abs_advantage_closed_form(G)) <= 1e-12

    @pytest.mark.parametrize("G", [3, 8, 13])
    def test_odd_signed_moments_vanish(self, G):
        for k in (1, 3, 5, 7):
            assert advantage_moment_oracle(G, k, signed=True) == 0.0

    def test_frozen_fourth_moments_g16(self):
        # frozen from the enumeration oracle
        assert advantage_moment_oracle(16, 4) == pytest.approx(1.3176466078138442, rel=1e-14)
        assert advantage_pair_moment_oracle(16) == pytest.approx(0.9787910073957438, rel=1e-14)

    def test_pair_moment_by_brute_force(self):
        G = 5
        a = advantages_batch(enumerate_reward_vectors(G))
        assert advantage_pair_moment_oracle(G) == pytest.approx(np.mean(a[:, 0] ** 2 * a[:, 1] ** 2), rel=1e-14)

    def test_budget(self):
        with pytest.raises(ValueError):
            advantage_moment_oracle(25, 1)
        with pytest.raises(ValueError):
            advantage_moment_oracle(1, 1)

    @pytest.mark.parametrize("G", [2, 7, 12])
    def test_enumerated_max(self, G):
        a = advantages_batch(enumerate_reward_vectors(G))
        assert np.abs(a).max() == pytest.approx(max_abs_advantage(G), abs=1e-12)


class TestTokenAdvantage:
    def test_zero_advantage(self):
        ro = RolloutGroup(np.array([0, 1, 1]))
        t = token_advantage(ro, compute_advantages([0, 0, 0]), np.array([0.5, 0.5]))
        np.testing.assert_array_equal(t.values, np.zeros(2))

    def test_two_arm_example(self):
        ro = RolloutGroup(np.array([0, 1]))
        t = token_advantage(ro, compute_advantages([1, 0]), np.array([0.5, 0.5]))
        np.testing.assert_allclose(t.values, [1.0, -1.0], rtol=1e-15)
        np.testing.assert_array_equal(t.visit_counts, [1, 1])

    def test_unvisited_tokens_zero(self):
        ro = RolloutGroup(np.array([0, 0, 2]))
        t = token_advantage(ro, compute_advantages([1, 0, 0]), np.array([0.2, 0.3, 0.5]))
        assert t.values[1] == 0.0

    def test_rejects_zero_probability(self):
        ro = RolloutGroup(np.array([0, 1]))
        with pytest.raises(ValueError):
            token_advantage(ro, compute_advantages([1, 0]), np.array([1.0, 0.0]))

    def test_rejects_out_of_vocab(self):
        with pytest.raises(ValueError):
            token_advantage(RolloutGroup(np.array([0, 3])), compute_advantages([1, 0]),
                            np.array([0.5, 0.5]))

    @settings(max_examples=60)
    @given(st.integers(2, 12), st.integers(1, 5), st.integers(2, 6), st.integers(0, 2**32))
    def test_policy_mean_and_bound(self, G, L, V, seed):
        s = make_stream(seed)
        pi = s.dirichlet(np.ones(V)) * 0.9 + 0.1 / V
        tokens = s.integers(0, V, size=(G, L))
        adv = compute_advantages(s.integers(0, 2, size=G))
        t = token_advantage(RolloutGroup(tokens), adv, pi)
        assert abs(np.dot(pi, t.values)) <= 1e-12
        bound = np.abs(adv.advantages).max() * (G * L) / (G * pi.min())
        assert np.all(np.abs(t.values) <= bound + 1e-12)
