import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grpo_lab.advantage import (
    HyperParams,
    RolloutGroup,
    compute_advantages,
    token_advantage,
    tokens_from_uniforms,
)
from grpo_lab.entropy import cap_inactive_predicate
from grpo_lab.policy import (
    ABOVE_CAP,
    KINK,
    UNCLIPPED,
    check_policy,
    clipped_update,
    exp_update,
    importance_ratios,
    kl_divergence,
    log_ratio_constant,
    log_ratio_residual,
    penalized_objective,
    signed_advantage_sums,
    surrogate_value,
)
from grpo_lab.rng import make_stream
from grpo_lab.verify import random_kkt_instance

HALF = np.array([0.5, 0.5])


class TestExpUpdate:
    def test_zero_advantage_identity(self):
        pi = np.array([0.2, 0.3, 0.5])
        np.testing.assert_array_equal(exp_update(pi, np.zeros(3), 0.7), pi)

    def test_two_arm_logistic(self):
        out = exp_update(HALF, np.array([1.0, -1.0]), 0.1)
        np.testing.assert_allclose(out, [0.549834, 0.450166], atol=1e-6)
        assert out[0] == pytest.approx(1 / (1 + math.exp(-0.2)), rel=1e-15)

    def test_large_exponent_stable(self):
        out = exp_update(HALF, np.array([700.0, -700.0]), 1.0)
        assert np.all(np.isfinite(out)) and abs(out.sum() - 1) <= 1e-12

    def test_overflow_reported(self):
        with pytest.raises(OverflowError):
            exp_update(HALF, np.array([np.inf, 0.0]), 1.0)

    @settings(max_examples=50)
    @given(st.integers(2, 8), st.floats(-50, 50), st.integers(0, 2**32))
    def test_shift_invariance_and_normalization(self, V, shift, seed):
        s = make_stream(seed)
        pi = s.dirichlet(np.ones(V)) * 0.9 + 0.1 / V
        a = s.normal(size=V)
        x = exp_update(pi, a, 0.3)
        y = exp_update(pi, a + shift, 0.3)
        np.testing.assert_allclose(x, y, atol=1e-12)
        assert abs(x.sum() - 1) <= 1e-12 and np.all(x > 0)


class TestRatiosAndSurrogate:
    def test_importance_ratios(self):
        np.testing.assert_array_equal(importance_ratios(HALF, HALF), [1, 1])
        r = importance_ratios(np.array([0.549834, 0.450166]), HALF)
        np.testing.assert_allclose(r, [1.099668, 0.900332], atol=1e-12)
        assert np.dot(HALF, r) == pytest.approx(1.0)

    def test_surrogate_at_old_policy_is_zero(self):
        ro = RolloutGroup(np.array([0, 1, 1, 0]))
        adv = compute_advantages([1, 0, 1, 1])
        assert surrogate_value(HALF, HALF, ro, adv, 0.2) == pytest.approx(0.0, abs=1e-15)

    def test_surrogate_degenerate(self):
        ro = RolloutGroup(np.array([0, 1]))
        assert surrogate_value(np.array([0.9, 0.1]), HALF, ro, compute_advantages([1, 1]), 0.2) == 0

    def test_surrogate_example(self):
        ro = RolloutGroup(np.array([0, 1]))
        adv = compute_advantages([1, 0])
        v = surrogate_value(np.array([0.75, 0.25]), HALF, ro, adv, 0.2)
        assert v == pytest.approx(0.35, abs=1e-15)

    def test_signed_sums(self):
        ro = RolloutGroup(np.array([0, 0, 1, 1]))
        sp, sm = signed_advantage_sums(ro, compute_advantages([1, 0, 1, 0]), 2)
        np.testing.assert_allclose(sp, [1, 1])
        np.testing.assert_allclose(sm, [-1, -1])

    def test_check_policy(self):
        check_policy([0.25, 0.75])
        with pytest.raises(ValueError):
            check_policy([0.0, 1.0])
        with pytest.raises(ValueError):
            check_policy([0.3, 0.3])
        with pytest.raises(ValueError):
            check_policy([0.05, 0.95], floor=0.1)


class TestClippedUpdate:
    def test_zero_advantages_return_old_policy(self):
        pi = np.array([0.1, 0.6, 0.3])
        ro = RolloutGroup(np.array([0, 1, 2, 1]))
        new, sol = clipped_update(pi, ro, compute_advantages([1, 1, 1, 1]), 0.5, 0.2)
        np.testing.assert_allclose(new, pi, atol=1e-12)
        assert not sol.any_capped

    def test_inactive_cap_matches_exp_update(self):
        pi = np.array([0.05, 0.95])
        ro = RolloutGroup(np.array([0, 1, 1, 1]))
        adv = compute_advantages([1, 0, 0, 0])
        new, sol = clipped_update(pi, ro, adv, 0.01, 0.2)
        ref = exp_update(pi, token_advantage(ro, adv, pi), 0.01)
        assert np.all(sol.ratios <= 1.2)
        np.testing.assert_allclose(new, ref, atol=1e-10)

    def test_binding_cap_kink(self):
        pi = np.array([0.05, 0.95])
        ro = RolloutGroup(np.array([0, 1, 1, 1]))
        new, sol = clipped_update(pi, ro, compute_advantages([1, 0, 0, 0]), 0.1, 0.2)
        assert sol.branch[0] == KINK
        assert sol.ratios[0] == pytest.approx(1.2, rel=1e-14)
        assert 0 <= sol.xi[0] <= 1

    def test_above_cap_branch(self):
        pi = np.array([0.05, 0.95])
        ro = RolloutGroup(np.array([0, 1, 1, 1]))
        _, sol = clipped_update(pi, ro, compute_advantages([1, 0, 0, 0]), 1.0, 0.2)
        assert sol.branch[0] == ABOVE_CAP and sol.branch[1] == UNCLIPPED
        assert sol.branch_names == ["above-cap-branch", "unclipped"]

    def test_beats_grid_on_simplex(self):
        pi = np.array([0.05, 0.95])
        ro = RolloutGroup(np.array([0, 1, 1, 1]))
        adv = compute_advantages([1, 0, 0, 0])
        eta, eps = 0.1, 0.2
        new, _ = clipped_update(pi, ro, adv, eta, eps)
        sp, sm = signed_advantage_sums(ro, adv, 2)
        grid = np.linspace(1e-6, 1 - 1e-6, 100_001)
        cand = np.stack([grid, 1 - grid], axis=1)
        f_grid = penalized_objective(cand, pi, sp, sm, 4, eta, eps)
        f_star = penalized_objective(new, pi, sp, sm, 4, eta, eps)
        assert f_star >= f_grid.max() - 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32))
    def test_kkt_invariants(self, seed):
        s = make_stream(seed)
        pi, ro, adv, eta = random_kkt_instance(s)
        new, sol = clipped_update(pi, ro, adv, eta, 0.2)
        assert sol.stationarity.max() <= 1e-9
        assert sol.normalization_error <= 1e-12
        assert np.all(sol.mu == 0)
        assert np.all((sol.xi >= 0) & (sol.xi <= 1))
        kink = sol.branch == KINK
        assert np.all(new[kink] - pi[kink] <= 0.2 * pi[kink] + 1e-12)
        sp, sm = signed_advantage_sums(ro, adv, pi.size)
        f_new = penalized_objective(new, pi, sp, sm, ro.G, eta, 0.2)
        assert f_new >= -1e-12  # pi_old itself scores exactly 0
        j_new = penalized_objective(new, pi, sp, sm, ro.G, math.inf, 0.2)
        assert kl_divergence(new, pi) <= eta * j_new + 1e-12

    def test_above_cap_tokens_can_exceed_the_cap(self):
        # mass pushed off heavily penalized tokens lands on the rest, so a
        # token on the xi = 0 branch may sit strictly above 1 + eps
        pi, ro, adv, eta = random_kkt_instance(make_stream(365699))
        _, sol = clipped_update(pi, ro, adv, eta, 0.2)
        above = sol.branch == ABOVE_CAP
        assert above.any() and np.all(sol.ratios[above] > 1.2)

    @pytest.mark.parametrize("V, G, floor, eta", [(1000, 4, 1e-4, 1e-3), (200, 4, 1e-3, 1e-2)])
    def test_cap_inactive_predicate_keeps_ratios_below_cap(self, V, G, floor, eta):
        assert cap_inactive_predicate(
            HyperParams(group_size=G, step_size=eta, vocab_size=V, policy_floor=floor)).holds
        s = make_stream(V)
        for _ in range(50):
            pi = s.dirichlet(np.ones(V)) * (1 - V * floor) + floor
            ro = RolloutGroup(tokens_from_uniforms(pi, s.random(G)))
            _, sol = clipped_update(pi, ro, compute_advantages(s.integers(0, 2, size=G)), eta, 0.2)
            assert sol.ratios.max() <= 1.2 + 1e-10

    def test_sequence_mode_rejected(self):
        ro = RolloutGroup(np.array([[0, 1], [1, 1]]))
        with pytest.raises(ValueError):
            clipped_update(HALF, ro, compute_advantages([1, 0]), 0.1, 0.2)


class TestLogRatio:
    def test_zero_advantage(self):
        rep = log_ratio_residual(HALF, np.zeros(2), 0.1)
        assert rep.max_residual == 0.0 and rep.bound > 0

    def test_two_arm_bound_value(self):
        rep = log_ratio_residual(HALF, np.array([1.0, -1.0]), 0.01)
        assert rep.bound == pytest.approx(1.283e-7, rel=1e-3)
        assert rep.holds
        assert log_ratio_constant(0.5) == pytest.approx(1 / (36 * math.sqrt(3) * 0.125))

    def test_cubic_scaling(self):
        s = make_stream(5)
        pi = s.dirichlet(np.ones(4)) * 0.8 + 0.05
        ro = RolloutGroup(s.integers(0, 4, size=8))
        at = token_advantage(ro, compute_advantages(s.integers(0, 2, size=8)), pi).values
        r1 = log_ratio_residual(pi, at, 0.02).max_residual
        r2 = log_ratio_residual(pi, at, 0.01).max_residual
        assert r1 / r2 >= 7.5

    def test_standardized_flag(self):
        rep = log_ratio_residual(HALF, np.array([1.0, -1.0]), 0.01, standardized=True)
        assert (rep.mean, rep.variance) == (0.0, 1.0)
