import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from grpo_lab.advantage import HyperParams, cached_moment
from grpo_lab.clip_bounds import (
    ClipBoundInputs,
    advantage_bound,
    clip_bound_report,
    clip_correction_bound,
    mc_clip_estimate,
    phi_fn,
    raw_surrogate_lower_bound,
    signal_ratio,
    small_eta_bound,
    small_eta_constants,
)


def inputs(eta=5e-7, pi_min=1e-6, p=1e-3, L=4096, M=3.75, ea=None):
    P = HyperParams(group_size=16, step_size=eta, rollout_length=L, vocab_size=2, policy_floor=pi_min)
    return ClipBoundInputs(P, p, cached_moment(16, 1) if ea is None else ea, M)


class TestPhi:
    def test_values(self):
        assert phi_fn(1.0) == 0.0
        assert phi_fn(0.0) == 1.0
        assert phi_fn(1.2) == pytest.approx(0.0187859, abs=1e-7)
        np.testing.assert_allclose(phi_fn(np.array([1.0, math.e])), [0.0, 1.0], atol=1e-15)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            phi_fn(-0.1)

    @given(st.floats(0, 50))
    def test_nonnegative(self, u):
        assert phi_fn(u) >= -1e-12


class TestPresets:
    def test_advantage_bounds(self):
        assert advantage_bound(16) == pytest.approx(math.sqrt(15))
        assert advantage_bound(16, "sample") == pytest.approx(3.75)
        with pytest.raises(ValueError):
            advantage_bound(16, "other")

    def test_inputs_validated(self):
        with pytest.raises(ValueError, match="activation_rate"):
            inputs(p=1.5)
        with pytest.raises(ValueError):
            inputs(ea=5.0)


class TestRatioPreset:
    def test_numbers(self):
        rep = clip_bound_report(inputs())
        assert rep.r_max == pytest.approx(1.64872, abs=1e-5)
        assert rep.phi_r == pytest.approx(0.175639, abs=1e-6)
        assert rep.delta_plus == pytest.approx(0.448721, abs=1e-6)
        assert rep.C == pytest.approx(1.25e11)
        assert rep.bound_ctot == pytest.approx(223.731, rel=1e-5)
        assert rep.lower_nraw == pytest.approx(3837.3, rel=1e-4)
        assert rep.ratio == pytest.approx(17.1514, rel=1e-5)
        assert rep.min_branch == "sqrt_p"

    def test_zero_activation_gives_infinite_ratio(self):
        inp = inputs(eta=1e-7)
        assert inp.delta_plus == 0.0
        assert signal_ratio(ClipBoundInputs(inp.params, 0.0, 0.9, 3.75)) == math.inf

    def test_phi_ratio_branch(self):
        _, branch = clip_correction_bound(inputs(p=0.9, eta=1.74e-7), return_branch=True)
        assert branch == "phi_ratio"


class TestMonotonicity:
    @pytest.mark.parametrize("eta", [1e-7, 5e-7, 1e-6, 2e-6])
    def test_bound_increases_with_activation(self, eta):
        vals = [clip_correction_bound(inputs(eta=eta, p=p)) for p in np.linspace(0, 1, 21)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize("p", [0.0, 1e-3, 0.1, 1.0])
    def test_bound_increases_with_step(self, p):
        vals = [clip_correction_bound(inputs(eta=e, p=p)) for e in np.geomspace(1e-8, 3e-6, 25)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_lower_bound_decreases_with_step(self):
        vals = [raw_surrogate_lower_bound(inputs(eta=e)) for e in np.geomspace(1e-8, 1e-5, 25)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))
        assert vals[-1] == 0.0


class TestSmallEta:
    def test_constants(self):
        P = HyperParams(group_size=4, step_size=0.01, vocab_size=2, policy_floor=0.5)
        c1, c2, c3 = small_eta_constants(P, 1.0)
        assert c1 == pytest.approx(2 * math.sqrt(2 * math.e), rel=1e-15)
        assert c2 == pytest.approx(3.4366, abs=1e-4)
        assert c3 == pytest.approx(8 * (math.e - 1) / phi_fn(1.2))

    def test_dominates_exact_bound_for_small_steps(self):
        for eta in (1e-8, 1e-7, 3e-7):
            inp = inputs(eta=eta, L=1)
            assert clip_correction_bound(inp) <= small_eta_bound(inp.params, inp.M, inp.activation_rate) + 1e-15


class TestMonteCarlo:
    @pytest.mark.parametrize("L", [1, 2, 4, 8])
    @pytest.mark.parametrize("eta", [0.01, 0.05, 0.2])
    def test_bounds_hold(self, L, eta):
        V, floor = 6, 0.05
        pi = np.array([0.05, 0.05, 0.1, 0.2, 0.25, 0.35])
        P = HyperParams(group_size=8, step_size=eta, rollout_length=L, vocab_size=V, policy_floor=floor)
        est = mc_clip_estimate(pi, P, 400, seed=L * 1000 + int(eta * 100))
        inp = ClipBoundInputs(P, est.activation_rate, est.mean_abs_advantage, advantage_bound(8))
        assert est.max_ratio <= inp.r_max + 1e-12
        assert est.ctot_abs <= clip_correction_bound(inp)
        assert est.nraw_abs >= raw_surrogate_lower_bound(inp) - 3 * est.nraw_se

    def test_reproducible(self):
        P = HyperParams(group_size=4, step_size=0.1, vocab_size=3, policy_floor=0.1)
        a = mc_clip_estimate([0.2, 0.3, 0.5], P, 50, seed=9)
        b = mc_clip_estimate([0.2, 0.3, 0.5], P, 50, seed=9)
        assert a == b
