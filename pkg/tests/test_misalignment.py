from fractions import Fraction
from math import comb

import pytest
from hypothesis import given
from hypothesis import strategies as st

from grpo_lab.misalignment import (
    STATISTICS,
    MisalignConfig,
    conditional_damage,
    conditional_damage_exact,
    conditional_variance_formula,
    damage,
    damage_moments,
    fraction_monotonicity_scan,
    reward_vector_counts,
    reward_vector_oracle,
    variance_given_total,
    variance_given_total_oracle,
)


def all_configs(max_g):
    return [MisalignConfig(nc, G - nc) for G in range(2, max_g + 1) for nc in range(1, G)]


class TestDamage:
    def test_examples(self):
        cfg = MisalignConfig(12, 4)
        assert damage(0, 0, cfg) == 0.0
        assert damage(4, 12, cfg) == pytest.approx(6.0)
        assert damage(1, 0, cfg) == pytest.approx(0.75)

    def test_domain(self):
        with pytest.raises(ValueError):
            damage(5, 0, MisalignConfig(12, 4))
        with pytest.raises(ValueError):
            MisalignConfig(0, 3)

    def test_closed_form_example(self):
        st_ = damage_moments(MisalignConfig(12, 4))
        assert (st_.mean, st_.variance) == (3.0, 0.75)

    def test_all_zero_reward_vector(self):
        cfg = MisalignConfig(5, 3)
        f, g, gd = reward_vector_counts(cfg)
        assert (f[0], g[0], gd[0]) == (0, 5, 15)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            damage_moments(MisalignConfig(2, 2), "mc")


class TestOracles:
    @pytest.mark.parametrize("cfg", all_configs(20), ids=lambda c: f"{c.n_c}-{c.n_i}")
    def test_cells_match_closed_form(self, cfg):
        a = damage_moments(cfg)
        b = damage_moments(cfg, "oracle")
        assert abs(a.mean - b.mean) <= 1e-12 and abs(a.variance - b.variance) <= 1e-12

    @pytest.mark.parametrize("cfg", all_configs(12), ids=lambda c: f"{c.n_c}-{c.n_i}")
    def test_reward_vectors_match_cells(self, cfg):
        x = conditional_damage_exact(cfg)
        for name in STATISTICS:
            assert reward_vector_oracle(cfg, name) == pytest.approx(float(x[name]), abs=1e-12)

    @pytest.mark.parametrize("nc, ni", [(15, 5), (10, 10), (19, 1)])
    def test_reward_vectors_match_cells_g20(self, nc, ni):
        cfg = MisalignConfig(nc, ni)
        x = conditional_damage_exact(cfg)
        for name in ("mean", "variance", "e_delta_f_gt_g", "var_given_g_gt_f"):
            assert reward_vector_oracle(cfg, name) == pytest.approx(float(x[name]), abs=1e-12)

    def test_unknown_statistic(self):
        with pytest.raises(ValueError):
            reward_vector_oracle(MisalignConfig(2, 2), "median")


class TestOrdering:
    @pytest.mark.parametrize("cfg", [c for c in all_configs(20) if c.n_c > c.n_i],
                             ids=lambda c: f"{c.n_c}-{c.n_i}")
    def test_mass_and_variance_ordering(self, cfg):
        s = conditional_damage(cfg)
        assert s.e_delta_f_gt_g <= s.e_delta_g_gt_f
        assert s.var_given_f_gt_g < s.var_given_g_gt_f

    def test_symmetric_split_has_no_ordering_check(self):
        s = conditional_damage(MisalignConfig(4, 4))
        assert s.e_delta_f_gt_g == pytest.approx(s.e_delta_g_gt_f)

    def test_example_variances(self):
        vf, vg = conditional_variance_formula(MisalignConfig(12, 4))
        assert (vf, vg) == (Fraction(318, 697), Fraction(47742, 63019))

    @pytest.mark.parametrize("cfg", all_configs(14), ids=lambda c: f"{c.n_c}-{c.n_i}")
    def test_variance_formula_is_exact(self, cfg):
        x = conditional_damage_exact(cfg)
        vf, vg = conditional_variance_formula(cfg)
        if x["p_f_gt_g"] > 0:
            assert vf == x["var_given_f_gt_g"]
        if x["p_g_gt_f"] > 0:
            assert vg == x["var_given_g_gt_f"]

    @pytest.mark.parametrize("z", range(11))
    def test_variance_given_total_cellwise(self, z):
        cfg = MisalignConfig(7, 3)
        assert float(variance_given_total(cfg, z)) == pytest.approx(variance_given_total_oracle(cfg, z), abs=1e-12)


class TestFractionScan:
    @pytest.mark.parametrize("G", range(2, 21))
    def test_strictly_decreasing(self, G):
        rows = fraction_monotonicity_scan(G)
        assert all(b < a for (_, a), (_, b) in zip(rows, rows[1:]))

    def test_large_group(self):
        rows = fraction_monotonicity_scan(60)
        assert rows[0][0] == 30 and rows[-1][0] == 59

    def test_range_check(self):
        with pytest.raises(ValueError):
            fraction_monotonicity_scan(61)

    @given(st.integers(2, 40))
    def test_ratio_is_binomial_tail(self, G):
        for nc, fr in fraction_monotonicity_scan(G):
            tail = sum(comb(G, z) for z in range(nc + 1, G + 1)) / 2**G
            assert fr == pytest.approx(tail, rel=1e-12)
