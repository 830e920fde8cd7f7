import warnings

import numpy as np
import pytest

from cli import random_point
from core_model import DEMO, ConsumerStrategy, ExpertStrategy, draw_params
from equilibrium import Regime, classify_equilibrium, regime_thresholds
from errors import EpsilonTooLarge, InvalidParam, RegimeMismatch
from oracle import BaseTree, CapacityTree, HiddenHistoryTree, exact_outcomes, verify_equilibrium
from extensions import (ChiParams, EpsilonParams, HeterogeneityPosterior, capacity_equilibrium,
                        capacity_thresholds, epsilon_equilibrium, epsilon_error_rate_effect,
                        epsilon_star, epsilon_thresholds, hidden_history_equilibrium,
                        hidden_history_thresholds, hidden_history_welfare_gap, visit_posteriors)


def test_epsilon_star_at_demo():
    assert epsilon_star(DEMO) == pytest.approx(1.0 / 3.0)


def test_error_rate_above_the_bound():
    with pytest.raises(EpsilonTooLarge) as info:
        epsilon_equilibrium(DEMO, EpsilonParams(0.4))
    assert info.value.bound == pytest.approx(1.0 / 3.0)


def test_error_free_thresholds_are_the_base_ones():
    th = epsilon_thresholds(DEMO, 0.0)
    base = regime_thresholds(DEMO)
    assert th["mu_eps_1"] == pytest.approx(base.mu_1_star)
    assert th["mu_eps_2"] == pytest.approx(base.mu_2_star)


def test_error_free_market_is_the_base_market():
    eq = epsilon_equilibrium(DEMO, EpsilonParams(0.0))
    assert eq.model == "epsilon"
    assert eq.regime is Regime.FOFU
    assert eq.certified


@pytest.mark.parametrize("h,expected", [(0.4, "+"), (0.95, "-")])
def test_error_rate_moves_the_upper_boundary(h, expected):
    effect = epsilon_error_rate_effect(DEMO.at(h=h))
    assert effect.signs["dmu_eps_2/deps"] == expected
    assert effect.expected_sign == expected
    assert effect.discrepancy is None


def test_error_rate_effect_matches_finite_difference():
    effect = epsilon_error_rate_effect(DEMO.at(h=0.4))
    assert effect.dmu_2_fd == pytest.approx(effect.dmu_2_analytic, rel=1e-3)


def test_error_rate_effect_at_even_honesty():
    effect = epsilon_error_rate_effect(DEMO)
    assert effect.expected_sign == "indeterminate"
    assert effect.discrepancy is None


def test_knob_validation():
    with pytest.raises(InvalidParam):
        EpsilonParams(0.6)
    with pytest.raises(InvalidParam):
        ChiParams(1.5)


def test_capacity_thresholds():
    th = capacity_thresholds(DEMO, 0.5)
    assert th["chi_star"] == pytest.approx(1.0 / 3.0)
    assert th["mu_chi_4"] == pytest.approx(4.0 / 4.625)


def test_no_shocks_reduce_to_the_base_thresholds():
    th = capacity_thresholds(DEMO, 0.0)
    base = regime_thresholds(DEMO)
    assert th["mu_chi_1"] == pytest.approx(base.mu_1_star)
    assert th["mu_chi_2"] == pytest.approx(base.mu_2_star)


def test_no_shocks_keep_full_fraud():
    eq = capacity_equilibrium(DEMO, ChiParams(0.0))
    assert eq.regime is Regime.FOFU
    assert eq.extras["strategic_undertreatment"]


def test_frequent_shocks_stop_strategic_undertreatment():
    eq = capacity_equilibrium(DEMO, ChiParams(0.5))
    assert eq.expert.t_s1 == 1.0
    assert eq.regime is Regime.FONU
    assert not eq.extras["strategic_undertreatment"]


def test_hidden_history_thresholds_at_demo():
    th = hidden_history_thresholds(DEMO)
    assert th["mu_gamma_2"] == pytest.approx(0.9)
    assert th["mu_gamma_1"] == 0.0
    assert th["mu_gamma_3"] == 0.0
    assert th["h_rejection_pivot"] == pytest.approx(0.5)


def test_hidden_history_full_fraud_at_demo():
    eq = hidden_history_equilibrium(DEMO)
    assert eq.model == "hidden_history"
    assert eq.regime is Regime.FOFU
    assert eq.extras["visit_posteriors"].gamma_m == 1.0
    assert eq.discrepancies


def test_visit_posteriors():
    accept_all = visit_posteriors(DEMO, ExpertStrategy(t_m1=0.0, t_s1=0.0), ConsumerStrategy())
    assert accept_all.gamma_m == 1.0
    assert accept_all.gamma_s == 1.0

    refuse_serious = visit_posteriors(DEMO, ExpertStrategy(t_m1=0.0, t_s1=0.0),
                                      ConsumerStrategy(a_m1=1.0, a_s1=0.0))
    assert refuse_serious.gamma_m == pytest.approx(2.0 / 3.0)
    assert refuse_serious.gamma_s == pytest.approx(2.0 / 3.0)
    assert refuse_serious.gamma_mm == 0.0
    assert refuse_serious.gamma_sm == 0.0


def test_hidden_history_welfare_gap():
    assert hidden_history_welfare_gap(DEMO.at(mu=0.8)) == pytest.approx(-0.6)
    with pytest.raises(RegimeMismatch):
        hidden_history_welfare_gap(DEMO)


def test_heterogeneity_posterior():
    assert HeterogeneityPosterior.from_strategy(0.5, 1.0).tau_h == 0.0
    assert HeterogeneityPosterior.from_strategy(0.5, 0.0).tau_h == pytest.approx(0.5)


def test_epsilon_star_without_a_fopu_region():
    p = DEMO.at(k=2.5)
    assert epsilon_star(p) == pytest.approx(1.25 / 2.625)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        eq = epsilon_equilibrium(p, EpsilonParams(0.0))
    assert eq.certified


def test_random_error_rates_stay_inside_the_bound():
    rng = np.random.default_rng(4)
    for _ in range(500):
        p = random_point(rng, "epsilon")
        assert 0.0 <= p.epsilon < min(epsilon_star(p), 0.5)


def test_error_free_and_shock_free_markets_reduce_to_the_base_market():
    rng = np.random.default_rng(12)
    for _ in range(500):
        p = draw_params(rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            base = classify_equilibrium(p)
            reduced = (epsilon_equilibrium(p, EpsilonParams(0.0)), capacity_equilibrium(p, ChiParams(0.0)))
        for eq in reduced:
            assert eq.regime is base.regime
            for name in ("t_m1", "t_s1"):
                assert getattr(eq.expert, name) == pytest.approx(getattr(base.expert, name), abs=1e-12)
            for name in ("a_m1", "a_s1"):
                assert getattr(eq.consumer, name) == pytest.approx(getattr(base.consumer, name), abs=1e-12)


def test_capacity_shocks_switch_strategic_undertreatment():
    rng = np.random.default_rng(31)
    for _ in range(500):
        p = draw_params(rng)
        chi = float(rng.uniform(0.0, 1.0))
        th = capacity_thresholds(p, chi)
        if abs(chi - th["chi_star"]) < 1e-6:
            continue
        eq = capacity_equilibrium(p, ChiParams(chi))
        assert verify_equilibrium(CapacityTree(), p.at(chi=chi), eq).is_equilibrium
        if chi < th["chi_star"]:
            assert eq.extras["strategic_undertreatment"] or any("chi < chi*" in n for n in eq.discrepancies)
        elif p.mu < th["mu_chi_4"]:
            assert not eq.extras["strategic_undertreatment"] or any("chi > chi*" in n for n in eq.discrepancies)


def test_hidden_history_profiles_certify_at_low_honesty():
    rng = np.random.default_rng(73)
    for _ in range(60):
        p = draw_params(rng).at(h=float(rng.uniform(0.05, 0.3)))
        eq = hidden_history_equilibrium(p)
        assert eq.certified
        assert verify_equilibrium(HiddenHistoryTree(), p.at(hidden_history=True), eq).is_equilibrium


@pytest.mark.parametrize("mu", np.linspace(0.68, 0.89, 8))
def test_hidden_history_welfare_gap_matches_the_trees(mu):
    p = DEMO.at(mu=float(mu))
    hidden = hidden_history_equilibrium(p)
    known = classify_equilibrium(p)
    assert hidden.regime is Regime.FOFU
    assert known.regime is Regime.POFU
    gap = (exact_outcomes(HiddenHistoryTree(), p.at(hidden_history=True), hidden).welfare
           - exact_outcomes(BaseTree(), p, known).welfare)
    assert gap == pytest.approx(hidden_history_welfare_gap(p), abs=1e-9)
    assert gap < 0.0
