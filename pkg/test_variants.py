import pytest

from core_model import DEMO
from equilibrium import Regime, regime_thresholds
from errors import InvalidParam, NotResentment
from extensions import HeterogeneityPosterior
from variants import (PriceQuote, VariantKnobs, alt_contract_threshold, alternative_contract_equilibrium,
                      capability_pivot, delay_thresholds, delayed_discovery_equilibrium,
                      endogenous_price_bound, endogenous_price_equilibrium, heterogeneity_thresholds,
                      heterogeneous_capability_equilibrium, price_quote, resentment_equilibrium)


def test_refund_contract_threshold():
    assert alt_contract_threshold(DEMO) == pytest.approx(0.8)


def test_refund_contract_keeps_serious_cases_treated_below_the_threshold():
    eq = alternative_contract_equilibrium(DEMO)
    assert eq.model == "alt_contract"
    assert eq.expert.t_s1 == 1.0
    assert eq.regime is Regime.FONU


def test_refund_contract_undertreats_above_the_threshold():
    eq = alternative_contract_equilibrium(DEMO.at(mu=0.9))
    assert eq.expert.t_s1 == 0.0
    assert eq.consumer.a_s1 == pytest.approx(1.0 / 3.0)


def test_delay_thresholds():
    th = delay_thresholds(DEMO, 0.5)
    assert th["delta_pivot"] == pytest.approx(1.0 / 3.0)
    assert th["mu_delta_3"] == pytest.approx(0.8)


def test_no_delay_gives_the_base_boundaries():
    th = delay_thresholds(DEMO, 0.0)
    base = regime_thresholds(DEMO)
    assert th["mu_delta_1"] == pytest.approx(base.mu_1_star)
    assert th["mu_delta_2"] == pytest.approx(base.mu_2_star)
    assert th["mu_delta_1_printed"] != pytest.approx(base.mu_1_star)


def test_long_delay_stops_undertreatment():
    eq = delayed_discovery_equilibrium(DEMO, 0.5)
    assert eq.model == "delta"
    assert eq.regime is Regime.FONU
    assert eq.discrepancies


def test_delay_needs_a_value():
    with pytest.raises(InvalidParam):
        delayed_discovery_equilibrium(DEMO)


def test_resentment_needs_a_costlier_return():
    with pytest.raises(NotResentment):
        resentment_equilibrium(DEMO.at(k_return=0.5))


def test_resentment_below_the_threshold():
    eq = resentment_equilibrium(DEMO.at(k_return=1.5, mu=0.2))
    assert (eq.expert.t_m1, eq.expert.t_s1) == (0.0, 1.0)
    assert (eq.consumer.a_m1, eq.consumer.a_s1) == (1.0, 1.0)


def test_resentment_above_the_threshold():
    eq = resentment_equilibrium(DEMO.at(k_return=1.5, mu=0.9))
    assert eq.expert.t_m1 == pytest.approx(5.0 / 9.0)
    assert eq.expert.t_s1 == 1.0
    assert eq.consumer.a_s1 == pytest.approx(1.0 / 3.0)


def test_capability_thresholds():
    assert capability_pivot(DEMO) == pytest.approx(0.2)
    th = heterogeneity_thresholds(DEMO, 0.5)
    assert th["mu_alpha_1"] == pytest.approx(0.375 / 1.6875)
    assert 0.0 <= th["mu_alpha_2"] <= 1.0


def test_capability_profile_carries_the_posterior():
    eq = heterogeneous_capability_equilibrium(DEMO, 0.5)
    assert eq.model == "heterogeneity"
    assert isinstance(eq.extras["heterogeneity_posterior"], HeterogeneityPosterior)
    with pytest.raises(InvalidParam):
        heterogeneous_capability_equilibrium(DEMO)


def test_price_quote_equalises_margins():
    quote = price_quote(DEMO)
    assert quote == PriceQuote(p_m_star=6.0, p_s_star=7.0)
    assert quote.p_m_star - DEMO.c_m == quote.p_s_star - DEMO.c_s
    assert endogenous_price_bound(DEMO) == pytest.approx(5.0 / 6.0)


def test_no_pure_price_equilibrium_below_the_bound():
    eq = endogenous_price_equilibrium(DEMO)
    assert eq.extras["no_pure_equilibrium"]
    assert not eq.certified


def test_price_equilibrium_above_the_bound():
    eq = endogenous_price_equilibrium(DEMO.at(mu=0.9))
    assert eq.regime is Regime.NOFU
    assert eq.extras["price_quote"] == price_quote(DEMO)
    assert "no_pure_equilibrium" not in eq.extras
    assert any("walking away" in note for note in eq.discrepancies)


def test_variant_knobs():
    assert VariantKnobs(alpha=0.5).apply(DEMO).alpha == 0.5
    with pytest.raises(InvalidParam) as info:
        VariantKnobs(delta=0.2, alpha=0.5)
    assert "one variant" in info.value.violations
    with pytest.raises(InvalidParam):
        VariantKnobs(delta=1.5)
