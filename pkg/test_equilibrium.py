import warnings

import numpy as np
import pytest

from core_model import DEMO, ConsumerStrategy, ExpertStrategy, draw_params, posterior_beliefs
from equilibrium import (Regime, classify_equilibrium, comparative_statics, fopu_profile, pofu_profile,
                         regime_thresholds, sign_label)
from oracle import BaseTree, verify_equilibrium
from payoffs import consumer_values
from errors import BoundaryAmbiguity, EmptyFOPURegion, RegimeCrossing


def test_demo_thresholds():
    th = regime_thresholds(DEMO)
    assert th.mu_1_star == pytest.approx(0.5 / 1.75)
    assert th.mu_2_star == pytest.approx(2.0 / 3.0)
    assert not th.h_at_or_below_pivot


def test_low_honesty_has_no_upper_threshold():
    th = regime_thresholds(DEMO.at(h=0.2))
    assert th.mu_2_star == 1.0
    assert th.h_at_or_below_pivot


def test_fofu_at_demo():
    eq = classify_equilibrium(DEMO)
    assert eq.regime is Regime.FOFU
    assert (eq.expert.t_m1, eq.expert.t_s1) == (0.0, 0.0)
    assert (eq.consumer.a_m1, eq.consumer.a_s1) == (1.0, 1.0)
    assert not eq.boundary_flag


def test_pofu_at_high_mu():
    eq = classify_equilibrium(DEMO.at(mu=0.9))
    assert eq.regime is Regime.POFU
    assert eq.expert.t_m1 == pytest.approx(1.0 - 0.05 / 0.225)
    assert eq.expert.t_s1 == 0.0
    assert eq.consumer.a_s1 == pytest.approx(1.0 / 3.0)


def test_fopu_at_low_mu():
    eq = classify_equilibrium(DEMO.at(mu=0.2))
    assert eq.regime is Regime.FOPU
    assert eq.expert.t_s1 == pytest.approx(0.375)
    assert eq.consumer.a_m1 == pytest.approx(0.75)


def test_threshold_point_is_flagged():
    with pytest.warns(BoundaryAmbiguity):
        eq = classify_equilibrium(DEMO.at(mu=regime_thresholds(DEMO).mu_2_star))
    assert eq.boundary_flag
    assert eq.regime is Regime.FOFU


def test_empty_fopu_region_warns():
    with pytest.warns(EmptyFOPURegion):
        th = regime_thresholds(DEMO.at(k=2.5))
    assert th.fopu_empty
    assert th.mu_1_star == 0.0


def test_regime_tags():
    accept = ConsumerStrategy()
    assert Regime.from_pattern(ExpertStrategy(t_m1=0.0, t_s1=1.0), accept) is Regime.FONU
    assert Regime.from_pattern(ExpertStrategy(t_m1=0.0, t_s1=1.0), ConsumerStrategy(a_m1=0.0)) is Regime.PONU
    assert Regime.from_pattern(ExpertStrategy(), ConsumerStrategy(a_s1=0.0)) is Regime.FOFU_R
    assert Regime.from_pattern(ExpertStrategy(t_m1=1.0, t_s1=0.0), accept) is Regime.NOFU
    assert Regime.FOFU_R.value == "FOFU-R"


def test_pofu_statics_signs():
    p = DEMO.at(mu=0.9)
    by_k = comparative_statics(p, "k", 1e-4)
    assert by_k.regime is Regime.POFU
    assert by_k.signs["dt_m1/dk"] == "-"
    assert comparative_statics(p, "p_s", 1e-4).signs["dt_m1/dp_s"] == "+"


def test_fopu_statics_signs():
    p = DEMO.at(mu=0.2)
    assert comparative_statics(p, "k", 1e-4).signs["dt_s1/dk"] == "-"
    assert comparative_statics(p, "p_s", 1e-4).signs["dt_s1/dp_s"] == "-"


def test_statics_step_across_a_boundary():
    with pytest.raises(RegimeCrossing) as info:
        comparative_statics(DEMO.at(mu=0.7), "k", 0.1)
    assert info.value.below.regime is not info.value.above.regime


def test_statics_rejects_bad_input():
    with pytest.raises(ValueError):
        comparative_statics(DEMO, "h", 1e-4)
    with pytest.raises(ValueError):
        comparative_statics(DEMO, "k", 0.0)


def test_sign_label():
    assert sign_label(1.0) == "+"
    assert sign_label(-1.0) == "-"
    assert sign_label(1e-12) == "0"


def _quiet(f, p):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return f(p)


@pytest.mark.parametrize("regime", [Regime.POFU, Regime.FOPU])
def test_mixing_makes_the_consumer_indifferent(regime):
    rng = np.random.default_rng(17)
    checked = 0
    for _ in range(50000):
        if checked == 1000:
            break
        p = draw_params(rng)
        th = _quiet(regime_thresholds, p)
        if th.mu_2_star < th.mu_1_star:
            continue
        eq = _quiet(classify_equilibrium, p)
        if eq.regime is not regime:
            continue
        v = consumer_values(p, posterior_beliefs(p, eq.expert))
        if regime is Regime.POFU:
            assert abs(v.accept_serious - v.reject_serious) <= 1e-9
        else:
            assert abs(v.accept_minor - v.reject_minor) <= 1e-9
        checked += 1
    assert checked == 1000


def test_overlap_profile_is_certified():
    p = DEMO.at(k=0.1)
    th = regime_thresholds(p)
    assert th.mu_2_star < th.mu_1_star
    for mu in (0.1, 0.2, 0.3, 0.4, 0.5):
        point = p.at(mu=mu)
        eq = classify_equilibrium(point)
        assert eq.certified
        assert verify_equilibrium(BaseTree(), point, eq).is_equilibrium


def test_overlap_keeps_the_split_when_it_holds():
    p = DEMO.at(k=0.1, mu=0.45)
    eq = classify_equilibrium(p)
    split = pofu_profile(p, regime_thresholds(p)) if p.mu > 1.0 / 3.0 else fopu_profile(p, regime_thresholds(p))
    if verify_equilibrium(BaseTree(), p, split).is_equilibrium:
        assert eq.regime is split.regime
        assert not eq.discrepancies
    else:
        assert any("overlap split" in note for note in eq.discrepancies)


def test_random_overlap_points_certify():
    rng = np.random.default_rng(99)
    found = 0
    for _ in range(20000):
        if found == 40:
            break
        p = draw_params(rng)
        th = _quiet(regime_thresholds, p)
        if not th.mu_2_star < th.mu_1_star:
            continue
        p = p.at(mu=float(rng.uniform(th.mu_2_star, th.mu_1_star)))
        eq = _quiet(classify_equilibrium, p)
        report = verify_equilibrium(BaseTree(), p, eq)
        assert report.is_equilibrium, (p, eq.regime, report.witness)
        found += 1
    assert found == 40
