import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from core_model import DEMO, draw_params, ConsumerStrategy, ExpertStrategy, posterior_beliefs
from errors import ResentmentRegime
from payoffs import RevisitChoice, consumer_values, expert_values, period2_strategies, return_decision


def test_consumer_values_under_full_fraud():
    b = posterior_beliefs(DEMO, ExpertStrategy(t_m1=0.0, t_s1=0.0))
    v = consumer_values(DEMO, b)
    assert v.accept_serious == -5.0
    assert v.reject_serious == pytest.approx(-5.25)
    assert v.accept_minor == pytest.approx(-4.5)
    assert v.reject_minor == pytest.approx(-5.25)


def test_expert_margins_with_full_acceptance():
    v = expert_values(DEMO, ConsumerStrategy())
    assert v.overtreat_margin == 2.0
    assert v.undertreat_margin == 1.0


def test_expert_margins_at_pofu_acceptance():
    v = expert_values(DEMO, ConsumerStrategy(a_m1=1.0, a_s1=1.0 / 3.0))
    assert v.overtreat_margin == pytest.approx(0.0, abs=1e-12)


def test_second_visit_play():
    play = period2_strategies(DEMO)
    assert (play.t_m2, play.t_s2, play.a_m2, play.a_s2) == (0.0, 1.0, 1.0, 1.0)


def test_return_decision():
    assert return_decision(DEMO) is RevisitChoice.RETURN_TO_INITIAL
    with pytest.raises(ResentmentRegime):
        return_decision(DEMO.at(k_return=1.5))


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
@settings(max_examples=200, deadline=None)
def test_expert_margins_add_up_to_the_serious_margin(seed, a_m1, a_s1):
    p = draw_params(np.random.default_rng(seed))
    v = expert_values(p, ConsumerStrategy(a_m1=a_m1, a_s1=a_s1))
    assert v.overtreat_margin + v.undertreat_margin == pytest.approx((p.p_s - p.c_s) * a_m1, abs=1e-12)
