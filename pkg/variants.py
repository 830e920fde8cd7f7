"""Refund contract, late discovery, resentment, capability gaps and chosen prices.

Classifiers follow the published regime maps. Where a printed formula
and the model's payoff tree disagree the tree wins, and the profile
carries a note in `discrepancies`.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional

from config import TOL
from core_model import ModelParams, ExpertStrategy, ConsumerStrategy, validate_params
from equilibrium import EquilibriumProfile, Regime, pofu_t_m1
from errors import InvalidParam, NotResentment
from extensions import HeterogeneityPosterior
from oracle import (AltContractTree, DelayTree, EndogenousTree, HeterogeneityTree, ResentmentHiddenTree,
                    ResentmentTree, certify_or_search, find_equilibria_grid, mixed_profile, node_values,
                    settle_plans, solve_indifference, verify_equilibrium)

logger = logging.getLogger("credence.variants")


@dataclass(frozen=True)
class VariantKnobs:
    delta: Optional[float] = None
    alpha: Optional[float] = None
    resentment: bool = False
    alt_contract: bool = False
    endogenous_price: bool = False

    def __post_init__(self):
        bad = []
        if self.delta is not None and not 0.0 < self.delta < 1.0:
            bad.append("0 < delta < 1")
        if self.alpha is not None and not 0.0 < self.alpha < 1.0:
            bad.append("0 < alpha < 1")
        active = [self.delta is not None, self.alpha is not None,
                  self.resentment, self.alt_contract, self.endogenous_price]
        if sum(active) > 1:
            bad.append("one variant")
        if bad:
            raise InvalidParam(bad)

    def apply(self, p: ModelParams) -> ModelParams:
        return p.at(delta=self.delta, alpha=self.alpha, resentment=self.resentment,
                    alt_contract=self.alt_contract, endogenous_price=self.endogenous_price)


@dataclass(frozen=True)
class PriceQuote:
    p_m_star: float
    p_s_star: float


def _profile(model, e, c, thresholds, **kw):
    return EquilibriumProfile(regime=Regime.from_pattern(e, c), expert=e, consumer=c,
                              thresholds=thresholds, model=model, **kw)


def _certified(tree, p, e, c, thresholds, **kw):
    e, c = settle_plans(tree, p, e, c)
    return certify_or_search(tree, p, _profile(tree.model, e, c, thresholds, **kw))


def _searched(tree, p, thresholds, reason, **kw):
    """First certified profile of the grid search, for regions without a closed form."""
    logger.info(f"{tree.model}: {reason}; searching the payoff tree")
    found = find_equilibria_grid(tree, p)
    best = found[0]
    return replace(best, thresholds=thresholds, requires_oracle=True,
                   extras={**best.extras, "searched_equilibria": len(found), **kw})


def _mixed_t_m1(tree, p, t_s1, a_s1, guess):
    """t_m1 making the serious-recommendation consumer indifferent, a_s1 held fixed."""
    e0 = ExpertStrategy(t_m1=guess, t_s1=t_s1)
    solved = mixed_profile(tree, p, e0, ConsumerStrategy(a_m1=1.0, a_s1=a_s1), "t_m1", "a_s1", solve_a=False)
    return None if solved is None else solved[0].t_m1


def _note_mismatch(notes, label, printed, used):
    if abs(printed - used) > 1e-6:
        return notes + (f"{label}: printed {printed:.6g}, payoff tree gives {used:.6g}",)
    return notes


# Refund contract

def alt_contract_threshold(p: ModelParams):
    h, k = p.h, p.k
    return k / ((1 - h) * h * (p.p_s - p.p_m) + h * k)


def alternative_contract_equilibrium(p: ModelParams) -> EquilibriumProfile:
    """Regime when the first expert refunds the minor fee after an undertreatment.

    Undertreatment only survives above the threshold and only when the
    fee gap p_s - p_m exceeds c_s.
    """
    p = validate_params(p.at(alt_contract=True))
    tree = AltContractTree()
    spread = p.p_s - p.p_m
    ms, mm = p.serious_margin, p.minor_margin
    mu_alt = alt_contract_threshold(p)
    th = {"mu_alt": mu_alt, "fee_gap_minus_cost": spread - p.c_s}
    notes = ()

    if p.mu <= mu_alt or p.h * spread <= p.k:
        if spread > p.c_s:
            notes += ("serious acceptance printed as (p_m-c_m)/(p_s-c_s) below the threshold; "
                      "full acceptance keeps t_s1 = 1 a best reply",)
        return _certified(tree, p, ExpertStrategy(t_m1=0.0, t_s1=1.0), ConsumerStrategy(), th,
                          discrepancies=notes)

    a_s1 = mm / ms
    if spread <= p.c_s:
        t_s1 = 1.0
        printed = 1.0 - (1 - p.mu) * p.k / (p.mu * (1 - p.h) * (p.h * spread - p.k))
        notes += ("serious acceptance printed as 1 in the mixed overtreatment regime; "
                  "expert indifference needs (p_m-c_m)/(p_s-c_s)",)
    else:
        t_s1 = 0.0
        printed = pofu_t_m1(p)
    th["t_m1_printed"] = printed
    t_m1 = _mixed_t_m1(tree, p, t_s1, a_s1, min(1.0 - TOL, max(TOL, printed)))
    if t_m1 is None:
        t_m1 = min(1.0, max(0.0, printed))
    notes = _note_mismatch(notes, "refund-contract t_m1", printed, t_m1)
    return _certified(tree, p, ExpertStrategy(t_m1=t_m1, t_s1=t_s1), ConsumerStrategy(a_m1=1.0, a_s1=a_s1),
                      th, discrepancies=notes)


# Undertreatment discovered late

def delay_thresholds(p: ModelParams, delta):
    h, k, kr = p.h, p.k, p.k_return
    spread = p.p_s - p.p_m
    lost = p.l_s - p.p_s + p.p_m - k

    mu_2 = 1.0 if h <= k / spread else h * k / (h * k + h * (1 - h) * spread - (1 - h) * k)

    printed_gain = (1 - h) * (1 - delta) * (p.p_m - kr + k) + (1 - h) * delta * lost
    mu_1_printed = printed_gain / (h * k + (1 - h) * spread + printed_gain)
    gain = (1 - h) * ((1 - delta) * (p.p_m + kr - k) + delta * lost)
    mu_1 = max(0.0, gain / (h * k + h * (1 - h) * spread + gain))
    return {
        "delta_pivot": p.minor_margin / p.serious_margin,
        "mu_delta_1": mu_1, "mu_delta_1_printed": mu_1_printed,
        "mu_delta_2": mu_2, "mu_delta_3": alt_contract_threshold(p),
    }


def delayed_discovery_equilibrium(p: ModelParams, delta=None) -> EquilibriumProfile:
    """Regime when a minor treatment's failure goes unnoticed with probability delta."""
    delta = p.delta if delta is None else delta
    if delta is None:
        raise InvalidParam("0 < delta < 1")
    p = validate_params(p.at(delta=delta))
    tree = DelayTree()
    th = delay_thresholds(p, delta)
    ms, mm, mu = p.serious_margin, p.minor_margin, p.mu
    notes = ()
    if abs(th["mu_delta_1"] - th["mu_delta_1_printed"]) > TOL:
        notes += ("mu_delta_1 printed with (p_m - k_return + k); classified with (p_m + k_return - k), "
                  "which reduces to the base boundary at delta = 0",)

    if delta > th["delta_pivot"]:
        if mu <= th["mu_delta_3"]:
            return _certified(tree, p, ExpertStrategy(t_m1=0.0, t_s1=1.0), ConsumerStrategy(), th,
                              discrepancies=notes)
        pofu = True
    elif th["mu_delta_2"] < mu < th["mu_delta_1"]:
        pofu = mu > mm / ms
    elif mu > th["mu_delta_2"]:
        pofu = True
    elif mu < th["mu_delta_1"]:
        pofu = False
    else:
        return _certified(tree, p, ExpertStrategy(t_m1=0.0, t_s1=0.0), ConsumerStrategy(), th,
                          discrepancies=notes)

    if pofu:
        guess = pofu_t_m1(p) if p.h * (p.p_s - p.p_m) > p.k else 0.5
        t_m1 = _mixed_t_m1(tree, p, 0.0, mm / ms, min(1.0 - TOL, max(TOL, guess)))
        if t_m1 is None:
            t_m1 = min(1.0, max(0.0, guess))
        e, c = ExpertStrategy(t_m1=t_m1, t_s1=0.0), ConsumerStrategy(a_m1=1.0, a_s1=mm / ms)
        return _certified(tree, p, e, c, th, discrepancies=notes)

    h = p.h
    late = (1 - delta) * (p.p_m + p.k_return - p.k) + delta * (p.l_s + p.p_m - p.p_s - p.k)
    t_s1 = 1.0 - mu * h * ((1 - h) * (p.p_s - p.p_m) + p.k) / ((1 - mu) * (1 - h) * late)
    a_m1 = ms / (mm + (1 - delta) * ms)
    e = ExpertStrategy(t_m1=0.0, t_s1=min(1.0, max(0.0, t_s1)))
    return _certified(tree, p, e, ConsumerStrategy(a_m1=a_m1, a_s1=1.0), th, discrepancies=notes)


# Resentment

def resentment_thresholds(p: ModelParams):
    h, k = p.h, p.k
    spread = p.p_s - p.p_m
    gap = p.p_m + p.l_s - p.p_s
    x = h * h * k + h * (1 - h) * (gap + k)
    mu_1 = x / (x + (1 - h) * (spread + k) - k - (1 - h) ** 2 * spread)
    mu_2 = x / (x + h * (spread + k - k - h * h * spread))
    y3 = h * ((gap + k) - h * gap)
    mu_3 = y3 / (y3 + (1 - h) * (h * spread - k))
    y4 = (1 - h) * ((gap + k) - (1 - h) * gap)
    mu_4 = y4 / (y4 + (1 - h) * (h * spread - k))
    return {
        "mu_r_known": alt_contract_threshold(p),
        "mu_r_1": mu_1, "mu_r_2": mu_2, "mu_r_3": mu_3, "mu_r_4": mu_4,
    }


def _indifferent_acceptance(p, share):
    """a_s1 keeping the opportunist indifferent when a rejected recommendation
    meets the truthful side with probability `share` on the next visit."""
    ms, mm = p.serious_margin, p.minor_margin
    return (mm - share * (ms - mm)) / (ms - share * (ms - mm))


def _quadratic_root(f, h):
    return solve_indifference(f, lo=min(h, 1 - h), hi=max(h, 1 - h), grid_n=21)


def resentment_equilibrium(p: ModelParams, hidden_history=None) -> EquilibriumProfile:
    """Regime when an undertreated consumer refuses to go back to the first expert."""
    if hidden_history is None:
        hidden_history = p.hidden_history
    if not p.k_return > p.k:
        raise NotResentment(f"k_return={p.k_return} must exceed k={p.k}")
    p = validate_params(p.at(resentment=True, hidden_history=hidden_history))
    th = resentment_thresholds(p)
    ms, mm, mu, h, k = p.serious_margin, p.minor_margin, p.mu, p.h, p.k
    spread = p.p_s - p.p_m

    if not hidden_history:
        tree = ResentmentTree()
        if mu < th["mu_r_known"] or h * spread <= k:
            return _certified(tree, p, ExpertStrategy(t_m1=0.0, t_s1=1.0), ConsumerStrategy(), th)
        tbar_m = 1.0 - (1 - mu) * k / (mu * (h * spread - k))
        t_m1 = min(1.0, max(0.0, (tbar_m - h) / (1 - h)))
        return _certified(tree, p, ExpertStrategy(t_m1=t_m1, t_s1=1.0),
                          ConsumerStrategy(a_m1=1.0, a_s1=mm / ms), th)

    tree = ResentmentHiddenTree()
    gap = p.p_m + p.l_s - p.p_s
    if 1 - k / spread < h < 0.5 and th["mu_r_1"] <= mu <= th["mu_r_2"]:
        def f(x):
            return (mu * x * x * spread - mu * x * (spread + k) + (1 - mu) * h * h * k
                    + (1 - mu) * h * (1 - h) * (gap + k) + mu * k)

        tbar_s = _quadratic_root(f, h)
        if tbar_s is not None:
            e = ExpertStrategy(t_m1=0.0, t_s1=(tbar_s - h) / (1 - h))
            c = ConsumerStrategy(a_m1=1.0, a_s1=_indifferent_acceptance(p, tbar_s))
            return _certified(tree, p, e, c, th, requires_oracle=True)
    if k / spread < h < 0.5 and th["mu_r_3"] <= mu <= th["mu_r_4"]:
        def f(x):
            return ((1 - mu) * x * x * gap - (1 - mu) * x * (gap + k)
                    + mu * (1 - h) * h * (spread - k) - mu * (1 - h) ** 2 * k)

        tbar_m = _quadratic_root(f, h)
        if tbar_m is not None:
            e = ExpertStrategy(t_m1=(tbar_m - h) / (1 - h), t_s1=0.0)
            c = ConsumerStrategy(a_m1=1.0, a_s1=_indifferent_acceptance(p, 1.0 - tbar_m))
            return _certified(tree, p, e, c, th, requires_oracle=True)
    return _searched(tree, p, th, "outside the undertreatment windows")


# Heterogeneous capability

def capability_pivot(p: ModelParams):
    return (p.k - p.k_return) / (p.l_s - p.p_s)


def _fonu_serious_gap(tree, p):
    e, c = settle_plans(tree, p, ExpertStrategy(t_m1=0.0, t_s1=1.0), ConsumerStrategy())
    values = node_values(tree, p, e, c)["serious@1"].values
    return values["accept"] - values["reject"]


def heterogeneity_thresholds(p: ModelParams, alpha):
    h, k, pm, ps = p.h, p.k, p.p_m, p.p_s
    reach = h + (1 - h) * (1 - alpha)
    n1 = (1 - h) * (1 - alpha) * (alpha + h * (1 - alpha)) * pm
    mu_1 = n1 / (n1 + reach * (reach * k + (1 - h) * alpha * (ps + k - pm)))
    n2 = alpha * k + h * alpha * (p.l_s + k - ps)
    mu_2_printed = n2 / (n2 + (1 - h) * (h + (1 - h) * alpha) * (ps - pm - k)
                         - (1 - h) * h * alpha * (p.l_s + k - ps)
                         - (1 - h) ** 2 * (1 - alpha) * (p.l_s + k + pm - ps))
    n3 = (1 - h) * (1 - alpha) * pm
    mu_3 = n3 / (n3 + reach * (reach * (p.l_m + k - pm) + (1 - h) * alpha * (ps + k - pm)))

    tree = HeterogeneityTree()
    point = p.at(alpha=alpha)

    def gap(mu):
        return _fonu_serious_gap(tree, point.at(mu=mu))

    mu_2 = solve_indifference(gap, grid_n=21)
    if mu_2 is None:
        mu_2 = 1.0 if gap(1.0 - TOL) >= 0.0 else 0.0
    return {"capability_pivot": capability_pivot(p), "mu_alpha_1": mu_1, "mu_alpha_2": mu_2,
            "mu_alpha_2_printed": mu_2_printed, "mu_alpha_3": mu_3}


def heterogeneous_capability_equilibrium(p: ModelParams, alpha=None) -> EquilibriumProfile:
    """Regime when a share 1 - alpha of experts cannot provide the serious treatment."""
    alpha = p.alpha if alpha is None else alpha
    if alpha is None:
        raise InvalidParam("0 < alpha < 1")
    p = validate_params(p.at(alpha=alpha))
    tree = HeterogeneityTree()
    th = heterogeneity_thresholds(p, alpha)
    notes = _note_mismatch((), "mu_alpha_2", th["mu_alpha_2_printed"], th["mu_alpha_2"])
    low = max(th["mu_alpha_1"], th["mu_alpha_3"])

    if alpha <= th["capability_pivot"]:
        profile = _searched(tree, p, th, "alpha at or below the capability pivot")
    elif p.mu > th["mu_alpha_2"]:
        profile = _searched(tree, p, th, "minor problems too likely for full serious acceptance")
    elif p.mu >= low:
        profile = _certified(tree, p, ExpertStrategy(t_m1=0.0, t_s1=1.0), ConsumerStrategy(), th)
    else:
        profile = _certified(tree, p, ExpertStrategy(t_m1=0.0, t_s1=1.0),
                             ConsumerStrategy(a_m1=0.0, a_s1=1.0), th)
    posterior = HeterogeneityPosterior.from_strategy(alpha, profile.expert.t_s1)
    return replace(profile, discrepancies=profile.discrepancies + notes,
                   extras={**profile.extras, "heterogeneity_posterior": posterior})


# Prices chosen by opportunists

def price_quote(p: ModelParams) -> PriceQuote:
    return PriceQuote(p_m_star=p.l_m, p_s_star=p.l_m - p.c_m + p.c_s)


def endogenous_price_bound(p: ModelParams):
    return 1.0 - p.k / (p.l_m + p.k_return)


def endogenous_price_equilibrium(p: ModelParams) -> EquilibriumProfile:
    """Pure-strategy equilibrium of an opportunist-only market setting its own prices.

    Below the bound no pure equilibrium exists; the candidate profile is
    still returned, uncertified and marked `no_pure_equilibrium`.
    """
    p = validate_params(p.at(endogenous_price=True))
    quote = price_quote(p)
    bound = endogenous_price_bound(p)
    th = {"mu_bound": bound}
    extras = {"price_quote": quote, "t_s1_below_one": True}
    e = ExpertStrategy(t_m1=1.0, t_s1=0.0, t_m2=1.0, t_s2=1.0)
    c = ConsumerStrategy()

    if p.mu <= bound:
        logger.info(f"mu={p.mu} at or below {bound:.6g}: no pure-strategy equilibrium")
        return EquilibriumProfile(regime=Regime.NOFU, expert=e, consumer=c, thresholds=th,
                                  model="endogenous_price", certified=False,
                                  extras={**extras, "no_pure_equilibrium": True})

    profile = certify_or_search(EndogenousTree(), p, EquilibriumProfile(
        regime=Regime.NOFU, expert=e, consumer=c, thresholds=th, model="endogenous_price", extras=extras))
    report = verify_equilibrium(EndogenousTree(quit_option=True), p, profile)
    if not report.is_equilibrium:
        w = report.witness
        profile = replace(profile, discrepancies=profile.discrepancies + (
            f"walking away untreated beats the equilibrium play at {w.node} by {w.gain:.6g}",))
    return profile
