"""Diagnostic error, capacity shocks and hidden visit history.

Each classifier picks the regime from published boundaries, fills in the
strategies (numerically where only existence is known) and certifies the
result on the model's own payoff tree.
"""

import logging
import warnings
from dataclasses import dataclass, replace
from typing import Optional

from config import TOL
from core_model import (ModelParams, ExpertStrategy, ConsumerStrategy, high_type_posterior,
                        posterior, validate_params)
from equilibrium import (EquilibriumProfile, Regime, classify_equilibrium, pofu_t_m1,
                         regime_thresholds, sign_label)
from errors import EpsilonTooLarge, InvalidParam, RegimeMismatch
from oracle import (CapacityTree, EpsilonTree, HiddenHistoryTree, certify_or_search,
                    mixed_profile, settle_plans)

logger = logging.getLogger("credence.extensions")


@dataclass(frozen=True)
class EpsilonParams:
    epsilon: float

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 0.5:
            raise InvalidParam("0 <= epsilon < 0.5")


@dataclass(frozen=True)
class ChiParams:
    chi: float

    def __post_init__(self):
        if not 0.0 <= self.chi <= 1.0:
            raise InvalidParam("0 <= chi <= 1")


@dataclass(frozen=True)
class VisitPosteriors:
    gamma_m: float
    gamma_s: float
    gamma_mm: float
    gamma_sm: float


@dataclass(frozen=True)
class HeterogeneityPosterior:
    tau_h: float

    @classmethod
    def from_strategy(cls, alpha, t_s1):
        return cls(tau_h=high_type_posterior(alpha, t_s1))


@dataclass(frozen=True)
class ErrorRateEffect:
    h: float
    dmu_2_analytic: float
    dmu_2_fd: float
    dmu_1_fd: float
    signs: dict
    expected_sign: str
    discrepancy: Optional[str] = None


def _profile(model, e, c, thresholds, **kw):
    return EquilibriumProfile(regime=Regime.from_pattern(e, c), expert=e, consumer=c,
                              thresholds=thresholds, model=model, **kw)


def _from_base(p, model, thresholds, tree):
    """At a zero knob the extension market is the base market."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        base = classify_equilibrium(p)
    profile = replace(base, model=model, thresholds={**base.thresholds, **thresholds})
    return certify_or_search(tree, p, profile)


def _clip_share(num, den):
    if num <= 0.0:
        return 0.0
    return min(1.0, num / (num + den))


# Diagnostic error

def epsilon_star(p: ModelParams):
    h, mu, k = p.h, p.mu, p.k
    spread = p.p_s - p.p_m
    first = (1 - mu) * k / ((1 - mu) * k + mu * h * (spread + k))
    fopu_gain = p.p_m + p.k_return - k
    # without a FOPU region only the first bound applies
    if fopu_gain <= 0.0:
        return first
    gain = mu * (1 - h) * (spread + k)
    return min(first, gain / (gain + (1 - mu) * fopu_gain))


def _eps_weights(h, eps):
    # chance a minor / serious recommendation comes with the matching diagnosis
    a = eps * h + (1 - eps) * (1 - h)
    c = (1 - eps) * h + eps * (1 - h)
    return a, c


def _mu_eps_2_interior(p, eps):
    h, k = p.h, p.k
    a, c = _eps_weights(h, eps)
    num = c * (k + h * eps * (p.l_s + p.p_m - p.p_s))
    return num / (num + a * (h * (p.p_s - p.p_m) * (1 - eps) - k))


def epsilon_thresholds(p: ModelParams, eps):
    h, k, kr = p.h, p.k, p.k_return
    spread = p.p_s - p.p_m
    a, c = _eps_weights(h, eps)

    b = (1 - h * eps) * (p.p_m + kr - k) - h * eps * (p.l_s + k - p.p_s - kr)
    d = (spread + k) * (1 - h + h * eps) + h * (1 - eps) * k
    mu_1 = _clip_share(a * b, c * d)

    if h <= k / (spread * (1 - eps)):
        mu_2 = 1.0
    else:
        mu_2 = _mu_eps_2_interior(p, eps)

    b3 = p.p_m + kr - h * eps * (p.l_s - p.p_s) - k
    d3 = (spread + k) * (1 - h + h * eps) + h * (1 - eps) * (p.l_m - p.p_m + k)
    mu_3 = _clip_share(a * b3, c * d3)
    return {"mu_eps_1": mu_1, "mu_eps_2": mu_2, "mu_eps_3": mu_3, "epsilon_star": epsilon_star(p)}


def epsilon_equilibrium(p: ModelParams, e: Optional[EpsilonParams] = None) -> EquilibriumProfile:
    """Regime of the market where every diagnosis errs with probability epsilon.

    Mixed regimes are solved on the epsilon tree and tagged requires_oracle.
    """
    eps = e.epsilon if e is not None else (p.epsilon or 0.0)
    p = validate_params(p.at(epsilon=eps))
    th = epsilon_thresholds(p, eps)
    if eps >= th["epsilon_star"]:
        raise EpsilonTooLarge(eps, th["epsilon_star"])
    tree = EpsilonTree()
    if eps == 0.0:
        return _from_base(p, "epsilon", th, tree)

    low = max(th["mu_eps_1"], th["mu_eps_3"])
    if low <= p.mu <= th["mu_eps_2"]:
        e0, c0 = settle_plans(tree, p, ExpertStrategy(t_m1=0.0, t_s1=0.0), ConsumerStrategy())
        return certify_or_search(tree, p, _profile("epsilon", e0, c0, th))

    if p.mu > th["mu_eps_2"]:
        start = (ExpertStrategy(t_m1=0.5, t_s1=0.0), ConsumerStrategy(a_m1=1.0, a_s1=0.5), "t_m1", "a_s1")
    else:
        start = (ExpertStrategy(t_m1=0.0, t_s1=0.5), ConsumerStrategy(a_m1=0.5, a_s1=1.0), "t_s1", "a_m1")
    e0, c0, t_field, a_field = start
    solved = mixed_profile(tree, p, e0, c0, t_field, a_field)
    if solved is None:
        logger.warning(f"No interior mix for {t_field}/{a_field} at epsilon={eps}, mu={p.mu}")
        solved = settle_plans(tree, p, e0, c0)
    return certify_or_search(tree, p, _profile("epsilon", *solved, th, requires_oracle=True))


def _dmu_eps_2_at_zero(p):
    h, k = p.h, p.k
    spread = p.p_s - p.p_m
    inner = h * spread - k
    num = ((1 - 2 * h) * k * inner
           + h * h * (1 - h) * ((p.l_s - p.p_s + p.p_m) * inner + spread * k))
    return num / (h * k + (1 - h) * inner) ** 2


def epsilon_error_rate_effect(p: ModelParams, e: Optional[EpsilonParams] = None, step=1e-6) -> ErrorRateEffect:
    """How a small error rate moves the fraud region's boundaries.

    The upper boundary is differentiated on its interior branch, both by
    the closed-form derivative at zero and by a forward difference.
    """
    eps = e.epsilon if e is not None else 0.0
    validate_params(p)
    dmu_2_fd = (_mu_eps_2_interior(p, eps + step) - _mu_eps_2_interior(p, eps)) / step
    dmu_1_fd = (epsilon_thresholds(p, eps + step)["mu_eps_1"]
                - epsilon_thresholds(p, eps)["mu_eps_1"]) / step
    analytic = _dmu_eps_2_at_zero(p)
    signs = {"dmu_eps_2/deps": sign_label(analytic), "dmu_eps_1/deps": sign_label(dmu_1_fd)}

    if abs(p.h - 0.5) <= TOL:
        expected = "indeterminate"
    else:
        expected = "+" if p.h < 0.5 else "-"
    discrepancy = None
    if expected in ("+", "-") and signs["dmu_eps_2/deps"] != expected:
        discrepancy = (f"dmu_eps_2/deps is {signs['dmu_eps_2/deps']} at h={p.h}, "
                       f"the stated pattern gives {expected}")
    return ErrorRateEffect(h=p.h, dmu_2_analytic=analytic, dmu_2_fd=dmu_2_fd, dmu_1_fd=dmu_1_fd,
                           signs=signs, expected_sign=expected, discrepancy=discrepancy)


# Capacity shocks

def capacity_thresholds(p: ModelParams, chi):
    h, k, kr, pm = p.h, p.k, p.k_return, p.p_m
    spread = p.p_s - p.p_m
    hit = h + (1 - h) * chi           # chance a serious case meets a shocked or honest expert
    free = (1 - h) * (1 - chi) + h    # chance a minor recommendation is not a shocked-out one
    lost = p.l_s - p.p_s

    n1 = (1 - h) * (kr - k) + (1 - h) * free * pm
    mu_1 = _clip_share(n1, hit * (1 - h) * (1 - chi) * spread + hit * k)

    x = h * k + h * h * chi * lost + h * chi * (1 - h) * (lost + pm)
    pivot = (1 - h) * (chi + h * (1 - chi)) * spread
    den = x - (1 - h) * k + pivot
    mu_2 = 1.0 if pivot <= (1 - h) * k else min(1.0, x / den)
    den_printed = x - (1 - 2 * h) * k + pivot
    mu_2_printed = min(1.0, x / den_printed) if den_printed > 0.0 else 1.0

    gain3 = (pm + kr - k) * (1 - h)
    mu_3 = _clip_share(gain3, hit * k + hit * hit * (p.l_m - pm) + hit * (1 - h) * (1 - chi) * spread)

    n4 = k + h * chi * lost + (1 - h) * chi * (lost + pm)
    mu_4 = n4 / (n4 - (1 - h) * k + pivot) if pivot > (1 - h) * k else 1.0
    mu_4 = min(1.0, mu_4)

    n5 = (1 - h) * chi * (kr - k) + (1 - h) * free * pm
    mu_5 = n5 / (h * k + (1 - h) * chi * kr + (1 - h) * free * pm + hit * (1 - h) * (1 - chi) * spread)
    mu_5 = max(0.0, mu_5)

    n6 = (1 - h) * chi * (pm + kr - k)
    mu_6 = max(0.0, n6 / ((1 - h) * chi * (pm + kr) + h * k + hit * (1 - h) * (1 - chi) * spread
                          + hit * hit * (p.l_m - pm)))
    return {
        "chi_star": p.minor_margin / p.serious_margin,
        "mu_chi_1": mu_1, "mu_chi_2": mu_2, "mu_chi_2_printed": mu_2_printed,
        "mu_chi_3": mu_3, "mu_chi_4": mu_4, "mu_chi_5": mu_5, "mu_chi_6": mu_6,
    }


def _pofu_mix(tree, p, a_s1):
    """t_m1 and a_s1 solved on the tree, starting from acceptance a_s1."""
    e0, c0 = ExpertStrategy(t_m1=0.5, t_s1=0.0), ConsumerStrategy(a_m1=1.0, a_s1=a_s1)
    return mixed_profile(tree, p, e0, c0, "t_m1", "a_s1")


def _fopu_mix(tree, p, a_m1):
    e0, c0 = ExpertStrategy(t_m1=0.0, t_s1=0.5), ConsumerStrategy(a_m1=a_m1, a_s1=1.0)
    return mixed_profile(tree, p, e0, c0, "t_s1", "a_m1")


def capacity_equilibrium(p: ModelParams, c: Optional[ChiParams] = None) -> EquilibriumProfile:
    """Regime of the market where each visit may hit a capacity shock."""
    chi = c.chi if c is not None else (p.chi or 0.0)
    p = validate_params(p.at(chi=chi))
    th = capacity_thresholds(p, chi)
    tree = CapacityTree()
    if chi == 0.0:
        profile = _from_base(p, "capacity", th, tree)
    elif chi < th["chi_star"]:
        profile = certify_or_search(tree, p, _capacity_candidate(tree, p, chi, th), prefer=_undertreats,
                                    unmet="no certified profile undertreats serious problems at chi < chi*")
    elif chi > th["chi_star"] and p.mu < th["mu_chi_4"]:
        profile = certify_or_search(tree, p, _capacity_candidate(tree, p, chi, th),
                                    prefer=lambda prof: not _undertreats(prof),
                                    unmet="every certified profile undertreats serious problems at chi > chi*")
    else:
        profile = certify_or_search(tree, p, _capacity_candidate(tree, p, chi, th))
    return replace(profile, extras={**profile.extras, "strategic_undertreatment": _undertreats(profile)})


def _undertreats(profile):
    return profile.expert.t_s1 < 1.0 - TOL


def _capacity_candidate(tree, p, chi, th):
    ms, mm, mu = p.serious_margin, p.minor_margin, p.mu
    mixed = None
    if chi <= th["chi_star"]:
        low = max(th["mu_chi_1"], th["mu_chi_3"])
        if th["mu_chi_2"] < mu < low:
            pofu = mu > mm / ms
        elif mu > th["mu_chi_2"]:
            pofu = True
        elif mu < low:
            pofu = False
        else:
            e0, c0 = settle_plans(tree, p, ExpertStrategy(t_m1=0.0, t_s1=0.0), ConsumerStrategy())
            return _profile("capacity", e0, c0, th)
        if pofu:
            mixed = _pofu_mix(tree, p, mm / ms)
        else:
            mixed = _fopu_mix(tree, p, ms / (mm + ms * (1 - chi)))
    else:
        if mu > th["mu_chi_4"]:
            mixed = _pofu_mix(tree, p, mm / ms)
        else:
            a_m1 = 1.0 if mu >= max(th["mu_chi_5"], th["mu_chi_6"]) else 0.0
            e0, c0 = settle_plans(tree, p, ExpertStrategy(t_m1=0.0, t_s1=1.0),
                                  ConsumerStrategy(a_m1=a_m1, a_s1=1.0))
            return _profile("capacity", e0, c0, th)
    if mixed is None:
        logger.warning(f"No interior mix at chi={chi}, mu={mu}; falling back to the FOFU pattern")
        mixed = settle_plans(tree, p, ExpertStrategy(t_m1=0.0, t_s1=0.0), ConsumerStrategy())
    return _profile("capacity", *mixed, th)


# Hidden visit history

def hidden_history_thresholds(p: ModelParams):
    h, k, kr, pm = p.h, p.k, p.k_return, p.p_m
    spread = p.p_s - p.p_m
    lost = p.l_s - p.p_s
    ms, mm = p.serious_margin, p.minor_margin

    if h <= k / spread:
        mu_2 = 1.0
    else:
        x = h * h * k + h * (1 - h) * (lost + pm + k)
        mu_2 = x / (x + (1 - h) * (h * spread - k))

    if h <= (lost + k - kr) / (lost + pm):
        mu_1 = 0.0
    else:
        n1 = (1 - h) * (h * (pm + kr - k) - (1 - h) * (lost + k - kr))
        mu_1 = n1 / (n1 + h * ((1 - h) * spread + k))

    if h <= (lost - pm + k - kr) / lost:
        mu_3 = 0.0
    else:
        n3 = (1 - h) * ((pm + kr - k) - (1 - h) * lost)
        mu_3 = n3 / (n3 + h * h * (p.l_m - pm + k) + (1 - h) * h * (spread + k))
    return {
        "mu_gamma_1": mu_1, "mu_gamma_2": mu_2, "mu_gamma_3": mu_3,
        "h_rejection_pivot": (ms - 2 * mm) / (ms - mm),
    }


def visit_posteriors(p: ModelParams, e: ExpertStrategy, c: ConsumerStrategy) -> VisitPosteriors:
    """Who an expert is facing when it cannot see the visit history.

    gamma_m / gamma_s: chance a minor / serious consumer is on a first visit.
    gamma_mm: share of second-visit minor consumers who turned down a minor
    recommendation; gamma_sm: share of second-visit serious consumers who
    turned down a minor one.
    """
    tbar_m = p.h + (1 - p.h) * e.t_m1
    tbar_s = p.h + (1 - p.h) * e.t_s1
    back_mm = tbar_m * (1 - c.a_m1)
    back_ms = (1 - tbar_m) * (1 - c.a_s1)
    back_ss = tbar_s * (1 - c.a_s1)
    back_sm = (1 - tbar_s) * (1 - c.a_m1)
    return VisitPosteriors(
        gamma_m=1.0 / (1.0 + back_mm + back_ms),
        gamma_s=1.0 / (1.0 + back_ss + back_sm),
        gamma_mm=posterior(back_mm, back_mm + back_ms, "minor history"),
        gamma_sm=posterior(back_sm, back_ss + back_sm, "serious history"),
    )


def _hidden_pofu_a_s1(p, tbar_m):
    r = p.minor_margin / p.serious_margin
    return 1.0 - (1 - r) / (1 - (1 - r) * (1 - tbar_m))


def _hidden_fopu_a_m1(p, tbar_s, a_m2):
    ms, mm = p.serious_margin, p.minor_margin
    y = 1.0 - tbar_s
    return (ms * (1 + y) - y * a_m2 * mm) / (ms + mm + y * (ms - a_m2 * mm))


def _hidden_mix(tree, p, mix, acceptance):
    """Mixed pair solved jointly on the hidden-history tree.

    Falls back to full fraud with full acceptance, which the certification
    step then replaces by a searched profile.
    """
    solved = mix(tree, p, acceptance)
    if solved is None:
        logger.warning(f"No interior mix on the hidden-history tree at h={p.h}, mu={p.mu}")
        return settle_plans(tree, p, ExpertStrategy(), ConsumerStrategy())
    return solved


def hidden_history_equilibrium(p: ModelParams) -> EquilibriumProfile:
    """Regime when experts cannot tell a first visit from a second one."""
    p = validate_params(p.at(hidden_history=True))
    th = hidden_history_thresholds(p)
    tree = HiddenHistoryTree()
    notes = ("mu_gamma_2 uses k where the printed formula shows d and h/(p_s - p_m)",)
    mu, h = p.mu, p.h
    ms, mm = p.serious_margin, p.minor_margin
    requires_oracle = False

    if mu > th["mu_gamma_2"]:
        if h <= th["h_rejection_pivot"]:
            e, c = settle_plans(tree, p, ExpertStrategy(t_m1=0.0, t_s1=0.0),
                                ConsumerStrategy(a_m1=1.0, a_s1=0.0))
        else:
            e, c = _hidden_mix(tree, p, _pofu_mix, mm / ms)
            tbar_m = h + (1 - h) * e.t_m1
            printed = ((2 - h) * mm - (1 - h) * ms) / (h * ms + (1 - h) * mm)
            th = {**th, "a_s1_printed": printed, "a_s1_derived": _hidden_pofu_a_s1(p, tbar_m)}
            if abs(printed - c.a_s1) > TOL:
                notes += ("printed POFU acceptance weighs second visits as if t_m1 = 0",)
            requires_oracle = True
    elif mu >= max(th["mu_gamma_1"], th["mu_gamma_3"]):
        e, c = settle_plans(tree, p, ExpertStrategy(t_m1=0.0, t_s1=0.0), ConsumerStrategy())
    else:
        e, c = _hidden_mix(tree, p, _fopu_mix, ms / (ms + mm))
        tbar_s = h + (1 - h) * e.t_s1
        printed = (((2 - h) * ms / ((2 - h) * ms + mm)) if c.a_m2 < 0.5
                   else ((2 - h) * ms - (1 - h) * mm) / ((2 - h) * ms + h * mm))
        th = {**th, "a_m1_printed": printed, "a_m1_derived": _hidden_fopu_a_m1(p, tbar_s, c.a_m2)}
        if abs(printed - c.a_m1) > TOL:
            notes += ("printed FOPU acceptance weighs second visits as if t_s1 = 0",)
        requires_oracle = True

    profile = certify_or_search(tree, p, _profile("hidden_history", e, c, th, requires_oracle=requires_oracle,
                                                  discrepancies=notes))
    posteriors = visit_posteriors(p, profile.expert, profile.consumer)
    return replace(profile, extras={**profile.extras, "visit_posteriors": posteriors})


def hidden_history_welfare_gap(p: ModelParams):
    """Hidden-history welfare minus known-history welfare where the known
    market mixes (POFU) and the hidden one stays in full fraud."""
    validate_params(p)
    th = regime_thresholds(p)
    upper = hidden_history_thresholds(p)["mu_gamma_2"]
    if not th.mu_2_star < p.mu < upper:
        raise RegimeMismatch(f"mu={p.mu} outside ({th.mu_2_star}, {upper})")
    tbar_m = p.h + (1 - p.h) * pofu_t_m1(p)
    return -p.mu * (tbar_m - p.h) * (p.p_s - p.p_m)
