"""Closed-form regimes of the base market and their comparative statics."""

import logging
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

from config import TOL
from core_model import ModelParams, ExpertStrategy, ConsumerStrategy, validate_params
from errors import BoundaryAmbiguity, EmptyFOPURegion, ModelPrecondition, RegimeCrossing

logger = logging.getLogger("credence.equilibrium")


class Regime(Enum):
    FOFU = "FOFU"
    POFU = "POFU"
    FOPU = "FOPU"
    FONU = "FONU"
    PONU = "PONU"
    NOFU = "NOFU"
    POPU = "POPU"
    NOPU = "NOPU"
    NONU = "NONU"
    # Full fraud, but every serious recommendation is turned down
    FOFU_R = "FOFU-R"

    @classmethod
    def from_pattern(cls, expert: ExpertStrategy, consumer: ConsumerStrategy, tol=TOL):
        """Tag a first-visit strategy pattern.

        The first two letters describe overtreatment (t_m1: 0 full, mixed
        partial, 1 none), the last two undertreatment (t_s1 likewise).
        """
        def level(t):
            if t <= tol:
                return "F"
            if t >= 1.0 - tol:
                return "N"
            return "P"

        over, under = level(expert.t_m1), level(expert.t_s1)
        if over == "F" and under == "N" and consumer.a_m1 <= tol:
            return cls.PONU
        if over == "F" and under == "F" and consumer.a_s1 <= tol:
            return cls.FOFU_R
        return cls(f"{over}O{under}U")


@dataclass(frozen=True)
class RegimeThresholds:
    mu_1_star: float
    mu_2_star: float
    h_at_or_below_pivot: bool
    fopu_empty: bool = False

    def as_dict(self):
        return {"mu_1_star": self.mu_1_star, "mu_2_star": self.mu_2_star}


@dataclass(frozen=True)
class EquilibriumProfile:
    regime: Regime
    expert: ExpertStrategy
    consumer: ConsumerStrategy
    thresholds: dict = field(default_factory=dict)
    boundary_flag: bool = False
    model: str = "base"
    requires_oracle: bool = False
    certified: Optional[bool] = None
    discrepancies: tuple = ()
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SensitivityReport:
    target: str
    step: float
    regime: Regime
    derivatives: dict
    signs: dict


def regime_thresholds(p: ModelParams) -> RegimeThresholds:
    h, k, kr = p.h, p.k, p.k_return
    spread = p.p_s - p.p_m
    fopu_gain = p.p_m + kr - k

    fopu_empty = fopu_gain <= 0.0
    if fopu_empty:
        warnings.warn(EmptyFOPURegion("p_m + k_return - k <= 0: FOPU never occurs"), stacklevel=2)
        mu_1 = 0.0
    else:
        mu_1 = (1 - h) * fopu_gain / (h * k + (1 - h) * h * spread + (1 - h) * fopu_gain)

    below_pivot = h <= k / spread
    if below_pivot:
        mu_2 = 1.0
    else:
        mu_2 = h * k / (h * k + (1 - h) * h * spread - (1 - h) * k)
    return RegimeThresholds(mu_1_star=mu_1, mu_2_star=mu_2,
                            h_at_or_below_pivot=below_pivot, fopu_empty=fopu_empty)


def pofu_t_m1(p: ModelParams):
    denom = p.mu * (1 - p.h) * (p.h * (p.p_s - p.p_m) - p.k)
    if p.h * (p.p_s - p.p_m) - p.k <= 0.0:
        raise ModelPrecondition("POFU requires h(p_s - p_m) > k")
    return 1.0 - (1 - p.mu) * p.h * p.k / denom


def pofu_a_s1(p: ModelParams):
    return p.minor_margin / p.serious_margin


def fopu_t_s1(p: ModelParams):
    return 1.0 - p.mu * p.h * ((1 - p.h) * (p.p_s - p.p_m) + p.k) / (
        (1 - p.mu) * (1 - p.h) * (p.p_m + p.k_return - p.k))


def fopu_a_m1(p: ModelParams):
    return p.serious_margin / (p.serious_margin + p.minor_margin)


def _profile(regime, expert, consumer, th, boundary=False):
    return EquilibriumProfile(regime=regime, expert=expert, consumer=consumer,
                              thresholds=th.as_dict(), boundary_flag=boundary,
                              extras={"h_at_or_below_pivot": th.h_at_or_below_pivot})


def fofu_profile(th, boundary=False):
    return _profile(Regime.FOFU, ExpertStrategy(t_m1=0.0, t_s1=0.0),
                    ConsumerStrategy(a_m1=1.0, a_s1=1.0), th, boundary)


def pofu_profile(p: ModelParams, th):
    return _profile(Regime.POFU, ExpertStrategy(t_m1=pofu_t_m1(p), t_s1=0.0),
                    ConsumerStrategy(a_m1=1.0, a_s1=pofu_a_s1(p)), th)


def fopu_profile(p: ModelParams, th):
    return _profile(Regime.FOPU, ExpertStrategy(t_m1=0.0, t_s1=fopu_t_s1(p)),
                    ConsumerStrategy(a_m1=fopu_a_m1(p), a_s1=1.0), th)


def classify_equilibrium(p: ModelParams) -> EquilibriumProfile:
    """Regime and strategies of the base market at p.

    Points within TOL of a threshold get the FOFU strategies with
    boundary_flag set. When mu_2* < mu_1* the overlap profile is checked
    on the base tree before it is returned.
    """
    validate_params(p)
    th = regime_thresholds(p)
    mu = p.mu

    near = [name for name, value in th.as_dict().items() if abs(mu - value) <= TOL]
    if near and th.mu_2_star >= th.mu_1_star:
        warnings.warn(BoundaryAmbiguity(f"mu={mu} sits on {', '.join(near)}"), stacklevel=2)
        return fofu_profile(th, boundary=True)

    if th.mu_2_star < th.mu_1_star and th.mu_2_star < mu < th.mu_1_star:
        return _overlap_profile(p, th)
    if mu > th.mu_2_star:
        return pofu_profile(p, th)
    if mu < th.mu_1_star:
        return fopu_profile(p, th)
    return fofu_profile(th)


def _overlap_profile(p, th):
    """POFU or FOPU between mu_2* and mu_1*, whichever the base tree certifies.

    The split at (p_m - c_m)/(p_s - c_s) is tried first. A rejected split
    is kept as a discrepancy on the profile that replaces it.
    """
    from oracle import BaseTree, certify_or_search, verify_equilibrium

    pofu, fopu = pofu_profile(p, th), fopu_profile(p, th)
    first, second = (pofu, fopu) if p.mu > p.minor_margin / p.serious_margin else (fopu, pofu)
    tree = BaseTree()
    report = verify_equilibrium(tree, p, first)
    if report.is_equilibrium:
        return replace(first, certified=True)
    note = (f"overlap split at (p_m - c_m)/(p_s - c_s) gives {first.regime.value}, rejected by the base tree "
            f"(gain {report.max_gain:.3g} at {report.witness.node})")
    logger.info(f"mu={p.mu}: {note}")
    return certify_or_search(tree, p, replace(second, discrepancies=(note,)))


STATICS_TARGETS = ("k", "p_s")


def comparative_statics(p: ModelParams, target: str, step: float) -> SensitivityReport:
    """Central finite differences of the mixing probabilities and thresholds."""
    if target not in STATICS_TARGETS:
        raise ValueError(f"target must be one of {STATICS_TARGETS}")
    if not step > 0.0:
        raise ValueError("step must be positive")

    base = getattr(p, target)
    lo_p = validate_params(p.at(**{target: base - step}))
    hi_p = validate_params(p.at(**{target: base + step}))
    centre = classify_equilibrium(p)
    lo, hi = classify_equilibrium(lo_p), classify_equilibrium(hi_p)
    if lo.regime != centre.regime or hi.regime != centre.regime:
        raise RegimeCrossing(lo, hi)

    def quantities(prof, params):
        th = regime_thresholds(params)
        return {"t_m1": prof.expert.t_m1, "t_s1": prof.expert.t_s1,
                "mu_1_star": th.mu_1_star, "mu_2_star": th.mu_2_star}

    q_lo, q_hi = quantities(lo, lo_p), quantities(hi, hi_p)
    derivs = {f"d{name}/d{target}": (q_hi[name] - q_lo[name]) / (2 * step) for name in q_lo}
    signs = {name: sign_label(value) for name, value in derivs.items()}
    return SensitivityReport(target=target, step=step, regime=centre.regime,
                             derivatives=derivs, signs=signs)


def sign_label(x, tol=TOL):
    if x > tol:
        return "+"
    if x < -tol:
        return "-"
    return "0"
