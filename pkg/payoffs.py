"""Consumer accept/reject values and expert incentive margins for the base market.

Consumer values are conditional on the first search cost k already being sunk.
"""

from dataclasses import dataclass
from enum import Enum

from core_model import ModelParams, Beliefs, ConsumerStrategy
from errors import ResentmentRegime


@dataclass(frozen=True)
class ConsumerDecisionValues:
    accept_serious: float
    reject_serious: float
    accept_minor: float
    reject_minor: float


@dataclass(frozen=True)
class ExpertDecisionValues:
    overtreat_margin: float
    undertreat_margin: float


class RevisitChoice(Enum):
    RETURN_TO_INITIAL = "ReturnToInitial"


@dataclass(frozen=True)
class Period2Play:
    t_m2: float = 0.0
    t_s2: float = 1.0
    a_m2: float = 1.0
    a_s2: float = 1.0


def period2_strategies(p: ModelParams) -> Period2Play:
    """Second-visit play: opportunists always recommend serious,
    consumers accept everything. Constant once p is valid."""
    return Period2Play()


def return_decision(p: ModelParams):
    if p.k_return > p.k:
        raise ResentmentRegime(
            f"k_return={p.k_return} exceeds k={p.k}; the undertreated consumer searches anew"
        )
    return RevisitChoice.RETURN_TO_INITIAL


def reject_serious_value(p: ModelParams, tau_s):
    return (-tau_s * (p.p_s + p.k)
            - (1.0 - tau_s) * p.h * (p.p_m + p.k)
            - (1.0 - tau_s) * (1.0 - p.h) * (p.p_s + p.k))


def reject_minor_value(p: ModelParams, tau_m):
    return (-tau_m * p.h * (p.p_m + p.k)
            - tau_m * (1.0 - p.h) * (p.p_s + p.k)
            - (1.0 - tau_m) * (p.p_s + p.k))


def consumer_values(p: ModelParams, b: Beliefs) -> ConsumerDecisionValues:
    accept_minor = -b.tau_m * p.p_m - (1.0 - b.tau_m) * (p.p_m + p.p_s + p.k_return)
    return ConsumerDecisionValues(
        accept_serious=-p.p_s,
        reject_serious=reject_serious_value(p, b.tau_s),
        accept_minor=accept_minor,
        reject_minor=reject_minor_value(p, b.tau_m),
    )


def expert_values(p: ModelParams, c: ConsumerStrategy) -> ExpertDecisionValues:
    """IC(Excessive) and IC(Inadequate), left side minus right side."""
    ms, mm = p.serious_margin, p.minor_margin
    return ExpertDecisionValues(
        overtreat_margin=ms * c.a_s1 - mm * c.a_m1,
        undertreat_margin=(ms + mm) * c.a_m1 - ms * c.a_s1,
    )
