"""Profit and consumer welfare of the base regimes, and where they move against intuition."""

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from core_model import ModelParams, validate_params
from equilibrium import EquilibriumProfile, Regime, classify_equilibrium, sign_label
from errors import RegimeMismatch, UndefinedThreshold

BASE_REGIMES = (Regime.FOFU, Regime.POFU, Regime.FOPU)


@dataclass(frozen=True)
class OutcomeMetrics:
    profit: float
    welfare: float
    regime: Regime


@dataclass(frozen=True)
class StaticsThresholds:
    mu_3_star: float
    h_1_star: float
    h_2_star: float
    h_3_star: float


@dataclass(frozen=True)
class MonotonicityCell:
    x: float
    regime: Regime
    profit: float
    welfare: float
    profit_step: Optional[str] = None
    welfare_step: Optional[str] = None
    regime_jump: bool = False


@dataclass(frozen=True)
class MonotonicityReport:
    along: str
    cells: tuple

    def steps(self, name):
        return [getattr(cell, f"{name}_step") for cell in self.cells[:-1]]


def _check_closed_form(eq: EquilibriumProfile):
    if eq.regime not in BASE_REGIMES:
        raise RegimeMismatch(f"no closed form for regime {eq.regime.value}")
    # Hidden history only shares the all-accept regime with the base market
    if eq.model == "hidden_history" and eq.regime is Regime.FOFU:
        return
    if eq.model != "base":
        raise RegimeMismatch(f"no closed form for the {eq.model} model; enumerate its tree instead")


def expert_profit(p: ModelParams, eq: EquilibriumProfile):
    """Expected profit of an opportunistic expert from a first-visit consumer."""
    _check_closed_form(eq)
    ms, mm, mu = p.serious_margin, p.minor_margin, p.mu
    if eq.regime is Regime.FOFU:
        return (1 - mu) * (ms + mm) + mu * ms
    if eq.regime is Regime.POFU:
        return (1 - mu) * (ms + mm) + mu * mm
    return ms


def consumer_welfare(p: ModelParams, eq: EquilibriumProfile, include_first_search=True):
    """Expected consumer payoff; every branch pays the first search cost k
    unless include_first_search is False."""
    _check_closed_form(eq)
    h, mu, k, kr = p.h, p.mu, p.k, p.k_return
    minor, serious = p.p_m + k, p.p_s + k
    stuck = p.p_m + p.p_s + k + kr

    if eq.regime is Regime.FOFU:
        cw = -mu * h * minor - mu * (1 - h) * serious - (1 - mu) * h * serious - (1 - mu) * (1 - h) * stuck
    elif eq.regime is Regime.POFU:
        tbar_m = h + (1 - h) * eq.expert.t_m1
        cw = (-mu * tbar_m * minor - mu * (1 - tbar_m) * serious
              - (1 - mu) * h * serious - (1 - mu) * (1 - h) * stuck)
    else:
        tbar_s = h + (1 - h) * eq.expert.t_s1
        cw = (-mu * (1 - h) * serious - (1 - mu) * tbar_s * serious
              - mu * h * minor - (1 - mu) * (1 - tbar_s) * stuck)
    return cw if include_first_search else cw + k


def outcome_metrics(p: ModelParams, eq: EquilibriumProfile, include_first_search=True) -> OutcomeMetrics:
    return OutcomeMetrics(profit=expert_profit(p, eq),
                          welfare=consumer_welfare(p, eq, include_first_search),
                          regime=eq.regime)


def statics_thresholds(p: ModelParams) -> StaticsThresholds:
    k, kr, pm, mu = p.k, p.k_return, p.p_m, p.mu
    spread = p.p_s - p.p_m
    if not k * spread > 0.0:
        raise UndefinedThreshold("mu_3_star", "needs k(p_s - p_m) > 0")

    mu_3 = k / (spread + 2 * k - 2 * math.sqrt(k * spread))

    fopu_gain = pm + kr - k
    lead = mu * (spread + k) + (1 - mu) * fopu_gain
    disc = lead * lead - 4 * mu * (1 - mu) * spread * fopu_gain
    if disc < 0.0:
        raise UndefinedThreshold("h_1_star", f"negative discriminant {disc:.6g}")
    h_1 = (lead - math.sqrt(disc)) / (2 * mu * spread)

    h_2 = (p.p_s + kr) * k / (2 * spread * (pm + kr))
    h_3 = k * (p.p_s + kr) / (spread * (pm + kr))
    return StaticsThresholds(mu_3_star=mu_3, h_1_star=h_1, h_2_star=h_2, h_3_star=h_3)


def monotonicity_report(p: ModelParams, along: str, grid_n: int) -> MonotonicityReport:
    """Profit and welfare over an interior grid of h or mu, with the sign of
    each step to the next cell and a flag where the regime changes."""
    if along not in ("h", "mu"):
        raise ValueError("along must be 'h' or 'mu'")
    if grid_n < 3:
        raise ValueError("grid_n must be at least 3")

    raw = []
    for x in np.linspace(0.0, 1.0, grid_n + 2)[1:-1]:
        point = validate_params(p.at(**{along: float(x)}))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            eq = classify_equilibrium(point)
        raw.append((float(x), eq.regime, expert_profit(point, eq), consumer_welfare(point, eq)))

    cells = []
    for i, (x, regime, profit, welfare) in enumerate(raw):
        if i + 1 < len(raw):
            nxt = raw[i + 1]
            cells.append(MonotonicityCell(x, regime, profit, welfare,
                                          profit_step=sign_label(nxt[2] - profit),
                                          welfare_step=sign_label(nxt[3] - welfare),
                                          regime_jump=nxt[1] != regime))
        else:
            cells.append(MonotonicityCell(x, regime, profit, welfare))
    return MonotonicityReport(along=along, cells=tuple(cells))
