"""Primitive parameters, strategy objects and Bayesian beliefs of the base market."""

import math
from dataclasses import dataclass, asdict, fields, replace
from typing import Optional

from config import TOL, OFF_PATH_BELIEF
from errors import InvalidParam, SchemaError, ZeroProbabilityEvent

REQUIRED_KEYS = ("h", "mu", "l_m", "l_s", "p_m", "p_s", "c_m", "c_s", "k", "k_return")
FLOAT_KNOBS = ("epsilon", "chi", "delta", "alpha")
FLAG_KNOBS = ("hidden_history", "resentment", "alt_contract", "endogenous_price")


@dataclass(frozen=True)
class ModelParams:
    h: float
    mu: float
    l_m: float
    l_s: float
    p_m: float
    p_s: float
    c_m: float
    c_s: float
    k: float
    k_return: float
    # Extension knobs, inactive when None/False
    epsilon: Optional[float] = None
    chi: Optional[float] = None
    delta: Optional[float] = None
    alpha: Optional[float] = None
    hidden_history: bool = False
    resentment: bool = False
    alt_contract: bool = False
    endogenous_price: bool = False

    @property
    def serious_margin(self):
        return self.p_s - self.c_s

    @property
    def minor_margin(self):
        return self.p_m - self.c_m

    def at(self, **changes):
        """Copy with some fields replaced (no validation)."""
        return replace(self, **changes)


# Demo market; h and mu are usually overridden with .at()
DEMO = ModelParams(h=0.5, mu=0.5, l_m=6.0, l_s=10.0, p_m=2.0, p_s=5.0,
                   c_m=1.0, c_s=2.0, k=1.0, k_return=0.0)


def _check_unit(name, x, tol=0.0):
    if not (-tol <= x <= 1.0 + tol):
        raise InvalidParam(f"{name} in [0,1]")
    return clamp_prob(min(1.0, max(0.0, x)), tol)


@dataclass(frozen=True)
class ExpertStrategy:
    """Opportunistic expert's truthful-recommendation probabilities.

    Honest experts are always truthful and are not represented here.
    Second-visit defaults: serious always recommended, everything accepted.
    """
    t_m1: float = 0.0
    t_s1: float = 0.0
    t_m2: float = 0.0
    t_s2: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, _check_unit(f.name, float(getattr(self, f.name)), TOL))


@dataclass(frozen=True)
class ConsumerStrategy:
    """Acceptance probabilities.

    a_m2 is the second-visit minor acceptance after a rejected minor
    recommendation; a_m2_after_serious is the same after a rejected
    serious one.
    """
    a_m1: float = 1.0
    a_s1: float = 1.0
    a_m2: float = 1.0
    a_s2: float = 1.0
    a_m2_after_serious: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, _check_unit(f.name, float(getattr(self, f.name)), TOL))


@dataclass(frozen=True)
class Beliefs:
    tbar_s: float
    tbar_m: float
    tau_m: float
    tau_s: float
    tau_h: Optional[float] = None


def clamp_prob(x, tol=TOL):
    """Snap values within tol of 0 or 1 onto the boundary."""
    if abs(x) <= tol:
        return 0.0
    if abs(1.0 - x) <= tol:
        return 1.0
    return x


def validate_params(p: ModelParams) -> ModelParams:
    """Return p unchanged or raise InvalidParam naming every violated constraint."""
    bad = []
    values = [getattr(p, name) for name in REQUIRED_KEYS]
    if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in values):
        raise InvalidParam("finite real parameters")
    if any(v < 0 for v in values):
        bad.append("nonnegative parameters")
    if not 0.0 < p.h < 1.0:
        bad.append("0 < h < 1")
    if not 0.0 < p.mu < 1.0:
        bad.append("0 < mu < 1")
    if not p.l_s > p.l_m > 0:
        bad.append("l_s > l_m > 0")
    if not p.p_s > p.p_m > 0:
        bad.append("p_s > p_m > 0")
    if not p.c_s > p.c_m >= 0:
        bad.append("c_s > c_m >= 0")
    if not p.serious_margin > p.minor_margin:
        bad.append("margin ordering")
    if not p.p_s < p.l_m:
        bad.append("p_s < l_m")
    if p.resentment:
        if not p.k_return > p.k >= 0:
            bad.append("k_return > k")
    elif not p.k > p.k_return >= 0:
        bad.append("k > k_return >= 0")

    if p.epsilon is not None and not 0.0 <= p.epsilon < 0.5:
        bad.append("0 <= epsilon < 0.5")
    if p.chi is not None and not 0.0 <= p.chi <= 1.0:
        bad.append("0 <= chi <= 1")
    if p.delta is not None and not 0.0 < p.delta < 1.0:
        bad.append("0 < delta < 1")
    if p.alpha is not None and not 0.0 < p.alpha < 1.0:
        bad.append("0 < alpha < 1")
    if len(active_knobs(p)) > 1:
        bad.append("one variant")

    if bad:
        raise InvalidParam(bad)
    return p


def active_knobs(p: ModelParams):
    knobs = [name for name in FLOAT_KNOBS if getattr(p, name) is not None]
    knobs += [name for name in FLAG_KNOBS if getattr(p, name)]
    # Resentment is studied with and without known search history
    if p.resentment and "hidden_history" in knobs:
        knobs.remove("hidden_history")
    return knobs


def active_model(p: ModelParams) -> str:
    """Model tag selected by the extension knobs of p."""
    knobs = active_knobs(p)
    if not knobs:
        return "base"
    return {
        "epsilon": "epsilon",
        "chi": "capacity",
        "delta": "delta",
        "alpha": "heterogeneity",
        "hidden_history": "hidden_history",
        "resentment": "resentment",
        "alt_contract": "alt_contract",
        "endogenous_price": "endogenous_price",
    }[knobs[0]]


def params_from_mapping(doc) -> ModelParams:
    """Build parameters from a flat JSON object; unknown keys are errors."""
    if not isinstance(doc, dict):
        raise SchemaError("<root>", "parameter document must be a JSON object")
    allowed = set(REQUIRED_KEYS) | set(FLOAT_KNOBS) | set(FLAG_KNOBS)
    for key in doc:
        if key not in allowed:
            raise SchemaError(key, "unknown key")
    kwargs = {}
    for key in REQUIRED_KEYS:
        if key not in doc:
            raise SchemaError(key, "missing required key")
        kwargs[key] = _as_real(key, doc[key])
    for key in FLOAT_KNOBS:
        if doc.get(key) is not None:
            kwargs[key] = _as_real(key, doc[key])
    for key in FLAG_KNOBS:
        if key in doc:
            if not isinstance(doc[key], bool):
                raise SchemaError(key, "expected true or false")
            kwargs[key] = doc[key]
    return ModelParams(**kwargs)


def _as_real(key, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(key, "expected a number")
    return float(value)


def params_to_dict(p: ModelParams):
    doc = asdict(p)
    return {k: v for k, v in doc.items() if v is not None and v is not False or k in REQUIRED_KEYS}


def expected_truthfulness(p: ModelParams, e: ExpertStrategy, honest_share=None):
    """Return (tbar_s, tbar_m): chance a serious/minor recommendation is truthful
    when the expert type is unknown."""
    h = p.h if honest_share is None else honest_share
    tbar_s = h + (1.0 - h) * e.t_s1
    tbar_m = h + (1.0 - h) * e.t_m1
    return tbar_s, tbar_m


def posterior(num, den, recommendation, off_path=OFF_PATH_BELIEF):
    """num/den, or the off-path convention when the event has probability zero."""
    if den <= 0.0:
        if off_path is None:
            raise ZeroProbabilityEvent(recommendation)
        return off_path
    return min(1.0, max(0.0, num / den))


def posterior_beliefs(p: ModelParams, e: ExpertStrategy, off_path=OFF_PATH_BELIEF, honest_share=None) -> Beliefs:
    tbar_s, tbar_m = expected_truthfulness(p, e, honest_share)
    minor_num = p.mu * tbar_m
    serious_num = (1.0 - p.mu) * tbar_s
    tau_m = posterior(minor_num, minor_num + (1.0 - p.mu) * (1.0 - tbar_s), "minor", off_path)
    tau_s = posterior(serious_num, serious_num + p.mu * (1.0 - tbar_m), "serious", off_path)
    return Beliefs(tbar_s=tbar_s, tbar_m=tbar_m, tau_m=tau_m, tau_s=tau_s)


def high_type_posterior(alpha, t_s1):
    """Chance the first expert could have treated a serious problem, given
    that its minor treatment was discovered to be insufficient."""
    fraud = alpha * (1.0 - t_s1)
    den = (1.0 - alpha) + fraud
    return fraud / den if den > 0.0 else 1.0


def draw_params(rng, resentment=False) -> ModelParams:
    """Random valid base-market parameters from a numpy Generator."""
    c_m = rng.uniform(0.0, 1.0)
    minor_margin = rng.uniform(0.2, 2.0)
    serious_margin = minor_margin + rng.uniform(0.2, 3.0)
    c_s = c_m + rng.uniform(0.1, 2.0)
    p_m, p_s = c_m + minor_margin, c_s + serious_margin
    l_m = p_s + rng.uniform(0.1, 3.0)
    k = rng.uniform(0.1, 2.0)
    k_return = k + rng.uniform(0.1, 2.0) if resentment else rng.uniform(0.0, 0.9 * k)
    return ModelParams(h=rng.uniform(0.05, 0.95), mu=rng.uniform(0.05, 0.95), l_m=l_m,
                       l_s=l_m + rng.uniform(0.1, 6.0), p_m=p_m, p_s=p_s, c_m=c_m, c_s=c_s,
                       k=k, k_return=k_return, resentment=resentment)
