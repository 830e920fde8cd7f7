"""Explicit payoff trees for every market model, deviation checks, grid
equilibrium search and a seeded market simulator.

A tree enumerates every path a consumer can take through the market
(problem, expert types, recommendations, accept/reject choices, returns
and searches). Each decision on a path records who decided, what they
chose, how likely the decision was reached and what the decider earned
afterwards. Aggregating those records gives the expected value of every
action at every information set, with beliefs following from Bayes' rule
wherever the information set is reached.
"""

import itertools
import logging
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import optimize

from config import TOL, OFF_PATH_BELIEF, BISECT_MAX_ITER, BISECT_XTOL, DEFAULT_JOBS, SIM_BLOCK
from core_model import (ModelParams, ExpertStrategy, ConsumerStrategy, active_model,
                        high_type_posterior)
from equilibrium import EquilibriumProfile, Regime
from errors import NoEquilibriumFound, ZeroProbabilityEvent
from outcomes import OutcomeMetrics

logger = logging.getLogger("credence.oracle")
sim_logger = logging.getLogger("credence.sim")

MINOR, SERIOUS, REFUSE = "minor", "serious", "refuse"
FIRST_VISIT = ("t_m1", "t_s1", "a_m1", "a_s1")

# Probability given to every unplayed action when pricing zero-reach information sets
TREMBLE = 1e-9

# Alternating rounds for a mixed pair, and the movement below which they stop
MIX_ROUNDS = 30
MIX_XTOL = 1e-10


def _other(theta):
    return SERIOUS if theta == MINOR else MINOR


def _loss(p, theta):
    return p.l_m if theta == MINOR else p.l_s


def _truthful_weights(t):
    # actual play, truthful-side tremble, fraud-side tremble
    return (t, max(t, TREMBLE), min(t, 1.0 - TREMBLE))


def _accept_weights(a):
    a_trembled = min(1.0 - TREMBLE, max(TREMBLE, a))
    return (a, a_trembled, a_trembled)


def _complement(ws):
    return tuple(1.0 - w for w in ws)


@dataclass(frozen=True)
class Leaf:
    prob: float
    welfare: float
    first_profit: float
    opportunistic_first: bool
    flags: frozenset
    decisions: tuple
    trail: tuple = ()


class _Path:
    """Partial market history: path weights, money flows and open decisions.

    Weights are kept under actual play and under the two tremble
    conventions. An open decision records (node, action, payoff slot,
    reach weights, probability of the path since the decision, cost and
    slot profit when the decision was taken). Slot None is the consumer,
    0 the first expert, 1 the second one. The trail lists every chance
    or choice event on the path with its probability under actual play.
    """

    __slots__ = ("w", "cost", "profit", "opp", "flags", "open", "trail")

    def __init__(self, w=(1.0, 1.0, 1.0), cost=0.0, profit=(0.0, 0.0), opp=False,
                 flags=frozenset(), open_=(), trail=()):
        self.w = w
        self.cost = cost
        self.profit = profit
        self.opp = opp
        self.flags = flags
        self.open = open_
        self.trail = trail

    def _with(self, **changes):
        new = _Path(self.w, self.cost, self.profit, self.opp, self.flags, self.open, self.trail)
        for name, value in changes.items():
            setattr(new, name, value)
        return new

    def branch(self, ws, label):
        q = ws[0]
        return self._with(w=tuple(w * x for w, x in zip(self.w, ws)),
                          open=tuple(d[:4] + (d[4] * q,) + d[5:] for d in self.open),
                          trail=self.trail + ((label, q),))

    def chance(self, q, label):
        return self.branch((q, q, q), label)

    def decide(self, node, action, slot, ws):
        before = 0.0 if slot is None else self.profit[slot]
        record = (node, action, slot, self.w, 1.0, self.cost, before)
        moved = self.branch(ws, f"{node}:{action}")
        moved.open = moved.open + (record,)
        return moved

    def pay(self, amount, margin=0.0, slot=0):
        profit = list(self.profit)
        profit[slot] += margin
        return self._with(cost=self.cost + amount, profit=tuple(profit))

    def flag(self, name):
        return self._with(flags=self.flags | {name})

    def opportunistic(self):
        return self._with(opp=True)

    def close(self, k):
        decisions = []
        for node, action, slot, reach, post, cost0, profit0 in self.open:
            payoff = -(self.cost - cost0) if slot is None else self.profit[slot] - profit0
            decisions.append((node, action, reach, post, payoff))
        return Leaf(prob=self.w[0], welfare=-(k + self.cost), first_profit=self.profit[0],
                    opportunistic_first=self.opp, flags=self.flags, decisions=tuple(decisions),
                    trail=self.trail)


class BaseTree:
    """Known search history; the undertreated consumer returns to the first expert.

    Visit 2 is the last period: whatever is accepted there is final and
    a rejection leaves the consumer with the untreated loss.
    """

    model = "base"
    quit_option = False
    consumer_nodes = {
        "minor@1": "a_m1",
        "serious@1": "a_s1",
        "minor@2|minor": "a_m2",
        "minor@2|serious": "a_m2_after_serious",
        "serious@2": "a_s2",
    }
    expert_nodes = {
        "opp@1:minor": "t_m1",
        "opp@1:serious": "t_s1",
        "opp@2:minor": "t_m2",
        "opp@2:serious": "t_s2",
        "opp@r:serious": "t_s2",
    }

    def market(self, p: ModelParams) -> ModelParams:
        return p

    def node_for(self, name):
        for table in (self.consumer_nodes, self.expert_nodes):
            for node, strategy_field in table.items():
                if strategy_field == name:
                    return node
        raise KeyError(name)

    def experts(self, p):
        return (("honest", p.h), ("opp", 1.0 - p.h))

    def expert_node(self, visit, theta):
        if visit == "r":
            return "opp@r:serious", "t_s2"
        return f"opp@{visit}:{theta}", f"t_{theta[0]}{visit}"

    def leaves(self, p: ModelParams, e: ExpertStrategy, c: ConsumerStrategy):
        p = self.market(p)
        out = []
        for theta, q in ((MINOR, p.mu), (SERIOUS, 1.0 - p.mu)):
            self.visit(p, e, c, theta, 1, None, _Path().chance(q, theta), out)
        return [path.close(p.k) for path in out]

    def visit(self, p, e, c, theta, visit, history, path, out):
        for kind, q in self.experts(p):
            if q <= 0.0:
                continue
            start = path.chance(q, kind)
            if visit == 1 and kind.startswith("opp"):
                start = start.opportunistic()
            for rec, sub in self.recommend(p, e, kind, theta, visit, start):
                if visit == 1:
                    self.respond_first(p, e, c, kind, theta, rec, sub, out)
                else:
                    self.respond_second(p, e, c, theta, history, rec, sub, out)

    def recommend(self, p, e, kind, theta, visit, path):
        if kind != "opp":
            return [(theta, path)]
        node, name = self.expert_node(visit, theta)
        slot = 0 if visit == 1 else 1
        ws = _truthful_weights(getattr(e, name))
        return [
            (theta, path.decide(node, "truthful", slot, ws)),
            (_other(theta), path.decide(node, "fraud", slot, _complement(ws))),
        ]

    def consumer_choice(self, node, c, path, quit_option=False):
        ws = _accept_weights(getattr(c, self.consumer_nodes[node]))
        branches = [
            ("accept", path.decide(node, "accept", None, ws)),
            ("reject", path.decide(node, "reject", None, _complement(ws))),
        ]
        if quit_option:
            branches.append(("quit", path.decide(node, "quit", None, (0.0, 0.0, 0.0))))
        return branches

    def respond_first(self, p, e, c, kind, theta, rec, path, out):
        if rec == REFUSE:
            self.after_refusal(p, e, c, path.pay(p.k).flag("searched"), out)
            return
        for action, sub in self.consumer_choice(f"{rec}@1", c, path, self.quit_option):
            if action == "accept":
                self.accept_first(p, e, c, kind, theta, rec, sub, out)
            elif action == "reject":
                self.visit(p, e, c, theta, 2, rec, sub.pay(p.k).flag("searched"), out)
            else:
                out.append(sub.pay(_loss(p, theta)))

    def accept_first(self, p, e, c, kind, theta, rec, path, out):
        if rec == SERIOUS:
            out.append(_serious_treatment(p, theta, path, 0))
        elif theta == MINOR:
            out.append(path.pay(p.p_m, p.minor_margin, 0))
        else:
            under = path.pay(p.p_m, p.minor_margin, 0).flag("undertreated")
            self.after_undertreatment(p, e, c, kind, under, out)

    def after_undertreatment(self, p, e, c, kind, path, out):
        out.append(path.pay(p.k_return + p.p_s, p.serious_margin, 0).flag("returned"))

    def after_refusal(self, p, e, c, path, out):
        self.informed_visit(p, e, c, path, out)

    def informed_visit(self, p, e, c, path, out):
        """A new expert sees a consumer whose problem is known to be serious."""
        for kind, q in self.experts(p):
            if q <= 0.0:
                continue
            for rec, sub in self.recommend(p, e, kind, SERIOUS, "r", path.chance(q, kind)):
                if rec == SERIOUS:
                    out.append(sub.pay(p.p_s, p.serious_margin, 1))
                else:
                    out.append(sub.pay(p.l_s))

    def respond_second(self, p, e, c, theta, history, rec, path, out):
        if rec == REFUSE:
            out.append(path.pay(p.l_s))
            return
        node = "serious@2" if rec == SERIOUS else f"minor@2|{history}"
        for action, sub in self.consumer_choice(node, c, path):
            if action == "reject":
                out.append(sub.pay(_loss(p, theta)))
            elif rec == SERIOUS:
                out.append(_serious_treatment(p, theta, sub, 1))
            elif theta == MINOR:
                out.append(sub.pay(p.p_m, p.minor_margin, 1))
            else:
                out.append(sub.pay(p.p_m + p.l_s, p.minor_margin, 1).flag("undertreated"))


def _serious_treatment(p, theta, path, slot):
    treated = path.pay(p.p_s, p.serious_margin, slot)
    return treated.flag("overtreated") if theta == MINOR else treated


class EpsilonTree(BaseTree):
    """Every diagnosis is wrong with probability epsilon; experts act on it."""

    model = "epsilon"

    def recommend(self, p, e, kind, theta, visit, path):
        eps = p.epsilon or 0.0
        if visit == "r":
            return super().recommend(p, e, kind, theta, visit, path)
        out = []
        for diagnosis, q in ((theta, 1.0 - eps), (_other(theta), eps)):
            if q > 0.0:
                out += super().recommend(p, e, kind, diagnosis, visit, path.chance(q, f"diagnosed {diagnosis}"))
        return out


class CapacityTree(BaseTree):
    """Each visit meets a capacity shock with probability chi.

    A shocked honest expert refuses serious work, a shocked opportunist
    recommends the minor treatment whatever the problem.
    """

    model = "capacity"

    def experts(self, p):
        chi = p.chi or 0.0
        return (("honest", p.h * (1.0 - chi)), ("honest_shocked", p.h * chi),
                ("opp", (1.0 - p.h) * (1.0 - chi)), ("opp_shocked", (1.0 - p.h) * chi))

    def recommend(self, p, e, kind, theta, visit, path):
        if kind == "honest_shocked":
            return [(REFUSE if theta == SERIOUS else MINOR, path)]
        if kind == "opp_shocked":
            return [(MINOR, path)]
        return super().recommend(p, e, kind, theta, visit, path)

    def after_undertreatment(self, p, e, c, kind, path, out):
        chi = p.chi or 0.0
        back = path.pay(p.k_return).flag("returned")
        if chi > 0.0:
            out.append(back.chance(chi, "shocked").pay(p.l_s))
        if chi < 1.0:
            out.append(back.chance(1.0 - chi, "available").pay(p.p_s, p.serious_margin, 0))


class HiddenHistoryTree(BaseTree):
    """Experts cannot tell first visits from second ones."""

    model = "hidden_history"
    expert_nodes = {"opp:minor": "t_m1", "opp:serious": "t_s1", "opp@r:serious": "t_s2"}

    def expert_node(self, visit, theta):
        if visit == "r":
            return super().expert_node(visit, theta)
        return f"opp:{theta}", f"t_{theta[0]}1"


class AltContractTree(BaseTree):
    """The first expert refunds the minor fee when the problem persists."""

    model = "alt_contract"

    def after_undertreatment(self, p, e, c, kind, path, out):
        out.append(path.pay(p.k_return + p.p_s - p.p_m, p.p_s - p.p_m - p.c_s, 0).flag("returned"))


class DelayTree(BaseTree):
    """Undertreatment goes unnoticed with probability delta."""

    model = "delta"

    def after_undertreatment(self, p, e, c, kind, path, out):
        delta = p.delta or 0.0
        if delta > 0.0:
            out.append(path.chance(delta, "unnoticed").pay(p.l_s))
        if delta < 1.0:
            out.append(path.chance(1.0 - delta, "noticed").pay(p.k_return + p.p_s, p.serious_margin, 0)
                       .flag("returned"))


class ResentmentTree(BaseTree):
    """Returning costs more than searching, so the undertreated consumer searches anew."""

    model = "resentment"

    def after_undertreatment(self, p, e, c, kind, path, out):
        self.informed_visit(p, e, c, path.pay(p.k).flag("searched"), out)


class ResentmentHiddenTree(HiddenHistoryTree):
    model = "resentment_hidden"
    after_undertreatment = ResentmentTree.after_undertreatment


class HeterogeneityTree(BaseTree):
    """A share 1 - alpha of experts can only provide the minor treatment."""

    model = "heterogeneity"

    def experts(self, p):
        alpha = 1.0 if p.alpha is None else p.alpha
        return (("honest", p.h * alpha), ("honest_low", p.h * (1.0 - alpha)),
                ("opp", (1.0 - p.h) * alpha), ("opp_low", (1.0 - p.h) * (1.0 - alpha)))

    def recommend(self, p, e, kind, theta, visit, path):
        if kind == "honest_low":
            return [(REFUSE if theta == SERIOUS else MINOR, path)]
        if kind == "opp_low":
            return [(MINOR, path)]
        return super().recommend(p, e, kind, theta, visit, path)

    @staticmethod
    def returns_after_undertreatment(p, e):
        """Consumer's best reply to a discovered undertreatment."""
        alpha = 1.0 if p.alpha is None else p.alpha
        tau_h = high_type_posterior(alpha, e.t_s1)
        back = p.k_return + tau_h * p.p_s + (1.0 - tau_h) * p.l_s
        anew = p.k + alpha * p.p_s + (1.0 - alpha) * p.l_s
        return back <= anew

    def after_undertreatment(self, p, e, c, kind, path, out):
        if not self.returns_after_undertreatment(p, e):
            self.informed_visit(p, e, c, path.pay(p.k).flag("searched"), out)
            return
        back = path.pay(p.k_return).flag("returned")
        if kind == "opp":
            out.append(back.pay(p.p_s, p.serious_margin, 0))
        else:
            out.append(back.pay(p.l_s))


class EndogenousTree(BaseTree):
    """Opportunist-only market at the equilibrium prices.

    With quit_option the consumer may also walk away from a first
    recommendation and bear the untreated loss.
    """

    model = "endogenous_price"

    def __init__(self, quit_option=False):
        self.quit_option = quit_option

    def market(self, p):
        return p.at(h=0.0, p_m=p.l_m, p_s=p.l_m - p.c_m + p.c_s)


TREES = {
    "base": BaseTree,
    "epsilon": EpsilonTree,
    "capacity": CapacityTree,
    "hidden_history": HiddenHistoryTree,
    "alt_contract": AltContractTree,
    "delta": DelayTree,
    "resentment": ResentmentTree,
    "resentment_hidden": ResentmentHiddenTree,
    "heterogeneity": HeterogeneityTree,
    "endogenous_price": EndogenousTree,
}


def tree_for(model):
    """Tree for a model tag, or for the knobs active in a ModelParams."""
    if isinstance(model, ModelParams):
        p = model
        model = active_model(p)
        if model == "resentment" and p.hidden_history:
            model = "resentment_hidden"
    if model not in TREES:
        raise KeyError(f"unknown model '{model}'")
    return TREES[model]()


@dataclass(frozen=True)
class NodeValue:
    node: str
    actor: str
    strategy_field: str
    values: dict
    played: dict
    reach: float

    @property
    def gain(self):
        best = max(self.values.values())
        mixed = sum(self.played.get(action, 0.0) * v for action, v in self.values.items())
        return max(0.0, best - mixed)


def _conditional(node, s, off_path):
    if s[1] > 0.0:
        return s[0] / s[1]
    if off_path is None:
        raise ZeroProbabilityEvent(node)
    truthful = s[2] / s[3] if s[3] > 0.0 else None
    fraud = s[4] / s[5] if s[5] > 0.0 else None
    if truthful is None and fraud is None:
        return 0.0
    if truthful is None:
        return fraud
    if fraud is None:
        return truthful
    return off_path * truthful + (1.0 - off_path) * fraud


def node_values(tree, p, e, c, off_path=OFF_PATH_BELIEF):
    """Expected continuation value of every action at every information set.

    Zero-reach information sets are priced under small trembles: a mix of
    the truthful-side and fraud-side trembles with weight off_path on the
    truthful one. off_path=None raises ZeroProbabilityEvent instead.
    """
    sums = defaultdict(lambda: defaultdict(lambda: [0.0] * 6))
    for leaf in tree.leaves(p, e, c):
        for node, action, reach, post, payoff in leaf.decisions:
            s = sums[node][action]
            for i in range(3):
                s[2 * i] += reach[i] * post * payoff
                s[2 * i + 1] += reach[i] * post

    out = {}
    for node, actions in sums.items():
        if node in tree.consumer_nodes:
            actor, name = "consumer", tree.consumer_nodes[node]
            x = getattr(c, name)
            played = {"accept": x, "reject": 1.0 - x}
            if "quit" in actions:
                played["quit"] = 0.0
        else:
            actor, name = "expert", tree.expert_nodes[node]
            x = getattr(e, name)
            played = {"truthful": x, "fraud": 1.0 - x}
        values = {action: _conditional(node, s, off_path) for action, s in actions.items()}
        reach = max(s[1] for s in actions.values())
        out[node] = NodeValue(node, actor, name, values, played, reach)
    return out


@dataclass(frozen=True)
class Deviation:
    node: str
    action: str
    gain: float


@dataclass(frozen=True)
class VerificationReport:
    is_equilibrium: bool
    max_gain: float
    witness: Optional[Deviation]
    off_path_belief: Optional[float]
    gains: dict = field(default_factory=dict)


def _strategies(profile):
    if isinstance(profile, EquilibriumProfile):
        return profile.expert, profile.consumer
    return profile


def verify_equilibrium(tree, p, profile, tol=TOL, off_path=OFF_PATH_BELIEF) -> VerificationReport:
    """Largest gain from a one-shot pure deviation at any information set."""
    e, c = _strategies(profile)
    gains = {}
    witness = None
    for node, nv in node_values(tree, p, e, c, off_path).items():
        gains[node] = nv.gain
        if witness is None or nv.gain > witness.gain:
            best = max(nv.values, key=nv.values.get)
            witness = Deviation(node=node, action=best, gain=nv.gain)
    max_gain = witness.gain if witness is not None else 0.0
    return VerificationReport(is_equilibrium=max_gain <= tol, max_gain=max_gain,
                              witness=witness if max_gain > 0.0 else None,
                              off_path_belief=off_path, gains=gains)


def best_responses(tree, p, fixed, tol=TOL):
    """Best reply of the other side at each of its information sets.

    fixed is an ExpertStrategy (consumer replies are returned) or a
    ConsumerStrategy (expert replies). Ties within tol are "indifferent".
    """
    if isinstance(fixed, ExpertStrategy):
        e, c, actor = fixed, ConsumerStrategy(), "consumer"
    elif isinstance(fixed, ConsumerStrategy):
        e, c, actor = ExpertStrategy(), fixed, "expert"
    else:
        raise TypeError("fixed must be an ExpertStrategy or a ConsumerStrategy")

    replies = {}
    for node, nv in node_values(tree, p, e, c).items():
        if nv.actor != actor:
            continue
        ranked = sorted(nv.values.items(), key=lambda kv: kv[1], reverse=True)
        if len(ranked) > 1 and ranked[0][1] - ranked[1][1] <= tol:
            replies[node] = "indifferent"
        else:
            replies[node] = ranked[0][0]
    return replies


def solve_indifference(f, lo=TOL, hi=1.0 - TOL, grid_n=None):
    """Root of f on [lo, hi], or None when f keeps one sign there.

    With grid_n the bracket is the first sign change on an even grid,
    otherwise only the end points are compared.
    """
    xs = np.linspace(lo, hi, grid_n) if grid_n else np.array([lo, hi])
    prev_x = float(xs[0])
    prev_f = f(prev_x)
    if prev_f == 0.0:
        return prev_x
    for x in xs[1:]:
        x = float(x)
        fx = f(x)
        if fx == 0.0:
            return x
        if (prev_f < 0.0) != (fx < 0.0):
            try:
                return float(optimize.brentq(f, prev_x, x, xtol=BISECT_XTOL, maxiter=BISECT_MAX_ITER))
            except RuntimeError as e:
                logger.warning(f"Indifference solve failed on [{prev_x}, {x}]: {str(e)}")
                return None
        prev_x, prev_f = x, fx
    return None


def _gap(values, up, down):
    return values[up] - values[down]


def _root_near(f, x, grid_n, width=0.05):
    """Root of f close to x, else anywhere on the grid."""
    if x is not None:
        root = solve_indifference(f, max(TOL, x - width), min(1.0 - TOL, x + width))
        if root is not None:
            return root
    return solve_indifference(f, grid_n=grid_n)


def mix_to_indifference(tree, p, e, c, t_field, a_field, grid_n=11, near=None):
    """Expert strategy with t_field set so the consumer is indifferent at the
    a_field node, or None when no value of t_field does that."""
    a_node = tree.node_for(a_field)

    def consumer_gap(t):
        values = node_values(tree, p, replace(e, **{t_field: t}), c)
        return _gap(values[a_node].values, "accept", "reject")

    t = _root_near(consumer_gap, near, grid_n)
    return None if t is None else replace(e, **{t_field: t})


def _expert_gap(tree, p, e, c, t_node, a_field):
    def gap(a):
        values = node_values(tree, p, e, replace(c, **{a_field: a}))
        return _gap(values[t_node].values, "truthful", "fraud")
    return gap


def _polish_mixed(tree, p, e, c, t_field, a_field):
    """Solve both indifference conditions at once from (e, c); None when that fails."""
    a_node, t_node = tree.node_for(a_field), tree.node_for(t_field)

    def residuals(x):
        t, a = (min(1.0, max(0.0, v)) for v in x)
        values = node_values(tree, p, replace(e, **{t_field: t}), replace(c, **{a_field: a}))
        return [_gap(values[a_node].values, "accept", "reject"),
                _gap(values[t_node].values, "truthful", "fraud")]

    sol = optimize.root(residuals, [getattr(e, t_field), getattr(c, a_field)], method="hybr",
                        options={"xtol": BISECT_XTOL})
    if not sol.success or not all(-TOL <= v <= 1.0 + TOL for v in sol.x):
        logger.debug(f"joint solve of {t_field}/{a_field} failed: {sol.message}")
        return None
    t, a = (min(1.0, max(0.0, float(v))) for v in sol.x)
    return replace(e, **{t_field: t}), replace(c, **{a_field: a})


def solve_mixed(tree, p, e, c, t_field, a_field, grid_n=11, solve_a=True, rounds=MIX_ROUNDS):
    """Mix t_field to make the consumer indifferent at the a_field node and
    (with solve_a) a_field to make the expert indifferent at the t_field node.

    The two conditions are solved in turn until neither value moves. When
    acceptance feeds back into the consumer's beliefs, as with hidden visit
    history, that takes several rounds; if they do not settle, both
    conditions are solved jointly from the last round.
    """
    t_node = tree.node_for(t_field)
    near_t = near_a = None
    for _ in range(rounds):
        e_new = mix_to_indifference(tree, p, e, c, t_field, a_field, grid_n, near_t)
        if e_new is None:
            return None
        if not solve_a:
            return e_new, c
        a = _root_near(_expert_gap(tree, p, e_new, c, t_node, a_field), near_a, grid_n)
        if a is None:
            return None
        moved = abs(getattr(e_new, t_field) - getattr(e, t_field)) + abs(a - getattr(c, a_field))
        e, c = e_new, replace(c, **{a_field: a})
        near_t, near_a = getattr(e, t_field), a
        if moved <= MIX_XTOL:
            return e, c
    logger.debug(f"{t_field}/{a_field} did not settle in {rounds} rounds")
    return _polish_mixed(tree, p, e, c, t_field, a_field)


def settle_plans(tree, p, e, c, tol=TOL):
    """Set later-visit choices to strict best replies; ties keep the current value."""
    for _ in range(3):
        e_changes, c_changes = {}, {}
        for nv in node_values(tree, p, e, c).values():
            if nv.strategy_field in FIRST_VISIT:
                continue
            if nv.actor == "consumer":
                gap, current, changes = _gap(nv.values, "accept", "reject"), getattr(c, nv.strategy_field), c_changes
            else:
                gap, current, changes = _gap(nv.values, "truthful", "fraud"), getattr(e, nv.strategy_field), e_changes
            target = 1.0 if gap > tol else 0.0 if gap < -tol else current
            if target != current:
                changes[nv.strategy_field] = target
        if not e_changes and not c_changes:
            break
        e, c = replace(e, **e_changes), replace(c, **c_changes)
    return e, c


def mixed_profile(tree, p, e, c, t_field, a_field, grid_n=11, solve_a=True):
    """solve_mixed with later-visit plans kept at best replies."""
    e, c = settle_plans(tree, p, e, c)
    for _ in range(2):
        solved = solve_mixed(tree, p, e, c, t_field, a_field, grid_n, solve_a)
        if solved is None:
            return None
        settled = settle_plans(tree, p, *solved)
        if settled == solved:
            return solved
        e, c = settled
    return e, c


def _candidates(tree, p, grid_n):
    for t_m1, t_s1, a_m1, a_s1 in itertools.product((0.0, 1.0), repeat=4):
        yield settle_plans(tree, p, ExpertStrategy(t_m1=t_m1, t_s1=t_s1),
                           ConsumerStrategy(a_m1=a_m1, a_s1=a_s1))
    for t_field, a_field in itertools.product(("t_m1", "t_s1"), ("a_m1", "a_s1")):
        t_other = "t_s1" if t_field == "t_m1" else "t_m1"
        a_other = "a_s1" if a_field == "a_m1" else "a_m1"
        for t_value, a_value in itertools.product((0.0, 1.0), repeat=2):
            e = ExpertStrategy(**{t_field: 0.5, t_other: t_value})
            c = ConsumerStrategy(**{a_field: 0.5, a_other: a_value})
            solved = mixed_profile(tree, p, e, c, t_field, a_field, grid_n)
            if solved is not None:
                yield solved


def _distance(x, y):
    (e1, c1), (e2, c2) = _strategies(x), _strategies(y)
    return sum(abs(getattr(s1, name) - getattr(s2, name))
               for s1, s2, names in ((e1, e2, ("t_m1", "t_s1")), (c1, c2, ("a_m1", "a_s1")))
               for name in names)


def find_equilibria_grid(tree, p, grid_n=11, tol=TOL):
    """Certified equilibria over every first-visit support pattern.

    Each of t_m1, t_s1, a_m1, a_s1 is pure 0, pure 1 or mixed; mixed pairs
    are solved from the two binding indifference conditions. Results are
    deduplicated and returned in candidate order.
    """
    if grid_n < 11:
        raise ValueError("grid_n must be at least 11")
    found = []
    for e, c in _candidates(tree, p, grid_n):
        report = verify_equilibrium(tree, p, (e, c), tol)
        if not report.is_equilibrium:
            continue
        if any(_distance((e, c), prof) <= 1e-6 for prof in found):
            continue
        found.append(EquilibriumProfile(
            regime=Regime.from_pattern(e, c), expert=e, consumer=c, model=tree.model,
            certified=True, extras={"max_gain": report.max_gain}))
    if not found:
        raise NoEquilibriumFound(f"no certified profile in the {tree.model} tree at {p}")
    logger.debug(f"grid search on {tree.model}: {[prof.regime.value for prof in found]}")
    return found


def certify_or_search(tree, p, candidate: EquilibriumProfile, grid_n=11, tol=TOL,
                      prefer=None, unmet=None) -> EquilibriumProfile:
    """Certify a closed-form profile, or replace it by the nearest searched one.

    prefer is a predicate on profiles. A certified candidate it refuses is
    replaced by the nearest searched profile it accepts, and a rejected
    candidate by the nearest accepted one when there are any; otherwise the
    note unmet is added. Raises NoEquilibriumFound when the search certifies
    nothing.
    """
    report = verify_equilibrium(tree, p, candidate, tol)
    if report.is_equilibrium:
        if prefer is None or prefer(candidate):
            return replace(candidate, certified=True)
        return _prefer_searched(tree, p, replace(candidate, certified=True), grid_n, tol, prefer, unmet)

    rejected = (f"closed-form {candidate.regime.value} profile rejected by the {tree.model} tree "
                f"(gain {report.max_gain:.3g} at {report.witness.node})")
    logger.warning(rejected)
    try:
        found = find_equilibria_grid(tree, p, grid_n, tol)
    except NoEquilibriumFound as e:
        logger.error(f"Grid search failed: {str(e)}")
        raise NoEquilibriumFound(f"{rejected}; {str(e)}") from e
    notes = candidate.discrepancies + (rejected,)
    if prefer is not None:
        preferred = [prof for prof in found if prefer(prof)]
        if preferred:
            found = preferred
        elif unmet:
            notes += (unmet,)
    best = min(found, key=lambda prof: _distance(prof, candidate))
    return replace(candidate, regime=best.regime, expert=best.expert, consumer=best.consumer,
                   certified=True, requires_oracle=True, discrepancies=notes)


def _prefer_searched(tree, p, certified, grid_n, tol, prefer, unmet):
    try:
        found = [prof for prof in find_equilibria_grid(tree, p, grid_n, tol) if prefer(prof)]
    except NoEquilibriumFound:
        found = []
    if not found:
        return replace(certified, discrepancies=certified.discrepancies + ((unmet,) if unmet else ()))
    note = (f"closed-form {certified.regime.value} profile holds in the {tree.model} tree "
            f"but another certified profile is preferred")
    logger.info(note)
    best = min(found, key=lambda prof: _distance(prof, certified))
    return replace(certified, regime=best.regime, expert=best.expert, consumer=best.consumer,
                   requires_oracle=True, discrepancies=certified.discrepancies + (note,))


def exact_outcomes(tree, p, profile) -> OutcomeMetrics:
    """Profit of the first (opportunistic) expert and consumer welfare by enumeration."""
    e, c = _strategies(profile)
    leaves = [leaf for leaf in tree.leaves(p, e, c) if leaf.prob > 0.0]
    opp_mass = math.fsum(leaf.prob for leaf in leaves if leaf.opportunistic_first)
    profit = (math.fsum(leaf.prob * leaf.first_profit for leaf in leaves if leaf.opportunistic_first)
              / opp_mass) if opp_mass > 0.0 else 0.0
    welfare = math.fsum(leaf.prob * leaf.welfare for leaf in leaves)
    return OutcomeMetrics(profit=profit, welfare=welfare, regime=Regime.from_pattern(e, c))


@dataclass(frozen=True)
class SimulationResult:
    n_consumers: int
    seed: int
    profit_mean: float
    profit_se: Optional[float]
    welfare_mean: float
    welfare_se: Optional[float]
    overtreatment_rate: float
    undertreatment_rate: float
    return_rate: float
    search_rate: float

    def as_dict(self):
        return {
            "n_consumers": self.n_consumers,
            "seed": self.seed,
            "profit_mean": self.profit_mean,
            "profit_se": self.profit_se,
            "welfare_mean": self.welfare_mean,
            "welfare_se": self.welfare_se,
            "overtreatment_rate": self.overtreatment_rate,
            "undertreatment_rate": self.undertreatment_rate,
            "return_rate": self.return_rate,
            "search_rate": self.search_rate,
        }


SIM_FLAGS = ("overtreated", "undertreated", "returned", "searched")


def _mean_and_se(total, squares, n):
    if n == 0:
        return 0.0, None
    mean = total / n
    if n < 2:
        return mean, None
    var = max(0.0, (squares - total * total / n) / (n - 1))
    return mean, math.sqrt(var / n)


def _event_tree(leaves):
    """Index the leaves' event trails as one tree.

    Returns child ids and cumulative conditional probabilities per node
    (padded to the widest node) and the leaf index of every terminal node,
    -1 elsewhere.
    """
    children, probs, leaf_of = [{}], [{}], [-1]
    for i, leaf in enumerate(leaves):
        node = 0
        for label, q in leaf.trail:
            nxt = children[node].get(label)
            if nxt is None:
                nxt = len(children)
                children[node][label] = nxt
                probs[node][label] = q
                children.append({})
                probs.append({})
                leaf_of.append(-1)
            node = nxt
        leaf_of[node] = i

    width = max(len(table) for table in children)
    child = np.zeros((len(children), width), dtype=np.int64)
    cum = np.ones((len(children), width))
    for node, table in enumerate(children):
        if not table:
            continue
        ids = list(table.values())
        qs = np.array([probs[node][label] for label in table])
        child[node, :] = ids[-1]
        child[node, :len(ids)] = ids
        cum[node, :len(ids)] = np.cumsum(qs / qs.sum())
        cum[node, len(ids) - 1] = 1.0
    return child, cum, np.array(leaf_of, dtype=np.int64)


def simulate_market(tree, p, profile, n_consumers, seed, jobs=DEFAULT_JOBS) -> SimulationResult:
    """Play the market consumer by consumer, one event at a time, and average the outcomes.

    Each consumer draws a problem, then an expert type, a recommendation,
    an acceptance choice, and from there a return, a search or a second
    visit, each conditional on what happened before. Every stage takes one
    uniform per consumer. Consumers are split into blocks of SIM_BLOCK and
    block i draws from default_rng([seed, i]), so results depend on the
    seed only, never on the worker count.
    """
    if n_consumers < 1:
        raise ValueError("n_consumers must be at least 1")
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    e, c = _strategies(profile)
    leaves = [leaf for leaf in tree.leaves(p, e, c) if leaf.prob > 0.0]
    child, cum, leaf_of = _event_tree(leaves)
    stages = max(len(leaf.trail) for leaf in leaves)
    welfare = np.array([leaf.welfare for leaf in leaves])
    profit = np.array([leaf.first_profit for leaf in leaves])
    opp = np.array([leaf.opportunistic_first for leaf in leaves])
    flags = np.array([[name in leaf.flags for name in SIM_FLAGS] for leaf in leaves], dtype=np.int64)

    blocks = [(i, min(SIM_BLOCK, n_consumers - i * SIM_BLOCK))
              for i in range(math.ceil(n_consumers / SIM_BLOCK))]

    def run(block):
        index, size = block
        rng = np.random.default_rng([seed, index])
        state = np.zeros(size, dtype=np.int64)
        for _ in range(stages):
            u = rng.random(size)
            pick = np.minimum((u[:, None] >= cum[state]).sum(axis=1), cum.shape[1] - 1)
            state = np.where(leaf_of[state] < 0, child[state, pick], state)
        draws = leaf_of[state]
        w, pr, is_opp = welfare[draws], profit[draws][opp[draws]], opp[draws]
        return (float(np.sum(w)), float(np.sum(w * w)), int(np.sum(is_opp)),
                float(np.sum(pr)), float(np.sum(pr * pr)), flags[draws].sum(axis=0))

    sim_logger.info(f"Simulating {n_consumers} consumers over {stages} stages in {len(blocks)} blocks "
                    f"on {jobs} worker(s)")
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        parts = list(pool.map(run, blocks))

    n_opp = sum(part[2] for part in parts)
    welfare_mean, welfare_se = _mean_and_se(math.fsum(part[0] for part in parts),
                                            math.fsum(part[1] for part in parts), n_consumers)
    profit_mean, profit_se = _mean_and_se(math.fsum(part[3] for part in parts),
                                          math.fsum(part[4] for part in parts), n_opp)
    counts = np.sum([part[5] for part in parts], axis=0)
    rates = [float(count) / n_consumers for count in counts]
    return SimulationResult(
        n_consumers=n_consumers, seed=seed,
        profit_mean=profit_mean, profit_se=profit_se,
        welfare_mean=welfare_mean, welfare_se=welfare_se,
        overtreatment_rate=rates[0], undertreatment_rate=rates[1],
        return_rate=rates[2], search_rate=rates[3],
    )
