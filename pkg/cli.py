"""Command line: solve a point, sweep a grid, verify profiles, simulate a market."""

import argparse
import itertools
import json
import logging
import math
import os
import sys
import tempfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, is_dataclass
from enum import Enum

import numpy as np
import pandas as pd

from config import TOL, DEFAULT_JOBS, setup_logging
from core_model import (FLOAT_KNOBS, REQUIRED_KEYS, ConsumerStrategy, ExpertStrategy, ModelParams,
                        active_model, draw_params, params_from_mapping, params_to_dict, validate_params)
from equilibrium import EquilibriumProfile, classify_equilibrium
from errors import BoundaryAmbiguity, CredenceError, EmptyFOPURegion, InputError, InvalidParam, SchemaError
from extensions import (capacity_equilibrium, epsilon_equilibrium, epsilon_star,
                        hidden_history_equilibrium)
from oracle import exact_outcomes, simulate_market, tree_for, verify_equilibrium
from outcomes import outcome_metrics
from variants import (alternative_contract_equilibrium, delayed_discovery_equilibrium,
                      endogenous_price_bound, endogenous_price_equilibrium,
                      heterogeneous_capability_equilibrium, resentment_equilibrium)

sweep_logger = logging.getLogger("credence.sweep")

IO_ERROR = 4
VERIFY_FAILED = 1

SOLVERS = {
    "base": classify_equilibrium,
    "epsilon": epsilon_equilibrium,
    "capacity": capacity_equilibrium,
    "hidden_history": hidden_history_equilibrium,
    "alt_contract": alternative_contract_equilibrium,
    "delta": delayed_discovery_equilibrium,
    "resentment": resentment_equilibrium,
    "heterogeneity": heterogeneous_capability_equilibrium,
    "endogenous_price": endogenous_price_equilibrium,
}

# Knob each model needs from the parameter document
MODEL_KNOBS = {"epsilon": "epsilon", "capacity": "chi", "delta": "delta", "heterogeneity": "alpha"}
MODEL_FLAGS = ("hidden_history", "resentment", "alt_contract", "endogenous_price")

CSV_COLUMNS = ["mu", "h", "regime", "t_m1", "t_s1", "a_m1", "a_s1", "profit", "welfare", "boundary_flag"]

# Grid cells handed to a sweep worker at a time
SWEEP_BLOCK = 1024


@dataclass(frozen=True)
class SweepSpec:
    axes: tuple
    base: ModelParams
    model: str
    out: str
    fmt: str = "csv"

    def __post_init__(self):
        if not 1 <= len(self.axes) <= 2:
            raise SchemaError("--grid", "one or two axes")
        names = [name for name, _, _, _ in self.axes]
        if len(set(names)) != len(names):
            raise SchemaError("--grid", "axis parameters must be distinct")
        if self.fmt not in ("csv", "json"):
            raise SchemaError("--format", "expected csv or json")

    def points(self):
        grids = [np.linspace(start, end, n) for _, start, end, n in self.axes]
        names = [name for name, _, _, _ in self.axes]
        for values in itertools.product(*grids):
            yield self.base.at(**{name: float(v) for name, v in zip(names, values)})


def parse_axis(text):
    """'<param>=<start>:<end>:<n>' into (param, start, end, n)."""
    try:
        name, rng = text.split("=", 1)
        start, end, n = rng.split(":")
        start, end, n = float(start), float(end), int(n)
    except ValueError:
        raise SchemaError("--grid", f"expected <param>=<start>:<end>:<n>, got {text!r}")
    if name not in REQUIRED_KEYS + FLOAT_KNOBS:
        raise SchemaError(name, "not a numeric parameter")
    if n < 1:
        raise SchemaError(name, "step count must be at least 1")
    return name, start, end, n


def load_params(path) -> ModelParams:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise SchemaError("--params", f"cannot read {path}: {str(e)}")
    except json.JSONDecodeError as e:
        raise SchemaError("--params", f"invalid JSON: {str(e)}")
    return params_from_mapping(doc)


def select_model(p: ModelParams, model=None):
    """Resolve --model against the knobs in p; returns (params, model)."""
    if model is None:
        model = active_model(p)
    if model not in SOLVERS:
        raise SchemaError("--model", f"unknown model '{model}'")
    knob = MODEL_KNOBS.get(model)
    if knob is not None and getattr(p, knob) is None:
        raise SchemaError(knob, f"required by --model {model}")
    if model in MODEL_FLAGS:
        p = p.at(**{model: True})
    validate_params(p)
    if active_model(p) != model:
        raise InvalidParam(f"--model {model} conflicts with the knobs in the parameter file")
    return p, model


def solve_point(p: ModelParams, model):
    """Profile and (profit, welfare) for one parameter point."""
    profile = SOLVERS[model](p)
    if model == "base":
        metrics = outcome_metrics(p, profile)
    else:
        metrics = exact_outcomes(tree_for(p), p, profile)
    return profile, metrics


def to_jsonable(x):
    if isinstance(x, Enum):
        return x.value
    if is_dataclass(x):
        return {k: to_jsonable(v) for k, v in asdict(x).items()}
    if isinstance(x, dict):
        return {str(k): to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [to_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


def profile_document(p, model, profile: EquilibriumProfile, metrics):
    return {
        "model": model,
        "params": params_to_dict(p),
        "regime": profile.regime.value,
        "expert": to_jsonable(profile.expert),
        "consumer": to_jsonable(profile.consumer),
        "thresholds": to_jsonable(profile.thresholds),
        "boundary_flag": profile.boundary_flag,
        "requires_oracle": profile.requires_oracle,
        "certified": profile.certified,
        "profit": metrics.profit,
        "welfare": metrics.welfare,
        "paper_discrepancies": list(profile.discrepancies),
        "extras": to_jsonable(profile.extras),
    }


def write_atomic(path, text):
    """Write text to path through a temporary file in the same directory."""
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".credence-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def emit(text, out=None):
    if out:
        write_atomic(out, text)
    else:
        sys.stdout.write(text)


def cmd_solve(args):
    p, model = select_model(load_params(args.params), args.model)
    profile, metrics = solve_point(p, model)
    emit(json.dumps(profile_document(p, model, profile, metrics), indent=2, sort_keys=True) + "\n", args.out)
    return 0


def _sweep_cell(point, model):
    """One CSV row, as a tuple in CSV_COLUMNS order."""
    try:
        profile, metrics = solve_point(point, model)
    except CredenceError as e:
        sweep_logger.warning(f"Cell mu={point.mu}, h={point.h} skipped: {str(e)}")
        return (point.mu, point.h, "n/a", math.nan, math.nan, math.nan, math.nan, math.nan, math.nan, 0)
    expert, consumer = profile.expert, profile.consumer
    return (point.mu, point.h, profile.regime.value, expert.t_m1, expert.t_s1, consumer.a_m1, consumer.a_s1,
            metrics.profit, metrics.welfare, int(profile.boundary_flag))


def _sweep_block(points, model):
    return [_sweep_cell(point, model) for point in points]


def run_sweep(spec: SweepSpec, jobs=DEFAULT_JOBS) -> pd.DataFrame:
    """Evaluate every grid cell; rows come back in grid order whatever the worker count."""
    points = list(spec.points())
    blocks = [points[i:i + SWEEP_BLOCK] for i in range(0, len(points), SWEEP_BLOCK)]
    sweep_logger.info(f"Sweeping {len(points)} cells of the {spec.model} model on {jobs} worker(s)")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryAmbiguity)
        warnings.simplefilter("ignore", EmptyFOPURegion)
        if jobs <= 1 or len(blocks) == 1:
            parts = [_sweep_block(block, spec.model) for block in blocks]
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                parts = list(pool.map(lambda block: _sweep_block(block, spec.model), blocks))
    rows = [row for part in parts for row in part]
    return pd.DataFrame.from_records(rows, columns=CSV_COLUMNS)


def render_sweep(frame: pd.DataFrame, fmt):
    if fmt == "csv":
        return frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
    records = [{col: to_jsonable(value) for col, value in row.items()} for row in frame.to_dict(orient="records")]
    for record in records:
        for col in CSV_COLUMNS:
            if isinstance(record[col], float) and math.isnan(record[col]):
                record[col] = None
    return json.dumps(records, indent=1) + "\n"


def cmd_sweep(args):
    if not args.grid:
        raise SchemaError("--grid", "at least one axis required")
    p, model = select_model(load_params(args.params), args.model)
    spec = SweepSpec(axes=tuple(parse_axis(g) for g in args.grid), base=p, model=model,
                     out=args.out, fmt=args.format)
    frame = run_sweep(spec, _jobs(args))
    emit(render_sweep(frame, spec.fmt), spec.out)
    return 0


def parse_profile(text):
    """'(t_m1,t_s1,a_m1,a_s1)' into expert and consumer strategies."""
    try:
        values = [float(x) for x in text.strip().strip("()").split(",")]
    except ValueError:
        raise SchemaError("--profile", f"expected (t_m1,t_s1,a_m1,a_s1), got {text!r}")
    if len(values) != 4:
        raise SchemaError("--profile", "expected four numbers")
    try:
        return (ExpertStrategy(t_m1=values[0], t_s1=values[1]),
                ConsumerStrategy(a_m1=values[2], a_s1=values[3]))
    except InvalidParam as e:
        raise SchemaError("--profile", str(e))


def random_point(rng, model) -> ModelParams:
    """A random parameter point inside the region where the model's classifier applies."""
    p = draw_params(rng, resentment=(model == "resentment"))
    if model == "epsilon":
        return p.at(epsilon=float(rng.uniform(0.0, 0.9) * min(epsilon_star(p), 0.5)))
    if model == "capacity":
        return p.at(chi=float(rng.uniform(0.0, 1.0)))
    if model == "delta":
        return p.at(delta=float(rng.uniform(0.05, 0.95)))
    if model == "heterogeneity":
        return p.at(alpha=float(rng.uniform(0.05, 0.95)))
    if model == "endogenous_price":
        bound = endogenous_price_bound(p)
        return p.at(endogenous_price=True, mu=float(bound + rng.uniform(0.05, 0.95) * (1.0 - bound)))
    if model in MODEL_FLAGS:
        return p.at(**{model: True})
    return p


def cmd_verify(args):
    if args.tol < 0.0:
        raise InputError("--tol must be nonnegative")
    if args.random is not None:
        if args.random < 1:
            raise InputError("--random must be at least 1")
        model = args.model or "base"
        if model not in SOLVERS:
            raise SchemaError("--model", f"unknown model '{model}'")
        rng = np.random.default_rng(args.seed)
        points = [(random_point(rng, model), None) for _ in range(args.random)]
    else:
        if args.params is None:
            raise SchemaError("--params", "required unless --random is given")
        p, model = select_model(load_params(args.params), args.model)
        points = [(p, parse_profile(args.profile) if args.profile else None)]

    worst, skipped = None, 0
    for p, fixed in points:
        if fixed is None:
            profile = SOLVERS[model](p)
            if profile.extras.get("no_pure_equilibrium"):
                skipped += 1
                continue
            tree, strategies = tree_for(p), profile
        else:
            tree, strategies = tree_for(p), fixed
        report = verify_equilibrium(tree, p, strategies, args.tol)
        if worst is None or report.max_gain > worst[0].max_gain:
            worst = (report, p)
        if not report.is_equilibrium:
            w = report.witness
            logging.error(f"Verification failed (gain {report.max_gain:.6g} at {w.node}, action {w.action}) "
                          f"for {json.dumps(params_to_dict(p), sort_keys=True)}")
            summary = {"passed": False, "max_gain": report.max_gain, "node": w.node, "action": w.action,
                       "params": params_to_dict(p)}
            sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
            return VERIFY_FAILED

    summary = {"passed": True, "draws": len(points), "skipped": skipped,
               "worst_max_gain": worst[0].max_gain if worst else 0.0,
               "worst_node": worst[0].witness.node if worst and worst[0].witness else None}
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    return 0


def _se_units(diff, se):
    if se is None or se == 0.0:
        return None
    return diff / se


def cmd_simulate(args):
    if args.n < 1:
        raise InputError("-n must be at least 1")
    if args.seed < 0:
        raise InputError("--seed must be nonnegative")
    p, model = select_model(load_params(args.params), args.model)
    profile, metrics = solve_point(p, model)
    tree = tree_for(p)
    result = simulate_market(tree, p, profile, args.n, args.seed, jobs=_jobs(args))
    doc = result.as_dict()
    doc.update({
        "model": model,
        "regime": profile.regime.value,
        "analytic_profit": metrics.profit,
        "analytic_welfare": metrics.welfare,
        "profit_delta_se": _se_units(result.profit_mean - metrics.profit, result.profit_se),
        "welfare_delta_se": _se_units(result.welfare_mean - metrics.welfare, result.welfare_se),
    })
    emit(json.dumps(doc, indent=2, sort_keys=True) + "\n", args.out)
    return 0


def _jobs(args):
    if args.jobs < 1:
        raise InputError("--jobs must be at least 1")
    return args.jobs


def build_parser():
    parser = argparse.ArgumentParser(prog="credence", description="Credence-service market equilibria")
    parser.add_argument("--log-level", default=None, help="override CREDENCE_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, params_required=True):
        p.add_argument("--params", required=params_required, help="parameter JSON file")
        p.add_argument("--model", choices=sorted(SOLVERS), default=None)

    solve = sub.add_parser("solve", help="classify one parameter point")
    common(solve)
    solve.add_argument("--out", default=None)
    solve.set_defaults(handler=cmd_solve)

    sweep = sub.add_parser("sweep", help="regime map over a parameter grid")
    common(sweep)
    sweep.add_argument("--grid", action="append", default=[], help="<param>=<start>:<end>:<n>")
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--format", choices=("csv", "json"), default="csv")
    sweep.add_argument("--jobs", type=int, default=DEFAULT_JOBS)
    sweep.set_defaults(handler=cmd_sweep)

    verify = sub.add_parser("verify", help="certify profiles against the payoff tree")
    common(verify, params_required=False)
    verify.add_argument("--profile", default=None, help="(t_m1,t_s1,a_m1,a_s1)")
    verify.add_argument("--random", type=int, default=None, help="number of random draws")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--tol", type=float, default=TOL)
    verify.set_defaults(handler=cmd_verify)

    simulate = sub.add_parser("simulate", help="Monte Carlo market simulation")
    common(simulate)
    simulate.add_argument("-n", type=int, default=100000, help="number of consumers")
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--jobs", type=int, default=DEFAULT_JOBS)
    simulate.add_argument("--out", default=None)
    simulate.set_defaults(handler=cmd_simulate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except CredenceError as e:
        logging.error(f"{args.command} failed: {str(e)}")
        return getattr(e, "exit_code", 3)
    except OSError as e:
        logging.error(f"I/O error: {str(e)}")
        return IO_ERROR


if __name__ == "__main__":
    sys.exit(main())
