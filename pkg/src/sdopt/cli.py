"""Command-line front end.

Exit codes (one per outcome class, never overloaded):

* 0 -- success: dominance holds, the solve converged and verified, a
  reproduction is within tolerance, a self-check found no disagreement;
* 1 -- dominance does not hold (``verify``) or the self-check disagreed;
* 2 -- invalid input (flags, CSV, dimensions, unsupported order);
* 3 -- the solver did not converge (``optimize``; ``sweep`` when no order
  converged);
* 4 -- a reproduction breached its tolerance.

JSON goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from sdopt import data
from sdopt.dominance import (
    DENSE_GRID,
    DEFAULT_SCAN,
    gap_curve,
    verify_dense_grid,
    verify_dominance,
    write_gap_csv,
)
from sdopt.errors import InvalidInputError
from sdopt.optimizer import ProblemSpec, order_sweep, solve
from sdopt.reproduce import TARGETS, reproduce
from sdopt.risk import DEFAULT_LEVELS, verify_dominance_risk
from sdopt.scenario import (
    Order,
    PortfolioWeights,
    ScenarioMatrix,
    ScenarioVector,
    equal_weight_benchmark,
    portfolio_returns,
)

EXIT_OK, EXIT_NO, EXIT_INPUT, EXIT_NONCONVERGED, EXIT_BREACH = 0, 1, 2, 3, 4
OBJECTIVE_FLAGS = {"mean": "expected_return", "risk": "risk"}
SWEEP_ORDERS = "2,3,5,10,15,20,inf"


@dataclass(frozen=True)
class RunConfig:
    """Validated inputs shared by the data-driven commands."""

    dataset: data.Dataset
    benchmark: ScenarioVector


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _order(text: str) -> Order:
    try:
        return Order.parse(text)
    except (ValueError, InvalidInputError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _beta(text: str) -> float:
    v = float(text)
    if not (0.0 < v < 1.0):
        raise argparse.ArgumentTypeError(f"beta must lie in (0, 1), got {text}")
    return v


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", default="appendix8", help="appendix8, appendix5 or a scenario CSV path")
    p.add_argument("--unit", choices=data.UNITS, default="percent", help="unit of the CSV values (no rescaling)")
    p.add_argument("--benchmark", default="equal", help="equal, col:NAME or a one-column CSV path")
    p.add_argument("--json", action="store_true", help="compact single-line JSON output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdopt", description="Higher-order stochastic dominance verification and portfolio optimization.")
    # argparse itself exits with 2 (= EXIT_INPUT) on bad flags
    sub = parser.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="check whether a portfolio dominates the benchmark")
    _add_data_flags(v)
    g = v.add_mutually_exclusive_group(required=True)
    g.add_argument("--weights", help="comma-separated portfolio weights")
    g.add_argument("--weights-file", help="file with weights (comma/whitespace separated or a JSON list)")
    v.add_argument("--order", type=_order, required=True, help="dominance order p >= 1 or inf (2 = second order)")
    v.add_argument("--method", choices=("norm", "risk", "grid"), default="norm")
    v.add_argument("--tol", type=float, default=1e-9, help="admissible gap (default 1e-9)")
    v.add_argument("--grid", type=_positive_int, default=None, help="scan/grid size for the chosen method")
    v.add_argument("--plot-gap", metavar="PATH", help="write (t, gap) samples to a CSV file")

    o = sub.add_parser("optimize", help="maximize return or minimize risk under a dominance constraint")
    _add_data_flags(o)
    o.add_argument("--order", type=_order, required=True)
    _add_solver_flags(o)

    s = sub.add_parser("sweep", help="solve for a list of orders, warm-starting each from the previous")
    _add_data_flags(s)
    s.add_argument("--orders", default=SWEEP_ORDERS, help=f"comma-separated ascending orders (default {SWEEP_ORDERS})")
    s.add_argument("--allocation-csv", metavar="PATH", help="write one row of weights per order")
    _add_solver_flags(s)

    r = sub.add_parser("reproduce", help="rerun a published table or figure and compare")
    r.add_argument("target", choices=TARGETS)
    r.add_argument("--json", action="store_true", help="JSON instead of the side-by-side table")

    st = sub.add_parser("stats", help="per-asset descriptive statistics")
    _add_data_flags(st)

    c = sub.add_parser("check", help="seeded self-check: finite test points vs the dense grid")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--count", type=_positive_int, default=200, help="number of random instances")
    c.add_argument("--grid", type=_positive_int, default=DENSE_GRID, help="dense-grid size")
    c.add_argument("--json", action="store_true")
    return parser


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--objective", choices=tuple(OBJECTIVE_FLAGS), default="mean")
    p.add_argument("--beta", type=_beta, help="risk level in (0, 1) for --objective risk")
    p.add_argument("--risk-norm", type=float, default=1.0, help="norm index of the risk measure (1 = AVaR)")
    p.add_argument("--tol", type=_positive_float, default=1e-8, help="KKT tolerance")
    p.add_argument("--max-iter", type=_positive_int, default=500)


def _emit(obj, compact: bool) -> None:
    print(json.dumps(obj, indent=None if compact else 2, default=_json_default))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _load(args) -> RunConfig:
    ds = data.load_dataset(args.dataset, args.unit)
    return RunConfig(ds, _benchmark(args.benchmark, ds, args.unit))


def _benchmark(spec: str, ds: data.Dataset, unit: str) -> ScenarioVector:
    m = ds.matrix
    if spec == "equal":
        return equal_weight_benchmark(m)
    if spec.startswith("col:"):
        return data.column_benchmark(m, spec[4:])
    if Path(spec).exists():
        return data.load_benchmark_csv(spec, m.n, unit)
    raise InvalidInputError(f"benchmark must be 'equal', 'col:NAME' or an existing CSV path, got {spec!r}")


def _read_weights(args, d: int) -> PortfolioWeights:
    if args.weights is not None:
        text = args.weights
    else:
        try:
            text = Path(args.weights_file).read_text()
        except OSError as exc:
            raise InvalidInputError(f"cannot read weights: {exc}") from None
    text = text.strip()
    try:
        vals = json.loads(text) if text.startswith("[") else [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise InvalidInputError(f"cannot parse weights {text!r}") from None
    return PortfolioWeights(data.weights_vector(vals, d))


def _problem(args, cfg: RunConfig, order: Order) -> ProblemSpec:
    objective = OBJECTIVE_FLAGS[args.objective]
    if objective == "risk" and args.beta is None:
        raise InvalidInputError("--objective risk needs --beta")
    return ProblemSpec(
        cfg.dataset.matrix,
        cfg.benchmark,
        order,
        objective=objective,
        beta=args.beta if objective == "risk" else None,
        risk_norm=args.risk_norm,
        tolerance=args.tol,
        max_iter=args.max_iter,
    )


def cmd_verify(args) -> int:
    cfg = _load(args)
    if args.tol < 0:
        raise InvalidInputError("--tol must be >= 0")
    w = _read_weights(args, cfg.dataset.matrix.d)
    y = portfolio_returns(cfg.dataset.matrix, w)
    order = args.order
    if args.method == "norm":
        rep = verify_dominance(y, cfg.benchmark, order, args.tol, args.grid or DEFAULT_SCAN)
    elif args.method == "grid":
        rep = verify_dense_grid(y, cfg.benchmark, order, args.grid or DENSE_GRID, args.tol)
    else:
        rep = verify_dominance_risk(cfg.benchmark, y, order, args.tol, args.grid or DEFAULT_LEVELS)
    if args.plot_gap:
        t, g = gap_curve(y, cfg.benchmark, order)
        write_gap_csv(args.plot_gap, t, g)
    _emit(rep.to_dict(), args.json)
    return EXIT_OK if rep.dominates else EXIT_NO


def cmd_optimize(args) -> int:
    cfg = _load(args)
    rep = solve(_problem(args, cfg, args.order))
    _emit(rep.to_dict(), args.json)
    if not rep.converged:
        print(f"sdopt: not converged (flags: {', '.join(rep.flags) or 'none'})", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _parse_orders(text: str) -> list[Order]:
    try:
        orders = [Order.parse(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise InvalidInputError(f"cannot parse orders {text!r}") from None
    if not orders:
        raise InvalidInputError("need at least one order")
    return orders


def cmd_sweep(args) -> int:
    cfg = _load(args)
    orders = _parse_orders(args.orders)
    reps = order_sweep(_problem(args, cfg, orders[0]), orders)
    _emit([r.to_dict() for r in reps], args.json)
    if args.allocation_csv:
        names = cfg.dataset.matrix.asset_names
        with open(args.allocation_csv, "w") as fh:
            fh.write(",".join(["order", "converged", "objective", *names]) + "\n")
            for o, r in zip(orders, reps):
                row = [str(o), str(r.converged).lower(), repr(float(r.objective_value))]
                fh.write(",".join(row + [repr(float(w)) for w in r.weights]) + "\n")
    for o, r in zip(orders, reps):
        if not r.converged:
            print(f"sdopt: order {o} did not converge", file=sys.stderr)
    return EXIT_OK if any(r.converged for r in reps) else EXIT_NONCONVERGED


def cmd_reproduce(args) -> int:
    res = reproduce(args.target)
    if args.json:
        _emit(res.to_dict(), True)
    else:
        print(res.format())
    if not res.ok:
        bad = ", ".join(c.name for c in res.failures)
        print(f"sdopt: tolerance breached in: {bad}", file=sys.stderr)
        return EXIT_BREACH
    return EXIT_OK


def cmd_stats(args) -> int:
    ds = data.load_dataset(args.dataset, args.unit)
    _emit({"dataset": ds.source, "unit": ds.unit, "assets": data.describe(ds.matrix)}, args.json)
    return EXIT_OK


ORACLE_ORDERS = ("1", "1.5", "2", "3", "5", "inf")


def random_instance(rng: np.random.Generator) -> tuple[ScenarioVector, ScenarioVector]:
    """A random (portfolio, benchmark) pair, about half of them dominating.

    Portfolio returns come from random simplex weights on ``n x d`` scenario
    data; odd draws shift a copy of the benchmark upward so dominance holds.
    """
    n = int(rng.integers(2, 51))
    d = int(rng.integers(1, 9))
    m = ScenarioMatrix(rng.normal(size=(n, d)))
    bench = equal_weight_benchmark(m)
    if rng.random() < 0.5:
        w = rng.dirichlet(np.ones(d))
        y = portfolio_returns(m, w)
    else:
        y = ScenarioVector(bench.outcomes + np.abs(rng.normal(size=n)) * rng.random())
    return y, bench


def oracle_check(seed: int, count: int, grid: int = DENSE_GRID, orders: Sequence[str] = ORACLE_ORDERS) -> dict:
    """Finite-test-point verdicts against dense-grid verdicts on random instances."""
    rng = np.random.default_rng(seed)
    disagreements = []
    checked = held = 0
    t0 = time.perf_counter()
    for k in range(count):
        y, bench = random_instance(rng)
        for o in orders:
            order = Order.parse(o)
            fast = verify_dominance(y, bench, order)
            dense = verify_dense_grid(y, bench, order, grid)
            checked += 1
            held += fast.dominates
            if fast.dominates != dense.dominates:
                disagreements.append({"instance": k, "order": o, "fast": fast.worst_violation, "dense": dense.worst_violation})
    return {
        "seed": seed,
        "instances": count,
        "checks": checked,
        "dominating": held,
        "disagreements": disagreements,
        "seconds": time.perf_counter() - t0,
    }


def cmd_check(args) -> int:
    res = oracle_check(args.seed, args.count, args.grid)
    _emit(res, args.json)
    return EXIT_OK if not res["disagreements"] else EXIT_NO


COMMANDS = {
    "verify": cmd_verify,
    "optimize": cmd_optimize,
    "sweep": cmd_sweep,
    "reproduce": cmd_reproduce,
    "stats": cmd_stats,
    "check": cmd_check,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except InvalidInputError as exc:
        print(f"sdopt: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
