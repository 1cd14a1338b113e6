"""Command-line driver: run simulations, verify clearings, emit reports.

Exit codes are a stable contract: 0 success, 1 verification or pipeline
failure, 2 usage/validation errors. All outputs are deterministic
functions of the scenario plus overrides.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .agent import FlexibilityOffer
from .market import (AgentClearing, ClearingResult, MarketError,
                     run_simulation, verify_equilibrium)
from .pricing import PriceSignal, aggregate_offers, check_budget_balance
from .scenario import ScenarioError, ScenarioFileError, scenario_from_dict
from .traceio import TraceIoError, read_trace, write_report, write_trace


def _parse_override(text: str):
    if "=" not in text:
        raise ValueError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _apply_overrides(doc: dict, overrides) -> dict:
    for key, value in overrides:
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            if isinstance(node, list):
                node = node[int(p)]
            else:
                node = node.setdefault(p, {})
        leaf = parts[-1]
        if isinstance(node, list):
            node[int(leaf)] = value
        else:
            node[leaf] = value
    return doc


def _load(args):
    path = Path(args.scenario)
    if not path.exists():
        raise ScenarioFileError(f"scenario not found: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    _apply_overrides(doc, [_parse_override(o) for o in args.override])
    return scenario_from_dict(doc, base_dir=path.parent)


def cmd_run(args) -> int:
    s = _load(args)
    trace = run_simulation(s)
    out = Path(args.out)
    write_trace(trace, out, [a.gamma for a in s.agents])
    print(f"wrote trace to {out}/ ({len(trace.clearings)} clearings)")
    print(f"{'step':>4} {'pi':>7} {'mu':>8} {'mu_tilde':>8} {'p_tilde':>9} "
          f"{'tracking':>10} {'budget':>10}")
    for cr in trace.clearings:
        print(f"{cr.step:>4} {cr.pi:>7.4f} {cr.prices.mu:>8.4f} "
              f"{cr.prices.mu_tilde:>8.4f} {cr.p_tilde:>9.3f} "
              f"{cr.tracking_error:>10.2e} {cr.budget_residual:>10.2e}")
    notes = trace.metadata["solver"]["non_optimal_solves"]
    if notes:
        print(f"note: {len(notes)} stage-I solves returned node-limited "
              f"incumbents (see metadata.json)")
    return 0


def _clearings_from_trace(data) -> list:
    """Rebuild per-clearing objects from trace rows for verification."""
    out = []
    for c in data.clearings:
        rows = data.agent_rows(c["step"])
        offers = [FlexibilityOffer(r["agent_id"], r["p0"], r["p_lo"],
                                   r["p_hi"], {}) for r in rows]
        gammas = [r["gamma"] for r in rows]
        agg = aggregate_offers(offers, gammas)
        prices = PriceSignal(mu=c["mu"], mu_tilde=c["mu_tilde"],
                             positivity_ok=c["positivity_ok"],
                             saturation_ok=c["saturation_ok"])
        agents = tuple(AgentClearing(
            agent_id=r["agent_id"], p0=r["p0"], p_lo=r["p_lo"],
            p_hi=r["p_hi"], bid=r["bid"], pay_flex=r["pay_flex"],
            pay_energy=r["pay_energy"]) for r in rows)
        total = sum(r["bid"] for r in rows)
        cr = ClearingResult(
            step=c["step"], prices=prices, p_tilde=c["p_tilde"], agg=agg,
            agents=agents, lem_settlement=c["pi"] * total,
            budget_residual=c["budget_residual"],
            tracking_error=abs(total - c["p_tilde"]), pi=c["pi"],
            degenerate=c["degenerate"])
        out.append((cr, offers, gammas))
    return out


def cmd_verify(args) -> int:
    if args.scenario:
        s = _load(args)
        trace = run_simulation(s)
        gammas = [a.gamma for a in s.agents]
        if args.out:
            write_trace(trace, args.out, gammas)
        triples = []
        for cr in trace.clearings:
            offers = [FlexibilityOffer(r.agent_id, r.p0, r.p_lo, r.p_hi, {})
                      for r in cr.agents]
            triples.append((cr, offers, gammas))
    else:
        if not args.out:
            print("verify: give --scenario to run inline or --out with a trace",
                  file=sys.stderr)
            return 2
        triples = _clearings_from_trace(read_trace(args.out))

    failures = []
    print(f"{'step':>4} {'nash':>6} {'stackelberg':>12} {'budget':>10} "
          f"{'max_improvement':>16}")
    for cr, offers, gammas in triples:
        rep = verify_equilibrium(cr, offers, gammas,
                                 grid_points=args.grid_points, tol=args.tol)
        budget = check_budget_balance(cr.prices, [a.bid for a in cr.agents],
                                      cr.agg, cr.pi, tol=args.tol)
        ok = rep.passed and budget.ok
        if not ok:
            failures.append(cr.step)
        impr = max(rep.improvements.values()) if rep.improvements else 0.0
        print(f"{cr.step:>4} {str(rep.nash_ok):>6} {str(rep.stackelberg_ok):>12} "
              f"{str(budget.ok):>10} {impr:>16.3e}")
    if failures:
        print(f"FAILED clearings: {failures}")
        return 1
    print("all clearings pass")
    return 0


def cmd_report(args) -> int:
    if args.scenario:
        s = _load(args)
        trace = run_simulation(s)
        write_trace(trace, args.out, [a.gamma for a in s.agents])
    data = read_trace(args.out)
    agent = args.agent or data.agents[0]["agent_id"]
    paths = write_report(data, args.out, agent)
    for p in paths:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="flexmarket",
        description="Consumer-level flexibility market simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, scenario_required):
        p.add_argument("--scenario", required=scenario_required,
                       help="scenario JSON file")
        p.add_argument("--out", default=None, help="trace directory")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="dotted-path scenario override (repeatable)")
        p.add_argument("--grid-points", type=int, default=10000)
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--agent", default=None, help="agent id for reports")

    p_run = sub.add_parser("run", help="simulate a scenario and export the trace")
    common(p_run, scenario_required=True)
    p_run.set_defaults(func=cmd_run, out_required=True)

    p_ver = sub.add_parser("verify", help="check every clearing's equilibrium")
    common(p_ver, scenario_required=False)
    p_ver.set_defaults(func=cmd_verify, out_required=False)

    p_rep = sub.add_parser("report", help="emit plot-ready CSV reports")
    common(p_rep, scenario_required=False)
    p_rep.set_defaults(func=cmd_report, out_required=True)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "out_required", False) and not args.out:
        print(f"{args.command}: --out is required", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ScenarioError, TraceIoError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MarketError as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error: cannot parse input: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
