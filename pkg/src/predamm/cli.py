"""Command-line entry point: ``predamm <command> --config run.yaml``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace

from . import sim
from .market_data import DataError


def _parser():
    p = argparse.ArgumentParser(prog="predamm", description="Predictive AMM simulation runs.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        if needs_config:
            sp.add_argument("--config", required=True, help="YAML run configuration")
            sp.add_argument("--seed", type=int, help="overrides the config seed")
            sp.add_argument("--out", help="run directory (overrides the config)")
            sp.add_argument("--price-column", action="store_true",
                            help="CSV carries raw prices (t,price,signal) instead of valuations")
        return sp

    common(sub.add_parser("replay", help="event replay, pseudo-arbitrage ON vs OFF"))
    sp = common(sub.add_parser("train-predictor", help="train the valuation forecaster"))
    sp.add_argument("--checkpoint", help="resume from this predictor checkpoint")
    sp = common(sub.add_parser("train-agent", help="train the nudge-insertion agent"))
    sp.add_argument("--checkpoint", help="predictor checkpoint for the event environment")
    sp.add_argument("--resume", help="resume from this agent checkpoint")
    sp = common(sub.add_parser("evaluate", help="predictive vs look-back fee centring"))
    sp.add_argument("--checkpoint", help="predictor checkpoint")
    sp = sub.add_parser("report", help="recompute a report from a run directory")
    sp.add_argument("run", help="run directory or events CSV")
    return p


def _with_predictor(cfg, path):
    if path is None:
        return cfg
    return replace(cfg, checkpoints=replace(cfg.checkpoints, predictor=path))


def _print(payload):
    print(json.dumps(payload, indent=2, sort_keys=True))


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "report":
            _print(asdict(sim.report(args.run)))
            return sim.EXIT_OK
        cfg = sim.load_config(args.config, seed=args.seed, out=args.out, price_column=args.price_column)
        if args.command == "replay":
            rep = sim.run_replay(cfg)
            _print({**asdict(rep), "divergence_ratio_off_on": rep.divergence_ratio})
        elif args.command == "train-predictor":
            _, history = sim.run_train_predictor(cfg, resume=args.checkpoint)
            if history:
                _print({"epochs": history[-1].epoch, "final_mean_abs_err": history[-1].mean_abs_err})
        elif args.command == "train-agent":
            agent, records = sim.run_train_agent(_with_predictor(cfg, args.checkpoint), resume=args.resume)
            _print({"updates": agent.updates, "decisions": len(records)})
        elif args.command == "evaluate":
            ev = sim.run_evaluate(_with_predictor(cfg, args.checkpoint))
            _print({"predictive": asdict(ev.predictive), "lookback": asdict(ev.lookback),
                    "center_error_ratio_lookback_over_predictive": ev.center_error_ratio})
    except sim.ConvergenceError as exc:
        print(f"convergence check failed: {exc}", file=sys.stderr)
        return sim.EXIT_NOT_CONVERGED
    except (sim.ConfigError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return sim.EXIT_INVALID
    return sim.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
