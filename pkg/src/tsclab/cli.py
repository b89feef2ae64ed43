"""Command-line entry point: ``tsclab {generate,train,eval,baseline,encoder-info}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .agents import BASELINES, PolicyModel, feature_dim, train
from .domainrand import Scenario, generate_scenario
from .harness import (ExperimentConfig, baseline_policy, checkpoint_policy, evaluate_policy,
                      format_summary)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsclab", description="Graph-attention traffic signal control experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--head", help=f"dqn, a2c or a baseline ({', '.join(BASELINES)})")
        sp.add_argument("--reward-mode", choices=("log-distance", "pressure"))
        sp.add_argument("--ablate", help="comma-separated subset of pe,gamma,jaccard,prior")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("generate", help="write a randomised scenario bundle"))
    common(sub.add_parser("train", help="train a policy and write checkpoint and log"))
    ev = common(sub.add_parser("eval", help="evaluate a checkpoint on the evaluation seeds"))
    ev.add_argument("--checkpoint", help="checkpoint file (defaults to the config value)")
    common(sub.add_parser("baseline", help="evaluate a heuristic baseline"))
    common(sub.add_parser("encoder-info", help="print encoder parameter counts per level"))
    return p


def _config(args) -> ExperimentConfig:
    overrides = {
        "seed": args.seed,
        "head": args.head,
        "reward_mode": args.reward_mode,
        "ablate": [s for s in args.ablate.split(",") if s] if args.ablate is not None else None,
        "out": args.out,
        "checkpoint": getattr(args, "checkpoint", None),
    }
    return ExperimentConfig.load(args.config, **overrides)


def cmd_generate(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    if cfg.scenario == "generated":
        scenario = generate_scenario(cfg.domain_config())
    else:
        scenario = Scenario.load(cfg.scenario)
    scenario.save(out)
    cfg.write(out)
    net = scenario.network
    print(f"wrote {out}: {len(net.intersections)} intersections, {len(net.lanes)} lanes, "
          f"{len(scenario.flows)} flows, {sum(f.vehicle_count for f in scenario.flows)} vehicles")
    return 0


def cmd_train(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    cfg.write(out)
    _, rows = train(cfg.train_config(), out)
    last = rows[-1] if rows else None
    print(f"trained {cfg.head} for {cfg.steps} decision steps -> {out / 'checkpoint.bin'}")
    if last is not None:
        print(f"final mean reward {last[1]:.4f}, mean queue {last[2]:.2f}")
    return 0


def cmd_eval(cfg: ExperimentConfig) -> int:
    if not cfg.checkpoint:
        raise ValueError("eval needs --checkpoint or a 'checkpoint' config entry")
    out = Path(cfg.out)
    cfg.write(out)
    _, factory = checkpoint_policy(cfg.checkpoint, cfg)
    _, agg = evaluate_policy(cfg, factory, out, tag="eval")
    print(format_summary("eval", agg))
    return 0


def cmd_baseline(cfg: ExperimentConfig) -> int:
    if cfg.head not in BASELINES:
        raise ValueError(f"baseline needs --head in {sorted(BASELINES)}, got {cfg.head!r}")
    out = Path(cfg.out)
    cfg.write(out)
    _, agg = evaluate_policy(cfg, baseline_policy(cfg.head), out, tag=cfg.head)
    print(format_summary(cfg.head, agg))
    return 0


def cmd_encoder_info(cfg: ExperimentConfig) -> int:
    head = cfg.head if cfg.head in ("dqn", "a2c") else "dqn"
    model = PolicyModel(head, feature_dim(cfg.d_pe), cfg.seed)
    counts = model.encoder.parameter_counts()
    total = model.store.count()
    for lvl, n in counts.items():
        print(f"{lvl}\t{n}")
    print(f"encoder\t{sum(counts.values())}")
    print(f"{head} head\t{total - sum(counts.values())}")
    print(f"total\t{total}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "encoder-info": cmd_encoder_info,
}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](cfg)
    except (ValueError, KeyError, OSError) as exc:
        print(f"tsclab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
