"""Command-line entry point: ``uninav train|eval|baseline``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import sim
from .harness import ConfigError, ExperimentConfig, run_evaluation, run_training

log = logging.getLogger("uninav")


def _base_config(path: str | None) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def _topology(name: str) -> str:
    sim.load_topology(name)  # fail fast on unknown ids
    return name


def _print_summary(summary) -> None:
    print(json.dumps({
        "episodes": summary.episodes,
        "collision_free": summary.collision_free,
        "successful": summary.successful,
        **{f"mean_{k}": v for k, v in summary.means.items()},
    }, indent=2))


def cmd_train(args) -> None:
    cfg = _base_config(args.config)
    changes = {k: v for k, v in (("algo", args.algo), ("seed", args.seed), ("out_dir", args.out)) if v is not None}
    cfg = cfg.replace(**changes)

    def progress(ep, rec, learner):
        log.info("episode %d  return %.3f  steps %d  %s  eps %.3f",
                 ep, rec.ret, rec.steps, rec.outcome.value, learner.epsilon)

    result = run_training(cfg, progress)
    print(result.checkpoint)


def cmd_eval(args) -> None:
    cfg = _base_config(args.config)
    if cfg.algo == "rule-based":
        cfg = cfg.replace(algo="ddqn-per")
    cfg = cfg.replace(out_dir=args.out, topology=_topology(args.topology or cfg.topology))
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint: no such file {args.checkpoint}")
    _print_summary(run_evaluation(cfg, args.checkpoint, episodes=args.episodes, keep_log=not args.no_steps))


def cmd_baseline(args) -> None:
    cfg = _base_config(args.config)
    cfg = cfg.replace(algo="rule-based", out_dir=args.out, topology=_topology(args.topology or cfg.topology))
    _print_summary(run_evaluation(cfg, episodes=args.episodes, keep_log=not args.no_steps))


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uninav", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a Q-network agent")
    t.add_argument("--config", help="experiment config (JSON)")
    t.add_argument("--algo", choices=["dqn", "ddqn", "ddqn-per"])
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint greedily")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--topology", help="preset id or topology JSON file")
    e.add_argument("--episodes", type=_positive)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--no-steps", action="store_true", help="skip the per-step log")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("baseline", help="evaluate the time-to-collision rule policy")
    b.add_argument("--topology")
    b.add_argument("--episodes", type=_positive)
    b.add_argument("--out", required=True)
    b.add_argument("--config")
    b.add_argument("--no-steps", action="store_true")
    b.set_defaults(func=cmd_baseline)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        print(f"uninav: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
