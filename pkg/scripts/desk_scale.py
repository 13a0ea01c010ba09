"""Desk-scale experiment: train DDQN-PER, then evaluate it and the TTC rule
policy on the training topology and on the unseen four-way topology."""
import argparse
import json
import logging
import time
from pathlib import Path

from uninav.harness import desk_scale_config, run_evaluation, run_training


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--episodes", type=int, default=150)
    ap.add_argument("--train-every", type=int, default=4)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    cfg = desk_scale_config(out / "train", args.seed, args.episodes, args.train_every)
    start = time.time()

    def progress(ep, rec, learner):
        logging.info("ep %3d  %-9s steps %3d  return %9.3f  eps %.3f  updates %d",
                     ep, rec.outcome.value, rec.steps, rec.ret, learner.epsilon, learner.n_updates)

    result = run_training(cfg, progress)
    train_minutes = (time.time() - start) / 60
    report = {"train_minutes": train_minutes}
    for name, algo, topo in [("agent-three-way", "ddqn-per", "three-way-25x25"),
                             ("agent-four-way", "ddqn-per", "four-way-26x17"),
                             ("ttc-three-way", "rule-based", "three-way-25x25"),
                             ("ttc-four-way", "rule-based", "four-way-26x17")]:
        ecfg = cfg.replace(algo=algo, out_dir=str(out / name))
        s = run_evaluation(ecfg, result.checkpoint if algo != "rule-based" else None,
                           topology=topo, keep_log=False)
        report[name] = {"collision_free": s.collision_free, "successful": s.successful,
                        "outcomes": s.outcomes, **s.means}
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
