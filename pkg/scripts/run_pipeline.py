"""End-to-end demo: generate data, train both models, run the benchmark.

Reproduces the headline result (value-guided > static-gain > unassisted on
the biased-operator benchmark) from scratch in one command:

    python scripts/run_pipeline.py --out runs/demo

Expect roughly five minutes on a laptop; pass --quick for a small smoke
version (~1 minute) whose statistics are noisier.
"""

import argparse
import sys
import time

from teleguard.cli import main as cli


def run(argv):
    code = cli(argv)
    if code != 0:
        sys.exit(code)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/demo")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--quick", action="store_true")
    args = parser.parse_args()

    out = args.out
    episodes = "20" if args.quick else "100"
    eval_episodes = "40" if args.quick else "200"
    overrides = []
    if args.quick:
        overrides = ["--set", "critic.steps=2000", "--set", "actor.steps=1000"]

    t0 = time.time()
    run(["gen-data", "--out", f"{out}/data", "--episodes", episodes,
         "--seed", str(args.seed)])
    run(["inspect", "--data", f"{out}/data/dataset.tgd"])
    run(["train-critic", "--data", f"{out}/data/dataset.tgd",
         "--out", f"{out}/critic", "--seed", str(args.seed), *overrides])
    run(["train-actor", "--data", f"{out}/data/dataset.tgd",
         "--critic", f"{out}/critic/critic.ckpt",
         "--out", f"{out}/actor", "--seed", str(args.seed), *overrides])
    run(["evaluate", "--mode", "all", "--operator", "biased",
         "--episodes", eval_episodes,
         "--critic", f"{out}/critic/critic.ckpt",
         "--actor", f"{out}/actor/actor.ckpt",
         "--data", f"{out}/data/dataset.tgd",
         "--out", f"{out}/report", "--seed", str(args.seed)])
    print(f"\npipeline finished in {(time.time() - t0) / 60:.1f} min; "
          f"see {out}/report/summary.txt and the PNG plots next to it")


if __name__ == "__main__":
    main()
