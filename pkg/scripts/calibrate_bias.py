"""Closed-loop Monte Carlo sweep for the biased-operator defaults.

Finds the bias strength whose unassisted failure rate on seeded episodes
lands inside the calibration band [30%, 70%]; the chosen constant is frozen
into teleguard.operators.DEFAULT_BIAS_GAIN.

Usage: python scripts/calibrate_bias.py [--episodes 200]
"""

import argparse

import numpy as np

from teleguard.env import World, WorldConfig, observation_stream
from teleguard.operators import OperatorConfig, make_operator


def failure_rate(world, op_config, episodes):
    failures = 0
    for seed in range(episodes):
        op = make_operator(op_config, world.config, seed)
        state = world.reset(seed)
        rng = observation_stream(world.config, seed)
        while not state.terminal:
            obs = world.observe(state, rng)
            state, _ = world.step(state, op.command(obs))
        failures += state.latched_failure
    return failures / episodes


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--episodes", type=int, default=200)
    parser.add_argument("--noise-std", type=float, default=0.04)
    args = parser.parse_args()

    world = World(WorldConfig())
    print(f"{'bias_gain':>10} {'failure rate':>13}")
    for gain in np.arange(0.30, 1.01, 0.05):
        cfg = OperatorConfig(
            kind="biased",
            noise_std=args.noise_std,
            bias_gain=round(float(gain), 3),
            seed=1,
        )
        rate = failure_rate(world, cfg, args.episodes)
        marker = "  <- in [0.30, 0.70]" if 0.30 <= rate <= 0.70 else ""
        print(f"{gain:>10.2f} {rate:>13.3f}{marker}")


if __name__ == "__main__":
    main()
