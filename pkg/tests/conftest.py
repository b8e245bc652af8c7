import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from teleguard.actor import ActorConfig, ActorModel, train_actor
from teleguard.assist import AssistConfig
from teleguard.critic import CriticConfig, CriticModel, train_critic
from teleguard.data import TransitionDataset, record_episode
from teleguard.env import World, WorldConfig
from teleguard.operators import OPERATOR_KINDS, make_operator, standard_operator_config

# The standard benchmark recipe: every statistical acceptance criterion runs
# on exactly these seeds and configurations, so results are bit-reproducible.
EPISODES_PER_KIND = 100
KIND_SEED_BLOCK = 10_000
OPERATOR_SEED_BASE = 1000
SPLIT_SEED = 123
HOLDOUT_FRACTION = 0.15
EVAL_SEED_BIASED = 50_000
EVAL_SEED_EXPERT = 90_000


@dataclass
class StandardPipeline:
    world_config: WorldConfig
    dataset: TransitionDataset
    train: TransitionDataset
    holdout: TransitionDataset
    critic: CriticModel          # alpha = 5 (the shipped configuration)
    critic_alpha0: CriticModel   # identical but alpha = 0 (conservatism control)
    actor: ActorModel
    assist_config: AssistConfig
    build_seconds: float
    paths: dict = field(default_factory=dict)

    def operator(self, kind: str):
        return standard_operator_config(
            kind, seed=OPERATOR_SEED_BASE + OPERATOR_KINDS.index(kind)
        )


def build_standard_dataset(world_config: WorldConfig) -> list:
    world = World(world_config)
    trajectories = []
    for kind in OPERATOR_KINDS:
        kind_idx = OPERATOR_KINDS.index(kind)
        op_cfg = standard_operator_config(kind, seed=OPERATOR_SEED_BASE + kind_idx)
        for e in range(EPISODES_PER_KIND):
            seed = kind_idx * KIND_SEED_BLOCK + e
            op = make_operator(op_cfg, world_config, seed)
            trajectories.append(record_episode(world, op, seed))
    return trajectories


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory) -> StandardPipeline:
    """The full offline pipeline at benchmark scale, built once per session."""
    t0 = time.time()
    world_config = WorldConfig()
    trajectories = build_standard_dataset(world_config)
    dataset = TransitionDataset(trajectories)
    train, holdout = dataset.split(HOLDOUT_FRACTION, np.random.default_rng(SPLIT_SEED))

    critic = train_critic(train, CriticConfig(alpha=5.0, seed=0))
    critic_alpha0 = train_critic(train, CriticConfig(alpha=0.0, seed=0))
    actor = train_actor(train, critic, ActorConfig(seed=0))

    out = tmp_path_factory.mktemp("pipeline")
    critic_path = out / "critic.ckpt"
    actor_path = out / "actor.ckpt"
    critic.save(critic_path)
    actor.save(actor_path)

    return StandardPipeline(
        world_config=world_config,
        dataset=dataset,
        train=train,
        holdout=holdout,
        critic=critic,
        critic_alpha0=critic_alpha0,
        actor=actor,
        assist_config=AssistConfig(),
        build_seconds=time.time() - t0,
        paths={"critic": critic_path, "actor": actor_path},
    )
