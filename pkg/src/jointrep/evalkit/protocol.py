"""Batched evaluation rollouts."""

from __future__ import annotations

from typing import Protocol, Sequence

import numpy as np

from ..worlds.reacher import WorldConfig, reset, step


class Policy(Protocol):
    def reset(self, n: int) -> None: ...

    def act(self, obs: dict[str, np.ndarray]) -> np.ndarray: ...


class RandomPolicy:
    """Uniform actions in [-1, 1]^d from a seeded generator."""

    def __init__(self, action_dim: int = 2, seed: int = 0):
        self.action_dim = action_dim
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self, n: int) -> None:
        self.rng = np.random.default_rng(self.seed)

    def act(self, obs) -> np.ndarray:
        n = len(next(iter(obs.values())))
        return self.rng.uniform(-1.0, 1.0, (n, self.action_dim))


def eval_seeds(n: int, base: int = 0) -> list[int]:
    """Episode seeds for evaluation, disjoint from training seeds in practice."""
    return [1_000_003 * (base + 1) + i for i in range(n)]


def evaluate_policy(config: WorldConfig, policy: Policy, n_rollouts: int = 20, seeds: Sequence[int] | None = None,
                    record: bool = False):
    """Run ``n_rollouts`` episodes in lockstep; returns the list of episode returns in seed order.

    With ``record=True`` also returns the per-step observations, clean
    states and rewards (used by the probe and saliency tools).
    """
    seeds = list(seeds) if seeds is not None else eval_seeds(n_rollouts)
    if len(seeds) != n_rollouts:
        raise ValueError(f"{n_rollouts} rollouts need {n_rollouts} seeds, got {len(seeds)}")
    states, obs = zip(*(reset(config, s) for s in seeds))
    states = list(states)
    policy.reset(n_rollouts)
    returns = np.zeros(n_rollouts)
    trace = {"obs": [], "states": [], "rewards": []}
    batch = {k: np.stack([o[k] for o in obs]) for k in obs[0]}
    for _ in range(config.agent_steps):
        if record:
            trace["obs"].append(batch)
            trace["states"].append(list(states))
        actions = np.asarray(policy.act(batch))
        new_obs, rewards = [], []
        for i in range(n_rollouts):
            states[i], o, r = step(states[i], actions[i])
            new_obs.append(o)
            rewards.append(r)
        returns += rewards
        if record:
            trace["rewards"].append(np.array(rewards))
        batch = {k: np.stack([o[k] for o in new_obs]) for k in new_obs[0]}
    out = [float(r) for r in returns]
    return (out, trace) if record else out
