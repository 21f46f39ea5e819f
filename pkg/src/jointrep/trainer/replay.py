"""Episode storage and uniform subsequence sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import UsageError


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass
class EpisodeRecord:
    """T+1 observations, T actions and T rewards.

    ``rewards[t]`` is earned by ``actions[t]`` (arriving at observation t+1);
    ``reset_reward`` scores the initial observation so every observation
    has a reward target.  Arrays are made read-only on construction.
    """

    obs: dict[str, np.ndarray]
    actions: np.ndarray
    rewards: np.ndarray
    seed: int = 0
    reset_reward: float = 0.0

    def __post_init__(self):
        self.obs = {k: _frozen(v) for k, v in self.obs.items()}
        self.actions = _frozen(self.actions)
        self.rewards = _frozen(self.rewards)
        T = len(self.actions)
        if len(self.rewards) != T:
            raise UsageError(f"episode has {T} actions but {len(self.rewards)} rewards")
        for k, v in self.obs.items():
            if len(v) != T + 1:
                raise UsageError(f"modality {k!r} has {len(v)} observations, expected {T + 1}")

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def num_obs(self) -> int:
        return len(self.actions) + 1

    def obs_rewards(self) -> np.ndarray:
        """Reward target per observation: (T+1,)."""
        return np.concatenate([[self.reset_reward], self.rewards])

    def obs_actions(self) -> np.ndarray:
        """Action taken after each observation, zero after the last: (T+1, A)."""
        return np.concatenate([self.actions, np.zeros((1, self.actions.shape[1]))])

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.obs):
            h.update(self.obs[k].tobytes())
        h.update(self.actions.tobytes())
        h.update(self.rewards.tobytes())
        return h.hexdigest()


@dataclass
class Batch:
    obs: dict[str, np.ndarray]  # (b, l, ...)
    actions: np.ndarray  # (b, l, A): action taken after each observation
    rewards: np.ndarray  # (b, l): reward target of each observation
    episode: np.ndarray
    start: np.ndarray


@dataclass
class ReplayBuffer:
    capacity_steps: int | None = None
    episodes: list[EpisodeRecord] = field(default_factory=list)

    def add(self, ep: EpisodeRecord) -> None:
        self.episodes.append(ep)
        if self.capacity_steps is not None:
            while len(self.episodes) > 1 and self.total_steps > self.capacity_steps:
                self.episodes.pop(0)
        self._cache = None

    @property
    def total_steps(self) -> int:
        return sum(e.length for e in self.episodes)

    def __len__(self) -> int:
        return len(self.episodes)

    def window_counts(self, l: int) -> np.ndarray:
        return np.array([max(e.num_obs - l + 1, 0) for e in self.episodes], dtype=np.int64)


def sample_subsequences(buffer: ReplayBuffer, b: int, l: int, rng: np.random.Generator) -> Batch:
    """``b`` windows of ``l`` consecutive observations, uniform over (episode, start) pairs."""
    if l < 1 or b < 1:
        raise UsageError("batch size and length must be positive")
    counts = buffer.window_counts(l)
    total = int(counts.sum())
    if total == 0:
        raise UsageError(f"no stored episode holds {l} consecutive observations")
    flat = rng.integers(0, total, size=b)
    bounds = np.cumsum(counts)
    ep_idx = np.searchsorted(bounds, flat, side="right")
    starts = flat - (bounds[ep_idx] - counts[ep_idx])
    eps = [buffer.episodes[i] for i in ep_idx]
    keys = list(eps[0].obs)
    obs = {k: np.stack([e.obs[k][s: s + l] for e, s in zip(eps, starts)]) for k in keys}
    actions = np.stack([e.obs_actions()[s: s + l] for e, s in zip(eps, starts)])
    rewards = np.stack([e.obs_rewards()[s: s + l] for e, s in zip(eps, starts)])
    return Batch(obs, actions, rewards, ep_idx, starts)
