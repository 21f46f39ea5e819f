"""Soft actor-critic on frozen representation features."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..diffgraph import graph as G
from ..diffgraph.graph import Node
from ..diffgraph.layers import Mlp, MlpSpec, ParamStore, mlp_apply
from ..dists import HALF_LOG_2PI
from ..optim import CONVENTIONAL_BETAS, Adam, AdamConfig

LOG2 = math.log(2.0)


@dataclass
class SacConfig:
    hidden: tuple[int, ...] = (256, 256, 256)  # 3 x 1024 at full scale
    activation: str = "elu"
    gamma: float = 0.99
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    alpha_lr: float = 1e-3
    actor_clip: float = 10.0
    critic_clip: float = 100.0
    target_decay: float = 0.995
    target_interval: int = 1
    init_alpha: float = 0.1
    target_entropy: float | None = None  # defaults to -action_dim
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    seed: int = 0


def tanh_log_det(u) -> Node:
    """log(1 - tanh(u)^2) summed over the last axis, in the overflow-free form."""
    u = G.lift(u)
    per = G.mul(2.0, G.sub(G.sub(LOG2, u), G.softplus(G.mul(-2.0, u))))
    return G.sum_(per, axis=-1)


def squashed_log_prob(mean, std, u) -> Node:
    """log density of a = tanh(u) where u ~ N(mean, std^2), evaluated at the pre-image u."""
    mean, std, u = G.lift(mean), G.lift(std), G.lift(u)
    z = G.div(G.sub(u, mean), std)
    base = G.sub(G.neg(G.add(G.mul(0.5, G.square(z)), G.log(std))), HALF_LOG_2PI)
    return G.sub(G.sum_(base, axis=-1), tanh_log_det(u))


class SquashedGaussianActor:
    def __init__(self, store: ParamStore, name: str, d_in: int, action_dim: int, cfg: SacConfig):
        self.cfg = cfg
        spec = MlpSpec.make(cfg.hidden, cfg.activation, {"mean": action_dim, "log_std": action_dim})
        self.net = Mlp(store, name, d_in, spec)
        self.action_dim = action_dim

    def dist(self, features):
        out = mlp_apply(self.net, features)
        lo, hi = self.cfg.log_std_min, self.cfg.log_std_max
        # squash the raw head into [lo, hi]
        log_std = G.add(lo, G.mul(0.5 * (hi - lo), G.add(G.tanh(out["log_std"]), 1.0)))
        return out["mean"], G.exp(log_std)

    def sample(self, features, eps: np.ndarray):
        """Reparameterized action and its log-probability."""
        mean, std = self.dist(features)
        u = G.add(mean, G.mul(std, eps))
        return G.tanh(u), squashed_log_prob(mean, std, u)

    def mode(self, features) -> Node:
        mean, _ = self.dist(features)
        return G.tanh(mean)


class TwinCritic:
    def __init__(self, store: ParamStore, name: str, d_in: int, action_dim: int, cfg: SacConfig):
        spec = MlpSpec.make(cfg.hidden, cfg.activation, {"q": 1})
        self.q1 = Mlp(store, f"{name}.q1", d_in + action_dim, spec)
        self.q2 = Mlp(store, f"{name}.q2", d_in + action_dim, spec)

    def __call__(self, features, action):
        x = G.concat([G.lift(features), G.lift(action)], axis=-1)
        n = x.shape[0]
        return (G.reshape(mlp_apply(self.q1, x)["q"], (n,)), G.reshape(mlp_apply(self.q2, x)["q"], (n,)))


def alpha_update(mean_log_prob: float, target_entropy: float, log_alpha: float, lr: float = 1e-3) -> float:
    """One gradient step on alpha * (-log pi - target) with respect to log_alpha."""
    grad = math.exp(log_alpha) * (-float(mean_log_prob) - float(target_entropy))
    return float(log_alpha) - lr * grad


class SacAgent:
    def __init__(self, feature_dim: int, action_dim: int, config: SacConfig | None = None):
        cfg = config or SacConfig()
        self.config = cfg
        self.feature_dim, self.action_dim = feature_dim, action_dim
        self.target_entropy = -float(action_dim) if cfg.target_entropy is None else float(cfg.target_entropy)
        self.actor_store = ParamStore(np.random.default_rng([cfg.seed, 1]))
        self.critic_store = ParamStore(np.random.default_rng([cfg.seed, 2]))
        self.target_store = ParamStore(np.random.default_rng([cfg.seed, 3]))
        self.actor = SquashedGaussianActor(self.actor_store, "actor", feature_dim, action_dim, cfg)
        self.critic = TwinCritic(self.critic_store, "critic", feature_dim, action_dim, cfg)
        self.target = TwinCritic(self.target_store, "critic", feature_dim, action_dim, cfg)
        self.target_store.copy_from(self.critic_store)
        self.log_alpha = math.log(cfg.init_alpha)
        self.actor_opt = Adam(self.actor_store, AdamConfig(cfg.actor_lr, *CONVENTIONAL_BETAS, 1e-8, cfg.actor_clip))
        self.critic_opt = Adam(self.critic_store, AdamConfig(cfg.critic_lr, *CONVENTIONAL_BETAS, 1e-8, cfg.critic_clip))
        self.updates = 0

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    def act(self, features: np.ndarray, rng: np.random.Generator, explore: bool = True) -> np.ndarray:
        features = np.atleast_2d(features)
        if not explore:
            return self.actor.mode(features).value
        eps = rng.standard_normal((features.shape[0], self.action_dim))
        a, _ = self.actor.sample(features, eps)
        return a.value

    def critic_target(self, reward, next_features, done, eps_next) -> np.ndarray:
        """r + gamma * (1 - done) * (min target Q(s', a') - alpha log pi(a'|s'))."""
        a_next, logp_next = self.actor.sample(next_features, eps_next)
        t1, t2 = self.target(next_features, a_next.value)
        soft = np.minimum(t1.value, t2.value) - self.alpha * logp_next.value
        return np.asarray(reward, float) + self.config.gamma * (1.0 - np.asarray(done, float)) * soft

    def update(self, batch: dict, rng: np.random.Generator) -> dict:
        """Critic step, actor step, temperature step, then target averaging."""
        cfg = self.config
        f, a = np.asarray(batch["features"], float), np.asarray(batch["action"], float)
        f_next = np.asarray(batch["next_features"], float)
        done = batch.get("done", np.zeros(len(f)))
        n = f.shape[0]

        y = self.critic_target(batch["reward"], f_next, done, rng.standard_normal((n, self.action_dim)))
        self.critic_store.zero_grad()
        q1, q2 = self.critic(f, a)
        critic_loss = G.add(G.mean(G.square(G.sub(q1, y))), G.mean(G.square(G.sub(q2, y))))
        critic_loss.backward()
        self.critic_opt.step()

        self.actor_store.zero_grad()
        with self.critic_store.frozen():
            a_pi, logp = self.actor.sample(f, rng.standard_normal((n, self.action_dim)))
            p1, p2 = self.critic(f, a_pi)
            actor_loss = G.mean(G.sub(G.mul(self.alpha, logp), G.minimum(p1, p2)))
            actor_loss.backward()
        self.actor_opt.step()

        mean_logp = float(np.mean(logp.value))
        self.log_alpha = alpha_update(mean_logp, self.target_entropy, self.log_alpha, cfg.alpha_lr)

        self.updates += 1
        if self.updates % cfg.target_interval == 0:
            self.target_store.ema_from(self.critic_store, cfg.target_decay)
        return {
            "critic_loss": float(critic_loss.value),
            "actor_loss": float(actor_loss.value),
            "alpha": self.alpha,
            "entropy": -mean_logp,
            "q_mean": float(np.mean(q1.value)),
        }

    # -- persistence ----------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, store in (("actor", self.actor_store), ("critic", self.critic_store), ("target", self.target_store)):
            out.update({f"{prefix}/{k}": v for k, v in store.arrays().items()})
        out.update(self.actor_opt.state_arrays("opt.actor"))
        out.update(self.critic_opt.state_arrays("opt.critic"))
        out["log_alpha"] = np.array([self.log_alpha])
        out["updates"] = np.array([float(self.updates)])
        return out

    def load_state_arrays(self, arrays) -> None:
        for prefix, store in (("actor", self.actor_store), ("critic", self.critic_store), ("target", self.target_store)):
            store.load_arrays({k: arrays[f"{prefix}/{k}"] for k in store if f"{prefix}/{k}" in arrays})
        self.actor_opt.load_state_arrays("opt.actor", arrays)
        self.critic_opt.load_state_arrays("opt.critic", arrays)
        self.log_alpha = float(arrays["log_alpha"][0])
        self.updates = int(arrays["updates"][0])


def sac_update(batch: dict, agent: SacAgent, rng: np.random.Generator) -> dict:
    return agent.update(batch, rng)
