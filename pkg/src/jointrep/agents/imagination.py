"""Actor-critic trained on trajectories imagined by the learned dynamics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffgraph import graph as G
from ..diffgraph.layers import Mlp, MlpSpec, ParamStore, mlp_apply
from ..errors import UsageError
from ..optim import CONVENTIONAL_BETAS, Adam, AdamConfig
from ..rssm import LatentState, NoiseSource, Rssm, policy_features
from .returns import lambda_returns


@dataclass
class ImaginationConfig:
    hidden: tuple[int, ...] = (128, 128, 128)  # 3 x 300 at full scale
    activation: str = "elu"
    horizon: int = 15
    gamma: float = 0.99
    lam: float = 0.95
    actor_lr: float = 8e-5
    value_lr: float = 8e-5
    clip: float = 100.0
    slow_decay: float = 0.98
    slow_interval: int = 1
    slow_weight: float = 1.0
    expl_noise: float = 0.3
    seed: int = 0


class ImaginationAgent:
    def __init__(self, feature_dim: int, action_dim: int, config: ImaginationConfig | None = None):
        cfg = config or ImaginationConfig()
        self.config = cfg
        self.feature_dim, self.action_dim = feature_dim, action_dim
        self.actor_store = ParamStore(np.random.default_rng([cfg.seed, 11]))
        self.value_store = ParamStore(np.random.default_rng([cfg.seed, 12]))
        self.slow_store = ParamStore(np.random.default_rng([cfg.seed, 13]))
        self.actor = Mlp(self.actor_store, "actor", feature_dim, MlpSpec.make(cfg.hidden, cfg.activation, {"mean": action_dim}))
        vspec = MlpSpec.make(cfg.hidden, cfg.activation, {"v": 1})
        self.value = Mlp(self.value_store, "value", feature_dim, vspec)
        self.slow_value = Mlp(self.slow_store, "value", feature_dim, vspec)
        self.slow_store.copy_from(self.value_store)
        self.actor_opt = Adam(self.actor_store, AdamConfig(cfg.actor_lr, *CONVENTIONAL_BETAS, 1e-8, cfg.clip))
        self.value_opt = Adam(self.value_store, AdamConfig(cfg.value_lr, *CONVENTIONAL_BETAS, 1e-8, cfg.clip))
        self.updates = 0

    def policy(self, features):
        """Deterministic tanh policy used inside imagination (differentiable)."""
        return G.tanh(mlp_apply(self.actor, features)["mean"])

    def act(self, features: np.ndarray, rng: np.random.Generator, explore: bool = True) -> np.ndarray:
        a = self.policy(np.atleast_2d(features)).value
        if explore:
            a = np.clip(a + self.config.expl_noise * rng.standard_normal(a.shape), -1.0, 1.0)
        return a

    def _v(self, mlp, features):
        out = mlp_apply(mlp, features)["v"]
        return G.reshape(out, out.shape[:-1])

    def update(self, model: Rssm, start: LatentState, noise: NoiseSource | None) -> dict:
        cfg = self.config
        if cfg.horizon < 1:
            raise UsageError("imagination horizon must be >= 1")
        start = start.detach()

        # actor: maximize lambda-returns through the frozen dynamics
        self.actor_store.zero_grad()
        with model.store.frozen(), self.value_store.frozen():
            traj = model.imagine(start, self.policy, cfg.horizon, noise)
            values = [self._v(self.value, policy_features(st, detach=False)) for st in traj.states]
            returns = lambda_returns(traj.rewards, values, cfg.gamma, cfg.lam)
            actor_loss = G.neg(G.mean(G.stack(returns, axis=0)))
            actor_loss.backward()
        self.actor_opt.step()

        # value: regress onto the (fixed) returns, pulled toward the slow copy
        feats = np.stack([policy_features(st).value for st in traj.states[:-1]], axis=0)
        targets = np.stack([g.value for g in returns], axis=0)
        slow = self._v(self.slow_value, feats).value
        self.value_store.zero_grad()
        v = self._v(self.value, feats)
        value_loss = G.add(G.mean(G.square(G.sub(v, targets))),
                           G.mul(cfg.slow_weight, G.mean(G.square(G.sub(v, slow)))))
        value_loss.backward()
        self.value_opt.step()

        self.updates += 1
        if self.updates % cfg.slow_interval == 0:
            self.slow_store.ema_from(self.value_store, cfg.slow_decay)
        return {
            "actor_loss": float(actor_loss.value),
            "value_loss": float(value_loss.value),
            "imag_return": float(np.mean(targets)),
            "imag_reward": float(np.mean([r.value for r in traj.rewards])),
        }

    # -- persistence ----------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, store in (("actor", self.actor_store), ("value", self.value_store), ("slow", self.slow_store)):
            out.update({f"{prefix}/{k}": v for k, v in store.arrays().items()})
        out.update(self.actor_opt.state_arrays("opt.actor"))
        out.update(self.value_opt.state_arrays("opt.value"))
        out["updates"] = np.array([float(self.updates)])
        return out

    def load_state_arrays(self, arrays) -> None:
        for prefix, store in (("actor", self.actor_store), ("value", self.value_store), ("slow", self.slow_store)):
            store.load_arrays({k: arrays[f"{prefix}/{k}"] for k in store if f"{prefix}/{k}" in arrays})
        self.actor_opt.load_state_arrays("opt.actor", arrays)
        self.value_opt.load_state_arrays("opt.value", arrays)
        self.updates = int(arrays["updates"][0])


def imagination_update(model: Rssm, start: LatentState, agent: ImaginationAgent, noise: NoiseSource | None = None) -> dict:
    return agent.update(model, start, noise)
