"""Model-free and model-based training loops.

Both loops share one skeleton: collect a few random episodes, then alternate
``d`` update steps (representation, then agent) with collecting one episode
using the current policy.  Evaluation runs every ``eval_every`` environment
steps.  All randomness flows from the run seed, so a (seed, config) pair
fully determines the metrics files.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from ..agents.imagination import ImaginationAgent
from ..agents.sac import SacAgent
from ..diffgraph import graph as G
from ..diffgraph.layers import ConvSpec
from ..dists import DiagGaussian
from ..errors import ConfigError
from ..evalkit.protocol import RandomPolicy, eval_seeds, evaluate_policy
from ..evalkit.stats import iqm
from ..objectives import representation_objective
from ..optim import CONVENTIONAL_BETAS, PAPER_BETAS, Adam, AdamConfig
from ..rssm import (
    CONTRASTIVE_PREDICTIVE,
    CONTRASTIVE_VARIATIONAL,
    RECONSTRUCTION,
    ImageDecoderSpec,
    LatentState,
    ModalityConfig,
    NoiseSource,
    Rssm,
    RssmConfig,
    policy_features,
)
from ..worlds.reacher import WorldConfig, reset, reward_of, step
from .augment import crop_augment
from .config import TrainConfig
from .replay import EpisodeRecord, ReplayBuffer, sample_subsequences

LOSS_OF = {"r": RECONSTRUCTION, "cv": CONTRASTIVE_VARIATIONAL, "cpc": CONTRASTIVE_PREDICTIVE}


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _image_specs(base: ModalityConfig, channels):
    """Encoder and decoder specs with the hidden channel counts overridden."""
    if channels is None:
        return base.encoder, base.decoder
    layers = base.encoder.layers
    if len(channels) != len(layers):
        raise ConfigError(f"model.image_channels needs {len(layers)} entries for this image size")
    enc = ConvSpec(tuple((c, k, s) for c, (_, k, s) in zip(channels, layers)), base.encoder.activation)
    dec = base.decoder
    if dec is not None:
        hidden = list(reversed(channels[:-1]))
        if len(hidden) != len(dec.layers) - 1:
            raise ConfigError("model.image_channels does not fit the decoder preset")
        dl = tuple((c, k, s) for c, (_, k, s) in zip(hidden, dec.layers[:-1])) + (dec.layers[-1],)
        dec = ImageDecoderSpec(dec.seed_grid[:2] + (channels[-1],), dl, dec.activation)
    return enc, dec


def modality_configs(cfg: TrainConfig) -> tuple[ModalityConfig, ...]:
    m, w = cfg.model, cfg.world
    shape = (w.image_size, w.image_size, 3)
    img_loss = LOSS_OF[m.objective]
    enc, dec = _image_specs(ModalityConfig.image("image", shape, img_loss), m.image_channels)
    mods = [ModalityConfig("image", "image", shape, img_loss, enc, dec)]
    if m.sensors in ("joint", "fc_joint"):
        prop_loss = img_loss if m.sensors == "fc_joint" else RECONSTRUCTION
        mods.append(ModalityConfig.vector("proprio", w.proprio_dim, prop_loss, m.vector_widths, "elu", m.vector_widths))
    return tuple(mods)


def build_model(cfg: TrainConfig, seed: int) -> Rssm:
    m = cfg.model
    reward = m.reward_widths or ((128, 128) if cfg.train.mode == "model_free" else (300, 300, 300))
    rc = RssmConfig(
        modalities=modality_configs(cfg), action_dim=cfg.world.action_dim, h_dim=m.h_dim, s_dim=m.s_dim,
        det_widths=m.hidden, dyn_widths=m.hidden, var_widths=m.hidden, reward_widths=tuple(reward),
        score_dim=m.score_dim, rho_z_widths=m.rho_z_widths, inv_dyn_widths=m.inv_dyn_widths, seed=seed,
    )
    return Rssm(rc)


def build_agent(cfg: TrainConfig, feature_dim: int, seed: int):
    if cfg.train.mode == "model_free":
        return SacAgent(feature_dim, cfg.world.action_dim, replace(cfg.sac, seed=seed))
    return ImaginationAgent(feature_dim, cfg.world.action_dim, replace(cfg.imag, seed=seed))


def model_optimizer(cfg: TrainConfig, model: Rssm) -> Adam:
    t = cfg.train
    b1, b2 = PAPER_BETAS if t.betas == "paper" else CONVENTIONAL_BETAS
    return Adam(model.store, AdamConfig(t.lr, b1, b2, t.eps, t.clip))


def model_inputs(model: Rssm, obs: dict[str, np.ndarray], image_size: int, rng: np.random.Generator | None,
                 mode: str) -> dict[str, np.ndarray]:
    """Select the model's sensors and crop images to the model size.

    Contrastive image sensors get a per-sequence random crop in training;
    everything else (and everything at evaluation) uses the center crop.
    Observations must carry (B, T) leading axes.
    """
    out = {}
    for m in model.config.modalities:
        x = obs[m.id]
        if m.kind == "image":
            crop_mode = mode if (m.contrastive and mode == "train") else "eval"
            x = crop_augment(x, image_size, rng, crop_mode)
        out[m.id] = x
    return out


# ---------------------------------------------------------------------------
# policies acting in the real environment
# ---------------------------------------------------------------------------

class LatentPolicy:
    """Filters observations online with the model and queries the agent."""

    def __init__(self, model: Rssm, agent, image_size: int, explore: bool, rng: np.random.Generator):
        self.model, self.agent = model, agent
        self.image_size, self.explore, self.rng = image_size, explore, rng
        self.state: LatentState | None = None
        self.prev: np.ndarray | None = None

    def reset(self, n: int) -> None:
        self.state = self.model.initial_state(n)
        self.prev = np.zeros((n, self.model.config.action_dim))

    def act(self, obs: dict[str, np.ndarray]) -> np.ndarray:
        seq = {k: v[:, None] for k, v in obs.items()}
        bundle = {k: v[:, 0] for k, v in model_inputs(self.model, seq, self.image_size, None, "eval").items()}
        with self.model.store.frozen():
            st = self.model.filter_step(self.state, self.prev, bundle)
        self.state = st.detach()
        a = np.clip(self.agent.act(policy_features(st).value, self.rng, self.explore), -1.0, 1.0)
        self.prev = a
        return a


def collect_episode(world: WorldConfig, policy, seed: int) -> EpisodeRecord:
    state, obs = reset(world, seed)
    policy.reset(1)
    frames = {k: [v] for k, v in obs.items()}
    actions, rewards = [], []
    reset_r = reward_of(state)
    for _ in range(world.agent_steps):
        a = np.asarray(policy.act({k: v[None] for k, v in obs.items()}))[0]
        state, obs, r = step(state, a)
        for k, v in obs.items():
            frames[k].append(v)
        actions.append(a)
        rewards.append(r)
    return EpisodeRecord({k: np.array(v) for k, v in frames.items()}, np.array(actions), np.array(rewards), seed,
                         reset_r * world.action_repeat)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def report_columns(model: Rssm) -> list[str]:
    cols = ["objective"]
    for m in model.config.modalities:
        cols.append(f"{m.id}.ll" if m.loss == RECONSTRUCTION else f"{m.id}.mi")
    cols += ["reward.ll", "kl"]
    if model.config.objective == "cpc":
        cols.append("inv_dyn")
    return cols


AGENT_COLUMNS = {
    "model_free": ["critic_loss", "actor_loss", "alpha", "entropy", "q_mean"],
    "model_based": ["actor_loss", "value_loss", "imag_return", "imag_reward"],
}


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class RunResult:
    config: TrainConfig
    seed: int
    metrics: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)  # one row per (step, rollout)
    separation_checks: int = 0
    separation_violations: int = 0
    wall_time: float = 0.0

    def eval_curve(self) -> list[tuple[int, float]]:
        steps = sorted({r["step"] for r in self.evals})
        return [(s, float(np.mean([r["return"] for r in self.evals if r["step"] == s]))) for s in steps]


class Trainer:
    def __init__(self, config: TrainConfig, seed: int | None = None, out_dir: str | Path | None = None,
                 log: Callable[[str], None] | None = None):
        self.cfg = config
        self.seed = config.train.seed if seed is None else int(seed)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log = log or (lambda msg: None)
        ss = np.random.SeedSequence(self.seed)
        s_model, s_agent, s_collect, s_sample, s_noise, s_act = ss.spawn(6)
        self.rng_collect = np.random.default_rng(s_collect)
        self.rng_sample = np.random.default_rng(s_sample)
        self.rng_act = np.random.default_rng(s_act)
        self.noise = NoiseSource(np.random.default_rng(s_noise))
        self.model = build_model(config, int(s_model.generate_state(1)[0]))
        self.agent = build_agent(config, self.model.feature_dim, int(s_agent.generate_state(1)[0]))
        self.opt = model_optimizer(config, self.model)
        self.buffer = ReplayBuffer()
        self.env_steps = 0
        self.updates = 0
        self.episodes = 0
        self.result = RunResult(config, self.seed)
        self.columns = (["step", "episodes", "updates"] + report_columns(self.model) + ["rssm_grad_norm"]
                        + AGENT_COLUMNS[config.train.mode] + ["rssm_hash_stable", "train_return",
                                                              "eval_return_mean", "eval_return_iqm"])

    # -- pieces --------------------------------------------------------------
    def _episode_seed(self) -> int:
        return int(self.rng_collect.integers(0, 2 ** 31 - 1))

    def collect(self, policy) -> EpisodeRecord:
        ep = collect_episode(self.cfg.world, policy, self._episode_seed())
        self.buffer.add(ep)
        self.env_steps += ep.length * self.cfg.world.action_repeat
        self.episodes += 1
        return ep

    def update(self) -> dict:
        """One representation step followed by one agent step."""
        cfg = self.cfg
        batch = sample_subsequences(self.buffer, cfg.train.b, cfg.train.l, self.rng_sample)
        obs = model_inputs(self.model, batch.obs, cfg.world.image_size, self.rng_sample, "train")
        self.model.store.zero_grad()
        report, rollout = representation_objective(
            self.model, obs, batch.actions, batch.rewards, self.noise,
            cfg.train.free_nats, cfg.train.kl_balance, cfg.train.beta,
        )
        report.loss.backward()
        grad_norm = self.opt.step()
        row = report.values()
        row["rssm_grad_norm"] = grad_norm

        before = self.model.store.digest() if cfg.train.audit_separation else None
        if cfg.train.mode == "model_free":
            feats = np.stack([policy_features(s).value for s in rollout.states], axis=1)
            n = feats.shape[0] * (feats.shape[1] - 1)
            sac_batch = {
                "features": feats[:, :-1].reshape(n, -1),
                "action": batch.actions[:, :-1].reshape(n, -1),
                "reward": batch.rewards[:, 1:].reshape(n),
                "next_features": feats[:, 1:].reshape(n, -1),
                "done": np.zeros(n),
            }
            row.update(self.agent.update(sac_batch, self.rng_act))
        else:
            h, s, post, _ = rollout.stacked()
            n = h.shape[0] * h.shape[1]
            start = LatentState(G.constant(h.value.reshape(n, -1)), G.constant(s.value.reshape(n, -1)),
                                DiagGaussian(G.constant(post.mean.value.reshape(n, -1)),
                                             G.constant(post.std.value.reshape(n, -1))))
            row.update(self.agent.update(self.model, start, self.noise))
        if before is not None:
            stable = before == self.model.store.digest()
            self.result.separation_checks += 1
            self.result.separation_violations += int(not stable)
            row["rssm_hash_stable"] = int(stable)
        self.updates += 1
        return row

    def policy(self, explore: bool) -> LatentPolicy:
        return LatentPolicy(self.model, self.agent, self.cfg.world.image_size, explore, self.rng_act)

    def evaluate(self) -> list[float]:
        cfg = self.cfg
        returns = evaluate_policy(cfg.world, self.policy(explore=False), cfg.train.eval_rollouts,
                                  eval_seeds(cfg.train.eval_rollouts, self.seed))
        for i, r in enumerate(returns):
            self.result.evals.append({
                "task": f"reacher_{cfg.world.variant}", "variant": cfg.model.sensors, "objective": cfg.model.objective,
                "mode": cfg.train.mode, "seed": self.seed, "step": self.env_steps, "rollout": i, "return": r,
            })
        return returns

    # -- main loop -------------------------------------------------------------
    def run(self) -> RunResult:
        cfg = self.cfg
        t0 = time.perf_counter()
        rand = RandomPolicy(cfg.world.action_dim, self._episode_seed())
        for _ in range(cfg.train.seed_episodes):
            self.collect(rand)
        d = cfg.updates_per_collection()
        next_eval = cfg.train.eval_every
        next_ckpt = cfg.train.checkpoint_every
        while self.env_steps < cfg.train.total_env_steps:
            rows = [self.update() for _ in range(d)]
            ep = self.collect(self.policy(explore=True))
            row = {"step": self.env_steps, "episodes": self.episodes, "updates": self.updates,
                   "train_return": float(np.sum(ep.rewards))}
            for col in self.columns:
                vals = [r[col] for r in rows if col in r]
                if vals and col not in row:
                    row[col] = min(vals) if col == "rssm_hash_stable" else float(np.mean(vals))
            stop = False
            if self.env_steps >= next_eval or self.env_steps >= cfg.train.total_env_steps:
                returns = self.evaluate()
                row["eval_return_mean"] = float(np.mean(returns))
                row["eval_return_iqm"] = iqm(returns)
                self.log(f"seed {self.seed} step {self.env_steps}: eval mean {row['eval_return_mean']:.2f} "
                         f"iqm {row['eval_return_iqm']:.2f}")
                while next_eval <= self.env_steps:
                    next_eval += cfg.train.eval_every
                stop = cfg.train.stop_return is not None and row["eval_return_mean"] >= cfg.train.stop_return
            self.result.metrics.append(row)
            if next_ckpt is not None and self.out_dir is not None and self.env_steps >= next_ckpt:
                from .checkpoint import save_checkpoint

                save_checkpoint(self.out_dir / "checkpoint", self.model, self.agent, self.opt, cfg)
                next_ckpt += cfg.train.checkpoint_every
            if stop:
                break
        self.result.wall_time = time.perf_counter() - t0
        if self.out_dir is not None:
            self.write(self.out_dir)
        return self.result

    def write(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics(out_dir / "metrics.csv", self.columns, self.result.metrics)
        write_evals(out_dir / "eval.csv", self.result.evals)
        (out_dir / "config.txt").write_text(self.cfg.to_text())


EVAL_COLUMNS = ["task", "variant", "objective", "mode", "seed", "step", "rollout", "return"]


def write_metrics(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def write_evals(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in EVAL_COLUMNS])


def train_model_free(config: TrainConfig, seed: int | None = None, out_dir=None, log=None) -> RunResult:
    if config.train.mode != "model_free":
        config = replace(config, train=replace(config.train, mode="model_free"))
    return Trainer(config, seed, out_dir, log).run()


def train_model_based(config: TrainConfig, seed: int | None = None, out_dir=None, log=None) -> RunResult:
    if config.train.mode != "model_based":
        config = replace(config, train=replace(config.train, mode="model_based"))
    return Trainer(config, seed, out_dir, log).run()
