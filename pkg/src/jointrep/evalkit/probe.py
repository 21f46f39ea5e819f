"""Probe decoder: reconstruct occlusion-free renders from detached latents.

The probe measures how much of the hidden scene a representation retains.
It never sends gradient into the representation model: latents enter as
plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..diffgraph import graph as G
from ..diffgraph.layers import ConvDecoder, ParamStore, decoder_layers_for
from ..optim import CONVENTIONAL_BETAS, Adam, AdamConfig
from ..rssm import Rssm, policy_features
from ..trainer.augment import crop_augment
from ..worlds.reacher import WorldConfig, render_clean, reset, step


@dataclass
class ProbeResult:
    store: ParamStore
    decoder: ConvDecoder
    losses: list[float] = field(default_factory=list)
    mse: float = float("nan")
    pixel_error: np.ndarray | None = None  # (H, W) mean squared error per pixel
    samples: np.ndarray | None = None  # a few reconstructions, (k, H, W, C)

    def predict(self, latents: np.ndarray) -> np.ndarray:
        return self.decoder(G.constant(np.asarray(latents, dtype=float))).value


def train_probe_decoder(latents, targets, steps: int = 500, batch: int = 64, lr: float = 1e-3,
                        seed: int = 0, n_samples: int = 4) -> ProbeResult:
    """Regress ``targets`` (N, H, W, C) from ``latents`` (N, D) by squared error."""
    z = np.asarray(latents, dtype=float)
    y = np.asarray(targets, dtype=float)
    if z.ndim != 2 or len(z) != len(y):
        raise ValueError(f"need (N, D) latents and N targets, got {z.shape} and {y.shape}")
    rng = np.random.default_rng(seed)
    store = ParamStore(np.random.default_rng([seed, 1]))
    preset = decoder_layers_for(tuple(y.shape[1:]))
    dec = ConvDecoder(store, "probe", z.shape[1], tuple(y.shape[1:]), preset["seed_grid"], preset["layers"])
    opt = Adam(store, AdamConfig(lr, *CONVENTIONAL_BETAS, 1e-8, 100.0))
    res = ProbeResult(store, dec)
    for _ in range(steps):
        idx = rng.integers(0, len(z), min(batch, len(z)))
        store.zero_grad()
        loss = G.mean(G.square(G.sub(dec(G.constant(z[idx])), y[idx])))
        loss.backward()
        opt.step()
        res.losses.append(float(loss.value))
    pred = res.predict(z)
    err = (pred - y) ** 2
    res.mse = float(err.mean())
    res.pixel_error = err.mean(axis=(0, 3))
    res.samples = pred[:n_samples]
    return res


def collect_probe_data(model: Rssm, world: WorldConfig, policy=None, n_episodes: int = 4, seed: int = 0):
    """Filter episodes with ``model`` and pair each latent with a clean render.

    Returns ``(latents (N, D), clean images (N, S, S, 3))`` where S is the
    model's image size (center crop of the pre-crop canvas).  ``policy``
    maps an observation bundle to an action batch; uniform random actions
    are used if it is omitted.
    """
    rng = np.random.default_rng(seed)
    image_ids = [m.id for m in model.config.modalities if m.kind == "image"]
    lat, clean = [], []
    for ep in range(n_episodes):
        state, obs = reset(world, seed * 7919 + ep)
        st = model.initial_state(1)
        prev = np.zeros((1, model.config.action_dim))
        for _ in range(world.agent_steps):
            bundle = {}
            for m in model.config.modalities:
                x = obs[m.id][None]
                if m.id in image_ids:
                    x = crop_augment(x[:, None], world.image_size, None, "eval")[:, 0]
                bundle[m.id] = x
            with model.store.frozen():
                st = model.filter_step(st, prev, bundle).detach()
            feats = policy_features(st).value
            lat.append(feats[0])
            clean.append(crop_augment(render_clean(state)[None], world.image_size, None, "eval")[0])
            a = rng.uniform(-1, 1, (1, world.action_dim)) if policy is None else np.asarray(policy(feats))
            prev = a
            state, obs, _ = step(state, a[0])
    return np.array(lat), np.array(clean)
