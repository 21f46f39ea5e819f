"""Adam with global-norm gradient clipping, operating on a ParamStore."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffgraph.layers import ParamStore

# as printed for the representation optimizer; (0.9, 0.999) is the usual choice
PAPER_BETAS = (0.99, 0.9)
CONVENTIONAL_BETAS = (0.9, 0.999)


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float | None) -> tuple[list[np.ndarray], float]:
    """Scale all gradients by max_norm/norm iff the global norm exceeds max_norm."""
    norm = global_norm(grads)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


@dataclass
class AdamConfig:
    lr: float = 3e-4
    beta1: float = PAPER_BETAS[0]
    beta2: float = PAPER_BETAS[1]
    eps: float = 1e-8
    clip_norm: float | None = 10.0


class Adam:
    def __init__(self, store: ParamStore, config: AdamConfig | None = None, **overrides):
        cfg = config or AdamConfig()
        for k, v in overrides.items():
            setattr(cfg, k, v)
        self.store = store
        self.config = cfg
        self.t = 0
        self.m = {k: np.zeros_like(n.value) for k, n in store.items()}
        self.v = {k: np.zeros_like(n.value) for k, n in store.items()}

    def step(self) -> float:
        """Apply one update from the accumulated grads; returns the pre-clip norm."""
        cfg = self.config
        names = list(self.store)
        grads = [self.store[k].grad if self.store[k].grad is not None else np.zeros_like(self.store[k].value) for k in names]
        grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in zip(names, grads):
            m = b1 * self.m[k] + (1.0 - b1) * g
            v = b2 * self.v[k] + (1.0 - b2) * g * g
            self.m[k], self.v[k] = m, v
            node = self.store[k]
            node.value = node.value - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        return norm

    # -- checkpoint support ---------------------------------------------------
    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([float(self.t)])}
        for k in self.store:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, prefix: str, arrays) -> None:
        self.t = int(arrays[f"{prefix}.t"][0])
        for k in self.store:
            self.m[k] = np.array(arrays[f"{prefix}.m.{k}"])
            self.v[k] = np.array(arrays[f"{prefix}.v.{k}"])
