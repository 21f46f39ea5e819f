"""Diagonal Gaussians over graph nodes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffgraph import graph as G
from .diffgraph.graph import Node
from .errors import ShapeError

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
MIN_STD = 0.1


@dataclass
class DiagGaussian:
    """Independent normals; ``mean`` and ``std`` share shape (..., dim)."""

    mean: Node
    std: Node

    def __post_init__(self):
        self.mean = G.lift(self.mean)
        self.std = G.lift(self.std)
        if self.mean.shape != self.std.shape:
            raise ShapeError("DiagGaussian", f"mean {self.mean.shape} vs std {self.std.shape}")
        if np.any(self.std.value <= 0):
            raise ValueError("DiagGaussian std must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(G.detach(self.mean), G.detach(self.std))


def std_from_raw(raw) -> Node:
    """softplus(raw) + 0.1: strictly positive with a floor at 0.1."""
    return G.add(G.softplus(raw), MIN_STD)


def rsample(d: DiagGaussian, noise) -> Node:
    """Reparameterized draw mean + std * noise."""
    noise = G.lift(noise)
    if noise.shape != d.mean.shape:
        raise ShapeError("rsample", f"noise {noise.shape} does not match distribution {d.mean.shape}")
    return G.add(d.mean, G.mul(d.std, noise))


def log_prob(d: DiagGaussian, x) -> Node:
    """Sum over the last axis of univariate normal log densities."""
    x = G.lift(x)
    if x.shape != d.mean.shape:
        raise ShapeError("log_prob", f"value {x.shape} does not match distribution {d.mean.shape}")
    z = G.div(G.sub(x, d.mean), d.std)
    per_dim = G.sub(G.neg(G.add(G.mul(0.5, G.square(z)), G.log(d.std))), HALF_LOG_2PI)
    return G.sum_(per_dim, axis=-1)


def unit_log_prob(mean, x) -> Node:
    """log N(x; mean, 1) summed over all non-batch axes (fixed unit std)."""
    mean, x = G.lift(mean), G.lift(x)
    if x.shape != mean.shape:
        raise ShapeError("unit_log_prob", f"value {x.shape} does not match mean {mean.shape}")
    axes = tuple(range(1, x.ndim)) if x.ndim > 1 else (0,)
    d = int(np.prod([x.shape[a] for a in axes]))
    sq = G.sum_(G.square(G.sub(x, mean)), axis=axes)
    return G.sub(G.mul(-0.5, sq), d * HALF_LOG_2PI)


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> Node:
    """KL(q || p) summed over the last axis."""
    if q.mean.shape != p.mean.shape:
        raise ShapeError("kl_diag", f"q {q.mean.shape} vs p {p.mean.shape}")
    var_ratio_num = G.add(G.square(q.std), G.square(G.sub(q.mean, p.mean)))
    term = G.add(
        G.sub(G.log(p.std), G.log(q.std)),
        G.div(var_ratio_num, G.mul(2.0, G.square(p.std))),
    )
    return G.sum_(G.sub(term, 0.5), axis=-1)
