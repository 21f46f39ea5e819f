"""Bootstrapped lambda-returns."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..diffgraph import graph as G
from ..diffgraph.graph import Node
from ..errors import UsageError


def lambda_returns(rewards: Sequence, values: Sequence, gamma: float = 0.99, lam: float = 0.95):
    """G_t = r_t + gamma * ((1 - lam) v_{t+1} + lam G_{t+1}), with G_H = v_H.

    ``values`` has one more entry than ``rewards``.  Plain numbers give a
    numpy array of shape (H, ...); graph nodes give a list of H nodes that
    stay differentiable.
    """
    H = len(rewards)
    if len(values) != H + 1:
        raise UsageError(f"lambda_returns: {H} rewards need {H + 1} values, got {len(values)}")
    if any(isinstance(x, Node) for x in list(rewards) + list(values)):
        nxt = G.lift(values[H])
        out = [None] * H
        for t in reversed(range(H)):
            mix = G.add(G.mul(1.0 - lam, values[t + 1]), G.mul(lam, nxt))
            nxt = G.add(rewards[t], G.mul(gamma, mix))
            out[t] = nxt
        return out
    r = np.asarray(rewards, float)
    v = np.asarray(values, float)
    out = np.empty_like(r)
    nxt = v[H]
    for t in reversed(range(H)):
        nxt = r[t] + gamma * ((1.0 - lam) * v[t + 1] + lam * nxt)
        out[t] = nxt
    return out
