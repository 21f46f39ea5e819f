"""Pixel saliency: norm of the Jacobian of the latent features with respect to the image."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from ..diffgraph import graph as G
from ..errors import ConfigError
from ..rssm import LatentState, Rssm, policy_features


def _features(model: Rssm, bundle: Mapping[str, np.ndarray], modality: str, prev: LatentState | None, action):
    images = np.asarray(bundle[modality], dtype=float)
    single = images.ndim == 3
    if single:
        bundle = {k: np.asarray(v)[None] for k, v in bundle.items()}
        images = images[None]
    n = images.shape[0]
    x = G.leaf(images, name=modality)
    inputs = {k: (x if k == modality else G.constant(v)) for k, v in bundle.items()}
    prev = prev if prev is not None else model.initial_state(n)
    action = np.zeros((n, model.config.action_dim)) if action is None else action
    with model.store.frozen():
        st = model.filter_step(prev.detach(), action, inputs)
        feats = policy_features(st, detach=False)
    return x, feats, single


def saliency_map(model: Rssm, bundle: Mapping[str, np.ndarray], modality: str = "image",
                 prev: LatentState | None = None, action=None, method: str = "exact", n_probes: int = 64,
                 rng: np.random.Generator | int | None = 0) -> np.ndarray:
    """Per-pixel Euclidean norm of d features / d pixel, over feature dims and channels.

    ``bundle`` holds one step of observations, (H, W, C) images or a batch of
    them.  Features are [h; posterior mean] after one filtering step from
    ``prev`` (the initial state by default).  ``method="exact"`` runs one
    backward pass per feature dimension; ``method="probe"`` averages
    ``n_probes`` random Gaussian projections, an unbiased estimate of the
    squared norm.  Model parameters receive no gradient.
    """
    m = model.config.modality(modality)
    if m.kind != "image":
        raise ConfigError(f"modality {modality!r} is not an image")
    x, feats, single = _features(model, bundle, modality, prev, action)
    n, d = feats.shape
    sq = np.zeros(x.shape)
    if not feats.requires_grad:
        out = np.zeros(x.shape[:-1])
        return out[0] if single else out
    if method == "exact":
        for j in range(d):
            seed = np.zeros((n, d))
            seed[:, j] = 1.0
            x.grad = None
            G.backward(feats, seed, retain_graph=True)
            if x.grad is not None:
                sq += x.grad ** 2
    elif method == "probe":
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        for _ in range(n_probes):
            x.grad = None
            G.backward(feats, rng.standard_normal((n, d)), retain_graph=True)
            if x.grad is not None:
                sq += x.grad ** 2
        sq /= n_probes
    else:
        raise ConfigError(f"saliency method must be 'exact' or 'probe', got {method!r}")
    out = np.sqrt(sq.sum(axis=-1))
    return out[0] if single else out


def finite_difference_saliency(model: Rssm, bundle: Mapping[str, np.ndarray], modality: str = "image",
                               eps: float = 1e-6) -> np.ndarray:
    """Central-difference reference for a single (H, W, C) image; slow, for testing."""
    base = {k: np.asarray(v, dtype=float) for k, v in bundle.items()}
    img = base[modality]

    def f(im):
        b = dict(base)
        b[modality] = im
        _, feats, _ = _features(model, b, modality, None, None)
        return feats.value[0]

    sq = np.zeros(img.shape)
    for idx in np.ndindex(*img.shape):
        up, dn = img.copy(), img.copy()
        up[idx] += eps
        dn[idx] -= eps
        col = (f(up) - f(dn)) / (2 * eps)
        sq[idx] = np.sum(col ** 2)
    return np.sqrt(sq.sum(axis=-1))
