"""Representation-learning objectives.

Every builder returns a :class:`LossReport` whose ``total`` is an objective
to *maximize* (``report.loss`` is its negation).  Terms are averaged over
batch and time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .diffgraph import graph as G
from .diffgraph.graph import Node
from .diffgraph.layers import mlp_apply
from .dists import HALF_LOG_2PI, DiagGaussian, kl_diag
from .errors import ConfigError, DomainError, ShapeError, UsageError
from .rssm import (
    CONTRASTIVE_PREDICTIVE,
    CONTRASTIVE_VARIATIONAL,
    RECONSTRUCTION,
    LatentState,
    NoiseSource,
    Rollout,
    Rssm,
    ScoreHead,
)

__all__ = [
    "LossReport", "ScoreHead", "infonce", "infonce_logits", "score_variational", "score_predictive",
    "balanced_kl_free_nats", "reconstruction_elbo", "mixed_variational_loss", "cpc_loss",
    "inverse_dynamics_loss", "representation_objective",
]


@dataclass
class LossReport:
    total: Node
    terms: dict[str, Node] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)
    # supremum of each term; subtracted nonnegative terms have supremum 0
    bounds: dict[str, float] = field(default_factory=dict)

    @property
    def loss(self) -> Node:
        return G.neg(self.total)

    def values(self) -> dict[str, float]:
        out = {"objective": float(self.total.value)}
        out.update({k: float(v.value) for k, v in self.terms.items()})
        return out

    def upper_bound(self) -> float:
        return float(sum(self.weights[k] * self.bounds[k] for k in self.terms if self.weights[k] > 0))


def _assemble(terms: dict[str, Node], weights: dict[str, float], bounds: dict[str, float]) -> LossReport:
    total = None
    for k, node in terms.items():
        w = weights[k]
        contrib = node if w == 1.0 else G.mul(w, node)
        total = contrib if total is None else G.add(total, contrib)
    return LossReport(total, terms, weights, bounds)


# ---------------------------------------------------------------------------
# InfoNCE and score functions
# ---------------------------------------------------------------------------

def infonce_logits(L) -> Node:
    """Symmetric InfoNCE from log scores L[i, j] = log f(z_i, o_j).

    log I + 1/(2I) * sum_i [ (L_ii - lse_j L_ji) + (L_ii - lse_j L_ij) ]
    """
    L = G.lift(L)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ShapeError("infonce", f"score matrix must be square, got {L.shape}")
    n = L.shape[0]
    if n < 2:
        raise ShapeError("infonce", "need at least two pairs")
    idx = np.arange(n)
    diag = G.getitem(L, (idx, idx))
    col = G.logsumexp(L, axis=0)  # over latents for each observation
    row = G.logsumexp(L, axis=1)  # over observations for each latent
    s = G.sum_(G.sub(G.mul(2.0, diag), G.add(col, row)))
    return G.add(G.mul(1.0 / (2 * n), s), math.log(n))


def infonce(S) -> Node:
    """InfoNCE estimate from a matrix of positive scores S[i, j] = f(z_i, o_j)."""
    S = G.lift(S)
    if np.any(~(S.value > 0)):
        raise DomainError("infonce: scores must be strictly positive")
    return infonce_logits(G.log(S))


def score_variational(embedding, state: LatentState, head: ScoreHead) -> Node:
    """f_v = exp((1/lambda) rho_o(e) . rho_z([h; s])), one value per row."""
    return G.exp(head.pair_logits(embedding, state.full()))


def score_predictive(next_embedding, predicted: LatentState, head: ScoreHead) -> Node:
    """f_p: as f_v but against a state forwarded by the dynamics."""
    return G.exp(head.pair_logits(next_embedding, predicted.full()))


# ---------------------------------------------------------------------------
# KL with balancing and free nats
# ---------------------------------------------------------------------------

def balanced_kl_free_nats(post: DiagGaussian, prior: DiagGaussian, alpha: float = 0.8, free_nats: float = 1.0) -> Node:
    """alpha*max(KL(sg(q)||p) - free, 0) + (1-alpha)*max(KL(q||sg(p)) - free, 0), KLs averaged first."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"KL balance must lie in [0, 1], got {alpha}")
    if free_nats < 0:
        raise ConfigError(f"free nats must be nonnegative, got {free_nats}")
    lhs = G.mean(kl_diag(post.detach(), prior))
    rhs = G.mean(kl_diag(post, prior.detach()))
    a = G.maximum(G.sub(lhs, free_nats), 0.0)
    b = G.maximum(G.sub(rhs, free_nats), 0.0)
    if alpha == 1.0:
        return a
    if alpha == 0.0:
        return b
    return G.add(G.mul(alpha, a), G.mul(1.0 - alpha, b))


# ---------------------------------------------------------------------------
# likelihood helpers
# ---------------------------------------------------------------------------

def _unit_ll(mean: Node, target, trailing: int) -> Node:
    """Mean over leading axes of log N(target; mean, I) summed over trailing axes."""
    target = G.lift(target)
    if target.shape != mean.shape:
        raise ShapeError("log_likelihood", f"target {target.shape} vs prediction {mean.shape}")
    axes = tuple(range(mean.ndim - trailing, mean.ndim))
    d = int(np.prod([mean.shape[a] for a in axes]))
    sq = G.sum_(G.square(G.sub(target, mean)), axis=axes)
    return G.sub(G.mul(-0.5, G.mean(sq)), d * HALF_LOG_2PI)


def _reward_ll(model: Rssm, latent: Node, rewards) -> Node:
    rewards = np.asarray(rewards, float)
    lead = latent.shape[:-1]
    if rewards.shape != lead:
        raise ShapeError("reward", f"rewards {rewards.shape} vs latents {lead}")
    mean = G.reshape(mlp_apply(model.reward, latent)["mean"], lead)
    return _unit_ll(mean, rewards, 0)


def _flat_rows(x: Node) -> Node:
    return G.reshape(x, (int(np.prod(x.shape[:-1])), x.shape[-1]))


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def _variational_terms(model: Rssm, rollout: Rollout, obs: Mapping[str, np.ndarray], rewards,
                       free_nats: float, alpha: float, allow_contrastive: bool):
    h, s, post, prior = rollout.stacked()
    latent = G.concat([h, s], axis=-1)
    b, t = h.shape[:2]
    terms, weights, bounds = {}, {}, {}
    for m in model.config.modalities:
        if m.loss == RECONSTRUCTION:
            recon = model.decode_latent(latent, m.id)
            terms[f"{m.id}.ll"] = _unit_ll(recon, obs[m.id], len(m.shape))
            weights[f"{m.id}.ll"] = 1.0
            bounds[f"{m.id}.ll"] = -int(np.prod(m.shape)) * HALF_LOG_2PI
        elif m.loss == CONTRASTIVE_VARIATIONAL and allow_contrastive:
            head = model.score_heads[m.id]
            L = head.logit_matrix(_flat_rows(rollout.embeds[m.id]), _flat_rows(latent))
            terms[f"{m.id}.mi"] = infonce_logits(L)
            weights[f"{m.id}.mi"] = 1.0
            bounds[f"{m.id}.mi"] = math.log(b * t)
        else:
            raise ConfigError(f"modality {m.id!r} with loss {m.loss!r} is not valid for this objective")
    terms["reward.ll"] = _reward_ll(model, latent, rewards)
    weights["reward.ll"], bounds["reward.ll"] = 1.0, -HALF_LOG_2PI
    terms["kl"] = balanced_kl_free_nats(post, prior, alpha, free_nats)
    weights["kl"], bounds["kl"] = -1.0, 0.0
    return terms, weights, bounds


def reconstruction_elbo(model: Rssm, rollout: Rollout, obs, rewards, free_nats: float = 1.0,
                        alpha: float = 0.8) -> LossReport:
    """Per-sensor log-likelihoods + reward log-likelihood - balanced KL."""
    for m in model.config.modalities:
        if m.loss != RECONSTRUCTION:
            raise ConfigError(f"reconstruction_elbo: modality {m.id!r} is contrastive")
    return _assemble(*_variational_terms(model, rollout, obs, rewards, free_nats, alpha, False))


def mixed_variational_loss(model: Rssm, rollout: Rollout, obs, rewards, free_nats: float = 1.0,
                           alpha: float = 0.8) -> LossReport:
    """Each sensor contributes a log-likelihood or an InfoNCE term over all b*l pairs."""
    for m in model.config.modalities:
        if m.loss == CONTRASTIVE_PREDICTIVE:
            raise ConfigError(f"mixed_variational_loss: modality {m.id!r} is predictive; use cpc_loss")
    return _assemble(*_variational_terms(model, rollout, obs, rewards, free_nats, alpha, True))


def inverse_dynamics_loss(z_t, z_next, a_t, predictor) -> Node:
    """Mean over rows of ||a_t - MLP([z_t; z_next])||^2."""
    a_t = G.lift(a_t)
    pred = mlp_apply(predictor, G.concat([G.lift(z_t), G.lift(z_next)], axis=-1))
    pred = pred["action"] if isinstance(pred, dict) else pred
    if pred.shape != a_t.shape:
        raise ShapeError("inverse_dynamics", f"predicted {pred.shape} vs actions {a_t.shape}")
    return G.mean(G.sum_(G.square(G.sub(a_t, pred)), axis=-1))


def cpc_loss(model: Rssm, rollout: Rollout, obs, actions, rewards, beta: float = 0.001,
             free_nats: float = 1.0, alpha: float = 0.8, noise: NoiseSource | None = None) -> LossReport:
    """One-step-ahead prediction terms over (z_t, o_{t+1}) pairs, reward, beta*KL and inverse dynamics."""
    h, s, post, prior = rollout.stacked()
    b, t = h.shape[:2]
    if t < 2:
        raise UsageError("cpc_loss needs sequences of length >= 2")
    actions = np.asarray(actions, float)
    n = b * (t - 1)
    cur = LatentState(
        G.reshape(G.getitem(h, (slice(None), slice(0, t - 1))), (n, h.shape[-1])),
        G.reshape(G.getitem(s, (slice(None), slice(0, t - 1))), (n, s.shape[-1])),
        DiagGaussian(G.reshape(G.getitem(post.mean, (slice(None), slice(0, t - 1))), (n, s.shape[-1])),
                     G.reshape(G.getitem(post.std, (slice(None), slice(0, t - 1))), (n, s.shape[-1]))),
    )
    a_t = actions[:, : t - 1].reshape(n, -1)
    fwd = model.prior_step(cur, a_t, noise)
    fwd_latent = fwd.full()
    terms, weights, bounds = {}, {}, {}
    for m in model.config.modalities:
        nxt = (slice(None), slice(1, t))
        if m.loss == RECONSTRUCTION:
            target = np.asarray(obs[m.id], float)[:, 1:].reshape((n,) + m.shape)
            terms[f"{m.id}.ll"] = _unit_ll(model.decode_latent(fwd_latent, m.id), target, len(m.shape))
            weights[f"{m.id}.ll"] = 1.0
            bounds[f"{m.id}.ll"] = -int(np.prod(m.shape)) * HALF_LOG_2PI
        elif m.loss == CONTRASTIVE_PREDICTIVE:
            e_next = G.reshape(G.getitem(rollout.embeds[m.id], nxt), (n, model.embed_dims[m.id]))
            L = model.score_heads[m.id].logit_matrix(e_next, fwd_latent)
            terms[f"{m.id}.mi"] = infonce_logits(L)
            weights[f"{m.id}.mi"] = 1.0
            bounds[f"{m.id}.mi"] = math.log(n)
        else:
            raise ConfigError(f"cpc_loss: modality {m.id!r} uses the variational contrastive loss")
    latent = G.concat([h, s], axis=-1)
    terms["reward.ll"] = _reward_ll(model, latent, rewards)
    weights["reward.ll"], bounds["reward.ll"] = 1.0, -HALF_LOG_2PI
    terms["kl"] = balanced_kl_free_nats(post, prior, alpha, free_nats)
    weights["kl"], bounds["kl"] = -float(beta), 0.0
    if model.inv_dyn is None:
        raise ConfigError("cpc_loss needs a model with an inverse dynamics predictor")
    feats = G.concat([h, post.mean], axis=-1)
    f_t = _flat_rows(G.getitem(feats, (slice(None), slice(0, t - 1))))
    f_n = _flat_rows(G.getitem(feats, (slice(None), slice(1, t))))
    terms["inv_dyn"] = inverse_dynamics_loss(f_t, f_n, a_t, model.inv_dyn)
    weights["inv_dyn"], bounds["inv_dyn"] = -1.0, 0.0
    return _assemble(terms, weights, bounds)


def representation_objective(model: Rssm, obs, actions, rewards, noise: NoiseSource | None = None,
                             free_nats: float = 1.0, alpha: float = 0.8, beta: float = 0.001):
    """Filter a batch and evaluate the objective implied by the model's modality losses.

    Returns ``(report, rollout)``.
    """
    rollout = model.posterior_rollout(obs, actions, noise=noise)
    kind = model.config.objective
    if kind == "cpc":
        report = cpc_loss(model, rollout, obs, actions, rewards, beta, free_nats, alpha, noise)
    elif kind == "mixed":
        report = mixed_variational_loss(model, rollout, obs, rewards, free_nats, alpha)
    else:
        report = reconstruction_elbo(model, rollout, obs, rewards, free_nats, alpha)
    return report, rollout
