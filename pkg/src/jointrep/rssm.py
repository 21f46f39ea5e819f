"""Recurrent state space model with one encoder (and optionally one decoder) per sensor.

Arrays carry leading batch axes.  A single time step uses ``(N, ...)``; a
sequence uses ``(B, T, ...)``.  Observation bundles are plain mappings from
modality id to array.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import dists
from .diffgraph import graph as G
from .diffgraph.graph import Node
from .diffgraph.layers import (
    ConvDecoder,
    ConvEncoder,
    ConvSpec,
    GruParams,
    LayerNorm,
    Linear,
    Mlp,
    MlpSpec,
    ParamStore,
    decoder_layers_for,
    encoder_spec_for,
    gru_cell,
    mlp_apply,
)
from .diffgraph.serialize import load_arrays, save_arrays
from .dists import DiagGaussian
from .errors import ConfigError, FormatError, ShapeError, UsageError

RECONSTRUCTION = "reconstruction"
CONTRASTIVE_VARIATIONAL = "contrastive_variational"
CONTRASTIVE_PREDICTIVE = "contrastive_predictive"
LOSSES = (RECONSTRUCTION, CONTRASTIVE_VARIATIONAL, CONTRASTIVE_PREDICTIVE)

# short names accepted by config files and the CLI
LOSS_ALIASES = {
    "r": RECONSTRUCTION, "recon": RECONSTRUCTION, RECONSTRUCTION: RECONSTRUCTION,
    "cv": CONTRASTIVE_VARIATIONAL, CONTRASTIVE_VARIATIONAL: CONTRASTIVE_VARIATIONAL,
    "cpc": CONTRASTIVE_PREDICTIVE, "cp": CONTRASTIVE_PREDICTIVE, CONTRASTIVE_PREDICTIVE: CONTRASTIVE_PREDICTIVE,
}


@dataclass(frozen=True)
class ImageDecoderSpec:
    seed_grid: tuple[int, int, int]
    layers: tuple[tuple[int, int, int], ...]
    activation: str = "elu"

    @classmethod
    def for_shape(cls, shape) -> "ImageDecoderSpec":
        d = decoder_layers_for(tuple(shape))
        return cls(tuple(d["seed_grid"]), tuple(tuple(l) for l in d["layers"]))


@dataclass(frozen=True)
class ModalityConfig:
    """One sensor: its payload shape, its loss, and its encoder/decoder specs.

    ``encoder`` is a ConvSpec for images and an MlpSpec for vectors.  A
    decoder is required for reconstruction and forbidden for contrastive
    losses, which get a score head instead.
    """

    id: str
    kind: str
    shape: tuple[int, ...]
    loss: str
    encoder: ConvSpec | MlpSpec | None = None
    decoder: ImageDecoderSpec | MlpSpec | None = None

    def __post_init__(self):
        if self.kind not in ("image", "vector"):
            raise ConfigError(f"modality {self.id!r}: kind must be image or vector, got {self.kind!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"modality {self.id!r}: unknown loss {self.loss!r}")
        if self.kind == "image" and len(self.shape) != 3:
            raise ConfigError(f"modality {self.id!r}: image shape must be (H, W, C), got {self.shape}")
        if self.kind == "vector" and len(self.shape) != 1:
            raise ConfigError(f"modality {self.id!r}: vector shape must be (D,), got {self.shape}")
        if self.encoder is None:
            raise ConfigError(f"modality {self.id!r}: encoder spec missing")
        want = ConvSpec if self.kind == "image" else MlpSpec
        if not isinstance(self.encoder, want):
            raise ConfigError(f"modality {self.id!r}: {self.kind} encoder must be a {want.__name__}")
        if self.loss == RECONSTRUCTION and self.decoder is None:
            raise ConfigError(f"modality {self.id!r}: reconstruction needs a decoder spec")
        if self.loss != RECONSTRUCTION and self.decoder is not None:
            raise ConfigError(f"modality {self.id!r}: contrastive losses use a score head, not a decoder")

    @property
    def contrastive(self) -> bool:
        return self.loss != RECONSTRUCTION

    @classmethod
    def image(cls, id: str, shape, loss: str = RECONSTRUCTION, encoder: ConvSpec | None = None,
              decoder: ImageDecoderSpec | None = None) -> "ModalityConfig":
        shape = tuple(int(s) for s in shape)
        loss = LOSS_ALIASES.get(loss, loss)
        encoder = encoder or encoder_spec_for(shape)
        if loss == RECONSTRUCTION and decoder is None:
            decoder = ImageDecoderSpec.for_shape(shape)
        return cls(id, "image", shape, loss, encoder, decoder)

    @classmethod
    def vector(cls, id: str, dim: int, loss: str = RECONSTRUCTION, widths: Sequence[int] = (64, 64, 64),
               activation: str = "elu", decoder_widths: Sequence[int] | None = (64, 64, 64)) -> "ModalityConfig":
        loss = LOSS_ALIASES.get(loss, loss)
        encoder = MlpSpec.make(widths, activation)
        decoder = MlpSpec.make(decoder_widths, activation) if loss == RECONSTRUCTION and decoder_widths else None
        return cls(id, "vector", (int(dim),), loss, encoder, decoder)


@dataclass(frozen=True)
class RssmConfig:
    modalities: tuple[ModalityConfig, ...]
    action_dim: int
    h_dim: int = 200
    s_dim: int = 30
    det_widths: tuple[int, ...] = (400, 400)
    dyn_widths: tuple[int, ...] = (400, 400)
    var_widths: tuple[int, ...] = (400, 400)
    reward_widths: tuple[int, ...] = (128, 128)
    activation: str = "elu"
    score_dim: int = 50
    rho_z_widths: tuple[int, ...] = (256, 256)
    inv_dyn_widths: tuple[int, ...] = (128, 128)
    seed: int = 0

    def __post_init__(self):
        if not self.modalities:
            raise ConfigError("at least one modality is required")
        ids = [m.id for m in self.modalities]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate modality ids {ids}")
        losses = {m.loss for m in self.modalities}
        if CONTRASTIVE_VARIATIONAL in losses and CONTRASTIVE_PREDICTIVE in losses:
            raise ConfigError("contrastive variational and predictive terms cannot be mixed in one model")
        for name in ("h_dim", "s_dim", "action_dim", "score_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def objective(self) -> str:
        """'elbo', 'mixed' or 'cpc', implied by the modality losses."""
        losses = {m.loss for m in self.modalities}
        if CONTRASTIVE_PREDICTIVE in losses:
            return "cpc"
        if CONTRASTIVE_VARIATIONAL in losses:
            return "mixed"
        return "elbo"

    def modality(self, mid: str) -> ModalityConfig:
        for m in self.modalities:
            if m.id == mid:
                return m
        raise ConfigError(f"unknown modality {mid!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RssmConfig":
        d = dict(d)
        mods = []
        for m in d.pop("modalities"):
            enc = m["encoder"]
            if m["kind"] == "image":
                enc = ConvSpec(tuple(tuple(l) for l in enc["layers"]), enc["activation"])
            else:
                enc = _mlp_spec_from(enc)
            dec = m.get("decoder")
            if dec is not None:
                if m["kind"] == "image":
                    dec = ImageDecoderSpec(tuple(dec["seed_grid"]), tuple(tuple(l) for l in dec["layers"]), dec["activation"])
                else:
                    dec = _mlp_spec_from(dec)
            mods.append(ModalityConfig(m["id"], m["kind"], tuple(m["shape"]), m["loss"], enc, dec))
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(modalities=tuple(mods), **d)


def _mlp_spec_from(d: Mapping) -> MlpSpec:
    return MlpSpec(tuple(d["widths"]), d["activation"], tuple(tuple(h) for h in d["heads"]))


@dataclass
class LatentState:
    """Deterministic memory ``h``, stochastic sample ``s`` and the distribution it came from."""

    h: Node
    s: Node
    dist: DiagGaussian

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.h.shape[:-1]

    def full(self) -> Node:
        """[h; s], the input of reward, decoder and score heads."""
        return G.concat([self.h, self.s], axis=-1)

    def detach(self) -> "LatentState":
        return LatentState(G.detach(self.h), G.detach(self.s), self.dist.detach())


def policy_features(state: LatentState, detach: bool = True) -> Node:
    """[h; mean of s].  Detached by default so agents never train the model."""
    f = G.concat([state.h, state.dist.mean], axis=-1)
    return G.detach(f) if detach else f


class NoiseSource:
    """Seeded standard-normal draws for the reparameterization trick."""

    def __init__(self, seed: int | np.random.Generator = 0):
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def normal(self, shape) -> np.ndarray:
        return self.rng.standard_normal(shape)


def _sample(d: DiagGaussian, noise: NoiseSource | None) -> Node:
    # eval mode (no noise source) uses the mean
    if noise is None:
        return d.mean
    return dists.rsample(d, noise.normal(d.mean.shape))


class ScoreHead:
    """Projections rho_o, rho_z and the log temperature of one contrastive sensor."""

    def __init__(self, store: ParamStore, name: str, d_embed: int, d_latent: int, dim: int = 50,
                 rho_z_widths: Sequence[int] = (256, 256), activation: str = "elu"):
        self.dim = dim
        self.rho_o_lin = Linear(store, f"{name}.rho_o", d_embed, dim)
        self.rho_o_norm = LayerNorm(store, f"{name}.rho_o.ln", dim)
        self.rho_z_mlp = Mlp(store, f"{name}.rho_z", d_latent, MlpSpec.make(rho_z_widths, activation, {"out": dim}))
        self.rho_z_norm = LayerNorm(store, f"{name}.rho_z.ln", dim)
        self.log_lambda = store.zeros(f"{name}.log_lambda", ())

    def rho_o(self, embedding) -> Node:
        return self.rho_o_norm(self.rho_o_lin(embedding))

    def rho_z(self, latent) -> Node:
        return self.rho_z_norm(self.rho_z_mlp(latent)["out"])

    def inv_lambda(self) -> Node:
        return G.exp(G.neg(self.log_lambda))

    def pair_logits(self, embedding, latent) -> Node:
        """Row-wise log score: (1/lambda) rho_o(e_i) . rho_z(z_i)."""
        dot = G.sum_(G.mul(self.rho_o(embedding), self.rho_z(latent)), axis=-1)
        return G.mul(dot, self.inv_lambda())

    def logit_matrix(self, embedding, latent) -> Node:
        """L[i, j] = log f(z_i, o_j) for flat batches of I latents and I embeddings."""
        po, pz = self.rho_o(embedding), self.rho_z(latent)
        return G.mul(G.matmul(pz, G.transpose(po)), self.inv_lambda())


@dataclass
class Rollout:
    """Output of a filtering pass over ``(B, T)`` sequences."""

    states: list[LatentState]
    priors: list[DiagGaussian]
    embeds: dict[str, Node] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.states)

    def stacked(self):
        """h, s, posterior and prior stacked along axis 1 as (B, T, .) nodes."""
        h = G.stack([st.h for st in self.states], axis=1)
        s = G.stack([st.s for st in self.states], axis=1)
        post = DiagGaussian(G.stack([st.dist.mean for st in self.states], axis=1),
                            G.stack([st.dist.std for st in self.states], axis=1))
        prior = DiagGaussian(G.stack([p.mean for p in self.priors], axis=1),
                             G.stack([p.std for p in self.priors], axis=1))
        return h, s, post, prior


@dataclass
class Imagined:
    states: list[LatentState]  # H + 1 entries, the first is the start state
    actions: list[Node]
    rewards: list[Node]  # predicted reward means of states 1..H, each (N,)


class Rssm:
    def __init__(self, config: RssmConfig, store: ParamStore | None = None):
        self.config = config
        self.store = store if store is not None else ParamStore(config.seed)
        st, c = self.store, config
        act = c.activation
        self.encoders: dict[str, object] = {}
        self.embed_dims: dict[str, int] = {}
        for m in c.modalities:
            if m.kind == "image":
                enc = ConvEncoder(st, f"enc.{m.id}", m.shape, m.encoder)
                self.embed_dims[m.id] = enc.d_out
            else:
                enc = Mlp(st, f"enc.{m.id}", m.shape[0], m.encoder)
                self.embed_dims[m.id] = enc.d_out
            self.encoders[m.id] = enc
        self.embed_dim = sum(self.embed_dims.values())
        self.det = Mlp(st, "det", c.s_dim + c.action_dim, MlpSpec.make(c.det_widths, act))
        self.gru = GruParams(st, "gru", self.det.d_out, c.h_dim)
        heads = {"mean": c.s_dim, "std": c.s_dim}
        self.dyn = Mlp(st, "dyn", c.h_dim, MlpSpec.make(c.dyn_widths, act, heads))
        self.var = Mlp(st, "var", c.h_dim + self.embed_dim, MlpSpec.make(c.var_widths, act, heads))
        self.reward = Mlp(st, "reward", c.h_dim + c.s_dim, MlpSpec.make(c.reward_widths, act, {"mean": 1}))
        self.decoders: dict[str, object] = {}
        self.score_heads: dict[str, ScoreHead] = {}
        latent = c.h_dim + c.s_dim
        for m in c.modalities:
            if m.loss == RECONSTRUCTION:
                if m.kind == "image":
                    d = m.decoder
                    self.decoders[m.id] = ConvDecoder(st, f"dec.{m.id}", latent, m.shape, d.seed_grid, d.layers, d.activation)
                else:
                    spec = MlpSpec(m.decoder.widths, m.decoder.activation, (("mean", m.shape[0]),))
                    self.decoders[m.id] = Mlp(st, f"dec.{m.id}", latent, spec)
            else:
                self.score_heads[m.id] = ScoreHead(st, f"score.{m.id}", self.embed_dims[m.id], latent,
                                                   c.score_dim, c.rho_z_widths, act)
        self.inv_dyn = None
        if c.objective == "cpc":
            self.inv_dyn = Mlp(st, "inv_dyn", 2 * latent, MlpSpec.make(c.inv_dyn_widths, act, {"action": c.action_dim}))

    # -- sizes ------------------------------------------------------------------
    @property
    def feature_dim(self) -> int:
        return self.config.h_dim + self.config.s_dim

    @property
    def modality_ids(self) -> list[str]:
        return [m.id for m in self.config.modalities]

    # -- encoders -------------------------------------------------------------------
    def encode_parts(self, bundle: Mapping[str, np.ndarray]) -> dict[str, Node]:
        """Per-modality embeddings; leading batch axes are preserved."""
        out = {}
        lead_ref = None
        for m in self.config.modalities:
            if m.id not in bundle:
                raise ConfigError(f"observation bundle lacks modality {m.id!r}")
            x = G.lift(bundle[m.id])
            k = len(m.shape)
            if tuple(x.shape[x.ndim - k:]) != m.shape:
                raise ShapeError("encode", f"modality {m.id!r} expects trailing shape {m.shape}, got {x.shape}")
            lead = x.shape[: x.ndim - k]
            if lead_ref is None:
                lead_ref = lead
            elif lead != lead_ref:
                raise ShapeError("encode", f"modality {m.id!r} has batch shape {lead}, expected {lead_ref}")
            n = int(np.prod(lead)) if lead else 1
            flat = G.reshape(x, (n,) + m.shape)
            e = self.encoders[m.id](flat)
            out[m.id] = G.reshape(e, lead + (self.embed_dims[m.id],))
        extra = set(bundle) - set(self.modality_ids)
        if extra:
            raise ConfigError(f"observation bundle has undeclared modalities {sorted(extra)}")
        return out

    def encode(self, bundle: Mapping[str, np.ndarray]) -> Node:
        """Concatenate per-modality embeddings in declared order."""
        parts = self.encode_parts(bundle)
        return G.concat([parts[mid] for mid in self.modality_ids], axis=-1)

    # -- transitions ----------------------------------------------------------------
    def initial_state(self, batch: int) -> LatentState:
        c = self.config
        zeros_s = np.zeros((batch, c.s_dim))
        return LatentState(G.constant(np.zeros((batch, c.h_dim))), G.constant(zeros_s),
                           DiagGaussian(G.constant(zeros_s), G.constant(np.ones((batch, c.s_dim)))))

    def det_step(self, prev: LatentState, action) -> Node:
        action = G.lift(action)
        if action.shape[-1] != self.config.action_dim:
            raise ShapeError("det_step", f"action width {action.shape[-1]} != {self.config.action_dim}")
        x = mlp_apply(self.det, G.concat([prev.s, action], axis=-1))
        return gru_cell(x, prev.h, self.gru)

    def prior_dist(self, h) -> DiagGaussian:
        out = mlp_apply(self.dyn, h)
        return DiagGaussian(out["mean"], dists.std_from_raw(out["std"]))

    def posterior_dist(self, h, embedding) -> DiagGaussian:
        out = mlp_apply(self.var, G.concat([G.lift(h), G.lift(embedding)], axis=-1))
        return DiagGaussian(out["mean"], dists.std_from_raw(out["std"]))

    def posterior_rollout(self, obs: Mapping[str, np.ndarray], actions, init: LatentState | None = None,
                          noise: NoiseSource | None = None) -> Rollout:
        """Filter ``(B, T)`` observation sequences.

        ``actions[:, t]`` is the action taken after observing step t, so step
        t consumes ``actions[:, t-1]`` and the first step a zero action.
        ``noise=None`` runs in eval mode and uses posterior means.
        """
        actions = np.asarray(actions, dtype=float) if not isinstance(actions, Node) else actions
        parts = self.encode_parts(obs)
        first = parts[self.modality_ids[0]]
        if first.ndim != 3:
            raise ShapeError("posterior_rollout", f"observations need (B, T, ...) axes, got embedding {first.shape}")
        b, t_len = first.shape[:2]
        if actions.shape[:2] != (b, t_len):
            raise UsageError(f"posterior_rollout: {t_len} observation steps but actions have shape {actions.shape}")
        joint = G.concat([parts[mid] for mid in self.modality_ids], axis=-1)
        state = init if init is not None else self.initial_state(b)
        zero_action = np.zeros((b, self.config.action_dim))
        states, priors = [], []
        for t in range(t_len):
            a_prev = zero_action if t == 0 else G.getitem(G.lift(actions), (slice(None), t - 1))
            h = self.det_step(state, a_prev)
            prior = self.prior_dist(h)
            post = self.posterior_dist(h, G.getitem(joint, (slice(None), t)))
            state = LatentState(h, _sample(post, noise), post)
            states.append(state)
            priors.append(prior)
        return Rollout(states, priors, parts)

    def filter_step(self, prev: LatentState, action, bundle: Mapping[str, np.ndarray],
                    noise: NoiseSource | None = None) -> LatentState:
        """One online belief update from ``prev`` after ``action`` and new observations."""
        h = self.det_step(prev, action)
        post = self.posterior_dist(h, self.encode(bundle))
        return LatentState(h, _sample(post, noise), post)

    def prior_step(self, prev: LatentState, action, noise: NoiseSource | None = None) -> LatentState:
        h = self.det_step(prev, action)
        prior = self.prior_dist(h)
        return LatentState(h, _sample(prior, noise), prior)

    def imagine(self, start: LatentState, policy: Callable[[Node], Node], horizon: int = 15,
                noise: NoiseSource | None = None) -> Imagined:
        """Roll the prior forward under ``policy``; never touches observations."""
        if horizon < 1:
            raise UsageError(f"imagination horizon must be >= 1, got {horizon}")
        states, actions, rewards = [start], [], []
        state = start
        for _ in range(horizon):
            a = policy(policy_features(state, detach=False))
            state = self.prior_step(state, a, noise)
            states.append(state)
            actions.append(a)
            rewards.append(self.predict_reward(state).mean.reshape(state.batch_shape))
        return Imagined(states, actions, rewards)

    # -- heads ----------------------------------------------------------------------
    def predict_reward(self, state: LatentState) -> DiagGaussian:
        mean = mlp_apply(self.reward, state.full())["mean"]
        return DiagGaussian(mean, G.constant(np.ones(mean.shape)))

    def decode_modality(self, state: LatentState, mid: str) -> Node:
        return self.decode_latent(state.full(), mid)

    def decode_latent(self, latent, mid: str) -> Node:
        m = self.config.modality(mid)
        if m.loss != RECONSTRUCTION:
            raise ConfigError(f"modality {mid!r} is trained contrastively and has no decoder")
        latent = G.lift(latent)
        lead = latent.shape[:-1]
        n = int(np.prod(lead)) if lead else 1
        flat = G.reshape(latent, (n, latent.shape[-1]))
        dec = self.decoders[mid]
        out = dec(flat) if m.kind == "image" else mlp_apply(dec, flat)["mean"]
        return G.reshape(out, lead + m.shape)

    # -- persistence ----------------------------------------------------------------
    def manifest(self) -> dict:
        return {"kind": "rssm", "config": self.config.to_dict()}

    def save(self, stem: str | Path) -> None:
        save_arrays(stem, self.store.arrays(), self.manifest())

    @classmethod
    def load(cls, stem: str | Path) -> "Rssm":
        arrays, meta = load_arrays(stem)
        if meta.get("kind") != "rssm":
            raise FormatError(f"{stem}: not an RSSM checkpoint")
        model = cls(RssmConfig.from_dict(meta["config"]))
        model.load_params(arrays)
        return model

    def load_params(self, arrays: Mapping[str, np.ndarray]) -> None:
        expected = {k: v.shape for k, v in self.store.arrays().items()}
        missing = [k for k in expected if k not in arrays]
        if missing:
            raise FormatError(f"checkpoint lacks parameters {missing[:5]}")
        for k, shape in expected.items():
            if tuple(arrays[k].shape) != shape:
                raise FormatError(f"parameter {k!r}: checkpoint shape {tuple(arrays[k].shape)}, model expects {shape}")
        self.store.load_arrays(arrays)
