"""Saving and restoring a model, its optimizer and the agent in one file pair."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..diffgraph.serialize import load_arrays, save_arrays
from ..errors import FormatError
from ..optim import Adam
from ..rssm import Rssm, RssmConfig
from .config import TrainConfig, parse_config
from .loops import build_agent, model_optimizer


def save_checkpoint(stem: str | Path, model: Rssm, agent, opt: Adam | None, config: TrainConfig,
                    extra: dict | None = None) -> None:
    arrays = {f"model/{k}": v for k, v in model.store.arrays().items()}
    if opt is not None:
        arrays.update(opt.state_arrays("opt.model"))
    arrays.update({f"agent/{k}": v for k, v in agent.state_arrays().items()})
    meta = {"kind": "jointrep-run", "rssm": model.config.to_dict(), "config": config.to_text(),
            "mode": config.train.mode}
    meta.update(extra or {})
    save_arrays(stem, arrays, meta)


def load_checkpoint(stem: str | Path):
    """Returns ``(model, agent, optimizer, config, meta)``."""
    arrays, meta = load_arrays(stem)
    if meta.get("kind") != "jointrep-run":
        raise FormatError(f"{stem}: not a training checkpoint")
    config = parse_config(meta["config"])
    model = Rssm(RssmConfig.from_dict(meta["rssm"]))
    model.load_params({k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")})
    opt = model_optimizer(config, model)
    if "opt.model.t" in arrays:
        opt.load_state_arrays("opt.model", arrays)
    agent = build_agent(config, model.feature_dim, 0)
    agent.load_state_arrays({k[len("agent/"):]: v for k, v in arrays.items() if k.startswith("agent/")})
    return model, agent, opt, config, meta


def _agent_digest(agent) -> dict[str, bytes]:
    return {k: np.ascontiguousarray(v, dtype="<f8").tobytes() for k, v in agent.state_arrays().items()}


def checkpoint_roundtrip(stem: str | Path, model: Rssm, agent, opt: Adam | None, config: TrainConfig) -> bool:
    """Save, reload and compare every array bit for bit."""
    save_checkpoint(stem, model, agent, opt, config)
    m2, a2, o2, _, _ = load_checkpoint(stem)
    same = m2.store.digest() == model.store.digest() and _agent_digest(a2) == _agent_digest(agent)
    if opt is not None:
        a, b = opt.state_arrays("x"), o2.state_arrays("x")
        same = same and a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    return same
