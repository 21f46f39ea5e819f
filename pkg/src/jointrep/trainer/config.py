"""Training configuration and its flat ``section.key = value`` file format.

Example::

    # comments start with '#'
    world.variant = occlusion
    model.sensors = joint
    model.objective = cpc
    train.mode = model_free
    train.batch = 16
    sac.hidden = 128, 128, 128

Sections map onto :class:`WorldConfig` (``world``), :class:`ModelSpec`
(``model``), :class:`LoopConfig` (``train``), :class:`SacConfig` (``sac``)
and :class:`ImaginationConfig` (``imag``).
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace

from ..agents.imagination import ImaginationConfig
from ..agents.sac import SacConfig
from ..errors import ConfigError
from ..worlds.reacher import WorldConfig

SENSORS = ("joint", "fc_joint", "img_only")
OBJECTIVES = ("r", "cv", "cpc")
MODES = ("model_free", "model_based")


@dataclass
class ModelSpec:
    """Representation model: which sensors, which loss, and layer widths.

    ``objective`` is the image loss.  In ``joint`` the proprio vector is
    reconstructed, in ``fc_joint`` it shares the image's contrastive loss.
    Full-scale widths are h 200, hidden 400, vector MLPs 400.
    """

    sensors: str = "joint"
    objective: str = "r"
    h_dim: int = 200
    s_dim: int = 30
    hidden: tuple[int, ...] = (400, 400)
    reward_widths: tuple[int, ...] | None = None  # None picks by mode
    vector_widths: tuple[int, ...] = (64, 64, 64)
    image_channels: tuple[int, ...] | None = None  # None keeps the preset
    score_dim: int = 50
    rho_z_widths: tuple[int, ...] = (256, 256)
    inv_dyn_widths: tuple[int, ...] = (128, 128)

    def __post_init__(self):
        if self.sensors not in SENSORS:
            raise ConfigError(f"model.sensors must be one of {SENSORS}, got {self.sensors!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"model.objective must be one of {OBJECTIVES}, got {self.objective!r}")

    @property
    def label(self) -> str:
        name = {"joint": "Joint", "fc_joint": "FC-Joint", "img_only": "Img-Only"}[self.sensors]
        return f"{name}({self.objective.upper() if self.objective != 'r' else 'R'})"


@dataclass
class LoopConfig:
    mode: str = "model_free"
    batch: int | None = None  # None: 32 model-free, 50 model-based
    length: int | None = None
    updates_per_collection: int | None = None  # None: half the agent steps (MF) or 100 (MB)
    seed_episodes: int = 5
    total_env_steps: int = 50_000
    eval_every: int = 2_000
    eval_rollouts: int = 20
    lr: float = 3e-4
    betas: str = "paper"  # or "conventional"
    eps: float = 1e-8
    clip: float = 10.0
    free_nats: float = 1.0
    kl_balance: float = 0.8
    beta: float = 0.001
    seed: int = 0
    stop_return: float | None = None  # end early once the eval mean reaches this
    checkpoint_every: int | None = None
    audit_separation: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}, got {self.mode!r}")
        if self.betas not in ("paper", "conventional"):
            raise ConfigError("train.betas must be 'paper' or 'conventional'")

    @property
    def b(self) -> int:
        return self.batch or (32 if self.mode == "model_free" else 50)

    @property
    def l(self) -> int:
        return self.length or (32 if self.mode == "model_free" else 50)


@dataclass
class TrainConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: LoopConfig = field(default_factory=LoopConfig)
    sac: SacConfig = field(default_factory=SacConfig)
    imag: ImaginationConfig = field(default_factory=ImaginationConfig)

    def __post_init__(self):
        if self.model.objective == "cpc" and self.train.l < 2:
            raise ConfigError("contrastive predictive training needs subsequences of length >= 2")

    def updates_per_collection(self) -> int:
        if self.train.updates_per_collection is not None:
            return self.train.updates_per_collection
        if self.train.mode == "model_free":
            return self.world.agent_steps // 2
        return 100

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def to_text(self) -> str:
        lines = []
        for sec in SECTIONS:
            for f in fields(type(getattr(self, sec))):
                v = getattr(getattr(self, sec), f.name)
                if isinstance(v, tuple):
                    v = ", ".join(str(x) for x in v)
                lines.append(f"{sec}.{f.name} = {'none' if v is None else v}")
        return "\n".join(lines) + "\n"


SECTIONS = {"world": WorldConfig, "model": ModelSpec, "train": LoopConfig, "sac": SacConfig, "imag": ImaginationConfig}


def _coerce(raw: str, annotation, line: int, key: str):
    text = raw.strip()
    ann = annotation
    optional = type(None) in typing.get_args(ann)
    if optional and text.lower() == "none":
        return None
    base = [a for a in typing.get_args(ann) if a is not type(None)] if optional else [ann]
    target = base[0]
    origin = typing.get_origin(target)
    try:
        if origin is tuple:
            return tuple(int(x) for x in text.replace("(", "").replace(")", "").split(",") if x.strip())
        if target is bool:
            if text.lower() in ("true", "yes", "1", "on"):
                return True
            if text.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if target is int:
            return int(text.replace("_", ""))
        if target is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(target, '__name__', target)}", line) from None


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``section.key = value`` lines on top of ``base`` (defaults if omitted)."""
    base = base or TrainConfig()
    values = {sec: {} for sec in SECTIONS}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'section.key = value', got {raw.strip()!r}", n)
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"key {key!r} lacks a section prefix", n)
        sec, name = key.split(".", 1)
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section {sec!r}; expected one of {sorted(SECTIONS)}", n)
        hints = typing.get_type_hints(SECTIONS[sec])
        if name not in hints or name not in {f.name for f in fields(SECTIONS[sec])}:
            raise ConfigError(f"unknown key {key!r}", n)
        values[sec][name] = (_coerce(value, hints[name], n, key), n)
    parts = {}
    for sec in SECTIONS:
        current = getattr(base, sec)
        upd = {k: v for k, (v, _) in values[sec].items()}
        try:
            parts[sec] = replace(current, **upd)
        except ConfigError as exc:
            lines = [ln for _, ln in values[sec].values()]
            raise ConfigError(str(exc), min(lines) if lines else None) from None
    return TrainConfig(**parts)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read(), base)
