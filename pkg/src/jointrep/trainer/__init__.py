from .augment import crop_augment, crop_offsets
from .checkpoint import checkpoint_roundtrip, load_checkpoint, save_checkpoint
from .config import LoopConfig, ModelSpec, TrainConfig, load_config, parse_config
from .loops import (
    LatentPolicy,
    RunResult,
    Trainer,
    build_agent,
    build_model,
    collect_episode,
    train_model_based,
    train_model_free,
)
from .replay import Batch, EpisodeRecord, ReplayBuffer, sample_subsequences

__all__ = [
    "Batch", "EpisodeRecord", "LatentPolicy", "LoopConfig", "ModelSpec", "ReplayBuffer", "RunResult",
    "TrainConfig", "Trainer", "build_agent", "build_model", "checkpoint_roundtrip", "collect_episode",
    "crop_augment", "crop_offsets", "load_checkpoint", "load_config", "parse_config", "sample_subsequences",
    "save_checkpoint", "train_model_based", "train_model_free",
]
