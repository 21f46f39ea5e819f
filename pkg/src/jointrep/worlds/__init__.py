"""Toy environments: a two-sensor reacher and linear-Gaussian systems."""

from .linear_gaussian import (
    LinearGaussianSpec,
    kalman_posterior,
    linear_rssm,
    random_spec,
    simulate,
    steady_state_prior,
    with_steady_start,
)
from .reacher import (
    DistractorField,
    Occluder,
    ReacherWorldState,
    TwoSensorReacher,
    WorldConfig,
    apply_distractor,
    apply_occlusion,
    dump_episode,
    render_image,
    reset,
    step,
)

__all__ = [name for name in dir() if not name.startswith("_")]
