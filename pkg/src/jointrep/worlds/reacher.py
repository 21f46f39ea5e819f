"""Two-link planar reacher observed through an image and a proprioceptive vector.

Joint state (angles and velocities) goes into the proprio vector; the target
is only visible in the image.  Images are rendered on a ``pre_crop`` canvas
whose central ``image_size`` window contains the whole workspace, so crops
never cut off the arm.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..diffgraph.serialize import save_arrays
from ..errors import ConfigError

VARIANTS = ("clean", "distractor", "occlusion")
LINKS = (0.5, 0.5)
WORKSPACE = 1.15  # half-width of the world square shown in the central crop

ARM_COLOR = np.array([0.25, 0.85, 0.85])
TARGET_COLOR = np.array([1.0, 0.15, 0.1])


@dataclass(frozen=True)
class WorldConfig:
    variant: str = "clean"
    image_size: int = 32
    pre_crop: int = 40
    episode_length: int = 100  # environment steps
    action_repeat: int = 1
    dt: float = 0.05
    torque: float = 12.0
    damping: float = 2.0
    vel_cap: float = 8.0
    reward_sigma: float = 0.2
    target_radius: float = 0.11
    link_width: float = 0.06
    occluder_radius: float = 0.22  # fraction of the canvas width
    occluder_speed: float = 0.02  # canvas widths per step
    occluder_color: float = 0.5
    n_blobs: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown world variant {self.variant!r}; expected one of {VARIANTS}")
        if self.pre_crop <= self.image_size:
            raise ConfigError(f"pre-crop size {self.pre_crop} must exceed crop size {self.image_size}")
        if self.action_repeat < 1 or self.episode_length < 1:
            raise ConfigError("episode length and action repeat must be positive")
        if self.episode_length % self.action_repeat:
            raise ConfigError("episode length must be a multiple of the action repeat")

    @property
    def agent_steps(self) -> int:
        return self.episode_length // self.action_repeat

    @property
    def proprio_dim(self) -> int:
        return 6

    @property
    def action_dim(self) -> int:
        return 2


@dataclass(frozen=True)
class Occluder:
    pos: np.ndarray  # pixel coordinates (x, y) on the canvas
    vel: np.ndarray  # pixels per step
    radius: float  # pixels
    color: float = 0.5


@dataclass(frozen=True)
class DistractorField:
    """Drifting Gaussian blobs; a pure function of (params, t)."""

    centers: np.ndarray  # (n, 2) in pixels at t = 0
    vels: np.ndarray  # (n, 2) pixels per step
    widths: np.ndarray  # (n,)
    colors: np.ndarray  # (n, 3)

    def at(self, t: int, size: int) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        img = np.zeros((size, size, 3))
        for c, v, w, col in zip(self.centers, self.vels, self.widths, self.colors):
            # drift with wraparound so blobs never leave the frame
            cx, cy = np.mod(c + t * v, size)
            dx = np.minimum(np.abs(xx - cx), size - np.abs(xx - cx))
            dy = np.minimum(np.abs(yy - cy), size - np.abs(yy - cy))
            img += np.exp(-(dx ** 2 + dy ** 2) / (2 * w ** 2))[..., None] * col
        return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class ReacherWorldState:
    theta: np.ndarray
    omega: np.ndarray
    target: np.ndarray
    occluder: Occluder | None
    distractor: DistractorField | None
    t: int = 0
    config: WorldConfig = field(default_factory=WorldConfig)


def wrap_angle(a):
    """Map to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, float), 2 * np.pi)


def fingertip(theta) -> np.ndarray:
    t1, t2 = theta
    elbow = np.array([LINKS[0] * math.cos(t1), LINKS[0] * math.sin(t1)])
    return elbow + np.array([LINKS[1] * math.cos(t1 + t2), LINKS[1] * math.sin(t1 + t2)])


def reward_of(state: ReacherWorldState) -> float:
    d2 = float(np.sum((fingertip(state.theta) - state.target) ** 2))
    return math.exp(-d2 / state.config.reward_sigma ** 2)


def proprio(state: ReacherWorldState) -> np.ndarray:
    th = state.theta
    return np.array([math.cos(th[0]), math.cos(th[1]), math.sin(th[0]), math.sin(th[1]), state.omega[0], state.omega[1]])


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _world_to_pixel_scale(config: WorldConfig) -> float:
    return config.image_size / (2 * WORKSPACE)


def _coords(config: WorldConfig):
    p = config.pre_crop
    scale = _world_to_pixel_scale(config)
    idx = (np.arange(p) + 0.5 - p / 2) / scale
    x = idx[None, :].repeat(p, 0)
    y = -idx[:, None].repeat(p, 1)
    return x, y, scale


def _segment_dist(x, y, a, b):
    ab = b - a
    t = np.clip(((x - a[0]) * ab[0] + (y - a[1]) * ab[1]) / float(ab @ ab), 0.0, 1.0)
    return np.hypot(x - (a[0] + t * ab[0]), y - (a[1] + t * ab[1]))


def _coverage(dist, half_width, scale):
    # linear antialiasing across one pixel
    return np.clip((half_width - dist) * scale + 0.5, 0.0, 1.0)


def render_layers(state: ReacherWorldState):
    """Clean image and foreground coverage (alpha) on the pre-crop canvas."""
    cfg = state.config
    x, y, scale = _coords(cfg)
    t1, t2 = state.theta
    base = np.zeros(2)
    elbow = np.array([LINKS[0] * math.cos(t1), LINKS[0] * math.sin(t1)])
    tip = fingertip(state.theta)
    a_tgt = _coverage(np.hypot(x - state.target[0], y - state.target[1]), cfg.target_radius, scale)
    d_arm = np.minimum(_segment_dist(x, y, base, elbow), _segment_dist(x, y, elbow, tip))
    a_arm = _coverage(d_arm, cfg.link_width, scale)
    img = a_tgt[..., None] * TARGET_COLOR
    img = img * (1.0 - a_arm[..., None]) + a_arm[..., None] * ARM_COLOR
    alpha = 1.0 - (1.0 - a_tgt) * (1.0 - a_arm)
    return img, alpha


def render_clean(state: ReacherWorldState) -> np.ndarray:
    return render_layers(state)[0]


def apply_occlusion(image: np.ndarray, occluder: Occluder) -> np.ndarray:
    """Replace pixels whose centers fall inside the disk by the flat occluder color."""
    h, w = image.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    inside = (xx - occluder.pos[0]) ** 2 + (yy - occluder.pos[1]) ** 2 < occluder.radius ** 2
    out = image.copy()
    out[inside] = occluder.color
    return out


def apply_distractor(image: np.ndarray, field: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Composite the clean render (black background) over a background field."""
    return image + (1.0 - alpha[..., None]) * field


def render_image(state: ReacherWorldState) -> np.ndarray:
    """Full observation for the configured variant, values in [0, 1]."""
    img, alpha = render_layers(state)
    if state.distractor is not None:
        img = apply_distractor(img, state.distractor.at(state.t, state.config.pre_crop), alpha)
    if state.occluder is not None:
        img = apply_occlusion(img, state.occluder)
    return np.clip(img, 0.0, 1.0)


def observe(state: ReacherWorldState) -> dict[str, np.ndarray]:
    return {"image": render_image(state), "proprio": proprio(state)}


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

def _advance_occluder(occ: Occluder, size: int) -> Occluder:
    pos = occ.pos + occ.vel
    vel = occ.vel.copy()
    for i in range(2):
        if pos[i] < 0:
            pos[i], vel[i] = -pos[i], -vel[i]
        elif pos[i] > size:
            pos[i], vel[i] = 2 * size - pos[i], -vel[i]
    return Occluder(pos, vel, occ.radius, occ.color)


def reset(config: WorldConfig, seed: int):
    """Fresh episode: random arm pose, target, occluder and distractor phases."""
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-np.pi, np.pi, 2)
    omega = np.zeros(2)
    r = math.sqrt(rng.uniform(0.15 ** 2, 0.95 ** 2))
    phi = rng.uniform(-np.pi, np.pi)
    target = np.array([r * math.cos(phi), r * math.sin(phi)])
    p = config.pre_crop
    occ_pos = rng.uniform(0, p, 2)
    heading = rng.uniform(-np.pi, np.pi)
    occ_vel = config.occluder_speed * p * np.array([math.cos(heading), math.sin(heading)])
    dist_params = DistractorField(
        centers=rng.uniform(0, p, (config.n_blobs, 2)),
        vels=rng.normal(0, 0.4, (config.n_blobs, 2)),
        widths=rng.uniform(0.08, 0.2, config.n_blobs) * p,
        colors=rng.uniform(0.2, 0.9, (config.n_blobs, 3)),
    )
    state = ReacherWorldState(
        theta=wrap_angle(theta),
        omega=omega,
        target=target,
        occluder=Occluder(occ_pos, occ_vel, config.occluder_radius * p, config.occluder_color) if config.variant == "occlusion" else None,
        distractor=dist_params if config.variant == "distractor" else None,
        t=0,
        config=config,
    )
    return state, observe(state)


def physics_step(state: ReacherWorldState, action) -> ReacherWorldState:
    """One semi-implicit Euler step of the damped, torque-driven joints."""
    cfg = state.config
    a = np.clip(np.asarray(action, float).reshape(2), -1.0, 1.0)
    omega = state.omega + cfg.dt * (cfg.torque * a - cfg.damping * state.omega)
    omega = np.clip(omega, -cfg.vel_cap, cfg.vel_cap)
    theta = wrap_angle(state.theta + cfg.dt * omega)
    occ = _advance_occluder(state.occluder, cfg.pre_crop) if state.occluder is not None else None
    return replace(state, theta=theta, omega=omega, occluder=occ, t=state.t + 1)


def step(state: ReacherWorldState, action):
    """Apply ``action`` for ``action_repeat`` physics steps; rewards are summed."""
    total = 0.0
    for _ in range(state.config.action_repeat):
        state = physics_step(state, action)
        total += reward_of(state)
    return state, observe(state), total


class TwoSensorReacher:
    """Stateful convenience wrapper around :func:`reset` / :func:`step`."""

    def __init__(self, config: WorldConfig | None = None):
        self.config = config or WorldConfig()
        self.state: ReacherWorldState | None = None

    @property
    def obs_shapes(self) -> dict[str, tuple[int, ...]]:
        p = self.config.pre_crop
        return {"image": (p, p, 3), "proprio": (6,)}

    def reset(self, seed: int):
        self.state, obs = reset(self.config, seed)
        return obs

    def step(self, action):
        self.state, obs, r = step(self.state, action)
        done = self.state.t >= self.config.episode_length
        return obs, r, done


def dump_episode(config: WorldConfig, seed: int, actions, out_stem: str | Path) -> Path:
    """Write ``<stem>.csv`` (per-step state, action, reward) and the frames as a flat binary."""
    out_stem = Path(out_stem)
    out_stem.parent.mkdir(parents=True, exist_ok=True)
    state, obs = reset(config, seed)
    frames = [obs["image"]]
    rows = []
    for t, a in enumerate(np.asarray(actions, float)):
        prev = state
        state, obs, r = step(state, a)
        frames.append(obs["image"])
        rows.append([t, *map(repr, prev.theta), *map(repr, prev.omega), *map(repr, prev.target),
                     *map(repr, a), repr(r)])
    with open(out_stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "theta1", "theta2", "omega1", "omega2", "target_x", "target_y", "action1", "action2", "reward"])
        w.writerows(rows)
    save_arrays(out_stem.with_name(out_stem.name + "_frames"), {"frames": np.array(frames)},
                {"seed": seed, "variant": config.variant, "layout": "T+1 x H x W x C"})
    return out_stem.with_suffix(".csv")
