import re

import numpy as np
import pytest

from jointrep.rssm import ModalityConfig, Rssm, RssmConfig


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run the long training criteria")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training criteria (enable with --run-slow)")


def pytest_collection_modifyitems(config, items):
    config._criteria = {}
    config._criteria_collected = any(item.module.__name__.endswith("test_acceptance") for item in items)
    config._criteria_slow = {int(m) for item in items if "slow" in item.keywords
                             for m in re.findall(r"criterion_(\d+)_", item.name)}
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, passed, detail)``."""

    def record(n: int, passed: bool, detail: str) -> bool:
        request.config._criteria[n] = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    if not getattr(config, "_criteria_collected", False):
        return
    terminalreporter.section("acceptance criteria")
    gated = config._criteria_slow if not config.getoption("--run-slow") else set()
    for n in range(1, 11):
        reason = "needs --run-slow" if n in gated else "not selected in this session"
        line = config._criteria.get(n, f"criterion {n:2d}: SKIP  {reason}")
        terminalreporter.write_line(line)


def small_model(loss="reconstruction", proprio_loss="reconstruction", image=(8, 8, 3), seed=0, action_dim=2,
                h_dim=6, s_dim=3, proprio_dim=3, **kw) -> Rssm:
    mods = []
    if image is not None:
        mods.append(ModalityConfig.image("image", image, loss))
    if proprio_loss is not None:
        mods.append(ModalityConfig.vector("proprio", proprio_dim, proprio_loss, widths=(8,), decoder_widths=(8,)))
    widths = dict(det_widths=(8,), dyn_widths=(8,), var_widths=(8,), reward_widths=(8,), score_dim=4,
                  rho_z_widths=(8,), inv_dyn_widths=(8,))
    widths.update(kw)
    return Rssm(RssmConfig(tuple(mods), action_dim, h_dim=h_dim, s_dim=s_dim, seed=seed, **widths))


def random_batch(model: Rssm, b=2, t=3, seed=0):
    rng = np.random.default_rng(seed)
    obs = {m.id: rng.uniform(0, 1, (b, t) + m.shape) for m in model.config.modalities}
    actions = rng.uniform(-1, 1, (b, t, model.config.action_dim))
    rewards = rng.uniform(0, 1, (b, t))
    return obs, actions, rewards


def objective_check(model: Rssm, obs, actions, rewards, noise_seed=3, free_nats=0.0, alpha=0.8, beta=0.001):
    """(loss_fn, numeric_fn) for gradient-checking a representation objective.

    The balanced KL routes gradient through stop-gradients, so the numeric
    side differences a surrogate in which the stopped distribution is pinned
    to its value at the probe point.
    """
    from jointrep.dists import DiagGaussian, kl_diag
    from jointrep.objectives import representation_objective
    from jointrep.rssm import NoiseSource

    def run():
        return representation_objective(model, obs, actions, rewards, NoiseSource(noise_seed), free_nats, alpha, beta)

    _, roll0 = run()
    _, _, q0, p0 = roll0.stacked()
    q0, p0 = q0.detach(), p0.detach()

    def loss_fn():
        return run()[0].loss

    def numeric_fn():
        rep, roll = run()
        _, _, q, p = roll.stacked()
        lhs = float(np.mean(kl_diag(q0, p).value))
        rhs = float(np.mean(kl_diag(q, p0).value))
        sur = alpha * max(lhs - free_nats, 0.0) + (1 - alpha) * max(rhs - free_nats, 0.0)
        w = rep.weights["kl"]
        total = float(rep.total.value) - w * float(rep.terms["kl"].value) + w * sur
        return -total

    return loss_fn, numeric_fn


TINY_CONFIG = """
world.image_size = 8
world.pre_crop = 10
world.episode_length = 20
world.action_repeat = 2
model.h_dim = 8
model.s_dim = 4
model.hidden = 16
model.vector_widths = 8
model.reward_widths = 16
model.score_dim = 8
model.rho_z_widths = 16
model.inv_dyn_widths = 16
train.batch = 4
train.length = 4
train.seed_episodes = 2
train.total_env_steps = 120
train.eval_every = 60
train.eval_rollouts = 2
sac.hidden = 16, 16
imag.hidden = 16, 16
imag.horizon = 3
"""


def tiny_config(*overrides: str):
    """A training config small enough to run a few episodes in about a second."""
    from jointrep.trainer.config import parse_config

    return parse_config(TINY_CONFIG + "\n".join(overrides))
