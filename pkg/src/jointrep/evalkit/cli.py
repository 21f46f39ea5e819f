"""Command-line entry point: ``jointrep {train,eval,aggregate,saliency,probe,dump-env}``."""

from __future__ import annotations

import argparse
import csv
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from ..errors import ConfigError, JointRepError
from ..trainer.config import TrainConfig, load_config, parse_config
from .protocol import RandomPolicy, eval_seeds, evaluate_policy
from .stats import iqm, stratified_bootstrap_ci

AGGREGATE_COLUMNS = ["variant", "objective", "step", "iqm", "ci_low", "ci_high"]


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    overrides = getattr(args, "set", None) or []
    if overrides:
        cfg = parse_config("\n".join(overrides), cfg)
    return cfg


def cmd_train(args) -> int:
    from ..trainer.checkpoint import save_checkpoint
    from ..trainer.loops import Trainer

    cfg = _config(args)
    out = Path(args.out)
    log = (lambda m: print(m, file=sys.stderr)) if not args.quiet else None
    tr = Trainer(cfg, args.seed, out, log)
    res = tr.run()
    save_checkpoint(out / "checkpoint", tr.model, tr.agent, tr.opt, cfg, {"seed": tr.seed, "step": tr.env_steps})
    curve = res.eval_curve()
    if curve:
        print(f"final eval mean {curve[-1][1]:.3f} at step {curve[-1][0]}")
    print(f"separation checks {res.separation_checks}, violations {res.separation_violations}")
    return 0


def cmd_eval(args) -> int:
    from ..trainer.loops import EVAL_COLUMNS, LatentPolicy, write_evals

    if args.checkpoint:
        from ..trainer.checkpoint import load_checkpoint

        model, agent, _, cfg, meta = load_checkpoint(args.checkpoint)
        if args.set:
            cfg = parse_config("\n".join(args.set), cfg)
        policy = LatentPolicy(model, agent, cfg.world.image_size, False, np.random.default_rng(args.seed))
        step = int(meta.get("step", 0))
        label = (cfg.model.sensors, cfg.model.objective, cfg.train.mode)
    else:
        cfg = _config(args)
        policy = RandomPolicy(cfg.world.action_dim, args.seed)
        step = 0
        label = ("random", "none", "random")
    returns = evaluate_policy(cfg.world, policy, args.rollouts, eval_seeds(args.rollouts, args.seed))
    rows = [{"task": f"reacher_{cfg.world.variant}", "variant": label[0], "objective": label[1], "mode": label[2],
             "seed": args.seed, "step": step, "rollout": i, "return": r} for i, r in enumerate(returns)]
    if args.out:
        write_evals(Path(args.out), rows)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in EVAL_COLUMNS])
    print(f"mean {np.mean(returns):.3f} iqm {iqm(returns):.3f} over {len(returns)} rollouts", file=sys.stderr)
    return 0


def _eval_files(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.rglob("eval.csv")))
        elif p.exists():
            files.append(p)
        else:
            raise ConfigError(f"no such file or directory: {p}")
    if not files:
        raise ConfigError("no eval CSVs found")
    return files


def aggregate_rows(paths, n_resamples: int = 2000, level: float = 0.95, seed: int = 0) -> list[dict]:
    """IQM and stratified bootstrap interval per (variant, objective, step).

    Each (task, seed) contributes its mean return over rollouts; tasks are
    the strata and seeds are resampled within each task.
    """
    per_run: dict[tuple, list[float]] = defaultdict(list)
    for f in _eval_files(paths):
        with open(f, newline="") as fh:
            for r in csv.DictReader(row for row in fh if not row.startswith("#")):
                key = (r["variant"], r["objective"], int(r["step"]), r["task"], r["mode"], r["seed"])
                per_run[key].append(float(r["return"]))
    groups: dict[tuple, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for (variant, objective, step, task, mode, _seed), vals in sorted(per_run.items()):
        groups[(variant, objective, step)][f"{task}/{mode}"].append(float(np.mean(vals)))
    rows = []
    rng = np.random.default_rng(seed)
    for (variant, objective, step), strata in sorted(groups.items()):
        pooled = [v for vals in strata.values() for v in vals]
        lo, hi = stratified_bootstrap_ci(strata, n_resamples, level, rng)
        rows.append({"variant": variant, "objective": objective, "step": step, "iqm": iqm(pooled),
                     "ci_low": lo, "ci_high": hi})
    return rows


def cmd_aggregate(args) -> int:
    rows = aggregate_rows(args.inputs, args.resamples, args.level, args.seed)
    header = (f"# iqm trims floor(n/4) values from each end; {int(args.level * 100)}% percentile interval "
              f"from {args.resamples} stratified bootstrap resamples, seed {args.seed}\n")
    lines = [",".join(AGGREGATE_COLUMNS)]
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in AGGREGATE_COLUMNS))
    text = header + "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    for r in rows:
        print(f"{r['variant']:>10} {r['objective']:>5} step {r['step']:>7}: "
              f"{r['iqm']:8.3f} [{r['ci_low']:.3f}, {r['ci_high']:.3f}]")
    return 0


def _bundle_at(model, world, seed: int, t: int) -> dict:
    from ..trainer.augment import crop_augment
    from ..worlds.reacher import reset, step

    rng = np.random.default_rng(seed)
    state, obs = reset(world, seed)
    for _ in range(t):
        state, obs, _ = step(state, rng.uniform(-1, 1, world.action_dim))
    out = {}
    for m in model.config.modalities:
        x = obs[m.id]
        if m.kind == "image":
            x = crop_augment(x[None, None], world.image_size, None, "eval")[0, 0]
        out[m.id] = x
    return out


def cmd_saliency(args) -> int:
    from ..trainer.checkpoint import load_checkpoint
    from .saliency import saliency_map

    model, _, _, cfg, _ = load_checkpoint(args.checkpoint)
    bundle = _bundle_at(model, cfg.world, args.seed, args.t)
    sal = saliency_map(model, bundle, method=args.method, n_probes=args.probes, rng=args.seed)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "saliency"])
        for (i, j), v in np.ndenumerate(sal):
            w.writerow([i, j, repr(float(v))])
    print(f"saliency max {sal.max():.4g} mean {sal.mean():.4g}", file=sys.stderr)
    return 0


def cmd_probe(args) -> int:
    from ..trainer.checkpoint import load_checkpoint
    from .probe import collect_probe_data, train_probe_decoder

    model, agent, _, cfg, _ = load_checkpoint(args.checkpoint)
    policy = None if args.random_actions else (lambda f: agent.act(f, np.random.default_rng(0), False))
    z, y = collect_probe_data(model, cfg.world, policy, args.episodes, args.seed)
    res = train_probe_decoder(z, y, steps=args.steps, seed=args.seed)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "mse"])
        for (i, j), v in np.ndenumerate(res.pixel_error):
            w.writerow([i, j, repr(float(v))])
    print(f"probe mse {res.mse:.6f} (first loss {res.losses[0]:.6f}, last {res.losses[-1]:.6f})")
    return 0


def cmd_dump_env(args) -> int:
    from ..worlds.reacher import dump_episode

    cfg = _config(args)
    actions = np.random.default_rng(args.seed).uniform(-1, 1, (args.steps, cfg.world.action_dim))
    path = dump_episode(cfg.world, args.seed, actions, args.out)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointrep", description="Multi-sensor latent world models on toy reachers.")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="config file of 'section.key = value' lines")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config entry")

    t = sub.add_parser("train", help="run one training loop")
    with_config(t)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or a random policy)")
    with_config(e)
    e.add_argument("--checkpoint", help="checkpoint stem; omit for a random policy")
    e.add_argument("--rollouts", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("aggregate", help="IQM and bootstrap intervals over eval CSVs")
    a.add_argument("inputs", nargs="+", help="eval.csv files or run directories")
    a.add_argument("--out")
    a.add_argument("--resamples", type=int, default=2000)
    a.add_argument("--level", type=float, default=0.95)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(fn=cmd_aggregate)

    s = sub.add_parser("saliency", help="pixel saliency of the latent features")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--t", type=int, default=0, help="random-action steps before the frame")
    s.add_argument("--method", choices=("exact", "probe"), default="exact")
    s.add_argument("--probes", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_saliency)

    pr = sub.add_parser("probe", help="train a decoder from frozen latents to clean renders")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--episodes", type=int, default=4)
    pr.add_argument("--steps", type=int, default=500)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--random-actions", action="store_true")
    pr.add_argument("--out", required=True)
    pr.set_defaults(fn=cmd_probe)

    d = sub.add_parser("dump-env", help="write one random-action episode as CSV plus frames")
    with_config(d)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--steps", type=int, default=50)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_dump_env)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "set", None):
        bad = [s for s in args.set if "=" not in s]
        if bad:
            print(f"jointrep: error: --set expects KEY=VALUE, got {bad[0]!r}", file=sys.stderr)
            return 2
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"jointrep: config error: {exc}", file=sys.stderr)
        return 1
    except (JointRepError, OSError, ValueError) as exc:
        print(f"jointrep: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
