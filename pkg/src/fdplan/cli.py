"""Command-line surface: dataset generation, training, rollout, eval, compare."""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import ConfigError, RunConfig
from .data import (
    DatasetGenerationError,
    aggregate_records,
    comparison_csv,
    evaluate_policy,
    generate_dataset,
    load_policy,
    render_svg,
    train,
)
from .diffusion import cosine_beta_schedule
from .policy import run_episode
from .records import read_dataset, write_dataset
from .world import sample_environment


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="fdplan", description="Formation diffusion planner toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run-config overriding defaults")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    g = sub.add_parser("gen-data", help="collect PAC demonstration episodes")
    common(g)
    g.add_argument("--out", required=True, help="output NDJSON dataset path")
    g.add_argument("--episodes", type=int, default=200, help="successful episodes to collect")
    g.add_argument("--jobs", type=int, default=1, help="episode-level worker processes")

    t = sub.add_parser("train", help="train the diffusion policy on a dataset")
    common(t)
    t.add_argument("--data", required=True, help="NDJSON dataset path")
    t.add_argument("--out", required=True, help="checkpoint output path")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--down-dims", default=None, help="comma-separated channel widths, e.g. 64,128,256")
    t.add_argument("--steps", type=int, default=None, help="diffusion step count K")

    r = sub.add_parser("rollout", help="run a single episode")
    common(r)
    r.add_argument("--policy", required=True, choices=("diffusion", "pac", "mppi"))
    r.add_argument("--ckpt", help="checkpoint (required for diffusion)")
    r.add_argument("--adaptive", type=int, default=None, help="candidate plans per replan")
    r.add_argument("--render", help="write an SVG of the episode here")

    e = sub.add_parser("eval", help="evaluate one policy over sampled environments")
    common(e)
    e.add_argument("--policy", required=True, choices=("diffusion", "pac", "mppi"))
    e.add_argument("--ckpt", help="checkpoint (required for diffusion)")
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--adaptive", type=int, default=None)
    e.add_argument("--report", required=True, help="JSON report output path")
    e.add_argument("--jobs", type=int, default=1)

    c = sub.add_parser("compare", help="run all three policies on paired environments")
    common(c)
    c.add_argument("--ckpt", help="checkpoint for the diffusion column")
    c.add_argument("--episodes", type=int, default=20)
    c.add_argument("--adaptive", type=int, default=None)
    c.add_argument("--out", required=True, help="CSV output path")
    c.add_argument("--report", help="optional JSON report path")
    c.add_argument("--jobs", type=int, default=1)
    return parser


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.default()
    return cfg


def _policy_cfg(cfg: RunConfig, adaptive):
    pc = cfg.policy
    if adaptive is not None:
        from dataclasses import replace

        pc = replace(pc, adaptive_candidates=adaptive)
    return pc


def _sample_envs(n: int, seed: int):
    return [sample_environment(np.random.default_rng(seed + 10_000 + i), seed=seed + 10_000 + i) for i in range(n)]


def _episode_worker(payload: dict):
    """Top-level so it pickles for ProcessPoolExecutor."""
    from .world import Environment

    cfg = RunConfig.from_dict(payload["config"])
    env = Environment.from_json_obj(payload["env"])
    model = sched = norm = None
    if payload["policy"] == "diffusion":
        model, norm = load_policy(payload["ckpt"])
        sched = cosine_beta_schedule(cfg.policy.diffusion_steps)
    return run_episode(
        payload["policy"],
        env,
        np.random.default_rng(payload["seed"]),
        seed=payload["seed"],
        model=model,
        sched=sched,
        norm=norm,
        policy_cfg=_policy_cfg(cfg, payload["adaptive"]),
        pac_cfg=cfg.pac,
        mppi_cfg=cfg.mppi,
        gains=cfg.gains,
        max_steps=cfg.t_max,
    )


def _evaluate(policy, envs, seed, cfg: RunConfig, ckpt, adaptive, jobs):
    if jobs > 1:
        payloads = [
            {
                "policy": policy,
                "env": env.to_json_obj(),
                "seed": seed + i,
                "config": cfg.raw,
                "ckpt": ckpt,
                "adaptive": adaptive,
            }
            for i, env in enumerate(envs)
        ]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            recs = list(pool.map(_episode_worker, payloads))
        for i, rec in enumerate(recs):
            print(f"episode {i + 1}/{len(envs)} policy={policy} outcome={rec.outcome}", flush=True)
        return aggregate_records(policy, recs), recs

    model = sched = norm = None
    if policy == "diffusion":
        if not ckpt:
            raise _UsageError("--ckpt is required for the diffusion policy")
        model, norm = load_policy(ckpt)
        sched = cosine_beta_schedule(cfg.policy.diffusion_steps)
    return evaluate_policy(
        policy,
        envs,
        seed=seed,
        model=model,
        sched=sched,
        norm=norm,
        policy_cfg=_policy_cfg(cfg, adaptive),
        pac_cfg=cfg.pac,
        mppi_cfg=cfg.mppi,
        gains=cfg.gains,
        progress=lambda i, n, o: print(f"episode {i}/{n} policy={policy} outcome={o}", flush=True),
    )


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seed("data")
    records = generate_dataset(
        args.episodes,
        seed,
        pac_cfg=cfg.pac,
        gains=cfg.gains,
        progress=lambda k, a: print(f"collected {k}/{args.episodes} (attempts={a})", flush=True),
    )
    write_dataset(records, args.out)
    print(f"wrote {len(records)} episodes to {args.out}", flush=True)
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.batch is not None:
        overrides["batch_size"] = args.batch
    if args.down_dims is not None:
        overrides["down_dims"] = [int(x) for x in args.down_dims.split(",")]
    if args.steps is not None:
        overrides["diffusion_steps"] = args.steps
    if args.seed is not None:
        cfg = RunConfig.from_dict({**cfg.raw, "seeds": {**cfg.raw["seeds"], "train": args.seed}})
    if overrides:
        cfg = RunConfig.from_dict({**cfg.raw, "diffusion": {**cfg.raw["diffusion"], **overrides}})
    records = read_dataset(args.data)
    result = train(
        records,
        cfg.network,
        cfg.policy,
        cfg.train,
        args.out,
        progress=lambda e, n, v: print(f"epoch {e}/{n} val_loss={v:.6f}", flush=True),
    )
    print(f"wrote checkpoint to {result.checkpoint_path} final_loss={result.final_loss:.6f}", flush=True)
    return 0


def _cmd_rollout(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seed("eval")
    env = sample_environment(np.random.default_rng(seed), seed=seed)
    model = sched = norm = None
    if args.policy == "diffusion":
        if not args.ckpt:
            raise _UsageError("--ckpt is required for the diffusion policy")
        model, norm = load_policy(args.ckpt)
        sched = cosine_beta_schedule(cfg.policy.diffusion_steps)
    rec = run_episode(
        args.policy,
        env,
        np.random.default_rng(seed),
        seed=seed,
        model=model,
        sched=sched,
        norm=norm,
        policy_cfg=_policy_cfg(cfg, args.adaptive),
        pac_cfg=cfg.pac,
        mppi_cfg=cfg.mppi,
        gains=cfg.gains,
        max_steps=cfg.t_max,
    )
    print(f"rollout policy={args.policy} seed={seed} outcome={rec.outcome} steps={rec.num_steps}", flush=True)
    if args.render:
        render_svg(rec, env, args.render)
        print(f"wrote {args.render}", flush=True)
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seed("eval")
    envs = _sample_envs(args.episodes, seed)
    report, _ = _evaluate(args.policy, envs, seed, cfg, args.ckpt, args.adaptive, args.jobs)
    with open(args.report, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_obj(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"policy={args.policy} success_rate={report.success_rate:.1f} report={args.report}", flush=True)
    return 0


def _cmd_compare(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seed("eval")
    envs = _sample_envs(args.episodes, seed)
    policies = ["pac", "mppi"] + (["diffusion"] if args.ckpt else [])
    reports = []
    for policy in policies:
        report, _ = _evaluate(policy, envs, seed, cfg, args.ckpt, args.adaptive, args.jobs)
        reports.append(report)
        print(f"policy={policy} success_rate={report.success_rate:.1f}", flush=True)
    csv = comparison_csv(reports)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(csv)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump([r.to_json_obj() for r in reports], fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"wrote {args.out}", flush=True)
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "rollout": _cmd_rollout,
    "eval": _cmd_eval,
    "compare": _cmd_compare,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DatasetGenerationError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
