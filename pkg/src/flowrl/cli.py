"""Command-line entry point: ``flowrl {gen-demos,sft,rl,eval,diag,pipeline}``.

Exit codes: 0 success, 1 invalid configuration or inputs, 2 runtime or
numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config, parse_config
from .diagnostics import run_all
from .envs import DemoSet, EnvError, gen_demos
from .rollout import eval_seed, evaluate

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class InputError(ValueError):
    """Bad user input discovered after the config loaded (files, shapes)."""


def _config(args) -> RunConfig:
    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.config is None:
        return parse_config("", overrides)
    return load_config(args.config, overrides)


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def cmd_gen_demos(cfg: RunConfig, out: Path) -> DemoSet:
    demos = gen_demos(cfg.task_spec(), cfg.demo_count, cfg.chunk_size, seed=cfg.seed, jitter=cfg.demo_jitter)
    try:
        demos.save(out)
    except OSError as exc:
        raise InputError(f"cannot write demos to {out}: {exc}") from None
    print(f"wrote {demos.n_episodes} episodes, {len(demos.obs)} chunks to {out}")
    return demos


def cmd_sft(cfg: RunConfig, demos_path: Path, out: Path, log: Path | None = None):
    try:
        demos = DemoSet.load(demos_path)
    except OSError as exc:
        raise InputError(f"cannot read demos {demos_path}: {exc}") from None
    spec = cfg.task_spec()
    if demos.obs.shape[1] != spec.d_obs or demos.chunks.shape[1:] != (cfg.chunk_size, 3):
        raise InputError(
            f"demo shapes obs {demos.obs.shape[1]}, chunk {demos.chunks.shape[1:]} do not match config "
            f"(obs {spec.d_obs}, chunk ({cfg.chunk_size}, 3))"
        )
    policy = cfg.make_policy().fit(demos.obs, demos.chunks)
    if not np.all(np.isfinite(policy.loss_curve_)):
        raise FloatingPointError("non-finite CFM loss during SFT")
    checkpoint.save(out, policy, extra={"stage": "sft"})
    log = log or out.with_name(out.name + ".sft.jsonl")
    _write_jsonl(log, ({"epoch": i, "cfm_loss": v, "probe_cfm_loss": p}
                       for i, (v, p) in enumerate(zip(policy.loss_curve_, policy.probe_loss_curve_))))
    print(f"sft: {len(policy.loss_curve_)} epochs, final cfm loss {policy.loss_curve_[-1]:.6g}; saved {out}")
    return policy


def cmd_rl(cfg: RunConfig, in_checkpoint: Path, out: Path, log: Path | None = None):
    """Fine-tune; after every update the checkpoint at ``out`` is refreshed,
    so a numerical abort leaves the last good parameters on disk."""
    try:
        policy, critic, _ = checkpoint.load(in_checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot load checkpoint {in_checkpoint}: {exc}") from None
    spec = cfg.task_spec()
    if policy.n_features_in_ != spec.d_obs or policy.chunk_size != cfg.chunk_size:
        raise InputError("checkpoint is incompatible with the configured task or chunk size")
    # The config owns the sampler settings; the checkpoint owns the weights.
    policy.set_params(denoise_steps=cfg.denoise_steps, noise_level=cfg.noise_level,
                      sigma_min=cfg.sigma_min, sigma_max=cfg.sigma_max)
    trainer = cfg.make_trainer()
    if critic is not None and (critic.config != trainer.critic_config or cfg.algorithm != "ppo"):
        critic = None
    log = log or out.with_name(out.name + ".metrics.jsonl")
    timing = log.with_name(log.name + ".timing")
    log_fh, timing_fh = open(log, "w"), open(timing, "w")
    checkpoint.save(out, policy, critic, extra={"stage": "rl", "update": -1})

    def on_update(rec, tr):
        log_fh.write(json.dumps(rec.log_dict(), sort_keys=True) + "\n")
        log_fh.flush()
        timing_fh.write(json.dumps({"update": rec.update, "wall_seconds": rec.wall_seconds}) + "\n")
        timing_fh.flush()
        checkpoint.save(out, tr.policy_, tr.critic_, extra={"stage": "rl", "update": rec.update})

    try:
        trainer.fit(policy, spec, critic=critic, callback=on_update)
    finally:
        log_fh.close()
        timing_fh.close()
    final = trainer.history_[-1].eval_success_rate if trainer.history_ else None
    print(f"rl: {len(trainer.history_)} updates, final eval success {final}; saved {out}, log {log}")
    return trainer


def cmd_eval(cfg: RunConfig, ckpt: Path, episodes: int) -> tuple[float, dict]:
    try:
        policy, _, _ = checkpoint.load(ckpt)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot load checkpoint {ckpt}: {exc}") from None
    spec = cfg.task_spec()
    if policy.n_features_in_ != spec.d_obs:
        raise InputError("checkpoint is incompatible with the configured task")
    rate, per_task = evaluate(policy, spec, episodes, eval_seed(cfg.seed))
    for task, (wins, n) in sorted(per_task.items()):
        print(f"task {task}: {wins}/{n} = {wins / n:.4f}")
    print(f"aggregate: {sum(w for w, _ in per_task.values())}/{episodes} = {rate:.4f}")
    return rate, per_task


def cmd_diag(cfg: RunConfig) -> bool:
    results = run_all(cfg.seed)
    for r in results:
        print(r.line())
    return all(r.passed for r in results)


def cmd_pipeline(cfg: RunConfig, out_dir: Path, episodes: int) -> dict:
    """gen-demos, sft and rl into ``out_dir``, then eval both checkpoints."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(dump_config(cfg))
    cmd_gen_demos(cfg, out_dir / "demos.bin")
    cmd_sft(cfg, out_dir / "demos.bin", out_dir / "sft.ckpt")
    cmd_rl(cfg, out_dir / "sft.ckpt", out_dir / "rl.ckpt", out_dir / "metrics.jsonl")
    sft_rate, _ = cmd_eval(cfg, out_dir / "sft.ckpt", episodes)
    rl_rate, _ = cmd_eval(cfg, out_dir / "rl.ckpt", episodes)
    summary = {"sft_eval_success": sft_rate, "rl_eval_success": rl_rate}
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    return summary


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    parser = argparse.ArgumentParser(prog="flowrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-demos", parents=[common], help="write scripted-expert demonstrations")
    p.add_argument("--out", type=Path, required=True)
    p = sub.add_parser("sft", parents=[common], help="flow-matching SFT on demonstrations")
    p.add_argument("--demos", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output checkpoint")
    p.add_argument("--log", type=Path, help="per-epoch loss log (JSON lines)")
    p = sub.add_parser("rl", parents=[common], help="RL fine-tuning from a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True, help="input checkpoint")
    p.add_argument("--out", type=Path, required=True, help="output checkpoint")
    p.add_argument("--log", type=Path, help="metrics log (JSON lines)")
    p = sub.add_parser("eval", parents=[common], help="deterministic ODE evaluation")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--episodes", type=int, default=200)
    sub.add_parser("diag", parents=[common], help="marginal test, gradient checks, identities")
    p = sub.add_parser("pipeline", parents=[common], help="gen-demos, sft, rl and eval in one go")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--episodes", type=int, default=200)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        if args.command == "gen-demos":
            cmd_gen_demos(cfg, args.out)
        elif args.command == "sft":
            cmd_sft(cfg, args.demos, args.out, args.log)
        elif args.command == "rl":
            cmd_rl(cfg, args.checkpoint, args.out, args.log)
        elif args.command == "eval":
            if args.episodes < 1:
                raise InputError(f"invalid episodes={args.episodes}")
            cmd_eval(cfg, args.checkpoint, args.episodes)
        elif args.command == "diag":
            if not cmd_diag(cfg):
                return EXIT_RUNTIME
        elif args.command == "pipeline":
            print(json.dumps(cmd_pipeline(cfg, args.out, args.episodes), sort_keys=True))
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FloatingPointError, EnvError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
