"""Command-line interface: pretrain, adapt, eval, fisher, report."""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, default_config, load_config, save_config
from .experiment import (
    ExperimentError,
    Strategy,
    adapt,
    evaluate,
    fisher_analysis,
    pretrain,
)
from .metrics import write_metrics
from .report import write_report


class CliError(Exception):
    pass


@contextmanager
def _run_dir(path: str):
    """Create the run directory and hold an exclusive lock file inside it."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"run directory {out} is locked by another process "
                       f"(remove {lock} if stale)")
    try:
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _load_cfg(path: str | None):
    if path is None:
        return default_config()
    return load_config(path)


def _cmd_pretrain(args) -> int:
    cfg = _load_cfg(args.config)
    with _run_dir(args.out) as out:
        ckpt, rows = pretrain(cfg, args.seed, progress=not args.quiet)
        save_checkpoint(ckpt, out / "checkpoint.npz")
        write_metrics(rows, out / "metrics.csv")
        save_config(cfg, out / "config.yaml")
        print(f"pretrain seed={args.seed} done: {out / 'checkpoint.npz'}")
    return 0


def _cmd_adapt(args) -> int:
    cfg = _load_cfg(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    strategy = Strategy(args.strategy)
    with _run_dir(args.out) as out:
        record = adapt(ckpt, strategy, cfg, args.seed, domain=args.domain,
                       progress=not args.quiet)
        write_metrics(record.rows, out / "metrics.csv")
        final = ckpt.with_agent(record.final_agent, phase=f"adapt:{strategy.value}")
        for k, flat in enumerate(record.snapshots):
            snap_ckpt = final.with_policy_flat(flat.values, f"adapt:{strategy.value}:T{k}")
            save_checkpoint(snap_ckpt, out / f"snapshot_T{k}.npz")
        save_config(cfg, out / "config.yaml")
        print(f"adapt strategy={strategy.value} seed={args.seed} domain={record.domain} "
              f"done: {len(record.snapshots)} snapshots in {out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    targets = cfg.targets()
    if args.targets != "all":
        try:
            tid = int(args.targets)
        except ValueError:
            raise CliError(f"--targets must be 'all' or a target id, got {args.targets!r}")
        if not 0 <= tid < len(targets):
            raise CliError(f"target id {tid} outside 0..{len(targets) - 1}")
        ids = [tid]
    else:
        ids = list(range(len(targets)))
    profile = cfg.profile(args.domain)
    results = evaluate(
        ckpt.policy(), targets, cfg.eval_episodes_per_target, profile, cfg.env,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["target_id,episode_reward,episode_cost,total"]
    for tid in ids:
        ev = results[tid]
        lines.append(f"{tid},{ev.episode_reward:.6f},{ev.episode_cost:.6f},{ev.total:.6f}")
    (out / "eval.csv").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return 0


def _cmd_fisher(args) -> int:
    before = load_checkpoint(args.before)
    after = load_checkpoint(args.after)
    import numpy as np

    after_flat = np.concatenate([after.policy_params, after.log_std])
    rows, rho = fisher_analysis(before, after_flat, layer_filter=args.layer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["param_id,fisher,relative_change"]
    lines.extend(f"{pid},{f:.8e},{rc:.8e}" for pid, f, rc in rows)
    (out / "fisher.csv").write_text("\n".join(lines) + "\n")
    (out / "fisher_summary.txt").write_text(
        f"params={len(rows)}\nspearman={rho:.6f}\n"
    )
    print(f"fisher analysis: {len(rows)} params, spearman={rho:.4f}")
    return 0


def _cmd_report(args) -> int:
    write_report(args.in_dir, args.out, charts=not args.no_charts)
    print(f"report written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safeadapt",
        description="Pretrain, adapt, and evaluate a safe continual domain "
                    "adaptation policy on the 2-DOF reach-and-balance task.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train from scratch in the randomized domain")
    p.add_argument("--config", default=None, help="YAML config (defaults if omitted)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("adapt", help="adapt a pretrained checkpoint to the transfer domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--strategy", required=True, choices=[s.value for s in Strategy])
    p.add_argument("--domain", default=None, help="domain profile name")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("eval", help="deterministic evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--targets", default="all", help="'all' or a target id")
    p.add_argument("--domain", default="realistic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("fisher", help="Fisher importance vs relative parameter change")
    p.add_argument("--before", required=True, help="pretrain checkpoint (with Fisher)")
    p.add_argument("--after", required=True, help="adapted checkpoint")
    p.add_argument("--layer", default=None, help="layer name filter (default: last weights)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fisher)

    p = sub.add_parser("report", help="aggregate metrics across runs")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-charts", action="store_true")
    p.set_defaults(func=_cmd_report)

    return parser


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (CliError, ConfigError, CheckpointError, ExperimentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
