"""Command-line entry point: ``python -m samrl <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .physics import Trajectory

SUBCOMMANDS = ("demo-gen", "train", "eval", "heatmap", "sim2real", "baseline", "ablate", "gradcheck")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="samrl", description="Sensing-aware model-based RL experiments.")
    p.add_argument("command", help=" | ".join(SUBCOMMANDS))
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--mode", help="evaluation mode: " + ", ".join(ex.MODES))
    p.add_argument("--white-box", action="store_true", help="expose proxy ground truth in logs (test-only)")
    return p


def _threads() -> int:
    raw = os.environ.get("SAMRL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SAMRL_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("SAMRL_THREADS must be >= 1")
    return n


def _load_config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.mode:
        if args.mode not in ex.MODES:
            raise UsageError(f"unknown mode {args.mode!r}; expected one of {ex.MODES}")
        cfg = replace(cfg, mode=args.mode)
    return cfg


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _out(cfg) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_demo_gen(cfg, args) -> int:
    out = _out(cfg) / "demos"
    out.mkdir(exist_ok=True)
    demos = ex.make_demos(cfg, args.seed)
    for i, d in enumerate(demos):
        d.to_jsonl(out / f"demo_{i:03d}.jsonl")
    print(f"wrote {len(demos)} demos to {out}; successes {sum(d.success for d in demos)}")
    return 0


def _load_demos(cfg):
    files = sorted((Path(cfg.out_dir) / "demos").glob("demo_*.jsonl"))
    return [Trajectory.from_jsonl(f) for f in files] or None


def cmd_train(cfg, args) -> int:
    ex.train_networks(cfg, args.seed, _out(cfg), _load_demos(cfg), _log)
    (_out(cfg) / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    print(f"checkpoints written to {cfg.out_dir}")
    return 0


def _report(res: ex.EvalResult, name: str, out: Path) -> None:
    ex.write_metrics(res.records, out / name)
    for mode, rate in res.rates.items():
        print(f"{mode}: success {rate:.3f}")
    print(f"paired seeds: {res.paired}")


def cmd_eval(cfg, args) -> int:
    nets = ex.load_networks(cfg.out_dir)
    modes = (cfg.mode,) if args.mode else ex.MODES
    res = ex.eval_success(cfg, nets, modes, _log)
    _report(res, "eval.csv", _out(cfg))
    return 0


def cmd_ablate(cfg, args) -> int:
    nets = ex.load_networks(cfg.out_dir)
    res = ex.ablate(cfg, nets, 0.15, args.seed, _log)
    _report(res, "ablate.csv", _out(cfg))
    return 0


def cmd_heatmap(cfg, args) -> int:
    nets = ex.load_networks(cfg.out_dir)
    mat, yaws, pitches = ex.heatmap(cfg, nets)
    path = _out(cfg) / "q_heatmap.pgm"
    ex.write_heatmap(mat, path, yaws, pitches)
    print(f"wrote {path} (rows = pitch {pitches[0]:.2f}..{pitches[-1]:.2f})")
    return 0


def cmd_sim2real(cfg, args) -> int:
    nets = ex.load_networks(cfg.out_dir)
    res = ex.train_residual_policy(cfg, nets, args.seed)
    out = _out(cfg)
    from .neural import checkpoint_save
    checkpoint_save(res.residual, out / "residual.ckpt")
    checkpoint_save(res.critic, out / "critic.ckpt")
    with open(out / "residual_curve.csv", "w", encoding="utf-8") as fh:
        fh.write("episode,env_steps,success_rate\n")
        for c in res.curve:
            fh.write(f"{c.episode},{c.env_steps},{c.success_rate:.6f}\n")
    print(f"final evaluation success {res.curve[-1].success_rate:.3f}")
    return 0


def cmd_baseline(cfg, args) -> int:
    curve = ex.baseline(cfg, args.seed)
    with open(_out(cfg) / "baseline_curve.csv", "w", encoding="utf-8") as fh:
        fh.write("episode,env_steps,success_rate\n")
        for c in curve:
            fh.write(f"{c.episode},{c.env_steps},{c.success_rate:.6f}\n")
    best = max((c.success_rate for c in curve), default=0.0)
    print(f"baseline: {len(curve)} evaluations, best success {best:.3f}")
    return 0


def cmd_gradcheck(cfg, args) -> int:
    results = ex.gradcheck_suite(10, args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: max rel error {r.max_rel_error:.3g} (tol {r.tol:g})")
    return 0 if all(r.passed for r in results) else 1


HANDLERS = {"demo-gen": cmd_demo_gen, "train": cmd_train, "eval": cmd_eval, "heatmap": cmd_heatmap,
            "sim2real": cmd_sim2real, "baseline": cmd_baseline, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def cmd_dispatch(argv: list[str] | None = None) -> int:
    """Exit code 0 on success, 1 on runtime error, 2 on usage error."""
    parser = _parser()
    try:
        args = parser.parse_args(argv)
        if args.command not in HANDLERS:
            raise UsageError(f"unknown subcommand {args.command!r}")
        _threads()
    except UsageError as exc:
        print(f"usage error: {exc}\n{parser.format_usage()}subcommands: {', '.join(SUBCOMMANDS)}", file=sys.stderr)
        return 2
    try:
        cfg = _load_config(args) if args.command != "gradcheck" or args.config else ex.ExperimentConfig()
        if args.white_box:
            _log("white-box mode: proxy ground truth may be logged")
        np.seterr(all="ignore")
        return HANDLERS[args.command](cfg, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cmd_dispatch())
