"""Command line front end.

Subcommands mirror the pipeline stages: ``collect`` (dataset to .npz),
``train`` (model to .toastnn), ``run`` (one closed-loop episode to CSV),
``compare`` (all configured modes x seeds), ``pipeline`` (everything).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness, nn_dynamics
from .environments import collect_dataset
from .harness import ConfigError, PipelineError, config_hash, load_config


def _add_common(p: argparse.ArgumentParser, *, seed: bool = False, mode: bool = False) -> None:
    p.add_argument("--config", required=True, help="experiment config YAML")
    p.add_argument("--out", default=None, help="output directory (default: config out_dir)")
    p.add_argument("--dry-run", action="store_true", help="validate and describe, do nothing")
    if seed:
        p.add_argument("--seed", type=int, default=None, help="override the seed")
    if mode:
        p.add_argument("--mode", choices=harness.MODES, default=None, help="controller mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="toast",
        description="Smooth sampling-based planning with a simultaneously synthesized LQR tracker.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("collect", help="roll exploration episodes into a dataset"), seed=True)
    _add_common(sub.add_parser("train", help="collect data and fit the dynamics model"))
    _add_common(sub.add_parser("run", help="run one closed-loop episode"), seed=True, mode=True)
    _add_common(sub.add_parser("compare", help="run every configured mode over the seed list"))
    _add_common(sub.add_parser("pipeline", help="train, compare and report in one go"))
    return parser


def _out_dir(cfg: harness.ExperimentConfig, args) -> Path:
    return Path(args.out if args.out is not None else cfg.out_dir)


def _cmd_collect(cfg, args) -> None:
    spec = harness.build_spec(cfg)
    section = cfg.model.collect
    seed = args.seed if args.seed is not None else section.rng_seed
    if args.dry_run:
        print(
            f"would collect {section.episodes} x {section.steps} steps of '{section.policy}' "
            f"exploration on {cfg.env} (seed {seed})"
        )
        return
    data = collect_dataset(
        spec,
        section.policy,
        section.episodes,
        section.steps,
        seed,
        history_len=cfg.model.history_len,
        control_dt=cfg.loop.planner_dt,
    )
    out = harness._ensure_dir(_out_dir(cfg, args))
    path = out / "dataset.npz"
    np.savez(
        path,
        inputs=np.stack([s.input for s in data]),
        targets=np.stack([s.target for s in data]),
        history_len=np.int64(cfg.model.history_len),
        env=np.bytes_(cfg.env.encode()),
    )
    print(f"wrote {len(data)} transitions to {path}")


def _cmd_train(cfg, args) -> None:
    spec = harness.build_spec(cfg)
    if args.dry_run:
        print(
            f"would train a {list(cfg.model.train.hidden_sizes)} tanh model "
            f"(history {cfg.model.history_len}) on {cfg.env} for {cfg.model.train.epochs} epochs"
        )
        return
    model, report = harness.train_model(cfg, spec)
    out = harness._ensure_dir(_out_dir(cfg, args))
    path = out / "model.toastnn"
    nn_dynamics.save(model, path)
    print(
        f"wrote {path} (train loss {report.train_loss[-1]:.6f}, "
        f"val loss {report.val_loss[-1]:.6f}, held-out RMSE {report.final_val_rmse:.4f})"
    )


def _cmd_run(cfg, args) -> None:
    mode = args.mode if args.mode is not None else cfg.mode
    seed = args.seed if args.seed is not None else (cfg.seeds[0] if cfg.seeds else 0)
    if args.dry_run:
        print(f"would run one {cfg.env} episode: mode={mode} seed={seed} config={config_hash(cfg)[:12]}")
        return
    spec = harness.build_spec(cfg)
    out = harness._ensure_dir(_out_dir(cfg, args))
    model, _ = harness.prepare_model(cfg, spec, save_dir=out)
    log, metrics = harness.run_episode(cfg, model, seed, mode)
    mode_dir = harness._ensure_dir(out / mode)
    path = mode_dir / f"episode_{seed}.csv"
    log.to_csv(path)
    print(f"wrote {path}")
    print(
        f"mode={mode} seed={seed} rms_tracking={metrics.rms_tracking_error:.5f} "
        f"task_cost={metrics.task_cost:.5f} chattering={metrics.chattering:.5f} "
        f"recovery={metrics.recovery_time:.3f}s failed={metrics.failed}"
    )


def _cmd_compare(cfg, args) -> None:
    if args.dry_run:
        print(f"would compare modes {list(cfg.modes)} over seeds {list(cfg.seeds)} on {cfg.env}")
        return
    configs = [replace(cfg, mode=m) for m in cfg.modes]
    report = harness.compare(configs, cfg.seeds, _out_dir(cfg, args))
    print(report.metric_table())


def _cmd_pipeline(cfg, args) -> None:
    harness.pipeline(cfg, _out_dir(cfg, args), dry_run=args.dry_run)


_COMMANDS = {
    "collect": _cmd_collect,
    "train": _cmd_train,
    "run": _cmd_run,
    "compare": _cmd_compare,
    "pipeline": _cmd_pipeline,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        _COMMANDS[args.command](cfg, args)
    except (ConfigError, PipelineError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
