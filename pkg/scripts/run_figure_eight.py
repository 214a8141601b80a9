#!/usr/bin/env python3
"""Figure-eight driving with a mid-episode grip drop, mode vs mode.

Trains the bicycle dynamics model, then runs the replan-and-hold baseline
and the feedback-tracking mode over the seed list while the road friction
coefficient drops partway through each episode.  Prints the per-seed maximum
lateral path deviation for both modes and the win count.
"""

import argparse
import sys
import time
from pathlib import Path

from toast import harness

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "bicycle.yaml"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(CONFIG), help="bicycle experiment config YAML")
    ap.add_argument("--out", default="out/bicycle", help="output directory")
    args = ap.parse_args(argv)

    cfg = harness.load_config(args.config)
    spec = harness.build_spec(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    model, report = harness.prepare_model(cfg, spec, save_dir=out)
    if report is not None:
        print(f"trained model: held-out RMSE {report.final_val_rmse:.4f} "
              f"({time.perf_counter() - t0:.0f}s)")

    d = cfg.disturbances[0]
    print(f"friction {spec.friction} -> {d.magnitude} during t in [{d.t_start}, {d.t_end}]s\n")
    print(f"{'seed':>4}  {'hold [m]':>9}  {'track [m]':>9}  winner")
    wins = 0
    for seed in cfg.seeds:
        _, zoh = harness.run_episode(cfg, model, seed, "zoh_mppi")
        _, toast = harness.run_episode(cfg, model, seed, "toast")
        win = toast.max_path_deviation < zoh.max_path_deviation
        wins += bool(win)
        print(f"{seed:>4}  {zoh.max_path_deviation:>9.3f}  {toast.max_path_deviation:>9.3f}  "
              f"{'track' if win else 'hold'}")
    print(f"\nfeedback tracking wins max path deviation on {wins}/{len(cfg.seeds)} seeds "
          f"({time.perf_counter() - t0:.0f}s total)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
