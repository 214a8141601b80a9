#!/usr/bin/env python3
"""Plan smoothness: derivative-space sampling vs direct action sampling.

Runs two receding-horizon planner loops on the real pendulum under matched
settings (same sample count, horizon, cost, and seed): one samples action
derivatives and integrates them, the other perturbs actions directly.  For
each replan the score is the plan's mean per-step action difference; lower
means the planner hands smoother references to the fast tracking loop.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from toast import environments, harness, smppi
from toast.nn_dynamics import HistoryWindow

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "pendulum.yaml"


def plan_smoothness(cfg, model, spec, seed, direct, sim_seconds):
    pcfg = harness.build_planner_config(cfg, spec)
    dt = cfg.loop.planner_dt
    rng = np.random.default_rng(seed)
    x = harness.default_initial_state(cfg, spec)
    hist = HistoryWindow.empty(spec.n_x, spec.n_u, model.history_len)
    substeps = environments.substeps_for(spec, dt)
    if direct:
        incumbent = smppi.DirectPlan.zeros(pcfg.horizon, spec.n_x, spec.n_u, dt)
    else:
        incumbent = smppi.LiftedPlan.zeros(pcfg.horizon, spec.n_x, np.zeros(spec.n_u), dt)
    vals = []
    for _ in range(int(round(sim_seconds / dt))):
        if direct:
            incumbent = smppi.plan_direct(model, x, hist, incumbent, pcfg, rng)
        else:
            incumbent = smppi.plan(model, x, hist, incumbent, pcfg, rng)
        du = np.diff(incumbent.action_seq, axis=0)
        vals.append(float(np.mean(np.linalg.norm(du, axis=1))))
        u = incumbent.action_seq[0]
        hist.push(x, u)
        x = environments.advance(spec, x, u, None, substeps)
        incumbent = (
            smppi.shift_direct(incumbent)
            if direct
            else smppi.shift(incumbent, pcfg.action_low, pcfg.action_high)
        )
    return float(np.mean(vals))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(CONFIG), help="experiment config YAML")
    ap.add_argument("--seeds", type=int, default=10, help="number of seeds")
    ap.add_argument("--seconds", type=float, default=6.0, help="simulated seconds per loop")
    args = ap.parse_args(argv)

    cfg = harness.load_config(args.config)
    spec = harness.build_spec(cfg)
    print(f"training dynamics model for {cfg.env} ...")
    model, _ = harness.train_model(cfg, spec)

    print(f"\n{'seed':>4}  {'derivative':>10}  {'direct':>10}")
    wins = 0
    pairs = []
    for seed in range(args.seeds):
        lifted = plan_smoothness(cfg, model, spec, seed, False, args.seconds)
        direct = plan_smoothness(cfg, model, spec, seed, True, args.seconds)
        pairs.append((lifted, direct))
        wins += bool(lifted < direct)
        print(f"{seed:>4}  {lifted:>10.4f}  {direct:>10.4f}")
    mean = np.mean(pairs, axis=0)
    print(f"\nmean plan action difference: {mean[0]:.4f} (derivative) vs {mean[1]:.4f} (direct); "
          f"derivative sampling smoother on {wins}/{args.seeds} seeds")
    return 0


if __name__ == "__main__":
    sys.exit(main())
