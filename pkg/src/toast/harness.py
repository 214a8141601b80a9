"""Experiment harness: configs, the two-rate control loop, metrics, reports.

The loop runs a slow planning rate and a fast actuation rate.  Every
``n_fast`` fast steps the planner replans from the measured state (warm
started from the shifted previous plan) and, in ``toast`` mode, a fresh gain
schedule is synthesized from the same model's Jacobians and swapped in
atomically.  Controller modes:

* ``toast``     -- interpolated feedforward plus time-varying LQR feedback.
* ``zoh_mppi``  -- the slow plan's head action held across fast steps, no
                   feedback.  The honest achievable-rate baseline.
* ``mppi_only`` -- the planner applied at its own slow rate; actuation is
                   identical to ``zoh_mppi`` by construction, kept as a
                   separate label for reporting.

Disturbances are evaluated at fast-step resolution and held over integration
substeps.  All CSV outputs are a pure function of (config, seeds); planner
wall time is reported in summary.txt only.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from numpy.typing import NDArray

from . import nn_dynamics, smppi, tvlqr
from .environments import (
    Disturbance,
    EnvSpec,
    EpisodeLog,
    FigureEightTask,
    additive_disturbance,
    advance,
    collect_dataset,
    disturbance_active,
    make_spec,
    polyline_distance,
    shifted_spec,
    substeps_for,
    wrap_state_diff,
)
from .nn_dynamics import DynamicsModel, HistoryWindow, TrainConfig, flatten_augmented
from .smppi import DirectPlan, LiftedPlan, MppiConfig, PlannerDivergence
from .tvlqr import GainSchedule, TrackingCost, interpolate_gain, wrap_deviation

Array = NDArray[np.float64]

MODES = ("mppi_only", "zoh_mppi", "toast")
PLANNER_KINDS = ("smppi", "direct")


class ConfigError(ValueError):
    """A config document violates the schema."""


class PipelineError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


# --------------------------------------------------------------------------
# configuration tree


@dataclass(frozen=True)
class TaskSection:
    episode_seconds: float = 10.0
    initial_state: tuple[float, ...] | None = None
    init_jitter: tuple[float, ...] | None = None
    goal: tuple[float, ...] | None = None
    state_cost: tuple[float, ...] | None = None
    terminal_cost: tuple[float, ...] | None = None
    # figure-eight driving task (bicycle env only)
    path_half_length: float = 36.0
    path_half_width: float = 9.0
    target_speed: float = 8.0
    path_points: int = 800
    lateral_weight: float = 1.0
    speed_weight: float = 0.15
    side_slip_weight: float = 0.0
    terminal_scale: float = 1.0


@dataclass(frozen=True)
class PlannerSection:
    kind: str = "smppi"
    samples: int = 384
    horizon: int = 30
    temperature: float = 1.0
    noise_stddev: tuple[float, ...] = (10.0,)
    action_reg: float = 0.0
    derivative_reg: float = 0.0
    vanilla_noise_stddev: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in PLANNER_KINDS:
            raise ConfigError(f"planner.kind '{self.kind}' not in {PLANNER_KINDS}")


@dataclass(frozen=True)
class CollectSection:
    policy: str = "uniform"
    episodes: int = 50
    steps: int = 200
    rng_seed: int = 7


@dataclass(frozen=True)
class ModelSection:
    path: str | None = None
    history_len: int = 1
    train: TrainConfig = TrainConfig()
    collect: CollectSection = CollectSection()


@dataclass(frozen=True)
class TrackingSection:
    q: tuple[float, ...] = ()
    r: tuple[float, ...] = ()
    q_final: tuple[float, ...] = ()
    augmented: bool = True


@dataclass(frozen=True)
class LoopSection:
    fast_dt: float = 0.01
    n_fast: int = 5
    compute_delay: bool = False

    def __post_init__(self) -> None:
        if self.fast_dt <= 0 or self.n_fast < 1:
            raise ConfigError(f"need fast_dt > 0 and n_fast >= 1, got {self.fast_dt}, {self.n_fast}")

    @property
    def planner_dt(self) -> float:
        return self.fast_dt * self.n_fast


@dataclass(frozen=True)
class MetricsSection:
    recovery_band: float = 0.3


@dataclass(frozen=True)
class ExperimentConfig:
    env: str
    task: TaskSection = TaskSection()
    planner: PlannerSection = PlannerSection()
    model: ModelSection = ModelSection()
    tracking: TrackingSection = TrackingSection()
    loop: LoopSection = LoopSection()
    metrics: MetricsSection = MetricsSection()
    env_overrides: tuple[tuple[str, float], ...] = ()
    disturbances: tuple[Disturbance, ...] = ()
    mode: str = "toast"
    modes: tuple[str, ...] = ("zoh_mppi", "toast")
    seeds: tuple[int, ...] = tuple(range(10))
    out_dir: str = "out"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode '{self.mode}' not in {MODES}")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"modes entry '{m}' not in {MODES}")


_SECTION_TYPES = {
    "task": TaskSection,
    "planner": PlannerSection,
    "collect": CollectSection,
    "train": TrainConfig,
    "model": ModelSection,
    "tracking": TrackingSection,
    "loop": LoopSection,
    "metrics": MetricsSection,
}


def _coerce(value):
    if isinstance(value, list):
        return tuple(_coerce(v) for v in value)
    return value


def _build_section(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"'{path}' must be a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} under '{path}'")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        raw = data[f.name]
        if f.name in _SECTION_TYPES and isinstance(raw, dict):
            kwargs[f.name] = _build_section(_SECTION_TYPES[f.name], raw, f"{path}.{f.name}")
        else:
            kwargs[f.name] = _coerce(raw)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section '{path}': {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config document must be a mapping, got {type(data).__name__}")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    if "env" not in data:
        raise ConfigError("missing required key 'env'")
    kwargs: dict = {"env": data["env"]}
    for name, cls in (
        ("task", TaskSection),
        ("planner", PlannerSection),
        ("model", ModelSection),
        ("tracking", TrackingSection),
        ("loop", LoopSection),
        ("metrics", MetricsSection),
    ):
        if name in data:
            kwargs[name] = _build_section(cls, data[name], name)
    if "env_overrides" in data:
        ov = data["env_overrides"] or {}
        if not isinstance(ov, dict):
            raise ConfigError("'env_overrides' must be a mapping")
        kwargs["env_overrides"] = tuple(sorted((str(k), float(v)) for k, v in ov.items()))
    if "disturbances" in data:
        ds = data["disturbances"] or []
        if not isinstance(ds, list):
            raise ConfigError("'disturbances' must be a list of mappings")
        built = []
        for i, d in enumerate(ds):
            if not isinstance(d, dict):
                raise ConfigError(f"disturbances[{i}] must be a mapping")
            try:
                built.append(Disturbance(**d))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid disturbances[{i}]: {exc}") from exc
        kwargs["disturbances"] = tuple(built)
    for name in ("mode", "out_dir"):
        if name in data:
            kwargs[name] = str(data[name])
    if "modes" in data:
        kwargs["modes"] = tuple(str(m) for m in data["modes"])
    if "seeds" in data:
        kwargs["seeds"] = tuple(int(s) for s in data["seeds"])
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data if data is not None else {})


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def clean(obj):
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        return obj

    out = clean(dataclasses.asdict(cfg))
    out["env_overrides"] = {k: v for k, v in cfg.env_overrides}
    return out


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def write_effective_config(cfg: ExperimentConfig, path: Path) -> str:
    digest = config_hash(cfg)
    doc = config_to_dict(cfg)
    doc["config_sha256"] = digest
    path.write_text(yaml.safe_dump(doc, sort_keys=True))
    return digest


# --------------------------------------------------------------------------
# task costs


@dataclass(frozen=True)
class QuadraticGoalCost:
    """Diagonal quadratic distance to a goal state, angle-aware."""

    weights: Array
    terminal_weights: Array
    goal: Array
    angle_idx: tuple[int, ...]

    def stage(self, states: Array, t: int) -> Array:
        d = wrap_state_diff(states, self.goal, self.angle_idx)
        return (d * d) @ self.weights

    def terminal(self, states: Array) -> Array:
        d = wrap_state_diff(states, self.goal, self.angle_idx)
        return (d * d) @ self.terminal_weights


@dataclass(frozen=True)
class PathTrackingCost:
    """Squared distance to the reference path plus speed and slip terms."""

    task: FigureEightTask
    lateral_weight: float
    speed_weight: float
    side_slip_weight: float
    terminal_scale: float

    def stage(self, states: Array, t: int) -> Array:
        d = polyline_distance(states[:, :2], self.task.waypoints)
        cost = self.lateral_weight * d * d
        cost = cost + self.speed_weight * (states[:, 3] - self.task.target_speed) ** 2
        if self.side_slip_weight > 0:
            cost = cost + self.side_slip_weight * states[:, 4] ** 2
        return cost

    def terminal(self, states: Array) -> Array:
        return self.terminal_scale * self.stage(states, -1)


def build_spec(cfg: ExperimentConfig) -> EnvSpec:
    return make_spec(cfg.env, dict(cfg.env_overrides))


def build_task_cost(cfg: ExperimentConfig, spec: EnvSpec):
    if cfg.env == "bicycle":
        task = FigureEightTask(
            half_length=cfg.task.path_half_length,
            half_width=cfg.task.path_half_width,
            target_speed=cfg.task.target_speed,
            n_points=cfg.task.path_points,
        )
        return PathTrackingCost(
            task=task,
            lateral_weight=cfg.task.lateral_weight,
            speed_weight=cfg.task.speed_weight,
            side_slip_weight=cfg.task.side_slip_weight,
            terminal_scale=cfg.task.terminal_scale,
        )
    if cfg.task.state_cost is None or cfg.task.terminal_cost is None:
        raise ConfigError(f"env '{cfg.env}' needs task.state_cost and task.terminal_cost")
    goal = np.asarray(cfg.task.goal if cfg.task.goal is not None else np.zeros(spec.n_x), dtype=np.float64)
    w = np.asarray(cfg.task.state_cost, dtype=np.float64)
    wf = np.asarray(cfg.task.terminal_cost, dtype=np.float64)
    if w.shape != (spec.n_x,) or wf.shape != (spec.n_x,) or goal.shape != (spec.n_x,):
        raise ConfigError(
            f"task cost/goal lengths {w.shape}/{wf.shape}/{goal.shape} must be ({spec.n_x},)"
        )
    return QuadraticGoalCost(weights=w, terminal_weights=wf, goal=goal, angle_idx=spec.angle_idx)


def build_planner_config(cfg: ExperimentConfig, spec: EnvSpec) -> MppiConfig:
    cost = build_task_cost(cfg, spec)
    stddev = np.asarray(cfg.planner.noise_stddev, dtype=np.float64)
    if stddev.shape != (spec.n_u,):
        raise ConfigError(f"planner.noise_stddev length {stddev.shape} must be ({spec.n_u},)")
    return MppiConfig(
        samples=cfg.planner.samples,
        horizon=cfg.planner.horizon,
        temperature=cfg.planner.temperature,
        noise_stddev=stddev,
        dt=cfg.loop.planner_dt,
        action_low=spec.action_low,
        action_high=spec.action_high,
        stage_cost=cost.stage,
        terminal_cost=cost.terminal,
        action_reg_weight=cfg.planner.action_reg,
        derivative_reg_weight=cfg.planner.derivative_reg,
        vanilla_noise_stddev=(
            None
            if cfg.planner.vanilla_noise_stddev is None
            else np.asarray(cfg.planner.vanilla_noise_stddev, dtype=np.float64)
        ),
    )


def build_tracking_cost(cfg: ExperimentConfig, spec: EnvSpec) -> TrackingCost:
    if not (cfg.tracking.q and cfg.tracking.r and cfg.tracking.q_final):
        raise ConfigError("tracking.q, tracking.r and tracking.q_final are required")
    q = np.asarray(cfg.tracking.q, dtype=np.float64)
    r = np.asarray(cfg.tracking.r, dtype=np.float64)
    qf = np.asarray(cfg.tracking.q_final, dtype=np.float64)
    if q.shape != (spec.n_x,) or qf.shape != (spec.n_x,) or r.shape != (spec.n_u,):
        raise ConfigError(
            f"tracking diag lengths {q.shape}/{r.shape}/{qf.shape} must be "
            f"({spec.n_x},)/({spec.n_u},)/({spec.n_x},)"
        )
    return TrackingCost.from_diagonals(q, r, qf)


def default_initial_state(cfg: ExperimentConfig, spec: EnvSpec) -> Array:
    if cfg.task.initial_state is not None:
        x0 = np.asarray(cfg.task.initial_state, dtype=np.float64)
        if x0.shape != (spec.n_x,):
            raise ConfigError(f"task.initial_state length {x0.shape} must be ({spec.n_x},)")
        return x0
    if cfg.env == "pendulum":
        return np.array([np.pi, 0.0])  # hanging; swing-up target is the origin
    if cfg.env == "cartpole":
        return np.zeros(4)
    task = FigureEightTask(
        half_length=cfg.task.path_half_length,
        half_width=cfg.task.path_half_width,
        target_speed=cfg.task.target_speed,
        n_points=cfg.task.path_points,
    )
    return task.start_state()


# --------------------------------------------------------------------------
# model preparation


def train_model(cfg: ExperimentConfig, spec: EnvSpec) -> tuple[DynamicsModel, nn_dynamics.TrainReport]:
    dataset = collect_dataset(
        spec,
        cfg.model.collect.policy,
        cfg.model.collect.episodes,
        cfg.model.collect.steps,
        cfg.model.collect.rng_seed,
        history_len=cfg.model.history_len,
        control_dt=cfg.loop.planner_dt,
    )
    return nn_dynamics.train(
        dataset,
        cfg.model.train,
        n_x=spec.n_x,
        n_u=spec.n_u,
        history_len=cfg.model.history_len,
        angle_idx=spec.angle_idx,
    )


def prepare_model(
    cfg: ExperimentConfig, spec: EnvSpec, save_dir: Path | None = None
) -> tuple[DynamicsModel, nn_dynamics.TrainReport | None]:
    """Load the configured model file if given, else collect data and train."""
    if cfg.model.path is not None:
        return nn_dynamics.load(cfg.model.path), None
    model, report = train_model(cfg, spec)
    if save_dir is not None:
        nn_dynamics.save(model, save_dir / "model.toastnn")
    return model, report


# --------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    env: str
    mode: str
    seed: int
    rms_tracking_error: float
    task_cost: float
    chattering: float
    recovery_time: float
    planner_time_mean: float
    failed: bool
    n_steps: int
    max_path_deviation: float | None = None

    CSV_FIELDS = (
        "env",
        "mode",
        "seed",
        "rms_tracking_error",
        "task_cost",
        "chattering",
        "recovery_time",
        "failed",
        "n_steps",
    )

    def csv_row(self, include_path_deviation: bool) -> str:
        vals = [
            self.env,
            self.mode,
            str(self.seed),
            repr(self.rms_tracking_error),
            repr(self.task_cost),
            repr(self.chattering),
            repr(self.recovery_time),
            str(int(self.failed)),
            str(self.n_steps),
        ]
        if include_path_deviation:
            vals.append(repr(self.max_path_deviation if self.max_path_deviation is not None else 0.0))
        return ",".join(vals)


def compute_metrics(
    log: EpisodeLog,
    cfg: ExperimentConfig,
    spec: EnvSpec,
    failed: bool,
    plan_times: list[float],
    task_cost_fn,
) -> MetricsReport:
    arr = log.arrays()
    dev = wrap_state_diff(arr["state"], arr["nominal"], spec.angle_idx)
    rms = float(np.sqrt(np.mean(np.sum(dev * dev, axis=1)))) if len(log) else 0.0
    task_cost = float(np.mean(arr["cost"])) if len(log) else 0.0
    du = np.diff(arr["action"], axis=0)
    chattering = float(np.mean(np.linalg.norm(du, axis=1))) if len(du) else 0.0
    recovery = 0.0
    if cfg.disturbances and len(log):
        onset = min(d.t_start for d in cfg.disturbances)
        norms = np.linalg.norm(dev, axis=1)
        after = arr["t"] >= onset
        out_of_band = after & (norms > cfg.metrics.recovery_band)
        if out_of_band.any():
            last = np.flatnonzero(out_of_band)[-1]
            recovery = float(arr["t"][last] + cfg.loop.fast_dt - onset)
    max_dev = None
    if cfg.env == "bicycle" and len(log):
        max_dev = float(polyline_distance(arr["state"][:, :2], task_cost_fn.task.waypoints).max())
    return MetricsReport(
        env=cfg.env,
        mode=log.mode,
        seed=log.seed,
        rms_tracking_error=rms,
        task_cost=task_cost,
        chattering=chattering,
        recovery_time=recovery,
        planner_time_mean=float(np.mean(plan_times)) if plan_times else 0.0,
        failed=failed,
        n_steps=len(log),
        max_path_deviation=max_dev,
    )


# --------------------------------------------------------------------------
# the two-rate episode loop


def _interp_plan_state(plan, offset: float, angle_idx: tuple[int, ...]) -> Array:
    """Linear interpolation of the plan's nominal state at a knot offset."""
    horizon, dt = plan.nominal_states.shape[0] - 1, plan.dt
    s = offset / dt
    t = min(int(np.floor(s + 1e-9)), horizon - 1)
    tau = min(max(s - t, 0.0), 1.0)
    if tau == 0.0:
        return plan.nominal_states[t].copy()
    dx = wrap_state_diff(plan.nominal_states[t + 1], plan.nominal_states[t], angle_idx)
    return plan.nominal_states[t] + tau * dx


def run_episode(
    cfg: ExperimentConfig,
    model: DynamicsModel,
    seed: int,
    mode: str | None = None,
) -> tuple[EpisodeLog, MetricsReport]:
    """Run one closed-loop episode and score it.

    Deterministic for fixed (config, model, seed).  The per-seed generator
    first draws the initial-state jitter, then feeds planner sampling, so
    runs that differ only in controller mode share the planning noise stream
    until their trajectories diverge.
    """
    mode = mode or cfg.mode
    if mode not in MODES:
        raise ConfigError(f"mode '{mode}' not in {MODES}")
    spec = build_spec(cfg)
    if model.n_x != spec.n_x or model.n_u != spec.n_u:
        raise ConfigError(
            f"model dims ({model.n_x}, {model.n_u}) do not match env ({spec.n_x}, {spec.n_u})"
        )
    loop = cfg.loop
    substeps = substeps_for(spec, loop.fast_dt)
    n_steps = int(round(cfg.task.episode_seconds / loop.fast_dt))
    planner_cfg = build_planner_config(cfg, spec)
    task_cost = build_task_cost(cfg, spec)
    tracking_cost = build_tracking_cost(cfg, spec) if mode == "toast" else None

    rng = np.random.default_rng(seed)
    x = default_initial_state(cfg, spec)
    if cfg.task.init_jitter is not None:
        jitter = np.asarray(cfg.task.init_jitter, dtype=np.float64)
        if jitter.shape != (spec.n_x,):
            raise ConfigError(f"task.init_jitter length {jitter.shape} must be ({spec.n_x},)")
        x = x + jitter * rng.uniform(-1.0, 1.0, size=spec.n_x)

    hist = HistoryWindow.empty(spec.n_x, spec.n_u, model.history_len)
    direct = cfg.planner.kind == "direct"
    if direct:
        incumbent: DirectPlan | LiftedPlan = DirectPlan.zeros(
            planner_cfg.horizon, spec.n_x, spec.n_u, planner_cfg.dt
        )
    else:
        incumbent = LiftedPlan.zeros(planner_cfg.horizon, spec.n_x, np.zeros(spec.n_u), planner_cfg.dt)

    log = EpisodeLog(spec, seed, config_hash(cfg)[:12], mode)
    plan_times: list[float] = []
    cur_plan = None
    cur_sched: GainSchedule | None = None
    cur_knot = 0
    pending: tuple | None = None
    prev_knot_state: Array | None = None
    knot_first_action: Array | None = None
    plan_count = 0
    failed = False

    for k in range(n_steps):
        t_now = k * loop.fast_dt
        if pending is not None and k == pending[0]:
            _, cur_plan, cur_sched, cur_knot = pending
            pending = None
        if k % loop.n_fast == 0:
            if k > 0 and prev_knot_state is not None and knot_first_action is not None:
                hist.push(prev_knot_state, knot_first_action)
            prev_knot_state = x.copy()
            knot_first_action = None
            tic = time.perf_counter()
            try:
                if direct:
                    new_plan = smppi.plan_direct(model, x, hist, incumbent, planner_cfg, rng)
                    incumbent = smppi.shift_direct(new_plan)
                else:
                    new_plan = smppi.plan(model, x, hist, incumbent, planner_cfg, rng)
                    incumbent = smppi.shift(new_plan, planner_cfg.action_low, planner_cfg.action_high)
            except PlannerDivergence:
                failed = True
                break
            plan_times.append(time.perf_counter() - tic)
            new_sched = None
            if mode == "toast":
                assert tracking_cost is not None
                lin = tvlqr.linearize_along(model, new_plan, hist, augmented=cfg.tracking.augmented)
                new_sched = tvlqr.riccati_backward(
                    lin, tracking_cost, spec.action_low, spec.action_high
                )
                new_sched.valid_from_step = k
            plan_count += 1
            if loop.compute_delay and cur_plan is not None:
                pending = (k + 1, new_plan, new_sched, k)
            else:
                cur_plan, cur_sched, cur_knot = new_plan, new_sched, k

        assert cur_plan is not None
        offset = (k - cur_knot) * loop.fast_dt
        x_nom = _interp_plan_state(cur_plan, offset, spec.angle_idx)
        if mode == "toast":
            assert cur_sched is not None
            gain, z_nom, u_nom = interpolate_gain(cur_sched, offset)
            z_meas = (
                flatten_augmented(x, hist) if cfg.tracking.augmented else x
            )
            deviation = wrap_deviation(cur_sched, z_meas - z_nom)
            u_ff = u_nom
            u_fb = -gain @ deviation
        else:
            knot_idx = min(int(np.floor(offset / cur_plan.dt + 1e-9)), cur_plan.horizon - 1)
            u_ff = cur_plan.action_seq[knot_idx].copy()
            u_fb = np.zeros(spec.n_u)
        u_pre = u_ff + u_fb
        u_app = np.clip(u_pre, spec.action_low, spec.action_high)
        clamped = bool(np.any(np.abs(u_app - u_pre) > 0))
        if knot_first_action is None:
            knot_first_action = u_app.copy()

        dist_vec = additive_disturbance(cfg.disturbances, t_now, spec.n_u)
        spec_now = shifted_spec(spec, cfg.disturbances, t_now)
        param_on = spec_now is not spec
        inst_cost = float(np.asarray(task_cost.stage(x[None, :], k))[0])
        log.append(
            t=t_now,
            state=x,
            nominal=x_nom,
            action=u_app,
            feedforward=u_ff,
            feedback=u_fb,
            disturbance=float(dist_vec.sum()),
            param_shift_active=param_on,
            cost=inst_cost,
            clamped=clamped,
            plan_index=plan_count - 1,
        )
        try:
            x = advance(spec_now, x, u_app, dist_vec, substeps)
        except ValueError:
            failed = True
            break
        if not np.isfinite(x).all():
            failed = True
            break

    return log, compute_metrics(log, cfg, spec, failed, plan_times, task_cost)


# --------------------------------------------------------------------------
# comparison across controller modes


@dataclass
class CompareReport:
    rows: list[MetricsReport]
    aggregates: dict
    winloss: dict
    config_digest: str

    def metric_table(self) -> str:
        lines = []
        metrics = ["rms_tracking_error", "task_cost", "chattering", "recovery_time"]
        if any(r.max_path_deviation is not None for r in self.rows):
            metrics.append("max_path_deviation")
        header = f"{'metric':<22}" + "".join(f"{m:>26}" for m in self.aggregates)
        lines.append(header)
        for metric in metrics:
            cells = []
            for mode, agg in self.aggregates.items():
                mean, std, n = agg[metric]
                cells.append(f"{mean:>14.5g} +/- {std:<8.3g}")
            lines.append(f"{metric:<22}" + "".join(f"{c:>26}" for c in cells))
        return "\n".join(lines)


_AGG_METRICS = (
    "rms_tracking_error",
    "task_cost",
    "chattering",
    "recovery_time",
    "planner_time_mean",
    "max_path_deviation",
)


def _aggregate(rows: list[MetricsReport]) -> dict:
    by_mode: dict[str, list[MetricsReport]] = {}
    for r in rows:
        by_mode.setdefault(r.mode, []).append(r)
    out: dict[str, dict] = {}
    for mode, rs in by_mode.items():
        agg = {}
        for m in _AGG_METRICS:
            vals = [getattr(r, m) for r in rs if getattr(r, m) is not None]
            if vals:
                agg[m] = (float(np.mean(vals)), float(np.std(vals)), len(vals))
            else:
                agg[m] = (0.0, 0.0, 0)
        out[mode] = agg
    return out


def _winloss(rows: list[MetricsReport]) -> dict:
    """Per-seed strict win counts for every mode pair; smaller is better."""
    by_mode: dict[str, dict[int, MetricsReport]] = {}
    for r in rows:
        by_mode.setdefault(r.mode, {})[r.seed] = r
    modes = list(by_mode)
    out: dict = {}
    for i, a in enumerate(modes):
        for b in modes[i + 1 :]:
            shared = sorted(set(by_mode[a]) & set(by_mode[b]))
            pair: dict[str, tuple[int, int]] = {}
            for m in ("rms_tracking_error", "task_cost", "chattering", "max_path_deviation"):
                wa = wb = 0
                for s in shared:
                    va, vb = getattr(by_mode[a][s], m), getattr(by_mode[b][s], m)
                    if va is None or vb is None:
                        continue
                    if va < vb:
                        wa += 1
                    elif vb < va:
                        wb += 1
                pair[m] = (wa, wb)
            out[(a, b)] = pair
    return out


def compare(
    configs: Sequence[ExperimentConfig],
    seeds: Sequence[int],
    out_dir: str | Path,
    model: DynamicsModel | None = None,
) -> CompareReport:
    """Run every (config, seed) episode and tabulate mode-vs-mode results.

    The configs must differ only in controller mode so the comparison is
    apples to apples; everything shares one model instance.
    """
    if not configs:
        raise ValueError("need at least one config")
    base = replace(configs[0], mode=configs[0].modes[0])
    for c in configs[1:]:
        if replace(c, mode=base.mode) != base:
            raise ValueError("compare() configs must differ only in 'mode'")
    out = _ensure_dir(Path(out_dir))
    spec = build_spec(configs[0])
    if model is None:
        model, _ = prepare_model(configs[0], spec, save_dir=out)
    rows: list[MetricsReport] = []
    for c in configs:
        mode_dir = _ensure_dir(out / c.mode)
        for seed in seeds:
            log, metrics = run_episode(c, model, int(seed), c.mode)
            log.to_csv(mode_dir / f"episode_{seed}.csv")
            rows.append(metrics)
    digest = write_effective_config(base, out / "effective_config.yaml")
    _write_metrics_csv(rows, out / "metrics.csv", include_path_deviation=configs[0].env == "bicycle")
    report = CompareReport(rows=rows, aggregates=_aggregate(rows), winloss=_winloss(rows), config_digest=digest)
    (out / "summary.txt").write_text(_summary_text(report, configs[0], seeds))
    return report


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PipelineError(f"cannot create output directory '{path}': {exc}") from exc
    if not path.is_dir():
        raise PipelineError(f"output path '{path}' exists and is not a directory")
    return path


def _write_metrics_csv(rows: list[MetricsReport], path: Path, include_path_deviation: bool) -> None:
    header = list(MetricsReport.CSV_FIELDS)
    if include_path_deviation:
        header.append("max_path_deviation")
    lines = [",".join(header)]
    lines += [r.csv_row(include_path_deviation) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def _summary_text(report: CompareReport, cfg: ExperimentConfig, seeds: Sequence[int]) -> str:
    lines = [
        f"env={cfg.env} seeds={list(seeds)} config_sha256={report.config_digest}",
        "",
        report.metric_table(),
        "",
    ]
    for (a, b), pair in report.winloss.items():
        for metric, (wa, wb) in pair.items():
            if pair[metric] == (0, 0) and metric == "max_path_deviation":
                continue
            lines.append(f"wins[{metric}]: {a} {wa} - {wb} {b}")
    lines.append("")
    for mode, agg in report.aggregates.items():
        mean_ms = 1e3 * agg["planner_time_mean"][0]
        lines.append(f"planner wall time per update ({mode}): {mean_ms:.2f} ms (informational)")
    failed = [r for r in report.rows if r.failed]
    if failed:
        lines.append(f"failed episodes: {[(r.mode, r.seed) for r in failed]}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# pipeline


def pipeline(cfg: ExperimentConfig, out_dir: str | Path | None = None, dry_run: bool = False) -> list[Path]:
    """collect -> train -> compare -> reports, failing loudly per stage."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    stages = [
        ("model", f"{'load ' + cfg.model.path if cfg.model.path else 'collect data and train'}"),
        ("compare", f"episodes for modes {list(cfg.modes)} x seeds {list(cfg.seeds)}"),
        ("reports", f"metrics.csv, summary.txt, effective_config.yaml under {out}"),
    ]
    if dry_run:
        print(f"pipeline dry run for env={cfg.env} (config {config_hash(cfg)[:12]})")
        for name, what in stages:
            print(f"  stage {name}: {what}")
        return []
    _ensure_dir(out)
    try:
        spec = build_spec(cfg)
        model, report = prepare_model(cfg, spec, save_dir=out)
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(f"stage 'model' failed: {exc}") from exc
    if report is not None:
        print(f"trained model: held-out normalized RMSE {report.final_val_rmse:.4f}")
    try:
        configs = [replace(cfg, mode=m) for m in cfg.modes]
        compare(configs, cfg.seeds, out, model=model)
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(f"stage 'compare' failed: {exc}") from exc
    written = sorted(p for p in out.rglob("*") if p.is_file())
    print(f"pipeline wrote {len(written)} files under {out}")
    return written
