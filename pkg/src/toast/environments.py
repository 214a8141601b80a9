"""Benchmark systems, disturbances, dataset collection and episode logging.

All systems integrate with classic RK4 at the spec's own ``dt``; a control
step may span several integration substeps.  Angle coordinates are wrapped to
(-pi, pi] after every step.

Conventions:

* pendulum: theta = 0 is upright, so gravity is destabilizing there and the
  swing-up target sits at the origin.  ``ml^2 theta'' = mgl sin(theta)
  - b theta' + tau``.  Total energy ``E = 1/2 ml^2 theta'^2 + mgl cos(theta)``
  is conserved with zero damping and torque.
* cartpole: state [p, theta, p', theta'], theta = 0 upright, force on the
  cart.
* bicycle: planar dynamic single-track model with linear tire forces clipped
  at the friction-dependent axle limit.  State
  [x, y, yaw, vx, vy, yaw_rate, steer]; inputs [steer rate, longitudinal
  acceleration].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .nn_dynamics import HistoryWindow, TransitionSample, assemble_input

Array = NDArray[np.float64]


def wrap_angle(x: Array | float) -> Array | float:
    """Wrap to (-pi, pi]."""
    out = -((-np.asarray(x) + np.pi) % (2.0 * np.pi) - np.pi)
    return out


def wrap_state(state: Array, angle_idx: tuple[int, ...]) -> Array:
    if not angle_idx:
        return state
    out = np.array(state, dtype=np.float64, copy=True)
    idx = list(angle_idx)
    out[..., idx] = wrap_angle(out[..., idx])
    return out


def wrap_state_diff(a: Array, b: Array, angle_idx: tuple[int, ...]) -> Array:
    """Componentwise a - b with angle coordinates wrapped to (-pi, pi]."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return wrap_state(diff, angle_idx)


# --------------------------------------------------------------------------
# system specifications


@dataclass(frozen=True)
class PendulumSpec:
    mass: float = 1.0
    length: float = 1.0
    gravity: float = 9.81
    damping: float = 0.1
    torque_limit: float = 2.5
    dt: float = 0.01

    n_x = 2
    n_u = 1
    angle_idx: tuple[int, ...] = (0,)
    state_names: tuple[str, ...] = ("theta", "theta_dot")
    state_units: tuple[str, ...] = ("rad", "rad/s")
    action_units: tuple[str, ...] = ("N*m",)

    @property
    def action_low(self) -> Array:
        return np.array([-self.torque_limit])

    @property
    def action_high(self) -> Array:
        return np.array([self.torque_limit])

    def deriv(self, state: Array, action: Array) -> Array:
        theta, omega = state
        ml2 = self.mass * self.length**2
        alpha = (
            self.mass * self.gravity * self.length * math.sin(theta)
            - self.damping * omega
            + action[0]
        ) / ml2
        return np.array([omega, alpha])

    def energy(self, state: Array) -> float:
        theta, omega = state
        ml2 = self.mass * self.length**2
        return 0.5 * ml2 * omega**2 + self.mass * self.gravity * self.length * math.cos(theta)


@dataclass(frozen=True)
class CartpoleSpec:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_length: float = 0.5  # pivot to pole center of mass
    gravity: float = 9.81
    cart_damping: float = 0.0
    force_limit: float = 10.0
    dt: float = 0.01

    n_x = 4
    n_u = 1
    angle_idx: tuple[int, ...] = (1,)
    state_names: tuple[str, ...] = ("pos", "theta", "pos_dot", "theta_dot")
    state_units: tuple[str, ...] = ("m", "rad", "m/s", "rad/s")
    action_units: tuple[str, ...] = ("N",)

    @property
    def action_low(self) -> Array:
        return np.array([-self.force_limit])

    @property
    def action_high(self) -> Array:
        return np.array([self.force_limit])

    def deriv(self, state: Array, action: Array) -> Array:
        _, theta, pdot, thdot = state
        force = action[0] - self.cart_damping * pdot
        sin_t, cos_t = math.sin(theta), math.cos(theta)
        total = self.cart_mass + self.pole_mass
        ml = self.pole_mass * self.pole_length
        temp = (force + ml * thdot**2 * sin_t) / total
        th_acc = (self.gravity * sin_t - cos_t * temp) / (
            self.pole_length * (4.0 / 3.0 - self.pole_mass * cos_t**2 / total)
        )
        p_acc = temp - ml * th_acc * cos_t / total
        return np.array([pdot, thdot, p_acc, th_acc])


@dataclass(frozen=True)
class BicycleSpec:
    mass: float = 1500.0
    yaw_inertia: float = 2500.0
    lf: float = 1.2
    lr: float = 1.4
    cornering_front: float = 80000.0
    cornering_rear: float = 80000.0
    friction: float = 1.0
    gravity: float = 9.81
    steer_limit: float = 0.5
    steer_rate_limit: float = 0.8
    accel_min: float = -6.0
    accel_max: float = 4.0
    min_speed_for_slip: float = 0.5
    dt: float = 0.01

    n_x = 7
    n_u = 2
    angle_idx: tuple[int, ...] = (2,)
    state_names: tuple[str, ...] = ("x", "y", "yaw", "vx", "vy", "yaw_rate", "steer")
    state_units: tuple[str, ...] = ("m", "m", "rad", "m/s", "m/s", "rad/s", "rad")
    action_units: tuple[str, ...] = ("rad/s", "m/s^2")

    @property
    def action_low(self) -> Array:
        return np.array([-self.steer_rate_limit, self.accel_min])

    @property
    def action_high(self) -> Array:
        return np.array([self.steer_rate_limit, self.accel_max])

    @property
    def front_load(self) -> float:
        return self.mass * self.gravity * self.lr / (self.lf + self.lr)

    @property
    def rear_load(self) -> float:
        return self.mass * self.gravity * self.lf / (self.lf + self.lr)

    def tire_forces(self, state: Array) -> tuple[float, float]:
        """Lateral axle forces, linear in slip and clipped at mu * normal load."""
        _, _, _, vx, vy, r, steer = state
        vx_eff = max(vx, self.min_speed_for_slip)
        slip_f = math.atan2(vy + self.lf * r, vx_eff) - steer
        slip_r = math.atan2(vy - self.lr * r, vx_eff)
        lim_f = self.friction * self.front_load
        lim_r = self.friction * self.rear_load
        fyf = float(np.clip(-self.cornering_front * slip_f, -lim_f, lim_f))
        fyr = float(np.clip(-self.cornering_rear * slip_r, -lim_r, lim_r))
        return fyf, fyr

    def deriv(self, state: Array, action: Array) -> Array:
        _, _, yaw, vx, vy, r, steer = state
        steer_rate, accel = action
        fyf, fyr = self.tire_forces(state)
        cos_d, sin_d = math.cos(steer), math.sin(steer)
        return np.array(
            [
                vx * math.cos(yaw) - vy * math.sin(yaw),
                vx * math.sin(yaw) + vy * math.cos(yaw),
                r,
                accel + r * vy - fyf * sin_d / self.mass,
                (fyf * cos_d + fyr) / self.mass - r * vx,
                (self.lf * fyf * cos_d - self.lr * fyr) / self.yaw_inertia,
                steer_rate,
            ]
        )


EnvSpec = PendulumSpec | CartpoleSpec | BicycleSpec

_ENVS: dict[str, type] = {
    "pendulum": PendulumSpec,
    "cartpole": CartpoleSpec,
    "bicycle": BicycleSpec,
}


def make_spec(name: str, overrides: dict | None = None) -> EnvSpec:
    if name not in _ENVS:
        raise ValueError(f"unknown environment '{name}', expected one of {sorted(_ENVS)}")
    spec = _ENVS[name]()
    if overrides:
        bad = [k for k in overrides if not hasattr(spec, k)]
        if bad:
            raise ValueError(f"unknown {name} override(s) {bad}")
        spec = replace(spec, **overrides)
    return spec


# --------------------------------------------------------------------------
# integration


def rk4_step(deriv: Callable[[Array, Array], Array], state: Array, action: Array, dt: float) -> Array:
    k1 = deriv(state, action)
    k2 = deriv(state + 0.5 * dt * k1, action)
    k3 = deriv(state + 0.5 * dt * k2, action)
    k4 = deriv(state + dt * k3, action)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step(spec: EnvSpec, state: Array, action: Array, disturbance: Array | None = None) -> Array:
    """One RK4 step of length ``spec.dt``.

    The commanded action is clamped to the actuator bounds first; the
    disturbance (an additive per-channel force/torque) is applied after
    clamping, since external forces are not limited by the actuator.
    """
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if state.shape != (spec.n_x,):
        raise ValueError(f"state shape {state.shape}, expected ({spec.n_x},)")
    if action.shape != (spec.n_u,):
        raise ValueError(f"action shape {action.shape}, expected ({spec.n_u},)")
    if not np.isfinite(state).all():
        raise ValueError("state contains non-finite values")
    u = np.clip(action, spec.action_low, spec.action_high)
    if disturbance is not None:
        u = u + np.asarray(disturbance, dtype=np.float64)
    nxt = rk4_step(spec.deriv, state, u, spec.dt)
    nxt = wrap_state(nxt, spec.angle_idx)
    if isinstance(spec, BicycleSpec):
        # steering angle is a hard mechanical stop, applied after integration
        nxt[6] = float(np.clip(nxt[6], -spec.steer_limit, spec.steer_limit))
    return nxt


def advance(
    spec: EnvSpec,
    state: Array,
    action: Array,
    disturbance: Array | None,
    substeps: int,
) -> Array:
    """Hold (action, disturbance) over ``substeps`` integration steps."""
    for _ in range(substeps):
        state = step(spec, state, action, disturbance)
    return state


def substeps_for(spec: EnvSpec, control_dt: float) -> int:
    ratio = control_dt / spec.dt
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > 1e-9:
        raise ValueError(
            f"control dt {control_dt} must be a positive integer multiple of spec dt {spec.dt}"
        )
    return n


# --------------------------------------------------------------------------
# disturbances


DISTURBANCE_KINDS = ("step", "pulse_train", "parameter_shift")


@dataclass(frozen=True)
class Disturbance:
    kind: str
    magnitude: float
    t_start: float
    t_end: float
    channel: int = 0
    period: float = 1.0
    duty: float = 0.2
    param: str = ""
    rng_seed: int = 0  # reserved for randomized variants

    def __post_init__(self) -> None:
        if self.kind not in DISTURBANCE_KINDS:
            raise ValueError(f"unknown disturbance kind '{self.kind}', expected {DISTURBANCE_KINDS}")
        if not self.t_start < self.t_end:
            raise ValueError(f"need t_start < t_end, got [{self.t_start}, {self.t_end})")
        if self.kind == "pulse_train" and not (self.period > 0 and 0 < self.duty <= 1):
            raise ValueError(f"pulse_train needs period > 0 and duty in (0, 1], got {self.period}, {self.duty}")
        if self.kind == "parameter_shift" and not self.param:
            raise ValueError("parameter_shift needs a target param name")


def disturbance_active(d: Disturbance, t: float) -> bool:
    return d.t_start <= t < d.t_end


def inject(d: Disturbance, t: float) -> float:
    """Disturbance value at time t; zero outside [t_start, t_end).

    For additive kinds this is the extra force/torque on ``d.channel``.  For
    ``parameter_shift`` the returned value is the parameter override itself,
    which the caller applies to the spec while ``disturbance_active``.
    """
    if not disturbance_active(d, t):
        return 0.0
    if d.kind == "pulse_train":
        phase = (t - d.t_start) % d.period
        return d.magnitude if phase < d.duty * d.period else 0.0
    return d.magnitude


def additive_disturbance(disturbances: tuple[Disturbance, ...], t: float, n_u: int) -> Array:
    out = np.zeros(n_u)
    for d in disturbances:
        if d.kind != "parameter_shift":
            out[d.channel] += inject(d, t)
    return out


def shifted_spec(spec: EnvSpec, disturbances: tuple[Disturbance, ...], t: float) -> EnvSpec:
    overrides = {
        d.param: d.magnitude
        for d in disturbances
        if d.kind == "parameter_shift" and disturbance_active(d, t)
    }
    return replace(spec, **overrides) if overrides else spec


# --------------------------------------------------------------------------
# exploration and dataset collection


def exploration_start(spec: EnvSpec, rng: np.random.Generator) -> Array:
    """Broad-coverage initial state for data collection."""
    if isinstance(spec, PendulumSpec):
        return np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-8.0, 8.0)])
    if isinstance(spec, CartpoleSpec):
        return np.array(
            [
                rng.uniform(-1.5, 1.5),
                rng.uniform(-np.pi, np.pi),
                rng.uniform(-2.0, 2.0),
                rng.uniform(-4.0, 4.0),
            ]
        )
    return np.array(
        [
            rng.uniform(-5.0, 5.0),
            rng.uniform(-5.0, 5.0),
            rng.uniform(-np.pi, np.pi),
            rng.uniform(2.0, 12.0),
            rng.uniform(-1.0, 1.0),
            rng.uniform(-0.5, 0.5),
            rng.uniform(-0.3, 0.3),
        ]
    )


class _UniformPolicy:
    def __init__(self, spec: EnvSpec, rng: np.random.Generator) -> None:
        self.spec = spec
        self.rng = rng

    def __call__(self, t: float) -> Array:
        return self.rng.uniform(self.spec.action_low, self.spec.action_high)


class _SinusoidPolicy:
    """Per-episode random amplitude/frequency/phase sweep on every channel."""

    def __init__(self, spec: EnvSpec, rng: np.random.Generator) -> None:
        lo, hi = spec.action_low, spec.action_high
        half = 0.5 * (hi - lo)
        self.center = 0.5 * (hi + lo)
        self.amp = half * rng.uniform(0.3, 1.0, size=spec.n_u)
        self.freq = rng.uniform(0.15, 1.2, size=spec.n_u)
        self.phase = rng.uniform(0.0, 2.0 * np.pi, size=spec.n_u)
        self.lo, self.hi = lo, hi

    def __call__(self, t: float) -> Array:
        u = self.center + self.amp * np.sin(2.0 * np.pi * self.freq * t + self.phase)
        return np.clip(u, self.lo, self.hi)


EXPLORATION_POLICIES = ("uniform", "sinusoid")


def collect_dataset(
    spec: EnvSpec,
    policy: str,
    episodes: int,
    steps: int,
    rng_seed: int,
    *,
    history_len: int = 0,
    control_dt: float | None = None,
) -> list[TransitionSample]:
    """Roll exploration episodes and emit warmed-up history-augmented samples.

    One transition is recorded per control step once the history window holds
    ``history_len`` real pairs, so each episode contributes
    ``steps - history_len`` samples.  Targets are the per-step increments
    with angle coordinates wrapped, i.e. exactly what the model is asked to
    predict.  Deterministic for a fixed ``rng_seed``.
    """
    if policy not in EXPLORATION_POLICIES:
        raise ValueError(f"unknown policy '{policy}', expected one of {EXPLORATION_POLICIES}")
    if episodes < 1 or steps < 1:
        raise ValueError(f"need episodes >= 1 and steps >= 1, got {episodes}, {steps}")
    control_dt = spec.dt if control_dt is None else control_dt
    substeps = substeps_for(spec, control_dt)
    rng = np.random.default_rng(rng_seed)
    samples: list[TransitionSample] = []
    for _ in range(episodes):
        state = exploration_start(spec, rng)
        hist = HistoryWindow.empty(spec.n_x, spec.n_u, history_len)
        pol = _UniformPolicy(spec, rng) if policy == "uniform" else _SinusoidPolicy(spec, rng)
        for k in range(steps):
            action = pol(k * control_dt)
            nxt = advance(spec, state, action, None, substeps)
            if hist.fill >= history_len:
                samples.append(
                    TransitionSample(
                        input=assemble_input(state, action, hist, spec.angle_idx),
                        target=wrap_state_diff(nxt, state, spec.angle_idx),
                    )
                )
            hist.push(state, action)
            state = nxt
    return samples


# --------------------------------------------------------------------------
# reference path for the driving task


@dataclass(frozen=True)
class FigureEightTask:
    """Closed figure-eight reference with a constant target speed.

    The centerline is x = a sin(s), y = b sin(2s); the tightest corners sit
    at the lobe ends with curvature a / (4 b^2).
    """

    half_length: float = 36.0
    half_width: float = 9.0
    target_speed: float = 8.0
    n_points: int = 800
    waypoints: Array = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.half_length <= 0 or self.half_width <= 0 or self.target_speed <= 0:
            raise ValueError(
                f"path dimensions and speed must be positive, got "
                f"({self.half_length}, {self.half_width}, {self.target_speed})"
            )
        if self.n_points < 8:
            raise ValueError(f"need at least 8 waypoints, got {self.n_points}")
        s = np.linspace(0.0, 2.0 * np.pi, self.n_points, endpoint=False)
        pts = np.stack([self.half_length * np.sin(s), self.half_width * np.sin(2.0 * s)], axis=1)
        object.__setattr__(self, "waypoints", pts)

    def start_state(self) -> Array:
        """On-path start at s = 0, heading along the path tangent."""
        yaw = math.atan2(2.0 * self.half_width, self.half_length)
        return np.array([0.0, 0.0, yaw, 0.6 * self.target_speed, 0.0, 0.0, 0.0])


def polyline_distance(points: Array, waypoints: Array) -> Array:
    """Exact distance from each point (K, 2) to the closed polyline (P, 2)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    a = waypoints
    b = np.roll(waypoints, -1, axis=0)
    ab = b - a  # (P, 2)
    ab_sq = np.maximum((ab * ab).sum(axis=1), 1e-12)
    ap = pts[:, None, :] - a[None, :, :]  # (K, P, 2)
    t = np.clip((ap * ab[None, :, :]).sum(axis=2) / ab_sq[None, :], 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    d = np.linalg.norm(pts[:, None, :] - closest, axis=2)
    out = d.min(axis=1)
    return out if np.asarray(points).ndim == 2 else out[:1]


# --------------------------------------------------------------------------
# episode log


class EpisodeLog:
    """Single-writer per-step record of one episode, exportable to CSV.

    Row fields: time, measured state, nominal state (from the active plan),
    applied action, feedforward and feedback components, summed additive
    disturbance, parameter-shift active flag, instantaneous task cost, clamp
    flag and the index of the plan in force.
    """

    def __init__(
        self,
        spec: EnvSpec,
        seed: int,
        config_hash: str,
        mode: str,
    ) -> None:
        self.spec = spec
        self.seed = seed
        self.config_hash = config_hash
        self.mode = mode
        self.times: list[float] = []
        self.states: list[Array] = []
        self.nominals: list[Array] = []
        self.actions: list[Array] = []
        self.feedforwards: list[Array] = []
        self.feedbacks: list[Array] = []
        self.disturbances: list[float] = []
        self.param_active: list[int] = []
        self.costs: list[float] = []
        self.clamped: list[int] = []
        self.plan_index: list[int] = []

    def append(
        self,
        t: float,
        state: Array,
        nominal: Array,
        action: Array,
        feedforward: Array,
        feedback: Array,
        disturbance: float,
        param_shift_active: bool,
        cost: float,
        clamped: bool,
        plan_index: int,
    ) -> None:
        if self.times and t <= self.times[-1]:
            raise ValueError(f"timestamps must be strictly increasing, got {t} after {self.times[-1]}")
        self.times.append(float(t))
        self.states.append(np.array(state, dtype=np.float64, copy=True))
        self.nominals.append(np.array(nominal, dtype=np.float64, copy=True))
        self.actions.append(np.array(action, dtype=np.float64, copy=True))
        self.feedforwards.append(np.array(feedforward, dtype=np.float64, copy=True))
        self.feedbacks.append(np.array(feedback, dtype=np.float64, copy=True))
        self.disturbances.append(float(disturbance))
        self.param_active.append(int(param_shift_active))
        self.costs.append(float(cost))
        self.clamped.append(int(clamped))
        self.plan_index.append(int(plan_index))

    def __len__(self) -> int:
        return len(self.times)

    def arrays(self) -> dict[str, Array]:
        return {
            "t": np.asarray(self.times),
            "state": np.asarray(self.states),
            "nominal": np.asarray(self.nominals),
            "action": np.asarray(self.actions),
            "feedforward": np.asarray(self.feedforwards),
            "feedback": np.asarray(self.feedbacks),
            "disturbance": np.asarray(self.disturbances),
            "param_active": np.asarray(self.param_active, dtype=np.float64),
            "cost": np.asarray(self.costs),
            "clamped": np.asarray(self.clamped, dtype=np.float64),
            "plan_index": np.asarray(self.plan_index, dtype=np.float64),
        }

    def header(self) -> list[str]:
        cols = ["t"]
        cols += list(self.spec.state_names)
        cols += [f"nom_{n}" for n in self.spec.state_names]
        cols += [f"u_{i}" for i in range(self.spec.n_u)]
        cols += [f"uff_{i}" for i in range(self.spec.n_u)]
        cols += [f"ufb_{i}" for i in range(self.spec.n_u)]
        cols += ["dist", "param_active", "cost", "clamped", "plan_index"]
        return cols

    def to_csv(self, path: str | Path) -> None:
        units = ["s"] + list(self.spec.state_units) * 2 + list(self.spec.action_units) * 3
        units += [self.spec.action_units[0], "flag", "-", "flag", "index"]
        lines = [
            "# units: " + ", ".join(f"{c} [{u}]" for c, u in zip(self.header(), units)),
            f"# seed={self.seed} mode={self.mode} config={self.config_hash}",
            ",".join(self.header()),
        ]
        for i in range(len(self.times)):
            row: list[float] = [self.times[i]]
            row += list(self.states[i])
            row += list(self.nominals[i])
            row += list(self.actions[i])
            row += list(self.feedforwards[i])
            row += list(self.feedbacks[i])
            row += [self.disturbances[i], self.param_active[i], self.costs[i], self.clamped[i], self.plan_index[i]]
            lines.append(",".join(repr(float(v)) for v in row))
        Path(path).write_text("\n".join(lines) + "\n")
