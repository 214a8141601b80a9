"""Smooth sampling-based MPC in the lifted action-derivative space.

The decision variables are action *derivatives*; commanded actions are their
running integral from a base action, clipped to the actuator bounds (the
clip acts on integrated actions, never on the derivatives).  One planner
iteration draws Gaussian derivative perturbations -- sample 0 always carries
the zero perturbation so the incumbent is re-evaluated -- rolls every
candidate through the learned model, and blends the perturbations with
exponentially cost-weighted averaging around the best sampled cost.

A direct action-space variant sharing the same rollout machinery is provided
as the smoothness baseline: it perturbs the action sequence itself under the
same sample count, horizon, seed and cost terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from . import nn_dynamics
from .environments import wrap_state
from .nn_dynamics import DynamicsModel, HistoryWindow

Array = NDArray[np.float64]

StageCost = Callable[[Array, int], Array]
TerminalCost = Callable[[Array], Array]


class PlannerDivergence(RuntimeError):
    """Every rollout diverged; there is no finite cost to weight."""


@dataclass(frozen=True)
class MppiConfig:
    samples: int
    horizon: int
    temperature: float
    noise_stddev: Array
    dt: float
    action_low: Array
    action_high: Array
    stage_cost: StageCost
    terminal_cost: TerminalCost
    action_reg_weight: float = 0.0
    derivative_reg_weight: float = 0.0
    action_ref: Array | None = None
    vanilla_noise_stddev: Array | None = None
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.samples < 1:
            raise ValueError(f"samples must be >= 1, got {self.samples}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.dt <= 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        for name in ("noise_stddev", "action_low", "action_high"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.noise_stddev < 0):
            raise ValueError("noise_stddev must be >= 0 per channel")
        if self.noise_stddev.shape != self.action_low.shape or self.action_low.shape != self.action_high.shape:
            raise ValueError("noise_stddev / action bounds must share one shape (n_u,)")
        if np.any(self.action_low >= self.action_high):
            raise ValueError("need action_low < action_high per channel")
        if self.action_reg_weight < 0 or self.derivative_reg_weight < 0:
            raise ValueError("regularization weights must be >= 0")
        if self.action_ref is not None:
            object.__setattr__(self, "action_ref", np.asarray(self.action_ref, dtype=np.float64))
        if self.vanilla_noise_stddev is not None:
            v = np.asarray(self.vanilla_noise_stddev, dtype=np.float64)
            if v.shape != self.noise_stddev.shape or np.any(v < 0):
                raise ValueError("vanilla_noise_stddev must be >= 0 with shape (n_u,)")
            object.__setattr__(self, "vanilla_noise_stddev", v)

    @property
    def n_u(self) -> int:
        return self.action_low.shape[0]


def integrate_actions(
    base_action: Array, derivative_seq: Array, dt: float, low: Array, high: Array
) -> Array:
    """Running integral of the derivatives from the base action, then clip."""
    raw = base_action + dt * np.cumsum(derivative_seq, axis=-2)
    return np.clip(raw, low, high)


@dataclass
class LiftedPlan:
    """A plan in the lifted space plus its integral and model rollout.

    ``action_seq`` is exactly ``clip(base_action + dt * cumsum(derivative_seq))``
    and is therefore re-derivable from the other fields.
    """

    derivative_seq: Array
    base_action: Array
    dt: float
    action_seq: Array
    nominal_states: Array
    cost: float = float("nan")

    @classmethod
    def zeros(cls, horizon: int, n_x: int, base_action: Array, dt: float) -> "LiftedPlan":
        base = np.asarray(base_action, dtype=np.float64)
        n_u = base.shape[0]
        return cls(
            derivative_seq=np.zeros((horizon, n_u)),
            base_action=base.copy(),
            dt=dt,
            action_seq=np.tile(base, (horizon, 1)),
            nominal_states=np.zeros((horizon + 1, n_x)),
        )

    @property
    def horizon(self) -> int:
        return self.derivative_seq.shape[0]


@dataclass(frozen=True)
class RolloutResult:
    cost: float
    perturbation: Array
    actions: Array
    states: Array


def sample_perturbations(config: MppiConfig, rng: np.random.Generator) -> Array:
    """(K, T, n_u) Gaussian derivative perturbations; sample 0 is all zeros."""
    eps = rng.standard_normal((config.samples, config.horizon, config.n_u))
    eps *= config.noise_stddev
    eps[0] = 0.0
    return eps


def _smoothness_cost(actions: Array, derivatives: Array, config: MppiConfig) -> Array:
    """Action-magnitude and derivative-magnitude penalties per sample."""
    cost = np.zeros(actions.shape[0])
    if config.action_reg_weight > 0:
        ref = config.action_ref if config.action_ref is not None else 0.0
        cost += config.action_reg_weight * ((actions - ref) ** 2).sum(axis=(1, 2))
    if config.derivative_reg_weight > 0:
        cost += config.derivative_reg_weight * (derivatives**2).sum(axis=(1, 2))
    return cost


def _simulate(
    model: DynamicsModel,
    state: Array,
    history: HistoryWindow,
    actions: Array,
    config: MppiConfig,
    keep_trajectories: bool,
) -> tuple[Array, Array | None]:
    """Batched model rollout of (K, T, n_u) action sequences.

    Accumulates the running state cost on visited states plus the terminal
    cost.  A sample whose state goes non-finite is truncated and receives the
    +inf sentinel.
    """
    k_samples, horizon, _ = actions.shape
    h = model.history_len
    states = np.repeat(state[None, :], k_samples, axis=0)
    hist_states = np.repeat(history.past_states[None], k_samples, axis=0)
    hist_actions = np.repeat(history.past_actions[None], k_samples, axis=0)
    fill = history.fill
    run_cost = np.zeros(k_samples)
    alive = np.ones(k_samples, dtype=bool)
    traj = None
    if keep_trajectories:
        traj = np.empty((k_samples, horizon + 1, model.n_x))
        traj[:, 0] = states
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(horizon):
            u = actions[:, t]
            nxt = nn_dynamics.forward_batch(model, states, u, hist_states, hist_actions, fill)
            alive &= np.isfinite(nxt).all(axis=1)
            nxt = np.where(alive[:, None], nxt, 0.0)
            nxt = wrap_state(nxt, model.angle_idx)
            if h > 0:
                hist_states = np.concatenate([hist_states[:, 1:], states[:, None]], axis=1)
                hist_actions = np.concatenate([hist_actions[:, 1:], u[:, None]], axis=1)
                fill = min(h, fill + 1)
            states = nxt
            run_cost += np.where(alive, np.asarray(config.stage_cost(states, t + 1)), 0.0)
            if keep_trajectories:
                traj[:, t + 1] = states
        run_cost += np.where(alive, np.asarray(config.terminal_cost(states)), 0.0)
    costs = np.where(alive, run_cost, np.inf)
    return costs, traj


def rollout(
    model: DynamicsModel,
    state: Array,
    history: HistoryWindow,
    plan: LiftedPlan,
    perturbation: Array,
    config: MppiConfig,
) -> RolloutResult:
    """Cost of one perturbed candidate.  Pure; repeated calls agree exactly."""
    derivatives = plan.derivative_seq + perturbation
    actions = integrate_actions(
        plan.base_action, derivatives, config.dt, config.action_low, config.action_high
    )
    costs, traj = _simulate(model, np.asarray(state, dtype=np.float64), history, actions[None], config, True)
    total = costs[0] + _smoothness_cost(actions[None], derivatives[None], config)[0]
    assert traj is not None
    return RolloutResult(
        cost=float(total),
        perturbation=np.array(perturbation, copy=True),
        actions=actions,
        states=traj[0],
    )


def weighted_update(costs: Array, perturbations: Array, temperature: float) -> Array:
    """Exponentially weighted perturbation average around the best cost.

    Weights are ``exp(-(S_k - min S) / temperature)`` normalized to sum to
    one; +inf costs get exactly zero weight.  Invariant to shifting all costs
    by a constant, and to scaling costs and temperature together.
    """
    costs = np.asarray(costs, dtype=np.float64)
    costs = np.where(np.isnan(costs), np.inf, costs)
    finite = np.isfinite(costs)
    if not finite.any():
        raise PlannerDivergence("all rollouts diverged (every sampled cost is non-finite)")
    baseline = costs[finite].min()
    with np.errstate(over="ignore"):
        weights = np.exp(-(costs - baseline) / temperature)
    weights[~finite] = 0.0
    weights /= weights.sum()
    return np.tensordot(weights, perturbations, axes=1)


def plan(
    model: DynamicsModel,
    state: Array,
    history: HistoryWindow,
    incumbent: LiftedPlan,
    config: MppiConfig,
    rng: np.random.Generator,
) -> LiftedPlan:
    """One full planner iteration; deterministic given the generator state.

    Returns the updated plan with its noiseless model rollout and cost; the
    returned ``nominal_states[0]`` is the planning-time state.
    """
    state = np.asarray(state, dtype=np.float64)
    if incumbent.horizon != config.horizon:
        raise ValueError(f"incumbent horizon {incumbent.horizon} != config horizon {config.horizon}")
    eps = sample_perturbations(config, rng)
    derivatives = incumbent.derivative_seq[None] + eps
    actions = integrate_actions(
        incumbent.base_action, derivatives, config.dt, config.action_low, config.action_high
    )
    costs, _ = _simulate(model, state, history, actions, config, False)
    costs = costs + _smoothness_cost(actions, derivatives, config)
    delta = weighted_update(costs, eps, config.temperature)
    new_derivatives = incumbent.derivative_seq + delta
    new_actions = integrate_actions(
        incumbent.base_action, new_derivatives, config.dt, config.action_low, config.action_high
    )
    ncost, traj = _simulate(model, state, history, new_actions[None], config, True)
    total = ncost[0] + _smoothness_cost(new_actions[None], new_derivatives[None], config)[0]
    assert traj is not None
    return LiftedPlan(
        derivative_seq=new_derivatives,
        base_action=incumbent.base_action.copy(),
        dt=config.dt,
        action_seq=new_actions,
        nominal_states=traj[0],
        cost=float(total),
    )


def shift(plan_: LiftedPlan, low: Array, high: Array) -> LiftedPlan:
    """Receding-horizon warm start: drop the head, append a zero derivative.

    The base action advances to the already-clamped first commanded action,
    so with no active clamp the re-integrated head reproduces the old second
    action exactly.
    """
    if plan_.horizon < 2:
        raise ValueError(f"cannot shift a horizon-{plan_.horizon} plan")
    new_derivatives = np.vstack([plan_.derivative_seq[1:], np.zeros((1, plan_.derivative_seq.shape[1]))])
    new_base = plan_.action_seq[0].copy()
    return LiftedPlan(
        derivative_seq=new_derivatives,
        base_action=new_base,
        dt=plan_.dt,
        action_seq=integrate_actions(new_base, new_derivatives, plan_.dt, low, high),
        nominal_states=np.vstack([plan_.nominal_states[1:], plan_.nominal_states[-1:]]),
        cost=float("nan"),
    )


# --------------------------------------------------------------------------
# direct action-space baseline


@dataclass
class DirectPlan:
    """Plan from the action-space variant; mirrors LiftedPlan where shared."""

    action_seq: Array
    dt: float
    nominal_states: Array
    cost: float = float("nan")

    @classmethod
    def zeros(cls, horizon: int, n_x: int, n_u: int, dt: float) -> "DirectPlan":
        return cls(
            action_seq=np.zeros((horizon, n_u)),
            dt=dt,
            nominal_states=np.zeros((horizon + 1, n_x)),
        )

    @property
    def horizon(self) -> int:
        return self.action_seq.shape[0]


def _direct_derivatives(actions: Array, dt: float) -> Array:
    """Finite-difference action rates so both planners pay the same penalty."""
    return np.diff(actions, axis=-2) / dt


def plan_direct(
    model: DynamicsModel,
    state: Array,
    history: HistoryWindow,
    incumbent: DirectPlan,
    config: MppiConfig,
    rng: np.random.Generator,
) -> DirectPlan:
    """Action-space planner under matched settings (K, T, seed, cost terms)."""
    state = np.asarray(state, dtype=np.float64)
    if incumbent.horizon != config.horizon:
        raise ValueError(f"incumbent horizon {incumbent.horizon} != config horizon {config.horizon}")
    stddev = (
        config.vanilla_noise_stddev
        if config.vanilla_noise_stddev is not None
        else config.noise_stddev * config.dt * np.sqrt(config.horizon / 2.0)
    )
    eps = rng.standard_normal((config.samples, config.horizon, config.n_u)) * stddev
    eps[0] = 0.0
    actions = np.clip(incumbent.action_seq[None] + eps, config.action_low, config.action_high)
    costs, _ = _simulate(model, state, history, actions, config, False)
    costs = costs + _smoothness_cost(actions, _direct_derivatives(actions, config.dt), config)
    delta = weighted_update(costs, eps, config.temperature)
    new_actions = np.clip(incumbent.action_seq + delta, config.action_low, config.action_high)
    ncost, traj = _simulate(model, state, history, new_actions[None], config, True)
    total = (
        ncost[0]
        + _smoothness_cost(new_actions[None], _direct_derivatives(new_actions[None], config.dt), config)[0]
    )
    assert traj is not None
    return DirectPlan(action_seq=new_actions, dt=config.dt, nominal_states=traj[0], cost=float(total))


def shift_direct(plan_: DirectPlan) -> DirectPlan:
    if plan_.horizon < 2:
        raise ValueError(f"cannot shift a horizon-{plan_.horizon} plan")
    return DirectPlan(
        action_seq=np.vstack([plan_.action_seq[1:], plan_.action_seq[-1:]]),
        dt=plan_.dt,
        nominal_states=np.vstack([plan_.nominal_states[1:], plan_.nominal_states[-1:]]),
        cost=float("nan"),
    )
