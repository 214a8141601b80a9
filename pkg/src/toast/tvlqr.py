"""Time-varying LQR tracking synthesized along a planned trajectory.

Linearizations come from the same learned network the planner rolls out, so
planning and tracking share one model of the world.  Two treatments of the
input history are available:

* augmented (default): the Riccati pass runs on the full history-augmented
  transition, whose exact shift/identity blocks the model exposes; the cost
  weights only the current-state block, so history sensitivity shapes the
  gains without being penalized itself.
* plain: only the current-state Jacobians enter, as an ablation.

Between planner knots the fast loop holds the gain zero-order and linearly
interpolates the nominal state and action.  In augmented mode only the
current-state block interpolates; history blocks hold, matching the measured
side whose history changes at knots only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .nn_dynamics import (
    DynamicsModel,
    HistoryWindow,
    augmented_jacobian,
    flatten_augmented,
    jacobians,
)

Array = NDArray[np.float64]


class RiccatiError(RuntimeError):
    """The feedback-gain solve failed at some backward step."""


@dataclass(frozen=True)
class TrackingCost:
    """Quadratic tracking weights on current-state deviation and feedback effort."""

    q: Array
    r: Array
    q_final: Array

    def __post_init__(self) -> None:
        for name in ("q", "r", "q_final"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.ndim == 1:
                m = np.diag(m)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError(f"{name} must be square, got shape {m.shape}")
            if not np.allclose(m, m.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric to 1e-12")
            object.__setattr__(self, name, m)
        if self.q.shape != self.q_final.shape:
            raise ValueError(
                f"q and q_final must match, got {self.q.shape} vs {self.q_final.shape}"
            )
        if np.linalg.eigvalsh(self.r).min() <= 0:
            raise ValueError("r must be positive definite")
        for name in ("q", "q_final"):
            if np.linalg.eigvalsh(getattr(self, name)).min() < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")

    @classmethod
    def from_diagonals(cls, q: Array, r: Array, q_final: Array) -> "TrackingCost":
        return cls(q=np.diag(np.asarray(q, dtype=np.float64)),
                   r=np.diag(np.asarray(r, dtype=np.float64)),
                   q_final=np.diag(np.asarray(q_final, dtype=np.float64)))


@dataclass(frozen=True)
class LinearizationSeq:
    """Per-knot (A_t, B_t) along a plan plus the linearization points."""

    a: Array  # (T, n, n)
    b: Array  # (T, n, n_u)
    nominal_states: Array  # (T + 1, n): plain states or augmented states
    nominal_actions: Array  # (T, n_u)
    dt: float
    augmented: bool
    n_x: int
    n_u: int
    history_len: int
    angle_idx: tuple[int, ...]

    @property
    def horizon(self) -> int:
        return self.a.shape[0]

    @property
    def n(self) -> int:
        return self.a.shape[1]


def linearize_along(
    model: DynamicsModel,
    plan,
    start_history: HistoryWindow,
    augmented: bool = True,
) -> LinearizationSeq:
    """Jacobians at every knot of the plan's nominal trajectory.

    The history window is rolled forward along the nominal itself, so knot t
    is linearized at exactly the (state, action, history) triple the model
    visited during the plan's rollout.
    """
    horizon = plan.action_seq.shape[0]
    hist = start_history.copy()
    a_seq, b_seq, z_seq = [], [], []
    for t in range(horizon):
        x_t = plan.nominal_states[t]
        u_t = plan.action_seq[t]
        if augmented:
            a_t, b_t = augmented_jacobian(model, x_t, u_t, hist)
            z_seq.append(flatten_augmented(x_t, hist))
        else:
            a_t, b_t = jacobians(model, x_t, u_t, hist)
        a_seq.append(a_t)
        b_seq.append(b_t)
        hist.push(x_t, u_t)
    if augmented:
        z_seq.append(flatten_augmented(plan.nominal_states[horizon], hist))
        nominal_states = np.stack(z_seq)
    else:
        nominal_states = np.array(plan.nominal_states, copy=True)
    return LinearizationSeq(
        a=np.stack(a_seq),
        b=np.stack(b_seq),
        nominal_states=nominal_states,
        nominal_actions=np.array(plan.action_seq, copy=True),
        dt=plan.dt,
        augmented=augmented,
        n_x=model.n_x,
        n_u=model.n_u,
        history_len=model.history_len,
        angle_idx=model.angle_idx,
    )


@dataclass
class GainSchedule:
    """Published artifact the fast loop consumes: gains plus nominals.

    ``gains[t]`` acts on the deviation from ``nominal_states[t]``; deviations
    of angle coordinates are wrapped (in every state block when augmented).
    ``value_matrices`` retains the Riccati cost-to-go P_t for diagnostics.
    """

    gains: Array  # (T, n_u, n)
    nominal_states: Array  # (T + 1, n)
    nominal_actions: Array  # (T, n_u)
    dt: float
    augmented: bool
    n_x: int
    n_u: int
    history_len: int
    angle_idx: tuple[int, ...]
    action_low: Array | None = None
    action_high: Array | None = None
    value_matrices: Array | None = None
    valid_from_step: int = 0

    @property
    def horizon(self) -> int:
        return self.gains.shape[0]

    def angle_positions(self) -> list[int]:
        """Indices of angle coordinates within the (possibly augmented) state."""
        if not self.augmented:
            return list(self.angle_idx)
        pos = []
        for k in range(self.history_len + 1):
            pos.extend(k * self.n_x + i for i in self.angle_idx)
        return pos


def _embed_state_cost(m: Array, n: int) -> Array:
    """Place the current-state cost block top-left; history blocks cost zero."""
    out = np.zeros((n, n))
    out[: m.shape[0], : m.shape[1]] = m
    return out


def riccati_backward(
    lin: LinearizationSeq,
    cost: TrackingCost,
    action_low: Array | None = None,
    action_high: Array | None = None,
) -> GainSchedule:
    """Backward Riccati recursion along the linearization.

        P_T = Q_f
        K_t = (R + B_t' P_{t+1} B_t)^{-1} B_t' P_{t+1} A_t
        P_t = Q + A_t' P_{t+1} (A_t - B_t K_t)

    P is re-symmetrized every step.  R > 0 keeps the gain solve well posed; a
    failure anyway raises with the offending step index.
    """
    n = lin.n
    if cost.q.shape[0] != lin.n_x or cost.r.shape[0] != lin.n_u:
        raise ValueError(
            f"cost blocks ({cost.q.shape[0]}, {cost.r.shape[0]}) do not match "
            f"model dims ({lin.n_x}, {lin.n_u})"
        )
    q = _embed_state_cost(cost.q, n) if lin.augmented else cost.q
    q_final = _embed_state_cost(cost.q_final, n) if lin.augmented else cost.q_final
    horizon = lin.horizon
    gains = np.empty((horizon, lin.n_u, n))
    values = np.empty((horizon + 1, n, n))
    p = q_final.copy()
    values[horizon] = p
    for t in range(horizon - 1, -1, -1):
        a_t, b_t = lin.a[t], lin.b[t]
        gram = cost.r + b_t.T @ p @ b_t
        try:
            k_t = np.linalg.solve(gram, b_t.T @ p @ a_t)
        except np.linalg.LinAlgError as exc:
            raise RiccatiError(f"gain solve failed at backward step {t}: {exc}") from exc
        p = q + a_t.T @ p @ (a_t - b_t @ k_t)
        p = 0.5 * (p + p.T)
        gains[t] = k_t
        values[t] = p
    return GainSchedule(
        gains=gains,
        nominal_states=np.array(lin.nominal_states, copy=True),
        nominal_actions=np.array(lin.nominal_actions, copy=True),
        dt=lin.dt,
        augmented=lin.augmented,
        n_x=lin.n_x,
        n_u=lin.n_u,
        history_len=lin.history_len,
        angle_idx=lin.angle_idx,
        action_low=None if action_low is None else np.asarray(action_low, dtype=np.float64),
        action_high=None if action_high is None else np.asarray(action_high, dtype=np.float64),
        value_matrices=values,
    )


def wrap_deviation(schedule: GainSchedule, deviation: Array) -> Array:
    """Wrap angle coordinates of a deviation vector to (-pi, pi]."""
    pos = schedule.angle_positions()
    if not pos:
        return deviation
    out = np.array(deviation, copy=True)
    out[pos] = -((-out[pos] + np.pi) % (2.0 * np.pi) - np.pi)
    return out


def feedback_action(
    schedule: GainSchedule,
    t_local: int,
    measured: Array,
    feedforward: Array,
) -> Array:
    """clip(feedforward - K_t (measured - nominal_t)) with angle-aware deviation.

    Zero deviation returns the feedforward bit-exactly (before clamping).
    """
    if not 0 <= t_local < schedule.horizon:
        raise IndexError(f"t_local {t_local} outside schedule horizon [0, {schedule.horizon})")
    measured = np.asarray(measured, dtype=np.float64)
    if measured.shape != (schedule.nominal_states.shape[1],):
        raise ValueError(
            f"measured shape {measured.shape}, schedule expects ({schedule.nominal_states.shape[1]},)"
        )
    deviation = wrap_deviation(schedule, measured - schedule.nominal_states[t_local])
    u = feedforward - schedule.gains[t_local] @ deviation
    if schedule.action_low is not None and schedule.action_high is not None:
        u = np.clip(u, schedule.action_low, schedule.action_high)
    return u


def interpolate_gain(schedule: GainSchedule, offset: float) -> tuple[Array, Array, Array]:
    """(K, nominal state, nominal action) at a continuous offset into the plan.

    The gain holds zero-order at knot t = floor(offset / dt); the nominal
    state and action interpolate linearly toward knot t+1 (angle coordinates
    interpolate along the wrapped difference; in augmented mode history
    blocks hold).  The action holds within the final knot interval, which has
    no successor.
    """
    horizon, dt = schedule.horizon, schedule.dt
    if not 0.0 <= offset < horizon * dt + 1e-9:
        raise ValueError(f"offset {offset} outside plan span [0, {horizon * dt})")
    s = offset / dt
    t = min(int(np.floor(s + 1e-9)), horizon - 1)
    tau = min(max(s - t, 0.0), 1.0)
    gain = schedule.gains[t]
    x0 = schedule.nominal_states[t]
    if tau == 0.0:
        return gain, x0.copy(), schedule.nominal_actions[t].copy()
    dx = wrap_deviation(schedule, schedule.nominal_states[t + 1] - x0)
    if schedule.augmented:
        dx = dx.copy()
        dx[schedule.n_x :] = 0.0  # history blocks hold between knots
    x_nom = x0 + tau * dx
    if t + 1 < horizon:
        u_nom = (1.0 - tau) * schedule.nominal_actions[t] + tau * schedule.nominal_actions[t + 1]
    else:
        u_nom = schedule.nominal_actions[t].copy()
    return gain, x_nom, u_nom
