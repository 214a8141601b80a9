"""Learned one-step dynamics shared by the sampling planner and the tracking controller.

A dense tanh network predicts the state increment ``x_{t+1} - x_t`` from a
history-augmented input.  The raw (pre-normalization) input has the fixed
flattening order

    [phi(x_t), phi(x_{t-1}), ..., phi(x_{t-H}), u_t, u_{t-1}, ..., u_{t-H}]

where ``phi`` expands each angle coordinate in place to (sin, cos) and passes
every other coordinate through, so one state block occupies
``n_x + len(angle_idx)`` features.  Inputs are standardized per feature and
the predicted increment is destandardized per state coordinate.  History
slots that have not been observed yet read as exactly zero in normalized
space, and the model is insensitive to them by construction.

Because the network is a fixed chain of affine maps and tanh, the Jacobians
of the full transition map are available in closed form, including the exact
shift/identity structure of the history-augmented transition used by the
tracking controller.

Model file format (extension ``.toastnn``).  All integers are little-endian
uint32, all floats little-endian float64:

    bytes 0..7            magic ``TOASTNN1`` (``1`` is the format version)
    uint32 x 6            n_x, n_u, history_len, activation id (0 = tanh),
                          n_angles, n_layers
    uint32[n_angles]      angle state indices, ascending
    uint32[n_layers + 1]  layer widths, input width first, n_x last
    f64[d_in] x 2         input mean, input std
    f64[n_x]  x 2         output mean, output std
    per layer             weight matrix row-major (out x in), then bias (out)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

Array = NDArray[np.float64]

MODEL_MAGIC = b"TOASTNN1"
_ACTIVATION_TANH = 0


class DimensionError(ValueError):
    """Raised when an argument's shape disagrees with the model contract."""


class ModelFormatError(ValueError):
    """Raised when a model file is not a readable ``TOASTNN1`` payload."""


def feature_dim(n_x: int, angle_idx: tuple[int, ...]) -> int:
    return n_x + len(angle_idx)


def state_features(state: Array, angle_idx: tuple[int, ...]) -> Array:
    """Map physical states to NN features along the last axis.

    Non-angle coordinates pass through; each angle coordinate ``theta`` is
    replaced in place by the pair ``(sin theta, cos theta)``.
    """
    x = np.asarray(state, dtype=np.float64)
    if not angle_idx:
        return x.copy()
    cols = []
    for i in range(x.shape[-1]):
        xi = x[..., i : i + 1]
        if i in angle_idx:
            cols.append(np.sin(xi))
            cols.append(np.cos(xi))
        else:
            cols.append(xi)
    return np.concatenate(cols, axis=-1)


def state_feature_jacobian(state: Array, angle_idx: tuple[int, ...]) -> Array:
    """d features / d state for a single state vector, shape (n_f, n_x)."""
    x = np.asarray(state, dtype=np.float64)
    n_x = x.shape[0]
    jac = np.zeros((feature_dim(n_x, angle_idx), n_x))
    row = 0
    for i in range(n_x):
        if i in angle_idx:
            jac[row, i] = np.cos(x[i])
            jac[row + 1, i] = -np.sin(x[i])
            row += 2
        else:
            jac[row, i] = 1.0
            row += 1
    return jac


@dataclass
class HistoryWindow:
    """Ring buffer of the H most recent (state, action) pairs, newest last.

    ``fill`` counts how many slots hold real observations; the rest read as
    zero in the model's normalized input space (warm-up convention).
    """

    n_x: int
    n_u: int
    length: int
    past_states: Array
    past_actions: Array
    fill: int = 0

    @classmethod
    def empty(cls, n_x: int, n_u: int, length: int) -> "HistoryWindow":
        if length < 0:
            raise ValueError(f"history length must be >= 0, got {length}")
        return cls(
            n_x=n_x,
            n_u=n_u,
            length=length,
            past_states=np.zeros((length, n_x)),
            past_actions=np.zeros((length, n_u)),
        )

    def push(self, state: Array, action: Array) -> None:
        if self.length == 0:
            return
        self.past_states = np.vstack([self.past_states[1:], np.asarray(state, dtype=np.float64)])
        self.past_actions = np.vstack([self.past_actions[1:], np.asarray(action, dtype=np.float64)])
        self.fill = min(self.length, self.fill + 1)

    def copy(self) -> "HistoryWindow":
        return HistoryWindow(
            n_x=self.n_x,
            n_u=self.n_u,
            length=self.length,
            past_states=self.past_states.copy(),
            past_actions=self.past_actions.copy(),
            fill=self.fill,
        )


def assemble_input(
    state: Array,
    action: Array,
    history: HistoryWindow,
    angle_idx: tuple[int, ...],
) -> Array:
    """Raw (pre-normalization) model input in the fixed flattening order."""
    blocks = [state_features(np.asarray(state, dtype=np.float64), angle_idx)]
    for k in range(1, history.length + 1):
        blocks.append(state_features(history.past_states[-k], angle_idx))
    blocks.append(np.asarray(action, dtype=np.float64))
    for k in range(1, history.length + 1):
        blocks.append(history.past_actions[-k])
    return np.concatenate(blocks)


@dataclass(frozen=True)
class DynamicsModel:
    """Immutable tanh MLP over the history-augmented input, with normalizers."""

    n_x: int
    n_u: int
    history_len: int
    angle_idx: tuple[int, ...]
    weights: tuple[Array, ...]
    biases: tuple[Array, ...]
    in_mean: Array
    in_std: Array
    out_mean: Array
    out_std: Array

    def __post_init__(self) -> None:
        if self.n_x < 1 or self.n_u < 1 or self.history_len < 0:
            raise DimensionError(
                f"invalid dims n_x={self.n_x} n_u={self.n_u} history_len={self.history_len}"
            )
        if any(i < 0 or i >= self.n_x for i in self.angle_idx):
            raise DimensionError(f"angle_idx {self.angle_idx} out of range for n_x={self.n_x}")
        if tuple(sorted(set(self.angle_idx))) != self.angle_idx:
            raise DimensionError(f"angle_idx must be ascending and unique, got {self.angle_idx}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise DimensionError("weights and biases must be non-empty and paired")
        d = self.input_dim
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise DimensionError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if w.shape[1] != d:
                raise DimensionError(f"layer {k}: expected input width {d}, got {w.shape[1]}")
            d = w.shape[0]
        if d != self.n_x:
            raise DimensionError(f"output width {d} != n_x {self.n_x}")
        if self.in_mean.shape != (self.input_dim,) or self.in_std.shape != (self.input_dim,):
            raise DimensionError(
                f"input normalizer shape {self.in_mean.shape}/{self.in_std.shape}, "
                f"expected ({self.input_dim},)"
            )
        if self.out_mean.shape != (self.n_x,) or self.out_std.shape != (self.n_x,):
            raise DimensionError(
                f"output normalizer shape {self.out_mean.shape}/{self.out_std.shape}, "
                f"expected ({self.n_x},)"
            )
        if not (np.all(self.in_std > 0) and np.all(self.out_std > 0)):
            raise DimensionError("normalizer stds must be strictly positive")

    @property
    def n_features(self) -> int:
        return feature_dim(self.n_x, self.angle_idx)

    @property
    def input_dim(self) -> int:
        h1 = self.history_len + 1
        return self.n_features * h1 + self.n_u * h1

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def state_slice(self, k: int) -> slice:
        """Feature columns of state block x_{t-k}, k = 0..H."""
        nf = self.n_features
        return slice(k * nf, (k + 1) * nf)

    def action_slice(self, k: int) -> slice:
        """Feature columns of action block u_{t-k}, k = 0..H."""
        base = self.n_features * (self.history_len + 1)
        return slice(base + k * self.n_u, base + (k + 1) * self.n_u)


def _check_call_dims(model: DynamicsModel, state: Array, action: Array, history: HistoryWindow) -> None:
    state = np.asarray(state)
    action = np.asarray(action)
    if state.shape != (model.n_x,):
        raise DimensionError(f"state shape {state.shape}, model expects ({model.n_x},)")
    if action.shape != (model.n_u,):
        raise DimensionError(f"action shape {action.shape}, model expects ({model.n_u},)")
    if history.length != model.history_len:
        raise DimensionError(
            f"history length {history.length}, model expects {model.history_len}"
        )
    if history.length > 0 and (
        history.past_states.shape != (model.history_len, model.n_x)
        or history.past_actions.shape != (model.history_len, model.n_u)
    ):
        raise DimensionError(
            f"history buffers {history.past_states.shape}/{history.past_actions.shape} "
            f"do not match ({model.history_len}, {model.n_x})/({model.history_len}, {model.n_u})"
        )


def _valid_mask(model: DynamicsModel, fill: int) -> Array:
    """1.0 for input entries backed by real observations, 0.0 for unfilled slots."""
    mask = np.ones(model.input_dim)
    for k in range(fill + 1, model.history_len + 1):
        mask[model.state_slice(k)] = 0.0
        mask[model.action_slice(k)] = 0.0
    return mask


def _normalized_input(model: DynamicsModel, state: Array, action: Array, history: HistoryWindow) -> Array:
    raw = assemble_input(state, action, history, model.angle_idx)
    v = (raw - model.in_mean) / model.in_std
    if history.fill < model.history_len:
        v = v * _valid_mask(model, history.fill)
    return v


def _mlp(model: DynamicsModel, v: Array) -> Array:
    """Network output for normalized input(s); batch-safe on the leading axes."""
    z = v
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = z @ w.T + b
        if k < last:
            z = np.tanh(z)
    return z


def _mlp_jacobian(model: DynamicsModel, v: Array) -> Array:
    """d output / d normalized-input at v, shape (n_x, input_dim)."""
    z = v
    jac: Array | None = None
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = z @ w.T + b
        jac = w.copy() if jac is None else w @ jac
        if k < last:
            z = np.tanh(a)
            jac = (1.0 - z * z)[:, None] * jac
    assert jac is not None
    return jac


def forward(model: DynamicsModel, state: Array, action: Array, history: HistoryWindow) -> Array:
    """Predicted next state ``x + denorm(net(norm(input)))``.  Pure.

    Routed through :func:`forward_batch` with a singleton batch so single and
    batched evaluation share one numerical path bit for bit.
    """
    _check_call_dims(model, state, action, history)
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    return forward_batch(
        model,
        state[None, :],
        action[None, :],
        history.past_states[None, :, :],
        history.past_actions[None, :, :],
        history.fill,
    )[0]


def forward_batch(
    model: DynamicsModel,
    states: Array,
    actions: Array,
    hist_states: Array,
    hist_actions: Array,
    fill: int,
) -> Array:
    """Vectorized ``forward`` over a leading batch axis.

    ``hist_states``/``hist_actions`` have shape (K, H, n_x)/(K, H, n_u) with
    the newest entry last, matching :class:`HistoryWindow` storage; ``fill``
    is shared across the batch.
    """
    h = model.history_len
    blocks = [state_features(states, model.angle_idx)]
    for k in range(1, h + 1):
        blocks.append(state_features(hist_states[:, h - k], model.angle_idx))
    blocks.append(actions)
    for k in range(1, h + 1):
        blocks.append(hist_actions[:, h - k])
    raw = np.concatenate(blocks, axis=-1)
    v = (raw - model.in_mean) / model.in_std
    if fill < h:
        v = v * _valid_mask(model, fill)
    g = _mlp(model, v)
    return states + model.out_mean + model.out_std * g


def jacobians(model: DynamicsModel, state: Array, action: Array, history: HistoryWindow) -> tuple[Array, Array]:
    """Closed-form (A, B) = (d x_{t+1} / d x_t, d x_{t+1} / d u_t).

    The chain runs through the output destandardizer, the tanh layers, the
    input standardizer and the angle feature map; the additive skip gives the
    leading identity in A.
    """
    _check_call_dims(model, state, action, history)
    v = _normalized_input(model, state, action, history)
    jac = _mlp_jacobian(model, v)
    sx = model.state_slice(0)
    su = model.action_slice(0)
    jx = (model.out_std[:, None] * jac[:, sx]) / model.in_std[sx][None, :]
    a = np.eye(model.n_x) + jx @ state_feature_jacobian(np.asarray(state, dtype=np.float64), model.angle_idx)
    b = (model.out_std[:, None] * jac[:, su]) / model.in_std[su][None, :]
    return a, b


def augmented_state_dim(model: DynamicsModel) -> int:
    return model.n_x * (model.history_len + 1) + model.n_u * model.history_len


def flatten_augmented(state: Array, history: HistoryWindow) -> Array:
    """Physical augmented state [x_t, x_{t-1}, .., x_{t-H}, u_{t-1}, .., u_{t-H}].

    Unfilled slots read as physical zeros; they are only ever differenced
    against nominals built with the same fill, so they cancel.
    """
    blocks = [np.asarray(state, dtype=np.float64)]
    for k in range(1, history.length + 1):
        blocks.append(history.past_states[-k] if k <= history.fill else np.zeros(history.n_x))
    for k in range(1, history.length + 1):
        blocks.append(history.past_actions[-k] if k <= history.fill else np.zeros(history.n_u))
    return np.concatenate(blocks)


def augmented_jacobian(
    model: DynamicsModel, state: Array, action: Array, history: HistoryWindow
) -> tuple[Array, Array]:
    """Jacobians of the history-augmented transition, shapes (n_z, n_z), (n_z, n_u).

    The augmented state is z_t = [x_t, x_{t-1}, .., x_{t-H}, u_{t-1}, .., u_{t-H}].
    Row block 0 carries the network partials (plus the identity skip on x_t);
    every other row block is an exact shift: old states/actions move one slot
    down and the current action enters the newest action slot through B.
    """
    if model.history_len == 0:
        raise DimensionError(
            "model has history_len=0; the augmented transition is the plain one, use jacobians()"
        )
    _check_call_dims(model, state, action, history)
    n_x, n_u, h = model.n_x, model.n_u, model.history_len
    n_z = augmented_state_dim(model)
    v = _normalized_input(model, state, action, history)
    jac = _mlp_jacobian(model, v)

    def xblock(k: int) -> slice:
        return slice(k * n_x, (k + 1) * n_x)

    def ublock(k: int) -> slice:  # k = 1..H
        return slice((h + 1) * n_x + (k - 1) * n_u, (h + 1) * n_x + k * n_u)

    a_aug = np.zeros((n_z, n_z))
    b_aug = np.zeros((n_z, n_u))

    # row block 0: partials of x_{t+1}
    for k in range(h + 1):
        if k > history.fill and k > 0:
            continue  # masked input slot: exact zero sensitivity
        s = model.state_slice(k)
        jx = (model.out_std[:, None] * jac[:, s]) / model.in_std[s][None, :]
        xk = np.asarray(state, dtype=np.float64) if k == 0 else history.past_states[-k]
        block = jx @ state_feature_jacobian(xk, model.angle_idx)
        if k == 0:
            block = block + np.eye(n_x)
        a_aug[xblock(0), xblock(k)] = block
    for k in range(1, h + 1):
        if k > history.fill:
            continue
        s = model.action_slice(k)
        a_aug[xblock(0), ublock(k)] = (model.out_std[:, None] * jac[:, s]) / model.in_std[s][None, :]
    su = model.action_slice(0)
    b_aug[xblock(0), :] = (model.out_std[:, None] * jac[:, su]) / model.in_std[su][None, :]

    # shift blocks (exact identities)
    for k in range(1, h + 1):
        a_aug[xblock(k), xblock(k - 1)] = np.eye(n_x)
    b_aug[ublock(1), :] = np.eye(n_u)
    for k in range(2, h + 1):
        a_aug[ublock(k), ublock(k - 1)] = np.eye(n_u)
    return a_aug, b_aug


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TransitionSample:
    """One supervised pair: flattened raw model input -> state increment."""

    input: Array
    target: Array


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    epochs: int = 200
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    validation_fraction: float = 0.1
    rng_seed: int = 0
    hidden_sizes: tuple[int, ...] = (64, 64)

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError(
                f"validation_fraction must be in (0, 1), got {self.validation_fraction}"
            )
        if not self.hidden_sizes or any(s < 1 for s in self.hidden_sizes):
            raise ValueError(f"need at least one positive hidden size, got {self.hidden_sizes}")


@dataclass
class TrainReport:
    train_loss: list[float]
    val_loss: list[float]
    n_train: int
    n_val: int

    @property
    def final_val_rmse(self) -> float:
        """Held-out one-step RMSE in normalized output units."""
        return float(np.sqrt(self.val_loss[-1]))


def _init_params(
    sizes: tuple[int, ...], rng: np.random.Generator
) -> tuple[list[Array], list[Array]]:
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return weights, biases


def _mse_and_grads(
    weights: list[Array], biases: list[Array], x: Array, y: Array
) -> tuple[float, list[Array], list[Array]]:
    last = len(weights) - 1
    acts = [x]
    z = x
    for k, (w, b) in enumerate(zip(weights, biases)):
        z = z @ w.T + b
        if k < last:
            z = np.tanh(z)
        acts.append(z)
    diff = acts[-1] - y
    loss = float(np.mean(diff * diff))
    delta = 2.0 * diff / diff.size
    d_w = [np.empty(0)] * len(weights)
    d_b = [np.empty(0)] * len(weights)
    for k in range(last, -1, -1):
        d_w[k] = delta.T @ acts[k]
        d_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ weights[k]) * (1.0 - acts[k] * acts[k])
    return loss, d_w, d_b


def _batch_mse(weights: list[Array], biases: list[Array], x: Array, y: Array) -> float:
    z = x
    last = len(weights) - 1
    for k, (w, b) in enumerate(zip(weights, biases)):
        z = z @ w.T + b
        if k < last:
            z = np.tanh(z)
    return float(np.mean((z - y) ** 2))


def train(
    dataset: list[TransitionSample],
    config: TrainConfig,
    *,
    n_x: int,
    n_u: int,
    history_len: int = 0,
    angle_idx: tuple[int, ...] = (),
) -> tuple[DynamicsModel, TrainReport]:
    """Fit the increment predictor with Adam on standardized in/out pairs.

    Normalizers are estimated on the training split only; the validation
    split is scored with those same normalizers.  Deterministic for a fixed
    ``rng_seed``.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    x = np.stack([np.asarray(s.input, dtype=np.float64) for s in dataset])
    y = np.stack([np.asarray(s.target, dtype=np.float64) for s in dataset])
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("dataset contains non-finite values")
    d_in = feature_dim(n_x, angle_idx) * (history_len + 1) + n_u * (history_len + 1)
    if x.shape[1] != d_in:
        raise DimensionError(f"sample input length {x.shape[1]}, expected {d_in}")
    if y.shape[1] != n_x:
        raise DimensionError(f"sample target length {y.shape[1]}, expected {n_x}")

    rng = np.random.default_rng(config.rng_seed)
    perm = rng.permutation(len(dataset))
    n_val = min(max(1, int(round(len(dataset) * config.validation_fraction))), len(dataset) - 1)
    if len(dataset) < 2:
        raise ValueError("need at least 2 samples to hold out a validation split")
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    in_mean = x[train_idx].mean(axis=0)
    in_std = np.maximum(x[train_idx].std(axis=0), 1e-8)
    out_mean = y[train_idx].mean(axis=0)
    out_std = np.maximum(y[train_idx].std(axis=0), 1e-8)
    xn = (x - in_mean) / in_std
    yn = (y - out_mean) / out_std
    x_tr, y_tr = xn[train_idx], yn[train_idx]
    x_va, y_va = xn[val_idx], yn[val_idx]

    sizes = (d_in,) + tuple(config.hidden_sizes) + (n_x,)
    weights, biases = _init_params(sizes, rng)
    m_w = [np.zeros_like(w) for w in weights]
    v_w = [np.zeros_like(w) for w in weights]
    m_b = [np.zeros_like(b) for b in biases]
    v_b = [np.zeros_like(b) for b in biases]
    b1, b2, eps, lr = config.adam_beta1, config.adam_beta2, config.adam_epsilon, config.learning_rate

    report = TrainReport(train_loss=[], val_loss=[], n_train=len(train_idx), n_val=len(val_idx))
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(train_idx))
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            _, d_w, d_b = _mse_and_grads(weights, biases, x_tr[idx], y_tr[idx])
            step += 1
            c1 = 1.0 - b1**step
            c2 = 1.0 - b2**step
            for k in range(len(weights)):
                m_w[k] = b1 * m_w[k] + (1 - b1) * d_w[k]
                v_w[k] = b2 * v_w[k] + (1 - b2) * d_w[k] ** 2
                weights[k] = weights[k] - lr * (m_w[k] / c1) / (np.sqrt(v_w[k] / c2) + eps)
                m_b[k] = b1 * m_b[k] + (1 - b1) * d_b[k]
                v_b[k] = b2 * v_b[k] + (1 - b2) * d_b[k] ** 2
                biases[k] = biases[k] - lr * (m_b[k] / c1) / (np.sqrt(v_b[k] / c2) + eps)
        report.train_loss.append(_batch_mse(weights, biases, x_tr, y_tr))
        report.val_loss.append(_batch_mse(weights, biases, x_va, y_va))

    model = DynamicsModel(
        n_x=n_x,
        n_u=n_u,
        history_len=history_len,
        angle_idx=tuple(angle_idx),
        weights=tuple(weights),
        biases=tuple(biases),
        in_mean=in_mean,
        in_std=in_std,
        out_mean=out_mean,
        out_std=out_std,
    )
    return model, report


# --------------------------------------------------------------------------
# persistence


def save(model: DynamicsModel, path: str | Path) -> None:
    parts = [MODEL_MAGIC]
    parts.append(
        struct.pack(
            "<6I",
            model.n_x,
            model.n_u,
            model.history_len,
            _ACTIVATION_TANH,
            len(model.angle_idx),
            len(model.weights),
        )
    )
    if model.angle_idx:
        parts.append(struct.pack(f"<{len(model.angle_idx)}I", *model.angle_idx))
    sizes = model.layer_sizes
    parts.append(struct.pack(f"<{len(sizes)}I", *sizes))
    for arr in (model.in_mean, model.in_std, model.out_mean, model.out_std):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"truncated file: ran out of bytes reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def uints(self, n: int, what: str) -> tuple[int, ...]:
        return struct.unpack(f"<{n}I", self.take(4 * n, what))

    def floats(self, n: int, what: str) -> Array:
        return np.frombuffer(self.take(8 * n, what), dtype="<f8").astype(np.float64)


def load(path: str | Path) -> DynamicsModel:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:7] != MODEL_MAGIC[:7]:
        raise ModelFormatError(f"bad magic {data[:8]!r}, expected {MODEL_MAGIC!r}")
    if data[7:8] != MODEL_MAGIC[7:8]:
        raise ModelFormatError(f"unsupported format version {data[7:8]!r}, expected b'1'")
    r = _Reader(data)
    r.take(8, "magic")
    n_x, n_u, history_len, activation, n_angles, n_layers = r.uints(6, "header")
    if activation != _ACTIVATION_TANH:
        raise ModelFormatError(f"unknown activation id {activation}")
    if n_layers < 1:
        raise ModelFormatError(f"n_layers must be >= 1, got {n_layers}")
    angle_idx = tuple(int(i) for i in r.uints(n_angles, "angle indices")) if n_angles else ()
    sizes = r.uints(n_layers + 1, "layer sizes")
    d_in = sizes[0]
    expected_in = (n_x + n_angles) * (history_len + 1) + n_u * (history_len + 1)
    if d_in != expected_in:
        raise ModelFormatError(
            f"declared input width {d_in} disagrees with dims "
            f"(n_x={n_x}, n_u={n_u}, H={history_len}, n_angles={n_angles}): expected {expected_in}"
        )
    in_mean = r.floats(d_in, "input mean")
    in_std = r.floats(d_in, "input std")
    out_mean = r.floats(n_x, "output mean")
    out_std = r.floats(n_x, "output std")
    weights, biases = [], []
    for k in range(n_layers):
        w = r.floats(sizes[k + 1] * sizes[k], f"layer {k} weights").reshape(sizes[k + 1], sizes[k])
        b = r.floats(sizes[k + 1], f"layer {k} bias")
        weights.append(w)
        biases.append(b)
    if r.pos != len(data):
        raise ModelFormatError(f"{len(data) - r.pos} trailing bytes after payload")
    try:
        return DynamicsModel(
            n_x=int(n_x),
            n_u=int(n_u),
            history_len=int(history_len),
            angle_idx=angle_idx,
            weights=tuple(weights),
            biases=tuple(biases),
            in_mean=in_mean,
            in_std=in_std,
            out_mean=out_mean,
            out_std=out_std,
        )
    except DimensionError as exc:
        raise ModelFormatError(f"dimension-inconsistent payload: {exc}") from exc


def random_model(
    n_x: int,
    n_u: int,
    history_len: int,
    hidden_sizes: tuple[int, ...],
    rng: np.random.Generator,
    angle_idx: tuple[int, ...] = (),
    weight_scale: float = 0.5,
) -> DynamicsModel:
    """Small random model; used by tests and sizing experiments."""
    d_in = feature_dim(n_x, angle_idx) * (history_len + 1) + n_u * (history_len + 1)
    sizes = (d_in,) + tuple(hidden_sizes) + (n_x,)
    weights = tuple(
        rng.normal(0.0, weight_scale / np.sqrt(a), size=(b, a))
        for a, b in zip(sizes[:-1], sizes[1:])
    )
    biases = tuple(rng.normal(0.0, 0.1, size=b) for b in sizes[1:])
    return DynamicsModel(
        n_x=n_x,
        n_u=n_u,
        history_len=history_len,
        angle_idx=tuple(angle_idx),
        weights=weights,
        biases=biases,
        in_mean=rng.normal(0.0, 0.3, size=d_in),
        in_std=rng.uniform(0.5, 2.0, size=d_in),
        out_mean=rng.normal(0.0, 0.05, size=n_x),
        out_std=rng.uniform(0.5, 2.0, size=n_x),
    )
