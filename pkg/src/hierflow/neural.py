"""Small fully connected regressors in numpy, with Adam/RMSprop/SGD training.

Inputs and outputs are z-scored with statistics from the training rows; the
loss is the mean squared error in normalized output units.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

log = logging.getLogger(__name__)

ACTIVATIONS = ("linear", "relu", "tanh", "sigmoid")
OPTIMIZERS = ("sgd", "rmsprop", "adam")
SCALE_FLOOR = 1e-9


class TrainingDivergedError(RuntimeError):
    pass


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "linear":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "linear":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    raise ValueError(f"unknown activation {name!r}")


def default_hidden(n_in: int, n_out: int) -> int:
    return int(min(256, max(8, math.ceil(2 * (n_in + n_out) / 3))))


@dataclass(frozen=True)
class MlpConfig:
    hidden_neurons: int | None = None  # None: default_hidden() times hidden_scale
    hidden_scale: float = 1.0
    hidden_layers: int = 1
    activation_hidden: str = "tanh"
    activation_output: str = "linear"
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.hidden_neurons is not None and self.hidden_neurons < 1:
            raise ValueError("hidden_neurons must be >= 1")
        if not 0 <= self.hidden_layers <= 3:
            raise ValueError("hidden_layers must be in 0..3")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.activation_hidden not in ACTIVATIONS or self.activation_output not in ACTIVATIONS:
            raise ValueError("unknown activation")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def hidden_width(self, n_in: int, n_out: int) -> int:
        if self.hidden_neurons is not None:
            return self.hidden_neurons
        return max(1, int(round(default_hidden(n_in, n_out) * self.hidden_scale)))

    def layer_sizes(self, n_in: int, n_out: int) -> list[int]:
        h = self.hidden_width(n_in, n_out)
        return [n_in] + [h] * self.hidden_layers + [n_out]


@dataclass(frozen=True, eq=False)
class MlpModel:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray
    config: MlpConfig
    x_min: np.ndarray | None = None
    x_max: np.ndarray | None = None
    y_fixed: np.ndarray | None = None  # bool mask of outputs constant over training

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def activations(self) -> list[str]:
        n = len(self.weights)
        return [self.config.activation_hidden] * (n - 1) + [self.config.activation_output]

    def normalize_x(self, x):
        return (x - self.x_mean) / self.x_scale

    def denormalize_y(self, yn):
        return yn * self.y_scale + self.y_mean

    def normalize_y(self, y):
        return (y - self.y_mean) / self.y_scale


@dataclass
class TrainReport:
    loss: list[float]
    val_mae: dict[str, float]  # per output group, original units
    val_mae_norm: float  # mean |error| over all outputs in normalized units
    train_time: float
    warnings: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def init_params(sizes: Sequence[int], rng: np.random.Generator) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Glorot-uniform weights, zero biases."""
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out)) if fan_in + fan_out else 0.0
        ws.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return ws, bs


def forward(weights, biases, activations, xn: np.ndarray) -> np.ndarray:
    a = xn
    for w, b, act in zip(weights, biases, activations):
        a = _act(act, a @ w + b)
    return a


def mse_loss_and_grad(weights, biases, activations, xn: np.ndarray, yn: np.ndarray):
    """Mean squared error over all entries and its gradients w.r.t. every parameter."""
    zs, acts = [], [xn]
    a = xn
    for w, b, act in zip(weights, biases, activations):
        z = a @ w + b
        a = _act(act, z)
        zs.append(z)
        acts.append(a)
    diff = a - yn
    loss = float(np.mean(diff * diff))
    delta = 2.0 * diff / diff.size
    gw = [None] * len(weights)
    gb = [None] * len(weights)
    for k in range(len(weights) - 1, -1, -1):
        delta = delta * _act_grad(activations[k], zs[k], acts[k + 1])
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k:
            delta = delta @ weights[k].T
    return loss, gw, gb


class _Optimizer:
    def __init__(self, name: str, lr: float, params: list[np.ndarray]):
        self.name = name
        self.lr = lr
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        lr = self.lr
        if self.name == "sgd":
            for p, g in zip(params, grads):
                p -= lr * g
        elif self.name == "rmsprop":
            rho, eps = 0.9, 1e-7
            for p, g, v in zip(params, grads, self.v):
                v *= rho
                v += (1 - rho) * g * g
                p -= lr * g / (np.sqrt(v) + eps)
        else:
            b1, b2, eps = 0.9, 0.999, 1e-8
            c1 = 1 - b1**self.t
            c2 = 1 - b2**self.t
            for p, g, m, v in zip(params, grads, self.m, self.v):
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _flat_columns(a: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return std <= SCALE_FLOOR * np.maximum(1.0, np.abs(mean))


def _fit_scale(a: np.ndarray, what: str, warnings: list[str]) -> tuple[np.ndarray, np.ndarray]:
    mean = a.mean(axis=0) if a.shape[0] else np.zeros(a.shape[1])
    std = a.std(axis=0) if a.shape[0] else np.ones(a.shape[1])
    flat = _flat_columns(a, mean, std)
    if np.any(flat):
        msg = f"{int(flat.sum())} zero-variance {what} column(s) {np.flatnonzero(flat).tolist()}; scale floored to 1"
        warnings.append(msg)
        log.debug(msg)
    return mean, np.where(flat, 1.0, std)


def output_groups(legend) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for k, s in enumerate(legend):
        groups.setdefault(s.quantity, []).append(k)
    return groups


def train_mlp(ds, cfg: MlpConfig = MlpConfig()) -> tuple[MlpModel, TrainReport]:
    """Fit a model to ``ds.train`` rows; evaluate on ``ds.test`` rows."""
    x = np.asarray(ds.inputs, dtype=float)
    y = np.asarray(ds.outputs, dtype=float)
    tr = np.asarray(ds.train, dtype=int)
    if tr.size == 0:
        raise ValueError("dataset has no training rows")
    t0 = time.perf_counter()
    warnings: list[str] = []
    x_mean, x_scale = _fit_scale(x[tr], "input", warnings)
    y_mean, y_scale = _fit_scale(y[tr], "output", warnings)
    xn = (x[tr] - x_mean) / x_scale
    yn = (y[tr] - y_mean) / y_scale

    rng = np.random.default_rng(cfg.seed)
    sizes = cfg.layer_sizes(x.shape[1], y.shape[1])
    ws, bs = init_params(sizes, rng)
    acts = [cfg.activation_hidden] * cfg.hidden_layers + [cfg.activation_output]
    params = ws + bs
    opt = _Optimizer(cfg.optimizer, cfg.learning_rate, params)
    n = tr.size
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, gw, gb = mse_loss_and_grad(ws, bs, acts, xn[idx], yn[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch + 1}")
            opt.step(params, gw + gb)
            total += loss * idx.size
        losses.append(total / n)
    model = MlpModel(
        tuple(ws),
        tuple(bs),
        x_mean,
        x_scale,
        y_mean,
        y_scale,
        cfg,
        x[tr].min(axis=0) if x.shape[1] else np.zeros(0),
        x[tr].max(axis=0) if x.shape[1] else np.zeros(0),
        _flat_columns(y[tr], y_mean, y[tr].std(axis=0)),
    )
    if not all(np.all(np.isfinite(w)) for w in ws):
        raise TrainingDivergedError("non-finite weights after training")
    train_time = time.perf_counter() - t0

    te = np.asarray(ds.test, dtype=int)
    val_mae: dict[str, float] = {}
    val_norm = float("nan")
    if te.size:
        pred = predict_mlp(model, x[te], check_range=False)
        err = np.abs(pred - y[te])
        for name, cols in output_groups(ds.output_legend).items():
            val_mae[name] = float(err[:, cols].mean())
        val_norm = float(np.mean(np.abs(model.normalize_y(pred) - model.normalize_y(y[te]))))
    return model, TrainReport(losses, val_mae, val_norm, train_time, warnings)


def predict_mlp(m: MlpModel, inputs, check_range: bool = True) -> np.ndarray:
    """Denormalized predictions, one row per input row."""
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != m.n_in:
        raise ValueError(f"model expects {m.n_in} inputs, got {x.shape[1]}")
    if check_range and m.x_min is not None and x.size:
        outside = np.any((x < m.x_min) | (x > m.x_max), axis=1)
        if outside.any():
            log.warning("extrapolation: %d of %d rows outside the training input range", int(outside.sum()), len(x))
    yn = forward(m.weights, m.biases, m.activations, (x - m.x_mean) / m.x_scale)
    y = yn * m.y_scale + m.y_mean
    if m.y_fixed is not None and m.y_fixed.any():
        # a column that never varied in training (e.g. an absent phase) is reproduced exactly
        y[:, m.y_fixed] = m.y_mean[m.y_fixed]
    return y


def extrapolation_rows(m: MlpModel, inputs) -> np.ndarray:
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    return np.flatnonzero(np.any((x < m.x_min) | (x > m.x_max), axis=1))


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------


@dataclass
class GridResult:
    config: MlpConfig
    val_mae: float  # normalized units, comparable across configs
    report: TrainReport


def expand_grid(grid: dict[str, Sequence[Any]], base: MlpConfig = MlpConfig()) -> list[MlpConfig]:
    """Cartesian product of option lists applied on top of ``base``."""
    keys = list(grid)
    for k in keys:
        if not len(grid[k]):
            raise ValueError(f"empty option list for {k!r}")
    return [replace(base, **dict(zip(keys, combo))) for combo in itertools.product(*(grid[k] for k in keys))]


def grid_search(ds, grid: dict[str, Sequence[Any]], base: MlpConfig = MlpConfig(), workers: int = 1) -> list[GridResult]:
    """Train every configuration of the grid; rank by validation MAE ascending."""
    configs = expand_grid(grid, base)

    def run(cfg):
        try:
            _, rep = train_mlp(ds, cfg)
        except TrainingDivergedError as exc:
            rep = TrainReport([], {}, float("inf"), 0.0, [str(exc)])
        return GridResult(cfg, rep.val_mae_norm, rep)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, configs))
    else:
        results = [run(c) for c in configs]
    # stable sort keeps grid order among ties
    return sorted(results, key=lambda r: (math.isnan(r.val_mae), r.val_mae))


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def model_to_dict(m: MlpModel) -> dict:
    return {
        "config": asdict(m.config),
        "weights": [w.tolist() for w in m.weights],
        "biases": [b.tolist() for b in m.biases],
        "shapes": [list(w.shape) for w in m.weights],
        "x_mean": m.x_mean.tolist(),
        "x_scale": m.x_scale.tolist(),
        "y_mean": m.y_mean.tolist(),
        "y_scale": m.y_scale.tolist(),
        "x_min": None if m.x_min is None else m.x_min.tolist(),
        "x_max": None if m.x_max is None else m.x_max.tolist(),
        "y_fixed": None if m.y_fixed is None else m.y_fixed.tolist(),
    }


def model_from_dict(d: dict) -> MlpModel:
    weights = tuple(np.array(w, dtype=float).reshape(s) for w, s in zip(d["weights"], d["shapes"]))
    return MlpModel(
        weights,
        tuple(np.array(b, dtype=float) for b in d["biases"]),
        np.array(d["x_mean"], dtype=float),
        np.array(d["x_scale"], dtype=float),
        np.array(d["y_mean"], dtype=float),
        np.array(d["y_scale"], dtype=float),
        MlpConfig(**d["config"]),
        None if d.get("x_min") is None else np.array(d["x_min"], dtype=float),
        None if d.get("x_max") is None else np.array(d["x_max"], dtype=float),
        None if d.get("y_fixed") is None else np.array(d["y_fixed"], dtype=bool),
    )


def save_model(m: MlpModel, path: Path | str) -> None:
    # json writes floats with repr(), the shortest string that round-trips exactly
    Path(path).write_text(json.dumps(model_to_dict(m)) + "\n")


def load_model(path: Path | str) -> MlpModel:
    return model_from_dict(json.loads(Path(path).read_text()))
