"""A small numpy engine for the six 1D-CNN regressors.

Feature maps are arrays of shape ``(positions, channels)``; batched code paths
carry a leading batch axis, ``(batch, positions, channels)``. Every network
ends in a linear regression head mapping the flattened map to one scalar.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DivergedError, ShapeError, UnknownArchitecture

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "linear")
DEFAULT_INPUT_LENGTH = 93


# ---------------------------------------------------------------------------
# layer specifications


def _check_activation(activation):
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")


@dataclass(frozen=True)
class Conv1D:
    kernel_size: int
    filters: int = 32
    activation: str = "relu"

    def __post_init__(self):
        if self.kernel_size < 1 or self.filters < 1:
            raise ValueError("kernel_size and filters must be >= 1")
        _check_activation(self.activation)


@dataclass(frozen=True)
class MaxPool:
    pool: int = 2

    def __post_init__(self):
        if self.pool < 1:
            raise ValueError("pool must be >= 1")


@dataclass(frozen=True)
class Dense:
    units: int = 16
    activation: str = "linear"

    def __post_init__(self):
        if self.units < 1:
            raise ValueError("units must be >= 1")
        _check_activation(self.activation)


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class RegressionHead:
    pass


LayerSpec = Union[Conv1D, MaxPool, Dense, Flatten, RegressionHead]
_LAYER_TYPES = {cls.__name__: cls for cls in (Conv1D, MaxPool, Dense, Flatten, RegressionHead)}


def layer_to_dict(layer) -> dict:
    return {"type": type(layer).__name__, **asdict(layer)}


def layer_from_dict(payload: dict):
    payload = dict(payload)
    cls = _LAYER_TYPES[payload.pop("type")]
    return cls(**payload)


def output_shape(layer, shape):
    """Shape after ``layer`` given an input ``shape`` ((L, C) or flat length)."""
    if isinstance(layer, RegressionHead):
        if not isinstance(shape, int):
            raise ShapeError("regression head expects a flattened input")
        return 1
    if isinstance(layer, Flatten):
        if isinstance(shape, int):
            raise ShapeError("flatten expects a 2D feature map")
        return shape[0] * shape[1]
    if isinstance(shape, int):
        raise ShapeError(f"{type(layer).__name__} expects a 2D feature map, got a vector")
    length, channels = shape
    if isinstance(layer, Conv1D):
        if length < layer.kernel_size:
            raise ShapeError(f"conv kernel {layer.kernel_size} longer than input length {length}")
        return (length - layer.kernel_size + 1, layer.filters)
    if isinstance(layer, MaxPool):
        if length < layer.pool:
            raise ShapeError(f"pool {layer.pool} longer than input length {length}")
        return (length // layer.pool, channels)
    if isinstance(layer, Dense):
        return (length, layer.units)
    raise TypeError(f"unknown layer {layer!r}")


# ---------------------------------------------------------------------------
# architectures

# Table-1 layer stacks; a regression head is appended by build_architecture.
_STACKS = {
    "A1": ("C-P-FC-FC", [Conv1D(20), MaxPool(2), Dense(16), Dense(16), Flatten()]),
    "A2": ("C-P-C-P-FC", [Conv1D(3), MaxPool(2), Conv1D(3), MaxPool(2), Dense(16), Flatten()]),
    "A3": ("C-P-C-P-FC", [Conv1D(5), MaxPool(2), Conv1D(5), MaxPool(2), Dense(16), Flatten()]),
    "A4": (
        "C-C-P-C-C-P-FC",
        [Conv1D(5), Conv1D(5), MaxPool(2), Conv1D(5), Conv1D(5), MaxPool(2), Dense(16), Flatten()],
    ),
    "A5": (
        "C-P-C-P-FC-FC",
        [Conv1D(5), MaxPool(2), Conv1D(5), MaxPool(2), Dense(16), Dense(16), Flatten()],
    ),
    "A6": (
        "C-P-C-P-C-P",
        [Conv1D(12), MaxPool(2), Conv1D(12), MaxPool(2), Conv1D(12), MaxPool(2), Flatten()],
    ),
}

# Published per-layer output shapes for a (93, 1) input.
TABLE1_SHAPES = {
    "A1": [(74, 32), (37, 32), (37, 16), (37, 16), 592],
    "A2": [(91, 32), (45, 32), (43, 32), (21, 32), (21, 16), 336],
    "A3": [(89, 32), (44, 32), (40, 32), (20, 32), (20, 16), 320],
    "A4": [(89, 32), (85, 32), (42, 32), (38, 32), (34, 32), (17, 32), (17, 16), 272],
    "A5": [(89, 32), (44, 32), (40, 32), (20, 32), (20, 16), (20, 16), 320],
    "A6": [(82, 32), (41, 32), (30, 32), (15, 32), (4, 32), (2, 32), 64],
}

ARCHITECTURE_IDS = tuple(_STACKS)


@dataclass(frozen=True)
class ArchitectureSpec:
    id: str
    name: str
    layers: tuple
    input_length: int = DEFAULT_INPUT_LENGTH

    @property
    def expected_shapes(self) -> list:
        """Published per-layer shapes (only defined for the 93-feature input)."""
        return list(TABLE1_SHAPES[self.id])

    def shapes(self, input_length: Optional[int] = None) -> list:
        """Propagated output shape of every layer, head included."""
        shape = (input_length or self.input_length, 1)
        out = []
        for layer in self.layers:
            shape = output_shape(layer, shape)
            out.append(shape)
        return out

    def is_feasible(self, input_length: int) -> bool:
        try:
            self.shapes(input_length)
        except ShapeError:
            return False
        return True

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "input_length": self.input_length,
            "layers": [layer_to_dict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ArchitectureSpec":
        return cls(
            id=payload["id"],
            name=payload["name"],
            layers=tuple(layer_from_dict(d) for d in payload["layers"]),
            input_length=payload["input_length"],
        )


def build_architecture(arch_id: str, input_length: int = DEFAULT_INPUT_LENGTH) -> ArchitectureSpec:
    if arch_id not in _STACKS:
        raise UnknownArchitecture(f"unknown architecture {arch_id!r}; expected one of {ARCHITECTURE_IDS}")
    name, stack = _STACKS[arch_id]
    spec = ArchitectureSpec(arch_id, name, tuple(stack) + (RegressionHead(),), input_length)
    spec.shapes()  # raises ShapeError when the input is too short
    return spec


# ---------------------------------------------------------------------------
# layer math


def _activate(z, activation):
    return np.maximum(z, 0.0) if activation == "relu" else z


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"feature map must be 2D (positions, channels), got shape {x.shape}")


def conv1d_forward(x, weight, bias, activation="linear"):
    """Valid, stride-1 cross-correlation.

    ``out[i, f] = act(bias[f] + sum_c sum_j weight[f, c, j] * x[i + j, c])``
    """
    out, _ = _conv1d(x, weight, bias, activation)
    return out


def _conv1d(x, weight, bias, activation):
    xb, squeeze = _batched(x)
    n_filters, channels, k = weight.shape
    if xb.shape[2] != channels:
        raise ShapeError(f"conv expects {channels} channels, got {xb.shape[2]}")
    if xb.shape[1] < k:
        raise ShapeError(f"conv kernel {k} longer than input length {xb.shape[1]}")
    patches = sliding_window_view(xb, k, axis=1)  # (B, L-k+1, C, k)
    z = np.tensordot(patches, weight, axes=([2, 3], [1, 2])) + bias
    out = _activate(z, activation)
    return (out[0] if squeeze else out), (patches, z)


def _conv1d_backward(dout, weight, activation, cache, input_length, need_input_grad=True):
    patches, z = cache
    dz = dout * (z > 0) if activation == "relu" else dout
    dweight = np.tensordot(dz, patches, axes=([0, 1], [0, 1]))
    dbias = dz.sum(axis=(0, 1))
    if not need_input_grad:
        return None, dweight, dbias
    batch, out_len, n_filters = dz.shape
    _, channels, k = weight.shape
    # (B, L-k+1, C, k): gradient w.r.t. every input patch
    dpatches = (dz.reshape(-1, n_filters) @ weight.reshape(n_filters, -1)).reshape(
        batch, out_len, channels, k
    )
    dx = np.zeros((batch, input_length, channels))
    for j in range(k):
        dx[:, j:j + out_len, :] += dpatches[:, :, :, j]
    return dx, dweight, dbias


def maxpool_forward(x, pool=2):
    """Non-overlapping window maximum; trailing positions that do not fill a
    window are dropped."""
    out, _ = _maxpool(x, pool)
    return out


def _maxpool(x, pool):
    xb, squeeze = _batched(x)
    batch, length, channels = xb.shape
    if length < pool:
        raise ShapeError(f"pool {pool} longer than input length {length}")
    out_len = length // pool
    windows = xb[:, : out_len * pool].reshape(batch, out_len, pool, channels)
    out = windows[:, :, 0, :].copy()
    arg = np.zeros(out.shape, dtype=np.intp)
    for j in range(1, pool):
        candidate = windows[:, :, j, :]
        better = candidate > out  # strict: the first maximum wins ties
        out[better] = candidate[better]
        arg[better] = j
    return (out[0] if squeeze else out), (arg, length)


def _maxpool_backward(dout, pool, cache):
    arg, length = cache
    batch, out_len, channels = dout.shape
    dx = np.zeros((batch, length, channels))
    dwin = dx[:, : out_len * pool].reshape(batch, out_len, pool, channels)
    for j in range(pool):
        dwin[:, :, j, :] = np.where(arg == j, dout, 0.0)
    return dx


def dense_forward(x, weight, bias, activation="linear"):
    """Position-wise affine map: ``out[t, u] = act(bias[u] + sum_c weight[u, c] * x[t, c])``."""
    out, _ = _dense(x, weight, bias, activation)
    return out


def _dense(x, weight, bias, activation):
    xb, squeeze = _batched(x)
    if xb.shape[2] != weight.shape[1]:
        raise ShapeError(f"dense expects {weight.shape[1]} channels, got {xb.shape[2]}")
    z = xb @ weight.T + bias
    out = _activate(z, activation)
    return (out[0] if squeeze else out), (xb, z)


def _dense_backward(dout, weight, activation, cache):
    xb, z = cache
    dz = dout * (z > 0) if activation == "relu" else dout
    dweight = np.tensordot(dz, xb, axes=([0, 1], [0, 1]))
    dbias = dz.sum(axis=(0, 1))
    return dz @ weight, dweight, dbias


def flatten(x):
    """Position-major flattening: element ``t * C + c`` is ``x[t, c]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x.reshape(-1)
    if x.ndim == 3:
        return x.reshape(x.shape[0], -1)
    raise ShapeError(f"flatten expects a 2D feature map, got shape {x.shape}")


# ---------------------------------------------------------------------------
# parameters


def init_params(spec: ArchitectureSpec, rng) -> list:
    """Glorot-uniform weights, zero biases. One dict per layer (empty when the
    layer has no parameters)."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params = []
    shape = (spec.input_length, 1)
    for layer in spec.layers:
        if isinstance(layer, Conv1D):
            c_in = shape[1]
            fan_in, fan_out = c_in * layer.kernel_size, layer.filters * layer.kernel_size
            w_shape, b_shape = (layer.filters, c_in, layer.kernel_size), (layer.filters,)
        elif isinstance(layer, Dense):
            fan_in, fan_out = shape[1], layer.units
            w_shape, b_shape = (layer.units, shape[1]), (layer.units,)
        elif isinstance(layer, RegressionHead):
            fan_in, fan_out = shape, 1
            w_shape, b_shape = (shape,), ()
        else:
            params.append({})
            shape = output_shape(layer, shape)
            continue
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params.append(
            {
                "weight": rng.uniform(-limit, limit, size=w_shape),
                "bias": np.zeros(b_shape),
            }
        )
        shape = output_shape(layer, shape)
    return params


def zeros_like_params(params) -> list:
    return [{k: np.zeros_like(v) for k, v in p.items()} for p in params]


# ---------------------------------------------------------------------------
# forward / backward


def _as_batch(spec, inputs):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :, None]
    elif x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or x.shape[1] != spec.input_length or x.shape[2] != 1:
        raise ShapeError(
            f"{spec.id} expects inputs of length {spec.input_length}, got shape {np.shape(inputs)}"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs contain NaN or Inf")
    return x


def forward_batch(spec: ArchitectureSpec, params, inputs, keep_cache=False):
    """Predictions for a batch of shape (B, L) or (B, L, 1)."""
    a = _as_batch(spec, inputs)
    caches = []
    for layer, p in zip(spec.layers, params):
        if isinstance(layer, Conv1D):
            a, cache = _conv1d(a, p["weight"], p["bias"], layer.activation)
            cache = cache + (a.shape[1] + layer.kernel_size - 1,)
        elif isinstance(layer, MaxPool):
            a, cache = _maxpool(a, layer.pool)
        elif isinstance(layer, Dense):
            a, cache = _dense(a, p["weight"], p["bias"], layer.activation)
        elif isinstance(layer, Flatten):
            cache = a.shape
            a = a.reshape(a.shape[0], -1)
        elif isinstance(layer, RegressionHead):
            cache = a
            a = a @ p["weight"] + p["bias"]
        else:
            raise TypeError(f"unknown layer {layer!r}")
        if keep_cache:
            caches.append(cache)
    return (a, caches) if keep_cache else a


def forward(spec: ArchitectureSpec, params, inputs) -> float:
    """Scalar prediction for one input vector of length ``spec.input_length``."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 2 and x.shape[1] == 1:
        x = x[:, 0]
    if x.ndim != 1:
        raise ShapeError(f"forward expects a single input, got shape {np.shape(inputs)}")
    return float(forward_batch(spec, params, x[None])[0])


def backward(spec: ArchitectureSpec, params, inputs, targets):
    """Gradients of the batch mean squared error.

    Returns ``(grads, mse)`` where ``grads`` mirrors the structure of
    ``params``.
    """
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(y) == 0:
        raise ShapeError("empty batch")
    pred, caches = forward_batch(spec, params, inputs, keep_cache=True)
    if len(pred) != len(y):
        raise ShapeError(f"{len(pred)} inputs but {len(y)} targets")
    err = pred - y
    mse = float(np.mean(err * err))
    grad = 2.0 * err / len(y)
    grads = [None] * len(spec.layers)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, p, cache = spec.layers[i], params[i], caches[i]
        if isinstance(layer, RegressionHead):
            grads[i] = {"weight": cache.T @ grad, "bias": np.asarray(grad.sum())}
            grad = np.outer(grad, p["weight"])
        elif isinstance(layer, Flatten):
            grads[i] = {}
            grad = grad.reshape(cache)
        elif isinstance(layer, Dense):
            grad, dw, db = _dense_backward(grad, p["weight"], layer.activation, cache)
            grads[i] = {"weight": dw, "bias": db}
        elif isinstance(layer, MaxPool):
            grads[i] = {}
            grad = _maxpool_backward(grad, layer.pool, cache)
        elif isinstance(layer, Conv1D):
            patches, z, in_len = cache
            grad, dw, db = _conv1d_backward(
                grad, p["weight"], layer.activation, (patches, z), in_len, need_input_grad=i > 0
            )
            grads[i] = {"weight": dw, "bias": db}
    return grads, mse


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, params, lr=1e-3):
        self.params = params
        self.lr = lr

    def step(self, grads):
        for p, g in zip(self.params, grads):
            for key in p:
                p[key] -= self.lr * g[key]


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = zeros_like_params(params)
        self.v = zeros_like_params(params)

    def step(self, grads):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            for key in p:
                m[key] = b1 * m[key] + (1.0 - b1) * g[key]
                v[key] = b2 * v[key] + (1.0 - b2) * g[key] * g[key]
                p[key] -= self.lr * (m[key] / c1) / (np.sqrt(v[key] / c2) + self.eps)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    shuffle: bool = True
    # fit a z-scored target, then fold the scale back into the head
    target_scaling: bool = True
    # loss above this is treated as divergence even while still finite
    max_loss: float = 1e12

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if int(self.batch_size) < 1 or int(self.epochs) < 1:
            raise ValueError("batch_size and epochs must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        unknown = set(payload) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**payload)


def _check_loss(loss, config, epoch, batch):
    if not math.isfinite(loss) or loss > config.max_loss:
        raise DivergedError(epoch, batch, loss)


def _fold_target_scale(params, mean, scale):
    out = [{k: v.copy() for k, v in p.items()} for p in params]
    head = out[-1]
    head["weight"] *= scale
    head["bias"] = head["bias"] * scale + mean
    return out


def train(
    spec: ArchitectureSpec,
    table,
    config: TrainConfig,
    on_epoch: Optional[Callable[[dict], None]] = None,
):
    """Mini-batch training on the MSE loss.

    Returns ``(params, history)``. ``history`` holds one entry per epoch with
    the MAE and MSE of the model on the full training table after that epoch,
    so re-scoring the returned parameters reproduces the last entry exactly.
    """
    if len(table) == 0:
        raise ValueError("cannot train on an empty table")
    if table.schema.input_length != spec.input_length:
        raise ShapeError(
            f"{spec.id} built for {spec.input_length} features, table has {table.schema.input_length}"
        )
    X = table.features
    y = table.target
    if config.target_scaling:
        y_mean, y_scale = float(y.mean()), float(y.std())
        if y_scale == 0:
            y_scale = 1.0
    else:
        y_mean, y_scale = 0.0, 1.0
    y_fit = (y - y_mean) / y_scale

    rng = np.random.default_rng(config.seed)
    params = init_params(spec, rng)
    opt = OPTIMIZERS[config.optimizer](params, lr=config.learning_rate)
    n = len(y)
    history = []
    final = params
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        with np.errstate(over="ignore", invalid="ignore"):
            for b, start in enumerate(range(0, n, config.batch_size)):
                idx = order[start:start + config.batch_size]
                grads, loss = backward(spec, params, X[idx], y_fit[idx])
                _check_loss(loss, config, epoch, b)
                opt.step(grads)
            final = _fold_target_scale(params, y_mean, y_scale) if config.target_scaling else params
            pred = predict_array(spec, final, X)
            err = pred - y
            entry = {
                "epoch": epoch,
                "train_mae": float(np.mean(np.abs(err))),
                "train_mse": float(np.mean(err * err)),
            }
        _check_loss(entry["train_mse"], config, epoch, "end")
        history.append(entry)
        logger.info("%s epoch %d: train_mae=%.6f train_mse=%.6g", spec.id, epoch,
                    entry["train_mae"], entry["train_mse"])
        if on_epoch is not None:
            on_epoch(entry)
    if final is params:
        final = [{k: v.copy() for k, v in p.items()} for p in params]
    return final, history


def predict_array(spec: ArchitectureSpec, params, X, batch_size: int = 1024) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"expected a (rows, features) matrix, got shape {X.shape}")
    out = np.empty(len(X))
    for start in range(0, len(X), batch_size):
        out[start:start + batch_size] = forward_batch(spec, params, X[start:start + batch_size])
    return out


def predict(spec: ArchitectureSpec, params, table) -> np.ndarray:
    if table.schema.input_length != spec.input_length:
        raise ShapeError(
            f"{spec.id} built for {spec.input_length} features, table has {table.schema.input_length}"
        )
    return predict_array(spec, params, table.features)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    spec: ArchitectureSpec
    params: list
    schema_fingerprint: str = ""
    train_config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)


def _encode_array(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def _decode_array(d) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def checkpoint_to_dict(ckpt: Checkpoint) -> dict:
    return {
        "architecture": ckpt.spec.id,
        "spec": ckpt.spec.to_dict(),
        "schema_fingerprint": ckpt.schema_fingerprint,
        "layers": [{k: _encode_array(v) for k, v in p.items()} for p in ckpt.params],
        "train_config": ckpt.train_config,
        "metrics": ckpt.metrics,
    }


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_text(json.dumps(checkpoint_to_dict(ckpt)), encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    spec = ArchitectureSpec.from_dict(payload["spec"])
    params = [{k: _decode_array(v) for k, v in layer.items()} for layer in payload["layers"]]
    return Checkpoint(
        spec=spec,
        params=params,
        schema_fingerprint=payload.get("schema_fingerprint", ""),
        train_config=payload.get("train_config", {}),
        metrics=payload.get("metrics", {}),
    )
