"""Feed-forward phon regressor: 61-150-150-150-1 with ReLU hidden layers.

Everything is plain NumPy: He-uniform init, exact backpropagation for
the mean-squared-error loss, bias-corrected Adam, and a seeded
mini-batch loop whose shuffling depends only on (seed, epoch index) so
an interrupted run resumed from a checkpoint is bit-identical to an
uninterrupted one.  Parameters are float32; loss and bias-gradient
reductions accumulate in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .errors import DivergenceError, FormatError

LAYER_DIMS = (61, 150, 150, 150, 1)
HIDDEN_ACTIVATION = "relu"
OUTPUT_ACTIVATION = "linear"

# maps the 0-100 dB working range onto roughly [-1, 1]
NORM_OFFSET = -50.0
NORM_SCALE = 1.0 / 50.0

MODEL_MAGIC = b"LDNN"
MODEL_VERSION = 1
OPT_MAGIC = b"LOPT"
OPT_VERSION = 1


@dataclass
class MlpModel:
    """Layer parameters plus the input normalization baked into the file format."""

    dims: tuple[int, ...]
    weights: list[np.ndarray]  # (fan_in, fan_out) per layer
    biases: list[np.ndarray]
    norm_offset: np.ndarray  # added to the raw input
    norm_scale: np.ndarray  # then multiplied
    activations: tuple[str, ...] = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n_layers = len(self.dims) - 1
        if not self.activations:
            self.activations = (HIDDEN_ACTIVATION,) * (n_layers - 1) + (OUTPUT_ACTIVATION,)
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ValueError("layer count mismatch")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.dims[i], self.dims[i + 1]) or b.shape != (self.dims[i + 1],):
                raise ValueError(f"layer {i} shape mismatch: {w.shape}, {b.shape}")
        if self.activations[-1] != OUTPUT_ACTIVATION or \
                any(a != HIDDEN_ACTIVATION for a in self.activations[:-1]):
            raise ValueError("hidden layers must be relu, output linear")
        if not all(np.all(np.isfinite(a)) for a in self.weights + self.biases):
            raise ValueError("parameters must be finite")

    @property
    def dtype(self):
        return self.weights[0].dtype

    def copy(self) -> "MlpModel":
        return MlpModel(dims=self.dims,
                        weights=[w.copy() for w in self.weights],
                        biases=[b.copy() for b in self.biases],
                        norm_offset=self.norm_offset.copy(),
                        norm_scale=self.norm_scale.copy(),
                        activations=self.activations,
                        metadata=dict(self.metadata))


class Gradients(NamedTuple):
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class TrainConfig:
    """Adam hyperparameters (library defaults) and the epoch schedule."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 256
    epoch_schedule: tuple[int, ...] = (220, 780)
    shuffle_seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1/beta2 must lie in (0, 1)")
        if self.learning_rate <= 0.0 or self.batch_size < 1:
            raise ValueError("learning_rate must be > 0 and batch_size >= 1")
        if any(e <= 0 for e in self.epoch_schedule):
            raise ValueError("epoch schedule entries must be positive")

    def checkpoint_epochs(self, start_epoch: int = 0) -> list[int]:
        return list(start_epoch + np.cumsum(self.epoch_schedule))


@dataclass
class AdamState:
    """First/second-moment accumulators mirroring the model parameters."""

    m_weights: list[np.ndarray]
    v_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_biases: list[np.ndarray]
    t: int = 0


def init_model(seed: int, dims: tuple[int, ...] = LAYER_DIMS,
               dtype=np.float32) -> MlpModel:
    """He-uniform weights (variance 2/fan_in), zero biases, seeded."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpModel(dims=tuple(dims), weights=weights, biases=biases,
                    norm_offset=np.full(dims[0], NORM_OFFSET, dtype=dtype),
                    norm_scale=np.full(dims[0], NORM_SCALE, dtype=dtype),
                    metadata={"init_seed": int(seed)})


def _normalize(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=model.dtype)
    if x.ndim != 2 or x.shape[1] != model.dims[0]:
        raise ValueError(f"batch must be (n, {model.dims[0]}), got {x.shape}")
    return (x + model.norm_offset) * model.norm_scale


def forward(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    """Predicted phon values, one per batch row."""
    a = _normalize(model, batch)
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = a @ w + b
        if i < last:
            np.maximum(a, 0.0, out=a)
    return a[:, 0]


def compiled_forward(model: MlpModel, max_batch: int) -> Callable[[np.ndarray], np.ndarray]:
    """Closure over preallocated buffers for the inference hot path."""
    bufs = [np.empty((max_batch, d), dtype=model.dtype) for d in model.dims[1:]]
    xbuf = np.empty((max_batch, model.dims[0]), dtype=model.dtype)
    weights, biases = model.weights, model.biases
    offset, scale = model.norm_offset, model.norm_scale
    last = len(weights) - 1

    def run(batch: np.ndarray) -> np.ndarray:
        n = batch.shape[0]
        xn = xbuf[:n]
        np.add(batch, offset, out=xn)
        np.multiply(xn, scale, out=xn)
        a = xn
        for i, (w, b) in enumerate(zip(weights, biases)):
            out = bufs[i][:n]
            np.matmul(a, w, out=out)
            out += b
            if i < last:
                np.maximum(out, 0.0, out=out)
            a = out
        return a[:, 0]

    return run


def fuse_normalization(model: MlpModel) -> MlpModel:
    """Fold the input normalization into the first layer (identity norm)."""
    fused = model.copy()
    w0 = model.weights[0].astype(np.float64)
    scale = model.norm_scale.astype(np.float64)
    offset = model.norm_offset.astype(np.float64)
    fused.weights[0] = (scale[:, None] * w0).astype(model.dtype)
    fused.biases[0] = (model.biases[0].astype(np.float64) + (offset * scale) @ w0) \
        .astype(model.dtype)
    fused.norm_offset = np.zeros_like(model.norm_offset)
    fused.norm_scale = np.ones_like(model.norm_scale)
    return fused


def loss_mse(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared difference, accumulated in float64."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError("prediction/target length mismatch")
    if pred.size == 0:
        raise ValueError("empty vectors have no mean squared error")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.mean(diff * diff))


def backward(model: MlpModel, batch: np.ndarray,
             targets: np.ndarray) -> tuple[Gradients, float]:
    """Exact gradients of the mean-squared error; returns (grads, batch loss).

    The ReLU subgradient at 0 is taken as 0.  Raises DivergenceError
    naming the first layer whose activations go non-finite.
    """
    x = _normalize(model, batch)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (x.shape[0],):
        raise ValueError("targets must be one value per batch row")
    last = len(model.weights) - 1
    acts = [x]
    masks = []
    a = x
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        if not np.all(np.isfinite(z)):
            raise DivergenceError(f"non-finite activations in layer {i}")
        if i < last:
            mask = z > 0.0
            masks.append(mask)
            a = np.where(mask, z, 0.0)
        else:
            a = z
        acts.append(a)
    pred = acts[-1][:, 0].astype(np.float64)
    diff = pred - targets
    loss = float(np.mean(diff * diff))
    n = x.shape[0]
    delta = ((2.0 / n) * diff).astype(model.dtype)[:, None]
    grad_w = [None] * len(model.weights)
    grad_b = [None] * len(model.biases)
    for i in range(last, -1, -1):
        grad_w[i] = acts[i].T @ delta
        grad_b[i] = delta.sum(axis=0, dtype=np.float64).astype(model.dtype)
        if i > 0:
            delta = (delta @ model.weights[i].T) * masks[i - 1]
    return Gradients(weights=grad_w, biases=grad_b), loss


def init_adam_state(model: MlpModel) -> AdamState:
    return AdamState(
        m_weights=[np.zeros_like(w) for w in model.weights],
        v_weights=[np.zeros_like(w) for w in model.weights],
        m_biases=[np.zeros_like(b) for b in model.biases],
        v_biases=[np.zeros_like(b) for b in model.biases],
        t=0)


def adam_step(model: MlpModel, grads: Gradients, state: AdamState,
              config: TrainConfig) -> tuple[MlpModel, AdamState]:
    """One bias-corrected Adam update, in place; increments the step counter."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    params = model.weights + model.biases
    grad_list = grads.weights + grads.biases
    moments = list(zip(state.m_weights + state.m_biases,
                       state.v_weights + state.v_biases))
    for p, g, (m, v) in zip(params, grad_list, moments):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
    return model, state


@dataclass
class TrainResult:
    model: MlpModel
    state: AdamState
    loss_log: list[tuple[int, float]]  # (epoch number, mean training MSE)


def train(dataset, config: TrainConfig, model: MlpModel | None = None,
          state: AdamState | None = None, start_epoch: int = 0,
          epochs: int | None = None, init_seed: int = 0,
          on_checkpoint: Callable[[int, MlpModel, AdamState], None] | None = None,
          log_fn: Callable[[str], None] | None = None) -> TrainResult:
    """Mini-batch Adam over the schedule, with deterministic per-epoch shuffles.

    `dataset` is anything with .spectra/.labels (or an (X, y) pair).
    Checkpoints fire at cumulative schedule boundaries; a divergent (non-
    finite) loss raises DivergenceError after the last good checkpoint.
    """
    if hasattr(dataset, "spectra"):
        X, y = dataset.spectra, dataset.labels
    else:
        X, y = dataset
    X = np.ascontiguousarray(X, dtype=np.float32)
    y = np.ascontiguousarray(y, dtype=np.float32)
    if len(X) == 0:
        raise ValueError("training dataset is empty")
    if model is None:
        model = init_model(init_seed)
    if state is None:
        state = init_adam_state(model)
    total = sum(config.epoch_schedule) if epochs is None else epochs
    boundaries = set(config.checkpoint_epochs(start_epoch))
    loss_log: list[tuple[int, float]] = []
    n = len(X)
    for epoch in range(start_epoch, start_epoch + total):
        perm = np.random.default_rng((config.shuffle_seed, epoch)).permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            grads, batch_loss = backward(model, X[idx], y[idx])
            if not np.isfinite(batch_loss):
                raise DivergenceError(
                    f"training loss became non-finite in epoch {epoch + 1}")
            adam_step(model, grads, state, config)
            epoch_loss += batch_loss * len(idx)
        loss_log.append((epoch + 1, epoch_loss / n))
        if log_fn is not None:
            log_fn(f"epoch {epoch + 1}: mse {epoch_loss / n:.6f}")
        if (epoch + 1) in boundaries and on_checkpoint is not None:
            model.metadata["epochs_trained"] = epoch + 1
            on_checkpoint(epoch + 1, model, state)
    model.metadata["epochs_trained"] = start_epoch + total
    return TrainResult(model=model, state=state, loss_log=loss_log)


# -- persistence ------------------------------------------------------------


def save_model(path: str | Path, model: MlpModel) -> None:
    """LDNN container: dims, normalization, row-major float32 params, JSON trailer."""
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<HH", MODEL_VERSION, len(model.dims)))
        f.write(struct.pack(f"<{len(model.dims)}I", *model.dims))
        f.write(model.norm_offset.astype("<f4").tobytes())
        f.write(model.norm_scale.astype("<f4").tobytes())
        for w, b in zip(model.weights, model.biases):
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            f.write(b.astype("<f4").tobytes())
        f.write(json.dumps(model.metadata, sort_keys=True).encode())


def _read_exact(f, nbytes: int, what: str) -> bytes:
    raw = f.read(nbytes)
    if len(raw) != nbytes:
        raise FormatError(f"truncated model file while reading {what}")
    return raw


def load_model(path: str | Path) -> MlpModel:
    """Inverse of save_model; verifies magic, version, and sizes."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MODEL_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        version, n_dims = struct.unpack("<HH", _read_exact(f, 4, "version"))
        if version != MODEL_VERSION:
            raise FormatError(f"{path}: unsupported model version {version}")
        dims = struct.unpack(f"<{n_dims}I", _read_exact(f, 4 * n_dims, "dims"))
        norm_offset = np.frombuffer(_read_exact(f, 4 * dims[0], "norm offset"), "<f4").copy()
        norm_scale = np.frombuffer(_read_exact(f, 4 * dims[0], "norm scale"), "<f4").copy()
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = np.frombuffer(_read_exact(f, 4 * fan_in * fan_out, "weights"), "<f4")
            weights.append(w.reshape(fan_in, fan_out).copy())
            biases.append(np.frombuffer(_read_exact(f, 4 * fan_out, "biases"), "<f4").copy())
        trailer = f.read()
    metadata = json.loads(trailer) if trailer else {}
    return MlpModel(dims=tuple(dims), weights=weights, biases=biases,
                    norm_offset=norm_offset, norm_scale=norm_scale,
                    metadata=metadata)


def save_adam_state(path: str | Path, state: AdamState, model: MlpModel) -> None:
    """Optimizer sidecar so checkpoints resume bit-identically."""
    with open(path, "wb") as f:
        f.write(OPT_MAGIC)
        f.write(struct.pack("<HHQ", OPT_VERSION, len(model.dims), state.t))
        f.write(struct.pack(f"<{len(model.dims)}I", *model.dims))
        for arrs in (state.m_weights, state.v_weights, state.m_biases, state.v_biases):
            for a in arrs:
                f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_adam_state(path: str | Path, model: MlpModel) -> AdamState:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != OPT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        version, n_dims, t = struct.unpack("<HHQ", _read_exact(f, 12, "header"))
        if version != OPT_VERSION:
            raise FormatError(f"{path}: unsupported optimizer version {version}")
        dims = struct.unpack(f"<{n_dims}I", _read_exact(f, 4 * n_dims, "dims"))
        if tuple(dims) != tuple(model.dims):
            raise FormatError(f"{path}: optimizer dims {dims} do not match model")
        state = init_adam_state(model)
        for arrs in (state.m_weights, state.v_weights, state.m_biases, state.v_biases):
            for i, a in enumerate(arrs):
                raw = _read_exact(f, 4 * a.size, "moments")
                arrs[i] = np.frombuffer(raw, "<f4").reshape(a.shape).copy()
        state.t = t
    return state
