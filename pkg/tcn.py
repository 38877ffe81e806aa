"""
Dilated causal 1-D convolutional network in plain numpy.

Forward pass, exact backpropagation, Adadelta updates, the mini-batch
training loop and one-step-ahead prediction. Everything runs in float64.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from errors import ConfigError, DataError, TrainingDivergedError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "linear")
TARGET_MODES = ("sequence", "last")
WEIGHTS_FORMAT_VERSION = 1


@dataclass
class ConvLayer:
    weights: np.ndarray  # (filters_out, filters_in, kernel)
    biases: np.ndarray  # (filters_out,)
    dilation: int = 1
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.biases = np.array(self.biases, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ValueError(f"weights must be [out, in, kernel], got shape {self.weights.shape}")
        if self.biases.shape != (self.weights.shape[0],):
            raise ValueError(f"biases must have shape ({self.weights.shape[0]},), got {self.biases.shape}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be positive, got {self.dilation}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def filters_out(self):
        return self.weights.shape[0]

    @property
    def filters_in(self):
        return self.weights.shape[1]

    @property
    def kernel(self):
        return self.weights.shape[2]

    @property
    def n_params(self):
        return self.weights.size + self.biases.size


@dataclass
class TcnModel:
    layers: list
    input_length: int = 64
    _token: object = field(default_factory=object, repr=False, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        if self.layers[0].filters_in != 1 or self.layers[-1].filters_out != 1:
            raise ValueError("the network maps one input channel to one output channel")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.filters_out != nxt.filters_in:
                raise ValueError(f"channel mismatch between layers: {prev.filters_out} -> {nxt.filters_in}")

    @property
    def receptive_field(self):
        return 1 + sum((layer.kernel - 1) * layer.dilation for layer in self.layers)

    @property
    def n_params(self):
        return sum(layer.n_params for layer in self.layers)

    def parameters(self):
        """[W_1, b_1, W_2, b_2, ...] in layer order."""
        params = []
        for layer in self.layers:
            params.extend([layer.weights, layer.biases])
        return params

    def with_parameters(self, params):
        if len(params) != 2 * len(self.layers):
            raise ValueError(f"expected {2 * len(self.layers)} parameter arrays, got {len(params)}")
        layers = [
            ConvLayer(params[2 * i], params[2 * i + 1], layer.dilation, layer.activation)
            for i, layer in enumerate(self.layers)
        ]
        return TcnModel(layers, self.input_length)

    def parameter_norms(self):
        return [float(np.sqrt(np.sum(l.weights ** 2) + np.sum(l.biases ** 2))) for l in self.layers]


def parameter_count(model):
    return model.n_params


def receptive_field(model):
    return model.receptive_field


def build_standard_tcn(seed=0, n_hidden=6, filters=8, kernel=2, input_length=64):
    """6 dilated causal layers (dilation 2^(l-1), ReLU) + a width-1 linear output layer.

    Weights are Glorot-uniform, biases zero.
    """
    rng = np.random.default_rng(seed)
    layers = []
    channels_in = 1
    for level in range(n_hidden):
        limit = math.sqrt(6.0 / (channels_in * kernel + filters * kernel))
        layers.append(
            ConvLayer(
                weights=rng.uniform(-limit, limit, size=(filters, channels_in, kernel)),
                biases=np.zeros(filters),
                dilation=2 ** level,
                activation="relu",
            )
        )
        channels_in = filters
    limit = math.sqrt(6.0 / (channels_in + 1))
    layers.append(
        ConvLayer(rng.uniform(-limit, limit, size=(1, channels_in, 1)), np.zeros(1), 1, "linear")
    )
    return TcnModel(layers, input_length)


# --- Forward ---

def _delay(x, steps):
    """Shift along time by ``steps`` with zeros on the past side."""
    if steps == 0:
        return x
    out = np.zeros_like(x)
    if steps < x.shape[-1]:
        out[..., steps:] = x[..., : x.shape[-1] - steps]
    return out


def _conv_linear(x, layer):
    z = np.zeros((x.shape[0], layer.filters_out, x.shape[-1]))
    z += layer.biases[None, :, None]
    k, d = layer.kernel, layer.dilation
    for j in range(k):
        z += layer.weights[:, :, j] @ _delay(x, (k - 1 - j) * d)
    return z


def _activate(z, activation):
    return np.maximum(z, 0.0) if activation == "relu" else z


def causal_conv1d(inputs, layer):
    """One causal dilated convolution + activation.

    ``inputs`` is [channels_in, T] or [batch, channels_in, T]; the output keeps T.
    """
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected [channels, T] or [batch, channels, T], got shape {x.shape}")
    if x.shape[1] != layer.filters_in:
        raise ValueError(f"layer expects {layer.filters_in} input channels, got {x.shape[1]}")
    if x.shape[-1] == 0:
        raise ValueError("cannot convolve an empty sequence")
    out = _activate(_conv_linear(x, layer), layer.activation)
    return out[0] if single else out


@dataclass(frozen=True)
class Tape:
    token: object
    layer_inputs: tuple
    pre_activations: tuple
    single: bool


def forward(model, inputs):
    """Run the network on one [T] sequence or a [batch, T] stack."""
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != model.input_length:
        raise ValueError(f"expected input length {model.input_length}, got shape {np.shape(inputs)}")

    h = x[:, None, :]
    layer_inputs, pre_activations = [], []
    for layer in model.layers:
        layer_inputs.append(h)
        z = _conv_linear(h, layer)
        pre_activations.append(z)
        h = _activate(z, layer.activation)
    output = h[:, 0, :]
    tape = Tape(model._token, tuple(layer_inputs), tuple(pre_activations), single)
    return (output[0] if single else output), tape


# --- Losses ---

def _check_pair(output, target):
    output = np.asarray(output, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if output.shape != target.shape:
        raise ValueError(f"output {output.shape} and target {target.shape} differ in shape")
    return output, target


def mse_loss_seq(output, target):
    output, target = _check_pair(output, target)
    return float(np.mean((output - target) ** 2))


def mse_loss_seq_grad(output, target):
    output, target = _check_pair(output, target)
    return 2.0 * (output - target) / output.size


def last_position_loss(output, scalar_target):
    """MSE on the final output position only; ``output`` is [batch, T]."""
    output = np.atleast_2d(np.asarray(output, dtype=np.float64))
    scalar_target = np.atleast_1d(np.asarray(scalar_target, dtype=np.float64))
    if scalar_target.shape != (output.shape[0],):
        raise ValueError("one scalar target per sequence is required")
    return float(np.mean((output[:, -1] - scalar_target) ** 2))


def last_position_loss_grad(output, scalar_target):
    output = np.atleast_2d(np.asarray(output, dtype=np.float64))
    scalar_target = np.atleast_1d(np.asarray(scalar_target, dtype=np.float64))
    grad = np.zeros_like(output)
    grad[:, -1] = 2.0 * (output[:, -1] - scalar_target) / output.shape[0]
    return grad


# --- Backward ---

def backward(model, tape, grad_output):
    """Exact gradients of the loss w.r.t. every parameter, in ``parameters()`` order."""
    if tape.token is not model._token or len(tape.pre_activations) != len(model.layers):
        raise ValueError("tape was recorded on a different model or parameter state")
    g = np.asarray(grad_output, dtype=np.float64)
    if tape.single:
        g = g[None]
    batch, length = tape.layer_inputs[0].shape[0], tape.layer_inputs[0].shape[-1]
    if g.shape != (batch, length):
        raise ValueError(f"loss gradient must have shape {(batch, length)}, got {g.shape}")

    grads = [None] * (2 * len(model.layers))
    delta = g[:, None, :]
    for idx in reversed(range(len(model.layers))):
        layer = model.layers[idx]
        x = tape.layer_inputs[idx]
        z = tape.pre_activations[idx]
        dz = delta * (z > 0) if layer.activation == "relu" else delta

        d_weights = np.empty_like(layer.weights)
        dx = np.zeros_like(x) if idx > 0 else None
        k, d = layer.kernel, layer.dilation
        for j in range(k):
            steps = (k - 1 - j) * d
            d_weights[:, :, j] = np.einsum("bot,bct->oc", dz, _delay(x, steps))
            if dx is not None and steps < length:
                back = layer.weights[:, :, j].T @ dz
                dx[..., : length - steps] += back[..., steps:]
        grads[2 * idx] = d_weights
        grads[2 * idx + 1] = dz.sum(axis=(0, 2))
        delta = dx
    return grads


# --- Adadelta ---

@dataclass
class AdadeltaState:
    rho: float = 0.95
    epsilon: float = 1e-6
    sq_grad: list = field(default_factory=list)
    sq_update: list = field(default_factory=list)
    steps: int = 0
    skipped: int = 0

    @classmethod
    def for_params(cls, params, rho=0.95, epsilon=1e-6):
        return cls(
            rho=rho,
            epsilon=epsilon,
            sq_grad=[np.zeros_like(p, dtype=np.float64) for p in params],
            sq_update=[np.zeros_like(p, dtype=np.float64) for p in params],
        )


def adadelta_step(params, grads, state):
    """One Adadelta update; returns (new_params, new_state) and leaves inputs untouched.

    E[g^2] <- rho E[g^2] + (1 - rho) g^2
    dx     <- -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
    E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameter arrays but {len(grads)} gradients")
    if not state.sq_grad:
        state = AdadeltaState.for_params(params, state.rho, state.epsilon)
    for p, g, acc in zip(params, grads, state.sq_grad):
        if np.shape(p) != np.shape(g) or np.shape(p) != np.shape(acc):
            raise ValueError(f"shape mismatch: parameter {np.shape(p)}, gradient {np.shape(g)}")

    if not all(np.all(np.isfinite(g)) for g in grads):
        logger.warning("Non-finite gradient at Adadelta step %d; step skipped", state.steps + 1)
        return list(params), AdadeltaState(
            state.rho, state.epsilon, state.sq_grad, state.sq_update, state.steps, state.skipped + 1
        )

    rho, eps = state.rho, state.epsilon
    new_params, sq_grad, sq_update = [], [], []
    for p, g, eg, ex in zip(params, grads, state.sq_grad, state.sq_update):
        eg = rho * eg + (1.0 - rho) * g * g
        delta = -np.sqrt(ex + eps) / np.sqrt(eg + eps) * g
        ex = rho * ex + (1.0 - rho) * delta * delta
        new_params.append(p + delta)
        sq_grad.append(eg)
        sq_update.append(ex)
    return new_params, AdadeltaState(rho, eps, sq_grad, sq_update, state.steps + 1, state.skipped)


# --- Training ---

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    seed: int = 0
    loss: str = "mse"
    target_mode: str = "sequence"
    shuffle_each_epoch: bool = True
    rho: float = 0.95
    epsilon: float = 1e-6
    log_every: int = 25

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss != "mse":
            raise ConfigError(f"unsupported loss {self.loss!r}")
        if self.target_mode not in TARGET_MODES:
            raise ConfigError(f"target_mode must be one of {TARGET_MODES}")
        if not 0.0 < self.rho < 1.0 or not self.epsilon > 0:
            raise ConfigError("Adadelta needs 0 < rho < 1 and epsilon > 0")


def _batch_loss(output, dataset, idx, target_mode):
    if target_mode == "sequence":
        target = dataset.targets[idx]
        return mse_loss_seq(output, target), mse_loss_seq_grad(output, target)
    target = dataset.scalar_targets[idx]
    return last_position_loss(output, target), last_position_loss_grad(output, target)


def train(model, dataset, cfg, on_epoch: Optional[Callable[[int, float], None]] = None):
    """Mini-batch Adadelta on the sequence loss; returns (trained model, per-epoch mean loss)."""
    n = len(dataset)
    if n == 0:
        raise DataError("cannot train on an empty dataset")
    if dataset.window_len != model.input_length:
        raise ValueError(f"dataset windows have length {dataset.window_len}, model expects {model.input_length}")

    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = AdadeltaState.for_params(params, cfg.rho, cfg.epsilon)
    n_batches = math.ceil(n / cfg.batch_size)
    history = []

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if cfg.shuffle_each_epoch else np.arange(n)
        total = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            output, tape = forward(model, dataset.inputs[idx])
            loss, grad = _batch_loss(output, dataset, idx, cfg.target_mode)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, b, model.parameter_norms(), loss)
            params, state = adadelta_step(params, backward(model, tape, grad), state)
            model = model.with_parameters(params)
            total += loss * idx.size
        mean_loss = total / n
        history.append(mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
        if epoch == 1 or epoch % cfg.log_every == 0 or epoch == cfg.epochs:
            logger.info("epoch %d/%d  mean loss %.6g", epoch, cfg.epochs, mean_loss)

    if state.skipped:
        logger.warning("%d Adadelta step(s) skipped for non-finite gradients", state.skipped)
    return model, history


# --- Prediction ---

def predict_batch(model, windows, mean, std):
    """Next-step forecasts for raw [n, T] windows, in raw units."""
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    windows = np.atleast_2d(np.asarray(windows, dtype=np.float64))
    output, _ = forward(model, (windows - mean) / std)
    return output[:, model.input_length - 1] * std + mean


def predict_next(model, window, mean, std):
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (model.input_length,):
        raise ValueError(f"expected a window of length {model.input_length}, got shape {window.shape}")
    return float(predict_batch(model, window[None], mean, std)[0])


# --- Weight files ---

def save_weights(model, path):
    """Write a versioned .npz: header arrays, then all weights/biases flattened row-major in layer order."""
    specs = np.array(
        [[l.kernel, l.dilation, l.filters_in, l.filters_out] for l in model.layers], dtype=np.int64
    )
    flat = np.concatenate([np.concatenate([l.weights.ravel(order="C"), l.biases]) for l in model.layers])
    with open(path, "wb") as fh:
        np.savez(
            fh,
            format_version=np.int64(WEIGHTS_FORMAT_VERSION),
            layer_count=np.int64(len(model.layers)),
            layer_specs=specs,
            activations=np.array([l.activation for l in model.layers]),
            input_length=np.int64(model.input_length),
            parameters=flat,
        )
    return path


def load_weights(path):
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != WEIGHTS_FORMAT_VERSION:
            raise DataError(f"{path}: unsupported weight format version {version}")
        specs = data["layer_specs"]
        activations = [str(a) for a in data["activations"]]
        flat = data["parameters"]
        input_length = int(data["input_length"])
        if int(data["layer_count"]) != len(specs):
            raise DataError(f"{path}: layer count does not match the layer table")

    layers, offset = [], 0
    for (kernel, dilation, filters_in, filters_out), activation in zip(specs, activations):
        n_weights = int(filters_out * filters_in * kernel)
        if offset + n_weights + int(filters_out) > flat.size:
            raise DataError(f"{path}: parameter block is shorter than the layer table needs")
        weights = flat[offset:offset + n_weights].reshape(int(filters_out), int(filters_in), int(kernel))
        offset += n_weights
        biases = flat[offset:offset + int(filters_out)]
        offset += int(filters_out)
        layers.append(ConvLayer(weights, biases, int(dilation), activation))
    if offset != flat.size:
        raise DataError(f"{path}: parameter block has {flat.size} values, layer table needs {offset}")
    return TcnModel(layers, input_length)
