"""From-scratch differentiable stack for the spectral shape regressor.

Layers operate on plain numpy arrays, channels-first (B, C, L) for the
convolutional stage and (B, F) after flattening. Each layer caches what its
backward pass needs; gradients accumulate into per-parameter buffers.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BatchTooSmallError,
    InvalidInputError,
    StateError,
    TrainingDivergedError,
)
from .geometry import MarkerShape

N_INPUT_CHANNELS = 3
N_INPUT_LENGTH = 190
N_OUTPUTS = 60  # 20 markers x 3 relative coordinates, mm


# ---------------------------------------------------------------------------
# layer specs


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class PoolSpec:
    kernel: int
    stride: int | None = None  # default: stride = kernel

    @property
    def effective_stride(self):
        return self.kernel if self.stride is None else self.stride


@dataclass(frozen=True)
class BatchNormSpec:
    momentum: float = 0.1
    eps: float = 1e-5


@dataclass(frozen=True)
class DropoutSpec:
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise InvalidInputError("dropout probability must be in [0, 1)")


@dataclass(frozen=True)
class DenseSpec:
    units: int


@dataclass(frozen=True)
class ReluSpec:
    pass


@dataclass(frozen=True)
class FlattenSpec:
    pass


INIT_SCHEMES = (
    "standard",
    "xavier_uniform",
    "xavier_normal",
    "kaiming_uniform",
    "kaiming_normal",
)


@dataclass(frozen=True)
class ModelConfig:
    """Layer stack plus initialization scheme; input is fixed at 3 x 190."""

    layers: tuple
    init_scheme: str = "standard"

    def __post_init__(self):
        if self.init_scheme not in INIT_SCHEMES:
            raise InvalidInputError(f"unknown init scheme {self.init_scheme!r}")
        if not self.layers or not isinstance(self.layers[-1], DenseSpec):
            raise InvalidInputError("stack must end in a dense layer")
        if self.layers[-1].units != N_OUTPUTS:
            raise InvalidInputError(f"output layer must have {N_OUTPUTS} units")


def _init_weights(shape, fan_in, fan_out, scheme, rng, dtype):
    if scheme == "standard":
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, shape)
    elif scheme == "xavier_uniform":
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, shape)
    elif scheme == "xavier_normal":
        w = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), shape)
    elif scheme == "kaiming_uniform":
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, shape)
    else:  # kaiming_normal
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    return w.astype(dtype)


# ---------------------------------------------------------------------------
# layers


class _Layer:
    """Base: no parameters, no state."""

    def params(self):
        return {}

    def grads(self):
        return {}

    def forward(self, x, train_mode, rng):
        raise NotImplementedError

    def backward(self, d):
        raise NotImplementedError


class Conv1D(_Layer):
    """Same-padded 1D convolution via im2col; output length ceil(L/stride)."""

    def __init__(self, in_channels, spec: ConvSpec, scheme, rng, dtype):
        self.spec = spec
        k = spec.kernel
        fan_in = in_channels * k
        self.W = _init_weights((spec.out_channels, fan_in), fan_in, spec.out_channels * k, scheme, rng, dtype)
        self.b = np.zeros(spec.out_channels, dtype=dtype)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self.in_channels = in_channels
        self._cache = None

    def params(self):
        return {"W": self.W, "b": self.b}

    def grads(self):
        return {"W": self.gW, "b": self.gb}

    def out_length(self, L):
        return -(-L // self.spec.stride)

    def _pad(self, L):
        k, s = self.spec.kernel, self.spec.stride
        total = max((self.out_length(L) - 1) * s + k - L, 0)
        return total // 2, total - total // 2

    def forward(self, x, train_mode, rng):
        B, C, L = x.shape
        k, s = self.spec.kernel, self.spec.stride
        left, right = self._pad(L)
        xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
        Lo = self.out_length(L)
        idx = np.arange(Lo)[:, None] * s + np.arange(k)[None, :]  # (Lo, k)
        cols = xp[:, :, idx]  # (B, C, Lo, k)
        cols = cols.transpose(0, 2, 1, 3).reshape(B, Lo, C * k)
        y = cols @ self.W.T + self.b
        self._cache = (cols, (B, C, L), left, idx)
        return y.transpose(0, 2, 1)  # (B, Cout, Lo)

    def backward(self, d):
        cols, (B, C, L), left, idx = self._cache
        dy = d.transpose(0, 2, 1)  # (B, Lo, Cout)
        self.gW += dy.reshape(-1, dy.shape[-1]).T @ cols.reshape(-1, cols.shape[-1])
        self.gb += dy.sum(axis=(0, 1))
        dcols = dy @ self.W  # (B, Lo, C*k)
        k = self.spec.kernel
        dcols = dcols.reshape(B, -1, C, k).transpose(0, 2, 1, 3)  # (B, C, Lo, k)
        Lp = L + left + (self._pad(L)[1])
        dxp = np.zeros((B, C, Lp), dtype=d.dtype)
        np.add.at(dxp, (slice(None), slice(None), idx), dcols)
        return dxp[:, :, left : left + L]


class MaxPool1D(_Layer):
    """Floor-semantics pooling without padding."""

    def __init__(self, spec: PoolSpec):
        self.spec = spec
        self._cache = None

    def out_length(self, L):
        return (L - self.spec.kernel) // self.spec.effective_stride + 1

    def forward(self, x, train_mode, rng):
        B, C, L = x.shape
        k, s = self.spec.kernel, self.spec.effective_stride
        Lo = self.out_length(L)
        idx = np.arange(Lo)[:, None] * s + np.arange(k)[None, :]
        windows = x[:, :, idx]  # (B, C, Lo, k)
        arg = np.argmax(windows, axis=3)
        y = np.take_along_axis(windows, arg[..., None], axis=3)[..., 0]
        self._cache = (arg, idx, x.shape)
        return y

    def backward(self, d):
        arg, idx, shape = self._cache
        B, C, L = shape
        dx = np.zeros(shape, dtype=d.dtype)
        # Input-axis position of each window's max: window start + offset.
        pos = idx[:, 0][None, None, :] + arg
        b_i, c_i, o_i = np.meshgrid(
            np.arange(B), np.arange(C), np.arange(arg.shape[2]), indexing="ij"
        )
        np.add.at(dx, (b_i, c_i, pos), d)
        return dx


class BatchNorm1D(_Layer):
    """Per-channel normalization on (B, C, L) or per-feature on (B, F)."""

    def __init__(self, n_features, spec: BatchNormSpec, dtype):
        self.spec = spec
        self.gamma = np.ones(n_features, dtype=dtype)
        self.beta = np.zeros(n_features, dtype=dtype)
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)
        self.running_mean = np.zeros(n_features, dtype=dtype)
        self.running_var = np.ones(n_features, dtype=dtype)
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.ggamma, "beta": self.gbeta}

    def _to2d(self, x):
        if x.ndim == 3:
            B, C, L = x.shape
            return x.transpose(0, 2, 1).reshape(B * L, C)
        return x

    def _from2d(self, y, shape):
        if len(shape) == 3:
            B, C, L = shape
            return y.reshape(B, L, C).transpose(0, 2, 1)
        return y

    def forward(self, x, train_mode, rng):
        shape = x.shape
        x2 = self._to2d(x)
        if train_mode:
            if shape[0] < 2:
                raise BatchTooSmallError("batch normalization needs at least 2 samples")
            mean = x2.mean(axis=0)
            var = x2.var(axis=0)
            m = self.spec.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean
            self.running_var = (1 - m) * self.running_var + m * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.spec.eps)
        xhat = (x2 - mean) * inv_std
        y = xhat * self.gamma + self.beta
        self._cache = (xhat, inv_std, shape, train_mode)
        return self._from2d(y, shape)

    def backward(self, d):
        xhat, inv_std, shape, train_mode = self._cache
        d2 = self._to2d(d)
        self.ggamma += (d2 * xhat).sum(axis=0)
        self.gbeta += d2.sum(axis=0)
        dxhat = d2 * self.gamma
        if train_mode:
            n = d2.shape[0]
            dx2 = (
                inv_std
                / n
                * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            )
        else:
            dx2 = dxhat * inv_std
        return self._from2d(dx2, shape)


class Dropout(_Layer):
    """Inverted scaling: eval mode is the identity."""

    def __init__(self, spec: DropoutSpec):
        self.spec = spec
        self._mask = None

    def forward(self, x, train_mode, rng):
        if not train_mode or self.spec.p == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.spec.p
        self._mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, d):
        return d if self._mask is None else d * self._mask


class Relu(_Layer):
    def forward(self, x, train_mode, rng):
        self._mask = x > 0
        return x * self._mask

    def backward(self, d):
        return d * self._mask


class Flatten(_Layer):
    def forward(self, x, train_mode, rng):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, d):
        return d.reshape(self._shape)


class Dense(_Layer):
    def __init__(self, in_features, spec: DenseSpec, scheme, rng, dtype):
        self.W = _init_weights((in_features, spec.units), in_features, spec.units, scheme, rng, dtype)
        self.b = np.zeros(spec.units, dtype=dtype)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._cache = None

    def params(self):
        return {"W": self.W, "b": self.b}

    def grads(self):
        return {"W": self.gW, "b": self.gb}

    def forward(self, x, train_mode, rng):
        self._cache = x
        return x @ self.W + self.b

    def backward(self, d):
        x = self._cache
        self.gW += x.T @ d
        self.gb += d.sum(axis=0)
        return d @ self.W.T


# ---------------------------------------------------------------------------
# model


class Model:
    """Sequential stack built from a ModelConfig."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.layers = []
        self.shape_trace = []  # per-layer output shapes, excluding batch
        shape = (N_INPUT_CHANNELS, N_INPUT_LENGTH)  # (C, L) or (F,)
        for spec in config.layers:
            if isinstance(spec, ConvSpec):
                layer = Conv1D(shape[0], spec, config.init_scheme, rng, self.dtype)
                shape = (spec.out_channels, layer.out_length(shape[1]))
            elif isinstance(spec, PoolSpec):
                layer = MaxPool1D(spec)
                shape = (shape[0], layer.out_length(shape[1]))
            elif isinstance(spec, BatchNormSpec):
                layer = BatchNorm1D(shape[0] if len(shape) == 2 else shape[0], spec, self.dtype)
            elif isinstance(spec, DropoutSpec):
                layer = Dropout(spec)
            elif isinstance(spec, DenseSpec):
                if len(shape) != 1:
                    raise InvalidInputError("dense layer requires flattened input")
                layer = Dense(shape[0], spec, config.init_scheme, rng, self.dtype)
                shape = (spec.units,)
            elif isinstance(spec, ReluSpec):
                layer = Relu()
            elif isinstance(spec, FlattenSpec):
                layer = Flatten()
                shape = (shape[0] * shape[1],)
            else:
                raise InvalidInputError(f"unknown layer spec {spec!r}")
            self.layers.append(layer)
            self.shape_trace.append(shape)
        self.output_shape = shape
        self._forward_done = False
        self._dropout_rng = np.random.default_rng(seed ^ 0x5EED)

    def seed_dropout(self, seed: int):
        self._dropout_rng = np.random.default_rng(seed)

    def forward(self, x, train_mode=False):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[1:] != (N_INPUT_CHANNELS, N_INPUT_LENGTH):
            raise InvalidInputError(
                f"input must be (B, {N_INPUT_CHANNELS}, {N_INPUT_LENGTH})"
            )
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("non-finite input")
        for layer in self.layers:
            x = layer.forward(x, train_mode, self._dropout_rng)
        self._forward_done = train_mode
        return x

    def backward(self, dout):
        if not self._forward_done:
            raise StateError("backward requires a preceding train-mode forward pass")
        d = np.asarray(dout, dtype=self.dtype)
        for layer in reversed(self.layers):
            d = layer.backward(d)
        self._forward_done = False
        return d

    def zero_grads(self):
        for layer in self.layers:
            for g in layer.grads().values():
                g[...] = 0.0

    def named_params(self):
        """Stable iteration of (name, param, grad) across the stack."""
        for i, layer in enumerate(self.layers):
            grads = layer.grads()
            for key, p in layer.params().items():
                yield f"layer{i}.{key}", p, grads[key]

    def state_dict(self):
        state = {name: p.copy() for name, p, _ in self.named_params()}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm1D):
                state[f"layer{i}.running_mean"] = layer.running_mean.copy()
                state[f"layer{i}.running_var"] = layer.running_var.copy()
        return state

    def load_state_dict(self, state):
        for name, p, _ in self.named_params():
            p[...] = state[name]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm1D):
                layer.running_mean = state[f"layer{i}.running_mean"].copy()
                layer.running_var = state[f"layer{i}.running_var"].copy()


def _conv_block(channels, stride=1):
    return [ConvSpec(channels, 3, stride), ReluSpec()]


def _dense_block(units):
    return [DenseSpec(units), ReluSpec()]


def architecture_layers(fc_width: int) -> tuple:
    """The fixed topology with a configurable dense width."""
    layers = [
        BatchNormSpec(),
        *_conv_block(16),
        PoolSpec(3, 2),
        *_conv_block(16),
        PoolSpec(2),
        *_conv_block(32),
        PoolSpec(3, 2),
        *_conv_block(32, stride=2),
        PoolSpec(3),
        *_conv_block(256),
        BatchNormSpec(),
        PoolSpec(2, 2),
        FlattenSpec(),
        *_dense_block(fc_width),
        BatchNormSpec(),
        DropoutSpec(0.37),
        *_dense_block(fc_width),
        *_dense_block(fc_width),
        BatchNormSpec(),
        *_dense_block(fc_width),
        DropoutSpec(0.16),
        *_dense_block(fc_width),
        DenseSpec(N_OUTPUTS),
    ]
    return tuple(layers)


def flatten_width(layers) -> int:
    """Input width of the first dense layer implied by the conv stack."""
    C, L = N_INPUT_CHANNELS, N_INPUT_LENGTH
    for spec in layers:
        if isinstance(spec, ConvSpec):
            C, L = spec.out_channels, -(-L // spec.stride)
        elif isinstance(spec, PoolSpec):
            L = (L - spec.kernel) // spec.effective_stride + 1
        elif isinstance(spec, FlattenSpec):
            return C * L
    raise InvalidInputError("stack has no flatten stage")


def paper_architecture(init_scheme: str = "standard") -> ModelConfig:
    """Full-size topology: dense width 2000, conv channels 16/16/32/32/256."""
    return ModelConfig(layers=architecture_layers(2000), init_scheme=init_scheme)


def scaled_architecture(init_scheme: str = "standard") -> ModelConfig:
    """Same topology with dense width 256 for desk-scale training."""
    return ModelConfig(layers=architecture_layers(256), init_scheme=init_scheme)


# ---------------------------------------------------------------------------
# loss and optimizer


def smooth_l1(pred, target, beta: float):
    """Mean threshold-scaled quadratic-to-linear loss and its gradient."""
    if beta <= 0:
        raise InvalidInputError("beta must be positive")
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise InvalidInputError("prediction and target shapes must match")
    d = pred - target
    ad = np.abs(d)
    quad = ad < beta
    loss = np.where(quad, 0.5 * d**2 / beta, ad - 0.5 * beta)
    grad = np.where(quad, d / beta, np.sign(d)) / d.size
    return float(loss.mean()), grad


class Adam:
    """Bias-corrected Adam over a model's parameter buffers."""

    def __init__(self, model: Model, lr: float = 1e-4, l2: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.model = model
        self.lr = lr
        self.l2 = l2
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p, _ in model.named_params()}
        self.v = {name: np.zeros_like(p) for name, p, _ in model.named_params()}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, p, g in self.model.named_params():
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(f"non-finite gradient in {name}")
            grad = g + self.l2 * p if self.l2 else g
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * grad
            v *= self.beta2
            v += (1 - self.beta2) * grad**2
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 1e-4
    smooth_l1_beta: float = 4.04
    l2_regularization: float = 0.0
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidInputError("batch size must be at least 1")
        if self.smooth_l1_beta <= 0:
            raise InvalidInputError("loss threshold must be positive")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val_loss(self):
        return self.val_loss[self.best_epoch]


def evaluate_loss(model: Model, features, targets, beta: float, batch_size: int = 512):
    """Mean eval-mode loss over a dataset."""
    total, n = 0.0, 0
    for start in range(0, len(features), batch_size):
        xb = features[start : start + batch_size]
        yb = targets[start : start + batch_size]
        loss, _ = smooth_l1(model.forward(xb, train_mode=False), yb, beta)
        total += loss * len(xb)
        n += len(xb)
    return total / n


def train(
    model: Model,
    train_features,
    train_targets,
    val_features,
    val_targets,
    cfg: TrainConfig,
    log=None,
) -> TrainHistory:
    """Epoch loop with seeded shuffling and best-validation retention."""
    if len(train_features) == 0 or len(val_features) == 0:
        raise InvalidInputError("training and validation sets must be nonempty")
    opt = Adam(model, lr=cfg.learning_rate, l2=cfg.l2_regularization)
    shuffle_rng = np.random.default_rng(cfg.seed)
    model.seed_dropout(cfg.seed ^ 0xD0)
    history = TrainHistory()
    best_state = None
    best_val = np.inf
    n = len(train_features)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if idx.size == 1:
                continue  # a trailing single sample cannot update batch stats
            xb = train_features[idx]
            yb = train_targets[idx]
            model.zero_grads()
            out = model.forward(xb, train_mode=True)
            loss, grad = smooth_l1(out, yb, cfg.smooth_l1_beta)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became non-finite at epoch {epoch}", epoch=epoch)
            model.backward(grad)
            opt.step()
            epoch_loss += loss * idx.size
            seen += idx.size
        val_loss = evaluate_loss(model, val_features, val_targets, cfg.smooth_l1_beta)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(f"validation loss non-finite at epoch {epoch}", epoch=epoch)
        history.train_loss.append(epoch_loss / max(seen, 1))
        history.val_loss.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_state = model.state_dict()
            history.best_epoch = epoch
        if log is not None:
            log(epoch, history.train_loss[-1], val_loss)
    if best_state is not None:
        model.load_state_dict(best_state)
    return history


def predict(model: Model, scans) -> MarkerShape:
    """Eval-mode forward of one sample, reshaped to 20 markers in mm."""
    out = model.forward(np.asarray(scans, dtype=model.dtype)[None], train_mode=False)
    return MarkerShape(coords=out[0].reshape(20, 3).astype(float))


def predict_batch(model: Model, features, batch_size: int = 512) -> np.ndarray:
    """(N, 3, 190) -> (N, 20, 3) marker coordinates in mm."""
    outs = [
        model.forward(features[s : s + batch_size], train_mode=False)
        for s in range(0, len(features), batch_size)
    ]
    return np.concatenate(outs).reshape(-1, 20, 3)
