"""A small continuous piecewise-affine (CPA) network engine.

Every hidden layer is an affine map followed by a coordinate-wise max of
two affine pieces (ReLU ``max(0, z)`` or leaky-ReLU ``max(a*z, z)``), so the
whole network is a max-affine spline.  Layers are plain dataclasses holding
numpy arrays; gradients are written out by hand.

Conventions
-----------
* Feature maps of conv layers use NCHW layout.
* A "layer index" ``l`` always refers to the l-th *linear* layer (dense or
  conv), 0-based.  ``forward`` returns one pre-activation array per linear
  layer; the last linear layer is the head.
* ``sign(0)`` is taken as ``+1`` and the activation derivative at 0 is 1.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, DivergenceError, LabelError

__all__ = [
    "Activation", "RELU", "IDENTITY", "leaky_relu",
    "Dense", "Conv2d", "MaxPool2d", "Flatten", "Network", "Dataset",
    "TrainConfig", "SGDState", "forward", "loss_and_grads", "sgd_step",
    "init_kaiming", "train", "flops_estimate", "predict", "accuracy",
    "evaluate", "mlp",
]


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"
    alpha: float = 0.0

    def __post_init__(self):
        if self.kind not in ("relu", "leaky_relu", "identity"):
            raise ConfigError(f"unknown activation {self.kind!r}")
        if self.kind == "leaky_relu" and not 0.0 < self.alpha < 1.0:
            raise ConfigError("leaky_relu needs alpha in (0, 1)")

    @property
    def negative_slope(self) -> float:
        return {"relu": 0.0, "leaky_relu": self.alpha, "identity": 1.0}[self.kind]

    def __call__(self, z):
        if self.kind == "identity":
            return z
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        return np.maximum(self.alpha * z, z)

    def derivative(self, z):
        if self.kind == "identity":
            return np.ones_like(z)
        return np.where(z >= 0, 1.0, self.negative_slope)

    def to_dict(self):
        return {"kind": self.kind, "alpha": self.alpha}


RELU = Activation("relu")
IDENTITY = Activation("identity")


def leaky_relu(alpha=0.01):
    return Activation("leaky_relu", alpha)


def _as_activation(act) -> Activation:
    if isinstance(act, Activation):
        return act
    if isinstance(act, dict):
        return Activation(act["kind"], act.get("alpha", 0.0))
    return Activation(act)


class _Linear:
    """Shared behaviour of the two parameterized layer types."""

    weights: np.ndarray
    bias: np.ndarray
    mask: np.ndarray | None
    activation: Activation

    def _init_common(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        self.activation = _as_activation(self.activation)
        if self.bias.shape[0] != self.weights.shape[0]:
            raise DimensionError(
                f"bias has {self.bias.shape[0]} entries for {self.weights.shape[0]} units")
        if self.mask is not None:
            self.mask = np.array(self.mask, dtype=np.float64)
            if self.mask.shape != self.weights.shape:
                raise DimensionError("mask shape differs from weight shape")
            if not np.all((self.mask == 0) | (self.mask == 1)):
                raise ValueError("mask entries must be 0 or 1")
            self.weights = self.weights * self.mask

    @property
    def units(self) -> int:
        return self.weights.shape[0]

    @property
    def effective_weights(self) -> np.ndarray:
        if self.mask is None:
            return self.weights
        return self.weights * self.mask

    def rows(self) -> np.ndarray:
        """Per-unit weight rows, flattened (conv kernels become one row per channel)."""
        return self.effective_weights.reshape(self.units, -1)

    def active_weight_count(self) -> int:
        if self.mask is None:
            return self.weights.size
        return int(np.count_nonzero(self.mask))


@dataclass(eq=False)
class Dense(_Linear):
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = RELU
    mask: np.ndarray | None = None

    kind = "dense"

    def __post_init__(self):
        self._init_common()
        if self.weights.ndim != 2 or self.weights.shape[0] < 1:
            raise DimensionError("dense weights must be a non-empty out x in matrix")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_dim,):
            raise DimensionError(f"expects input of shape ({self.in_dim},), got {tuple(in_shape)}")
        return (self.units,)

    def linear(self, x):
        return x @ self.effective_weights.T + self.bias, x

    def linear_backward(self, cache, dz):
        x = cache
        dw = dz.T @ x
        if self.mask is not None:
            dw *= self.mask
        return dz @ self.effective_weights, dw, dz.sum(axis=0)

    def macs(self, in_shape) -> int:
        return self.active_weight_count()


@dataclass(eq=False)
class Conv2d(_Linear):
    weights: np.ndarray  # out_channels x in_channels x kh x kw
    bias: np.ndarray
    activation: Activation = RELU
    mask: np.ndarray | None = None
    stride: int = 1
    padding: int = 0

    kind = "conv2d"

    def __post_init__(self):
        self._init_common()
        if self.weights.ndim != 4 or min(self.weights.shape) < 1:
            raise DimensionError("conv kernels must be a non-empty O x C x kh x kw tensor")
        if self.stride < 1 or self.padding < 0:
            raise DimensionError("stride must be >= 1 and padding >= 0")

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weights.shape[1:]))

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise DimensionError(
                f"expects input of shape ({self.in_channels}, H, W), got {tuple(in_shape)}")
        kh, kw = self.kernel_size
        ho = (in_shape[1] + 2 * self.padding - kh) // self.stride + 1
        wo = (in_shape[2] + 2 * self.padding - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise DimensionError(f"output spatial size {ho}x{wo} is empty for input {tuple(in_shape)}")
        return (self.units, ho, wo)

    def _columns(self, x):
        p = self.padding
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        kh, kw = self.kernel_size
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::self.stride, ::self.stride]
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        return cols, (x.shape, ho, wo)

    def linear(self, x):
        cols, geom = self._columns(x)
        _, ho, wo = geom
        z = cols @ self.rows().T + self.bias
        z = z.reshape(x.shape[0], ho, wo, self.units).transpose(0, 3, 1, 2)
        return z, (cols, geom)

    def linear_backward(self, cache, dz):
        cols, (padded_shape, ho, wo) = cache
        n = dz.shape[0]
        kh, kw = self.kernel_size
        c = self.in_channels
        dz2 = dz.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.units)
        dw = (dz2.T @ cols).reshape(self.weights.shape)
        if self.mask is not None:
            dw *= self.mask
        dcols = (dz2 @ self.rows()).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros(padded_shape)
        s = self.stride
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        p = self.padding
        dx = dxp[:, :, p:padded_shape[2] - p, p:padded_shape[3] - p] if p else dxp
        return dx, dw, dz.sum(axis=(0, 2, 3))

    def macs(self, in_shape) -> int:
        _, ho, wo = self.output_shape(in_shape)
        return ho * wo * self.active_weight_count()


@dataclass(eq=False)
class MaxPool2d:
    """2x2 max-pool with stride 2 (odd trailing rows/columns are dropped)."""

    kind = "maxpool2d"

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] < 2 or in_shape[2] < 2:
            raise DimensionError(f"max-pool needs a (C, H>=2, W>=2) input, got {tuple(in_shape)}")
        return (in_shape[0], in_shape[1] // 2, in_shape[2] // 2)

    def forward(self, x):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        blocks = (x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
                  .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4))
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)

    def backward(self, cache, dout):
        shape, arg = cache
        n, c, h, w = shape
        h2, w2 = h // 2, w // 2
        dblocks = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(dblocks, arg[..., None], dout[..., None], axis=-1)
        dx = np.zeros(shape)
        dx[:, :, :2 * h2, :2 * w2] = (dblocks.reshape(n, c, h2, w2, 2, 2)
                                      .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2))
        return dx


@dataclass(eq=False)
class Flatten:
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dout):
        return dout.reshape(cache)


LINEAR_TYPES = (Dense, Conv2d)


@dataclass(eq=False)
class Network:
    """An ordered stack of layers; the last linear layer is the head."""

    layers: list
    input_shape: tuple

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in np.atleast_1d(self.input_shape))
        if not self.linear_positions:
            raise DimensionError("a network needs at least one linear layer")
        self.shapes()  # validates compatibility

    @property
    def linear_positions(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, LINEAR_TYPES)]

    @property
    def linear_layers(self) -> list:
        return [self.layers[i] for i in self.linear_positions]

    @property
    def hidden_layers(self) -> list:
        """Linear layers whose pre-activation signs enter the activation code."""
        return self.linear_layers[:-1]

    @property
    def head(self):
        return self.linear_layers[-1]

    def shapes(self) -> list[tuple]:
        """Input shape of every layer followed by the network's output shape."""
        out = [self.input_shape]
        for pos, layer in enumerate(self.layers):
            try:
                out.append(tuple(layer.output_shape(out[-1])))
            except DimensionError as exc:
                raise DimensionError(f"layer {pos} ({layer.kind}): {exc}") from None
        return out

    def preact_shapes(self) -> list[tuple]:
        shapes = self.shapes()
        return [shapes[i + 1] for i in self.linear_positions]

    def hidden_unit_counts(self) -> list[int]:
        """Number of code bits contributed by each hidden layer."""
        return [int(np.prod(s)) for s in self.preact_shapes()[:-1]]

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def forward(self, x, keep_cache=False):
        x = np.asarray(x, dtype=np.float64)
        single = x.shape == self.input_shape
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise DimensionError(
                f"layer 0 ({self.layers[0].kind}): input shape {x.shape[1:]} "
                f"does not match network input {self.input_shape}")
        preacts, caches = [], []
        h = x
        for layer in self.layers:
            if isinstance(layer, LINEAR_TYPES):
                z, cache = layer.linear(h)
                preacts.append(z)
                caches.append((cache, z))
                h = layer.activation(z)
            else:
                h, cache = layer.forward(h)
                caches.append(cache)
        if single:
            return h[0], [p[0] for p in preacts]
        if keep_cache:
            return h, preacts, caches
        return h, preacts

    def parameters(self):
        """Yield ``(layer_position, name, array)`` for every trainable array."""
        for pos in self.linear_positions:
            layer = self.layers[pos]
            yield pos, "weights", layer.weights
            yield pos, "bias", layer.bias

    def describe(self) -> str:
        parts = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                parts.append(f"dense({layer.in_dim}->{layer.units},{layer.activation.kind})")
            elif isinstance(layer, Conv2d):
                kh, kw = layer.kernel_size
                parts.append(f"conv({layer.in_channels}->{layer.units},{kh}x{kw},{layer.activation.kind})")
            else:
                parts.append(layer.kind)
        return " | ".join(parts)


def mlp(sizes: Sequence[int], activation=RELU, seed: int | None = 0) -> Network:
    """Fully connected net ``sizes[0] -> ... -> sizes[-1]`` with an identity head."""
    if len(sizes) < 2 or min(sizes) < 1:
        raise ConfigError(f"invalid layer sizes {list(sizes)}")
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = IDENTITY if i == len(sizes) - 2 else _as_activation(activation)
        layers.append(Dense(np.zeros((b, a)), np.zeros(b), act))
    net = Network(layers, (sizes[0],))
    if seed is not None:
        init_kaiming(net, seed)
    return net


def forward(net: Network, x):
    """Return ``(output, preacts)`` with one pre-activation array per linear layer."""
    return net.forward(x)


class Dataset(NamedTuple):
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.x)

    def subset(self, idx):
        return Dataset(self.x[idx], self.y[idx])


def _loss(out, y, loss_kind):
    n = out.shape[0]
    if loss_kind == "cross_entropy":
        y = np.asarray(y)
        if (y.ndim != 1 or y.shape[0] != n or not np.issubdtype(y.dtype, np.integer)
                or y.min(initial=0) < 0 or y.max(initial=0) >= out.shape[1]):
            raise LabelError(f"labels must be integers in [0, {out.shape[1]})")
        shifted = out - out.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        loss = -logp[np.arange(n), y].mean()
        dout = np.exp(logp)
        dout[np.arange(n), y] -= 1.0
        return loss, dout / n
    if loss_kind == "mse":
        y = np.asarray(y, dtype=np.float64).reshape(out.shape)
        diff = out - y
        return float((diff ** 2).sum() / n), 2.0 * diff / n
    raise ConfigError(f"unknown loss {loss_kind!r}")


def loss_and_grads(net: Network, batch_x, batch_y, loss_kind="cross_entropy"):
    """Mean batch loss and its exact gradient.

    Returns ``(loss, grads)`` where ``grads`` is aligned with ``net.layers``:
    a ``{"weights": ..., "bias": ...}`` dict for linear layers, ``None`` for
    parameter-free ones.  Masked weights get zero gradient.
    """
    batch_x = np.asarray(batch_x, dtype=np.float64)
    if batch_x.shape == net.input_shape:
        batch_x = batch_x[None]
        batch_y = np.asarray(batch_y)[None]
    if batch_x.shape[0] == 0:
        raise ValueError("empty batch")
    out, _, caches = net.forward(batch_x, keep_cache=True)
    loss, d = _loss(out, batch_y, loss_kind)
    grads = [None] * len(net.layers)
    for pos in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[pos]
        if isinstance(layer, LINEAR_TYPES):
            cache, z = caches[pos]
            dz = d * layer.activation.derivative(z)
            d, dw, db = layer.linear_backward(cache, dz)
            grads[pos] = {"weights": dw, "bias": db}
        else:
            d = layer.backward(caches[pos], d)
    return float(loss), grads


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.1
    lr_schedule: dict = field(default_factory=dict)  # epoch -> multiplicative factor
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    loss: str = "cross_entropy"

    def __post_init__(self):
        self.lr_schedule = {int(k): float(v) for k, v in dict(self.lr_schedule).items()}
        self.validate()

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")
        if self.loss not in ("cross_entropy", "mse"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        milestones = sorted(self.lr_schedule)
        if milestones and (milestones[0] < 0 or milestones[-1] >= max(self.epochs, 1)):
            raise ConfigError("lr schedule milestones must lie in [0, epochs)")

    @staticmethod
    def step_decay(epochs: int, factor: float = 0.1) -> dict:
        """Divide the rate by 10 at 50% and 75% of training."""
        if epochs < 4:
            return {}
        return {epochs // 2: factor, (3 * epochs) // 4: factor}

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 0-based ``epoch``."""
        lr = self.lr
        for milestone, factor in sorted(self.lr_schedule.items()):
            if epoch >= milestone:
                lr *= factor
        return lr

    def replace(self, **changes) -> "TrainConfig":
        params = dict(self.__dict__)
        params.update(changes)
        return TrainConfig(**params)


class SGDState:
    """Momentum buffers, aligned with ``net.layers``."""

    def __init__(self, net: Network):
        self.velocity = [None] * len(net.layers)
        for pos in net.linear_positions:
            layer = net.layers[pos]
            self.velocity[pos] = {"weights": np.zeros_like(layer.weights),
                                  "bias": np.zeros_like(layer.bias)}


def sgd_step(net: Network, grads, config: TrainConfig, state: SGDState | None = None, lr=None):
    """One momentum-SGD update, in place.

    ``v <- momentum*v - lr*(grad + weight_decay*param); param <- param + v``
    """
    if state is None:
        state = SGDState(net)
    lr = config.lr if lr is None else lr
    for pos in net.linear_positions:
        layer = net.layers[pos]
        g = grads[pos]
        for name in ("weights", "bias"):
            param = getattr(layer, name)
            v = state.velocity[pos][name]
            if v.shape != param.shape or g[name].shape != param.shape:
                raise DimensionError(f"layer {pos}: {name} state/grad shape does not match parameter")
            if not np.all(np.isfinite(g[name])):
                raise DivergenceError(f"non-finite gradient in layer {pos} {name}")
            v *= config.momentum
            v -= lr * (g[name] + config.weight_decay * param)
            param += v
        if layer.mask is not None:
            layer.weights *= layer.mask
            state.velocity[pos]["weights"] *= layer.mask
    return net, state


def init_kaiming(net: Network, seed: int = 0) -> Network:
    """Weights ~ Normal(0, 2/fan_in), biases 0; in place, deterministic per seed."""
    rng = np.random.default_rng(seed)
    for layer in net.linear_layers:
        layer.weights = rng.normal(0.0, math.sqrt(2.0 / layer.fan_in), size=layer.weights.shape)
        if layer.mask is not None:
            layer.weights *= layer.mask
        layer.bias = np.zeros_like(layer.bias)
    return net


def predict(net: Network, x, batch_size: int = 2048) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    outs = [net.forward(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0,))


def accuracy(net: Network, x, y) -> float:
    return float(np.mean(predict(net, x).argmax(axis=1) == np.asarray(y)))


def evaluate(net: Network, data: Dataset, loss_kind: str) -> dict:
    out = predict(net, data.x)
    loss, _ = _loss(out, data.y, loss_kind)
    metrics = {"loss": float(loss)}
    if loss_kind == "cross_entropy":
        metrics["accuracy"] = float(np.mean(out.argmax(axis=1) == data.y))
    return metrics


Callback = Callable[[int, Network, dict], "bool | None"]


def train(net: Network, dataset: Dataset, config: TrainConfig,
          callbacks: Sequence[Callback] = (), test_data: Dataset | None = None):
    """Train ``net`` in place with shuffled mini-batch momentum SGD.

    Callbacks are called as ``cb(epoch, net, metrics)`` after every epoch
    (epochs are 1-based); a truthy return requests an early stop.  Returns
    ``(net, history)`` with one metrics dict per completed epoch.
    """
    config.validate()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    state = SGDState(net)
    n = len(dataset)
    history = []
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch - 1)
        perm = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, grads = loss_and_grads(net, dataset.x[idx], dataset.y[idx], config.loss)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss in epoch {epoch}", epoch, history)
            try:
                sgd_step(net, grads, config, state, lr=lr)
            except DivergenceError as exc:
                raise DivergenceError(str(exc), epoch, history) from None
            total += loss
            batches += 1
        metrics = {"epoch": epoch, "lr": lr, "batch_loss": total / batches}
        for key, value in evaluate(net, dataset, config.loss).items():
            metrics[f"train_{key}"] = value
        if test_data is not None:
            for key, value in evaluate(net, test_data, config.loss).items():
                metrics[f"test_{key}"] = value
        history.append(metrics)
        stop = False
        for cb in callbacks:
            stop = bool(cb(epoch, net, metrics)) or stop
        if stop:
            metrics["early_stop"] = True
            break
    return net, history


def flops_estimate(net: Network) -> int:
    """Multiply-accumulates of one forward pass over unmasked weights."""
    shapes = net.shapes()
    return int(sum(layer.macs(shapes[pos]) for pos, layer in enumerate(net.layers)
                   if isinstance(layer, LINEAR_TYPES)))
