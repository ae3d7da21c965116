"""Minimal dense-tensor neural network engine.

Models are described by an immutable :class:`ModelSpec` and their weights live
in one flat ``ParameterVector`` (a 1-D numpy array).  Layers are laid out
layer-major, weight before bias, each block row-major, so index ``n`` names the
same semantic weight on every node that shares a spec.

Conv weights have shape ``(filters, in_channels, k, k)`` and dense weights
``(out_units, in_units)``; activations are ``(batch, channels, height, width)``
for conv stacks and ``(batch, features)`` for dense ones.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, DimensionError

DTYPE = np.float32

ACTIVATIONS = ("relu", "tanh", None)


@dataclass(frozen=True)
class Conv:
    filters: int
    kernel: int
    activation: Optional[str] = "relu"


@dataclass(frozen=True)
class MaxPool:
    window: int = 2


@dataclass(frozen=True)
class Dense:
    units: int
    activation: Optional[str] = "relu"


Layer = Union[Conv, MaxPool, Dense]


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    The final layer must be ``Dense(num_classes, activation=None)``; its output
    is the logits vector.
    """

    arch: str
    input_shape: tuple
    num_classes: int
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.layers:
            raise ConfigError(f"model {self.arch!r} has no layers")
        last = self.layers[-1]
        if not isinstance(last, Dense) or last.units != self.num_classes or last.activation is not None:
            raise ConfigError("final layer must be Dense(num_classes, activation=None)")
        for layer in self.layers:
            if getattr(layer, "activation", None) not in ACTIVATIONS:
                raise ConfigError(f"unsupported activation {layer.activation!r}")

    @property
    def num_params(self) -> int:
        return _plan(self).size


ARCHITECTURES = ("mlp", "cnn-mnist", "cnn-fashion", "cnn-cifar")


def mlp(input_dim: int, hidden: Sequence[int], num_classes: int, activation: str = "relu") -> ModelSpec:
    layers = tuple(Dense(h, activation) for h in hidden) + (Dense(num_classes, None),)
    return ModelSpec("mlp", (int(input_dim),), int(num_classes), layers)


def cnn_mnist(num_classes: int = 10) -> ModelSpec:
    # conv5 -> pool -> conv5 -> pool leaves 20 x 4 x 4 = 320 features for the 320 -> 50 dense layer
    layers = (Conv(10, 5), MaxPool(2), Conv(20, 5), MaxPool(2), Dense(50), Dense(num_classes, None))
    return ModelSpec("cnn-mnist", (1, 28, 28), num_classes, layers)


def cnn_fashion(num_classes: int = 10) -> ModelSpec:
    layers = (Conv(32, 3), Conv(64, 3), MaxPool(2), Dense(128), Dense(num_classes, None))
    return ModelSpec("cnn-fashion", (1, 28, 28), num_classes, layers)


def cnn_cifar(num_classes: int = 10) -> ModelSpec:
    layers = (Conv(32, 3), Conv(64, 3), Conv(128, 3), MaxPool(2), Dense(128), Dense(num_classes, None))
    return ModelSpec("cnn-cifar", (3, 32, 32), num_classes, layers)


def make_spec(arch: str, *, input_dim: int = 784, hidden: Sequence[int] = (64,), num_classes: int = 10,
              activation: str = "relu") -> ModelSpec:
    """Build a spec from an architecture id (the form used in config files)."""
    if arch == "mlp":
        return mlp(input_dim, hidden, num_classes, activation)
    if arch == "cnn-mnist":
        return cnn_mnist(num_classes)
    if arch == "cnn-fashion":
        return cnn_fashion(num_classes)
    if arch == "cnn-cifar":
        return cnn_cifar(num_classes)
    raise ConfigError(f"unsupported architecture {arch!r}; expected one of {ARCHITECTURES}")


# --------------------------------------------------------------------------
# parameter layout


@dataclass(frozen=True)
class _Step:
    layer: Layer
    in_shape: tuple
    out_shape: tuple
    w_slice: Optional[slice] = None
    w_shape: Optional[tuple] = None
    b_slice: Optional[slice] = None
    fan_in: int = 0


@dataclass(frozen=True)
class _Plan:
    steps: tuple
    size: int


@functools.lru_cache(maxsize=64)
def _plan(spec: ModelSpec) -> _Plan:
    steps = []
    shape = tuple(spec.input_shape)
    offset = 0
    for layer in spec.layers:
        if isinstance(layer, Conv):
            if len(shape) != 3:
                raise ConfigError("conv layer needs a (channels, height, width) input")
            c, h, w = shape
            k = layer.kernel
            if h < k or w < k:
                raise ConfigError(f"kernel {k} larger than feature map {h}x{w}")
            out = (layer.filters, h - k + 1, w - k + 1)
            w_shape = (layer.filters, c, k, k)
            fan_in = c * k * k
        elif isinstance(layer, MaxPool):
            if len(shape) != 3:
                raise ConfigError("pooling needs a (channels, height, width) input")
            c, h, w = shape
            s = layer.window
            steps.append(_Step(layer, shape, (c, h // s, w // s)))
            shape = (c, h // s, w // s)
            continue
        else:
            fan_in = int(np.prod(shape))
            out = (layer.units,)
            w_shape = (layer.units, fan_in)
        n_w = int(np.prod(w_shape))
        n_b = w_shape[0]
        steps.append(_Step(layer, shape, out, slice(offset, offset + n_w), w_shape,
                           slice(offset + n_w, offset + n_w + n_b), fan_in))
        offset += n_w + n_b
        shape = out
    return _Plan(tuple(steps), offset)


def param_shapes(spec: ModelSpec) -> list:
    """(weight_shape, bias_shape) per parametrised layer, in flattening order."""
    return [(s.w_shape, (s.w_shape[0],)) for s in _plan(spec).steps if s.w_shape is not None]


def unflatten(params: np.ndarray, spec: ModelSpec) -> list:
    """Split a flat vector into ``[(W, b), ...]`` views (no copies)."""
    plan = _plan(spec)
    _check_len(params, plan.size, "params")
    return [(params[s.w_slice].reshape(s.w_shape), params[s.b_slice])
            for s in plan.steps if s.w_shape is not None]


def flatten(blocks: Sequence) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in blocks])


def _check_len(arr, m, what):
    if arr.ndim != 1 or arr.shape[0] != m:
        raise DimensionError(f"{what} has shape {arr.shape}, expected ({m},)")


# --------------------------------------------------------------------------
# construction


def build_model(spec: ModelSpec, rng_seed: int, dtype=DTYPE) -> np.ndarray:
    """Initialise weights uniformly in +-sqrt(1/fan_in), biases zero."""
    if spec.arch not in ARCHITECTURES:
        raise ConfigError(f"unsupported architecture {spec.arch!r}")
    plan = _plan(spec)
    rng = np.random.default_rng(rng_seed)
    params = np.zeros(plan.size, dtype=dtype)
    for s in plan.steps:
        if s.w_shape is None:
            continue
        bound = np.sqrt(1.0 / s.fan_in)
        n = s.w_slice.stop - s.w_slice.start
        params[s.w_slice] = rng.uniform(-bound, bound, size=n)
    return params


# --------------------------------------------------------------------------
# forward / backward


def _activate(z, act):
    if act == "relu":
        return np.maximum(z, 0)
    if act == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(delta, z, a, act):
    if act == "relu":
        return delta * (z > 0)
    if act == "tanh":
        return delta * (1 - a * a)
    return delta


def _conv_forward(x, w, b):
    k = w.shape[-1]
    cols = sliding_window_view(x, (k, k), axis=(2, 3))  # (B, C, Ho, Wo, k, k)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, F)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None], cols


def _conv_backward_input(dout, w):
    k = w.shape[-1]
    padded = np.pad(dout, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    win = sliding_window_view(padded, (k, k), axis=(2, 3))  # (B, F, H, W, k, k)
    dx = np.tensordot(win, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))  # (B, H, W, C)
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


def _pool_forward(x, s):
    bsz, c, h, w = x.shape
    hp, wp = h // s, w // s
    xr = x[:, :, :hp * s, :wp * s].reshape(bsz, c, hp, s, wp, s)
    xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, hp, wp, s * s)
    arg = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, arg, in_shape, s):
    bsz, c, h, w = in_shape
    hp, wp = dout.shape[2], dout.shape[3]
    g = np.zeros((bsz, c, hp, wp, s * s), dtype=dout.dtype)
    np.put_along_axis(g, arg[..., None], dout[..., None], axis=-1)
    g = g.reshape(bsz, c, hp, wp, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, hp * s, wp * s)
    if hp * s == h and wp * s == w:
        return g
    full = np.zeros(in_shape, dtype=dout.dtype)
    full[:, :, :hp * s, :wp * s] = g
    return full


def _prepare(params, spec, batch):
    plan = _plan(spec)
    _check_len(params, plan.size, "params")
    batch = np.asarray(batch)
    if batch.ndim < 1 or tuple(batch.shape[1:]) != tuple(spec.input_shape):
        raise DimensionError(f"batch shape {batch.shape} does not match input shape {spec.input_shape}")
    return plan, batch.astype(params.dtype, copy=False)


def _forward(params, plan, x):
    cache = []
    a = x
    for s in plan.steps:
        layer = s.layer
        if isinstance(layer, Conv):
            w = params[s.w_slice].reshape(s.w_shape)
            z, cols = _conv_forward(a, w, params[s.b_slice])
            out = _activate(z, layer.activation)
            cache.append((a, cols, z, out))
        elif isinstance(layer, MaxPool):
            out, arg = _pool_forward(a, layer.window)
            cache.append((a, arg, None, out))
        else:
            a2 = a.reshape(a.shape[0], -1)
            w = params[s.w_slice].reshape(s.w_shape)
            z = a2 @ w.T + params[s.b_slice]
            out = _activate(z, layer.activation)
            cache.append((a2, None, z, out))
        a = out
    return a, cache


def _backward(params, plan, cache, dlogits, squared=False):
    """Back-propagate ``dlogits``.

    With ``squared=True`` each row of ``dlogits`` is treated as a separate
    per-sample loss and the result is the sum over samples of the squared
    per-sample gradients, i.e. the diagonal of J^T J.
    """
    out_dtype = np.float64 if squared else params.dtype
    grad = np.zeros(plan.size, dtype=out_dtype)
    delta = dlogits
    for idx in range(len(plan.steps) - 1, -1, -1):
        s = plan.steps[idx]
        layer = s.layer
        a_in, aux, z, out = cache[idx]
        if isinstance(layer, MaxPool):
            delta = _pool_backward(delta, aux, a_in.shape, layer.window)
            continue
        delta = _activation_grad(delta, z, out, layer.activation)
        w = params[s.w_slice].reshape(s.w_shape)
        if isinstance(layer, Conv):
            if squared:
                per = np.einsum("bfhw,bchwij->bfcij", delta, aux, optimize=True)
                grad[s.w_slice] = np.square(per, dtype=np.float64).sum(axis=0).ravel()
                grad[s.b_slice] = np.square(delta.sum(axis=(2, 3)), dtype=np.float64).sum(axis=0)
            else:
                grad[s.w_slice] = np.tensordot(delta, aux, axes=([0, 2, 3], [0, 2, 3])).ravel()
                grad[s.b_slice] = delta.sum(axis=(0, 2, 3))
            if idx > 0:
                delta = _conv_backward_input(delta, w)
        else:
            if squared:
                d2 = np.square(delta, dtype=np.float64)
                grad[s.w_slice] = (d2.T @ np.square(a_in, dtype=np.float64)).ravel()
                grad[s.b_slice] = d2.sum(axis=0)
            else:
                grad[s.w_slice] = (delta.T @ a_in).ravel()
                grad[s.b_slice] = delta.sum(axis=0)
            if idx > 0:
                delta = (delta @ w).reshape(a_in.shape[0], *s.in_shape)
    return grad


def forward(params: np.ndarray, spec: ModelSpec, batch: np.ndarray) -> np.ndarray:
    """Return logits of shape ``(batch_size, num_classes)``."""
    plan, x = _prepare(params, spec, batch)
    logits, _ = _forward(params, plan, x)
    return logits


def _softmax_xent(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    probs = exp / total
    nll = np.log(total[:, 0]) - shifted[np.arange(len(labels)), labels]
    return probs, nll


def _check_labels(labels, n, num_classes):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape}, expected ({n},)")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes})")
    return labels.astype(np.int64, copy=False)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    _, nll = _softmax_xent(np.asarray(logits, dtype=np.float64), labels)
    return float(nll.mean())


def loss_and_gradient(params: np.ndarray, spec: ModelSpec, batch: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``params``."""
    plan, x = _prepare(params, spec, batch)
    labels = _check_labels(labels, x.shape[0], spec.num_classes)
    logits, cache = _forward(params, plan, x)
    probs, nll = _softmax_xent(logits, labels)
    dlogits = probs
    dlogits[np.arange(len(labels)), labels] -= 1
    dlogits /= len(labels)
    return float(nll.mean()), _backward(params, plan, cache, dlogits)


def squared_sample_grad_sum(params: np.ndarray, spec: ModelSpec, batch: np.ndarray,
                            labels: np.ndarray) -> np.ndarray:
    """Sum over samples of the element-wise squared per-sample loss gradient (float64)."""
    plan, x = _prepare(params, spec, batch)
    labels = _check_labels(labels, x.shape[0], spec.num_classes)
    logits, cache = _forward(params, plan, x)
    probs, _ = _softmax_xent(logits, labels)
    probs[np.arange(len(labels)), labels] -= 1
    return _backward(params, plan, cache, probs, squared=True)


def predict(params: np.ndarray, spec: ModelSpec, batch: np.ndarray, chunk: int = 2048) -> np.ndarray:
    preds = [forward(params, spec, batch[i:i + chunk]).argmax(axis=1) for i in range(0, len(batch), chunk)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(params: np.ndarray, spec: ModelSpec, batch: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise DataError("accuracy over an empty set")
    return float(np.mean(predict(params, spec, batch) == np.asarray(labels)))


# --------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    """Classical (heavy-ball) momentum SGD state."""

    lr: float
    momentum: float
    velocity: np.ndarray

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")

    @classmethod
    def zeros(cls, m: int, lr: float, momentum: float, dtype=DTYPE) -> "OptimizerState":
        return cls(lr, momentum, np.zeros(m, dtype=dtype))

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.lr, self.momentum, self.velocity.copy())


def sgd_step(params: np.ndarray, grad: np.ndarray, opt: OptimizerState) -> np.ndarray:
    """velocity <- momentum * velocity + grad; params <- params - lr * velocity.

    ``opt.velocity`` is updated in place; a new parameter array is returned.
    """
    m = opt.velocity.shape[0]
    _check_len(params, m, "params")
    _check_len(grad, m, "grad")
    opt.velocity *= opt.velocity.dtype.type(opt.momentum)
    opt.velocity += grad
    return params - params.dtype.type(opt.lr) * opt.velocity


def train_epochs(params: np.ndarray, spec: ModelSpec, opt: OptimizerState, features: np.ndarray,
                 labels: np.ndarray, epochs: int, batch_size: int, rng: np.random.Generator):
    """Mini-batch SGD over a local dataset.

    Each epoch visits the samples in a fresh permutation drawn from ``rng``;
    the trailing short batch is kept.  Returns ``(params, loss)`` where
    ``loss`` is the sample-weighted mean training loss of the last epoch
    (``nan`` when nothing was trained).
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = len(labels)
    last_loss = float("nan")
    if n == 0:
        return params, last_loss
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grad = loss_and_gradient(params, spec, features[idx], labels[idx])
            params = sgd_step(params, grad, opt)
            total += loss * len(idx)
        last_loss = total / n
    return params, last_loss
