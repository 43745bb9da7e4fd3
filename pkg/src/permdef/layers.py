"""Differentiable layer primitives on float64 numpy arrays.

Conventions:
  * a tensor is a C-contiguous ``float64`` ndarray; shape is its metadata and
    the flat buffer is row-major,
  * every layer works on batches: images are ``[N, C, H, W]``, feature
    vectors ``[N, D]``, class scores ``[N, M]``,
  * convolution is cross-correlation (no kernel flip),
  * ``forward`` returns ``(output, trace)``; ``backward`` consumes the trace
    exactly once, accumulates parameter gradients in place and returns the
    gradient with respect to the layer input.

Tensors are treated as immutable once an operation has produced them; layers
never write into their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import gaussian_vector, uniform_vector


class ShapeError(ValueError):
    """Input shape is incompatible with the layer configuration."""


class LayerConfigError(ValueError):
    """The layer configuration itself is invalid."""


class StaleTraceError(RuntimeError):
    """A backward pass was attempted on an already-consumed trace."""


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array (no copy when already one)."""
    return np.ascontiguousarray(x, dtype=np.float64)


def require_finite(name: str, x: np.ndarray) -> None:
    if not np.isfinite(x).all():
        raise FloatingPointError(f"{name} contains NaN or Inf")


@dataclass
class LayerParams:
    """Weights/bias plus same-shaped gradient accumulators."""

    weights: np.ndarray
    bias: np.ndarray
    grad_weights: np.ndarray = field(default=None)  # type: ignore[assignment]
    grad_bias: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.weights = as_tensor(self.weights)
        self.bias = as_tensor(self.bias)
        if self.grad_weights is None:
            self.grad_weights = np.zeros_like(self.weights)
        if self.grad_bias is None:
            self.grad_bias = np.zeros_like(self.bias)
        if self.grad_weights.shape != self.weights.shape:
            raise ShapeError(
                f"grad_weights shape {self.grad_weights.shape} != weights shape {self.weights.shape}"
            )
        if self.grad_bias.shape != self.bias.shape:
            raise ShapeError(
                f"grad_bias shape {self.grad_bias.shape} != bias shape {self.bias.shape}"
            )

    def zero_grads(self) -> None:
        self.grad_weights.fill(0.0)
        self.grad_bias.fill(0.0)


class LayerTrace:
    """Cached forward state for one backward pass; single use."""

    __slots__ = ("kind", "cache", "_consumed")

    def __init__(self, kind: str, **cache):
        self.kind = kind
        self.cache = cache
        self._consumed = False

    def consume(self, kind: str) -> dict:
        if self.kind != kind:
            raise StaleTraceError(f"trace is for {self.kind!r}, backward asked for {kind!r}")
        if self._consumed:
            raise StaleTraceError(f"{self.kind} trace already consumed; rerun forward first")
        self._consumed = True
        return self.cache


class Layer:
    """Base layer: stateless apart from optional parameters."""

    kind: str = "base"
    params: LayerParams | None = None

    def config(self) -> dict:
        return {}

    def init_params(self, seed: int) -> None:  # noqa: ARG002 - parameterless layers
        return None

    def forward(self, x: np.ndarray, train: bool = False, dropout_seed: int = 0):
        raise NotImplementedError

    def backward(self, trace: LayerTrace, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _out_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Conv2D(Layer):
    """2-D cross-correlation over ``[N, C, H, W]`` with zero padding."""

    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0):
        if stride < 1:
            raise LayerConfigError(f"stride must be >= 1, got {stride}")
        if padding < 0:
            raise LayerConfigError(f"padding must be >= 0, got {padding}")
        if kernel_size < 1:
            raise LayerConfigError(f"kernel_size must be >= 1, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.params = LayerParams(
            weights=np.zeros((out_channels, in_channels, kernel_size, kernel_size)),
            bias=np.zeros(out_channels),
        )

    def config(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
        }

    def init_params(self, seed: int) -> None:
        # He-normal: ReLU follows every conv in the supported stacks.
        fan_in = self.in_channels * self.kernel_size ** 2
        w = gaussian_vector(seed, self.params.weights.size) * np.sqrt(2.0 / fan_in)
        self.params.weights = w.reshape(self.params.weights.shape)
        self.params.bias = np.zeros_like(self.params.bias)
        self.params.zero_grads()

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4:
            raise ShapeError(f"conv expects [N, C, H, W], got shape {x.shape}")
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"input channels {tuple(x.shape)} do not match kernel channels "
                f"{tuple(self.params.weights.shape)}"
            )
        k, p = self.kernel_size, self.padding
        if x.shape[2] + 2 * p < k or x.shape[3] + 2 * p < k:
            raise ShapeError(
                f"kernel {k}x{k} does not fit input {tuple(x.shape)} with padding {p}"
            )

    def forward(self, x: np.ndarray, train: bool = False, dropout_seed: int = 0):
        x = as_tensor(x)
        self._check_input(x)
        w, b = self.params.weights, self.params.bias
        n, _, h, wid = x.shape
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = _out_extent(h, k, s, p), _out_extent(wid, k, s, p)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        acc = np.zeros((n, ho, wo, self.out_channels))
        for a in range(k):
            for bb in range(k):
                patch = xp[:, :, a:a + s * (ho - 1) + 1:s, bb:bb + s * (wo - 1) + 1:s]
                acc += np.tensordot(patch, w[:, :, a, bb], axes=([1], [1]))
        y = np.ascontiguousarray(acc.transpose(0, 3, 1, 2)) + b[None, :, None, None]
        return y, LayerTrace(self.kind, x=x)

    def backward(self, trace: LayerTrace, grad_out: np.ndarray) -> np.ndarray:
        cache = trace.consume(self.kind)
        x = cache["x"]
        dy = as_tensor(grad_out)
        w = self.params.weights
        n, _, h, wid = x.shape
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = dy.shape[2], dy.shape[3]
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x

        self.params.grad_bias += dy.sum(axis=(0, 2, 3))
        dxp = np.zeros((n, h + 2 * p, wid + 2 * p, self.in_channels))
        for a in range(k):
            for bb in range(k):
                patch = xp[:, :, a:a + s * (ho - 1) + 1:s, bb:bb + s * (wo - 1) + 1:s]
                self.params.grad_weights[:, :, a, bb] += np.tensordot(
                    dy, patch, axes=([0, 2, 3], [0, 2, 3])
                )
                dxp[:, a:a + s * (ho - 1) + 1:s, bb:bb + s * (wo - 1) + 1:s, :] += np.tensordot(
                    dy, w[:, :, a, bb], axes=([1], [0])
                )
        dx = np.ascontiguousarray(dxp.transpose(0, 3, 1, 2))
        if p:
            dx = np.ascontiguousarray(dx[:, :, p:p + h, p:p + wid])
        return dx


class Dense(Layer):
    """Affine map ``y = x @ W + b`` on ``[N, D]``."""

    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.params = LayerParams(weights=np.zeros((in_dim, out_dim)), bias=np.zeros(out_dim))

    def config(self) -> dict:
        return {"in_dim": self.in_dim, "out_dim": self.out_dim}

    def init_params(self, seed: int) -> None:
        w = gaussian_vector(seed, self.in_dim * self.out_dim) * np.sqrt(2.0 / self.in_dim)
        self.params.weights = w.reshape(self.in_dim, self.out_dim)
        self.params.bias = np.zeros_like(self.params.bias)
        self.params.zero_grads()

    def forward(self, x: np.ndarray, train: bool = False, dropout_seed: int = 0):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"dense expects [N, {self.in_dim}], got shape {x.shape}")
        y = x @ self.params.weights + self.params.bias
        return y, LayerTrace(self.kind, x=x)

    def backward(self, trace: LayerTrace, grad_out: np.ndarray) -> np.ndarray:
        cache = trace.consume(self.kind)
        x = cache["x"]
        dy = as_tensor(grad_out)
        self.params.grad_weights += x.T @ dy
        self.params.grad_bias += dy.sum(axis=0)
        return dy @ self.params.weights.T


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: np.ndarray, train: bool = False, dropout_seed: int = 0):
        x = as_tensor(x)
        mask = x > 0  # subgradient 0 at exactly 0
        return np.where(mask, x, 0.0), LayerTrace(self.kind, mask=mask)

    def backward(self, trace: LayerTrace, grad_out: np.ndarray) -> np.ndarray:
        cache = trace.consume(self.kind)
        return np.where(cache["mask"], as_tensor(grad_out), 0.0)


class MaxPool2D(Layer):
    """Non-overlapping max pooling (window == stride); ties route to the
    first entry in row-major window order."""

    kind = "maxpool"

    def __init__(self, size: int = 2):
        if size < 1:
            raise LayerConfigError(f"pool size must be >= 1, got {size}")
        self.size = size

    def config(self) -> dict:
        return {"size": self.size}

    def forward(self, x: np.ndarray, train: bool = False, dropout_seed: int = 0):
        x = as_tensor(x)
        if x.ndim != 4:
            raise ShapeError(f"maxpool expects [N, C, H, W], got shape {x.shape}")
        n, c, h, w = x.shape
        k = self.size
        if h % k or w % k:
            raise ShapeError(f"maxpool {k}x{k} needs H, W divisible by {k}, got {h}x{w}")
        ho, wo = h // k, w // k
        windows = x.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, ho, wo, k * k
        )
        idx = windows.argmax(axis=-1)
        y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        return np.ascontiguousarray(y), LayerTrace(self.kind, idx=idx, in_shape=x.shape)

    def backward(self, trace: LayerTrace, grad_out: np.ndarray) -> np.ndarray:
        cache = trace.consume(self.kind)
        idx, (n, c, h, w) = cache["idx"], cache["in_shape"]
        dy = as_tensor(grad_out)
        k = self.size
        ho, wo = h // k, w // k
        dwin = np.zeros((n, c, ho, wo, k * k))
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dx = dwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return np.ascontiguousarray(dx)


class Dropout(Layer):
    """Inverted dropout: active only in train mode, seeded per call."""

    kind = "dropout"

    def __init__(self, rate: float = 0.5):
        if not 0.0 <= rate < 1.0:
            raise LayerConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def config(self) -> dict:
        return {"rate": self.rate}

    def forward(self, x: np.ndarray, train: bool = False, dropout_seed: int = 0):
        x = as_tensor(x)
        if not train or self.rate == 0.0:
            return x, LayerTrace(self.kind, mask=None)
        keep = uniform_vector(dropout_seed, x.size).reshape(x.shape) >= self.rate
        mask = keep / (1.0 - self.rate)
        return x * mask, LayerTrace(self.kind, mask=mask)

    def backward(self, trace: LayerTrace, grad_out: np.ndarray) -> np.ndarray:
        cache = trace.consume(self.kind)
        dy = as_tensor(grad_out)
        return dy if cache["mask"] is None else dy * cache["mask"]


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x: np.ndarray, train: bool = False, dropout_seed: int = 0):
        x = as_tensor(x)
        return x.reshape(x.shape[0], -1), LayerTrace(self.kind, in_shape=x.shape)

    def backward(self, trace: LayerTrace, grad_out: np.ndarray) -> np.ndarray:
        cache = trace.consume(self.kind)
        return as_tensor(grad_out).reshape(cache["in_shape"])


class Softmax(Layer):
    """Row-wise softmax over the last axis, max-subtraction stabilized."""

    kind = "softmax"

    def forward(self, x: np.ndarray, train: bool = False, dropout_seed: int = 0):
        x = as_tensor(x)
        if x.shape[-1] == 0:
            raise ShapeError("softmax of an empty vector is undefined")
        y = softmax(x)
        return y, LayerTrace(self.kind, y=y)

    def backward(self, trace: LayerTrace, grad_out: np.ndarray) -> np.ndarray:
        cache = trace.consume(self.kind)
        y = cache["y"]
        dy = as_tensor(grad_out)
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, Dense, ReLU, MaxPool2D, Dropout, Flatten, Softmax)}


def softmax(x: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    if x.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector is undefined")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_loss(logits: np.ndarray, true_class: int) -> float:
    """Negative log softmax probability of ``true_class`` for one score vector."""
    z = as_tensor(logits).reshape(-1)
    m = z.shape[0]
    if not 0 <= true_class < m:
        raise ValueError(f"true_class {true_class} out of range for {m} classes")
    return float(-log_softmax(z)[true_class])


def cross_entropy_grad(logits: np.ndarray, true_class: int) -> np.ndarray:
    """d(loss)/d(logits) = softmax(logits) - onehot(true_class)."""
    z = as_tensor(logits).reshape(-1)
    if not 0 <= true_class < z.shape[0]:
        raise ValueError(f"true_class {true_class} out of range for {z.shape[0]} classes")
    g = softmax(z)
    g[true_class] -= 1.0
    return g


def cross_entropy_batch(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over a batch plus its gradient w.r.t. the logits."""
    z = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, m = z.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= m:
        raise ValueError(f"labels out of range for {m} classes")
    ls = log_softmax(z)
    loss = float(-ls[np.arange(n), labels].mean())
    grad = softmax(z)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def make_layer(kind: str, **config) -> Layer:
    if kind not in LAYER_KINDS:
        raise LayerConfigError(f"unknown layer kind {kind!r}; known: {sorted(LAYER_KINDS)}")
    return LAYER_KINDS[kind](**config)


# Single-sample functional surfaces (batch of one under the hood).

def conv2d_forward(x: np.ndarray, params: LayerParams, stride: int = 1,
                   padding: int = 0) -> np.ndarray:
    """Cross-correlate one ``[C, H, W]`` image with an ``[O, C, kH, kW]`` kernel."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"conv2d_forward expects [C, H, W], got shape {x.shape}")
    w = params.weights
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"kernel must be [O, C, k, k], got shape {w.shape}")
    layer = Conv2D(w.shape[1], w.shape[0], w.shape[2], stride=stride, padding=padding)
    layer.params = params
    y, _ = layer.forward(x[None])
    return y[0]


def layer_forward(kind: str, x: np.ndarray, params: LayerParams | None = None,
                  mode: str = "infer", dropout_seed: int = 0, **config):
    """One-sample forward for a named layer kind; returns ``(output, trace)``."""
    if mode not in ("train", "infer"):
        raise LayerConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = as_tensor(x)
    if kind == "dense":
        if params is None:
            raise LayerConfigError("dense needs params")
        if x.reshape(-1).shape[0] != params.weights.shape[0]:
            raise ShapeError(
                f"dense input of size {x.size} does not match weights {params.weights.shape}"
            )
        layer = Dense(*params.weights.shape)
        layer.params = params
        y, trace = layer.forward(x.reshape(1, -1))
        return y[0], trace
    if kind not in LAYER_KINDS or kind == "conv":
        raise LayerConfigError(f"unsupported layer kind {kind!r}")
    layer = make_layer(kind, **config)
    batched = x[None]
    y, trace = layer.forward(batched, train=(mode == "train"), dropout_seed=dropout_seed)
    return y[0], trace


def stack_backward(layers, traces, loss_grad: np.ndarray) -> np.ndarray:
    """Walk a layer stack in reverse; parameter gradients accumulate in the
    layers, the return value is the loss gradient w.r.t. the stack input."""
    if len(layers) != len(traces):
        raise ValueError(f"{len(layers)} layers but {len(traces)} traces")
    grad = as_tensor(loss_grad)
    for layer, trace in zip(reversed(layers), reversed(traces)):
        grad = layer.backward(trace, grad)
    return grad
