"""Sequential classifier stacks: construction, inference, training, persistence.

A network maps an image batch to class scores through an ordered layer stack;
class probabilities are the softmax of the scores and the predicted label is
the argmax (ties break to the lowest index).  The final dense layer emits raw
scores so attack code can read them without private access.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .rng import derive_seed, permutation_vector

ARCH_TAGS = ("fgsm-arch", "cw-arch-small", "cw-arch-large", "tiny-arch")

# substream tags for seed derivation
_SEED_INIT, _SEED_SHUFFLE, _SEED_DROPOUT = 0, 1, 2

MODEL_MAGIC = b"PCLK"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Model byte stream is malformed (bad magic/version or truncated)."""


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite."""


def _propagate_shape(layer: L.Layer, shape: tuple) -> tuple:
    """Output shape of one layer for a single-sample input shape."""
    if layer.kind == "conv":
        if len(shape) != 3:
            raise L.ShapeError(f"conv expects [C, H, W] input, got {shape}")
        c, h, w = shape
        if c != layer.in_channels:
            raise L.ShapeError(
                f"layer expects {layer.in_channels} channels, previous layer emits {shape}"
            )
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        if h + 2 * p < k or w + 2 * p < k:
            raise L.ShapeError(f"kernel {k}x{k} does not fit {shape} with padding {p}")
        return (layer.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
    if layer.kind == "maxpool":
        c, h, w = shape
        k = layer.size
        if h % k or w % k:
            raise L.ShapeError(f"maxpool {k}x{k} does not tile {shape}")
        return (c, h // k, w // k)
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    if layer.kind == "dense":
        if len(shape) != 1 or shape[0] != layer.in_dim:
            raise L.ShapeError(f"dense expects [{layer.in_dim}], previous layer emits {shape}")
        return (layer.out_dim,)
    return shape  # relu / dropout / softmax keep the shape


class Network:
    """Ordered layer stack with shape compatibility checked at construction."""

    def __init__(self, layers: list[L.Layer], arch: str = "custom",
                 input_shape: tuple = (1, 28, 28), num_classes: int = 10):
        self.layers = list(layers)
        self.arch = arch
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        shape = self.input_shape
        self.layer_shapes = []
        for layer in self.layers:
            shape = _propagate_shape(layer, shape)
            self.layer_shapes.append(shape)
        if shape != (self.num_classes,):
            raise L.ShapeError(
                f"stack emits shape {shape}, expected ({self.num_classes},) class scores"
            )

    # -- parameters -------------------------------------------------------

    def parameters(self) -> list[L.LayerParams]:
        return [ly.params for ly in self.layers if ly.params is not None]

    def init_params(self, seed: int) -> None:
        for i, layer in enumerate(self.layers):
            layer.init_params(derive_seed(seed, _SEED_INIT, i))

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grads()

    # -- forward / backward ------------------------------------------------

    def _check_batch(self, x: np.ndarray) -> np.ndarray:
        x = L.as_tensor(x)
        if x.ndim == len(self.input_shape):
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise L.ShapeError(
                f"input shape {x.shape[1:]} does not match network input {self.input_shape}"
            )
        return x

    def forward_batch(self, x: np.ndarray, train: bool = False, dropout_seed: int = 0):
        """Run the stack on ``[N, C, H, W]``; returns (scores, traces)."""
        x = self._check_batch(x)
        traces = []
        for i, layer in enumerate(self.layers):
            x, trace = layer.forward(
                x, train=train,
                dropout_seed=derive_seed(dropout_seed, i) if layer.kind == "dropout" else 0,
            )
            traces.append(trace)
        return x, traces

    def backward_batch(self, traces, grad_scores: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns gradient w.r.t. the input."""
        return L.stack_backward(self.layers, traces, grad_scores)

    # -- inference surfaces -------------------------------------------------

    def encode(self, x: np.ndarray):
        """Class probabilities and raw scores for a single input."""
        probs, logits = self.encode_batch(L.as_tensor(x)[None])
        return probs[0], logits[0]

    def encode_batch(self, x: np.ndarray):
        logits, _ = self.forward_batch(x, train=False)
        return L.softmax(logits), logits

    def decode(self, x: np.ndarray) -> int:
        probs, _ = self.encode(x)
        return int(np.argmax(probs))

    def decode_batch(self, x: np.ndarray) -> np.ndarray:
        probs, _ = self.encode_batch(x)
        return np.argmax(probs, axis=1)

    def fingerprint(self) -> str:
        return hashlib.sha256(save_model(self)).hexdigest()[:16]


def build_network(arch: str, input_shape: tuple = (1, 28, 28)) -> Network:
    """Instantiate one of the known architecture tags (parameters zeroed).

    tiny-arch is a one-conv stack for fast test-scale runs; the other tags
    are the two full evaluation architectures (small/large differ only in
    layer widths).
    """
    c_in = input_shape[0]
    if arch == "tiny-arch":
        stack = [L.Conv2D(c_in, 8, 5, stride=2), L.ReLU(), L.Flatten()]
        shape = input_shape
        for layer in stack:
            shape = _propagate_shape(layer, shape)
        stack.append(L.Dense(shape[0], 10))
        return Network(stack, arch=arch, input_shape=input_shape, num_classes=10)
    if arch == "fgsm-arch":
        stack = [
            L.Conv2D(c_in, 64, 8), L.ReLU(),
            L.Conv2D(64, 128, 6), L.ReLU(),
            L.Conv2D(128, 128, 5), L.ReLU(),
            L.Flatten(),
        ]
    elif arch in ("cw-arch-small", "cw-arch-large"):
        w1, w2, wd = (32, 64, 200) if arch == "cw-arch-small" else (64, 128, 256)
        stack = [
            L.Conv2D(c_in, w1, 3), L.ReLU(),
            L.Conv2D(w1, w1, 3), L.ReLU(),
            L.MaxPool2D(2),
            L.Conv2D(w1, w2, 3), L.ReLU(),
            L.Conv2D(w2, w2, 3), L.ReLU(),
            L.MaxPool2D(2),
            L.Flatten(),
        ]
    else:
        raise ValueError(f"unknown architecture tag {arch!r}; known: {ARCH_TAGS}")
    shape = input_shape
    for layer in stack:
        shape = _propagate_shape(layer, shape)
    if arch == "fgsm-arch":
        stack += [L.Dense(shape[0], 10)]
    else:
        wd = 200 if arch == "cw-arch-small" else 256
        stack += [
            L.Dense(shape[0], wd), L.ReLU(),
            L.Dropout(0.5),
            L.Dense(wd, wd),
            L.Dense(wd, 10),
        ]
    return Network(stack, arch=arch, input_shape=input_shape, num_classes=10)


# -- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    optimizer: str = "adam"           # adam | sgd-momentum
    learning_rate: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    train_size: int | None = None     # None: everything not held out
    val_size: int = 0
    init_params: bool = True          # False resumes from current weights

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_error_pct: float
    val_loss: float | None = None
    val_error_pct: float | None = None


def history_text(history: list[EpochStats]) -> str:
    """Plain-text metrics table, one epoch per line."""
    lines = [f"{'epoch':>5}  {'train_loss':>10}  {'train_err%':>10}  {'val_loss':>10}  {'val_err%':>10}"]
    for h in history:
        vl = f"{h.val_loss:10.4f}" if h.val_loss is not None else f"{'-':>10}"
        ve = f"{h.val_error_pct:10.2f}" if h.val_error_pct is not None else f"{'-':>10}"
        lines.append(f"{h.epoch:>5}  {h.train_loss:10.4f}  {h.train_error_pct:10.2f}  {vl}  {ve}")
    return "\n".join(lines) + "\n"


class _Adam:
    def __init__(self, params: list[L.LayerParams], cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.state = [
            (np.zeros_like(p.weights), np.zeros_like(p.weights),
             np.zeros_like(p.bias), np.zeros_like(p.bias))
            for p in params
        ]

    def step(self, params: list[L.LayerParams]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, (mw, vw, mb, vb) in zip(params, self.state):
            for theta, g, m, v in ((p.weights, p.grad_weights, mw, vw),
                                   (p.bias, p.grad_bias, mb, vb)):
                m *= c.beta1
                m += (1.0 - c.beta1) * g
                v *= c.beta2
                v += (1.0 - c.beta2) * g * g
                theta -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)


class _Momentum:
    def __init__(self, params: list[L.LayerParams], cfg: TrainConfig):
        self.cfg = cfg
        self.state = [(np.zeros_like(p.weights), np.zeros_like(p.bias)) for p in params]

    def step(self, params: list[L.LayerParams]) -> None:
        c = self.cfg
        for p, (vw, vb) in zip(params, self.state):
            for theta, g, v in ((p.weights, p.grad_weights, vw), (p.bias, p.grad_bias, vb)):
                v *= c.momentum
                v += g
                theta -= c.learning_rate * v


def train(net: Network, images: np.ndarray, labels: np.ndarray,
          cfg: TrainConfig, log=None):
    """Mini-batch training; deterministic in ``cfg.seed``.

    ``images`` is the full training pool ``[n, C, H, W]`` in [0, 1]; the
    first ``train_size`` samples train, the last ``val_size`` validate.
    Returns ``(net, history)``; raises TrainingDiverged on non-finite loss.
    """
    images = L.as_tensor(images)
    labels = np.asarray(labels, dtype=np.int64)
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    if images.shape[1:] != net.input_shape:
        raise L.ShapeError(
            f"dataset shape {images.shape[1:]} does not match network input {net.input_shape}"
        )
    if labels.min() < 0 or labels.max() >= net.num_classes:
        raise ValueError(f"labels out of range [0, {net.num_classes})")
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError("images must be normalized to [0, 1]")
    train_size = cfg.train_size if cfg.train_size is not None else n - cfg.val_size
    if train_size < 1 or cfg.val_size < 0 or train_size + cfg.val_size != n:
        raise ValueError(
            f"split sizes train={train_size} val={cfg.val_size} do not sum to dataset size {n}"
        )

    if cfg.init_params:
        net.init_params(derive_seed(cfg.seed, _SEED_INIT))
    params = net.parameters()
    opt = _Adam(params, cfg) if cfg.optimizer == "adam" else _Momentum(params, cfg)

    x_tr, y_tr = images[:train_size], labels[:train_size]
    x_val, y_val = images[n - cfg.val_size:], labels[n - cfg.val_size:]

    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        order = permutation_vector(derive_seed(cfg.seed, _SEED_SHUFFLE, epoch), train_size)
        total_loss, total_wrong = 0.0, 0
        for step in range(0, train_size, cfg.batch_size):
            batch = order[step:step + cfg.batch_size]
            xb, yb = x_tr[batch], y_tr[batch]
            net.zero_grads()
            logits, traces = net.forward_batch(
                xb, train=True,
                dropout_seed=derive_seed(cfg.seed, _SEED_DROPOUT, epoch, step),
            )
            loss, dlogits = L.cross_entropy_batch(logits, yb)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became {loss} at epoch {epoch} step {step // cfg.batch_size}"
                )
            net.backward_batch(traces, dlogits)
            opt.step(params)
            total_loss += loss * len(batch)
            total_wrong += int((np.argmax(logits, axis=1) != yb).sum())
        stats = EpochStats(
            epoch=epoch,
            train_loss=total_loss / train_size,
            train_error_pct=100.0 * total_wrong / train_size,
        )
        if cfg.val_size:
            vloss, vwrong = evaluate_loss(net, x_val, y_val, cfg.batch_size)
            stats.val_loss = vloss
            stats.val_error_pct = 100.0 * vwrong / cfg.val_size
        history.append(stats)
        if log is not None:
            log(stats)
    return net, history


def evaluate_loss(net: Network, images: np.ndarray, labels: np.ndarray,
                  batch_size: int = 256):
    """(mean loss, wrong count) over a dataset in inference mode."""
    total_loss, wrong = 0.0, 0
    n = images.shape[0]
    for start in range(0, n, batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        logits, _ = net.forward_batch(xb, train=False)
        loss, _ = L.cross_entropy_batch(logits, yb)
        total_loss += loss * len(xb)
        wrong += int((np.argmax(logits, axis=1) != yb).sum())
    return total_loss / n, wrong


# -- persistence --------------------------------------------------------------

def _write_array(buf: io.BytesIO, arr: np.ndarray) -> None:
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_model(net: Network) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<H", MODEL_VERSION))
    arch = net.arch.encode()
    buf.write(struct.pack("<B", len(arch)))
    buf.write(arch)
    buf.write(struct.pack("<B", len(net.input_shape)))
    buf.write(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
    buf.write(struct.pack("<I", net.num_classes))
    buf.write(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        kind = layer.kind.encode()
        buf.write(struct.pack("<B", len(kind)))
        buf.write(kind)
        config = json.dumps(layer.config(), sort_keys=True).encode()
        buf.write(struct.pack("<I", len(config)))
        buf.write(config)
        buf.write(struct.pack("<B", 1 if layer.params is not None else 0))
        if layer.params is not None:
            _write_array(buf, layer.params.weights)
            _write_array(buf, layer.params.bias)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise ModelFormatError(
                f"truncated model stream: needed {n} bytes at offset {self.off}, "
                f"have {len(self.data) - self.off}"
            )
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(data: bytes) -> Network:
    r = _Reader(data)
    if r.take(4) != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic at offset 0: expected {MODEL_MAGIC!r}")
    (version,) = r.unpack("<H")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version} at offset 4")
    (alen,) = r.unpack("<B")
    arch = r.take(alen).decode()
    (ndim,) = r.unpack("<B")
    input_shape = r.unpack(f"<{ndim}I")
    (num_classes,) = r.unpack("<I")
    (n_layers,) = r.unpack("<I")
    stack = []
    for _ in range(n_layers):
        (klen,) = r.unpack("<B")
        kind = r.take(klen).decode()
        (clen,) = r.unpack("<I")
        config = json.loads(r.take(clen).decode())
        layer = L.make_layer(kind, **config)
        (has_params,) = r.unpack("<B")
        if has_params:
            arrays = []
            for _ in range(2):
                (andim,) = r.unpack("<B")
                shape = r.unpack(f"<{andim}I")
                count = int(np.prod(shape)) if shape else 1
                raw = r.take(8 * count)
                arrays.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape))
            if layer.params is None:
                raise ModelFormatError(f"layer kind {kind!r} cannot carry parameters")
            expected = (layer.params.weights.shape, layer.params.bias.shape)
            got = (arrays[0].shape, arrays[1].shape)
            if expected != got:
                raise ModelFormatError(f"parameter shapes {got} do not match config {expected}")
            layer.params = L.LayerParams(weights=arrays[0], bias=arrays[1])
        stack.append(layer)
    if r.off != len(data):
        raise ModelFormatError(f"{len(data) - r.off} trailing bytes at offset {r.off}")
    return Network(stack, arch=arch, input_shape=input_shape, num_classes=num_classes)


def save_model_file(net: Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_model(net))


def load_model_file(path) -> Network:
    with open(path, "rb") as fh:
        return load_model(fh.read())
