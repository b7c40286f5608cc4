"""Minimal reverse-mode differentiation engine and layer zoo.

Tensors are plain numpy ``float64`` arrays in C (row-major) order; images
flow through convolutional stacks in NHWC layout.  A ``Network`` is an
ordered list of layers; ``forward`` returns a ``ForwardTrace`` that holds
the logits, the penultimate activations (input to the final dense layer)
and the per-layer caches that ``backprop`` consumes.  Gradients are
available with respect to parameters and with respect to the input, which
is what every attack in the toolkit is built on.

Layer zoo: dense, relu, conv2d (stride 1, valid/same), maxpool 2x2,
flatten.  Everything is float64 and single-threaded by contract; a frozen
network is safe to read from concurrent threads because forward state
lives in the trace, never in the layer.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"RBK1"
CHECKPOINT_FORMAT = 1


class ShapeError(ValueError):
    """Tensor shape incompatible with a layer or operation."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared where the contract demands finite values."""


def tensor(data) -> np.ndarray:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(data, dtype=np.float64)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by the row max."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def runner_up_classes(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per row, the highest-logit class other than the label.

    Ties are broken toward the lowest class index (argmax convention).
    """
    masked = logits.copy()
    masked[np.arange(len(labels)), labels] = -np.inf
    return masked.argmax(axis=1)


def xent_per_example(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row cross-entropy -log softmax(z)_y, numerically stable."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return log_z - shifted[np.arange(len(labels)), labels]


def cw_per_example(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row margin loss max_{c != y} z_c - z_y."""
    idx = np.arange(len(labels))
    return logits[idx, runner_up_classes(logits, labels)] - logits[idx, labels]


def _he_uniform(rng, fan_in, shape):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    """Base layer: stateless apply, parameters in ``self.params``."""

    kind = "base"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def build(self, in_shape, rng):
        """Infer output shape from ``in_shape`` and materialize params."""
        raise NotImplementedError

    def forward(self, x):
        """Return (output, cache)."""
        raise NotImplementedError

    def backward(self, dy, cache):
        """Return (dx, param gradient dict matching ``self.params``)."""
        raise NotImplementedError

    def descriptor(self) -> dict:
        return {"kind": self.kind}


class Dense(Layer):
    kind = "dense"

    def __init__(self, units):
        super().__init__()
        self.units = int(units)

    def build(self, in_shape, rng):
        if len(in_shape) != 1:
            raise ShapeError(
                f"dense layer needs a flat input, got shape {in_shape} "
                "(insert a flatten layer first)"
            )
        n_in = in_shape[0]
        self.params["W"] = _he_uniform(rng, n_in, (n_in, self.units))
        self.params["b"] = np.zeros(self.units)
        return (self.units,)

    def forward(self, x):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, dy, cache):
        x = cache
        grads = {"W": x.T @ dy, "b": dy.sum(axis=0)}
        return dy @ self.params["W"].T, grads

    def descriptor(self):
        return {"kind": self.kind, "units": self.units}


class ReLU(Layer):
    kind = "relu"

    def build(self, in_shape, rng):
        return in_shape

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dy, cache):
        return np.where(cache, dy, 0.0), {}


class Flatten(Layer):
    kind = "flatten"

    def build(self, in_shape, rng):
        self.in_shape = tuple(in_shape)
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), None

    def backward(self, dy, cache):
        return dy.reshape((dy.shape[0],) + self.in_shape), {}


class Conv2d(Layer):
    """Stride-1 2-D convolution over NHWC input, valid or same padding."""

    kind = "conv2d"

    def __init__(self, filters, kernel=3, padding="valid"):
        super().__init__()
        if padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
        self.filters = int(filters)
        self.kernel = int(kernel)
        self.padding = padding
        self._col_index_memo = {}

    def build(self, in_shape, rng):
        if len(in_shape) != 3:
            raise ShapeError(f"conv2d needs an HWC input, got shape {in_shape}")
        h, w, c_in = in_shape
        k = self.kernel
        fan_in = k * k * c_in
        self.params["W"] = _he_uniform(rng, fan_in, (k, k, c_in, self.filters))
        self.params["b"] = np.zeros(self.filters)
        if self.padding == "same":
            return (h, w, self.filters)
        if h < k or w < k:
            raise ShapeError(f"conv2d kernel {k} larger than input {in_shape}")
        return (h - k + 1, w - k + 1, self.filters)

    def _pad_widths(self):
        k = self.kernel
        if self.padding == "valid":
            return (0, 0), (0, 0)
        lo = (k - 1) // 2
        hi = k - 1 - lo
        return (lo, hi), (lo, hi)

    def forward(self, x):
        k = self.kernel
        (ph0, ph1), (pw0, pw1) = self._pad_widths()
        if ph0 or ph1 or pw0 or pw1:
            xp = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
        else:
            xp = x
        b, hp, wp, c_in = xp.shape
        ho, wo = hp - k + 1, wp - k + 1
        # (B, Ho, Wo, Cin, kh, kw) -> columns ordered (kh, kw, Cin)
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, k * k * c_in)
        w_mat = self.params["W"].reshape(k * k * c_in, self.filters)
        y = cols @ w_mat + self.params["b"]
        return y.reshape(b, ho, wo, self.filters), (cols, xp.shape)

    def _col_indices(self, padded_shape):
        # Flat indices into one padded example for every column entry,
        # ordered to match the im2col layout above.
        key = padded_shape[1:]
        idx = self._col_index_memo.get(key)
        if idx is None:
            _, hp, wp, c_in = padded_shape
            k = self.kernel
            ho, wo = hp - k + 1, wp - k + 1
            i0 = np.arange(ho)[:, None, None, None, None]
            j0 = np.arange(wo)[None, :, None, None, None]
            di = np.arange(k)[None, None, :, None, None]
            dj = np.arange(k)[None, None, None, :, None]
            ci = np.arange(c_in)[None, None, None, None, :]
            idx = (((i0 + di) * wp + (j0 + dj)) * c_in + ci).ravel()
            self._col_index_memo[key] = idx
        return idx

    def backward(self, dy, cache):
        cols, padded_shape = cache
        b, hp, wp, c_in = padded_shape
        k = self.kernel
        dyf = dy.reshape(-1, self.filters)
        w_mat = self.params["W"].reshape(k * k * c_in, self.filters)
        grads = {
            "W": (cols.T @ dyf).reshape(self.params["W"].shape),
            "b": dyf.sum(axis=0),
        }
        dcols = dyf @ w_mat.T
        per_ex = hp * wp * c_in
        idx = self._col_indices(padded_shape)
        offsets = np.arange(b, dtype=np.int64) * per_ex
        flat_idx = (offsets[:, None] + idx[None, :]).ravel()
        dxp = np.bincount(flat_idx, weights=dcols.ravel(), minlength=b * per_ex)
        dxp = dxp.reshape(b, hp, wp, c_in)
        (ph0, ph1), (pw0, pw1) = self._pad_widths()
        if ph0 or ph1 or pw0 or pw1:
            dxp = dxp[:, ph0:hp - ph1, pw0:wp - pw1, :]
        return dxp, grads

    def descriptor(self):
        return {
            "kind": self.kind,
            "filters": self.filters,
            "kernel": self.kernel,
            "padding": self.padding,
        }


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped.

    Gradient routing breaks ties toward the first maximal element in
    row-major window order.
    """

    kind = "maxpool"

    def build(self, in_shape, rng):
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool needs an HWC input, got shape {in_shape}")
        h, w, c = in_shape
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool needs at least 2x2 input, got {in_shape}")
        return (h // 2, w // 2, c)

    def forward(self, x):
        b, h, w, c = x.shape
        he, we = (h // 2) * 2, (w // 2) * 2
        xc = x[:, :he, :we, :]
        # Window entries in row-major order: (0,0), (0,1), (1,0), (1,1).
        stacked = np.stack(
            [xc[:, 0::2, 0::2, :], xc[:, 0::2, 1::2, :],
             xc[:, 1::2, 0::2, :], xc[:, 1::2, 1::2, :]],
            axis=-1,
        )
        amax = stacked.argmax(axis=-1)
        y = np.take_along_axis(stacked, amax[..., None], axis=-1)[..., 0]
        return y, (amax, x.shape)

    def backward(self, dy, cache):
        amax, in_shape = cache
        b, h, w, c = in_shape
        dstack = np.zeros(dy.shape + (4,))
        np.put_along_axis(dstack, amax[..., None], dy[..., None], axis=-1)
        dx = np.zeros(in_shape)
        dx[:, 0:(h // 2) * 2:2, 0:(w // 2) * 2:2, :] = dstack[..., 0]
        dx[:, 0:(h // 2) * 2:2, 1:(w // 2) * 2:2, :] = dstack[..., 1]
        dx[:, 1:(h // 2) * 2:2, 0:(w // 2) * 2:2, :] = dstack[..., 2]
        dx[:, 1:(h // 2) * 2:2, 1:(w // 2) * 2:2, :] = dstack[..., 3]
        return dx, {}


_LAYER_KINDS = {
    "dense": lambda d: Dense(d["units"]),
    "relu": lambda d: ReLU(),
    "flatten": lambda d: Flatten(),
    "conv2d": lambda d: Conv2d(d["filters"], d.get("kernel", 3), d.get("padding", "valid")),
    "maxpool": lambda d: MaxPool2x2(),
}


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Forward pass result plus the caches backprop needs."""

    logits: np.ndarray
    penultimate: np.ndarray
    caches: list = field(repr=False)
    net: "Network" = field(repr=False)


class Network:
    """Ordered layer stack with an explicit input shape and init seed."""

    def __init__(self, input_shape, layers, rng_seed):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = layers
        self.rng_seed = int(rng_seed)
        self.layer_shapes = []  # input shape of each layer
        # Index of the last dense layer; its input is the penultimate
        # feature representation.  Falls back to the logits themselves.
        self.penultimate_index = None
        for i, layer in enumerate(layers):
            if layer.kind == "dense":
                self.penultimate_index = i

    @property
    def n_classes(self):
        return self.out_shape[0]

    def param_count(self):
        return sum(p.size for layer in self.layers for p in layer.params.values())

    def descriptors(self):
        return [layer.descriptor() for layer in self.layers]


def build_network(input_shape, layer_specs, seed) -> Network:
    """Construct and He-uniform-initialize a network from layer specs.

    ``layer_specs`` is a list of dicts like ``{"kind": "conv2d",
    "filters": 16}``; shapes are inferred layer by layer, raising
    ``ShapeError`` (naming the layer index) on any incompatibility.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    layers = []
    shape = tuple(int(s) for s in input_shape)
    shapes = [shape]
    for i, spec in enumerate(layer_specs):
        kind = spec["kind"]
        if kind not in _LAYER_KINDS:
            raise ValueError(f"unknown layer kind {kind!r} at layer {i}")
        layer = _LAYER_KINDS[kind](spec)
        try:
            shape = layer.build(shape, rng)
        except ShapeError as e:
            raise ShapeError(f"layer {i} ({kind}): {e}") from None
        layers.append(layer)
        shapes.append(shape)
    net = Network(input_shape, layers, seed)
    net.layer_shapes = shapes[:-1]
    net.out_shape = shapes[-1]
    if len(net.out_shape) != 1:
        raise ShapeError(f"network output must be a logit vector, got shape {net.out_shape}")
    return net


def forward(net: Network, batch: np.ndarray) -> ForwardTrace:
    """Run the network on a batch of examples.

    ``batch`` may be flat ``(B, prod(input_shape))`` or shaped
    ``(B, *input_shape)``; logits row i is the pre-softmax activation of
    example i.  Deterministic given (net, batch).
    """
    x = np.asarray(batch, dtype=np.float64)
    flat_dim = int(np.prod(net.input_shape))
    if x.ndim == 2 and x.shape[1] == flat_dim:
        x = x.reshape((x.shape[0],) + net.input_shape)
    elif x.shape[1:] != net.input_shape:
        raise ShapeError(
            f"input batch shape {x.shape[1:]} does not match network input "
            f"shape {net.input_shape} (flat dim {flat_dim})"
        )
    caches = []
    penultimate = None
    for i, layer in enumerate(net.layers):
        if x.shape[1:] != tuple(net.layer_shapes[i]):
            raise ShapeError(
                f"layer {i} ({layer.kind}): expected input shape "
                f"{tuple(net.layer_shapes[i])}, got {x.shape[1:]}"
            )
        if i == net.penultimate_index:
            penultimate = x
        x, cache = layer.forward(x)
        caches.append(cache)
    logits = x
    if penultimate is None:
        penultimate = logits
    if not np.isfinite(logits).all():
        raise NonFiniteError("forward pass produced non-finite logits")
    return ForwardTrace(logits=logits, penultimate=penultimate, caches=caches, net=net)


def _backprop(net: Network, trace: ForwardTrace, dlogits: np.ndarray):
    """Reverse sweep; returns (per-layer grad dicts, input gradient)."""
    if trace.net is not net:
        raise ValueError("trace was produced by a different network")
    if dlogits.shape != trace.logits.shape:
        raise ShapeError(
            f"loss gradient shape {dlogits.shape} does not match logits "
            f"shape {trace.logits.shape}"
        )
    dy = dlogits
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        dy, g = net.layers[i].backward(dy, trace.caches[i])
        grads[i] = g
    return grads, dy


def param_gradients(net: Network, trace: ForwardTrace, loss_grad: np.ndarray):
    """Per-layer parameter gradients for a given d(loss)/d(logits).

    Returns a list of dicts, one per layer, each matching the shapes of
    that layer's parameters (empty for parameterless layers).
    """
    grads, _ = _backprop(net, trace, np.asarray(loss_grad, dtype=np.float64))
    return grads


def input_gradient(net: Network, x: np.ndarray, selector) -> np.ndarray:
    """Gradient of a scalar-per-example output with respect to the input.

    ``selector`` is one of::

        ("logit", c)   d z_c / dx
        ("xent", y)    d xent(softmax(z), onehot(y)) / dx
        ("cw", y)      d (max_{c != y} z_c - z_y) / dx

    where ``y`` may be a scalar class index or a per-example array.  The
    result has the same shape as ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    trace = forward(net, x)
    dlogits = loss_grad_seed(trace.logits, selector)
    _, dx = _backprop(net, trace, dlogits)
    return dx.reshape(x.shape)


def loss_grad_seed(logits: np.ndarray, selector) -> np.ndarray:
    """Per-example d(selected scalar)/d(logits), unscaled by batch size."""
    kind = selector[0]
    b, n_c = logits.shape
    if kind == "logit":
        c = int(selector[1])
        if not 0 <= c < n_c:
            raise ValueError(f"logit index {c} out of range for {n_c} classes")
        dl = np.zeros_like(logits)
        dl[:, c] = 1.0
        return dl
    labels = np.broadcast_to(np.asarray(selector[1], dtype=np.int64), (b,))
    if labels.min() < 0 or labels.max() >= n_c:
        raise ValueError("label out of range")
    if kind == "xent":
        dl = softmax(logits).copy()
        dl[np.arange(b), labels] -= 1.0
        return dl
    if kind == "cw":
        if n_c < 2:
            raise ValueError("cw selector needs at least 2 classes")
        dl = np.zeros_like(logits)
        ru = runner_up_classes(logits, labels)
        dl[np.arange(b), ru] = 1.0
        dl[np.arange(b), labels] = -1.0
        return dl
    raise ValueError(f"unknown selector kind {kind!r}")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class SGD:
    """SGD with classical momentum and coupled weight decay.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v

    Velocity buffers persist across ``step`` calls.
    """

    def __init__(self, lr, momentum=0.0, weight_decay=0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._velocity = None

    def step(self, net: Network, grads):
        if self._velocity is None:
            self._velocity = [
                {k: np.zeros_like(v) for k, v in layer.params.items()}
                for layer in net.layers
            ]
        for i, (layer, g) in enumerate(zip(net.layers, grads)):
            for name, param in layer.params.items():
                grad = g[name]
                if not np.isfinite(grad).all():
                    raise NonFiniteError(
                        f"non-finite gradient for layer {i} ({layer.kind}) param {name!r}"
                    )
                v = self._velocity[i][name]
                v *= self.momentum
                v += grad
                if self.weight_decay:
                    v += self.weight_decay * param
                param -= self.lr * v
        return net


# ---------------------------------------------------------------------------
# Stock architectures
# ---------------------------------------------------------------------------

def layer_specs_for(arch: str, input_shape, n_classes: int):
    """Layer specs for the named stock architecture."""
    if arch == "linear":
        return [{"kind": "dense", "units": n_classes}]
    if arch == "mlp":
        return [
            {"kind": "dense", "units": 256},
            {"kind": "relu"},
            {"kind": "dense", "units": 128},
            {"kind": "relu"},
            {"kind": "dense", "units": n_classes},
        ]
    if arch == "cnn":
        return [
            {"kind": "conv2d", "filters": 16, "kernel": 3, "padding": "valid"},
            {"kind": "relu"},
            {"kind": "maxpool"},
            {"kind": "conv2d", "filters": 32, "kernel": 3, "padding": "valid"},
            {"kind": "relu"},
            {"kind": "maxpool"},
            {"kind": "flatten"},
            {"kind": "dense", "units": 128},
            {"kind": "relu"},
            {"kind": "dense", "units": n_classes},
        ]
    raise ValueError(f"unknown architecture {arch!r}")


def make_network(arch: str, input_shape, n_classes: int, seed: int) -> Network:
    shape = tuple(input_shape)
    if arch in ("linear", "mlp") and len(shape) > 1:
        shape = (int(np.prod(shape)),)
    return build_network(shape, layer_specs_for(arch, shape, n_classes), seed)


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------

def save_checkpoint(net: Network, path):
    """Write the RBK1 checkpoint: magic, one JSON header line, raw params.

    Parameters are serialized as little-endian float64 in layer order,
    weights before biases within a layer.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "input_shape": list(net.input_shape),
        "seed": net.rng_seed,
        "layers": net.descriptors(),
        "params": [
            {"layer": i, "name": name, "shape": list(p.shape)}
            for i, layer in enumerate(net.layers)
            for name, p in layer.params.items()
        ],
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for layer in net.layers:
            for p in layer.params.values():
                f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> Network:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r} (expected {CHECKPOINT_MAGIC!r})")
        header_line = f.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
        net = build_network(header["input_shape"], header["layers"], header["seed"])
        for entry in header["params"]:
            layer = net.layers[entry["layer"]]
            shape = tuple(entry["shape"])
            n = int(np.prod(shape))
            raw = f.read(n * 8)
            if len(raw) != n * 8:
                raise ValueError("truncated checkpoint parameter payload")
            layer.params[entry["name"]] = (
                np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            )
        extra = f.read(1)
        if extra:
            raise ValueError("trailing bytes after checkpoint parameters")
    return net


def checkpoint_hash(path) -> str:
    """Short sha256 of the checkpoint file, used to key report filenames."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]
