"""Minimal CPU neural-network kernel: conv / pool / upsample / dense layers,
sigmoid and softmax heads, binary cross-entropy, and plain SGD.

Networks are fixed sequential chains; there is no autograd graph. Gradients
are exact analytic expressions and are validated against central finite
differences in the test suite. 64-bit precision is used for tests, 32-bit is
fine at runtime.
"""
from __future__ import annotations

import json
from typing import Sequence

import numpy as np

WEIGHT_FORMAT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteGradient(RuntimeError):
    pass


class WeightFormatError(RuntimeError):
    pass


def _he_scale(fan_in: int) -> float:
    return float(np.sqrt(2.0 / max(1, fan_in)))


class Layer:
    """Base layer. Subclasses fill ``params``/``grads`` with matching arrays."""

    def __init__(self) -> None:
        self.params: list[np.ndarray] = []
        self.grads: list[np.ndarray] = []

    def build(self, in_shape: tuple, rng: np.random.Generator, dtype) -> tuple:
        raise NotImplementedError

    def forward(self, x: np.ndarray):
        y, _ = self.forward_train(x)
        return y

    def forward_train(self, x: np.ndarray):
        raise NotImplementedError

    def backward(self, dy: np.ndarray, cache):
        raise NotImplementedError

    def descriptor(self) -> dict:
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, out_channels: int, kernel: int = 3, padding: str = "same"):
        super().__init__()
        if padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        self.out_channels = out_channels
        self.kernel = kernel
        self.padding = padding

    def build(self, in_shape, rng, dtype):
        c, h, w = in_shape
        k = self.kernel
        fan_in = c * k * k
        scale = _he_scale(fan_in)
        weight = rng.uniform(-scale, scale, size=(self.out_channels, c, k, k)).astype(dtype)
        bias = np.zeros(self.out_channels, dtype=dtype)
        self.params = [weight, bias]
        self.grads = [np.zeros_like(weight), np.zeros_like(bias)]
        self.in_shape = (c, h, w)
        if self.padding == "same":
            self.pad = (k - 1) // 2
            out_h, out_w = h, w
        else:
            self.pad = 0
            out_h, out_w = h - k + 1, w - k + 1
        if out_h <= 0 or out_w <= 0:
            raise ShapeMismatch(f"conv kernel {k} too large for input {in_shape}")
        return (self.out_channels, out_h, out_w)

    def _im2col(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        k, p = self.kernel, self.pad
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        oh = h + 2 * p - k + 1
        ow = w + 2 * p - k + 1
        cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = x[:, :, i : i + oh, j : j + ow]
        return cols.reshape(n, c * k * k, oh * ow)

    def forward_train(self, x):
        if x.shape[1:] != self.in_shape:
            raise ShapeMismatch(f"conv expected {self.in_shape}, got {x.shape[1:]}")
        n = x.shape[0]
        weight, bias = self.params
        cols = self._im2col(x)
        ckk = cols.shape[1]
        wmat = weight.reshape(self.out_channels, ckk)
        flat = cols.transpose(1, 0, 2).reshape(ckk, -1)
        out = (wmat @ flat).reshape(self.out_channels, n, -1).transpose(1, 0, 2)
        k, p = self.kernel, self.pad
        oh = self.in_shape[1] + 2 * p - k + 1
        ow = self.in_shape[2] + 2 * p - k + 1
        out = np.ascontiguousarray(out.reshape(n, self.out_channels, oh, ow))
        out += bias[None, :, None, None]
        return out, (flat, x.shape)

    def backward(self, dy, cache):
        flat, x_shape = cache
        n = dy.shape[0]
        weight, _ = self.params
        k, p = self.kernel, self.pad
        c, h, w = self.in_shape
        dy_flat = dy.reshape(n, self.out_channels, -1).transpose(1, 0, 2).reshape(self.out_channels, -1)
        dw = (dy_flat @ flat.T).reshape(weight.shape)
        db = dy_flat.sum(axis=1)
        wmat = weight.reshape(self.out_channels, -1)
        dcols_flat = wmat.T @ dy_flat
        oh = h + 2 * p - k + 1
        ow = w + 2 * p - k + 1
        dcols = dcols_flat.reshape(c, k, k, n, oh, ow)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + oh, j : j + ow] += dcols[:, i, j].transpose(1, 0, 2, 3)
        dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        self.grads[0] += dw
        self.grads[1] += db
        return dx

    def descriptor(self):
        return {"type": "conv", "out_channels": self.out_channels, "kernel": self.kernel, "padding": self.padding}


class MaxPool2(Layer):
    def build(self, in_shape, rng, dtype):
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise ShapeMismatch(f"pooling needs even spatial dims, got {in_shape}")
        self.in_shape = in_shape
        return (c, h // 2, w // 2)

    def forward_train(self, x):
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    def backward(self, dy, cache):
        idx, x_shape = cache
        n, c, h, w = x_shape
        dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return dx

    def descriptor(self):
        return {"type": "pool"}


class Upsample2(Layer):
    """Nearest-neighbor 2x upsampling (decoder side of the hourglass nets)."""

    def build(self, in_shape, rng, dtype):
        c, h, w = in_shape
        self.in_shape = in_shape
        return (c, h * 2, w * 2)

    def forward_train(self, x):
        out = x.repeat(2, axis=2).repeat(2, axis=3)
        return out, x.shape

    def backward(self, dy, cache):
        n, c, h, w = cache
        return dy.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))

    def descriptor(self):
        return {"type": "upsample"}


class Flatten(Layer):
    def build(self, in_shape, rng, dtype):
        self.in_shape = in_shape
        return (int(np.prod(in_shape)),)

    def forward_train(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache)

    def descriptor(self):
        return {"type": "flatten"}


class Dense(Layer):
    def __init__(self, width: int):
        super().__init__()
        self.width = width

    def build(self, in_shape, rng, dtype):
        (fan_in,) = in_shape
        scale = _he_scale(fan_in)
        weight = rng.uniform(-scale, scale, size=(fan_in, self.width)).astype(dtype)
        bias = np.zeros(self.width, dtype=dtype)
        self.params = [weight, bias]
        self.grads = [np.zeros_like(weight), np.zeros_like(bias)]
        self.in_shape = in_shape
        return (self.width,)

    def forward_train(self, x):
        if x.shape[1:] != self.in_shape:
            raise ShapeMismatch(f"dense expected {self.in_shape}, got {x.shape[1:]}")
        weight, bias = self.params
        return x @ weight + bias, x

    def backward(self, dy, cache):
        x = cache
        weight, _ = self.params
        self.grads[0] += x.T @ dy
        self.grads[1] += dy.sum(axis=0)
        return dy @ weight.T

    def descriptor(self):
        return {"type": "dense", "width": self.width}


class Relu(Layer):
    def build(self, in_shape, rng, dtype):
        return in_shape

    def forward_train(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache):
        return dy * cache

    def descriptor(self):
        return {"type": "relu"}


class LeakyRelu(Layer):
    """Leaky rectifier; the small negative slope keeps gradients alive, which
    plain SGD needs on these tiny nets (hard ReLUs can die wholesale while
    the output bias chases the class prior)."""

    def __init__(self, slope: float = 0.1):
        super().__init__()
        self.slope = slope

    def build(self, in_shape, rng, dtype):
        return in_shape

    def forward_train(self, x):
        mask = x > 0
        out = np.where(mask, x, self.slope * x)
        return out, mask

    def backward(self, dy, cache):
        return np.where(cache, dy, self.slope * dy)

    def descriptor(self):
        return {"type": "leaky_relu", "slope": self.slope}


class Sigmoid(Layer):
    def build(self, in_shape, rng, dtype):
        return in_shape

    def forward_train(self, x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out, out

    def backward(self, dy, cache):
        s = cache
        return dy * s * (1.0 - s)

    def descriptor(self):
        return {"type": "sigmoid"}


_LAYER_TYPES = {
    "conv": lambda d: Conv2D(d["out_channels"], d["kernel"], d["padding"]),
    "pool": lambda d: MaxPool2(),
    "upsample": lambda d: Upsample2(),
    "flatten": lambda d: Flatten(),
    "dense": lambda d: Dense(d["width"]),
    "relu": lambda d: Relu(),
    "leaky_relu": lambda d: LeakyRelu(d.get("slope", 0.1)),
    "sigmoid": lambda d: Sigmoid(),
}


class Network:
    """Fixed sequential chain of layers with explicit backward."""

    def __init__(self, layers: Sequence[Layer], input_shape: tuple, seed: int = 0, dtype=np.float64):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.dtype = np.dtype(dtype)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.build(shape, rng, self.dtype)
        self.output_shape = shape

    # -- inference -----------------------------------------------------------

    def _promote(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape == self.input_shape:
            return x[None, ...], True
        if x.shape[1:] == self.input_shape:
            return x, False
        raise ShapeMismatch(f"input shape {x.shape} incompatible with {self.input_shape}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        xb, single = self._promote(x)
        for layer in self.layers:
            xb = layer.forward(xb)
        return xb[0] if single else xb

    def forward_train(self, x: np.ndarray):
        xb, _ = self._promote(x)
        caches = []
        for layer in self.layers:
            xb, cache = layer.forward_train(xb)
            caches.append(cache)
        return xb, caches

    def backward(self, dy: np.ndarray, caches) -> np.ndarray:
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(dy, cache)
        return dy

    # -- parameters ------------------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def gradients(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads]

    def zero_grads(self) -> None:
        for g in self.gradients():
            g[...] = 0.0

    def sgd_step(self, learning_rate: float) -> None:
        if learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        for p, g in zip(self.parameters(), self.gradients()):
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient("gradient contains non-finite values")
            p -= learning_rate * g

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def descriptors(self) -> list[dict]:
        return [layer.descriptor() for layer in self.layers]


def build_network(descriptors: Sequence[dict], input_shape: tuple, seed: int = 0, dtype=np.float64) -> Network:
    layers = []
    for d in descriptors:
        kind = d["type"]
        if kind not in _LAYER_TYPES:
            raise ValueError(f"unknown layer type {kind!r}")
        layers.append(_LAYER_TYPES[kind](d))
    return Network(layers, input_shape, seed=seed, dtype=dtype)


# -- losses --------------------------------------------------------------------


def bce_loss(pred: np.ndarray, target: np.ndarray, clamp_eps: float = 1e-7):
    """Mean binary cross-entropy and its gradient with respect to ``pred``.

    ``pred`` must lie in (0, 1) up to the clamp epsilon; anything further out
    is a caller bug, not a numerical artifact.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    if np.any(pred < -clamp_eps) or np.any(pred > 1.0 + clamp_eps):
        raise DomainError("predictions outside (0, 1) beyond clamp epsilon")
    p = np.clip(pred, clamp_eps, 1.0 - clamp_eps)
    n = p.size
    loss = float(np.mean(-target * np.log(p) - (1.0 - target) * np.log(1.0 - p)))
    grad = (-(target / p) + (1.0 - target) / (1.0 - p)) / n
    return loss, grad


def combined_bce(seg_pred, seg_target, heat_pred, heat_target):
    """Equal-weight sum of segmentation and heatmap BCE terms."""
    l1, g1 = bce_loss(seg_pred, seg_target)
    l2, g2 = bce_loss(heat_pred, heat_target)
    return l1 + l2, g1, g2


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce_loss(logits: np.ndarray, onehot: np.ndarray):
    """Mean categorical cross-entropy over a softmax head; grad w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    onehot = np.asarray(onehot, dtype=np.float64)
    if logits.shape != onehot.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs target {onehot.shape}")
    probs = softmax(logits)
    n = logits.shape[0]
    loss = float(-np.sum(onehot * np.log(np.clip(probs, 1e-12, None))) / n)
    grad = (probs - onehot) / n
    return loss, grad


# -- training helpers --------------------------------------------------------------


def train_step_softmax(net: Network, batch_x: np.ndarray, batch_onehot: np.ndarray, learning_rate: float) -> float:
    """One SGD step on a softmax-classification batch; returns the loss."""
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    net.zero_grads()
    logits, caches = net.forward_train(batch_x)
    loss, dlogits = softmax_ce_loss(logits, batch_onehot)
    net.backward(dlogits.astype(net.dtype), caches)
    net.sgd_step(learning_rate)
    return loss


# -- weight persistence --------------------------------------------------------------


def save_weights(net: Network, path) -> None:
    """Versioned binary dump of layer descriptors plus row-major data."""
    meta = {
        "version": WEIGHT_FORMAT_VERSION,
        "input_shape": list(net.input_shape),
        "seed": net.seed,
        "dtype": net.dtype.name,
        "layers": net.descriptors(),
    }
    arrays = {f"param_{i}": p for i, p in enumerate(net.parameters())}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_weights(path) -> Network:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != WEIGHT_FORMAT_VERSION:
            raise WeightFormatError(f"unsupported weight format version {meta.get('version')}")
        net = build_network(
            meta["layers"], tuple(meta["input_shape"]), seed=meta["seed"], dtype=np.dtype(meta["dtype"])
        )
        params = net.parameters()
        for i, p in enumerate(params):
            stored = data[f"param_{i}"]
            if stored.shape != p.shape:
                raise WeightFormatError(f"param {i} shape {stored.shape} != expected {p.shape}")
            p[...] = stored
    return net


def weights_equal(a: Network, b: Network) -> bool:
    pa, pb = a.parameters(), b.parameters()
    return len(pa) == len(pb) and all(np.array_equal(x, y) for x, y in zip(pa, pb))
