"""Layers with explicit forward/backward passes on (n, c, h, w) arrays.

Each layer caches what its backward pass needs during ``forward``; calling
``backward`` fills ``grads`` (same keys as ``params``) and returns the
gradient with respect to the layer input.
"""

from __future__ import annotations

import numpy as np


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class Conv2D(Layer):
    """Stride-1 convolution with "same" zero padding (odd kernels only)."""

    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("only odd kernel sizes keep 'same' padding symmetric")
        self.kernel = kernel
        fan_in = in_channels * kernel * kernel
        # He-normal
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_channels, in_channels, kernel, kernel))
        self.params = {"W": w.astype(dtype), "b": np.zeros(out_channels, dtype=dtype)}
        # first layers can skip the input gradient during training
        self.input_grad = True
        self.zero_grad()

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        W = self.params["W"]
        cols = _im2col(x, self.kernel)
        out = np.matmul(W.reshape(W.shape[0], -1), cols) + self.params["b"][:, None]
        self._cache = (x.shape, cols)
        return out.reshape(n, W.shape[0], h, w)

    def backward(self, dout):
        (n, c, h, w), cols = self._cache
        W = self.params["W"]
        o = W.shape[0]
        d2 = dout.reshape(n, o, h * w)
        gw = np.zeros((o, cols.shape[1]), dtype=np.result_type(dout, cols))
        for i in range(n):
            gw += d2[i] @ cols[i].T
        self.grads["W"] = gw.reshape(W.shape)
        self.grads["b"] = d2.sum(axis=(0, 2))
        if not self.input_grad:
            return None
        # full correlation with the flipped kernel, i.e. a "same" conv of dout
        flipped = np.ascontiguousarray(W[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, -1)
        return np.matmul(flipped, _im2col(dout, self.kernel)).reshape(n, c, h, w)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(n, c, h, w) -> (n, c*k*k, h*w) patches with "same" zero padding."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((n, c, k, k, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(n, c * k * k, h * w)


class MaxPool2D(Layer):
    kind = "maxpool"

    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        s = self.size
        if h % s or w % s:
            raise ValueError(f"pooling {s}x{s} needs spatial dims divisible by {s}, got {h}x{w}")
        blocks = x.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // s, w // s, s * s)
        idx = blocks.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        (n, c, h, w), idx = self._cache
        s = self.size
        blocks = np.zeros((n, c, h // s, w // s, s * s), dtype=dout.dtype)
        np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
        return blocks.reshape(n, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train=False):
        self._out = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self._out

    def backward(self, dout):
        return dout * self._out * (1.0 - self._out)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    kind = "fc"

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32, zero_init: bool = False):
        super().__init__()
        if zero_init:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        self.params = {"W": w.astype(dtype), "b": np.zeros(fan_out, dtype=dtype)}
        self.zero_grad()

    def forward(self, x, train=False):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        self.grads["W"] = self._x.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["W"].T


class Dropout(Layer):
    """Inverted dropout; identity in eval mode or at rate 0."""

    kind = "dropout"

    def __init__(self, rate: float, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self.rng = rng

    def forward(self, x, train=False):
        if not train or self.rate == 0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._mask = keep.astype(x.dtype) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


class Upsample2D(Layer):
    """Nearest-neighbour upsampling by an integer factor."""

    kind = "upsample"

    def __init__(self, factor: int = 2):
        super().__init__()
        self.factor = factor

    def forward(self, x, train=False):
        f = self.factor
        return x.repeat(f, axis=2).repeat(f, axis=3)

    def backward(self, dout):
        n, c, h, w = dout.shape
        f = self.factor
        return dout.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5))


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers=()):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def named_layers(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield f"{prefix}{i}.{layer.kind}", layer


def concat_channels(parts: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(parts, axis=1)


def split_channels(grad: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    return np.split(grad, np.cumsum(sizes)[:-1], axis=1)
