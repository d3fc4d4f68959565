"""Layer implementations with hand-written backward passes.

Each layer owns views into its network's flat parameter and gradient
buffers, so the whole model can be exported as one float64 vector.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAKY_SLOPE = 0.01


class Layer:
    """Base class. Parametric layers override ``param_shapes``."""

    kind = "layer"

    def describe(self) -> dict:
        raise NotImplementedError

    def param_shapes(self) -> list[tuple[int, ...]]:
        return []

    def fan_in(self) -> int:
        return 1

    def bind(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self._params = params
        self._grads = grads

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return input_shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int):
        if n_in < 1 or n_out < 1:
            raise ValueError(f"dense sizes must be positive, got {n_in}x{n_out}")
        self.n_in = n_in
        self.n_out = n_out

    def describe(self) -> dict:
        return {"type": "dense", "in": self.n_in, "out": self.n_out}

    def param_shapes(self):
        return [(self.n_in, self.n_out), (self.n_out,)]

    def fan_in(self) -> int:
        return self.n_in

    def output_shape(self, input_shape):
        if int(np.prod(input_shape)) != self.n_in:
            raise ValueError(f"dense layer expects {self.n_in} features, got shape {input_shape}")
        return (self.n_out,)

    def forward(self, x):
        self._in_shape = x.shape
        x2 = x.reshape(x.shape[0], -1)
        self._x = x2
        w, b = self._params
        return x2 @ w + b

    def backward(self, grad):
        w, _ = self._params
        gw, gb = self._grads
        np.matmul(self._x.T, grad, out=gw)
        np.sum(grad, axis=0, out=gb)
        return (grad @ w.T).reshape(self._in_shape)


class Conv2d(Layer):
    """Stride-1, unpadded 2-D convolution over (batch, channels, h, w) input."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int):
        if min(in_channels, out_channels, kernel) < 1:
            raise ValueError("conv2d sizes must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel

    def describe(self) -> dict:
        return {
            "type": "conv2d",
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
        }

    def param_shapes(self):
        k = self.kernel
        return [(self.out_channels, self.in_channels * k * k), (self.out_channels,)]

    def fan_in(self) -> int:
        return self.in_channels * self.kernel * self.kernel

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ValueError(
                f"conv2d expects ({self.in_channels}, h, w) input, got {input_shape}"
            )
        _, h, w = input_shape
        if h < self.kernel or w < self.kernel:
            raise ValueError(f"input {h}x{w} smaller than kernel {self.kernel}")
        return (self.out_channels, h - self.kernel + 1, w - self.kernel + 1)

    def forward(self, x):
        k = self.kernel
        b_sz, c, h, w = x.shape
        ho, wo = h - k + 1, w - k + 1
        win = sliding_window_view(x, (k, k), axis=(2, 3))  # (B, C, ho, wo, k, k)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b_sz * ho * wo, c * k * k)
        self._cols = cols
        self._x_shape = x.shape
        wmat, bias = self._params
        out = cols @ wmat.T + bias
        return out.reshape(b_sz, ho, wo, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad):
        k = self.kernel
        b_sz, c, h, w = self._x_shape
        ho, wo = h - k + 1, w - k + 1
        wmat, _ = self._params
        gw, gb = self._grads
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        np.matmul(g2.T, self._cols, out=gw)
        np.sum(g2, axis=0, out=gb)
        dcols = (g2 @ wmat).reshape(b_sz, ho, wo, c, k, k)
        dx = np.zeros(self._x_shape)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + ho, j : j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx


class Activation(Layer):
    kind = "activation"
    fn = "identity"

    def describe(self) -> dict:
        return {"type": "activation", "fn": self.fn}


class Identity(Activation):
    fn = "identity"

    def forward(self, x):
        return x

    def backward(self, grad):
        return grad


class ReLU(Activation):
    fn = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0)


class LeakyReLU(Activation):
    fn = "leaky_relu"

    def __init__(self, slope: float = LEAKY_SLOPE):
        self.slope = slope

    def describe(self) -> dict:
        return {"type": "activation", "fn": self.fn, "slope": self.slope}

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, self.slope * x)

    def backward(self, grad):
        return np.where(self._mask, grad, self.slope * grad)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


class Softmax(Activation):
    fn = "softmax"

    def forward(self, x):
        self._y = softmax(x)
        return self._y

    def backward(self, grad):
        y = self._y
        return y * (grad - np.sum(grad * y, axis=-1, keepdims=True))


_ACTIVATIONS = {cls.fn: cls for cls in (Identity, ReLU, LeakyReLU, Softmax)}


def layer_from_descriptor(desc: dict) -> Layer:
    kind = desc.get("type")
    if kind == "dense":
        return Dense(int(desc["in"]), int(desc["out"]))
    if kind == "conv2d":
        return Conv2d(int(desc["in_channels"]), int(desc["out_channels"]), int(desc["kernel"]))
    if kind == "activation":
        fn = desc.get("fn")
        if fn not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {fn!r}")
        if fn == "leaky_relu":
            return LeakyReLU(float(desc.get("slope", LEAKY_SLOPE)))
        return _ACTIVATIONS[fn]()
    raise ValueError(f"unknown layer type {kind!r}")
