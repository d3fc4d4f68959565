"""Sequential network over a single flat float64 parameter vector."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from feddrl.nn.layers import (
    Conv2d,
    Dense,
    Identity,
    Layer,
    LeakyReLU,
    ReLU,
    Softmax,
    layer_from_descriptor,
)


class NonFiniteError(ArithmeticError):
    """Raised when an activation, loss or gradient stops being finite."""


class Network:
    """A feed-forward stack of layers sharing one parameter buffer.

    ``params`` and ``grads`` are flat vectors; every parametric layer holds
    reshaped views into them, so ``set_params`` updates the model in place
    and the parameter count never changes after construction.
    """

    def __init__(
        self,
        layers: Sequence[Layer],
        input_shape: Sequence[int],
        rng: np.random.Generator | int | None = None,
    ):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.input_size = int(np.prod(self.input_shape))
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape

        sizes = [int(np.prod(s)) for layer in self.layers for s in layer.param_shapes()]
        self.params = np.zeros(sum(sizes))
        self.grads = np.zeros(sum(sizes))
        offset = 0
        for layer in self.layers:
            pv, gv = [], []
            for s in layer.param_shapes():
                n = int(np.prod(s))
                pv.append(self.params[offset : offset + n].reshape(s))
                gv.append(self.grads[offset : offset + n].reshape(s))
                offset += n
            layer.bind(pv, gv)

        self.mode = "train"
        self._forwarded = False
        self.input_grad: np.ndarray | None = None
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.init_params(rng)

    @classmethod
    def mlp(
        cls,
        sizes: Sequence[int],
        hidden_activation: str = "relu",
        rng: np.random.Generator | int | None = None,
    ) -> "Network":
        """Dense stack ``sizes[0] -> ... -> sizes[-1]`` with a linear head."""
        act = {"relu": ReLU, "leaky_relu": LeakyReLU, "identity": Identity, "softmax": Softmax}
        layers: list[Layer] = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            layers.append(Dense(a, b))
            if i < len(sizes) - 2:
                layers.append(act[hidden_activation]())
        return cls(layers, (sizes[0],), rng=rng)

    @classmethod
    def from_descriptors(cls, descriptors: Sequence[dict], input_shape: Sequence[int]) -> "Network":
        return cls([layer_from_descriptor(d) for d in descriptors], input_shape, rng=0)

    def init_params(self, rng: np.random.Generator) -> None:
        for layer in self.layers:
            bound = 1.0 / np.sqrt(layer.fan_in())
            for view in layer._params:
                view[...] = rng.uniform(-bound, bound, size=view.shape)

    @property
    def n_params(self) -> int:
        return self.params.size

    def descriptors(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]

    def get_params(self) -> np.ndarray:
        out = self.params.copy()
        out.flags.writeable = False
        return out

    def set_params(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.params.shape:
            raise ValueError(f"expected {self.params.size} parameters, got {values.shape}")
        np.copyto(self.params, values)

    def clone(self) -> "Network":
        # deepcopy would detach the layer views from the flat buffer
        twin = Network.from_descriptors(self.descriptors(), self.input_shape)
        twin.set_params(self.params)
        twin.mode = self.mode
        return twin

    def train(self) -> "Network":
        self.mode = "train"
        return self

    def eval(self) -> "Network":
        self.mode = "eval"
        return self

    def _as_batch(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape or (x.ndim == 1 and x.size == self.input_size):
            return x.reshape((1,) + self.input_shape), True
        if x.ndim >= 2 and int(np.prod(x.shape[1:])) == self.input_size:
            return x.reshape((x.shape[0],) + self.input_shape), False
        raise ValueError(f"input shape {x.shape} does not match network input {self.input_shape}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Run the stack on a batch (or a single sample) and cache activations."""
        out, single = self._as_batch(x)
        for layer in self.layers:
            out = layer.forward(out)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("non-finite network output")
        self._forwarded = True
        self._single = single
        return out[0] if single else out

    __call__ = forward

    def backward(self, loss_grad: np.ndarray) -> np.ndarray:
        """Backpropagate ``dL/d(output)``; returns a copy of ``dL/d(params)``.

        The gradient with respect to the network input is left in
        ``self.input_grad``.
        """
        self._backward(loss_grad)
        return self.grads.copy()

    def _backward(self, loss_grad: np.ndarray) -> None:
        if not self._forwarded:
            raise RuntimeError("backward called before forward")
        g = np.asarray(loss_grad, dtype=np.float64)
        if self._single:
            g = g.reshape((1,) + self.output_shape)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        if not np.all(np.isfinite(self.grads)):
            raise NonFiniteError("non-finite gradient")
        self.input_grad = g[0].reshape(-1) if self._single else g.reshape(g.shape[0], -1)


def build_classifier(
    kind: str,
    input_shape: Sequence[int],
    n_classes: int,
    hidden: int = 64,
    channels: int = 8,
    kernel: int = 5,
    rng: np.random.Generator | int | None = None,
) -> Network:
    """Client model: ``mlp`` (one hidden layer) or a small ``cnn``."""
    input_shape = tuple(input_shape)
    if kind == "mlp":
        return Network.mlp([int(np.prod(input_shape)), hidden, n_classes], "relu", rng=rng)
    if kind == "cnn":
        if len(input_shape) == 1:
            side = int(round(np.sqrt(input_shape[0])))
            if side * side != input_shape[0]:
                raise ValueError("cnn needs square image input")
            input_shape = (1, side, side)
        c, h, w = input_shape
        conv_out = channels * (h - kernel + 1) * (w - kernel + 1)
        layers = [
            Conv2d(c, channels, kernel),
            ReLU(),
            Dense(conv_out, hidden),
            ReLU(),
            Dense(hidden, n_classes),
        ]
        return Network(layers, input_shape, rng=rng)
    raise ValueError(f"unknown model kind {kind!r}")
