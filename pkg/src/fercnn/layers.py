"""Layers with hand-written forward and backward passes.

Every layer exposes ``forward(x, mode)``, ``backward(grad)`` and two dicts,
``params`` and ``grads``, keyed by short parameter names. ``backward`` uses
whatever the most recent Train-mode ``forward`` cached.
"""

from __future__ import annotations

import enum

import numpy as np

from . import tensor
from .tensor import ShapeError


class Mode(enum.Enum):
    TRAIN = "train"
    INFER = "infer"


class StateError(RuntimeError):
    """Raised when backward is called without a matching Train-mode forward."""


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, mode: Mode) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray | None:
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def describe(self) -> dict:
        """Architecture facts that go into a checkpoint fingerprint."""
        return {"kind": self.kind}

    def _cached(self, name: str):
        value = getattr(self, name)
        if value is None:
            raise StateError(f"{self.kind}: backward called without a Train-mode forward")
        return value


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, kh: int, kw: int, cin: int, cout: int, dtype=np.float32,
                 need_input_grad: bool = True) -> None:
        super().__init__()
        self.params["kernels"] = np.zeros((kh, kw, cin, cout), dtype=dtype)
        self.params["bias"] = np.zeros(cout, dtype=dtype)
        self.need_input_grad = need_input_grad
        self.cached_input: np.ndarray | None = None

    @property
    def kernels(self) -> np.ndarray:
        return self.params["kernels"]

    @property
    def bias(self) -> np.ndarray:
        return self.params["bias"]

    def init_params(self, rng: np.random.Generator, scale: float = 1.0) -> None:
        kh, kw, cin, cout = self.kernels.shape
        self.params["kernels"][...] = scale * he_normal(rng, self.kernels.shape, kh * kw * cin, self.kernels.dtype)
        self.params["bias"][...] = 0

    def forward(self, x: np.ndarray, mode: Mode) -> np.ndarray:
        out = tensor.conv2d_valid(x, self.kernels, self.bias)
        self.cached_input = x if mode is Mode.TRAIN else None
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray | None:
        x = self._cached("cached_input")
        gx, gk, gb = tensor.conv2d_backward(x, self.kernels, grad, self.need_input_grad)
        self.grads["kernels"] = gk
        self.grads["bias"] = gb
        return gx

    def describe(self) -> dict:
        return {"kind": self.kind, "kernels": list(self.kernels.shape)}


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, dtype=np.float32) -> None:
        super().__init__()
        self.params["weights"] = np.zeros((n_in, n_out), dtype=dtype)
        self.params["bias"] = np.zeros(n_out, dtype=dtype)
        self.cached_input: np.ndarray | None = None

    @property
    def weights(self) -> np.ndarray:
        return self.params["weights"]

    @property
    def bias(self) -> np.ndarray:
        return self.params["bias"]

    def init_params(self, rng: np.random.Generator, scale: float = 1.0) -> None:
        n_in = self.weights.shape[0]
        self.params["weights"][...] = scale * he_normal(rng, self.weights.shape, n_in, self.weights.dtype)
        self.params["bias"][...] = 0

    def forward(self, x: np.ndarray, mode: Mode) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.weights.shape[0]:
            raise ShapeError(f"dense input {x.shape} incompatible with weights {self.weights.shape}")
        self.cached_input = x if mode is Mode.TRAIN else None
        return tensor.matmul(x, self.weights) + self.bias

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x = self._cached("cached_input")
        self.grads["weights"] = x.T @ grad
        self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.weights.T

    def describe(self) -> dict:
        return {"kind": self.kind, "weights": list(self.weights.shape)}


class BatchNorm(Layer):
    """Per-channel normalization over every axis except the last.

    Running statistics follow ``running = momentum * running + (1 - momentum) * batch``;
    the variance fed into the running average is the unbiased batch estimate.
    """

    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.99, epsilon: float = 1e-5,
                 dtype=np.float32) -> None:
        super().__init__()
        self.momentum = momentum
        self.epsilon = epsilon
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def gamma(self) -> np.ndarray:
        return self.params["gamma"]

    @property
    def beta(self) -> np.ndarray:
        return self.params["beta"]

    def init_params(self, rng: np.random.Generator) -> None:
        self.params["gamma"][...] = 1
        self.params["beta"][...] = 0
        self.running_mean[...] = 0
        self.running_var[...] = 1

    def forward(self, x: np.ndarray, mode: Mode) -> np.ndarray:
        c = self.gamma.shape[0]
        if x.shape[-1] != c:
            raise ShapeError(f"batchnorm over {c} channels got input {x.shape}")
        if mode is Mode.INFER:
            self._cache = None
            inv = 1.0 / np.sqrt(self.running_var + self.epsilon)
            return (x - self.running_mean) * (inv * self.gamma) + self.beta

        axes = tuple(range(x.ndim - 1))
        count = x.size // c
        if count < 2:
            raise ShapeError(
                f"batchnorm in train mode needs >= 2 values per channel, input {x.shape} gives {count}"
            )
        mean = x.mean(axis=axes)
        centered = x - mean
        var = (centered * centered).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = centered * inv_std
        self._cache = (xhat, inv_std)

        m = self.momentum
        unbiased = var * (count / (count - 1))
        self.running_mean[...] = m * self.running_mean + (1 - m) * mean
        self.running_var[...] = m * self.running_var + (1 - m) * unbiased
        return xhat * self.gamma + self.beta

    def backward(self, grad: np.ndarray) -> np.ndarray:
        xhat, inv_std = self._cached("_cache")
        axes = tuple(range(grad.ndim - 1))
        self.grads["beta"] = grad.sum(axis=axes)
        self.grads["gamma"] = (grad * xhat).sum(axis=axes)
        gxhat = grad * self.gamma
        return inv_std * (
            gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes)
        )

    def describe(self) -> dict:
        return {"kind": self.kind, "channels": int(self.gamma.shape[0]),
                "momentum": self.momentum, "epsilon": self.epsilon}


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 is taken as 0
    return grad * (x > 0)


class ReLU(Layer):
    kind = "relu"

    def __init__(self) -> None:
        super().__init__()
        self.cached_input: np.ndarray | None = None

    def forward(self, x: np.ndarray, mode: Mode) -> np.ndarray:
        self.cached_input = x if mode is Mode.TRAIN else None
        return relu(x)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return relu_backward(self._cached("cached_input"), grad)


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def __init__(self) -> None:
        super().__init__()
        self.index: tensor.PoolIndex | None = None

    def forward(self, x: np.ndarray, mode: Mode) -> np.ndarray:
        out, index = tensor.maxpool2d(x)
        self.index = index if mode is Mode.TRAIN else None
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return tensor.maxpool2d_backward(self._cached("index"), grad)

    def describe(self) -> dict:
        return {"kind": self.kind, "window": 2, "step": 2}


def flatten(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def unflatten(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return x.reshape(shape)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self) -> None:
        super().__init__()
        self.input_shape: tuple[int, ...] | None = None

    def forward(self, x: np.ndarray, mode: Mode) -> np.ndarray:
        self.input_shape = x.shape if mode is Mode.TRAIN else None
        return flatten(x)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return unflatten(grad, self._cached("input_shape"))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def init_params(layer: Layer, seed: int) -> None:
    """He-normal weights, zero biases, identity batchnorm; fully seeded."""
    layer.init_params(np.random.default_rng(seed))
