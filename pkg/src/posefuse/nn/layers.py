"""Layers with hand-written forward and backward passes.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` (same keys as
``self.params``).  Arrays are float64 throughout.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatch, ValidationError


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def config(self) -> dict:
        return {}


class Dense(Layer):
    """``y = x @ W.T + b`` with ``W`` of shape (out_features, in_features)."""

    def __init__(self, in_features: int, out_features: int, rng=None, bias_init: str = "zero"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.params["weight"] = he_uniform(rng, (out_features, in_features), in_features)
        if bias_init == "uniform":
            lim = 1.0 / np.sqrt(in_features)
            self.params["bias"] = rng.uniform(-lim, lim, size=out_features)
        else:
            self.params["bias"] = np.zeros(out_features)
        self.zero_grad()
        self._x = None

    @property
    def weight(self) -> np.ndarray:
        return self.params["weight"]

    @property
    def bias(self) -> np.ndarray:
        return self.params["bias"]

    @property
    def shape(self) -> tuple[int, int]:
        return self.params["weight"].shape

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatch(f"dense layer expects (N, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        self.grads["weight"] += grad.T @ self._x
        self.grads["bias"] += grad.sum(axis=0)
        return grad @ self.params["weight"]

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features}


class Conv2d(Layer):
    """Square-kernel convolution on (N, C, H, W) inputs via im2col."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=0, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_channels * kernel_size * kernel_size
        self.params["weight"] = he_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        lim = 1.0 / np.sqrt(fan_in)
        self.params["bias"] = rng.uniform(-lim, lim, size=out_channels)
        self.zero_grad()
        self._cache = None

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"conv expects (N, {self.in_channels}, H, W), got {x.shape}")
        k, s, p = self.kernel_size, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        # (N, C, Ho, Wo, k, k)
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        out = np.einsum("nchwij,ocij->nohw", win, self.params["weight"], optimize=True)
        out += self.params["bias"][None, :, None, None]
        self._cache = (x.shape, xp.shape, win)
        return out

    def backward(self, grad):
        x_shape, xp_shape, win = self._cache
        k, s, p = self.kernel_size, self.stride, self.padding
        self.grads["weight"] += np.einsum("nchwij,nohw->ocij", win, grad, optimize=True)
        self.grads["bias"] += grad.sum(axis=(0, 2, 3))
        ho, wo = grad.shape[2], grad.shape[3]
        dxp = np.zeros(xp_shape)
        dwin = np.einsum("nohw,ocij->ncijhw", grad, self.params["weight"], optimize=True)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dwin[:, :, i, j]
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp

    def config(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "stride": self.stride, "padding": self.padding}


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class Shift(Layer):
    """Subtracts a per-feature offset from (N, F) inputs."""

    def __init__(self, features: int):
        super().__init__()
        self.params["offset"] = np.zeros(features)

    def forward(self, x, train=False):
        if x.shape[-1] != self.params["offset"].shape[0]:
            raise ShapeMismatch(f"expected {self.params['offset'].shape[0]} features, got {x.shape[-1]}")
        return x - self.params["offset"]

    def backward(self, grad):
        self.grads["offset"] += -grad.sum(axis=0)
        return grad

    def config(self):
        return {"features": int(self.params["offset"].shape[0])}


def _bins(size: int, out: int) -> list[tuple[int, int]]:
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


class AdaptiveAvgPool2d(Layer):
    """Average over a fixed grid of (possibly overlapping) bins, any input size."""

    def __init__(self, output_size: int):
        super().__init__()
        self.output_size = output_size

    def forward(self, x, train=False):
        self._shape = x.shape
        o = self.output_size
        self._hb, self._wb = _bins(x.shape[2], o), _bins(x.shape[3], o)
        out = np.empty(x.shape[:2] + (o, o))
        for i, (h0, h1) in enumerate(self._hb):
            for j, (w0, w1) in enumerate(self._wb):
                out[:, :, i, j] = x[:, :, h0:h1, w0:w1].mean(axis=(2, 3))
        return out

    def backward(self, grad):
        dx = np.zeros(self._shape)
        for i, (h0, h1) in enumerate(self._hb):
            for j, (w0, w1) in enumerate(self._wb):
                area = (h1 - h0) * (w1 - w0)
                dx[:, :, h0:h1, w0:w1] += grad[:, :, i, j][:, :, None, None] / area
        return dx

    def config(self):
        return {"output_size": self.output_size}


class Flatten(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class AvgPool1d(Layer):
    """Non-overlapping average pooling along the feature axis of (N, F) inputs."""

    def __init__(self, window: int = 2):
        super().__init__()
        self.window = window

    def forward(self, x, train=False):
        n, f = x.shape
        if f % self.window:
            raise ShapeMismatch(f"feature width {f} not divisible by pool window {self.window}")
        return x.reshape(n, f // self.window, self.window).mean(axis=2)

    def backward(self, grad):
        return np.repeat(grad / self.window, self.window, axis=1)

    def config(self):
        return {"window": self.window}


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    def __init__(self, rate: float = 0.5, rng=None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._mask = None

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._mask = keep / (1.0 - self.rate)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask

    def config(self):
        return {"rate": self.rate}


class Sequential(Layer):
    def __init__(self, layers: list[tuple[str, Layer]]):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False):
        for _, layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for _, layer in self.layers:
            layer.zero_grad()

    def named_layers(self, prefix: str = ""):
        for name, layer in self.layers:
            yield prefix + name, layer
