"""Minimal differentiable layer zoo, float64, NCHW layout.

Each layer caches what its backward pass needs during forward; backward
consumes the cache and accumulates parameter gradients into `self.grads`.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidArgumentError


class Layer:
    """Base layer: stateless by default, trainable flag checked by the optimizer."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.trainable = True

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def descriptor(self) -> dict:
        return {"kind": type(self).__name__}


class Conv2d(Layer):
    """k x k convolution, stride 1, same padding."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator | None = None):
        super().__init__()
        if kernel % 2 == 0:
            raise InvalidArgumentError("same-padding conv needs an odd kernel")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        self.params = {
            "w": rng.normal(0.0, std, (fan_in, out_ch)),
            "b": np.zeros(out_ch),
        }
        self.zero_grads()

    def _im2col(self, x_pad, h, w):
        n = x_pad.shape[0]
        k = self.kernel
        cols = np.empty((n, h, w, self.in_ch * k * k))
        i = 0
        for c in range(self.in_ch):
            for ky in range(k):
                for kx in range(k):
                    cols[:, :, :, i] = x_pad[:, c, ky:ky + h, kx:kx + w]
                    i += 1
        return cols

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise InvalidArgumentError(
                f"Conv2d expected (N,{self.in_ch},H,W), got {x.shape}")
        n, _, h, w = x.shape
        p = self.kernel // 2
        x_pad = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = self._im2col(x_pad, h, w)
        out = cols @ self.params["w"] + self.params["b"]
        self._cache = (cols, x.shape)
        return out.transpose(0, 3, 1, 2)

    def backward(self, dout):
        cols, x_shape = self._cache
        n, _, h, w = x_shape
        k, p = self.kernel, self.kernel // 2
        dflat = dout.transpose(0, 2, 3, 1)  # (N,H,W,out_ch)
        self.grads["w"] += np.tensordot(cols, dflat, axes=([0, 1, 2], [0, 1, 2]))
        self.grads["b"] += dflat.sum(axis=(0, 1, 2))
        dcols = dflat @ self.params["w"].T  # (N,H,W,in_ch*k*k)
        dx_pad = np.zeros((n, self.in_ch, h + 2 * p, w + 2 * p))
        i = 0
        for c in range(self.in_ch):
            for ky in range(k):
                for kx in range(k):
                    dx_pad[:, c, ky:ky + h, kx:kx + w] += dcols[:, :, :, i]
                    i += 1
        return dx_pad[:, :, p:p + h, p:p + w]

    def descriptor(self):
        return {"kind": "Conv2d", "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": self.kernel}


class Dense(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / in_dim)
        self.params = {"w": rng.normal(0.0, std, (in_dim, out_dim)), "b": np.zeros(out_dim)}
        self.zero_grads()

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise InvalidArgumentError(f"Dense expected (N,{self.in_dim}), got {x.shape}")
        self._cache = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dout):
        x = self._cache
        self.grads["w"] += x.T @ dout
        self.grads["b"] += dout.sum(axis=0)
        return dout @ self.params["w"].T

    def descriptor(self):
        return {"kind": "Dense", "in_dim": self.in_dim, "out_dim": self.out_dim}


class ReLU(Layer):
    def forward(self, x, training=False):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, dout):
        return np.where(self._cache, dout, 0.0)


class MaxPool2d(Layer):
    """2x2 max pooling, stride 2; spatial dims must be even."""

    def forward(self, x, training=False):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise InvalidArgumentError(f"MaxPool2d needs even spatial dims, got {h}x{w}")
        windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        windows = windows.reshape(n, c, h // 2, w // 2, 4)
        self._argmax = windows.argmax(axis=4)
        self._shape = x.shape
        return windows.max(axis=4)

    def backward(self, dout):
        n, c, h, w = self._shape
        dwin = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(dwin, self._argmax[..., None], dout[..., None], axis=4)
        dwin = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return dwin.reshape(n, c, h, w)


class GlobalAvgPool(Layer):
    """(N, C, H, W) -> (N, C) spatial mean."""

    def forward(self, x, training=False):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        n, c, h, w = self._shape
        return np.broadcast_to(dout[:, :, None, None], (n, c, h, w)) / (h * w)


class Flatten(Layer):
    def forward(self, x, training=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dropout(Layer):
    """Inverted dropout; identity in inference mode."""

    def __init__(self, rate: float, seed: int = 0):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise InvalidArgumentError("dropout rate must be in [0, 1)")
        self.rate = rate
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def reseed(self, seed: int):
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def forward(self, x, training=False):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (self._rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, dout):
        if self._mask is None:
            return dout
        return dout * self._mask

    def descriptor(self):
        return {"kind": "Dropout", "rate": self.rate}


class Softmax(Layer):
    def forward(self, x, training=False):
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        self._out = e / e.sum(axis=1, keepdims=True)
        return self._out

    def backward(self, dout):
        p = self._out
        return p * (dout - (dout * p).sum(axis=1, keepdims=True))


_LAYER_KINDS = {
    "Conv2d": lambda d: Conv2d(d["in_ch"], d["out_ch"], d["kernel"]),
    "Dense": lambda d: Dense(d["in_dim"], d["out_dim"]),
    "ReLU": lambda d: ReLU(),
    "MaxPool2d": lambda d: MaxPool2d(),
    "GlobalAvgPool": lambda d: GlobalAvgPool(),
    "Flatten": lambda d: Flatten(),
    "Dropout": lambda d: Dropout(d["rate"]),
    "Softmax": lambda d: Softmax(),
}


def layer_from_descriptor(desc: dict) -> Layer:
    kind = desc.get("kind")
    if kind not in _LAYER_KINDS:
        raise InvalidArgumentError(f"unknown layer kind {kind!r}")
    return _LAYER_KINDS[kind](desc)
