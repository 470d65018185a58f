"""Small layer library with hand-derived backward passes.

Activations travel channel-first: ``(C, B, T)`` for sequences and ``(H, B)``
for vectors, so every convolution and dense layer is a single GEMM over the
batch. Each layer caches what its backward pass needs during a forward call
with ``train=True``; calling ``backward`` without that cache raises
:class:`MissingForwardCache`.
"""

from __future__ import annotations

import numpy as np

from .errors import MissingForwardCache, ShapeMismatch


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free and several times faster than exp-based variants
    y = np.multiply(x, 0.5, dtype=np.result_type(x, np.float32))
    np.tanh(y, out=y)
    y *= 0.5
    y += 0.5
    return y


def softmax(x: np.ndarray, axis: int = 0) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Layer:
    """Base class: ``params``/``grads`` are dicts of same-shaped arrays."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _pop_cache(self):
        if self._cache is None:
            raise MissingForwardCache(f"{type(self).__name__}.backward called before a training forward pass")
        cache, self._cache = self._cache, None
        return cache


class Conv1d(Layer):
    """Same-length 1D convolution over time with taps at frames ``t, t-1, ..., t-N+1``.

    ``weight[k, c, n]`` multiplies input channel ``c`` delayed by ``n`` frames.
    """

    def __init__(self, in_channels: int, out_channels: int, width: int = 2, rng=None, dtype=np.float32):
        super().__init__()
        if width < 1:
            raise ValueError("kernel width must be >= 1")
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_channels, self.out_channels, self.width = in_channels, out_channels, width
        self.params["weight"] = glorot_uniform(
            rng, (out_channels, in_channels, width), in_channels * width, out_channels * width, dtype
        )
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self.zero_grad()

    def im2col(self, x: np.ndarray) -> np.ndarray:
        c, b, t = x.shape
        if c != self.in_channels:
            raise ShapeMismatch(f"conv expects {self.in_channels} input channels, got {c}")
        cols = np.zeros((c, self.width, b, t), dtype=x.dtype)
        for n in range(self.width):
            cols[:, n, :, n:] = x[:, :, : t - n]
        return cols.reshape(c * self.width, b * t)

    def forward(self, x: np.ndarray, train: bool = False, cols: np.ndarray | None = None) -> np.ndarray:
        c, b, t = x.shape
        if cols is None:
            cols = self.im2col(x)
        w2 = self.params["weight"].reshape(self.out_channels, -1)
        y = w2 @ cols + self.params["bias"][:, None]
        if train:
            self._cache = (cols, x.shape)
        return y.reshape(self.out_channels, b, t)

    def weight_matrix(self) -> np.ndarray:
        return self.params["weight"].reshape(self.out_channels, -1)

    def param_backward(self, grad: np.ndarray):
        """Fill weight/bias grads; returns the cached input shape."""
        cols, shape = self._pop_cache()
        g = grad.reshape(self.out_channels, -1)
        self.grads["weight"] = (g @ cols.T).reshape(self.params["weight"].shape)
        self.grads["bias"] = g.sum(axis=1)
        return shape

    def col2im(self, dcols: np.ndarray, shape) -> np.ndarray:
        """Adjoint of :meth:`im2col`."""
        c, b, t = shape
        dcols = dcols.reshape(c, self.width, b, t)
        dx = dcols[:, 0].copy()
        for n in range(1, self.width):
            dx[:, :, : t - n] += dcols[:, n, :, n:]
        return dx

    def backward(self, grad: np.ndarray) -> np.ndarray:
        shape = self.param_backward(grad)
        return self.col2im(self.weight_matrix().T @ grad.reshape(self.out_channels, -1), shape)


class BatchNorm(Layer):
    """Per-channel normalization over every axis but the first."""

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }
        self.zero_grad()

    def _shape(self, x):
        return (self.channels,) + (1,) * (x.ndim - 1)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.shape[0] != self.channels:
            raise ShapeMismatch(f"batch norm expects {self.channels} channels, got {x.shape[0]}")
        shp = self._shape(x)
        axes = tuple(range(1, x.ndim))
        gamma = self.params["gamma"].reshape(shp)
        beta = self.params["beta"].reshape(shp)
        if train:
            count = x.size // self.channels
            if count < 2:
                raise ShapeMismatch("training-mode batch norm needs at least 2 values per channel")
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mu.reshape(shp)) * inv_std.reshape(shp)
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm[...] = m * rm + (1 - m) * mu
            rv[...] = m * rv + (1 - m) * var
            self._cache = ("train", xhat, inv_std)
            return gamma * xhat + beta
        inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
        xhat = (x - self.buffers["running_mean"].reshape(shp)) * inv_std.reshape(shp)
        self._cache = ("infer", xhat, inv_std)
        return gamma * xhat + beta

    def backward(self, grad: np.ndarray) -> np.ndarray:
        mode, xhat, inv_std = self._pop_cache()
        shp = self._shape(grad)
        axes = tuple(range(1, grad.ndim))
        sum_gx = (grad * xhat).sum(axis=axes)
        sum_g = grad.sum(axis=axes)
        self.grads["gamma"] = sum_gx
        self.grads["beta"] = sum_g
        scale = (self.params["gamma"] * inv_std).reshape(shp)
        if mode == "infer":
            return grad * scale
        n = grad.size // self.channels
        dx = xhat * (sum_gx / n).reshape(shp)
        np.subtract(grad, dx, out=dx)
        dx -= (sum_g / n).reshape(shp)
        dx *= scale
        return dx


class MaxPoolHalve(Layer):
    """Window 2, stride 2, ceil mode along the last axis."""

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        m = x.shape[-1]
        if m < 1:
            raise ShapeMismatch("cannot pool an empty time axis")
        half = m // 2
        even = x[..., 0 : 2 * half : 2]
        odd = x[..., 1::2]
        out = np.empty(x.shape[:-1] + ((m + 1) // 2,), dtype=x.dtype)
        np.maximum(even, odd, out=out[..., :half])
        if m % 2:
            # trailing window of size one
            out[..., -1] = x[..., -1]
        if train:
            self._cache = (odd > even, m)
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        second, m = self._pop_cache()
        half = m // 2
        dx = np.empty(grad.shape[:-1] + (m,), dtype=grad.dtype)
        g = grad[..., :half]
        np.multiply(g, second, out=dx[..., 1::2])
        np.multiply(g, ~second, out=dx[..., 0 : 2 * half : 2])
        if m % 2:
            dx[..., -1] = grad[..., -1]
        return dx


class Dense(Layer):
    """Affine map on column vectors: ``y = W z + b`` with ``z`` of shape (O, B)."""

    def __init__(self, in_features: int, out_features: int, rng=None, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_features, self.out_features = in_features, out_features
        self.params["weight"] = glorot_uniform(rng, (out_features, in_features), in_features, out_features, dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)
        self.zero_grad()

    def forward(self, z: np.ndarray, train: bool = False) -> np.ndarray:
        if z.shape[0] != self.in_features:
            raise ShapeMismatch(f"dense expects {self.in_features} inputs, got {z.shape[0]}")
        if train:
            self._cache = z
        return self.params["weight"] @ z + self.params["bias"][:, None]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        z = self._pop_cache()
        self.grads["weight"] = grad @ z.T
        self.grads["bias"] = grad.sum(axis=1)
        return self.params["weight"].T @ grad


class ReLU(Layer):
    def forward(self, x, train=False):
        if train:
            self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, grad):
        return grad * self._pop_cache()


class Sigmoid(Layer):
    def forward(self, x, train=False):
        y = sigmoid(x)
        if train:
            self._cache = y
        return y

    def backward(self, grad):
        y = self._pop_cache()
        return grad * y * (1 - y)


class Dropout(Layer):
    """Inverted dropout; identity in inference mode or when ``p == 0``."""

    def __init__(self, p: float = 0.5, rng=None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout p must lie in [0, 1)")
        self.p = p
        self.rng = np.random.default_rng(0) if rng is None else rng

    def forward(self, x, train=False):
        if not train:
            return x
        if self.p == 0.0:
            mask = np.ones((), dtype=x.dtype)
        else:
            mask = (self.rng.random(x.shape) >= self.p).astype(x.dtype) / x.dtype.type(1.0 - self.p)
        self._cache = mask
        return x * mask

    def backward(self, grad):
        return grad * self._pop_cache()


# -- functional forms on single samples (F x T in, K x T out) ------------------


def conv1d_forward(x: np.ndarray, layer: Conv1d) -> np.ndarray:
    if x.ndim != 2:
        raise ShapeMismatch("conv1d_forward takes an (F, T) matrix")
    return layer.forward(x[:, None, :])[:, 0, :]


def batchnorm_forward(batch: np.ndarray, layer: BatchNorm, mode: str = "train") -> np.ndarray:
    """``batch`` is (B, K, T); returns the same shape."""
    if batch.ndim != 3:
        raise ShapeMismatch("batchnorm_forward takes a (B, K, T) tensor")
    y = layer.forward(batch.transpose(1, 0, 2), train=(mode == "train"))
    layer._cache = None
    return y.transpose(1, 0, 2)


def maxpool_halve(y: np.ndarray) -> np.ndarray:
    return MaxPoolHalve().forward(np.asarray(y))


def dense_forward(z: np.ndarray, weight: np.ndarray, bias: np.ndarray, activation: str = "none") -> np.ndarray:
    z = np.asarray(z)
    if weight.shape != (bias.shape[0], z.shape[0]):
        raise ShapeMismatch(f"weight {weight.shape} incompatible with input {z.shape} / bias {bias.shape}")
    a = weight @ z + bias
    if activation == "relu":
        return np.maximum(a, 0)
    if activation == "sigmoid":
        return sigmoid(np.atleast_1d(a))
    if activation == "softmax":
        return softmax(a, axis=0)
    if activation == "none":
        return a
    raise ValueError(f"unknown activation {activation!r}")


def dropout(x: np.ndarray, p: float = 0.5, mode: str = "train", rng=None) -> np.ndarray:
    return Dropout(p, rng).forward(x, train=(mode == "train"))
