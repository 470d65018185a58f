"""Gated convolutional classifier: stacked gated blocks, flatten, dense head."""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, MissingForwardCache, ShapeMismatch, UnsupportedFormat
from .features import FoldStats
from .nn_core import BatchNorm, Conv1d, Dense, Dropout, MaxPoolHalve, ReLU, sigmoid, softmax


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 8
    kernels: int = 64
    kernel_width: int = 2
    dense_units: int = 256
    dropout_p: float = 0.5
    classes: int = 2
    input_features: int = 76
    input_frames: int = 397
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5

    def __post_init__(self):
        for name in ("num_blocks", "kernels", "kernel_width", "dense_units", "input_features", "input_frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.classes not in (2, 3):
            raise ConfigError("classes must be 2 or 3")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")

    def time_lengths(self) -> list[int]:
        """Time length entering each block, followed by the final length."""
        lengths = [self.input_frames]
        for _ in range(self.num_blocks):
            lengths.append(-(-lengths[-1] // 2))
        return lengths

    @property
    def flat_size(self) -> int:
        return self.kernels * self.time_lengths()[-1]

    @property
    def outputs(self) -> int:
        return 1 if self.classes == 2 else self.classes

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kinds = {f.name: f.default for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in kinds:
                raise ConfigError(f"unknown model config key {key!r}")
            kwargs[key] = type(kinds[key])(float(value)) if isinstance(kinds[key], float) else int(value)
        return cls(**kwargs)


class GatedBlock:
    """``maxpool(BN(conv_v(X)) * sigmoid(BN(conv_w(X))))``; both convs share the input."""

    def __init__(self, in_channels: int, cfg: ModelConfig, rng, dtype):
        k, n = cfg.kernels, cfg.kernel_width
        self.linear_conv = Conv1d(in_channels, k, n, rng, dtype)
        self.gate_conv = Conv1d(in_channels, k, n, rng, dtype)
        self.bn_linear = BatchNorm(k, cfg.bn_momentum, cfg.bn_eps, dtype)
        self.bn_gate = BatchNorm(k, cfg.bn_momentum, cfg.bn_eps, dtype)
        self.pool = MaxPoolHalve()
        self._cache = None

    def layers(self):
        return (
            ("linear", self.linear_conv),
            ("gate", self.gate_conv),
            ("bn_linear", self.bn_linear),
            ("bn_gate", self.bn_gate),
        )

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        lin, gate = self.linear_conv, self.gate_conv
        k = lin.out_channels
        cols = lin.im2col(x)
        # both paths in one GEMM
        w = np.concatenate([lin.weight_matrix(), gate.weight_matrix()])
        bias = np.concatenate([lin.params["bias"], gate.params["bias"]])
        both = (w @ cols + bias[:, None]).reshape(2 * k, x.shape[1], x.shape[2])
        if train:
            lin._cache = (cols, x.shape)
            gate._cache = (cols, x.shape)
        a = self.bn_linear.forward(both[:k], train)
        g = sigmoid(self.bn_gate.forward(both[k:], train))
        if train:
            self._cache = (a, g)
        return self.pool.forward(a * g, train)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise MissingForwardCache("GatedBlock.backward called before a training forward pass")
        a, g = self._cache
        self._cache = None
        dy = self.pool.backward(grad)
        d_lin = self.bn_linear.backward(dy * g)
        d_gate = self.bn_gate.backward(dy * a * g * (1 - g))
        shape = self.linear_conv.param_backward(d_lin)
        self.gate_conv.param_backward(d_gate)
        w = np.concatenate([self.linear_conv.weight_matrix(), self.gate_conv.weight_matrix()])
        both = np.concatenate([d_lin, d_gate]).reshape(w.shape[0], -1)
        return self.linear_conv.col2im(w.T @ both, shape)


class GCNN:
    """The full classifier. Inputs are batches shaped (B, F, T).

    Parameters and running statistics are exposed through :meth:`parameters`
    and :meth:`buffers` as ordered name -> array maps; the arrays are the live
    storage, so in-place updates (the optimizer) act on the model directly.
    """

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        cfg = config
        self.blocks = []
        channels = cfg.input_features
        for _ in range(cfg.num_blocks):
            self.blocks.append(GatedBlock(channels, cfg, rng, dtype))
            channels = cfg.kernels
        self.dense = Dense(cfg.flat_size, cfg.dense_units, rng, dtype)
        self.dense_bn = BatchNorm(cfg.dense_units, cfg.bn_momentum, cfg.bn_eps, dtype)
        self.relu = ReLU()
        self.dropout = Dropout(cfg.dropout_p, np.random.default_rng(rng.integers(2**63)))
        self.out = Dense(cfg.dense_units, cfg.outputs, rng, dtype)
        # feature normalization carried alongside the weights for stand-alone prediction
        self.feature_stats: FoldStats | None = None
        self._flat_shape = None

    def named_layers(self):
        for i, block in enumerate(self.blocks):
            for name, layer in block.layers():
                yield f"block{i}.{name}", layer
        yield "dense", self.dense
        yield "dense_bn", self.dense_bn
        yield "out", self.out

    def parameters(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            (f"{prefix}.{k}", v) for prefix, layer in self.named_layers() for k, v in layer.params.items()
        )

    def gradients(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            (f"{prefix}.{k}", layer.grads[k]) for prefix, layer in self.named_layers() for k in layer.params
        )

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            (f"{prefix}.{k}", v)
            for prefix, layer in self.named_layers()
            if isinstance(layer, BatchNorm)
            for k, v in layer.buffers.items()
        )

    def set_dropout_rng(self, rng: np.random.Generator) -> None:
        self.dropout.rng = rng

    # -- forward / backward ---------------------------------------------------

    def forward_logits(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """(B, F, T) -> logits of shape (outputs, B)."""
        cfg = self.config
        if x.ndim != 3 or x.shape[1:] != (cfg.input_features, cfg.input_frames):
            raise ShapeMismatch(
                f"expected input (B, {cfg.input_features}, {cfg.input_frames}), got {x.shape}"
            )
        h = np.ascontiguousarray(x.transpose(1, 0, 2), dtype=self.dtype)
        for block in self.blocks:
            h = block.forward(h, train)
        k, b, m = h.shape
        self._flat_shape = h.shape
        # channel-major flatten per sample
        z = h.transpose(1, 0, 2).reshape(b, k * m).T
        z = self.dense.forward(np.ascontiguousarray(z), train)
        z = self.relu.forward(self.dense_bn.forward(z, train), train)
        z = self.dropout.forward(z, train)
        return self.out.forward(z, train)

    def probabilities(self, logits: np.ndarray) -> np.ndarray:
        """Binary: (B,) positive-class probability. Multi-class: (B, classes)."""
        if self.config.classes == 2:
            return sigmoid(logits[0])
        return softmax(logits, axis=0).T

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.probabilities(self.forward_logits(x, train))

    def backward(self, dlogits: np.ndarray) -> None:
        """Backpropagate d(loss)/d(logits), shape (outputs, B); fills layer grads."""
        g = self.out.backward(dlogits)
        g = self.dropout.backward(g)
        g = self.dense_bn.backward(self.relu.backward(g))
        g = self.dense.backward(g)
        k, b, m = self._flat_shape
        g = np.ascontiguousarray(g.T.reshape(b, k, m).transpose(1, 0, 2))
        for block in reversed(self.blocks):
            g = block.backward(g)

    def predict_proba(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        outs = [self.forward(x[i : i + batch_size], train=False) for i in range(0, x.shape[0], batch_size)]
        return np.concatenate(outs, axis=0)


def gated_block_forward(x: np.ndarray, block: GatedBlock, mode: str = "infer") -> np.ndarray:
    """Single sample (C, M) -> (K, ceil(M/2))."""
    if x.ndim != 2:
        raise ShapeMismatch("gated_block_forward takes a (C, M) matrix")
    out = block.forward(x[:, None, :], train=(mode == "train"))[:, 0, :]
    block._cache = None
    return out


def model_forward(x: np.ndarray, model: GCNN, mode: str = "infer") -> np.ndarray:
    """Single (F, T) matrix or a (B, F, T) batch -> class probabilities."""
    batch = x[None] if x.ndim == 2 else x
    p = model.forward(batch, train=(mode == "train"))
    return p[0] if x.ndim == 2 else p


def decide(probs) -> int:
    """Binary: positive (1) iff p >= 0.5. Multi-class: argmax."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 0 or probs.shape == (1,):
        return int(float(probs.reshape(())) >= 0.5)
    return int(np.argmax(probs))


def predict_segment(x: np.ndarray, model: GCNN) -> tuple[int, np.ndarray]:
    """Label and per-class probability vector for one (F, T) segment (inference mode)."""
    p = model_forward(x, model, "infer")
    if model.config.classes == 2:
        p = float(p)
        return decide(p), np.array([1.0 - p, p])
    return decide(p), np.asarray(p, dtype=np.float64)


# -- weight files ---------------------------------------------------------------

WEIGHT_MAGIC = b"GCNN"
WEIGHT_VERSION = 1


def _tensor_entries(model: GCNN):
    entries = list(model.parameters().items()) + list(model.buffers().items())
    if model.feature_stats is not None:
        entries += [("feature_stats.mean", model.feature_stats.mean), ("feature_stats.std", model.feature_stats.std)]
    return entries


def save_model(path, model: GCNN) -> None:
    """magic, version, config text, then named float32 tensors with shape headers."""
    cfg_text = model.config.to_text().encode("utf-8")
    entries = _tensor_entries(model)
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC + struct.pack("<I", WEIGHT_VERSION))
        fh.write(struct.pack("<I", len(cfg_text)) + cfg_text)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_model(path) -> GCNN:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHT_MAGIC:
        raise UnsupportedFormat(f"{path}: not a model weight file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != WEIGHT_VERSION:
        raise UnsupportedFormat(f"{path}: weight file version {version} unsupported")
    pos = 8
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    config = ModelConfig.from_text(data[pos : pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
    model = GCNN(config)
    for store in (model.parameters(), model.buffers()):
        for name, arr in store.items():
            if name not in tensors or tensors[name].shape != arr.shape:
                raise UnsupportedFormat(f"{path}: tensor {name} missing or misshapen")
            arr[...] = tensors[name]
    if "feature_stats.mean" in tensors:
        model.feature_stats = FoldStats(
            tensors["feature_stats.mean"].astype(np.float64), tensors["feature_stats.std"].astype(np.float64)
        )
    return model
