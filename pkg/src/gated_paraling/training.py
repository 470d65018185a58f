"""Losses, Adam, and the deterministic mini-batch training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyTrainingSet, IndexOutOfRange, LabelOutOfRange, ShapeMismatch
from .features import FeatureMatrix
from .gcnn_model import GCNN, ModelConfig
from .nn_core import BatchNorm

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def bce_loss(p, y, weight=1.0):
    """Binary cross-entropy on clamped probabilities.

    Returns ``(loss, dloss/dlogit)``; the gradient with respect to the
    pre-sigmoid logit is ``weight * (p - y)``.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    loss = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    return weight * loss, weight * (p - y)


def cce_loss(probs, y, weight=1.0):
    """Categorical cross-entropy. ``probs`` is (C,) or (B, C); ``y`` class indices.

    Returns ``(loss, dloss/dlogits)`` with gradient ``probs - onehot(y)``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    single = probs.ndim == 1
    P = probs[None] if single else probs
    y = np.atleast_1d(np.asarray(y))
    if np.any((y < 0) | (y >= P.shape[1])):
        raise IndexOutOfRange(f"class index outside [0, {P.shape[1]})")
    rows = np.arange(P.shape[0])
    loss = -np.log(np.clip(P[rows, y], PROB_CLAMP, 1.0))
    grad = P.copy()
    grad[rows, y] -= 1.0
    w = np.broadcast_to(np.asarray(weight, dtype=np.float64), loss.shape)
    loss = w * loss
    grad *= w[:, None]
    return (loss[0], grad[0]) if single else (loss, grad)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if params.keys() != grads.keys():
        raise ShapeMismatch("parameter and gradient names differ")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.t
    corr2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        step = (state.lr / corr1) * m / (np.sqrt(v / corr2) + state.epsilon)
        p -= step.astype(p.dtype, copy=False)
    return state


def inverse_frequency_weights(labels: Sequence[int], classes: int) -> tuple[float, ...]:
    counts = np.bincount(np.asarray(labels), minlength=classes).astype(np.float64)
    counts[counts == 0] = 1.0
    w = counts.sum() / (classes * counts)
    return tuple(float(x) for x in w)


@dataclass
class TrainResult:
    model: GCNN
    history: list = field(default_factory=list)  # (epoch, batch, loss, seg_accuracy)


def batch_loss_and_grad(model: GCNN, x: np.ndarray, y: np.ndarray, class_weights=None, train: bool = True):
    """Mean loss, accuracy and logit gradient for one mini-batch; runs forward only."""
    logits = model.forward_logits(x, train)
    probs = model.probabilities(logits)
    w = 1.0 if class_weights is None else np.asarray(class_weights, dtype=np.float64)[y]
    b = x.shape[0]
    if model.config.classes == 2:
        loss, g = bce_loss(probs, y, w)
        pred = (probs >= 0.5).astype(int)
        dlogits = (g / b)[None]
    else:
        loss, g = cce_loss(probs, y, w)
        pred = np.argmax(probs, axis=1)
        dlogits = (g / b).T
    return float(np.sum(loss) / b), float(np.mean(pred == y)), dlogits.astype(model.dtype)


def train_fold(
    inputs: np.ndarray | Sequence[FeatureMatrix],
    labels: Sequence[int],
    model_config: ModelConfig = ModelConfig(),
    train_config: TrainConfig = TrainConfig(),
    dtype=np.float32,
) -> TrainResult:
    """Train a fresh model; deterministic given the data, configs and seed."""
    if len(labels) == 0:
        raise EmptyTrainingSet("no training segments")
    if not isinstance(inputs, np.ndarray):
        inputs = np.stack([m.values for m in inputs])
    x_all = inputs.astype(dtype, copy=False)
    y_all = np.asarray(labels, dtype=np.int64)
    if x_all.shape[0] != y_all.shape[0]:
        raise ShapeMismatch(f"{x_all.shape[0]} inputs vs {y_all.shape[0]} labels")
    if np.any((y_all < 0) | (y_all >= model_config.classes)):
        raise LabelOutOfRange(f"labels must lie in [0, {model_config.classes})")

    tc = train_config
    rng = np.random.default_rng(tc.seed)
    model = GCNN(model_config, seed=int(rng.integers(2**63)), dtype=dtype)
    model.set_dropout_rng(np.random.default_rng(int(rng.integers(2**63))))
    state = AdamState(tc.lr, tc.beta1, tc.beta2, tc.epsilon)
    params = model.parameters()
    history = []
    n = len(y_all)
    for epoch in range(tc.epochs):
        order = rng.permutation(n)
        for bi, start in enumerate(range(0, n, tc.batch_size)):
            idx = order[start : start + tc.batch_size]
            if idx.size < 2:
                # a single-sample batch cannot feed training-mode batch norm on the dense layer
                continue
            loss, acc, dlogits = batch_loss_and_grad(model, x_all[idx], y_all[idx], tc.class_weights)
            model.backward(dlogits)
            adam_step(params, model.gradients(), state)
            history.append((epoch, bi, loss, acc))
        if history:
            ep = [h for h in history if h[0] == epoch]
            log.debug("epoch %d loss %.4f acc %.3f", epoch, np.mean([h[2] for h in ep]), np.mean([h[3] for h in ep]))
    recalibrate_batchnorm(model, x_all, tc.batch_size)
    return TrainResult(model, history)


def recalibrate_batchnorm(model: GCNN, x: np.ndarray, batch_size: int = 32) -> None:
    """Replace running statistics by their average over one ordered pass of ``x``.

    With momentum 0.99 the running averages lag far behind the batch
    statistics after a few hundred steps, so inference would normalize with
    stale values. Each batch-norm layer gets the equal-weight mean of its
    batch means and variances; parameters are untouched.
    """
    layers = [layer for _, layer in model.named_layers() if isinstance(layer, BatchNorm)]
    saved = [layer.momentum for layer in layers]
    seen = 0
    try:
        for start in range(0, x.shape[0], batch_size):
            batch = x[start : start + batch_size]
            if batch.shape[0] < 2:
                continue
            for layer in layers:
                layer.momentum = seen / (seen + 1)  # cumulative mean; 0 on the first batch
            model.forward_logits(batch, train=True)
            seen += 1
    finally:
        for layer, m in zip(layers, saved):
            layer.momentum = m


def write_training_log(path, history) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,batch,loss,seg_accuracy\n")
        for epoch, batch, loss, acc in history:
            fh.write(f"{epoch},{batch},{loss:.6f},{acc:.6f}\n")
