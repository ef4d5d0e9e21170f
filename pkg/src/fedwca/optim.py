"""Training objective (information maximisation + pseudo-label cross-entropy),
hand-derived backpropagation and momentum SGD.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import xlogy

from .errors import DataError, ProtocolError
from .model import Batch, Model, forward, forward_trace, log_softmax_rows

Grads = dict[str, np.ndarray]


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.001
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: Model, learning_rate: float, momentum: float = 0.9,
                  weight_decay: float = 0.001) -> "OptimizerState":
        tensors = model.tensors()
        velocity = {n: np.zeros_like(tensors[n]) for n in model.trainable_names()}
        return cls(learning_rate, momentum, weight_decay, velocity)


@dataclass(frozen=True)
class LossReport:
    total: float
    im: float
    ce: float
    lam: float


def _backward(model: Model, inputs, pre, dlogits: np.ndarray) -> Grads:
    """Backpropagate ``dL/dlogits`` through classifier, bottleneck and ReLU stack."""
    grads: Grads = {}
    feats = pre[-1]
    if not model.classifier.frozen:
        grads["classifier.weight"] = feats.T @ dlogits
        grads["classifier.bias"] = dlogits.sum(axis=0)
    delta = dlogits @ model.classifier.weight.T
    layers = (*model.feature_layers, model.bottleneck)
    names = [f"feature.{i}" for i in range(len(model.feature_layers))] + ["bottleneck"]
    for i in reversed(range(len(layers))):
        layer = layers[i]
        if layer.activation == "relu":
            delta = delta * (pre[i] > 0.0)
        grads[f"{names[i]}.weight"] = inputs[i].T @ delta
        grads[f"{names[i]}.bias"] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ layer.weight.T
    return grads


def ce_loss_grad(model: Model, batch: Batch) -> tuple[float, Grads]:
    """Mean cross-entropy of the model's softmax output against ``batch.labels``."""
    if batch.labels is None:
        raise DataError("cross-entropy needs labels")
    y = batch.labels
    m = model.num_classes
    if np.any(y < 0) or np.any(y >= m):
        raise DataError(f"labels must lie in [0, {m})")
    inputs, pre = forward_trace(model, batch)
    logits = pre[-1] @ model.classifier.weight + model.classifier.bias
    logp = log_softmax_rows(logits)
    n = len(y)
    rows = np.arange(n)
    loss = -logp[rows, y].mean()
    dlogits = np.exp(logp)
    dlogits[rows, y] -= 1.0
    dlogits /= n
    return float(loss), _backward(model, inputs, pre, dlogits)


def im_loss_grad(model: Model, batch: Batch) -> tuple[float, Grads]:
    """Information-maximisation loss: mean per-sample entropy minus entropy of the mean output."""
    inputs, pre = forward_trace(model, batch)
    logits = pre[-1] @ model.classifier.weight + model.classifier.bias
    logp = log_softmax_rows(logits)
    p = np.exp(logp)
    n = p.shape[0]
    mean_p = p.mean(axis=0)
    loss = xlogy(mean_p, mean_p).sum() - xlogy(p, p).sum() / n
    # dL/dp_im = (log mean_p_m - log p_im) / n; the +1 terms cancel
    log_mean = np.log(np.maximum(mean_p, np.finfo(np.float64).tiny))
    g = (log_mean[None, :] - logp) / n
    dlogits = p * (g - (p * g).sum(axis=1, keepdims=True))
    return float(loss), _backward(model, inputs, pre, dlogits)


def _add(a: Grads, b: Grads, scale: float = 1.0) -> Grads:
    return {k: a[k] + scale * b[k] for k in a}


def sgd_step(model: Model, grads: Grads, state: OptimizerState) -> Model:
    """Momentum SGD with L2 decay folded into the gradient; frozen tensors untouched."""
    tensors = model.tensors()
    updated = {}
    for name in model.trainable_names():
        param = tensors[name]
        g = grads[name] + state.weight_decay * param
        v = state.velocity.get(name)
        v = g if v is None else state.momentum * v + g
        state.velocity[name] = v
        updated[name] = param - state.learning_rate * v
    return model.with_tensors(updated)


def train_epoch(
    model: Model,
    unlabeled: Batch,
    pseudo: Batch | None,
    lam: float,
    state: OptimizerState,
    rng: np.random.Generator,
    batch_size: int = 64,
) -> tuple[Model, LossReport]:
    """One shuffled pass; IM on the raw rows, lambda-weighted CE on their pseudo-labelled twins.

    ``pseudo`` is row-aligned with ``unlabeled``: row ``i`` holds the (possibly
    mixed) input used for sample ``i`` and its frozen label, or label ``-1``
    when the sample is excluded from the pseudo-labelled set.
    """
    n = len(unlabeled)
    if n == 0:
        raise ProtocolError("cannot train on an empty dataset")
    if pseudo is not None and len(pseudo) != n:
        raise ProtocolError("pseudo-labelled rows must align with the unlabeled rows")
    order = rng.permutation(n)
    im_sum = ce_sum = 0.0
    n_batches = 0
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        im, grads = im_loss_grad(model, unlabeled.subset(idx))
        ce = 0.0
        if pseudo is not None:
            keep = idx[pseudo.labels[idx] >= 0]
            if keep.size:
                ce, ce_grads = ce_loss_grad(model, pseudo.subset(keep))
                grads = _add(grads, ce_grads, lam)
        model = sgd_step(model, grads, state)
        im_sum += im
        ce_sum += ce
        n_batches += 1
    im_mean, ce_mean = im_sum / n_batches, ce_sum / n_batches
    return model, LossReport(im_mean + lam * ce_mean, im_mean, ce_mean, lam)


def pretrain_source(
    model: Model,
    labeled: Batch,
    epochs: int,
    state: OptimizerState,
    rng: np.random.Generator,
    batch_size: int = 64,
) -> Model:
    """Supervised cross-entropy training of every layer; returns the model with its classifier frozen."""
    if labeled.labels is None:
        raise DataError("source pre-training needs labels")
    model = replace(model, classifier=replace(model.classifier, frozen=False))
    n = len(labeled)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            _, grads = ce_loss_grad(model, labeled.subset(order[start : start + batch_size]))
            model = sgd_step(model, grads, state)
    return model.freeze_classifier()


def accuracy(model: Model, batch: Batch) -> float:
    if batch.labels is None:
        raise DataError("accuracy needs labels")
    _, logits = forward(model, batch)
    return float(np.mean(np.argmax(logits, axis=1) == batch.labels))
