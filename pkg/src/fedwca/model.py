"""Dense models, parameter-space arithmetic and cosine geometry.

A :class:`Model` is the feature extractor (ReLU dense layers followed by a
linear bottleneck) plus a linear classifier.  Models are immutable: every
array is copied to float64 and marked read-only on construction, so the same
instance can be handed to several clients without defensive copies.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError

_ACTIVATIONS = ("relu", "linear")
NORM_EPS = 1e-12


def _frozen_array(values, ndim: int, what: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise ConfigurationError(f"{what} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{what} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DenseLayer:
    """``y = act(x @ weight + bias)`` with ``weight`` of shape (in, out)."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        w = _frozen_array(self.weight, 2, "layer weight")
        b = _frozen_array(self.bias, 1, "layer bias")
        if b.shape[0] != w.shape[1]:
            raise ConfigurationError(
                f"bias length {b.shape[0]} does not match layer width {w.shape[1]}"
            )
        if self.activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class Classifier:
    """Final linear layer; column ``m`` of ``weight`` is the class vector w_m."""

    weight: np.ndarray
    bias: np.ndarray
    frozen: bool = False

    def __post_init__(self):
        w = _frozen_array(self.weight, 2, "classifier weight")
        b = _frozen_array(self.bias, 1, "classifier bias")
        if b.shape[0] != w.shape[1]:
            raise ConfigurationError("classifier bias length must equal number of classes")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class Model:
    feature_layers: tuple[DenseLayer, ...]
    bottleneck: DenseLayer
    classifier: Classifier

    def __post_init__(self):
        layers = tuple(self.feature_layers)
        object.__setattr__(self, "feature_layers", layers)
        chain = list(layers) + [self.bottleneck]
        for prev, nxt in zip(chain, chain[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ConfigurationError(
                    f"layer dimensions do not compose: {prev.out_dim} -> {nxt.in_dim}"
                )
        if self.bottleneck.activation != "linear":
            raise ConfigurationError("bottleneck layer must be linear")
        if self.bottleneck.out_dim != self.classifier.weight.shape[0]:
            raise ConfigurationError("bottleneck width must equal classifier input dim")

    @property
    def input_dim(self) -> int:
        first = self.feature_layers[0] if self.feature_layers else self.bottleneck
        return first.in_dim

    @property
    def feature_dim(self) -> int:
        return self.bottleneck.out_dim

    @property
    def num_classes(self) -> int:
        return self.classifier.weight.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        """All parameters in canonical order, keyed by tensor name."""
        out: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.feature_layers):
            out[f"feature.{i}.weight"] = layer.weight
            out[f"feature.{i}.bias"] = layer.bias
        out["bottleneck.weight"] = self.bottleneck.weight
        out["bottleneck.bias"] = self.bottleneck.bias
        out["classifier.weight"] = self.classifier.weight
        out["classifier.bias"] = self.classifier.bias
        return out

    def trainable_names(self) -> list[str]:
        names = list(self.tensors())
        if self.classifier.frozen:
            names = [n for n in names if not n.startswith("classifier.")]
        return names

    def feature_extractor_names(self) -> list[str]:
        return [n for n in self.tensors() if not n.startswith("classifier.")]

    def with_tensors(self, updates: Mapping[str, np.ndarray]) -> "Model":
        """Copy of the model with the named tensors replaced."""
        current = self.tensors()
        unknown = set(updates) - set(current)
        if unknown:
            raise ConfigurationError(f"unknown tensor names: {sorted(unknown)}")
        current.update(updates)
        return model_from_tensors(
            current,
            frozen=self.classifier.frozen,
            activations=[layer.activation for layer in self.feature_layers],
        )

    def freeze_classifier(self) -> "Model":
        return replace(self, classifier=replace(self.classifier, frozen=True))

    def num_parameters(self, names: Iterable[str] | None = None) -> int:
        tensors = self.tensors()
        keys = tensors if names is None else names
        return int(sum(tensors[n].size for n in keys))


def model_from_tensors(
    tensors: Mapping[str, np.ndarray],
    frozen: bool = False,
    activations: Sequence[str] | None = None,
) -> Model:
    """Rebuild a :class:`Model` from ``feature.i.*``/``bottleneck.*``/``classifier.*``."""
    n_layers = 0
    while f"feature.{n_layers}.weight" in tensors:
        n_layers += 1
    if activations is None:
        activations = ["relu"] * n_layers
    try:
        layers = tuple(
            DenseLayer(tensors[f"feature.{i}.weight"], tensors[f"feature.{i}.bias"], activations[i])
            for i in range(n_layers)
        )
        bottleneck = DenseLayer(
            tensors["bottleneck.weight"], tensors["bottleneck.bias"], "linear"
        )
        classifier = Classifier(
            tensors["classifier.weight"], tensors["classifier.bias"], frozen
        )
    except KeyError as exc:
        raise ConfigurationError(f"missing tensor {exc.args[0]!r}") from None
    expected = 2 * n_layers + 4
    if len(tensors) != expected:
        raise ConfigurationError(
            f"expected {expected} tensors for a {n_layers}-layer model, got {len(tensors)}"
        )
    return Model(layers, bottleneck, classifier)


def init_model(
    input_dim: int,
    hidden_dims: Sequence[int],
    bottleneck_dim: int,
    num_classes: int,
    rng: np.random.Generator,
) -> Model:
    """He-initialised ReLU layers, Glorot-initialised linear layers, zero biases."""
    layers = []
    fan_in = input_dim
    for width in hidden_dims:
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, width))
        layers.append(DenseLayer(w, np.zeros(width), "relu"))
        fan_in = width
    limit = np.sqrt(6.0 / (fan_in + bottleneck_dim))
    bottleneck = DenseLayer(
        rng.uniform(-limit, limit, size=(fan_in, bottleneck_dim)),
        np.zeros(bottleneck_dim),
        "linear",
    )
    limit = np.sqrt(6.0 / (bottleneck_dim + num_classes))
    classifier = Classifier(
        rng.uniform(-limit, limit, size=(bottleneck_dim, num_classes)),
        np.zeros(num_classes),
    )
    return Model(tuple(layers), bottleneck, classifier)


@dataclass(frozen=True)
class Batch:
    """Row-major inputs with optional integer labels."""

    inputs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        x = np.array(self.inputs, dtype=np.float64, copy=True)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ConfigurationError(f"batch inputs must be a non-empty matrix, got {x.shape}")
        x.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        if self.labels is not None:
            y = np.array(self.labels, dtype=np.int64, copy=True)
            if y.shape != (x.shape[0],):
                raise ConfigurationError("labels must be a vector with one entry per row")
            y.setflags(write=False)
            object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "Batch":
        labels = None if self.labels is None else self.labels[idx]
        return Batch(self.inputs[idx], labels)

    def without_labels(self) -> "Batch":
        return Batch(self.inputs)


def _as_inputs(batch) -> np.ndarray:
    return batch.inputs if isinstance(batch, Batch) else np.asarray(batch, dtype=np.float64)


def forward_trace(model: Model, batch) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Forward pass keeping every layer's input and pre-activation.

    Returns ``(inputs, pre)`` where ``inputs[i]`` entered layer ``i`` and
    ``pre[i]`` is its pre-activation; the bottleneck is the last layer, so
    ``pre[-1]`` are the features.
    """
    x = _as_inputs(batch)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ConfigurationError(
            f"batch input dim {x.shape[-1]} does not match model input dim {model.input_dim}"
        )
    inputs, pre = [], []
    a = x
    for layer in (*model.feature_layers, model.bottleneck):
        inputs.append(a)
        z = a @ layer.weight + layer.bias
        pre.append(z)
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return inputs, pre


def features(model: Model, batch) -> np.ndarray:
    return forward_trace(model, batch)[1][-1]


def forward(model: Model, batch) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(features, logits)`` for every row of the batch."""
    feats = features(model, batch)
    logits = feats @ model.classifier.weight + model.classifier.bias
    return feats, logits


def predict_proba(model: Model, batch) -> np.ndarray:
    return softmax_rows(forward(model, batch)[1])


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cosine(a, b) -> float:
    """Cosine similarity; 0.0 when either vector has (near-)zero norm."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ConfigurationError(f"cosine of vectors with lengths {a.size} and {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Unit-normalise rows; rows with norm below the epsilon become zero."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(norms < NORM_EPS, 1.0, norms)
    return np.where(norms < NORM_EPS, 0.0, x / safe)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine between the rows of ``a`` and the rows of ``b``."""
    return np.clip(normalize_rows(a) @ normalize_rows(b).T, -1.0, 1.0)


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 view of named tensors plus the layout needed to undo it."""

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...] = field(default=())

    def __len__(self) -> int:
        return self.values.size

    def unflatten(self) -> dict[str, np.ndarray]:
        out, offset = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = self.values[offset : offset + size].reshape(shape)
            offset += size
        return out


def to_param_vector(model: Model, names: Sequence[str] | None = None) -> ParamVector:
    tensors = model.tensors()
    names = list(tensors) if names is None else list(names)
    values = np.concatenate([tensors[n].ravel() for n in names]) if names else np.zeros(0)
    return ParamVector(values, tuple((n, tensors[n].shape) for n in names))


def from_param_vector(template: Model, vector: ParamVector) -> Model:
    """Write a :class:`ParamVector` back into a copy of ``template``."""
    expected = sum(int(np.prod(s, dtype=np.int64)) for _, s in vector.layout)
    if expected != vector.values.size:
        raise ConfigurationError("parameter vector length does not match its layout")
    return template.with_tensors(vector.unflatten())


def first_layer_vector(model: Model) -> ParamVector:
    """Weights and bias of the first feature layer (the clustering signature)."""
    if not model.feature_layers:
        raise ConfigurationError("model has no feature layers")
    return to_param_vector(model, ["feature.0.weight", "feature.0.bias"])


def feature_extractor_vector(model: Model) -> ParamVector:
    return to_param_vector(model, model.feature_extractor_names())


def same_layout(a: Model, b: Model) -> bool:
    ta, tb = a.tensors(), b.tensors()
    return list(ta) == list(tb) and all(ta[n].shape == tb[n].shape for n in ta)


def combine(models: Sequence[Model], weights) -> Model:
    """Parameter-space linear combination ``sum_c weights[c] * models[c]``.

    A frozen classifier is copied from ``models[0]``; the feature extractor
    (and an unfrozen classifier) is combined tensor by tensor.
    """
    models = list(models)
    w = np.asarray(weights, dtype=np.float64).ravel()
    if not models or w.size != len(models):
        raise ConfigurationError("need one weight per model")
    if not np.all(np.isfinite(w)) or abs(w.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"combination weights must sum to 1, got {w.sum()!r}")
    base = models[0]
    for m in models[1:]:
        if not same_layout(base, m):
            raise ConfigurationError("cannot combine models with different layouts")
    names = base.feature_extractor_names()
    if not base.classifier.frozen:
        names += ["classifier.weight", "classifier.bias"]
    tensors = [m.tensors() for m in models]
    mixed = {}
    for name in names:
        acc = np.zeros_like(tensors[0][name])
        for wc, t in zip(w, tensors):
            acc = acc + wc * t[name]
        mixed[name] = acc
    return base.with_tensors(mixed)


def average(models: Sequence[Model], weights=None) -> Model:
    """Unweighted (or sample-weighted) mean of models."""
    n = len(models)
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
    return combine(models, w)
