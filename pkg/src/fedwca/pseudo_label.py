"""Round-frozen prototype pseudo-labelling with two-model selection and mixup."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Batch, Model, cosine_matrix, forward, softmax_rows

PROTO_NORM_EPS = 1e-6


@dataclass(frozen=True)
class PrototypeSet:
    prototypes: np.ndarray  # (M, q)
    mean_inter_similarity: float


def mean_inter_similarity(prototypes: np.ndarray) -> float:
    m = prototypes.shape[0]
    if m < 2:
        return 0.0
    sims = cosine_matrix(prototypes, prototypes)
    return float((sims.sum() - np.trace(sims)) / (m * (m - 1)))


def _weighted_prototypes(feats: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mass = weights.sum(axis=0)
    protos = (weights.T @ feats) / np.where(mass > 0, mass, 1.0)[:, None]
    return protos, mass


def prototypes_two_pass(model: Model, data: Batch) -> PrototypeSet:
    """Soft-score weighted class centroids, refined once with the resulting hard labels.

    Classes that receive no sample in the refinement keep their first-pass
    centroid.
    """
    feats, logits = forward(model, data)
    scores = softmax_rows(logits)
    first, _ = _weighted_prototypes(feats, scores)
    labels = np.argmax(cosine_matrix(feats, first), axis=1)
    onehot = np.eye(model.num_classes)[labels]
    second, mass = _weighted_prototypes(feats, onehot)
    protos = np.where((mass > 0)[:, None], second, first)
    return PrototypeSet(protos, mean_inter_similarity(protos))


def assign_labels(model: Model, data: Batch, protos: PrototypeSet) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-prototype labels and their similarity divided by the mean inter-prototype similarity.

    When that mean is not safely positive the raw similarities are returned.
    """
    feats, _ = forward(model, data)
    sims = cosine_matrix(feats, protos.prototypes)
    labels = np.argmax(sims, axis=1)
    best = sims[np.arange(len(labels)), labels]
    if protos.mean_inter_similarity > PROTO_NORM_EPS:
        best = best / protos.mean_inter_similarity
    return labels, best


def argmax_labels(model: Model, data: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Classifier-argmax labels with max softmax score as confidence (prototype step disabled)."""
    probs = softmax_rows(forward(model, data)[1])
    return np.argmax(probs, axis=1), probs.max(axis=1)


def label_with(model: Model, data: Batch, prototypes: bool = True) -> tuple[np.ndarray, np.ndarray]:
    if not prototypes:
        return argmax_labels(model, data)
    return assign_labels(model, data, prototypes_two_pass(model, data))


def two_model_select(init_labels, init_sims, cluster_labels, cluster_sims) -> tuple[np.ndarray, np.ndarray]:
    """Keep the initial model's label unless the cluster model's normalised similarity is strictly larger."""
    init_labels = np.asarray(init_labels)
    cluster_labels = np.asarray(cluster_labels)
    use_init = np.asarray(init_sims) >= np.asarray(cluster_sims)
    selected = np.where(use_init, init_labels, cluster_labels)
    return selected, init_labels == cluster_labels


def mixup(x_mismatched: np.ndarray, y_mismatched: np.ndarray, x_matched: np.ndarray,
          y_matched: np.ndarray, mu: float, rng: np.random.Generator):
    """Pull each mismatched sample toward a random matched sample sharing its label.

    Returns ``(mixed_inputs, mixed_labels, kept, partners)``: ``kept`` indexes
    the mismatched rows that found a partner, ``partners`` the matched rows
    they were mixed with.
    """
    if not 0.0 <= mu <= 1.0:
        raise ValueError("mixup coefficient must lie in [0, 1]")
    y_matched = np.asarray(y_matched)
    by_label = {int(lab): np.flatnonzero(y_matched == lab) for lab in np.unique(y_matched)}
    kept, partners = [], []
    for i, lab in enumerate(np.asarray(y_mismatched)):
        pool = by_label.get(int(lab))
        if pool is None:
            continue
        kept.append(i)
        partners.append(int(pool[rng.integers(pool.size)]))
    kept_arr = np.array(kept, dtype=np.int64)
    partner_arr = np.array(partners, dtype=np.int64)
    d = np.asarray(x_mismatched).shape[1] if np.ndim(x_mismatched) == 2 else 0
    if kept_arr.size == 0:
        return np.zeros((0, d)), np.zeros(0, dtype=np.int64), kept_arr, partner_arr
    mixed = (1.0 - mu) * np.asarray(x_mismatched)[kept_arr] + mu * np.asarray(x_matched)[partner_arr]
    return mixed, np.asarray(y_mismatched)[kept_arr], kept_arr, partner_arr


@dataclass(frozen=True)
class PseudoDataset:
    """Pseudo-labels frozen for one round, stored by sample index.

    ``matched_*`` and ``mismatched_*`` partition the client's samples;
    ``mixed_idx`` lists the mismatched samples that were mixed (and so kept).
    ``init_labels``/``cluster_labels`` are kept for audits.
    """

    round: int
    num_samples: int
    matched_idx: np.ndarray
    matched_labels: np.ndarray
    mismatched_idx: np.ndarray
    mismatched_labels: np.ndarray
    mixed_idx: np.ndarray
    mixed_inputs: np.ndarray
    mixed_labels: np.ndarray
    init_labels: np.ndarray
    cluster_labels: np.ndarray

    def training_batch(self, data: Batch) -> Batch:
        """Row-aligned (input, label) view; excluded samples carry label -1."""
        x = np.array(data.inputs)
        y = np.full(self.num_samples, -1, dtype=np.int64)
        y[self.matched_idx] = self.matched_labels
        if self.mixed_idx.size:
            x[self.mixed_idx] = self.mixed_inputs
            y[self.mixed_idx] = self.mixed_labels
        return Batch(x, y)

    def labels_by_sample(self) -> np.ndarray:
        """Selected label of every sample (matched and mismatched alike)."""
        y = np.empty(self.num_samples, dtype=np.int64)
        y[self.matched_idx] = self.matched_labels
        y[self.mismatched_idx] = self.mismatched_labels
        return y


def _frozen(a) -> np.ndarray:
    arr = np.array(a, copy=True)
    arr.setflags(write=False)
    return arr


def build_pseudo_dataset(
    round_index: int,
    f_init: Model,
    f_cluster: Model | None,
    data: Batch,
    mu: float,
    rng: np.random.Generator,
    prototypes: bool = True,
    use_mixup: bool = True,
) -> PseudoDataset:
    """Label every sample once for the round.

    With no cluster model (round 0, or the single-model ablations) every
    sample is labelled by ``f_init`` and counts as matched.  Otherwise both
    models label the data, the label with the larger normalised similarity
    is selected, and disagreeing samples are mixed toward agreeing ones.
    Without mixup, disagreeing samples keep their selected label unmixed.
    """
    n = len(data)
    init_labels, init_sims = label_with(f_init, data, prototypes)
    if f_cluster is None:
        idx = np.arange(n)
        empty = np.zeros(0, dtype=np.int64)
        return PseudoDataset(
            round_index, n, _frozen(idx), _frozen(init_labels), _frozen(empty), _frozen(empty),
            _frozen(empty), _frozen(np.zeros((0, data.inputs.shape[1]))), _frozen(empty),
            _frozen(init_labels), _frozen(init_labels),
        )
    cluster_labels, cluster_sims = label_with(f_cluster, data, prototypes)
    selected, matched = two_model_select(init_labels, init_sims, cluster_labels, cluster_sims)
    mat_idx = np.flatnonzero(matched)
    mis_idx = np.flatnonzero(~matched)
    if use_mixup:
        mixed_x, mixed_y, kept, _ = mixup(
            data.inputs[mis_idx], selected[mis_idx], data.inputs[mat_idx], selected[mat_idx], mu, rng
        )
        mixed_idx = mis_idx[kept]
    else:
        mixed_idx = mis_idx
        mixed_x = data.inputs[mis_idx]
        mixed_y = selected[mis_idx]
    return PseudoDataset(
        round_index, n, _frozen(mat_idx), _frozen(selected[mat_idx]), _frozen(mis_idx),
        _frozen(selected[mis_idx]), _frozen(mixed_idx), _frozen(mixed_x), _frozen(mixed_y),
        _frozen(init_labels), _frozen(cluster_labels),
    )
