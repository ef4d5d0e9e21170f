"""Weighted cluster aggregation.

Server side: cluster models are plain averages of member models; soft
cluster models blend each cluster model with the other clusters' models
through the global coefficients ``A`` (cross-cluster benefit) and ``B``
(self vs. blend balance).

Client side: ``alpha`` scores how well each soft cluster model pulls the
client's samples onto the frozen classifier vectors, ``beta`` uses Soft
Neighborhood Density to balance the own-cluster model against the
alpha-blend, and the resulting initial model is the two-level combination.
``expand_weights`` flattens that combination into one convex weight per
hard cluster model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import xlogy

from .clustering import ClusterAssignment
from .errors import ConfigurationError, ProtocolError
from .model import (
    Batch,
    Model,
    combine,
    cosine_matrix,
    features,
    forward,
    softmax_rows,
)

SIMPLEX_TOL = 1e-9


def check_simplex(w, what: str, tol: float = SIMPLEX_TOL) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < -tol) or abs(w.sum() - 1.0) > tol:
        raise ConfigurationError(f"{what} is not on the probability simplex: {w}")
    return w


@dataclass(frozen=True)
class GlobalCoefficients:
    """``A[src, dst]`` is the benefit of cluster ``dst`` for clients of cluster ``src``.

    Every column sums to one (each soft model is a convex mix of cluster
    models); every row of ``B`` is ``(self weight, blend weight)``.
    ``benefit`` keeps the raw per-cluster mean alpha table the columns were
    normalised from.
    """

    A: np.ndarray
    B: np.ndarray
    benefit: np.ndarray | None = None

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        B = np.asarray(self.B, dtype=np.float64)
        c = A.shape[0]
        if A.shape != (c, c) or B.shape != (c, 2):
            raise ConfigurationError(f"A must be CxC and B Cx2, got {A.shape} and {B.shape}")
        for j in range(c):
            check_simplex(A[:, j], f"column {j} of A")
            check_simplex(B[j], f"row {j} of B")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @classmethod
    def identity(cls, num_clusters: int) -> "GlobalCoefficients":
        """Coefficients under which soft cluster models equal the hard ones."""
        B = np.zeros((num_clusters, 2))
        B[:, 0] = 1.0
        return cls(np.eye(num_clusters), B)

    @property
    def num_clusters(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class WeightBundle:
    client_id: int
    alpha: np.ndarray
    beta: np.ndarray
    v: np.ndarray | None = None


def cluster_scores(data: Batch, cluster_models: Sequence[Model], classifier_weight) -> np.ndarray:
    """Mean over samples of the best cosine between a model's feature and any class vector."""
    W = np.asarray(classifier_weight, dtype=np.float64)
    scores = []
    for model in cluster_models:
        sims = cosine_matrix(features(model, data), W.T)
        scores.append(sims.max(axis=1).mean())
    return np.array(scores)


def alpha_weights(data: Batch, cluster_models: Sequence[Model], classifier_weight,
                  temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ConfigurationError("alpha temperature must be positive")
    scores = cluster_scores(data, cluster_models, classifier_weight)
    return softmax_rows(scores / temperature)


def snd_from_outputs(outputs: np.ndarray, temperature: float = 0.05) -> float:
    """Soft Neighborhood Density of a set of output vectors.

    Cosine similarities between outputs (self-pairs excluded) are turned
    into a per-row neighbour distribution with a tempered softmax; the score
    is the mean row entropy.
    """
    out = np.asarray(outputs, dtype=np.float64)
    n = out.shape[0]
    if n < 2:
        raise ProtocolError("SND needs at least two samples")
    q = cosine_matrix(out, out) / temperature
    off = ~np.eye(n, dtype=bool)
    q = q[off].reshape(n, n - 1)
    p = softmax_rows(q)
    return float(0.0 - xlogy(p, p).sum(axis=1).mean())


def snd(model: Model, data: Batch, temperature: float = 0.05, cap: int | None = None,
        rng: np.random.Generator | None = None) -> float:
    """SND of the model's softmax outputs, on at most ``cap`` seeded-subsampled rows."""
    if cap is not None and len(data) > cap:
        if rng is None:
            raise ProtocolError("subsampling for SND needs an rng")
        data = data.subset(np.sort(rng.choice(len(data), size=cap, replace=False)))
    return snd_from_outputs(softmax_rows(forward(model, data)[1]), temperature)


def beta_weights(snd_cluster: float, snd_blend: float, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ConfigurationError("beta temperature must be positive")
    return softmax_rows(np.array([snd_cluster, snd_blend]) / temperature)


def make_soft_models(hard: Sequence[Model], coeffs: GlobalCoefficients) -> list[Model]:
    hard = list(hard)
    if coeffs.num_clusters != len(hard):
        raise ConfigurationError("coefficient size does not match the number of clusters")
    soft = []
    for c, f_c in enumerate(hard):
        blend = combine(hard, coeffs.A[:, c])
        b0, b1 = coeffs.B[c]
        soft.append(combine([f_c, blend], [b0, b1]))
    return soft


def compose_initial_model(own_cluster_model: Model, soft: Sequence[Model], alpha, beta) -> Model:
    alpha = check_simplex(alpha, "alpha")
    beta = check_simplex(beta, "beta")
    blend = combine(soft, alpha)
    return combine([own_cluster_model, blend], beta)


def expand_weights(alpha, beta, coeffs: GlobalCoefficients, own_cluster: int) -> np.ndarray:
    """Per-hard-cluster weights equivalent to :func:`compose_initial_model` on soft models."""
    alpha = check_simplex(alpha, "alpha")
    b0, b1 = check_simplex(beta, "beta")
    A, B = coeffs.A, coeffs.B
    v = b1 * alpha * B[:, 0] + b1 * A @ (B[:, 1] * alpha)
    v[own_cluster] += b0
    return check_simplex(v, "expanded cluster weights")


def server_estimate_AB(bundles: Sequence[WeightBundle], assignment: ClusterAssignment) -> GlobalCoefficients:
    """Average alpha and beta within each cluster.

    The per-cluster mean alpha rows form the benefit table; ``A`` is that
    table normalised per destination column so each soft model stays a
    convex combination.
    """
    by_client = {b.client_id: b for b in bundles}
    c = assignment.num_clusters
    benefit = np.zeros((c, c))
    B = np.zeros((c, 2))
    for cid, members in enumerate(assignment.members):
        reporting = [by_client[k] for k in members if k in by_client]
        if not reporting:
            raise ProtocolError(f"cluster {cid} has no reporting clients")
        benefit[cid] = np.mean([b.alpha for b in reporting], axis=0)
        B[cid] = np.mean([b.beta for b in reporting], axis=0)
    col = benefit.sum(axis=0)
    A = np.where(col > 0, benefit / np.where(col > 0, col, 1.0), np.eye(c))
    return GlobalCoefficients(A, B, benefit)


def cluster_average(models: Sequence[Model], assignment: ClusterAssignment,
                    sample_counts: Sequence[int] | None = None) -> list[Model]:
    out = []
    for members in assignment.members:
        group = [models[k] for k in members]
        if sample_counts is None:
            w = np.full(len(group), 1.0 / len(group))
        else:
            counts = np.array([sample_counts[k] for k in members], dtype=np.float64)
            w = counts / counts.sum()
        out.append(combine(group, w))
    return out
