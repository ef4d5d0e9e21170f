import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedwca.errors import ConfigurationError
from fedwca.model import (
    Batch,
    combine,
    cosine,
    cosine_matrix,
    feature_extractor_vector,
    first_layer_vector,
    forward,
    from_param_vector,
    init_model,
    softmax_rows,
    to_param_vector,
)

from conftest import perturbed, small_model


def loop_forward(model, x):
    """Scalar-loop forward pass used as an oracle for the vectorised one."""
    out = []
    for row in x:
        a = list(row)
        for layer in (*model.feature_layers, model.bottleneck):
            z = []
            for j in range(layer.out_dim):
                s = layer.bias[j]
                for i in range(layer.in_dim):
                    s += a[i] * layer.weight[i, j]
                z.append(max(s, 0.0) if layer.activation == "relu" else s)
            a = z
        feats = a
        logits = [
            model.classifier.bias[m] + sum(feats[i] * model.classifier.weight[i, m] for i in range(len(feats)))
            for m in range(model.num_classes)
        ]
        out.append((feats, logits))
    return np.array([f for f, _ in out]), np.array([l for _, l in out])


def test_forward_matches_scalar_loops(rng):
    m = small_model(3, input_dim=4, hidden=(6, 5))
    x = rng.normal(size=(7, 4))
    feats, logits = forward(m, Batch(x))
    ef, el = loop_forward(m, x)
    np.testing.assert_allclose(feats, ef, atol=1e-12)
    np.testing.assert_allclose(logits, el, atol=1e-12)


def test_shapes_and_names():
    m = small_model(hidden=(5, 7))
    assert list(m.tensors()) == [
        "feature.0.weight", "feature.0.bias", "feature.1.weight", "feature.1.bias",
        "bottleneck.weight", "bottleneck.bias", "classifier.weight", "classifier.bias",
    ]
    assert "classifier.weight" not in m.trainable_names()
    assert "classifier.weight" in small_model(frozen=False).trainable_names()


def test_parameters_are_read_only():
    m = small_model()
    with pytest.raises(ValueError):
        m.bottleneck.weight[0, 0] = 1.0


def test_mismatched_layers_rejected():
    a = init_model(4, (5,), 3, 2, np.random.default_rng(0))
    b = init_model(5, (6,), 3, 2, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        type(a)((a.feature_layers[0],), b.bottleneck, a.classifier)


def test_cosine_zero_vector_is_zero():
    assert cosine(np.zeros(3), np.ones(3)) == 0.0
    assert cosine([1, 0], [0, 1]) == 0.0
    assert cosine([2, 0], [1, 0]) == pytest.approx(1.0)


def test_cosine_matrix_matches_pairwise(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    expected = np.array([[cosine(x, y) for y in b] for x in a])
    np.testing.assert_allclose(cosine_matrix(a, b), expected, atol=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_is_a_distribution(values):
    p = softmax_rows(np.array([values]))
    assert np.all(p >= 0) and abs(p.sum() - 1.0) < 1e-12


def test_param_vector_round_trip(rng):
    m = small_model(hidden=(5, 4))
    v = to_param_vector(m)
    assert len(v) == m.num_parameters()
    back = from_param_vector(m, v)
    for name, t in m.tensors().items():
        np.testing.assert_array_equal(back.tensors()[name], t)
    assert len(first_layer_vector(m)) == 4 * 5 + 5
    assert len(feature_extractor_vector(m)) == m.num_parameters() - (3 * 3 + 3)


@given(st.integers(1, 5), st.integers(0, 10_000))
def test_combine_matches_scalar_oracle(n_models, seed):
    rng = np.random.default_rng(seed)
    base = small_model(seed % 7)
    models = [perturbed(base, rng) for _ in range(n_models)]
    w = rng.dirichlet(np.ones(n_models))
    mixed = combine(models, w)
    for name in base.feature_extractor_names():
        expected = np.zeros_like(base.tensors()[name])
        for idx in np.ndindex(expected.shape):
            expected[idx] = sum(w[c] * models[c].tensors()[name][idx] for c in range(n_models))
        np.testing.assert_allclose(mixed.tensors()[name], expected, atol=1e-12)
    np.testing.assert_array_equal(mixed.classifier.weight, models[0].classifier.weight)


def test_combine_rejects_non_simplex_weights():
    m = small_model()
    with pytest.raises(ConfigurationError):
        combine([m, m], [0.5, 0.6])
    with pytest.raises(ConfigurationError):
        combine([m], [1.0, 0.0])


def test_combine_unfrozen_classifier_is_mixed(rng):
    a = small_model(0, frozen=False)
    b = perturbed(a, rng).with_tensors({"classifier.bias": np.ones(3)})
    mixed = combine([a, b], [0.5, 0.5])
    np.testing.assert_allclose(mixed.classifier.bias, 0.5 * (a.classifier.bias + 1.0))
