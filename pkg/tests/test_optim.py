import time

import numpy as np
import pytest

from fedwca.errors import DataError, ProtocolError
from fedwca.model import Batch, forward, init_model
from fedwca.optim import (
    OptimizerState,
    accuracy,
    ce_loss_grad,
    im_loss_grad,
    pretrain_source,
    sgd_step,
    train_epoch,
)

from conftest import small_model


def finite_difference(loss_fn, model, name, h=1e-5):
    t = model.tensors()
    base = t[name]
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (loss_fn(model.with_tensors({name: plus}))
                     - loss_fn(model.with_tensors({name: minus}))) / (2 * h)
    return grad


def relative_error(a, b, floor=1e-6):
    """Max abs difference over the larger max magnitude, floored so round-off near zero is not amplified."""
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor)


def random_model(rng, input_dim, hidden, bottleneck, classes, frozen):
    """Randomly initialised model with random biases too, so no ReLU sits exactly at its kink."""
    m = init_model(input_dim, hidden, bottleneck, classes, rng)
    t = m.tensors()
    m = m.with_tensors({n: t[n] + 0.1 * rng.normal(size=t[n].shape) for n in t if n.endswith("bias")})
    return m.freeze_classifier() if frozen else m


def check_gradients(seed, frozen=True):
    rng = np.random.default_rng(seed)
    m = random_model(rng, 3, (4, 3), 3, 3, frozen)
    x = rng.normal(size=(6, 3))
    y = rng.integers(0, 3, size=6)
    worst = 0.0
    for fn, batch in ((ce_loss_grad, Batch(x, y)), (im_loss_grad, Batch(x))):
        _, grads = fn(m, batch)
        for name in m.trainable_names():
            fd = finite_difference(lambda mm: fn(mm, batch)[0], m, name)
            worst = max(worst, relative_error(grads[name], fd))
    return worst


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    assert check_gradients(seed) < 1e-4


def test_gradients_with_trainable_classifier():
    assert check_gradients(11, frozen=False) < 1e-4


def test_frozen_classifier_gets_no_gradient():
    m = small_model()
    _, g = ce_loss_grad(m, Batch(np.ones((2, 4)), [0, 1]))
    assert "classifier.weight" not in g


def test_im_loss_value_against_definition(rng):
    m = small_model()
    x = rng.normal(size=(9, 4))
    loss, _ = im_loss_grad(m, Batch(x))
    p = np.exp(forward(m, Batch(x))[1])
    p /= p.sum(axis=1, keepdims=True)
    ent = -np.mean(np.sum(p * np.log(p), axis=1))
    mean = p.mean(axis=0)
    div = np.sum(mean * np.log(mean))
    assert loss == pytest.approx(ent + div, rel=1e-12)


def test_ce_rejects_bad_labels():
    with pytest.raises(DataError):
        ce_loss_grad(small_model(), Batch(np.ones((1, 4)), [5]))
    with pytest.raises(DataError):
        ce_loss_grad(small_model(), Batch(np.ones((1, 4))))


def test_sgd_step_hand_computed():
    m = small_model()
    name = "bottleneck.bias"
    state = OptimizerState.for_model(m, learning_rate=0.1, momentum=0.5, weight_decay=0.01)
    grads = {n: np.ones_like(t) for n, t in m.tensors().items() if n in m.trainable_names()}
    p0 = m.tensors()[name]
    m1 = sgd_step(m, grads, state)
    v1 = 1.0 + 0.01 * p0
    np.testing.assert_allclose(m1.tensors()[name], p0 - 0.1 * v1)
    m2 = sgd_step(m1, grads, state)
    p1 = m1.tensors()[name]
    v2 = 0.5 * v1 + 1.0 + 0.01 * p1
    np.testing.assert_allclose(m2.tensors()[name], p1 - 0.1 * v2)
    np.testing.assert_array_equal(m2.classifier.weight, m.classifier.weight)


def test_train_epoch_ignores_excluded_rows(rng):
    m = small_model()
    x = rng.normal(size=(10, 4))
    excluded = Batch(x, np.full(10, -1))
    s1 = OptimizerState.for_model(m, 0.05)
    s2 = OptimizerState.for_model(m, 0.05)
    a, rep = train_epoch(m, Batch(x), excluded, 0.3, s1, np.random.default_rng(0), 4)
    b, _ = train_epoch(m, Batch(x), None, 0.3, s2, np.random.default_rng(0), 4)
    assert rep.ce == 0.0
    for n in m.trainable_names():
        np.testing.assert_array_equal(a.tensors()[n], b.tensors()[n])


def test_train_epoch_alignment_checked(rng):
    m = small_model()
    with pytest.raises(ProtocolError):
        train_epoch(m, Batch(np.ones((3, 4))), Batch(np.ones((2, 4)), [0, 1]), 0.3,
                    OptimizerState.for_model(m, 0.1), rng)


def test_pretrain_learns_separable_data():
    rng = np.random.default_rng(5)
    y = np.arange(150) % 3
    centers = np.eye(3, 4) * 3
    x = centers[y] + 0.3 * rng.normal(size=(150, 4))
    m = small_model(frozen=False)
    trained = pretrain_source(m, Batch(x, y), 20, OptimizerState.for_model(m, 0.05), rng, 16)
    assert trained.classifier.frozen
    assert accuracy(trained, Batch(x, y)) > 0.95


def test_gradient_check_is_fast():
    start = time.perf_counter()
    for seed in range(10):
        check_gradients(100 + seed)
    assert time.perf_counter() - start < 10
