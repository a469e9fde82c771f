import numpy as np
import pytest

from dqnf import nn
from dqnf.frontier import (FrontierConfig, ValidityClassifier, batch_frontier_loss, composite_loss,
                           frontier_loss, predict_valid_set)


def test_hand_example():
    q = np.array([0.5, 0.4, 0.45])
    loss, grad = frontier_loss(q, 2, {0, 1}, 0.1)
    assert loss == pytest.approx(0.0225)
    np.testing.assert_allclose(grad, [0.0, -0.3, 0.3])


def test_margin_satisfied_and_empty_set():
    q = np.array([0.5, 0.4, 0.1])
    assert frontier_loss(q, 2, {0, 1}, 0.1)[0] == 0.0
    loss, grad = frontier_loss(q, 2, set(), 0.1)
    assert loss == 0.0 and not grad.any()


def test_argmin_ties_go_to_lowest_index():
    _, grad = frontier_loss(np.array([0.2, 0.2, 0.9]), 2, {0, 1}, 0.1)
    assert grad[0] < 0 and grad[1] == 0


def test_batch_matches_single_state_loss():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(16, 6))
    actions = rng.integers(6, size=16)
    feedback = rng.integers(2, size=16)
    probs = rng.random((16, 6))
    loss, dq = batch_frontier_loss(q, actions, feedback, probs, 0.5, 0.1)
    rej = np.flatnonzero(feedback)
    expected = np.zeros_like(q)
    total = 0.0
    for i in rej:
        l, g = frontier_loss(q[i], actions[i], predict_valid_set(probs[i], 0.5, actions[i]), 0.1)
        total += l
        expected[i] = g / len(rej)
    assert loss == pytest.approx(total / len(rej))
    np.testing.assert_allclose(dq, expected)


def test_batch_without_rejections():
    q = np.ones((4, 3))
    loss, dq = batch_frontier_loss(q, np.zeros(4, int), np.zeros(4, int), np.ones((4, 3)), 0.5, 0.1)
    assert loss == 0.0 and not dq.any()


def test_predict_valid_set_cases():
    assert predict_valid_set(np.full(4, 0.9), 0.5, 2) == frozenset({0, 1, 3})
    assert predict_valid_set(np.full(4, 0.3), 0.5, 2) == frozenset()
    assert 1 not in predict_valid_set(np.array([0.9, 0.99, 0.2]), 0.5, 1)


def test_composite_loss():
    assert composite_loss(0.2, 0.1) == pytest.approx(0.25)
    assert composite_loss(0.2, 0.7, 1.0, 0.0) == 0.2
    assert composite_loss(0.2, 0.0) == 0.2


def test_config_validation():
    with pytest.raises(ValueError):
        FrontierConfig(margin=0)
    with pytest.raises(ValueError):
        FrontierConfig(threshold=1.0)


def _classifier(seed=0):
    return ValidityClassifier(nn.mlp_chain(4, 3, hidden=(5,)), seed, FrontierConfig(classifier_lr=1e-2),
                              np.float64)


def test_bce_half_probability():
    clf = _classifier()
    last = clf.net.params.tensors
    last[-2][:] = 0.0
    last[-1][:] = 0.0                             # every head outputs exactly 0.5
    loss, probs = clf.train_step(np.ones((1, 4)), np.array([1]), np.array([0]))
    assert probs[0, 1] == 0.5
    assert loss == pytest.approx(np.log(2.0), abs=1e-12)


def test_saturated_heads_are_a_fixed_point():
    clf = _classifier()
    clf.net.params.tensors[-2][:] = 0.0
    clf.net.params.tensors[-1][:] = [40.0, -40.0, 40.0]  # p = 1, 0, 1 to within 1e-17
    before = clf.net.params.copy()
    loss, _ = clf.train_step(np.ones((2, 4)), np.array([0, 1]), np.array([0, 1]))
    assert loss < 1e-9
    for a, b in zip(before.tensors, clf.net.params.tensors):
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_masked_heads_get_no_gradient():
    """Finite differences: moving a head's bias changes the loss only for the taken head."""
    clf = _classifier(3)
    rng = np.random.default_rng(0)
    x, a, f = rng.normal(size=(3, 4)), np.array([0, 0, 2]), np.array([1, 0, 1])

    def loss_of(params):
        probs = nn.forward(params, clf.net.specs, x, keep_trace=False)[0]
        y = 1.0 - f
        p = probs[np.arange(3), a]
        return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))

    base = clf.net.params.copy()
    numeric = []
    for head in range(3):
        plus, minus = base.copy(), base.copy()
        plus.tensors[-1][head] += 1e-6
        minus.tensors[-1][head] -= 1e-6
        numeric.append((loss_of(plus) - loss_of(minus)) / 2e-6)
    assert numeric[1] == 0.0
    # one RMSprop step: the untaken head's bias must not move
    clf.config.classifier_lr = 1e-3
    clf.train_step(x, a, f)
    assert clf.net.params.tensors[-1][1] == base.tensors[-1][1]
    assert clf.net.params.tensors[-1][0] != base.tensors[-1][0]
    assert np.sign(base.tensors[-1][0] - clf.net.params.tensors[-1][0]) == np.sign(numeric[0])


def test_classifier_learns_validity():
    rng = np.random.default_rng(1)
    clf = _classifier(1)
    clf.config.classifier_lr = 3e-3
    states = np.eye(4)
    valid = np.array([[1, 1, 0], [0, 1, 1], [1, 0, 1], [0, 0, 1]])
    for _ in range(3000):
        i = rng.integers(4, size=32)
        a = rng.integers(3, size=32)
        clf.train_step(states[i], a, 1 - valid[i, a])
    assert np.array_equal(clf.predict(states) > 0.5, valid.astype(bool))
