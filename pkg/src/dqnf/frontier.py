"""Frontier margin loss and the action-validity classifier.

The frontier loss pushes the value of an action the environment rejected
below the smallest value among the actions believed valid in that state:

    J_F = max(0, Q(s, a_rej) - (min_{a in V} Q(s, a) - m))^2

with V estimated by thresholding a per-action sigmoid classifier. The
classifier is trained only on the head of the action actually taken.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import nn


@dataclass
class FrontierConfig:
    margin: float = 0.1
    lambda_dqn: float = 1.0
    lambda_f: float = 0.5
    threshold: float = 0.5
    classifier_lr: float = 1e-4
    classifier_weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.lambda_dqn < 0 or self.lambda_f < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def _bce_from_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    # softplus(z) - y*z, stable for large |z|
    return np.logaddexp(0.0, z) - y * z


class ValidityClassifier:
    """Per-action sigmoid heads predicting 1 = valid, 0 = rejected.

    Shares the Q-network's layer chain (plus a sigmoid) but has its own
    parameters and RMSprop state.
    """

    def __init__(self, trunk: Sequence[nn.LayerSpec], seed: int, config: FrontierConfig | None = None,
                 dtype=np.float32):
        specs = list(trunk)
        if specs[-1].kind != "sigmoid":
            specs.append(nn.sigmoid())
        self.config = config or FrontierConfig()
        self.net = nn.Network.build(specs, seed, dtype)

    @property
    def n_actions(self) -> int:
        return self.net.specs[-2].out_features

    def predict(self, obs: np.ndarray) -> np.ndarray:
        return self.net(obs)

    def train_step(self, obs: np.ndarray, actions: np.ndarray, feedback: np.ndarray
                   ) -> tuple[float, np.ndarray]:
        """One masked-BCE RMSprop step. Returns (loss, pre-update probabilities)."""
        probs, trace = self.net.forward(obs)
        head = len(self.net.specs) - 1
        rows = np.arange(len(actions))
        z_all = _sigmoid_input(trace, head)
        z = z_all[rows, actions]
        y = 1.0 - feedback.astype(z.dtype)
        losses = _bce_from_logits(z, y)
        loss = float(losses.mean())
        if not np.isfinite(loss):
            raise nn.DivergenceError("non-finite classifier loss")
        dz = np.zeros_like(z_all)
        dz[rows, actions] = (probs[rows, actions] - y) / len(actions)
        grads = nn.backward(trace, dz, from_layer=head, input_grad=False)
        self.net.apply(grads.params, self.config.classifier_lr, self.config.classifier_weight_decay)
        return loss, probs


def _sigmoid_input(trace: nn.Trace, head: int) -> np.ndarray:
    # logits = output of the dense layer under the sigmoid, rebuilt from its cached input
    dense_idx = head - 1
    x = trace.caches[dense_idx]
    slots = nn._slots(trace.specs)
    w, b = trace.params.tensors[slots[dense_idx]], trace.params.tensors[slots[dense_idx] + 1]
    return x @ w.T + b


def classifier_train_step(classifier: ValidityClassifier, obs: np.ndarray, actions: np.ndarray,
                          feedback: np.ndarray) -> float:
    return classifier.train_step(obs, np.asarray(actions), np.asarray(feedback))[0]


def predict_valid_set(probs: np.ndarray, threshold: float, forbidden: int | None = None) -> frozenset[int]:
    """Actions whose validity activation is strictly above ``threshold``, minus the rejected one."""
    valid = {int(a) for a in np.flatnonzero(np.asarray(probs) > threshold)}
    valid.discard(forbidden)
    return frozenset(valid)


def frontier_loss(q_values: np.ndarray, forbidden: int, valid_set: Sequence[int] | frozenset[int],
                  margin: float) -> tuple[float, np.ndarray]:
    """Squared-hinge frontier loss for one state and its gradient w.r.t. ``q_values``.

    The gradient touches only the rejected action and the arg-min valid action
    (lowest index on ties). An empty valid set gives zero loss.
    """
    q = np.asarray(q_values, dtype=np.float64)
    grad = np.zeros_like(q)
    valid = sorted(a for a in valid_set if a != forbidden)
    if not valid:
        return 0.0, grad
    j = valid[int(np.argmin(q[valid]))]
    violation = q[forbidden] - (q[j] - margin)
    if violation <= 0:
        return 0.0, grad
    grad[forbidden] = 2.0 * violation
    grad[j] = -2.0 * violation
    return float(violation * violation), grad


def batch_frontier_loss(q: np.ndarray, actions: np.ndarray, feedback: np.ndarray, probs: np.ndarray,
                        threshold: float, margin: float) -> tuple[float, np.ndarray]:
    """Mean frontier loss over the rejected transitions of a batch, with dJ/dQ.

    Vectorised form of ``frontier_loss``; transitions with feedback 0
    contribute nothing and a batch without rejections gives (0, zeros).
    """
    dq = np.zeros_like(q)
    rejected = feedback == 1
    n_rej = int(rejected.sum())
    if n_rej == 0:
        return 0.0, dq
    rows = np.arange(len(q))
    actions = np.asarray(actions)
    valid = probs > threshold
    valid[rows, actions] = False
    masked = np.where(valid, q, np.inf)
    j = masked.argmin(axis=1)
    violation = q[rows, actions] - (q[rows, j] - margin)
    active = rejected & valid.any(axis=1) & (violation > 0)
    v = np.where(active, violation, 0.0)
    dq[rows, actions] += 2.0 * v / n_rej
    dq[rows, j] -= 2.0 * v / n_rej
    return float(np.sum(v.astype(np.float64) ** 2) / n_rej), dq


def composite_loss(j_dqn: float, j_f: float, lambda_dqn: float = 1.0, lambda_f: float = 0.5) -> float:
    return lambda_dqn * j_dqn + lambda_f * j_f
