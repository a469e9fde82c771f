"""Double DQN with uniform replay and epsilon-greedy exploration.

Every stored transition keeps the environment's feedback bit so the frontier
loss and the validity classifier can be trained from the same replay buffer.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Any, Sequence

import numpy as np

from . import nn
from .envs.base import FeedbackStep
from .frontier import FrontierConfig, ValidityClassifier, batch_frontier_loss, composite_loss

# offset between the agent seed and the classifier's init seed; keeps the
# classifier out of the agent's RNG stream so enabling it does not perturb it
CLASSIFIER_SEED_OFFSET = 7919


@dataclass
class AgentConfig:
    gamma: float = 0.99
    batch_size: int = 32
    target_update: int = 2000       # gradient steps between target syncs
    learn_start: int = 1000         # transitions stored before the first update
    train_every: int = 1            # env steps per gradient step
    buffer_capacity: int = 10_000
    lr_start: float = 1e-5
    lr_end: float = 1e-7
    weight_decay: float = 1e-4
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.1       # share of total env steps spent annealing epsilon
    rms_alpha: float = 0.99
    rms_eps: float = 1e-8

    def __post_init__(self) -> None:
        for name in ("batch_size", "target_update", "learn_start", "train_every", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown agent config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class ExplorationSchedule:
    eps_start: float = 1.0
    eps_end: float = 0.05
    horizon: int = 10_000

    def value(self, step: int) -> float:
        if self.horizon <= 0 or step >= self.horizon:
            return self.eps_end
        frac = step / self.horizon
        return self.eps_start + frac * (self.eps_end - self.eps_start)


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    f: np.ndarray

    def __len__(self) -> int:
        return len(self.a)


class ReplayBuffer:
    """Fixed-capacity ring buffer; oldest transitions are overwritten first."""

    def __init__(self, capacity: int, obs_shape: Sequence[int], dtype=np.float32):
        self.capacity = capacity
        self.s = np.zeros((capacity, *obs_shape), dtype=dtype)
        self.s_next = np.zeros((capacity, *obs_shape), dtype=dtype)
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity, dtype=dtype)
        self.done = np.zeros(capacity, dtype=bool)
        self.f = np.zeros(capacity, dtype=np.int8)
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def push(self, s: np.ndarray, a: int, r: float, s_next: np.ndarray, done: bool, f: int) -> None:
        if f and (r != 0 or not np.array_equal(s, s_next)):
            raise ValueError("rejected transition must have zero reward and an unchanged state")
        i = self.inserted % self.capacity
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s_next[i] = s_next
        self.done[i] = done
        self.f[i] = f
        self.inserted += 1

    def indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, len(self), size=batch_size)

    def gather(self, idx: np.ndarray) -> Batch:
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx], self.f[idx])

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        return self.gather(self.indices(batch_size, rng))


def select_action(qnet: nn.Network, observation: np.ndarray, epsilon: float, rng: np.random.Generator,
                  n_actions: int | None = None) -> int:
    """Epsilon-greedy; greedy ties go to the lowest index.

    Exactly one uniform draw is consumed per call, plus one integer draw on
    the exploring branch.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    q = qnet(observation[None])[0]
    if not np.all(np.isfinite(q)):
        raise nn.DivergenceError("non-finite Q-values")
    if rng.random() < epsilon:
        return int(rng.integers(n_actions or len(q)))
    return int(np.argmax(q))


def double_dqn_targets(batch: Batch, qnet: nn.Network, target_net: nn.Network, gamma: float,
                       q_next_online: np.ndarray | None = None) -> np.ndarray:
    """y = r for terminal transitions, else r + gamma * Q_target(s', argmax_a Q_online(s', a))."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if q_next_online is None:
        q_next_online = qnet(batch.s_next)
    best = q_next_online.argmax(axis=1)
    q_eval = target_net(batch.s_next)[np.arange(len(batch)), best]
    return batch.r + gamma * np.where(batch.done, 0.0, q_eval).astype(batch.r.dtype)


def td_loss_from_q(q: np.ndarray, actions: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """MSE between Q(s_i, a_i) and y_i, and its gradient w.r.t. the full Q matrix."""
    rows = np.arange(len(actions))
    resid = q[rows, actions] - targets
    loss = float(np.mean(resid.astype(np.float64) ** 2))
    if not np.isfinite(loss):
        raise nn.DivergenceError("non-finite TD loss")
    dq = np.zeros_like(q)
    dq[rows, actions] = 2.0 * resid / len(actions)
    return loss, dq


def td_loss(qnet: nn.Network, batch: Batch, targets: np.ndarray) -> tuple[float, list[np.ndarray]]:
    q, trace = qnet.forward(batch.s)
    loss, dq = td_loss_from_q(q, batch.a, targets)
    return loss, nn.backward(trace, dq, input_grad=False).params


@dataclass
class TickReport:
    dqn_loss: float
    frontier_loss: float
    classifier_loss: float
    classifier_acc: float
    lr: float
    synced: bool


class DQNAgent:
    """Online/target Q-networks, replay buffer, optional frontier classifier.

    Single-owner and single-threaded; ``snapshot()`` hands out immutable copies.
    """

    def __init__(self, specs: Sequence[nn.LayerSpec], obs_shape: Sequence[int], config: AgentConfig,
                 seed: int, total_steps: int, frontier: FrontierConfig | None = None,
                 dtype=np.float32):
        self.config = config
        self.frontier = frontier
        self.total_steps = total_steps
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self.online = nn.Network.build(specs, seed, dtype)
        self.online.opt = nn.OptState.zeros_like(self.online.params, config.rms_alpha, config.rms_eps)
        self.target = nn.Network(list(specs), self.online.params.copy())
        self.n_actions = specs[-1].out_features
        self.replay = ReplayBuffer(config.buffer_capacity, obs_shape, dtype)
        self.schedule = ExplorationSchedule(config.eps_start, config.eps_end,
                                            int(round(config.eps_fraction * total_steps)))
        self.classifier: ValidityClassifier | None = None
        if frontier is not None:
            self.classifier = ValidityClassifier(specs, seed + CLASSIFIER_SEED_OFFSET, frontier, dtype)
            self.classifier.net.opt = nn.OptState.zeros_like(self.classifier.net.params,
                                                             config.rms_alpha, config.rms_eps)
        self.env_steps = 0
        self.grad_steps = 0

    @property
    def epsilon(self) -> float:
        return self.schedule.value(self.env_steps)

    @property
    def lr(self) -> float:
        c = self.config
        return nn.lr_schedule(min(self.env_steps, self.total_steps), self.total_steps, c.lr_start, c.lr_end)

    def act(self, observation: np.ndarray, epsilon: float | None = None) -> int:
        eps = self.epsilon if epsilon is None else epsilon
        return select_action(self.online, observation, eps, self.rng, self.n_actions)

    def greedy(self, observation: np.ndarray) -> int:
        return int(np.argmax(self.online(observation[None])[0]))

    def observe(self, s: np.ndarray, a: int, step: FeedbackStep) -> TickReport | None:
        """Store one transition and train if due. Returns a report when a gradient step ran."""
        self.replay.push(s, a, step.reward, step.observation, step.terminal, step.feedback)
        self.env_steps += 1
        c = self.config
        if len(self.replay) < c.learn_start or self.env_steps % c.train_every:
            return None
        return self.train_step(self.replay.sample(c.batch_size, self.rng))

    def train_step(self, batch: Batch) -> TickReport:
        c = self.config
        n = len(batch)
        q, trace = self.online.forward(batch.s)
        targets = double_dqn_targets(batch, self.online, self.target, c.gamma)
        j_dqn, dq = td_loss_from_q(q, batch.a, targets)
        j_f = cls_loss = 0.0
        acc = float("nan")
        lam_dqn = 1.0
        if self.classifier is not None:
            fc = self.frontier
            cls_loss, probs = self.classifier.train_step(batch.s, batch.a, batch.f)
            predicted_valid = probs[np.arange(n), batch.a] > fc.threshold
            acc = float(np.mean(predicted_valid == (batch.f == 0)))
            j_f, dq_f = batch_frontier_loss(q, batch.a, batch.f, probs, fc.threshold, fc.margin)
            lam_dqn = fc.lambda_dqn
            dq = lam_dqn * dq + fc.lambda_f * dq_f
        total = composite_loss(j_dqn, j_f, lam_dqn, self.frontier.lambda_f if self.frontier else 0.0)
        if not np.isfinite(total):
            raise nn.DivergenceError("non-finite composite loss")
        grads = nn.backward(trace, dq, input_grad=False)
        lr = self.lr
        self.online.apply(grads.params, lr, c.weight_decay)
        self.grad_steps += 1
        synced = self.grad_steps % c.target_update == 0
        if synced:
            self.sync_target()
        return TickReport(j_dqn, j_f, cls_loss, acc, lr, synced)

    def sync_target(self) -> None:
        self.target.load_params(self.online.params)

    def snapshot(self) -> dict[str, nn.NetworkParams]:
        snap = {"online": self.online.params.copy(), "target": self.target.params.copy()}
        if self.classifier is not None:
            snap["classifier"] = self.classifier.net.params.copy()
        return snap

    def checkpoint_doc(self) -> dict[str, Any]:
        doc = {"online": nn.checkpoint_doc(self.online.specs, self.online.params),
               "target": nn.checkpoint_doc(self.target.specs, self.target.params)}
        if self.classifier is not None:
            doc["classifier"] = nn.checkpoint_doc(self.classifier.net.specs, self.classifier.net.params)
        return doc
