"""Probe selection as an MDP solved with a deep Q-network.

State: a K x N column-stochastic matrix, column i being the predicted class
distribution of vertex i for the coming slot. Action: a set of ``m_select``
vertices to probe. Reward: reconstruction accuracy on the unprobed vertices.

The combinatorial action space is factorised: the network scores every
vertex, a subset is valued at the mean score of its members, and the greedy
action is the top-``m_select`` vertices. Two scorers are available:
``"dense"`` maps the flattened K x N state to N scores, ``"shared"`` applies
one MLP to each vertex's state column concatenated with the mean column.
TD targets follow the double-DQN rule: the predict network picks the next
action and the target network values it.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, InsufficientDataError, ValidationError
from .gcn import OptimizerState, glorot_init, optimizer_step


@dataclass(frozen=True)
class SlotState:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2 or np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=0) - 1.0) > 1e-9):
            raise ValidationError("SlotState columns must be probability vectors")
        object.__setattr__(self, "probs", p)

    @property
    def k(self) -> int:
        return self.probs.shape[0]

    @property
    def n(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class TransitionModel:
    matrices: np.ndarray  # N x K x K; [i, a, b] = Pr(class b next | class a now) at vertex i

    def __post_init__(self):
        m = np.asarray(self.matrices, dtype=float)
        if m.ndim != 3 or m.shape[1] != m.shape[2]:
            raise ValidationError("transition matrices must be N x K x K")
        if np.any(m < 0) or np.any(np.abs(m.sum(axis=2) - 1.0) > 1e-9):
            raise ValidationError("transition rows must be probability vectors")
        object.__setattr__(self, "matrices", m)


@dataclass(frozen=True)
class Experience:
    state: SlotState
    action: tuple[int, ...]
    reward: float
    next_state: SlotState


def estimate_transition_model(label_history, k: int, smoothing: float = 1.0) -> TransitionModel:
    """Row-normalised per-vertex transition counts with additive smoothing.

    ``label_history`` is a sequence of per-vertex class sequences. Rows with
    no observations and no smoothing fall back to uniform.
    """
    mats = []
    for v, seq in enumerate(label_history):
        seq = np.asarray(seq, dtype=int)
        if seq.size < 2:
            raise InsufficientDataError(f"vertex {v} history needs at least 2 slots, got {seq.size}")
        counts = np.zeros((k, k))
        np.add.at(counts, (seq[:-1], seq[1:]), 1.0)
        counts += smoothing
        totals = counts.sum(axis=1, keepdims=True)
        mats.append(np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / k))
    return TransitionModel(np.array(mats))


def initial_state(model: TransitionModel, last_classes) -> SlotState:
    """Next-slot prediction from the last known class of every vertex."""
    idx = np.arange(model.matrices.shape[0])
    return SlotState(model.matrices[idx, np.asarray(last_classes, dtype=int)].T)


def transition(state: SlotState, action: Sequence[int], observed: Mapping[int, int],
               model: TransitionModel) -> SlotState:
    if set(observed) != set(int(a) for a in action):
        raise ValidationError("observations must cover exactly the probed vertices")
    mats = model.matrices
    # unprobed: p_next = M^T p for each vertex
    nxt = np.einsum("nab,an->bn", mats, state.probs)
    for v, c in observed.items():
        nxt[:, v] = mats[v, c]
    nxt /= nxt.sum(axis=0, keepdims=True)
    return SlotState(nxt)


def reward(predicted, truth, action: Sequence[int]) -> float:
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    keep = np.ones(truth.size, dtype=bool)
    keep[list(action)] = False
    if not keep.any():
        raise ValidationError("reward is undefined when every vertex is probed")
    return float(np.mean(predicted[keep] == truth[keep]))


class ReplayBuffer:
    """FIFO experience pool; the oldest entries are evicted at capacity."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("replay capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[Experience] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def push(self, exp: Experience) -> None:
        self._items.append(exp)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Experience]:
        idx = rng.choice(len(self._items), size=min(batch_size, len(self._items)), replace=False)
        return [self._items[i] for i in idx]


class QNetwork:
    """Fully connected ReLU network mapping a flattened state to per-vertex scores."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator):
        self.sizes = list(sizes)
        self.weights = glorot_init(self.sizes, rng)
        self.biases = [np.zeros(s) for s in self.sizes[1:]]

    @property
    def params(self) -> list[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    @params.setter
    def params(self, values):
        self.weights = [v.copy() for v in values[0::2]]
        self.biases = [v.copy() for v in values[1::2]]

    def copy_from(self, other: "QNetwork") -> None:
        self.params = other.params

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if l < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts, d_out: np.ndarray) -> list[np.ndarray]:
        grads = [None] * (2 * len(self.weights))
        d = d_out
        for l in range(len(self.weights) - 1, -1, -1):
            grads[2 * l] = acts[l].T @ d
            grads[2 * l + 1] = d.sum(axis=0)
            if l:
                d = (d @ self.weights[l].T) * (acts[l] > 0)
        return grads


@dataclass
class DqnConfig:
    m_select: int | None = None     # default N // 10
    beta: float = 0.9               # discount factor
    lr: float = 1e-3
    hidden: tuple[int, int] = (128, 64)
    replay_capacity: int = 10_000
    batch_size: int = 32
    sync_every: int = 50
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_slots: int = 500
    train_steps_per_slot: int = 8
    architecture: str = "dense"     # "dense" | "shared"
    seed: int = 0

    def resolve_m(self, n: int) -> int:
        m = self.m_select if self.m_select is not None else max(1, n // 10)
        if not 1 <= m <= n:
            raise ConfigError(f"m_select={m} must lie in [1, N={n}]")
        return m

    def validate(self) -> None:
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError("beta must lie in [0, 1)")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ConfigError("need 0 <= eps_end <= eps_start <= 1")
        if self.batch_size < 1 or self.sync_every < 1 or self.eps_decay_slots < 1:
            raise ConfigError("batch_size, sync_every and eps_decay_slots must be >= 1")
        if self.architecture not in ("shared", "dense"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.train_steps_per_slot < 1:
            raise ConfigError("train_steps_per_slot must be >= 1")


def epsilon_at(config: DqnConfig, slot: int) -> float:
    """Geometric decay from eps_start to eps_end over ``eps_decay_slots``, then flat."""
    if config.eps_start == 0.0:
        return 0.0
    frac = min(slot, config.eps_decay_slots) / config.eps_decay_slots
    return max(config.eps_end, config.eps_start * (config.eps_end / config.eps_start) ** frac)


def top_m(scores: np.ndarray, m: int) -> tuple[int, ...]:
    """Indices of the m largest scores, ties to the lowest vertex id."""
    order = np.argsort(-scores, kind="stable")
    return tuple(sorted(int(i) for i in order[:m]))


class DqnAgent:
    def __init__(self, n: int, k: int, config: DqnConfig):
        config.validate()
        self.n, self.k, self.config = n, k, config
        self.m = config.resolve_m(n)
        rng = np.random.default_rng([config.seed, 10])
        if config.architecture == "dense":
            sizes = [k * n, *config.hidden, n]
        else:
            sizes = [2 * k, *config.hidden, 1]
        self.predict_net = QNetwork(sizes, rng)
        self.target_net = QNetwork(sizes, rng)
        self.target_net.copy_from(self.predict_net)
        self.opt = OptimizerState(rule="adam", lr=config.lr)
        self.replay = ReplayBuffer(config.replay_capacity)
        self.rng = np.random.default_rng([config.seed, 11])
        self.steps = 0
        self.slots_seen = 0

    @property
    def epsilon(self) -> float:
        return epsilon_at(self.config, self.slots_seen)

    def encode(self, probs: np.ndarray) -> np.ndarray:
        """Network input for a stack of B states (B x K x N)."""
        b = probs.shape[0]
        if self.config.architecture == "dense":
            return probs.reshape(b, -1)
        cols = probs.transpose(0, 2, 1)                                  # B x N x K
        ctx = np.broadcast_to(cols.mean(axis=1, keepdims=True), cols.shape)
        return np.concatenate([cols, ctx], axis=2).reshape(b * self.n, 2 * self.k)

    def batch_scores(self, net: QNetwork, probs: np.ndarray):
        """B x N scores plus the activations needed for backprop."""
        out, acts = net.forward(self.encode(probs))
        return out.reshape(probs.shape[0], self.n), acts

    def scores(self, state: SlotState) -> np.ndarray:
        return self.batch_scores(self.predict_net, state.probs[None])[0][0]

    def sync_target(self) -> None:
        self.target_net.copy_from(self.predict_net)

    def observe(self, exp: Experience) -> None:
        self.replay.push(exp)
        self.slots_seen += 1

    def learn(self) -> float | None:
        """Run the configured number of train steps if enough experience exists."""
        if len(self.replay) < self.config.batch_size:
            return None
        loss = None
        for _ in range(self.config.train_steps_per_slot):
            batch = self.replay.sample(self.config.batch_size, self.rng)
            loss = train_step(self, batch, self.config.beta)
        return loss

    def to_dict(self) -> dict:
        return {
            "architecture": self.config.architecture,
            "sizes": self.predict_net.sizes,
            "weights": [p.tolist() for p in self.predict_net.params],
            "target_weights": [p.tolist() for p in self.target_net.params],
            "epsilon": self.epsilon,
            "steps": self.steps,
            "slots_seen": self.slots_seen,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")


def select_action(agent: DqnAgent, state: SlotState, epsilon_greedy: float,
                  rng: np.random.Generator | None = None) -> tuple[int, ...]:
    if not 0.0 <= epsilon_greedy <= 1.0:
        raise ValueError("epsilon_greedy must lie in [0, 1]")
    if agent.m > state.n:
        raise ConfigError("m_select exceeds vertex count")
    rng = agent.rng if rng is None else rng
    if epsilon_greedy > 0.0 and rng.random() < epsilon_greedy:
        return tuple(sorted(int(i) for i in rng.choice(state.n, size=agent.m, replace=False)))
    return top_m(agent.scores(state), agent.m)


def td_targets(agent: DqnAgent, batch: Sequence[Experience], beta: float) -> np.ndarray:
    rewards = np.array([e.reward for e in batch])
    if beta == 0.0:
        return rewards
    # the predict network picks the next action, the target network values it
    nxt = np.stack([e.next_state.probs for e in batch])
    chooser = agent.batch_scores(agent.predict_net, nxt)[0]
    q_next = agent.batch_scores(agent.target_net, nxt)[0]
    picks = np.argsort(-chooser, axis=1, kind="stable")[:, : agent.m]
    best = np.take_along_axis(q_next, picks, axis=1).mean(axis=1)
    return rewards + beta * best


def train_step(agent: DqnAgent, batch: Sequence[Experience], beta: float) -> float:
    """One Adam step on the squared TD error; returns the pre-update loss."""
    if not batch:
        raise ValueError("empty batch")
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must lie in [0, 1)")
    targets = td_targets(agent, batch, beta)
    scores, acts = agent.batch_scores(agent.predict_net, np.stack([e.state.probs for e in batch]))
    sel = np.zeros_like(scores)
    for b, e in enumerate(batch):
        sel[b, list(e.action)] = 1.0 / len(e.action)
    q = (scores * sel).sum(axis=1)
    err = q - targets
    loss = float(np.mean(err ** 2))
    d_scores = (2.0 / len(batch)) * err[:, None] * sel
    grads = agent.predict_net.backward(acts, d_scores.reshape(-1, agent.predict_net.sizes[-1]))
    agent.predict_net.params = optimizer_step(agent.predict_net.params, grads, agent.opt)
    agent.steps += 1
    if agent.steps % agent.config.sync_every == 0:
        agent.sync_target()
    return loss

