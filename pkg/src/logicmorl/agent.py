"""Specification-conditioned multi-objective DQN.

Transitions keep their full reward vector. Each update samples 32 of them and
pairs every one with 8 goals, scalarizing the stored vector with each goal's
semantics, so one replayed experience trains many behaviors at once.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict, field
from typing import Sequence

import numpy as np

from . import gridworld as gw
from . import neural as nn
from . import speclang as sl
from .errors import BufferTooSmall, CheckpointError, ShapeError


@dataclass
class AgentConfig:
    gamma: float = 0.95
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    specs_per_batch: int = 8
    replay_capacity: int = 100_000
    target_sync_every: int = 500
    train_every: int = 5
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.3
    lr_end: float | None = 1e-4
    bootstrap_timeouts: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown agent keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def epsilon_at(step: int, total_steps: int, cfg: AgentConfig) -> float:
    """Linear anneal from eps_start to eps_end over the first eps_fraction of training."""
    horizon = max(1, int(cfg.eps_fraction * total_steps))
    frac = min(1.0, step / horizon)
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


def learning_rate_at(step: int, total_steps: int, cfg: AgentConfig) -> float:
    """Constant ``lr``, or a linear decay to ``lr_end`` at ``total_steps`` when that is set."""
    if cfg.lr_end is None:
        return cfg.lr
    frac = min(1.0, step / max(1, total_steps))
    return cfg.lr + frac * (cfg.lr_end - cfg.lr)


# ---------------------------------------------------------------------------
# goals


@dataclass(frozen=True, eq=False)
class SpecGoal:
    """A logical specification used as the conditioning input."""

    ast: sl.SpecAst
    spec_id: int = -1
    text: str = field(init=False)
    tokens: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "text", sl.render(self.ast))
        object.__setattr__(self, "tokens", tuple(sl.tokenize(self.ast)))

    @property
    def key(self):
        return self.tokens

    def scalarize(self, rewards: np.ndarray) -> np.ndarray:
        return sl.evaluate(np.atleast_2d(rewards), self.ast)


@dataclass(frozen=True, eq=False)
class LinearGoal:
    """A weight vector on the simplex; the scalar reward is ``w . r``."""

    w: np.ndarray
    text: str = field(init=False)

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 1 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weight vector must lie on the simplex")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "text", "w=(" + " ".join(f"{v:.4g}" for v in w) + ")")

    @property
    def key(self):
        return self.w.tobytes()

    def scalarize(self, rewards: np.ndarray) -> np.ndarray:
        return np.atleast_2d(rewards) @ self.w

    def features(self, width: int) -> np.ndarray:
        out = np.zeros(width)
        out[: len(self.w)] = self.w
        return out


def dirichlet_goal(rng: np.random.Generator, n: int, alpha: float = 1.0) -> LinearGoal:
    w = rng.dirichlet(np.full(n, alpha))
    return LinearGoal(w / w.sum())


def conjunction_weights(indices: Sequence[int], n: int) -> LinearGoal:
    """Weight vector with equal mass on the (1-based) objectives ``indices``."""
    w = np.zeros(n)
    w[[i - 1 for i in indices]] = 1.0
    return LinearGoal(w / w.sum())


Goal = SpecGoal | LinearGoal


def goal_rows(net: nn.QNetwork, goals: Sequence) -> nn.Tensor:
    """Goal-conditioning rows (K, encoding_dim): encoder output, or padded weights."""
    if all(isinstance(g, SpecGoal) for g in goals):
        return net.encode([list(g.tokens) for g in goals])
    if all(isinstance(g, LinearGoal) for g in goals):
        return nn.Tensor(np.stack([g.features(net.arch.encoding_dim) for g in goals]))
    raise TypeError("goals must all be SpecGoal or all LinearGoal")


# ---------------------------------------------------------------------------
# replay


class ReplayBuffer:
    """FIFO ring of transitions with full reward vectors."""

    def __init__(self, capacity: int, n_objectives: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.cell = np.zeros(capacity, dtype=np.int64)
        self.t = np.zeros(capacity, dtype=np.int64)
        self.action = np.zeros(capacity, dtype=np.int64)
        self.next_cell = np.zeros(capacity, dtype=np.int64)
        self.next_t = np.zeros(capacity, dtype=np.int64)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.reward = np.zeros((capacity, n_objectives))
        self.serial = np.full(capacity, -1, dtype=np.int64)
        self.cursor = 0
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, world: gw.GridWorld, tr: gw.Transition, bootstrap_timeouts: bool = False) -> None:
        """Insert ``tr``; with ``bootstrap_timeouts`` a horizon cutoff is stored as non-terminal."""
        i = self.cursor
        self.cell[i] = world.cell(tr.s.x, tr.s.y)
        self.t[i] = tr.s.t
        self.action[i] = tr.a
        self.next_cell[i] = world.cell(tr.s_next.x, tr.s_next.y)
        self.next_t[i] = tr.s_next.t
        self.terminal[i] = tr.terminal and not (bootstrap_timeouts and tr.s_next.t >= world.horizon)
        self.reward[i] = tr.r
        self.serial[i] = self.inserted
        self.inserted += 1
        self.cursor = (i + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if len(self) < batch_size:
            raise BufferTooSmall(f"buffer holds {len(self)} transitions, need {batch_size}")
        return rng.integers(len(self), size=batch_size)

    def serials(self) -> set[int]:
        return set(int(s) for s in self.serial[: len(self)])

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ("cell", "t", "action", "next_cell", "next_t",
                                              "terminal", "reward", "serial")}

    def load_arrays(self, arrays: dict, cursor: int, inserted: int) -> None:
        for k, v in arrays.items():
            getattr(self, k)[...] = v
        self.cursor, self.inserted = cursor, inserted


@dataclass
class AugmentedBatch:
    """Replayed transitions crossed with goals, row = transition * K + goal."""

    cells: np.ndarray
    actions: np.ndarray
    next_cells: np.ndarray
    terminal: np.ndarray
    rewards: np.ndarray       # scalarized, recomputed from stored reward vectors
    goals: list
    goal_index: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


def augment(buffer: ReplayBuffer, idx: np.ndarray, goals: Sequence) -> AugmentedBatch:
    K = len(goals)
    scalar = np.stack([g.scalarize(buffer.reward[idx]) for g in goals], axis=1)  # (B, K)
    rep = np.repeat(idx, K)
    return AugmentedBatch(
        cells=buffer.cell[rep],
        actions=buffer.action[rep],
        next_cells=buffer.next_cell[rep],
        terminal=buffer.terminal[rep].astype(float),
        rewards=scalar.ravel(),
        goals=list(goals),
        goal_index=np.tile(np.arange(K), len(idx)),
    )


def one_hot_cells(cells: np.ndarray, n_states: int) -> np.ndarray:
    out = np.zeros((len(cells), n_states))
    out[np.arange(len(cells)), cells] = 1.0
    return out


# ---------------------------------------------------------------------------
# loss and acting


def td_targets(target_net: nn.QNetwork, batch: AugmentedBatch, gamma: float,
               target_rows: np.ndarray | None = None) -> np.ndarray:
    """f(r, psi) + gamma * max_a' Qhat(s', a') * (1 - t) for every row."""
    with nn.no_grad():
        rows = goal_rows(target_net, batch.goals).data if target_rows is None else target_rows
        q_next = target_net.head(one_hot_cells(batch.next_cells, target_net.arch.state_dim),
                                 rows, batch.goal_index).data
    return batch.rewards + gamma * q_next.max(axis=1) * (1.0 - batch.terminal)


def td_loss(net: nn.QNetwork, target_net: nn.QNetwork, batch: AugmentedBatch, gamma: float,
            target_rows: np.ndarray | None = None) -> nn.Tensor:
    """Mean squared TD error over the batch; gradients reach only ``net``."""
    if len(batch) == 0:
        raise ShapeError("empty batch")
    y = td_targets(target_net, batch, gamma, target_rows)
    q = net.head(one_hot_cells(batch.cells, net.arch.state_dim), goal_rows(net, batch.goals),
                 batch.goal_index)
    return nn.mse(nn.gather_actions(q, batch.actions), y)


def greedy_action(q: np.ndarray) -> int:
    """Argmax with ties going to the first action in up, down, left, right order."""
    return int(np.argmax(q))


def act(net: nn.QNetwork, state_features, tokens, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy action for one state and one specification."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(nn.N_ACTIONS))
    return greedy_action(net.q_values(state_features, tokens))


# ---------------------------------------------------------------------------
# the agent


class Agent:
    """Online network, target network, optimizer and replay for one world."""

    def __init__(self, world: gw.GridWorld, config: AgentConfig | None = None, seed: int = 0,
                 net: nn.QNetwork | None = None):
        self.world = world
        self.config = config or AgentConfig()
        self.net = net or nn.QNetwork(nn.Architecture(state_dim=world.n_states),
                                      np.random.default_rng(seed))
        if self.net.arch.state_dim != world.n_states:
            raise ShapeError("network state width does not match the world")
        self.target = nn.copy_into_target(self.net)
        cfg = self.config
        self.optimizer = nn.Adam(self.net, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.buffer = ReplayBuffer(cfg.replay_capacity, world.n_objectives)
        self.train_steps = 0
        self._states = np.eye(world.n_states)
        self._target_cache: dict = {}
        self._q_cache: dict = {}

    # -- inference ------------------------------------------------------------

    def q_table(self, goal) -> np.ndarray:
        """Q-values of every cell, shape (n_states, 4), from the online network."""
        cached = self._q_cache.get(goal.key)
        if cached is None:
            cached = self.q_tables([goal])[0]
            self._q_cache[goal.key] = cached
        return cached

    def q_tables(self, goals: Sequence, net: nn.QNetwork | None = None) -> np.ndarray:
        """Q-values (len(goals), n_states, 4) in one batched pass."""
        net = net or self.net
        S = self.world.n_states
        with nn.no_grad():
            rows = goal_rows(net, goals)
            q = net.head(np.tile(self._states, (len(goals), 1)), rows, np.repeat(np.arange(len(goals)), S))
        return q.data.reshape(len(goals), S, nn.N_ACTIONS)

    def greedy_policy(self, goal) -> np.ndarray:
        """Greedy action per cell as a (height, width) grid."""
        return np.argmax(self.q_table(goal), axis=1).reshape(self.world.height, self.world.width)

    def act(self, s: gw.MOState, goal, epsilon: float, rng: np.random.Generator) -> int:
        if rng.random() < epsilon:
            return int(rng.integers(nn.N_ACTIONS))
        return greedy_action(self.q_table(goal)[self.world.cell(s.x, s.y)])

    # -- learning -------------------------------------------------------------

    def observe(self, tr: gw.Transition) -> None:
        self.buffer.add(self.world, tr, self.config.bootstrap_timeouts)

    def _target_rows(self, goals: Sequence) -> np.ndarray:
        missing = [g for g in goals if g.key not in self._target_cache]
        if missing:
            with nn.no_grad():
                rows = goal_rows(self.target, missing).data
            for g, row in zip(missing, rows):
                self._target_cache[g.key] = row
        return np.stack([self._target_cache[g.key] for g in goals])

    def train_step(self, goals: Sequence, rng: np.random.Generator) -> dict:
        """One gradient update on 32 replayed transitions x len(goals) goals."""
        cfg = self.config
        idx = self.buffer.sample(cfg.batch_size, rng)
        batch = augment(self.buffer, idx, goals)
        loss = td_loss(self.net, self.target, batch, cfg.gamma, self._target_rows(goals))
        self.net.zero_grad()
        self.net.backward(loss)
        self.optimizer.step()
        self._q_cache.clear()
        self.train_steps += 1
        synced = self.train_steps % cfg.target_sync_every == 0
        if synced:
            self.sync_target()
        return {"loss": float(loss.data), "rows": len(batch), "synced": synced}

    def clear_caches(self) -> None:
        """Drop cached encodings; results computed afterwards no longer depend on batching history."""
        self._target_cache.clear()
        self._q_cache.clear()

    def sync_target(self) -> None:
        nn.copy_into_target(self.net, self.target)
        self._target_cache.clear()

    # -- persistence ----------------------------------------------------------

    def save(self, path, step: int = 0, config: dict | None = None, extra: dict | None = None) -> None:
        extra = dict(extra or {})
        extra.setdefault("train_steps", self.train_steps)
        extra.setdefault("target", None)
        nn.save_checkpoint(path, self.net, self.optimizer, step, config, extra)


def train_step(agent: Agent, goals: Sequence, rng: np.random.Generator) -> dict:
    return agent.train_step(goals, rng)


def warm_start(checkpoint, world: gw.GridWorld, fixed_spec: sl.SpecAst,
               config: AgentConfig | None = None) -> tuple[Agent, SpecGoal]:
    """A single-specification agent whose Q and target start from ``checkpoint``.

    Optimizer moments start at zero and the replay buffer starts empty.
    """
    if not isinstance(checkpoint, nn.Checkpoint):
        checkpoint = nn.load_checkpoint(checkpoint)
    if checkpoint.net.arch.state_dim != world.n_states:
        raise CheckpointError("checkpoint was trained on a world of a different size")
    net = nn.QNetwork(checkpoint.net.arch)
    nn.copy_into_target(checkpoint.net, net)
    agent = Agent(world, config, net=net)
    return agent, SpecGoal(fixed_spec)
