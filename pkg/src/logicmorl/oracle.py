"""Exact dynamic-programming baselines for a fixed specification.

The gridworld dynamics are known, so the scalarized MDP for any specification
can be solved by value iteration. Scores of learned policies are expressed
relative to the optimal and the uniform-random policy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gridworld as gw
from .errors import DegenerateSpec
from .speclang import SpecAst, evaluate, render

GAMMA = 0.95
DEFAULT_TOL = 1e-10
DEGENERATE_GAP = 1e-6


@dataclass(frozen=True, eq=False)
class ScalarMDP:
    world: gw.GridWorld
    spec: SpecAst | None
    gamma: float
    scalar_reward: np.ndarray  # (height, width)

    @classmethod
    def from_spec(cls, world: gw.GridWorld, spec: SpecAst, gamma: float = GAMMA) -> "ScalarMDP":
        table = evaluate(world.reward_table(), spec).reshape(world.height, world.width)
        return cls(world, spec, gamma, table)

    @classmethod
    def from_table(cls, world: gw.GridWorld, scalar_reward, gamma: float = GAMMA) -> "ScalarMDP":
        """A plain MDP over ``world`` with a precomputed per-cell reward."""
        table = np.asarray(scalar_reward, dtype=float).reshape(world.height, world.width)
        return cls(world, None, gamma, table)


@dataclass(frozen=True, eq=False)
class ValueTable:
    v: np.ndarray       # (height, width)
    policy: np.ndarray  # (height, width) action indices
    q: np.ndarray       # (4, height, width)
    iterations: int


def greedy(q: np.ndarray, tie_eps: float = 0.0) -> np.ndarray:
    """Argmax over axis 0; actions within ``tie_eps`` of the best go to the lowest index."""
    best = q.max(axis=0)
    return np.argmax(q >= best - tie_eps, axis=0)


def solve(mdp: ScalarMDP, tol: float = DEFAULT_TOL) -> ValueTable:
    """Value iteration from V=0 until the sup-norm update drops below ``tol``."""
    if not 0.0 < mdp.gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if tol <= 0:
        raise ValueError("tol must be positive")
    world = mdp.world
    kernel = world.transition_kernel()
    reward = mdp.scalar_reward.ravel()
    v = np.zeros(world.n_states)
    iterations = 0
    while True:
        q = kernel @ (reward + mdp.gamma * v)
        v_new = q.max(axis=0)
        iterations += 1
        delta = np.max(np.abs(v_new - v))
        v = v_new
        if delta < tol:
            break
    q = kernel @ (reward + mdp.gamma * v)
    # Q is known to within gamma*tol/(1-gamma); gaps below twice that are treated as ties
    tie_eps = 2 * mdp.gamma * tol / (1 - mdp.gamma)
    shape = (world.height, world.width)
    return ValueTable(v=v.reshape(shape), policy=greedy(q, tie_eps).reshape(shape),
                      q=q.reshape((4,) + shape), iterations=iterations)


def bellman_residual(mdp: ScalarMDP, table: ValueTable) -> np.ndarray:
    kernel = mdp.world.transition_kernel()
    v = table.v.ravel()
    backup = (kernel @ (mdp.scalar_reward.ravel() + mdp.gamma * v)).max(axis=0)
    return np.abs(backup - v).reshape(table.v.shape)


def scalar_reward_table(world: gw.GridWorld, spec: SpecAst) -> np.ndarray:
    return evaluate(world.reward_table(), spec)


def policy_return(world: gw.GridWorld, policy: np.ndarray, spec: SpecAst, gamma: float,
                  episodes: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo mean and standard error of the discounted return of ``policy``."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rewards = scalar_reward_table(world, spec).reshape(world.height, world.width)
    policy = np.asarray(policy).reshape(world.height, world.width)
    returns = np.empty(episodes)
    for ep in range(episodes):
        s = gw.reset(world, rng)
        total, discount = 0.0, 1.0
        while s.t < world.horizon:
            tr = gw.step(world, s, int(policy[s.y, s.x]), rng)
            s = tr.s_next
            total += discount * rewards[s.y, s.x]
            discount *= gamma
        returns[ep] = total
    stderr = float(returns.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return float(returns.mean()), stderr


def policy_kernel(world: gw.GridWorld, policy, kernel: np.ndarray | None = None) -> np.ndarray:
    """State-to-state transition matrix under a deterministic (action grid) or
    stochastic (n_states x 4 probabilities) policy."""
    kernel = world.transition_kernel() if kernel is None else kernel
    policy = np.asarray(policy)
    if policy.ndim == 2 and policy.shape == (world.n_states, 4) and policy.dtype.kind == "f":
        return np.einsum("sa,ast->st", policy, kernel)
    actions = policy.ravel().astype(int)
    return kernel[actions, np.arange(world.n_states)]


def expected_return(world: gw.GridWorld, policy, scalar_reward, gamma: float = GAMMA,
                    kernel: np.ndarray | None = None) -> float:
    """Exact expected discounted return over one episode from a uniform start cell."""
    p = policy_kernel(world, policy, kernel)
    reward = np.asarray(scalar_reward, dtype=float).ravel()
    v = np.zeros(world.n_states)
    for _ in range(world.horizon):
        v = p @ (reward + gamma * v)
    return float(v.mean())


def random_policy(world: gw.GridWorld) -> np.ndarray:
    return np.full((world.n_states, 4), 0.25)


@dataclass(frozen=True)
class Reference:
    spec: str
    oracle_return: float
    random_return: float
    policy: np.ndarray

    @property
    def degenerate(self) -> bool:
        return self.oracle_return - self.random_return < DEGENERATE_GAP


def reference(world: gw.GridWorld, spec: SpecAst, gamma: float = GAMMA,
              tol: float = DEFAULT_TOL, kernel: np.ndarray | None = None) -> Reference:
    """Oracle and uniform-random expected returns for ``spec`` on ``world``."""
    kernel = world.transition_kernel() if kernel is None else kernel
    mdp = ScalarMDP.from_spec(world, spec, gamma)
    table = solve(mdp, tol)
    reward = mdp.scalar_reward.ravel()
    return Reference(
        spec=render(spec),
        oracle_return=expected_return(world, table.policy, reward, gamma, kernel),
        random_return=expected_return(world, random_policy(world), reward, gamma, kernel),
        policy=table.policy,
    )


def reference_from_table(world: gw.GridWorld, scalar_reward, label: str = "", gamma: float = GAMMA,
                         tol: float = DEFAULT_TOL, kernel: np.ndarray | None = None) -> Reference:
    """Like :func:`reference` for an arbitrary per-cell scalar reward (e.g. a weighted sum)."""
    kernel = world.transition_kernel() if kernel is None else kernel
    mdp = ScalarMDP.from_table(world, scalar_reward, gamma)
    table = solve(mdp, tol)
    reward = mdp.scalar_reward.ravel()
    return Reference(
        spec=label,
        oracle_return=expected_return(world, table.policy, reward, gamma, kernel),
        random_return=expected_return(world, random_policy(world), reward, gamma, kernel),
        policy=table.policy,
    )


def optimal_actions(q: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Boolean mask (4, ...) of actions whose value is within ``tol`` of the best."""
    return q >= q.max(axis=0) - tol


def policy_agreement(policy, q_optimal: np.ndarray, tol: float = 1e-6) -> float:
    """Fraction of cells where ``policy`` picks an action that is optimal (ties count)."""
    mask = optimal_actions(q_optimal, tol).reshape(4, -1)
    actions = np.asarray(policy).ravel()
    return float(mask[actions, np.arange(actions.size)].mean())


def normalized_score(agent_return: float, oracle_return: float, random_return: float) -> float:
    """1.0 at oracle level, 0.0 at uniform-random level."""
    gap = oracle_return - random_return
    if gap < DEGENERATE_GAP:
        raise DegenerateSpec(f"oracle and random returns differ by only {gap:.3g}")
    return (agent_return - random_return) / gap


def write_grid(path, grid: np.ndarray, header: dict | None = None, fmt: str = "%.10g") -> None:
    """Dump a 2-D grid as whitespace-separated rows, preceded by ``# key: value`` lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key}: {value}\n")
        np.savetxt(fh, np.asarray(grid), fmt=fmt)


def read_grid(path) -> np.ndarray:
    return np.loadtxt(path, comments="#", ndmin=2)
