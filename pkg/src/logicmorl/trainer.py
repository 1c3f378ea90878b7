"""Curriculum scheduling, specification sets, and the training loop.

A run samples one goal per episode, acts epsilon-greedily conditioned on it,
and every few environment steps performs one augmented update. Greedy
performance on a fixed panel of held-out goals is scored exactly against the
dynamic-programming oracle at a fixed cadence.
"""
from __future__ import annotations

import json
import os
from itertools import combinations
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import agent as ag
from . import gridworld as gw
from . import neural as nn
from . import oracle as orc
from . import speclang as sl
from .config import RunConfig
from .errors import (CheckpointError, ConfigError, DegenerateSpec, EmptyCurriculum,
                     GenerationStall, NumericFailure)

STATE_FILE = "state.npz"
STREAMS = ("diagnostics.tsv", "eval.tsv", "spec_usage.tsv", "curriculum.tsv")


# ---------------------------------------------------------------------------
# curriculum


@dataclass(frozen=True)
class Curriculum:
    max_length: int
    base_length: int = 25
    increment_every: int = 5_000
    total_increments: int = 20

    def increment(self, step: int) -> int:
        if step < 0:
            raise ValueError("step must be >= 0")
        return min(step // self.increment_every, self.total_increments)

    def threshold(self, step: int) -> float:
        """Largest admissible canonical length at environment step ``step``."""
        span = max(0, self.max_length - self.base_length)
        return self.base_length + self.increment(step) * span / self.total_increments

    def thresholds(self) -> list[float]:
        return [self.threshold(k * self.increment_every) for k in range(self.total_increments + 1)]


# ---------------------------------------------------------------------------
# specification sets


@dataclass
class SpecSet:
    """Train and test specifications; ids are train 0..n-1 then test n..n+m-1."""

    train: list
    test: list
    n_objectives: int
    train_text: list[str] = field(init=False)
    test_text: list[str] = field(init=False)
    train_lengths: np.ndarray = field(init=False)
    by_length: np.ndarray = field(init=False)

    def __post_init__(self):
        self.train_text = [sl.render(a) for a in self.train]
        self.test_text = [sl.render(a) for a in self.test]
        if set(self.train_text) & set(self.test_text):
            raise ConfigError("train and test specification sets overlap")
        self.train_lengths = np.array([len(t) for t in self.train_text], dtype=int)
        # stable sort so every active subset is a prefix of this ordering
        self.by_length = np.argsort(self.train_lengths, kind="stable")

    @property
    def max_length(self) -> int:
        return int(self.train_lengths.max()) if len(self.train) else 0

    def test_id(self, k: int) -> int:
        return len(self.train) + k

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        sl.write_specs(d / "train.txt", self.train)
        sl.write_specs(d / "test.txt", self.test)

    @classmethod
    def read(cls, directory, n_objectives: int) -> "SpecSet":
        d = Path(directory)
        try:
            return cls(sl.read_specs(d / "train.txt", n_objectives),
                       sl.read_specs(d / "test.txt", n_objectives), n_objectives)
        except OSError as exc:
            raise ConfigError(f"cannot read spec set in {d}: {exc}") from exc


def build_specset(n_objectives: int, count: int, split: float = 0.8, seed: int = 0,
                  max_atoms: int = 5, retry_budget: int | None = None) -> SpecSet:
    """Generate ``count`` distinct specifications, shuffle, and split train/test."""
    if count < 1:
        raise ValueError("count must be positive")
    if not 0.0 < split < 1.0:
        raise ValueError("split must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    budget = 50 * count if retry_budget is None else retry_budget
    seen: dict[str, sl.SpecAst] = {}
    attempts = 0
    while len(seen) < count:
        if attempts >= budget:
            raise GenerationStall(f"only {len(seen)} distinct specifications after {attempts} draws")
        ast = sl.generate(rng, n_objectives, max_atoms)
        seen.setdefault(sl.render(ast), ast)
        attempts += 1
    specs = list(seen.values())
    order = rng.permutation(len(specs))
    specs = [specs[i] for i in order]
    n_train = int(round(split * count))
    n_train = min(max(n_train, 1), count - 1) if count > 1 else count
    return SpecSet(specs[:n_train], specs[n_train:], n_objectives)


def active_count(specset: SpecSet, step: int, curriculum: Curriculum | None) -> int:
    """Number of train specifications admissible at ``step`` (a prefix of ``by_length``)."""
    if curriculum is None:
        return len(specset.train)
    limit = curriculum.threshold(step)
    n = int(np.searchsorted(specset.train_lengths[specset.by_length], limit, side="right"))
    if n == 0:
        raise EmptyCurriculum(f"no training specification is at most {limit:g} characters long")
    return n


def active_subset(specset: SpecSet, step: int, curriculum: Curriculum | None = None) -> list:
    """Train specifications whose canonical length is within the current threshold."""
    n = active_count(specset, step, curriculum)
    return [specset.train[i] for i in specset.by_length[:n]]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Panel:
    goals: list
    labels: list[str]
    ids: list[int]
    references: list[orc.Reference]

    def __len__(self) -> int:
        return len(self.goals)


def linear_goal_for(spec: sl.SpecAst, n_objectives: int) -> ag.LinearGoal:
    """Equal weights over the atoms of a conjunction of plain atoms (``o1 & o3`` -> (.5 0 .5))."""
    leaves = sl.leaves(spec)
    if not all(isinstance(x, sl.Atom) for x in leaves) or _has_or(spec):
        raise ConfigError(f"{sl.render(spec)!r} has no weight-vector counterpart")
    return ag.conjunction_weights(sorted({x.index for x in leaves}), n_objectives)


def _has_or(ast) -> bool:
    if isinstance(ast, sl.Or):
        return True
    if isinstance(ast, sl.And):
        return _has_or(ast.left) or _has_or(ast.right)
    return False


def conjunction_panel(n_objectives: int) -> list[str]:
    """Every single objective, then every conjunction of two or more objectives (n <= 3)."""
    idx = range(1, n_objectives + 1)
    out = [f"o{i}" for i in idx]
    if n_objectives <= 3:
        for k in range(2, n_objectives + 1):
            out += [" & ".join(f"o{i}" for i in c) for c in combinations(idx, k)]
    return out


def build_panel(world: gw.GridWorld, cfg: RunConfig, specset: SpecSet | None,
                rng: np.random.Generator, kernel: np.ndarray) -> Panel:
    goals, labels, ids, refs = [], [], [], []
    if cfg.eval_specs is not None:
        texts = list(cfg.eval_specs)
    elif cfg.linear:
        texts = conjunction_panel(cfg.n_objectives)
    elif cfg.fixed_spec is not None:
        texts = [cfg.fixed_spec]
    else:
        texts = None
    if texts is not None:
        for k, text in enumerate(texts):
            spec = sl.parse(text, cfg.n_objectives)
            if cfg.linear:
                goal = linear_goal_for(spec, cfg.n_objectives)
                ref = orc.reference_from_table(world, world.reward_table() @ goal.w, goal.text,
                                               cfg.agent.gamma, kernel=kernel)
            else:
                goal = ag.SpecGoal(spec, -1)
                ref = orc.reference(world, spec, cfg.agent.gamma, kernel=kernel)
            if ref.degenerate:
                raise DegenerateSpec(f"panel goal {text!r} is degenerate on this world")
            goals.append(goal)
            labels.append(sl.render(spec))
            ids.append(-1)
            refs.append(ref)
        return Panel(goals, labels, ids, refs)
    # held-out panel: seeded order over the test set, skipping degenerate specifications
    for k in rng.permutation(len(specset.test)):
        spec = specset.test[k]
        ref = orc.reference(world, spec, cfg.agent.gamma, kernel=kernel)
        if ref.degenerate:
            continue
        sid = specset.test_id(int(k))
        goals.append(ag.SpecGoal(spec, sid))
        labels.append(specset.test_text[k])
        ids.append(sid)
        refs.append(ref)
        if len(goals) == cfg.eval_panel:
            break
    return Panel(goals, labels, ids, refs)


def panel_scores(agent: ag.Agent, panel: Panel, kernel: np.ndarray | None = None,
                 chunk: int = 128) -> np.ndarray:
    """Normalized score of the greedy policy for every panel goal, from exact returns."""
    world = agent.world
    kernel = world.transition_kernel() if kernel is None else kernel
    table = world.reward_table()
    scores = np.empty(len(panel))
    for lo in range(0, len(panel), chunk):
        goals = panel.goals[lo: lo + chunk]
        q = agent.q_tables(goals)
        for j, goal in enumerate(goals):
            ref = panel.references[lo + j]
            ret = orc.expected_return(world, np.argmax(q[j], axis=1), goal.scalarize(table),
                                      agent.config.gamma, kernel)
            scores[lo + j] = orc.normalized_score(ret, ref.oracle_return, ref.random_return)
    return scores


# ---------------------------------------------------------------------------
# output streams


class Streams:
    """Tab-separated append-only text streams, mirrored in memory."""

    def __init__(self, directory: Path | None):
        self.directory = directory
        self.lines: dict[str, list[str]] = {name: [] for name in STREAMS}
        self._files = {}
        if directory is not None:
            for name in STREAMS:
                self._files[name] = open(directory / name, "a", encoding="utf-8")

    def write(self, name: str, fields: Sequence) -> None:
        line = "\t".join(_fmt(f) for f in fields)
        self.lines[name].append(line)
        if self._files:
            self._files[name].write(line + "\n")

    def flush(self) -> dict[str, int]:
        sizes = {}
        for name, fh in self._files.items():
            fh.flush()
            sizes[name] = fh.tell()
        return sizes

    def close(self) -> None:
        for fh in self._files.values():
            fh.close()
        self._files = {}


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def read_stream(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n").split("\t") for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainingResult:
    agent: ag.Agent
    world: gw.GridWorld
    specset: SpecSet | None
    panel: Panel
    evals: list[tuple[int, np.ndarray]]
    streams: dict[str, list[str]]
    steps: int
    checkpoints: list[str]
    snapshots: dict[int, nn.QNetwork]

    @property
    def final_scores(self) -> np.ndarray:
        return self.evals[-1][1]

    def steps_to_reach(self, score: float) -> int | None:
        """First evaluated step whose panel mean is at least ``score``."""
        for step, scores in self.evals:
            if scores.mean() >= score:
                return step
        return None


class Trainer:
    """Owns the world, agent, streams and random state of a single run."""

    def __init__(self, cfg: RunConfig, run_dir=None, specset: SpecSet | None = None,
                 init_checkpoint=None):
        self.cfg = cfg
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.world = gw.build(cfg.size, cfg.n_objectives, cfg.world_seed, cfg.slip_prob)
        self.kernel = self.world.transition_kernel()
        seeds = np.random.SeedSequence(cfg.seed).spawn(5)
        self.rng_env, self.rng_act, self.rng_train, self.rng_goal = (
            np.random.default_rng(s) for s in seeds[:4])
        init_rng = np.random.default_rng(seeds[4])

        self.fixed = sl.parse(cfg.fixed_spec, cfg.n_objectives) if cfg.fixed_spec else None
        if cfg.linear or self.fixed is not None:
            self.specset = specset
        elif specset is not None:
            self.specset = specset
        elif cfg.specset_dir:
            self.specset = SpecSet.read(cfg.specset_dir, cfg.n_objectives)
        else:
            self.specset = build_specset(cfg.n_objectives, cfg.specset_count, cfg.specset_split,
                                         cfg.specset_seed, cfg.specset_max_atoms)
        self.curriculum = None
        if cfg.curriculum and not cfg.linear and self.fixed is None:
            self.curriculum = Curriculum(self.specset.max_length, cfg.base_length,
                                         cfg.increment_every, cfg.total_increments)
            active_count(self.specset, 0, self.curriculum)
        self._train_goals: dict[int, ag.SpecGoal] = {}
        self._fixed_goal = ag.SpecGoal(self.fixed, -1) if self.fixed is not None else None

        net = None
        if init_checkpoint is not None:
            ck = init_checkpoint if isinstance(init_checkpoint, nn.Checkpoint) \
                else nn.load_checkpoint(init_checkpoint)
            if ck.net.arch.state_dim != self.world.n_states:
                raise CheckpointError("checkpoint was trained on a world of a different size")
            net = nn.copy_into_target(ck.net)
        else:
            net = nn.QNetwork(nn.Architecture(state_dim=self.world.n_states), init_rng)
        self.agent = ag.Agent(self.world, cfg.agent, net=net)
        self.panel = build_panel(self.world, cfg, self.specset, np.random.default_rng(seeds[4].spawn(1)[0]),
                                 self.kernel)

        self.step = 0
        self.episode = 0
        self.losses: list[float] = []
        self.evals: list[tuple[int, np.ndarray]] = []
        self.checkpoints: list[str] = []
        self.snapshots: dict[int, nn.QNetwork] = {}
        self.last_threshold: float | None = None
        self.done = False

    # -- goals ----------------------------------------------------------------

    def _spec_goal(self, train_index: int) -> ag.SpecGoal:
        goal = self._train_goals.get(train_index)
        if goal is None:
            goal = ag.SpecGoal(self.specset.train[train_index], train_index)
            self._train_goals[train_index] = goal
        return goal

    def _sample_goals(self, k: int, rng: np.random.Generator) -> list:
        if self.cfg.linear:
            return [ag.dirichlet_goal(rng, self.cfg.n_objectives, self.cfg.dirichlet_alpha)
                    for _ in range(k)]
        if self._fixed_goal is not None:
            return [self._fixed_goal] * k
        n = active_count(self.specset, self.step, self.curriculum)
        picks = rng.integers(n, size=k)
        return [self._spec_goal(int(self.specset.by_length[i])) for i in picks]

    def threshold(self) -> float | str:
        return self.curriculum.threshold(self.step) if self.curriculum is not None else "-"

    def n_active(self) -> int | str:
        if self.specset is None or self.fixed is not None or self.cfg.linear:
            return 1 if self.fixed is not None else "-"
        return active_count(self.specset, self.step, self.curriculum)

    # -- persistence ----------------------------------------------------------

    def _open_streams(self, resume: bool) -> None:
        if self.run_dir is None:
            self.streams = Streams(None)
            return
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "checkpoints").mkdir(exist_ok=True)
        state = self.run_dir / STATE_FILE
        if resume and state.exists():
            sizes = self._load_state(state)
            for name in STREAMS:
                path = self.run_dir / name
                if path.exists():
                    with open(path, "r+b") as fh:
                        fh.truncate(sizes.get(name, 0))
            self.streams = Streams(self.run_dir)
            for name in STREAMS:
                path = self.run_dir / name
                self.streams.lines[name] = [line[:-1] for line in open(path, encoding="utf-8")]
            return
        if any((self.run_dir / name).exists() and (self.run_dir / name).stat().st_size
               for name in STREAMS):
            raise ConfigError(f"run directory {self.run_dir} already holds a run; pass resume")
        with open(self.run_dir / "config.json", "w", encoding="utf-8") as fh:
            fh.write(self.cfg.dumps() + "\n")
        if self.specset is not None:
            self.specset.write(self.run_dir / "specs")
        self.streams = Streams(self.run_dir)
        self.streams.write("diagnostics.tsv", ("step", "episodes", "train_steps", "loss",
                                               "epsilon", "threshold", "active"))
        self.streams.write("eval.tsv", ["step", "mean"] + [str(i) if i >= 0 else lbl for i, lbl
                                                          in zip(self.panel.ids, self.panel.labels)])
        self.streams.write("spec_usage.tsv", ("episode", "step", "episode_spec", "augmentation_specs"))
        self.streams.write("curriculum.tsv", ("step", "increment", "threshold", "active"))

    def checkpoint(self, path: Path | None = None) -> str:
        """Write a model checkpoint; with a run directory also refresh the resume state."""
        cfg = self.cfg.to_dict()
        extra = {"episodes": self.episode, "train_steps": self.agent.train_steps}
        if path is None:
            path = self.run_dir / "checkpoints" / f"step_{self.step:08d}.npz"
        nn.save_checkpoint(_tmp(path), self.agent.net, self.agent.optimizer, self.step, cfg, extra)
        os.replace(_tmp(path), path)
        self.checkpoints.append(str(path))
        if self.run_dir is not None:
            self._save_state(self.run_dir / STATE_FILE, Path(path).name)
        return str(path)

    def _save_state(self, path: Path, latest: str) -> None:
        sizes = self.streams.flush()
        buf = self.agent.buffer
        meta = {
            "step": self.step, "episode": self.episode, "latest": latest,
            "train_steps": self.agent.train_steps, "losses": self.losses,
            "last_threshold": self.last_threshold, "sizes": sizes,
            "rng": [r.bit_generator.state for r in
                    (self.rng_env, self.rng_act, self.rng_train, self.rng_goal)],
            "cursor": buf.cursor, "inserted": buf.inserted, "config": self.cfg.to_dict(),
            "evals": [[s, v.tolist()] for s, v in self.evals], "checkpoints": self.checkpoints,
        }
        arrays = {f"buffer/{k}": v for k, v in buf.state_arrays().items()}
        arrays["target"] = self.agent.target.flat
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(_tmp(path), "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(_tmp(path), path)

    def _load_state(self, path: Path) -> dict:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            arrays = {k: data[k] for k in data.files}
        if meta["config"] != self.cfg.to_dict():
            raise ConfigError("resume conflict: run directory was started with a different config")
        ck = nn.load_checkpoint(self.run_dir / "checkpoints" / meta["latest"])
        self.agent.net.flat[...] = ck.net.flat
        self.agent.optimizer.t = ck.optimizer.t
        self.agent.optimizer.m[...] = ck.optimizer.m
        self.agent.optimizer.v[...] = ck.optimizer.v
        self.agent.target.flat[...] = arrays["target"]
        self.agent.train_steps = meta["train_steps"]
        self.agent.clear_caches()
        self.agent.buffer.load_arrays({k[len("buffer/"):]: v for k, v in arrays.items()
                                       if k.startswith("buffer/")}, meta["cursor"], meta["inserted"])
        for r, st in zip((self.rng_env, self.rng_act, self.rng_train, self.rng_goal), meta["rng"]):
            r.bit_generator.state = st
        self.step, self.episode = meta["step"], meta["episode"]
        self.losses = meta["losses"]
        self.last_threshold = meta["last_threshold"]
        self.evals = [(s, np.array(v)) for s, v in meta["evals"]]
        self.checkpoints = meta["checkpoints"]
        return meta["sizes"]

    # -- loop -----------------------------------------------------------------

    def evaluate(self) -> np.ndarray:
        scores = panel_scores(self.agent, self.panel, self.kernel)
        self.evals.append((self.step, scores))
        self.streams.write("eval.tsv", [self.step, scores.mean()] + list(scores))
        if self.cfg.stop_score is not None and scores.mean() >= self.cfg.stop_score:
            self.done = True
        return scores

    def _log(self) -> None:
        loss = float(np.mean(self.losses)) if self.losses else float("nan")
        self.losses = []
        eps = ag.epsilon_at(self.step, self.cfg.budget, self.cfg.agent)
        self.streams.write("diagnostics.tsv", (self.step, self.episode, self.agent.train_steps,
                                               loss, eps, self.threshold(), self.n_active()))

    def _note_curriculum(self) -> None:
        if self.curriculum is None:
            return
        th = self.curriculum.threshold(self.step)
        if th != self.last_threshold:
            self.last_threshold = th
            self.streams.write("curriculum.tsv", (self.step, self.curriculum.increment(self.step),
                                                  th, self.n_active()))

    def run(self, resume: bool = False, progress: Callable[[str], None] | None = None) -> TrainingResult:
        cfg, world, agent = self.cfg, self.world, self.agent
        acfg = cfg.agent
        budget = cfg.budget
        self._open_streams(resume)
        if self.step == 0 and not self.evals:
            self._note_curriculum()
            self.evaluate()
        scheduled = sorted(s for s in cfg.checkpoint_steps if s <= budget)
        next_periodic = (self.step // cfg.checkpoint_every + 1) * cfg.checkpoint_every
        try:
            while self.step < budget and not self.done:
                boundary = False
                while scheduled and self.step >= scheduled[0]:
                    due = scheduled.pop(0)
                    if due not in self.snapshots:
                        self.snapshots[due] = nn.copy_into_target(agent.net)
                        boundary = True
                if self.step >= next_periodic:
                    next_periodic = (self.step // cfg.checkpoint_every + 1) * cfg.checkpoint_every
                    boundary = True
                if boundary:
                    # resumed runs start with empty caches, so uninterrupted runs flush here too
                    agent.clear_caches()
                    if self.run_dir is not None:
                        self.checkpoint()
                goal = self._sample_goals(1, self.rng_goal)[0]
                aug_ids: list[int] = []
                s = gw.reset(world, self.rng_env)
                episode_start = self.step
                while True:
                    eps = ag.epsilon_at(self.step, budget, acfg)
                    a = agent.act(s, goal, eps, self.rng_act)
                    tr = gw.step(world, s, a, self.rng_env)
                    agent.observe(tr)
                    self.step += 1
                    if self.step % acfg.train_every == 0 and len(agent.buffer) >= acfg.batch_size:
                        goals = self._sample_goals(acfg.specs_per_batch, self.rng_train)
                        agent.optimizer.lr = ag.learning_rate_at(self.step, budget, acfg)
                        info = agent.train_step(goals, self.rng_train)
                        if not np.isfinite(info["loss"]):
                            raise NumericFailure(f"non-finite loss at step {self.step}")
                        self.losses.append(info["loss"])
                        aug_ids.extend(getattr(g, "spec_id", -1) for g in goals)
                    if self.step % cfg.log_every == 0:
                        self._log()
                    if self.step % cfg.eval_every == 0:
                        self.evaluate()
                        if progress:
                            progress(f"step {self.step}: panel mean {self.evals[-1][1].mean():.3f}")
                    self._note_curriculum()
                    s = tr.s_next
                    if tr.terminal or self.step >= budget or self.done:
                        break
                self.episode += 1
                self.streams.write("spec_usage.tsv", (
                    self.episode - 1, episode_start, getattr(goal, "spec_id", goal.text),
                    ",".join(map(str, aug_ids)) if not cfg.linear else "-"))
            if self.evals[-1][0] != self.step:
                self.evaluate()
            if self.run_dir is not None:
                self.checkpoint(self.run_dir / "final.npz")
        finally:
            self.streams.flush()
            lines = self.streams.lines
            self.streams.close()
        return TrainingResult(agent, world, self.specset, self.panel, self.evals, lines,
                              self.step, self.checkpoints, self.snapshots)


def _tmp(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".tmp")


def run_training(config: RunConfig, run_dir=None, resume: bool = False, specset: SpecSet | None = None,
                 init_checkpoint=None, progress=None) -> TrainingResult:
    """Execute one run end to end; see :class:`Trainer`."""
    return Trainer(config, run_dir, specset, init_checkpoint).run(resume, progress)
