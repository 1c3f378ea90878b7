"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import agent as ag
from . import gridworld as gw
from . import neural as nn
from . import oracle as orc
from . import speclang as sl
from . import trainer as tr
from .config import RunConfig, load_config
from .errors import ConfigError, DegenerateSpec, LogicMorlError, NumericFailure

RUN_ROOT_ENV = "LOGICMORL_RUN_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


@contextmanager
def run_lock(run_dir: Path):
    """Single-writer lock on a run directory."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{run_dir} is locked by another process (remove {lock} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def provenance(checkpoint_path, ck: nn.Checkpoint) -> dict:
    return {"checkpoint": str(checkpoint_path), "checkpoint_sha256": file_sha256(checkpoint_path),
            "step": ck.step, "config": json.dumps(ck.config, sort_keys=True)}


def load_agent(checkpoint_path) -> tuple[ag.Agent, RunConfig, nn.Checkpoint]:
    ck = nn.load_checkpoint(checkpoint_path)
    cfg = RunConfig.from_dict(ck.config) if ck.config else RunConfig()
    world = gw.build(cfg.size, cfg.n_objectives, cfg.world_seed, cfg.slip_prob)
    if ck.net.arch.state_dim != world.n_states:
        raise ConfigError("checkpoint network does not match the world in its config")
    return ag.Agent(world, cfg.agent, net=ck.net), cfg, ck


def _read_spec_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip() and not line.startswith("#")]


def _header(fh, meta: dict) -> None:
    for key, value in meta.items():
        fh.write(f"# {key}: {value}\n")


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericFailure("non-finite values in network output")


# ---------------------------------------------------------------------------
# commands


def cmd_specgen(args) -> int:
    if not 1 <= args.objectives <= sl.MAX_OBJECTIVES:
        raise UsageError(f"--objectives must lie in 1..{sl.MAX_OBJECTIVES}")
    if not 0.0 < args.split < 1.0:
        raise UsageError("--split must lie in (0, 1)")
    if args.count < 2:
        raise UsageError("--count must be at least 2")
    specset = tr.build_specset(args.objectives, args.count, args.split, args.seed, args.max_atoms)
    out = Path(args.out)
    specset.write(out)
    manifest = {"objectives": args.objectives, "count": args.count, "split": args.split,
                "seed": args.seed, "max_atoms": args.max_atoms,
                "train": len(specset.train), "test": len(specset.test)}
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(specset.train)} train and {len(specset.test)} test specifications to {out}")
    return EXIT_OK


def _default_run_dir(cfg: RunConfig) -> Path:
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    digest = hashlib.sha256(cfg.dumps().encode()).hexdigest()[:12]
    return root / f"run-{digest}"


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.no_curriculum:
        overrides["curriculum"] = False
    if args.linear:
        overrides["linear"] = True
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.fixed_spec is not None:
        overrides["fixed_spec"] = args.fixed_spec
    if overrides:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **overrides})
    run_dir = Path(args.run_dir) if args.run_dir else _default_run_dir(cfg)
    with run_lock(run_dir):
        result = tr.run_training(cfg, run_dir, resume=args.resume, init_checkpoint=args.init_checkpoint,
                                 progress=None if args.quiet else print)
    print(f"{run_dir}: {result.steps} steps, final panel mean {result.final_scores.mean():.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    agent, cfg, ck = load_agent(args.checkpoint)
    world = agent.world
    kernel = world.transition_kernel()
    rng = np.random.default_rng(args.seed)
    texts = _read_spec_lines(args.specs)
    table = world.reward_table()
    rows, scores = [], []
    for text in texts:
        spec = sl.parse(text, world.n_objectives)
        goal = ag.SpecGoal(spec)
        q = agent.q_tables([goal])[0]
        _check_finite(q)
        policy = np.argmax(q, axis=1)
        ref = orc.reference(world, spec, cfg.agent.gamma, kernel=kernel)
        if args.episodes > 0:
            mean, stderr = orc.policy_return(world, policy, spec, cfg.agent.gamma, args.episodes, rng)
        else:
            mean, stderr = orc.expected_return(world, policy, goal.scalarize(table),
                                               cfg.agent.gamma, kernel), 0.0
        try:
            score = orc.normalized_score(mean, ref.oracle_return, ref.random_return)
            scores.append(score)
            flag = "ok"
        except DegenerateSpec:
            score, flag = float("nan"), "degenerate"
        rows.append((sl.render(spec), mean, stderr, ref.oracle_return, ref.random_return, score, flag))
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        _header(out, provenance(args.checkpoint, ck) | {"episodes": args.episodes, "seed": args.seed})
        out.write("spec\tagent_return\tagent_stderr\toracle_return\trandom_return\tnormalized\tflag\n")
        for row in rows:
            out.write("\t".join(r if isinstance(r, str) else repr(float(r)) for r in row) + "\n")
        mean_score = float(np.mean(scores)) if scores else float("nan")
        out.write(f"# mean_normalized: {mean_score!r} over {len(scores)} of {len(rows)} specifications\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _value_grid(agent: ag.Agent, rows: np.ndarray) -> np.ndarray:
    """max_a Q(s, a) for every cell, conditioned on the given goal-encoding rows (K, 128)."""
    world = agent.world
    S = world.n_states
    with nn.no_grad():
        q = agent.net.head(np.tile(np.eye(S), (len(rows), 1)), rows,
                           np.repeat(np.arange(len(rows)), S)).data
    _check_finite(q)
    return q.reshape(len(rows), S, 4)


def cmd_artifacts(args) -> int:
    agent, cfg, ck = load_agent(args.checkpoint)
    world = agent.world
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = provenance(args.checkpoint, ck)
    shape = (world.height, world.width)
    if args.mode == "value-heatmap":
        if not args.spec:
            raise UsageError("value-heatmap needs --spec")
        for k, text in enumerate(args.spec):
            spec = sl.parse(text, world.n_objectives)
            q = agent.q_tables([ag.SpecGoal(spec)])[0]
            _check_finite(q)
            solved = orc.solve(orc.ScalarMDP.from_spec(world, spec, cfg.agent.gamma))
            head = meta | {"spec": sl.render(spec)}
            orc.write_grid(out / f"value_{k:03d}.txt", q.max(axis=1).reshape(shape), head)
            orc.write_grid(out / f"policy_{k:03d}.txt", q.argmax(axis=1).reshape(shape), head, "%d")
            orc.write_grid(out / f"oracle_policy_{k:03d}.txt", solved.policy, head, "%d")
            orc.write_grid(out / f"oracle_value_{k:03d}.txt", solved.v, head)
    elif args.mode == "interpolate":
        if not args.spec or len(args.spec) != 2:
            raise UsageError("interpolate needs exactly two --spec values")
        if args.steps < 2:
            raise UsageError("--steps must be at least 2")
        specs = [sl.parse(t, world.n_objectives) for t in args.spec]
        with nn.no_grad():
            enc = agent.net.encode([sl.tokenize(s) for s in specs]).data
        alphas = np.linspace(0.0, 1.0, args.steps)
        rows = (1 - alphas)[:, None] * enc[0] + alphas[:, None] * enc[1]
        q = _value_grid(agent, rows)
        for k, alpha in enumerate(alphas):
            head = meta | {"from": sl.render(specs[0]), "to": sl.render(specs[1]), "alpha": repr(float(alpha))}
            orc.write_grid(out / f"interp_{k:03d}.txt", q[k].max(axis=1).reshape(shape), head)
    elif args.mode == "encodings":
        if not args.specs:
            raise UsageError("encodings needs --specs")
        specs = [sl.parse(t, world.n_objectives) for t in _read_spec_lines(args.specs)]
        enc = encode_specs(agent.net, specs)
        _check_finite(enc)
        probes = sl.canonical_probes(world.n_objectives)
        buckets: dict[bytes, int] = {}
        with open(out / "encodings.tsv", "w", encoding="utf-8") as fh:
            _header(fh, meta)
            fh.write("spec\tbucket\t" + "\t".join(f"e{i}" for i in range(enc.shape[1])) + "\n")
            for spec, row in zip(specs, enc):
                bucket = buckets.setdefault(sl.fingerprint_key(spec, probes), len(buckets))
                fh.write(f"{sl.render(spec)}\t{bucket}\t" + "\t".join(repr(float(v)) for v in row) + "\n")
    print(f"wrote {args.mode} artifacts to {out}")
    return EXIT_OK


def encode_specs(net: nn.QNetwork, specs, chunk: int = 256) -> np.ndarray:
    out = []
    with nn.no_grad():
        for lo in range(0, len(specs), chunk):
            out.append(net.encode([sl.tokenize(s) for s in specs[lo: lo + chunk]]).data)
    return np.concatenate(out) if out else np.zeros((0, net.arch.encoding_dim))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="logicmorl", description="Logic-specification-conditioned multi-objective DQN.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("specgen", help="generate train/test specification files")
    s.add_argument("--objectives", type=int, required=True, help="number of objectives (1..6)")
    s.add_argument("--count", type=int, required=True, help="distinct specifications to generate")
    s.add_argument("--split", type=float, default=0.8, help="training fraction (default 0.8)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-atoms", type=int, default=5, help="maximum leaves per specification")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_specgen)

    t = sub.add_parser("train", help="train an agent")
    t.add_argument("--config", help="JSON run config (missing keys take defaults)")
    t.add_argument("--run-dir", help=f"run directory (default: ${RUN_ROOT_ENV}/run-<config hash>)")
    t.add_argument("--no-curriculum", action="store_true", help="sample from the full train set from step 0")
    t.add_argument("--linear", action="store_true", help="condition on Dirichlet weight vectors")
    t.add_argument("--resume", action="store_true", help="continue from the run directory's last checkpoint")
    t.add_argument("--steps", type=int, help="override total environment steps")
    t.add_argument("--seed", type=int, help="override the run seed")
    t.add_argument("--fixed-spec", help="train on this single specification")
    t.add_argument("--init-checkpoint", help="warm-start parameters from this checkpoint")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a specification list")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--specs", required=True, help="file with one specification per line")
    e.add_argument("--episodes", type=int, default=10,
                   help="greedy rollouts per specification; 0 uses the exact expected return")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="output table (default stdout)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("artifacts", help="emit value heatmaps, interpolations or encodings")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--mode", required=True, choices=("value-heatmap", "interpolate", "encodings"))
    a.add_argument("--spec", action="append", help="specification (repeatable)")
    a.add_argument("--specs", help="file with one specification per line (encodings mode)")
    a.add_argument("--steps", type=int, default=7, help="interpolation points")
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(func=cmd_artifacts)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "eval" and args.episodes < 0:
            raise UsageError("--episodes must be >= 0")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LogicMorlError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
