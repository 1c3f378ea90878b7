import json
import subprocess
import sys

import numpy as np
import pytest

from logicmorl import agent as ag
from logicmorl import cli
from logicmorl import gridworld as gw
from logicmorl import oracle as orc
from logicmorl import speclang as sl
from logicmorl.config import RunConfig


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = {"size": "small", "n_objectives": 3, "specset_count": 300, "total_steps": 1000,
           "eval_every": 500, "eval_panel": 5, "increment_every": 200, "total_increments": 4}
    (d / "cfg.json").write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(d / "cfg.json"), "--run-dir", str(d / "run"), "--quiet"]) == 0
    return d / "run" / "final.npz"


def test_specgen(tmp_path):
    out = tmp_path / "s"
    assert cli.main(["specgen", "--objectives", "3", "--count", "500", "--split", "0.8", "--out", str(out)]) == 0
    train = (out / "train.txt").read_text().splitlines()
    test = (out / "test.txt").read_text().splitlines()
    assert len(train) == 400 and len(test) == 100
    assert json.loads((out / "manifest.json").read_text())["seed"] == 0
    again = tmp_path / "t"
    cli.main(["specgen", "--objectives", "3", "--count", "500", "--out", str(again)])
    assert (again / "train.txt").read_bytes() == (out / "train.txt").read_bytes()


def test_specgen_usage_errors(tmp_path):
    assert cli.main(["specgen", "--objectives", "7", "--count", "10", "--out", str(tmp_path)]) == 1
    assert cli.main(["specgen", "--objectives", "2", "--count", "10", "--split", "1.5", "--out", str(tmp_path)]) == 1
    assert cli.main(["specgen", "--count", "10", "--out", str(tmp_path)]) == 1
    assert cli.main(["nonsense"]) == 1


def test_specgen_stall_is_data_error(tmp_path):
    code = cli.main(["specgen", "--objectives", "1", "--count", "500", "--max-atoms", "1", "--out", str(tmp_path)])
    assert code == 2


def test_train_refuses_existing_run(checkpoint):
    run_dir = checkpoint.parent
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["n_objectives"] == 3
    code = cli.main(["train", "--config", str(run_dir.parent / "cfg.json"), "--run-dir", str(run_dir), "--quiet"])
    assert code == 2


def test_lock_blocks_second_writer(tmp_path):
    (tmp_path / ".lock").write_text("123")
    assert cli.main(["train", "--run-dir", str(tmp_path), "--steps", "100", "--quiet"]) == 2


def test_default_run_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUN_ROOT_ENV, str(tmp_path))
    cfg = RunConfig(total_steps=10)
    assert cli._default_run_dir(cfg).parent == tmp_path


def test_eval_table(tmp_path, checkpoint):
    specs = tmp_path / "specs.txt"
    specs.write_text("o1\no2 & o3\no1 >= 0.0\n")
    out = tmp_path / "table.tsv"
    assert cli.main(["eval", "--checkpoint", str(checkpoint), "--specs", str(specs), "--episodes", "0",
                     "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert any(line.startswith("# checkpoint_sha256: ") for line in lines)
    rows = [line.split("\t") for line in lines if not line.startswith("#")][1:]
    assert len(rows) == 3
    assert rows[2][-1] == "degenerate"
    assert "over 2 of 3" in lines[-1]


def test_eval_of_oracle_policy_scores_one(tmp_path, checkpoint, monkeypatch):
    """Replacing the network's greedy choice with the oracle policy yields normalized score 1."""
    agent, cfg, _ = cli.load_agent(checkpoint)
    world = agent.world
    spec = sl.parse("o2 & o3")
    ref = orc.reference(world, spec)
    q = np.zeros((world.n_states, 4))
    q[np.arange(world.n_states), ref.policy.ravel()] = 1.0
    monkeypatch.setattr(ag.Agent, "q_tables", lambda self, goals, net=None: q[None])
    monkeypatch.setattr(cli, "load_agent", lambda path: (agent, cfg, cli.nn.load_checkpoint(path)))
    (tmp_path / "s.txt").write_text("o2 & o3\n")
    out = tmp_path / "t.tsv"
    cli.main(["eval", "--checkpoint", str(checkpoint), "--specs", str(tmp_path / "s.txt"),
              "--episodes", "400", "--out", str(out)])
    row = [l for l in out.read_text().splitlines() if l.startswith("o2")][0].split("\t")
    score, stderr = float(row[5]), float(row[2]) / (ref.oracle_return - ref.random_return)
    assert abs(score - 1.0) <= 3 * stderr


def test_eval_world_mismatch(tmp_path):
    from logicmorl import neural as nn
    net = nn.QNetwork(nn.Architecture(state_dim=144))
    nn.save_checkpoint(tmp_path / "c.npz", net, config=RunConfig(size="small").to_dict())
    (tmp_path / "s.txt").write_text("o1\n")
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "c.npz"), "--specs", str(tmp_path / "s.txt")]) == 2


def test_value_heatmap(tmp_path, checkpoint):
    out = tmp_path / "hm"
    assert cli.main(["artifacts", "--checkpoint", str(checkpoint), "--mode", "value-heatmap",
                     "--spec=-o3", "--spec", "( ( -o3 | -o3 ) )", "--out", str(out)]) == 0
    a, b = orc.read_grid(out / "value_000.txt"), orc.read_grid(out / "value_001.txt")
    assert a.shape == (5, 5) and b.shape == (5, 5)
    assert (out / "oracle_policy_000.txt").exists()
    assert "checkpoint_sha256" in (out / "value_000.txt").read_text()


def test_interpolate_emits_k_files(tmp_path, checkpoint):
    out = tmp_path / "interp"
    assert cli.main(["artifacts", "--checkpoint", str(checkpoint), "--mode", "interpolate",
                     "--spec=-o3", "--spec", "o3", "--steps", "7", "--out", str(out)]) == 0
    files = sorted(out.glob("interp_*.txt"))
    assert len(files) == 7
    agent, _, _ = cli.load_agent(checkpoint)
    first = orc.read_grid(files[0])
    expect = agent.q_tables([ag.SpecGoal(sl.parse("-o3"))])[0].max(axis=1).reshape(5, 5)
    assert np.allclose(first, expect, rtol=1e-9)


def test_encodings_with_buckets(tmp_path, checkpoint):
    (tmp_path / "s.txt").write_text("o1\no1 | o1\no2\n-o3\n")
    out = tmp_path / "enc"
    assert cli.main(["artifacts", "--checkpoint", str(checkpoint), "--mode", "encodings",
                     "--specs", str(tmp_path / "s.txt"), "--out", str(out)]) == 0
    rows = [l.split("\t") for l in (out / "encodings.tsv").read_text().splitlines() if not l.startswith("#")]
    assert rows[0][:3] == ["spec", "bucket", "e0"] and len(rows[0]) == 130
    assert [r[1] for r in rows[1:]] == ["0", "0", "1", "2"]


def test_artifacts_deterministic(tmp_path, checkpoint):
    for name in ("a", "b"):
        cli.main(["artifacts", "--checkpoint", str(checkpoint), "--mode", "value-heatmap",
                  "--spec", "o1 & o2", "--out", str(tmp_path / name)])
    assert (tmp_path / "a" / "value_000.txt").read_bytes() == (tmp_path / "b" / "value_000.txt").read_bytes()


def test_artifacts_usage(tmp_path, checkpoint):
    assert cli.main(["artifacts", "--checkpoint", str(checkpoint), "--mode", "interpolate",
                     "--spec", "o1", "--out", str(tmp_path)]) == 1
    assert cli.main(["artifacts", "--checkpoint", str(checkpoint), "--mode", "bogus", "--out", str(tmp_path)]) == 1


def test_nan_checkpoint_exit_code(tmp_path, checkpoint):
    from logicmorl import neural as nn
    ck = nn.load_checkpoint(checkpoint)
    ck.net.flat[:] = np.nan
    nn.save_checkpoint(tmp_path / "nan.npz", ck.net, config=ck.config)
    code = cli.main(["artifacts", "--checkpoint", str(tmp_path / "nan.npz"), "--mode", "value-heatmap",
                     "--spec", "o1", "--out", str(tmp_path / "o")])
    assert code == 3


def test_module_help():
    proc = subprocess.run([sys.executable, "-m", "logicmorl", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("specgen", "train", "eval", "artifacts"):
        assert cmd in proc.stdout
