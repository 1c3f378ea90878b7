import numpy as np
import pytest

from logicmorl import agent as ag
from logicmorl import gridworld as gw
from logicmorl import neural as nn
from logicmorl import oracle as orc
from logicmorl import speclang as sl
from logicmorl.errors import BufferTooSmall, CheckpointError


@pytest.fixture
def world():
    return gw.build("small", 3, seed=0)


def fill(agent, n, seed=0):
    rng = np.random.default_rng(seed)
    s = gw.reset(agent.world, rng)
    for _ in range(n):
        tr = gw.step(agent.world, s, int(rng.integers(4)), rng)
        agent.observe(tr)
        s = gw.reset(agent.world, rng) if tr.terminal else tr.s_next


def goals(*texts):
    return [ag.SpecGoal(sl.parse(t)) for t in texts]


# -- replay -------------------------------------------------------------------

def test_replay_fifo(world):
    buf = ag.ReplayBuffer(10, world.n_objectives)
    rng = np.random.default_rng(0)
    s = gw.MOState(0, 0, 0)
    for _ in range(13):
        buf.add(world, gw.step(world, s, 0, rng))
    assert len(buf) == 10
    assert buf.serials() == set(range(3, 13))



def test_timeout_bootstrap_flag(world):
    rng = np.random.default_rng(0)
    last = gw.MOState(2, 2, world.horizon - 1)
    tr = gw.step(world, last, 0, rng)
    assert tr.terminal
    plain, boot = ag.ReplayBuffer(4, world.n_objectives), ag.ReplayBuffer(4, world.n_objectives)
    plain.add(world, tr)
    boot.add(world, tr, bootstrap_timeouts=True)
    assert plain.terminal[0] and not boot.terminal[0]
    assert plain.next_t[0] == boot.next_t[0] == world.horizon

def test_replay_rejects_small_sample(world):
    buf = ag.ReplayBuffer(100, world.n_objectives)
    with pytest.raises(BufferTooSmall):
        buf.sample(32, np.random.default_rng(0))


def test_augmented_rewards_recomputed_from_vectors(world):
    agent = ag.Agent(world, seed=0)
    fill(agent, 200)
    specs = goals("o1", "o2 & -o3", "o3 >= 0.5 | o1", "o2", "-o1", "o1 & o2 & o3", "o3 <= 0.2", "o2 | o3")
    idx = agent.buffer.sample(32, np.random.default_rng(1))
    batch = ag.augment(agent.buffer, idx, specs)
    assert len(batch) == 256
    for row in range(256):
        t, k = divmod(row, 8)
        r = agent.buffer.reward[idx[t]]
        assert batch.rewards[row] == sl.evaluate(r, specs[k].ast)
        assert batch.goal_index[row] == k


# -- acting -----------------------------------------------------------------

def test_act_uniform_when_epsilon_one(world):
    net = nn.QNetwork(nn.Architecture(state_dim=25), np.random.default_rng(0))
    rng = np.random.default_rng(3)
    tokens = sl.tokenize(sl.parse("o1"))
    feats = world.state_features(0)
    counts = np.bincount([ag.act(net, feats, tokens, 1.0, rng) for _ in range(100_000)], minlength=4)
    chi2 = ((counts - 25_000) ** 2 / 25_000).sum()
    assert chi2 < 16.27


def test_act_greedy_deterministic(world):
    net = nn.QNetwork(nn.Architecture(state_dim=25), np.random.default_rng(0))
    tokens = sl.tokenize(sl.parse("o2 | o1"))
    feats = world.state_features(7)
    acts = {ag.act(net, feats, tokens, 0.0, np.random.default_rng(s)) for s in range(20)}
    assert len(acts) == 1


def test_act_on_hand_set_net_prefers_right(world):
    net = nn.QNetwork(nn.Architecture(state_dim=25), np.random.default_rng(0))
    net.params["head.3.w"].data[...] = 0.0
    net.params["head.3.b"].data[...] = [0.0, 0.0, 0.0, 1.0]
    rng = np.random.default_rng(0)
    for c in range(25):
        assert ag.act(net, world.state_features(c), sl.tokenize(sl.parse("-o1")), 0.0, rng) == gw.RIGHT


def test_act_tie_break_first_action():
    assert ag.greedy_action(np.array([0.3, 0.5, 0.5, 0.1])) == 1


def test_act_rejects_bad_epsilon(world):
    net = nn.QNetwork(nn.Architecture(state_dim=25))
    with pytest.raises(ValueError):
        ag.act(net, world.state_features(0), [0], 1.5, np.random.default_rng(0))


def test_epsilon_schedule_monotone():
    cfg = ag.AgentConfig()
    values = [ag.epsilon_at(s, 10_000, cfg) for s in range(0, 12_000, 100)]
    assert values[0] == 1.0
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert values[-1] == pytest.approx(0.05)
    assert ag.epsilon_at(3000, 10_000, cfg) == pytest.approx(0.05)


# -- loss -------------------------------------------------------------------

def _one_row_batch(terminal, reward):
    return ag.AugmentedBatch(cells=np.array([0]), actions=np.array([2]), next_cells=np.array([1]),
                             terminal=np.array([float(terminal)]), rewards=np.array([reward]),
                             goals=goals("o1"), goal_index=np.array([0]))


def _constant_net(value):
    net = nn.QNetwork(nn.Architecture(state_dim=25), np.random.default_rng(0))
    net.params["head.3.w"].data[...] = 0.0
    net.params["head.3.b"].data[...] = value
    return net


def test_learning_rate_schedule():
    const = ag.AgentConfig(lr_end=None)
    assert ag.learning_rate_at(0, 100, const) == ag.learning_rate_at(100, 100, const) == const.lr
    decay = ag.AgentConfig(lr=1e-3, lr_end=1e-4)
    values = [ag.learning_rate_at(k, 100, decay) for k in range(0, 130, 10)]
    assert values[0] == 1e-3 and values[-1] == pytest.approx(1e-4)
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_hand_built_td_error():
    net, target = _constant_net(0.5), _constant_net(1.0)
    loss = ag.td_loss(net, target, _one_row_batch(False, 0.2), 0.95)
    assert float(loss.data) == pytest.approx(0.65 ** 2, abs=1e-12)


def test_terminal_rows_drop_bootstrap():
    net, target = _constant_net(0.5), _constant_net(1.0)
    y = ag.td_targets(target, _one_row_batch(True, 0.2), 0.95)
    assert y[0] == 0.2
    loss = ag.td_loss(net, target, _one_row_batch(True, 0.2), 0.95)
    assert float(loss.data) == pytest.approx(0.09, abs=1e-12)


def test_loss_zero_at_fixed_point():
    net, target = _constant_net(0.5), _constant_net(0.0)
    assert float(ag.td_loss(net, target, _one_row_batch(False, 0.5), 0.95).data) == 0.0


def test_gradients_never_reach_target(world):
    agent = ag.Agent(world, seed=0)
    fill(agent, 100)
    batch = ag.augment(agent.buffer, agent.buffer.sample(32, np.random.default_rng(0)),
                       goals("o1", "o2 | o3"))
    agent.net.zero_grad()
    agent.target.zero_grad()
    agent.net.backward(ag.td_loss(agent.net, agent.target, batch, 0.95))
    assert not np.any(agent.target.flat_grad)
    assert np.any(agent.net.flat_grad)
    enc = [p.grad for n, p in agent.net.params.items() if n.startswith("enc.")]
    assert any(np.any(g) for g in enc)


def test_empty_batch_rejected(world):
    agent = ag.Agent(world, seed=0)
    fill(agent, 40)
    batch = ag.augment(agent.buffer, np.array([], dtype=int), goals("o1"))
    from logicmorl.errors import ShapeError
    with pytest.raises(ShapeError):
        ag.td_loss(agent.net, agent.target, batch, 0.95)


# -- train step -------------------------------------------------------------

def test_train_step_reports_rows_and_isolates_target(world):
    agent = ag.Agent(world, ag.AgentConfig(target_sync_every=3), seed=0)
    with pytest.raises(BufferTooSmall):
        agent.train_step(goals("o1") * 8, np.random.default_rng(0))
    fill(agent, 300)
    rng = np.random.default_rng(0)
    target_before = agent.target.flat.copy()
    info = agent.train_step(goals("o1", "o2", "o3", "-o1", "o1 & o2", "o2 | o3", "o1 >= 0.5", "-o3"), rng)
    assert info["rows"] == 256 and not info["synced"]
    assert np.array_equal(agent.target.flat, target_before)
    agent.train_step(goals("o1") * 8, rng)
    info = agent.train_step(goals("o1") * 8, rng)
    assert info["synced"]
    assert np.array_equal(agent.target.flat, agent.net.flat)


def test_loss_decreases_on_fixed_batch(world):
    agent = ag.Agent(world, seed=0)
    fill(agent, 300)
    batch = ag.augment(agent.buffer, agent.buffer.sample(32, np.random.default_rng(0)),
                       goals("o1", "o2 & o3", "-o2", "o3 >= 0.4", "o1 | o2", "o3", "-o1 & -o3", "o2"))
    losses = []
    for _ in range(100):
        loss = ag.td_loss(agent.net, agent.target, batch, 0.95)
        losses.append(float(loss.data))
        agent.net.zero_grad()
        agent.net.backward(loss)
        agent.optimizer.step()
    assert losses[-1] < 0.1 * losses[0]


def test_q_table_cache_invalidated_by_update(world):
    agent = ag.Agent(world, seed=0)
    fill(agent, 100)
    g = goals("o2")[0]
    before = agent.q_table(g).copy()
    assert agent.q_table(g) is agent.q_table(g)
    agent.train_step([g] * 8, np.random.default_rng(0))
    assert not np.array_equal(agent.q_table(g), before)
    fresh = agent.q_tables([g])[0]
    assert np.array_equal(agent.q_table(g), fresh)


# -- warm start -------------------------------------------------------------

def test_warm_start_copies_parameters(tmp_path, world):
    agent = ag.Agent(world, seed=0)
    fill(agent, 200)
    rng = np.random.default_rng(0)
    for _ in range(5):
        agent.train_step(goals("o1", "o2") * 4, rng)
    agent.save(tmp_path / "g.npz", step=100)
    spec = sl.parse("o2 & o3")
    warm, goal = ag.warm_start(tmp_path / "g.npz", world, spec)
    assert np.array_equal(warm.greedy_policy(goal), agent.greedy_policy(ag.SpecGoal(spec)))
    assert np.array_equal(warm.target.flat, agent.net.flat)
    assert warm.optimizer.t == 0 and not np.any(warm.optimizer.m) and not np.any(warm.optimizer.v)
    assert len(warm.buffer) == 0


def test_warm_start_world_mismatch(tmp_path, world):
    ag.Agent(world, seed=0).save(tmp_path / "g.npz")
    with pytest.raises(CheckpointError):
        ag.warm_start(tmp_path / "g.npz", gw.build("medium", 3), sl.parse("o1"))
    with pytest.raises(CheckpointError):
        ag.warm_start(tmp_path / "missing.npz", world, sl.parse("o1"))


# -- linear goals -----------------------------------------------------------

def test_one_hot_weights_match_atoms():
    rng = np.random.default_rng(0)
    r = rng.random((100, 3))
    for k in range(3):
        w = np.zeros(3)
        w[k] = 1.0
        assert np.array_equal(ag.LinearGoal(w).scalarize(r), sl.evaluate(r, sl.Atom(k + 1)))


def test_dirichlet_on_simplex():
    rng = np.random.default_rng(1)
    for _ in range(200):
        g = ag.dirichlet_goal(rng, 4)
        assert g.w.shape == (4,) and np.all(g.w >= 0) and abs(g.w.sum() - 1) < 1e-12


def test_linear_mean_differs_from_logical_min():
    rng = np.random.default_rng(2)
    r = rng.random((200, 3))
    lin = ag.conjunction_weights([2, 3], 3).scalarize(r)
    log = sl.evaluate(r, sl.parse("o2 & o3"))
    differ = r[:, 1] != r[:, 2]
    assert np.all(lin[differ] != log[differ])
    assert np.allclose(lin, (r[:, 1] + r[:, 2]) / 2)


def test_linear_goal_validation():
    with pytest.raises(ValueError):
        ag.LinearGoal(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        ag.LinearGoal(np.array([1.5, -0.5]))


def test_linear_agent_bypasses_encoder(world):
    agent = ag.Agent(world, seed=0)
    fill(agent, 200)
    rng = np.random.default_rng(0)
    lin = [ag.dirichlet_goal(rng, 3) for _ in range(8)]
    agent.net.zero_grad()
    batch = ag.augment(agent.buffer, agent.buffer.sample(32, rng), lin)
    agent.net.backward(ag.td_loss(agent.net, agent.target, batch, 0.95))
    assert not any(np.any(p.grad) for n, p in agent.net.params.items() if n.startswith("enc."))
    rows = ag.goal_rows(agent.net, lin).data
    assert rows.shape == (8, 128) and np.array_equal(rows[:, :3], np.stack([g.w for g in lin]))
    assert not np.any(rows[:, 3:])
    with pytest.raises(TypeError):
        ag.goal_rows(agent.net, [lin[0], goals("o1")[0]])


# -- single-spec learnability (short version; the long run lives in the acceptance suite) --

def test_single_spec_agreement_with_oracle(world):
    spec = sl.parse("o3")
    goal = ag.SpecGoal(spec)
    agent = ag.Agent(world, seed=0)
    rng = np.random.default_rng(0)
    total = 15_000
    s = gw.reset(world, rng)
    for step in range(1, total + 1):
        a = agent.act(s, goal, ag.epsilon_at(step, total, agent.config), rng)
        tr = gw.step(world, s, a, rng)
        agent.observe(tr)
        s = gw.reset(world, rng) if tr.terminal else tr.s_next
        if step % 5 == 0 and len(agent.buffer) >= 32:
            agent.train_step([goal] * 8, rng)
    table = orc.solve(orc.ScalarMDP.from_spec(world, spec))
    assert orc.policy_agreement(agent.greedy_policy(goal), table.q) >= 0.9
