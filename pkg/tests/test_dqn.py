import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from pansearch import dqn
from pansearch import env as mdp
from pansearch.geometry import ActionKind
from pansearch.nn import MomentumSGD
from pansearch.nn.checkpoint import CheckpointError

ECFG = mdp.EnvConfig()


def _tiny_dataset(n=4, seed=0):
    rng = np.random.default_rng(seed)
    ims, ms = [], []
    for _ in range(n):
        img = rng.integers(40, 80, (64, 64)).astype(np.uint8)
        m = np.zeros((64, 64), dtype=np.uint8)
        x, y = rng.integers(10, 50, 2)
        m[y : y + 4, x : x + 5] = 1
        img[m == 1] = 160
        ims.append(img)
        ms.append(m)
    return ims, ms


def test_epsilon_schedule():
    for e in range(40):
        # max(1 - 0.1 e, 0.1) evaluated in exact decimal arithmetic
        assert dqn.epsilon(e) == max(10 - e, 1) / 10
    assert dqn.epsilon(0) == 1.0
    assert dqn.epsilon(12) == 0.1
    assert dqn.epsilon(3) == 0.7
    with pytest.raises(ValueError):
        dqn.epsilon(-1)


def test_select_action_greedy_and_ties():
    rng = np.random.default_rng(0)
    q = np.zeros(10)
    q[7] = 5.0
    assert dqn.select_action(q, 0.0, rng) == 7 == ActionKind.SHIFT_LEFT
    q = np.zeros(10)
    q[2] = q[5] = 1.0
    assert dqn.select_action(q, 0.0, rng) == 2
    with pytest.raises(ValueError):
        dqn.select_action(q, 1.5, rng)


def test_select_action_uniform_at_eps_one():
    rng = np.random.default_rng(123)
    n = 10_000
    counts = np.bincount([int(dqn.select_action(np.arange(10.0), 1.0, rng)) for _ in range(n)], minlength=10)
    sigma = np.sqrt(n * 0.1 * 0.9)
    assert np.all(np.abs(counts - n / 10) <= 3 * sigma)


@given(st.lists(st.floats(-100, 100), min_size=10, max_size=10), st.floats(0.01, 100))
@settings(max_examples=200, deadline=None)
def test_greedy_choice_is_scale_invariant(q, scale):
    q = np.array(q)
    rng = np.random.default_rng(0)
    assert dqn.select_action(q, 0.0, rng) == dqn.select_action(q * scale, 0.0, rng)


def test_td_target_examples():
    assert dqn.td_target(1.0, [0.0, 2.0, 1.0], False, 0.9) == pytest.approx(2.8)
    assert dqn.td_target(-3.0, [5.0, 7.0], True, 0.9) == -3.0
    assert dqn.td_target(1.5, [5.0, 7.0], False, 1e-300) == pytest.approx(1.5)
    batch = dqn.td_target(np.array([1.0, 2.0]), np.array([[1.0, 3.0], [10.0, 0.0]]), np.array([False, True]), 0.5)
    assert batch.tolist() == [2.5, 2.0]


def test_q_forward_contract():
    net = dqn.QNetwork(ECFG.state_len, seed=0, zero_head=True)
    x = np.random.default_rng(0).random(ECFG.state_len)
    assert np.array_equal(dqn.q_forward(net, x), np.zeros(10))
    net = dqn.QNetwork(ECFG.state_len, seed=0)
    a, b = dqn.q_forward(net, x), dqn.q_forward(net, x)
    assert a.shape == (10,) and np.array_equal(a, b)
    assert net.forward(np.stack([x, x])).shape == (2, 10)
    with pytest.raises(ValueError):
        net.forward(np.zeros(5))


def test_replay_capacity_and_fifo():
    mem = dqn.ReplayMemory(5, 3)
    for i in range(12):
        mem.push(np.full(3, i), i % 10, float(i), np.full(3, i + 1), False)
        assert len(mem) == min(i + 1, 5)
    assert mem.rewards[mem.order()].tolist() == [7.0, 8.0, 9.0, 10.0, 11.0]


@given(st.lists(st.one_of(st.just("sample"), st.integers(0, 1000)), max_size=80), st.integers(1, 10))
@settings(max_examples=100, deadline=None)
def test_replay_eviction_is_insertion_order(ops, capacity):
    mem = dqn.ReplayMemory(capacity, 1, seed=1)
    pushed = []
    for op in ops:
        if op == "sample":
            if len(mem):
                mem.sample(3)
            continue
        mem.push([op], 0, float(op), [op], False)
        pushed.append(float(op))
        assert mem.rewards[mem.order()].tolist() == pushed[-capacity:]


def test_replay_sampling_is_uniform():
    cap = 50
    mem = dqn.ReplayMemory(cap, 1, seed=7)
    for i in range(cap + 17):  # wrap around so contents span the ring seam
        mem.push([i], 0, float(i), [i], False)
    draws = np.concatenate([mem.sample(32)[2] for _ in range(1000)])
    values, counts = np.unique(draws, return_counts=True)
    assert values.tolist() == list(map(float, range(17, cap + 17)))
    assert stats.chisquare(counts).pvalue > 0.01


def test_train_step_zero_error_is_a_no_op():
    net = dqn.QNetwork(8, hidden=(6,), seed=0, zero_head=True)
    opt = MomentumSGD(list(net.parameters().values()), lr=0.1)
    before = net.state_dict()
    batch = (np.ones((4, 8), np.float32), np.array([0, 3, 9, 2]), np.zeros(4, np.float32), np.ones((4, 8), np.float32), np.ones(4, bool))
    assert dqn.train_step(net, batch, opt, 0.9) == 0.0
    after = net.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert all(not v.any() for v in opt.velocity)


def _frozen_batch(seed=0, n=16, width=12):
    rng = np.random.default_rng(seed)
    return (
        rng.random((n, width)).astype(np.float32),
        rng.integers(0, 10, n),
        rng.choice([-1.0, 1.0, 3.0], n).astype(np.float32),
        rng.random((n, width)).astype(np.float32),
        rng.random(n) < 0.3,
    )


def test_single_transition_loss_decreases():
    net = dqn.QNetwork(12, hidden=(16,), seed=1)
    batch = tuple(a[:1] for a in _frozen_batch())
    opt = MomentumSGD(list(net.parameters().values()), lr=1e-3, momentum=0.0)
    first = dqn.train_step(net, batch, opt, 0.9)
    opt.lr = 0.0
    assert dqn.train_step(net, batch, opt, 0.9) < first


@pytest.mark.parametrize("seed", range(3))
def test_frozen_batch_loss_decreases_monotonically(seed):
    net = dqn.QNetwork(12, hidden=(16, 16), seed=seed)
    batch = _frozen_batch(seed)
    opt = MomentumSGD(list(net.parameters().values()), lr=1e-3, momentum=0.0)
    losses = [dqn.train_step(net, batch, opt, 0.9) for _ in range(10)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_training_is_deterministic_and_bounded():
    ims, ms = _tiny_dataset()
    cfg = dqn.DqnConfig(epochs=3, replay_capacity=40, batch_size=8, seed=5)
    net1, log1 = dqn.train_localizer(ims, ms, ECFG, cfg)
    net2, log2 = dqn.train_localizer(ims, ms, ECFG, cfg)
    assert log1 == log2
    s1, s2 = net1.state_dict(), net2.state_dict()
    assert all(np.array_equal(s1[k], s2[k]) for k in s1)
    assert [r["epsilon"] for r in log1] == [1.0, 0.9, 0.8]
    net3, _ = dqn.train_localizer(ims, ms, ECFG, dataclasses.replace(cfg, seed=6))
    assert not np.array_equal(net3.state_dict()["fc0.weight"], s1["fc0.weight"])


def test_train_rejects_empty_inputs():
    with pytest.raises(ValueError):
        dqn.train_localizer([], [], ECFG, dqn.DqnConfig(epochs=1))
    img = np.zeros((64, 64), np.uint8)
    with pytest.raises(ValueError):
        dqn.train_localizer([img], [np.zeros_like(img)], ECFG, dqn.DqnConfig(epochs=1))


def test_always_trigger_agent():
    ims, ms = _tiny_dataset()
    net = dqn.QNetwork(ECFG.state_len, seed=0, zero_head=True)
    net.layers[-1].bias.value[ActionKind.TRIGGER] = 1.0
    recs, summary = dqn.evaluate_localizer(net, ims, ms, ECFG)
    for r, m in zip(recs, ms):
        assert r.window == (0, 0, 64, 64)
        assert r.recall == 1.0 and r.steps == 1
        assert r.iou == pytest.approx(m.sum() / m.size)
    assert summary["mean"] == summary["min"] == summary["max"] == 1.0


def test_random_policy_episodes_are_bounded():
    ims, ms = _tiny_dataset(6)
    recs, summary = dqn.evaluate_random(ims, ms, ECFG, seed=3)
    assert all(1 <= r.steps <= 10 for r in recs)
    assert 0.0 <= summary["min"] <= summary["mean"] <= summary["max"] <= 1.0


def test_action_correlation():
    freqs = np.array([[1, 1, 3, 0, 2, 0, 0, 0, 0], [2, 2, 2, 0, 1, 0, 0, 0, 1], [3, 3, 1, 0, 0, 0, 1, 0, 0]], float)
    c = dqn.action_correlation(freqs)
    assert c.shape == (9, 9)
    assert c[0, 1] == pytest.approx(1.0)
    assert c[0, 2] == pytest.approx(-1.0)
    defined = ~np.isnan(np.diag(c))
    assert np.all(np.diag(c)[defined] == 1.0)
    assert np.isnan(c[3]).all() and np.isnan(c[:, 3]).all()
    finite = ~np.isnan(c)
    assert np.array_equal(finite, finite.T)
    assert np.allclose(c[finite], c.T[finite])
    assert np.all(np.abs(c[finite]) <= 1.0)
    with pytest.raises(ValueError):
        dqn.action_correlation(freqs[:1])


def test_action_frequencies_ignore_trigger():
    rec = dqn.EpisodeRecord((0, 0, 1, 1), 0.0, 0.0, 3, [0, 0, 8, 9], 0.0)
    f = dqn.action_frequencies([rec])
    assert f.shape == (1, 9) and f[0, 0] == 2 and f[0, 8] == 1 and f.sum() == 3


def test_agent_checkpoint_round_trip(tmp_path):
    cfg = dqn.DqnConfig(seed=4)
    net = dqn.QNetwork(ECFG.state_len, cfg.hidden, seed=4)
    p = tmp_path / "a.ckpt"
    dqn.save_agent(p, net, ECFG, cfg, "axial")
    net2, ecfg2, meta = dqn.load_agent(p)
    assert ecfg2 == ECFG and meta["view_axis"] == "axial"
    x = np.random.default_rng(0).random(ECFG.state_len)
    assert np.array_equal(net.forward(x), net2.forward(x))
    p2 = tmp_path / "b.ckpt"
    dqn.save_agent(p2, net2, ecfg2, cfg, "axial")
    assert p.read_bytes() == p2.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + p.read_bytes()[4:])
    with pytest.raises(CheckpointError):
        dqn.load_agent(bad)
