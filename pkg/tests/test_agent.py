import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclelab.agent import (
    AgentHyper,
    AgentParams,
    EmptyBatchError,
    ExplorationSchedule,
    NetConfig,
    NStepWindow,
    PDQNAgent,
    StateBatch,
    Transition,
    actor_splits,
    compute_targets,
    greedy,
    losses,
    n_step_target,
    q_values,
    select_action,
)
from cyclelab.gradcheck import random_batch
from cyclelab.nn import Tape
from cyclelab.nn.optim import sgd_step
from cyclelab.pamdp import MultiAgentState
from cyclelab.signal import CYCLE_SET

K = np.array(CYCLE_SET, dtype=float)


def _params(seed=0, cfg=None, target=True):
    return AgentParams.init(cfg or NetConfig(), np.random.default_rng(seed), target)


def _state(rng, n_masked=1):
    b = random_batch(rng, 1, 64)
    mask = np.ones(4, dtype=bool)
    mask[:n_masked] = False
    return MultiAgentState(b.local[0], b.delta[0], b.nb_local[0] * mask[:, None], b.nb_delta[0] * mask[:, None], mask)


def _zero(net):
    for p in net.params:
        p.value = np.zeros_like(p.value)


# -- straight-line reimplementation of the forward passes -----------------


def _leaky(x):
    return np.where(x > 0, x, 0.01 * x)


def _enc(delta):
    return np.concatenate([(delta[:1] == K).astype(float), delta[1:5], delta[5:6] / 120.0])


def _oracle(net, own_in, s):
    W = {p.name.split(".", 1)[1]: p.value for p in net.params}
    e_i = _leaky(W["D.W"] @ own_in + W["D.b"])
    heads = []
    for h in range(W["attn.W_q"].shape[0]):
        Wq, Wk, V = W["attn.W_q"][h], W["attn.W_k"][h], W["attn.V"][h]
        logits, vals = [], []
        for j in range(4):
            if not s.mask[j]:
                continue
            e_j = _leaky(W["D.W"] @ np.concatenate([s.nb_local[j], _enc(s.nb_delta[j])]) + W["D.b"])
            logits.append((Wk @ e_j) @ (Wq @ e_i))
            vals.append(V @ e_j)
        if logits:
            a = np.exp(np.array(logits) - max(logits))
            a /= a.sum()
            heads.append(sum(ai * v for ai, v in zip(a, vals)))
        else:
            heads.append(np.zeros(W["attn.V"].shape[1]))
    h = np.concatenate([e_i] + heads)
    h = _leaky(W["F1.W"] @ h + W["F1.b"])
    h = _leaky(W["F2.W"] @ h + W["F2.b"])
    return W["F3.W"] @ h + W["F3.b"]


def oracle_q(params, s, splits):
    slot = (s.delta[:1] == K).astype(float)
    return _oracle(params.q, np.concatenate([s.local, slot, splits, s.delta[5:6] / 120.0]), s)


def oracle_actor(params, s):
    z = _oracle(params.actor, np.concatenate([s.local, _enc(s.delta)]), s)
    e = np.exp(z - z.max())
    return e / e.sum()


# -- forward ---------------------------------------------------------------


def test_zero_weights_give_final_bias_and_uniform_splits():
    p = _params()
    _zero(p.q)
    _zero(p.actor)
    p.q.F[-1].b.value = np.arange(6.0)
    s = _state(np.random.default_rng(0))
    assert np.array_equal(q_values(p, s, np.full(4, 0.25)), np.arange(6.0))
    assert np.array_equal(actor_splits(p, s), np.full(4, 0.25))


def test_forward_matches_straight_line_oracle():
    rng = np.random.default_rng(11)
    p = _params(3)
    for n_masked in (0, 1, 3, 4):
        s = _state(rng, n_masked)
        x = actor_splits(p, s)
        assert np.allclose(x, oracle_actor(p, s), rtol=1e-10, atol=1e-12)
        assert np.allclose(q_values(p, s, x), oracle_q(p, s, x), rtol=1e-10, atol=1e-12)


def test_fully_masked_neighbours_are_ignored():
    rng = np.random.default_rng(2)
    p = _params(1)
    s = _state(rng, 4)
    other = MultiAgentState(s.local, s.delta, rng.random((4, 64)), s.nb_delta + 1, s.mask)
    x = np.full(4, 0.25)
    assert np.array_equal(q_values(p, s, x), q_values(p, other, x))


def test_neighbour_influence_runs_through_attention():
    rng = np.random.default_rng(4)
    p = _params(2)
    s = _state(rng, 0)
    other = MultiAgentState(s.local, s.delta, rng.random((4, 64)), s.nb_delta, s.mask)
    assert not np.allclose(actor_splits(p, s), actor_splits(p, other))
    # without queries every neighbour gets the same weight
    p.actor.attn.W_q.value[:] = 0
    _, alpha = p.actor.forward(StateBatch.of([other]))
    assert np.allclose(alpha, 0.25)
    # without values the neighbour path carries nothing
    p.actor.attn.V.value[:] = 0
    assert np.array_equal(actor_splits(p, s), actor_splits(p, other))


def test_per_k_head_shapes():
    cfg = NetConfig(per_k_splits=True)
    p = _params(0, cfg)
    s = _state(np.random.default_rng(0))
    x = actor_splits(p, s)
    assert x.shape == (6, 4) and np.allclose(x.sum(axis=1), 1)
    assert q_values(p, s, x).shape == (6,)
    a, _, _ = greedy(p, s)
    assert np.array_equal(a.splits, x[a.k_index])


# -- action selection --------------------------------------------------------


def test_greedy_is_pure_and_equals_eps_zero():
    rng = np.random.default_rng(7)
    p = _params(5)
    s = _state(rng)
    a1, q1, _ = greedy(p, s)
    a2, q2, _ = greedy(p, s)
    assert a1.k == a2.k and np.array_equal(q1, q2)
    b = select_action(p, s, 0.0, np.random.default_rng(123))
    assert b.k == a1.k == CYCLE_SET[int(np.argmax(q1))]
    assert np.array_equal(b.splits, a1.splits)


def test_full_exploration_is_uniform_over_cycles():
    p = _params(0)
    s = _state(np.random.default_rng(0))
    rng = np.random.default_rng(2024)
    n = 10_000
    ks = [select_action(p, s, 1.0, rng).k for _ in range(n)]
    counts = np.array([ks.count(k) for k in CYCLE_SET])
    sigma = np.sqrt(n * (1 / 6) * (5 / 6))
    assert np.all(np.abs(counts - n / 6) < 3 * sigma)


def test_ties_go_to_shortest_cycle():
    p = _params()
    _zero(p.q)
    p.q.F[-1].b.value = np.array([0.0, 2.0, 1.0, 2.0, 2.0, -1.0])
    a, _, _ = greedy(p, _state(np.random.default_rng(0)))
    assert a.k == 72


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), c=st.floats(-100, 100))
def test_greedy_invariant_to_constant_q_shift(seed, c):
    p = _params(seed % 7)
    s = _state(np.random.default_rng(seed))
    before = greedy(p, s)[0].k
    p.q.F[-1].b.value = p.q.F[-1].b.value + c
    assert greedy(p, s)[0].k == before


def test_epsilon_out_of_range():
    p = _params()
    with pytest.raises(ValueError):
        select_action(p, _state(np.random.default_rng(0)), 1.5, np.random.default_rng(0))


def test_exploration_schedule():
    sched = ExplorationSchedule(1000)
    vals = [sched(t) for t in range(0, 1200, 7)]
    assert vals[0] == 1.0 and sched(800) == pytest.approx(0.05) and sched(1100) == pytest.approx(0.05)
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert all(0.05 - 1e-12 <= v <= 1.0 for v in vals)


# -- targets -----------------------------------------------------------------


def test_n_step_examples():
    assert n_step_target([-5.0], 0.99, 1, 10.0) == pytest.approx(4.9, abs=1e-12)
    assert n_step_target([-1.0, -2.0], 0.99, 4, None) == pytest.approx(-2.98, abs=1e-12)
    with pytest.raises(ValueError):
        n_step_target([-1.0, -2.0], 0.99, 4, 3.0)


def test_window_matches_brute_force_expansion():
    rng = np.random.default_rng(8)
    states = [_state(rng) for _ in range(7)]
    rewards = [-3.0, -1.5, -4.0, -0.5, -2.5, -6.0]
    boot = {i: float(-10 - i) for i in range(7)}  # frozen max-Q of each state
    g, n = 0.99, 4
    win = NStepWindow(n, g)
    got = []
    for i, r in enumerate(rewards):
        out = win.push(Transition(states[i], 0, np.full(4, 0.25), r, states[i + 1], cycle=i))
        if out:
            got.append(out)
    got += win.flush()
    assert len(got) == 6
    for first, ret, nxt, disc in got:
        i = first.cycle
        j = next(k for k, st_ in enumerate(states) if st_ is nxt) if disc else None
        y = ret + disc * (boot[j] if j is not None else 0.0)
        m = min(n, len(rewards) - i)
        brute = sum(g**t * rewards[i + t] for t in range(m))
        if i + n <= len(rewards):
            brute += g**n * boot[i + n]
            assert nxt is states[i + n]
        assert y == pytest.approx(brute, abs=1e-12)


def test_bootstrapped_tail_treats_horizon_as_time_limit():
    rng = np.random.default_rng(2)
    states = [_state(rng) for _ in range(4)]
    win = NStepWindow(4, 0.99, bootstrap_tail=True)
    for i, r in enumerate([-1.0, -2.0, -3.0]):
        assert win.push(Transition(states[i], 0, np.full(4, 0.25), r, states[i + 1], cycle=i)) is None
    got = win.flush()
    assert [first.cycle for first, *_ in got] == [0, 1, 2]
    for first, ret, nxt, disc in got:
        m = 3 - first.cycle
        assert nxt is states[3]
        assert disc == 0.99**m
        assert ret == pytest.approx(sum(0.99**t * r for t, r in enumerate([-1.0, -2.0, -3.0][first.cycle :])), abs=1e-12)


def test_targets_ignore_online_perturbation():
    rng = np.random.default_rng(1)
    p = _params(4)
    nb = random_batch(rng, 5, 64)
    ret, disc = rng.normal(size=5), np.full(5, 0.99**4)
    y1 = compute_targets(p, ret, nb, disc)
    for t in p.q.params + p.actor.params:
        t.value = t.value + 1.0
    assert np.array_equal(compute_targets(p, ret, nb, disc), y1)


# -- losses and updates ------------------------------------------------------


def test_loss_examples():
    rng = np.random.default_rng(0)
    p = _params()
    _zero(p.q)
    p.q.F[-1].b.value = np.full(6, 3.0)
    b = random_batch(rng, 1, 64)
    lw, *_ = losses(p, b, np.array([2]), np.full((1, 4), 0.25), np.array([5.0]))
    assert lw == 2.0
    lw, *_ = losses(p, b, np.array([2]), np.full((1, 4), 0.25), np.array([3.0]))
    assert lw == 0.0
    empty = StateBatch(np.zeros((0, 64)), np.zeros((0, 6)), np.zeros((0, 4, 64)), np.zeros((0, 4, 6)), np.zeros((0, 4), bool))
    with pytest.raises(EmptyBatchError):
        losses(p, empty, np.zeros(0, int), np.zeros((0, 4)), np.zeros(0))


def test_actor_loss_equals_oracle_sum():
    rng = np.random.default_rng(6)
    p = _params(9)
    states = [_state(rng, m) for m in (0, 2)]
    b = StateBatch.of(states)
    _, la, *_ = losses(p, b, np.array([0, 1]), np.full((2, 4), 0.25), np.zeros(2))
    want = -np.mean([oracle_q(p, s, oracle_actor(p, s)).sum() for s in states])
    assert la == pytest.approx(want, rel=1e-10)


def test_actor_step_lowers_actor_loss_and_spares_critic():
    rng = np.random.default_rng(3)
    p = _params(2)
    b = random_batch(rng, 16, 64)
    before_q = [t.value.copy() for t in p.q.params]
    with Tape() as tape:
        _, la0, _, la, _ = losses(p, b, np.zeros(16, int), np.full((16, 4), 0.25), np.zeros(16))
    grads = tape.gradients(la, p.actor.params + p.q.params)
    assert all(not g.any() for g in grads[len(p.actor.params) :])
    sgd_step(p.actor.params, grads[: len(p.actor.params)], 1e-3)
    _, la1, *_ = losses(p, b, np.zeros(16, int), np.full((16, 4), 0.25), np.zeros(16))
    assert la1 < la0
    assert all(np.array_equal(a, t.value) for a, t in zip(before_q, p.q.params))


def test_update_guard_leaves_parameters():
    agent = PDQNAgent(NetConfig(), AgentHyper(batch_size=4), seed=0)
    rng = np.random.default_rng(0)
    for _ in range(3):
        agent.buffer.add(_state(rng), 1, np.full(4, 0.25), -1.0, _state(rng), 0.9)
    h = agent.params.param_hash()
    info = agent.update()
    assert info["updated"] is False and agent.params.param_hash() == h


def test_repeated_updates_on_one_transition_converge():
    agent = PDQNAgent(NetConfig(), AgentHyper(batch_size=1, lr_q=0.01), seed=1)
    rng = np.random.default_rng(1)
    agent.buffer.add(_state(rng), 3, np.full(4, 0.25), -2.0, _state(rng), 0.0)
    hist = [agent.update()["loss_q"] for _ in range(400)]
    tail = hist[20:]
    assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))
    assert hist[-1] < 1e-3


def test_default_hyperparameters_echo():
    h = AgentHyper()
    assert (h.lr_q, h.lr_actor, h.gamma, h.batch_size, h.n_step, h.tau) == (0.001, 0.001, 0.99, 128, 4, 0.01)


def test_replay_never_exceeds_capacity():
    agent = PDQNAgent(NetConfig(), AgentHyper(buffer_capacity=5, batch_size=2), seed=0)
    rng = np.random.default_rng(0)
    for i in range(12):
        agent.buffer.add(_state(rng), i % 6, np.full(4, 0.25), -float(i), _state(rng), 0.9)
    assert len(agent.buffer) == 5
    assert sorted(agent.buffer.ret.tolist()) == [-11.0, -10.0, -9.0, -8.0, -7.0]
    with pytest.raises(EmptyBatchError):
        agent.buffer.sample(6, rng)
