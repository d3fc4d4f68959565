import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feddrl.data import PartitionSpec, make_synthetic, partition
from feddrl.drl import (
    AgentConfig,
    AggAction,
    DrlAgent,
    FedDrlAggregator,
    ReplayBuffer,
    StateNormalizer,
    build_state,
    compute_reward,
    ddpg_update,
    impacts_from_action,
    noise_schedule,
    policy_objective_grad,
    q_value,
    select_action,
    soft_update,
    td_priority,
    two_stage_train,
    value_loss_grad,
    value_targets,
)
from feddrl.fl import ClientReport, FederatedRun, RoundConfig
from feddrl.nn import Dense, Network, SgdConfig, build_classifier

from oracles import central_diff, grad_close


def reports(lb, la, n):
    return [ClientReport(i, b, a, c, np.zeros(1)) for i, (b, a, c) in enumerate(zip(lb, la, n))]


def tiny_agent(k=2, seed=0, **kw):
    kw.setdefault("final_layer_init", 0.0)
    cfg = AgentConfig(hidden=4, batch_size=kw.pop("batch_size", 4), **kw)
    return DrlAgent(k, cfg, seed=seed)


# --- state --------------------------------------------------------------------------


def test_state_shape_raw():
    s = build_state(reports([1, 2], [0.5, 1], [10, 10]))
    assert s.flat().shape == (6,)
    np.testing.assert_array_equal(s.flat(), [1, 2, 0.5, 1, 10, 10])


def test_state_wrong_report_count():
    with pytest.raises(ValueError):
        build_state(reports([1, 2], [1, 1], [1, 1]), k=3)


def test_state_symmetric_reports_normalise_equal():
    s = build_state(reports([0.7] * 4, [0.7] * 4, [5] * 4), normalizer=StateNormalizer())
    assert len(set(s.losses_before.tolist())) == 1
    assert len(set(s.counts.tolist())) == 1


def test_normaliser_matches_reimplementation():
    rng = np.random.default_rng(4)
    norm = StateNormalizer()
    running = 0.0
    for _ in range(5):
        lb, la = rng.uniform(0, 3, 4).tolist(), rng.uniform(0, 3, 4).tolist()
        n = rng.integers(1, 50, 4).tolist()
        s = build_state(reports(lb, la, n), normalizer=norm)
        running = max([running] + lb + la)
        expect = [v / running for v in lb] + [v / running for v in la] + [c / sum(n) for c in n]
        assert max(abs(x - y) for x, y in zip(s.flat(), expect)) < 1e-15


def test_normaliser_off_is_raw():
    s = build_state(reports([4.0], [2.0], [7]), normalizer=StateNormalizer(enabled=False))
    np.testing.assert_array_equal(s.flat(), [4.0, 2.0, 7.0])


# --- action --------------------------------------------------------------------------


def head_policy(values):
    """A policy whose head output is the constant ``values``."""
    k = len(values) // 2
    net = Network([Dense(3 * k, 2 * k)], (3 * k,))
    net.set_params(np.concatenate([np.zeros(3 * k * 2 * k), values]))
    return net


def test_sigma_clamped_by_beta():
    a = select_action(head_policy(np.array([1.0, 5.0])), np.zeros(3), beta=0.1)
    assert a.mu[0] == 1.0
    assert a.sigma[0] == pytest.approx(0.1)


def test_sigma_softplus_when_unclamped():
    a = select_action(head_policy(np.array([10.0, -1.0])), np.zeros(3), beta=0.5)
    assert a.sigma[0] == pytest.approx(math.log1p(math.exp(-1.0)))


def test_select_action_deterministic_without_exploration():
    agent = tiny_agent()
    s = np.arange(6, dtype=float)
    a1 = select_action(agent.pi, s, 0.5)
    a2 = select_action(agent.pi, s, 0.5)
    assert a1.flat().tobytes() == a2.flat().tobytes()


def test_exploration_noise_matches_seeded_draw():
    pol = head_policy(np.array([0.3, -0.2, 0.0, 0.0]))
    a = select_action(pol, np.zeros(6), 0.5, explore=True, noise_scale=0.1, rng=np.random.default_rng(11))
    noise = np.random.default_rng(11).normal(0.0, 0.1, size=2)
    np.testing.assert_allclose(a.mu, np.array([0.3, -0.2]) + noise, rtol=0, atol=1e-15)


@pytest.mark.parametrize("mu,expected", [([0.0, 0.0], [0.5, 0.5]), ([math.log(2), 0.0], [2 / 3, 1 / 3])])
def test_impacts_zero_sigma(mu, expected):
    a = AggAction(np.array(mu), np.zeros(2))
    np.testing.assert_allclose(impacts_from_action(a, np.random.default_rng(0)), expected, atol=1e-15)


def test_impacts_match_seeded_normal_and_softmax():
    mu, sigma = np.array([0.1, -0.4, 1.2]), np.array([0.05, 0.2, 0.5])
    got = impacts_from_action(AggAction(mu, sigma), np.random.default_rng(9))
    x = np.random.default_rng(9).normal(mu, sigma)
    e = [math.exp(v) for v in x]
    np.testing.assert_allclose(got, [v / sum(e) for v in e], rtol=1e-12)


def test_impacts_strictly_positive_for_extreme_logits():
    alpha = impacts_from_action(AggAction(np.array([0.0, 5000.0]), np.zeros(2)), np.random.default_rng(0))
    assert np.all(alpha > 0) and abs(alpha.sum() - 1) < 1e-12


@settings(max_examples=60, deadline=None)
@given(
    head=st.lists(st.floats(-20, 20), min_size=4, max_size=4),
    beta=st.floats(0.01, 1.0),
    seed=st.integers(0, 10_000),
)
def test_action_and_impact_invariants(head, beta, seed):
    rng = np.random.default_rng(seed)
    a = select_action(head_policy(np.array(head)), np.zeros(6), beta, True, 0.1, rng)
    assert np.all(a.sigma <= beta * np.abs(a.mu))
    alpha = impacts_from_action(a, rng)
    assert abs(alpha.sum() - 1) < 1e-9 and np.all(alpha > 0)


def test_noise_schedule_linear():
    assert noise_schedule(1, 11, 0.1, 0.01) == 0.1
    assert noise_schedule(11, 11, 0.1, 0.01) == pytest.approx(0.01)
    assert noise_schedule(6, 11, 0.1, 0.01) == pytest.approx(0.055)


# --- reward / priority ------------------------------------------------------------------


@pytest.mark.parametrize("losses,expected", [([1, 1, 1], -1.0), ([2, 1], -2.5)])
def test_reward_examples(losses, expected):
    assert compute_reward(losses) == expected


def test_reward_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        l = rng.uniform(0, 5, 5).tolist()
        assert abs(compute_reward(l) - -(sum(l) / 5 + max(l) - min(l))) < 1e-12


@settings(max_examples=50, deadline=None)
@given(mean=st.floats(0.5, 5), gap=st.floats(0.0, 1.0), extra=st.floats(0.01, 1.0))
def test_reward_monotonicity(mean, gap, extra):
    base = compute_reward([mean - gap / 2, mean + gap / 2])
    wider = compute_reward([mean - (gap + extra) / 2, mean + (gap + extra) / 2])
    lower = compute_reward([mean - extra - gap / 2, mean - extra + gap / 2])
    assert wider < base < lower


def first_state_q(k=1):
    """Q(s, a) = s[0] for state size 3k and action size 2k."""
    q = Network([Dense(5 * k, 1)], (5 * k,))
    w = np.zeros(5 * k + 1)
    w[0] = 1.0
    q.set_params(w)
    return q


def test_td_priority_examples():
    q = first_state_q()
    a = np.zeros(2)
    assert td_priority(np.array([1.0, 0, 0]), a, 1.0, np.zeros(3), q, 0.99) == 0.0
    assert td_priority(np.zeros(3), a, 0.0, np.array([1.0, 0, 0]), q, 0.99) == pytest.approx(0.99)


def random_buffer(n=30, k=2, seed=0, capacity=1000):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(3 * k, 2 * k, capacity)
    for _ in range(n):
        buf.add(rng.normal(size=3 * k), rng.normal(size=2 * k), rng.normal(), rng.normal(size=3 * k))
    return buf


def test_priority_sort_matches_recomputation():
    agent = tiny_agent()
    buf = random_buffer()
    rows = list(zip(buf.s.copy(), buf.a.copy(), buf.r.copy(), buf.s_next.copy()))
    buf.reprioritize(agent.q, 0.99)
    buf.sort_by_priority()
    oracle = sorted(
        (abs(r + 0.99 * agent.q.forward(np.concatenate([s2, a]))[0] - agent.q.forward(np.concatenate([s, a]))[0]) for s, a, r, s2 in rows),
        reverse=True,
    )
    np.testing.assert_allclose(buf.priority, oracle, rtol=1e-12)
    assert np.all(np.diff(buf.priority) <= 0)


def test_sampling_frequency_tracks_priority_rank():
    buf = random_buffer(40)
    buf.reprioritize(tiny_agent().q, 0.99)
    buf.sort_by_priority()
    rng = np.random.default_rng(1)
    counts = np.zeros(len(buf))
    for _ in range(20_000):
        counts[buf.sample_indices(1, rng)] += 1
    quartiles = counts.reshape(4, -1).sum(axis=1)
    assert np.all(np.diff(quartiles) < 0)
    assert counts[0] > counts[-1] * 10


def test_buffer_evicts_oldest():
    buf = ReplayBuffer(1, 1, capacity=3)
    for i in range(5):
        buf.add([i], [0.0], float(i), [0.0], priority=float(10 - i))
    buf.sort_by_priority()
    assert len(buf) == 3
    assert sorted(buf.r.tolist()) == [2.0, 3.0, 4.0]
    buf.add([9], [0.0], 9.0, [0.0])
    assert sorted(buf.r.tolist()) == [3.0, 4.0, 9.0]


def test_buffer_sampling_needs_a_batch():
    with pytest.raises(ValueError):
        random_buffer(3).sample_indices(4, np.random.default_rng(0))


def test_buffer_export_round_trip():
    buf = random_buffer(12)
    buf.reprioritize(tiny_agent().q, 0.99)
    raw = buf.to_bytes()
    back = ReplayBuffer.from_bytes(raw)
    assert back.to_bytes() == raw
    head, _, block = raw.partition(b"end\n")
    assert len(block) == 12 * (6 + 4 + 1 + 6 + 1) * 8


# --- updates ----------------------------------------------------------------------------------


def test_soft_update_literal_rule():
    main = Network([Dense(1, 1)], (1,))
    target = main.clone()
    main.set_params(np.ones(2))
    target.set_params(np.zeros(2))
    soft_update(target, main, 0.02)
    np.testing.assert_allclose(target.params, [0.98, 0.98])
    before = target.params.copy()
    soft_update(target, main, 1.0)
    np.testing.assert_array_equal(target.params, before)


def test_soft_update_conventional_toggle():
    main = Network([Dense(1, 1)], (1,))
    target = main.clone()
    main.set_params(np.ones(2))
    target.set_params(np.zeros(2))
    soft_update(target, main, 0.02, conventional=True)
    np.testing.assert_allclose(target.params, [0.02, 0.02])


@pytest.mark.parametrize("n", [1, 3, 10])
def test_soft_update_contraction(n):
    rng = np.random.default_rng(n)
    main = Network.mlp([3, 4, 2], rng=rng)
    target = Network.mlp([3, 4, 2], rng=rng)
    gap0 = np.linalg.norm(target.params - main.params)
    for _ in range(n):
        soft_update(target, main, 0.3)
    assert np.linalg.norm(target.params - main.params) == pytest.approx(gap0 * 0.3**n, rel=1e-9)


def test_value_update_matches_finite_difference():
    agent = tiny_agent(batch_size=8, updates_per_round=1)
    buf = random_buffer(8, seed=3)
    q0 = agent.q.params.copy()
    probe = tiny_agent(batch_size=8)
    for name, net in agent.networks().items():
        probe.networks()[name].set_params(net.params)
    s, a, r, s2 = buf.s.copy(), buf.a.copy(), buf.r.copy(), buf.s_next.copy()

    stats = ddpg_update(agent, buf, 1)
    delta = agent.q.params - q0

    y = value_targets(probe, r, s2)

    def loss(p):
        probe.q.set_params(p)
        return float(np.mean((q_value(probe.q, s, a) - y) ** 2))

    numeric = central_diff(loss, q0.copy(), eps=1e-4)
    assert grad_close(delta, -agent.cfg.q_lr * numeric, rtol=1e-4, atol=1e-12)
    # batch size equals buffer size, so the whole (re-sorted) buffer was used
    assert sorted(stats["batches"][0].tolist()) == list(range(8))


def test_value_gradient_check():
    agent = tiny_agent()
    buf = random_buffer(5, seed=7)
    y = np.random.default_rng(0).normal(size=5)
    _, analytic = value_loss_grad(agent.q, buf.s, buf.a, y)

    def f(p):
        agent.q.set_params(p)
        return float(np.mean((q_value(agent.q, buf.s, buf.a) - y) ** 2))

    numeric = central_diff(f, agent.q.params.copy(), eps=1e-4)
    assert grad_close(analytic, numeric, rtol=1e-3)


@pytest.mark.parametrize("beta", [1.0, 0.05])
def test_policy_gradient_check(beta):
    agent = tiny_agent(seed=2)
    s = np.random.default_rng(1).normal(size=(6, 6))
    _, analytic = policy_objective_grad(agent.pi, agent.q, s, beta)

    def f(p):
        agent.pi.set_params(p)
        from feddrl.drl import action_from_head

        return float(q_value(agent.q, s, action_from_head(agent.pi.forward(s), beta)).mean())

    numeric = central_diff(f, agent.pi.params.copy(), eps=1e-4)
    assert grad_close(analytic, numeric, rtol=1e-3)


def test_update_requires_batch():
    agent = tiny_agent(batch_size=10)
    with pytest.raises(ValueError):
        ddpg_update(agent, random_buffer(3), 1)


def test_network_shapes_follow_config():
    agent = DrlAgent(10, AgentConfig())
    assert agent.pi.input_size == 30 and agent.pi.output_shape == (20,)
    assert agent.q.input_size == 50 and agent.q.output_shape == (1,)
    dense = [d for d in agent.pi.descriptors() if d["type"] == "dense"]
    assert len(dense) == 3 and dense[0]["out"] == 256
    assert {d.get("fn") for d in agent.pi.descriptors() if d["type"] == "activation"} == {"leaky_relu"}


def test_output_layers_start_near_zero():
    agent = DrlAgent(3, AgentConfig(hidden=16))
    assert np.abs(agent.pi.layers[-1]._params[0]).max() <= 3e-3
    assert np.abs(agent.q.forward(np.ones(15))).max() < 0.1


def test_agent_defaults():
    c = AgentConfig()
    assert (c.gamma, c.rho, c.pi_lr, c.q_lr, c.hidden, c.capacity, c.workers) == (0.99, 0.02, 1e-4, 1e-3, 256, 100_000, 2)


def test_agent_checkpoint_round_trip(tmp_path):
    agent = tiny_agent()
    agent.buffer = random_buffer(6)
    agent.save(tmp_path / "agent")
    back = DrlAgent.load(tmp_path / "agent")
    for name, net in agent.networks().items():
        assert back.networks()[name].params.tobytes() == net.params.tobytes()
    assert back.buffer.to_bytes() == agent.buffer.to_bytes()
    assert back.cfg == agent.cfg


# --- online loop / two-stage ----------------------------------------------------------------


def env_factory_for(k=2):
    train, test = make_synthetic(classes=3, dims=4, samples=120, test_samples=30, seed=1)
    m = partition(train.y, PartitionSpec("Equal", k))
    model = build_classifier("mlp", (4,), 3, hidden=5, rng=0)

    def factory(i, agg):
        cfg = RoundConfig(k, k, 0, SgdConfig(epochs=1), "feddrl", seed=100 + i)
        return FederatedRun(model.clone(), train, m.assignments, test, cfg, agg)

    return factory


def test_online_loop_stores_one_experience_per_transition():
    agent = tiny_agent(batch_size=2, updates_per_round=1)
    agg = FedDrlAggregator(agent, 6)
    env_factory_for()(0, agg).run(6)
    assert len(agent.buffer) == 5
    assert len(agg.rewards) == 5 and all(r < 0 for r in agg.rewards)
    assert agent.updates == 4


def test_two_stage_single_worker_no_offline():
    cfg = AgentConfig(hidden=4, batch_size=2, workers=1, offline_updates=0, updates_per_round=1)
    main, workers, logs = two_stage_train(env_factory_for(), cfg, k=2, rounds=4)
    for name, net in main.networks().items():
        assert net.params.tobytes() == workers[0].networks()[name].params.tobytes()


def test_two_stage_merges_and_workers_differ():
    cfg = AgentConfig(hidden=4, batch_size=2, workers=2, offline_updates=3, updates_per_round=1)
    main, workers, logs = two_stage_train(env_factory_for(), cfg, k=2, rounds=5)
    assert len(main.buffer) == sum(len(w.buffer) for w in workers) == 8
    assert workers[0].buffer.to_bytes() != workers[1].buffer.to_bytes()
    assert main.updates == workers[0].updates + 3


def test_two_stage_identical_workers_at_start():
    cfg = AgentConfig(hidden=4, batch_size=2, workers=2, offline_updates=0, updates_per_round=0)
    main, workers, _ = two_stage_train(env_factory_for(), cfg, k=2, rounds=3)
    # no updates: networks stay identical, experiences still differ
    assert workers[0].pi.params.tobytes() == workers[1].pi.params.tobytes()
    assert workers[0].buffer.to_bytes() != workers[1].buffer.to_bytes()


def test_agent_solves_one_step_bandit():
    # reward peaks at mu = 1; gamma = 0 makes Q the immediate reward
    cfg = AgentConfig(hidden=32, gamma=0.0, pi_lr=1e-2, q_lr=1e-2, batch_size=32, final_layer_init=3e-3)
    agent = DrlAgent(1, cfg, seed=0)
    s = np.array([0.5, 0.5, 1.0])
    for _ in range(1200):
        a = select_action(agent.pi, s, cfg.beta, True, 0.5, agent.rng).flat()
        agent.remember(s, a, -((a[0] - 1.0) ** 2), s)
        if agent.ready():
            ddpg_update(agent, agent.buffer, 1)
    assert abs(select_action(agent.pi, s, cfg.beta).mu[0] - 1.0) < 0.2
