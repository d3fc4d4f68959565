import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feddrl.data import Dataset, PartitionSpec, make_synthetic, partition
from feddrl.fl import (
    ClientReport,
    FedAvgAggregator,
    FederatedRun,
    RoundConfig,
    aggregate_weighted,
    check_impacts,
    evaluate_top1,
    fedavg_impacts,
)
from feddrl.nn import Dense, Network, SgdConfig, build_classifier, cross_entropy_loss


def rep(cid, params, n=1, lb=1.0, la=0.5):
    return ClientReport(cid, lb, la, n, np.asarray(params, dtype=float))


@pytest.mark.parametrize(
    "alpha,params,expected",
    [([1, 0], [[5], [9]], [5]), ([0.5, 0.5], [[2], [4]], [3]), ([0.25, 0.75], [[0], [4]], [3])],
)
def test_aggregate_weighted_examples(alpha, params, expected):
    reports = [rep(i, p) for i, p in enumerate(params)]
    np.testing.assert_allclose(aggregate_weighted(reports, alpha), expected, atol=1e-15)


def test_aggregate_rejects_length_mismatch():
    with pytest.raises(ValueError):
        aggregate_weighted([rep(0, [1.0]), rep(1, [1.0, 2.0])], [0.5, 0.5])
    with pytest.raises(ValueError):
        aggregate_weighted([rep(0, [1.0])], [0.5, 0.5])


@pytest.mark.parametrize("n,expected", [([1, 1], [0.5, 0.5]), ([1, 3], [0.25, 0.75])])
def test_fedavg_impacts_examples(n, expected):
    reports = [rep(i, [0.0], n=k) for i, k in enumerate(n)]
    np.testing.assert_allclose(fedavg_impacts(reports), expected)


def test_fedavg_uniform_on_ce_partition():
    y = np.arange(6000) % 10
    m = partition(y, PartitionSpec("CE", 10, delta=0.6))
    counts = m.counts()
    reports = [rep(i, [0.0], n=int(c)) for i, c in enumerate(counts)]
    alpha = fedavg_impacts(reports)
    brute = [c / sum(counts) for c in counts]
    assert max(abs(a - b) for a, b in zip(alpha, brute)) < 1e-12
    assert np.ptp(alpha) < 1e-9


def test_client_report_invariants():
    with pytest.raises(ValueError):
        rep(0, [0.0], n=0)
    with pytest.raises(ValueError):
        rep(0, [0.0], lb=float("nan"))
    with pytest.raises(ValueError):
        rep(0, [0.0], la=-1.0)
    r = rep(0, [1.0])
    with pytest.raises(ValueError):
        r.params[0] = 2.0


@pytest.mark.parametrize("alpha", [[0.5, 0.6], [-0.1, 1.1], [1.0, np.nan]])
def test_check_impacts_rejects(alpha):
    with pytest.raises(ValueError):
        check_impacts(alpha)


def test_round_config_bounds():
    assert RoundConfig(10).participants_per_round == 10
    assert RoundConfig(10).max_rounds == 1000
    with pytest.raises(ValueError):
        RoundConfig(5, participants_per_round=6)
    with pytest.raises(ValueError):
        RoundConfig(5, 5, aggregator="median")


def test_fedprox_term_only_for_fedprox():
    assert RoundConfig(2, 2, aggregator="fedprox").local_sgd().proximal_mu == 0.01
    assert RoundConfig(2, 2, aggregator="fedavg").local_sgd().proximal_mu == 0.0


# --- top-1 ----------------------------------------------------------------------------


def test_top1_constant_class_zero():
    net = Network([Dense(3, 2)], (3,))
    net.set_params(np.array([0, 0, 0, 0, 0, 0, 1.0, 0.0]))
    test = Dataset(np.random.default_rng(0).normal(size=(20, 3)), np.zeros(20), 2, "t")
    assert evaluate_top1(net, None, test) == 1.0


def test_top1_chance_level():
    train, test = make_synthetic(classes=10, dims=8, samples=10, test_samples=20000, seed=3)
    net = build_classifier("mlp", (8,), 10, hidden=16, rng=4)
    assert abs(evaluate_top1(net, None, test) - 0.1) < 0.02


def test_top1_matches_recount_oracle():
    train, test = make_synthetic(classes=4, dims=5, samples=400, test_samples=300, seed=2)
    net = build_classifier("mlp", (5,), 4, hidden=8, rng=1)
    from feddrl.nn import train_epochs

    train_epochs(net, train.x, train.y, SgdConfig(epochs=2), np.random.default_rng(0))
    hits = 0
    for x, y in zip(test.x, test.y):
        logits = net.forward(x)
        best = max(range(4), key=lambda c: logits[c])
        hits += int(best == y)
    assert evaluate_top1(net, None, test) == hits / len(test)


# --- round engine ------------------------------------------------------------------------


def small_run(n_clients=4, k=None, aggregator="fedavg", seed=0, rounds=0, method="Equal", **kw):
    train, test = make_synthetic(classes=3, dims=4, samples=240, test_samples=60, seed=1)
    m = partition(train.y, PartitionSpec(method, n_clients, seed=0))
    model = build_classifier("mlp", (4,), 3, hidden=6, rng=seed)
    cfg = RoundConfig(n_clients, k or n_clients, rounds, SgdConfig(epochs=1), aggregator, seed, **kw)
    return FederatedRun(model, train, m.assignments, test, cfg)


def test_single_client_round_returns_its_params():
    run = small_run(1)
    new, reports = run.run_round()
    assert new.tobytes() == reports[0].params.tobytes()


def test_equal_counts_average_is_mean():
    run = small_run(4)
    new, reports = run.run_round()
    assert len({r.n_samples for r in reports}) == 1
    np.testing.assert_allclose(new, np.mean([r.params for r in reports], axis=0), atol=1e-14)


def test_next_round_loss_before_is_reevaluated_aggregate():
    run = small_run(2)
    new, _ = run.run_round()
    _, reports = run.run_round()
    oracle_net = run.model.clone()
    oracle_net.set_params(new)
    for r in reports:
        idx = run.shards[r.client_id]
        losses = [cross_entropy_loss(oracle_net.forward(run.train_set.x[i]), int(run.train_set.y[i])) for i in idx]
        assert abs(r.loss_before - sum(losses) / len(losses)) < 1e-9


def test_sampling_without_replacement():
    run = small_run(6, k=3)
    for _ in range(5):
        chosen = run.sample_clients()
        assert len(set(chosen.tolist())) == 3


def test_round_determinism_and_threads():
    a = small_run(4, k=2, seed=5)
    b = small_run(4, k=2, seed=5, threads=2)
    la, lb = a.run(3), b.run(3)
    assert [r.clients for r in la.records] == [r.clients for r in lb.records]
    assert a.global_params.tobytes() == b.global_params.tobytes()


def test_fedprox_changes_client_update():
    a = small_run(2, aggregator="fedavg")
    b = small_run(2, aggregator="fedprox", proximal_mu=1.0)
    assert a.run_round()[0].tobytes() != b.run_round()[0].tobytes()


def test_run_log_records_rounds_from_one():
    run = small_run(3)
    logged = run.run(4)
    assert logged.rounds == [1, 2, 3, 4]
    assert all(abs(r.impacts.sum() - 1) < 1e-12 for r in logged.records)


def test_empty_shard_rejected():
    train, test = make_synthetic(classes=3, dims=4, samples=30, test_samples=6)
    model = build_classifier("mlp", (4,), 3, hidden=4, rng=0)
    with pytest.raises(ValueError):
        FederatedRun(model, train, [np.arange(5), np.array([], dtype=int)], test, RoundConfig(2, 2))


@settings(max_examples=30, deadline=None)
@given(
    weights=st.lists(st.floats(0.01, 10), min_size=1, max_size=6),
    width=st.integers(1, 5),
    seed=st.integers(0, 1000),
)
def test_aggregate_matches_loop_oracle(weights, width, seed):
    rng = np.random.default_rng(seed)
    alpha = np.array(weights) / sum(weights)
    params = rng.normal(size=(len(weights), width))
    reports = [rep(i, p) for i, p in enumerate(params)]
    got = aggregate_weighted(reports, alpha)
    for j in range(width):
        assert abs(got[j] - sum(a * p[j] for a, p in zip(alpha, params))) < 1e-9
