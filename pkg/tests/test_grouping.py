import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decnas import grouping
from conftest import brute_force_mean_distance, make_federation, random_skew_federation


def test_manhattan_examples():
    assert grouping.manhattan_distance([0.3, 0.7], [0.3, 0.7]) == 0
    assert grouping.manhattan_distance([1, 0], [0, 1]) == 2
    assert grouping.manhattan_distance([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        grouping.manhattan_distance([1, 0], [1, 0, 0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_manhattan_range(a, b):
    a = np.array(a) + 1e-3
    b = np.array(b) + 1e-3
    d = grouping.manhattan_distance(a / a.sum(), b / b.sum())
    assert 0 <= d <= 2 + 1e-12


def test_sizes_4321_split_5_5():
    fed = make_federation([[0] * 4, [0] * 3, [0] * 2, [0] * 1], class_count=2)
    # sizes below 5 are fine for partitioning; only sharding enforces the minimum
    p = grouping.greedy_partition(fed, 2, 1.1)
    assert sorted(p.sizes) == [5, 5]
    assert sorted(sorted(g.client_ids) for g in p.groups) == [[0, 3], [1, 2]]
    assert not p.balance_violated


def test_single_group_distance_zero():
    rng = np.random.default_rng(0)
    fed = random_skew_federation(rng, 12)
    p = grouping.greedy_partition(fed, 1, 1.1)
    assert len(p.groups) == 1 and p.mean_distance == pytest.approx(0, abs=1e-12)


def test_one_hot_clients_two_groups():
    fed = make_federation([[c] * 10 for c in range(8)])
    p = grouping.greedy_partition(fed, 2, 1.1)
    for g in p.groups:
        assert sorted(g.aggregate_v.tolist()) == [0.0] * 4 + [0.25] * 4
    assert p.mean_distance == pytest.approx(brute_force_mean_distance(fed, 2, 1.1))
    assert p.mean_distance == pytest.approx(1.0)


def test_k_larger_than_clients():
    fed = make_federation([[0] * 5, [1] * 5])
    with pytest.raises(ValueError):
        grouping.greedy_partition(fed, 3)
    with pytest.raises(ValueError):
        grouping.greedy_partition(fed, 0)


def test_infeasible_r_sets_flag():
    fed = make_federation([[0] * 100, [1] * 5, [1] * 5])
    p = grouping.greedy_partition(fed, 2, 1.1)
    assert p.balance_violated
    assert sorted(cid for g in p.groups for cid in g.client_ids) == [0, 1, 2]


@pytest.mark.parametrize("seed", range(10))
def test_partition_invariants(seed):
    rng = np.random.default_rng(seed)
    fed = random_skew_federation(rng, 60)
    p = grouping.greedy_partition(fed, 6, 1.1)
    ids = sorted(cid for g in p.groups for cid in g.client_ids)
    assert ids == sorted(c.client_id for c in fed.clients)
    by_id = fed.by_id()
    dists = []
    for g in p.groups:
        members = [by_id[c] for c in g.client_ids]
        assert g.d == sum(m.size for m in members)
        want = sum(m.distribution * m.size for m in members) / g.d
        np.testing.assert_allclose(g.aggregate_v, want, atol=1e-12)
        global_v = sum(c.distribution * c.size for c in fed.clients) / sum(c.size for c in fed.clients)
        dists.append(grouping.manhattan_distance(g.aggregate_v, global_v))
    assert p.mean_distance == pytest.approx(np.mean(dists))
    assert not p.balance_violated
    assert max(p.sizes) <= 1.1 * min(p.sizes)
    # repeatable
    again = grouping.greedy_partition(fed, 6, 1.1)
    assert [g.client_ids for g in again.groups] == [g.client_ids for g in p.groups]


def test_greedy_within_brute_force_bound():
    rng = np.random.default_rng(0)
    ratios = []
    for _ in range(100):
        n = int(rng.integers(3, 11))
        k = min(int(rng.integers(1, 4)), n)
        fed = random_skew_federation(rng, n)
        best = brute_force_mean_distance(fed, k, 1.1)
        if best is None:
            continue
        p = grouping.greedy_partition(fed, k, 1.1)
        assert not p.balance_violated
        ratios.append((p.mean_distance + 1e-12) / (best + 1e-12))
    assert len(ratios) > 50
    assert max(ratios) <= 1.2


def test_random_partition_is_balanced_ish():
    rng = np.random.default_rng(1)
    fed = random_skew_federation(rng, 100)
    p = grouping.random_partition(fed, 10, 1.1, np.random.default_rng(3))
    assert sum(len(g.client_ids) for g in p.groups) == 100
    assert max(p.sizes) - min(p.sizes) < 40


# ------------------------------------------------------------------ scheduling


def test_schedule_bijection_when_equal():
    plan = grouping.Scheduler([0, 1, 2], np.random.default_rng(0)).schedule([0, 1, 2])
    assert sorted(g for _, g, _ in plan) == [0, 1, 2]
    assert {b for _, _, b in plan} == {0}


def test_schedule_five_on_two():
    plan = grouping.Scheduler([0, 1], np.random.default_rng(4)).schedule(list(range(5)))
    assert [c for c, _, _ in plan] == list(range(5))
    assert max(b for _, _, b in plan) == 2
    # FIFO: groups alternate, each serving its next batch
    per_group = {}
    for _, g, b in plan:
        per_group.setdefault(g, []).append(b)
    assert sorted(map(len, per_group.values())) == [2, 3]
    assert all(bs == list(range(len(bs))) for bs in per_group.values())


def test_schedule_one_candidate_one_busy_group():
    plan = grouping.Scheduler(list(range(7)), np.random.default_rng(0)).schedule([9])
    assert len(plan) == 1 and plan[0][0] == 9


def test_schedule_seeded():
    a = grouping.Scheduler(list(range(5)), np.random.default_rng(11)).schedule(list(range(4)))
    b = grouping.Scheduler(list(range(5)), np.random.default_rng(11)).schedule(list(range(4)))
    assert a == b
    starts = {tuple(grouping.Scheduler(list(range(5)), np.random.default_rng(s)).schedule([0])) for s in range(20)}
    assert len(starts) > 1
    with pytest.raises(ValueError):
        grouping.Scheduler([0], np.random.default_rng(0)).schedule([])
