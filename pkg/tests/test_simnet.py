import json

import numpy as np
import pytest
from scipy.stats import chi2_contingency, chisquare

from decolearn.exceptions import InvalidScenarioError
from decolearn.graph import build_graph
from decolearn.privacy import AttackScenario
from decolearn.sharing import RelabeledTopology, chunked_aggregate, consensus_aggregate
from decolearn.simnet import (
    Adversary,
    MessageLog,
    SimConfig,
    breach_oracle,
    monte_carlo_breach,
    run_protocol,
)


@pytest.fixture
def values(rng):
    return rng.uniform(1.0, 2.0, size=7)


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(protocol="gossip")
    with pytest.raises(ValueError):
        SimConfig(S=2)
    with pytest.raises(ValueError):
        SimConfig(S=7, d=3, topology="regenerate")
    with pytest.raises(InvalidScenarioError):
        SimConfig(adversary="collusion", N_L=0)
    sc = SimConfig(S=10, adversary="eavesdropping", N_E=6, N_C=2).scenario()
    assert sc.E == 30 and sc.N_E == 6


# ---------------------------------------------------------------- protocol runs


def test_plain_first_payload_is_raw_value(values):
    _, log = run_protocol(SimConfig(protocol="plain", S=7), values)
    first = log.records[log.records["iteration"] == 1]
    assert np.array_equal(first["payload"], values[first["sender"]])


def test_chunks_hide_raw_values():
    for seed in range(50):
        vals = np.random.default_rng(seed).normal(size=7)
        _, log = run_protocol(SimConfig(protocol="chunk", S=7, N_C=2, seed=seed), vals)
        rec = log.records
        first = rec[rec["iteration"] == 1]
        assert not np.any(np.isin(first["payload"], vals))


def test_plain_message_count(values):
    g = build_graph("expander", 7)
    res, log = run_protocol(SimConfig(protocol="plain", S=7), values)
    E = int(g.adjacency.sum())
    assert len(log) == res.total_iterations * E == res.scalar_messages


def test_shamir_message_count(values):
    g = build_graph("expander", 7)
    res, log = run_protocol(SimConfig(protocol="shamir", S=7, seed=2), values)
    E = int(g.adjacency.sum())
    t = res.round_iterations[0]
    assert all(n == t for n in res.round_iterations)
    assert len(log) == 7 * t * E == res.scalar_messages
    assert list(np.unique(log.records["round"])) == list(range(7))


def test_chunk_message_count(values):
    g = build_graph("expander", 7)
    res, log = run_protocol(SimConfig(protocol="chunk", S=7, N_C=3, seed=2), values)
    assert len(log) == sum(res.round_iterations) * int(g.adjacency.sum())
    for h, t in enumerate(res.round_iterations):
        assert np.unique(log.round(h)["iteration"]).size == t


@pytest.mark.parametrize("protocol", ["plain", "shamir", "chunk"])
def test_run_is_deterministic(values, protocol):
    cfg = SimConfig(protocol=protocol, S=7, seed=4)
    r1, l1 = run_protocol(cfg, values)
    r2, l2 = run_protocol(cfg, values)
    assert l1 == l2
    assert np.array_equal(r1.estimates, r2.estimates)


def test_seed_changes_chunks(values):
    _, a = run_protocol(SimConfig(S=7, seed=1), values)
    _, b = run_protocol(SimConfig(S=7, seed=2), values)
    assert a != b


def test_result_equals_sharing_module(values):
    g = build_graph("expander", 7)
    res, _ = run_protocol(SimConfig(S=7, N_C=3, seed=8, tol=1e-9), values)
    ref = chunked_aggregate(values, RelabeledTopology(g), 3, tol=1e-9, seed=8)
    assert np.array_equal(res.estimates, ref.estimates)
    plain, _ = run_protocol(SimConfig(protocol="plain", S=7, tol=1e-9), values)
    assert np.array_equal(plain.estimates, consensus_aggregate(values, g, tol=1e-9).estimates)


def test_plain_messages_follow_graph(values):
    g = build_graph("expander", 7)
    _, log = run_protocol(SimConfig(protocol="plain", S=7), values)
    rec = log.records
    for it in np.unique(rec["iteration"]):
        sel = rec[rec["iteration"] == it]
        A = np.zeros((7, 7), dtype=int)
        np.add.at(A, (sel["sender"], sel["receiver"]), 1)
        assert np.array_equal(A, g.adjacency)


@pytest.mark.parametrize("topology,S", [("relabel", 7), ("regenerate", 8)])
def test_chunk_messages_follow_round_graph(rng, topology, S):
    g = build_graph("expander", S)
    n_links = len(g.edges())
    cfg = SimConfig(S=S, N_C=4, seed=3, topology=topology)
    _, log = run_protocol(cfg, rng.normal(size=S))
    for h in range(4):
        rec = log.round(h)
        A = None
        for it in np.unique(rec["iteration"]):
            sel = rec[rec["iteration"] == it]
            B = np.zeros((S, S), dtype=int)
            np.add.at(B, (sel["sender"], sel["receiver"]), 1)
            if A is None:
                A = B
            assert np.array_equal(A, B)
        assert np.array_equal(A, A.T)
        assert np.all(A.sum(axis=1) == 3)
        # each link id names exactly one unordered agent pair
        pairs = {}
        for s, r, e in zip(rec["sender"], rec["receiver"], rec["edge"]):
            pairs.setdefault(int(e), set()).add(frozenset((int(s), int(r))))
        assert all(len(p) == 1 for p in pairs.values())
        if topology == "relabel":
            assert len(pairs) == n_links


def test_shuffle_independence():
    """Neighbor sets of a fixed agent in consecutive rounds are independent."""
    table = np.zeros((2, 2), dtype=int)
    freq = np.zeros(6, dtype=int)
    vals = np.ones(7)
    for seed in range(400):
        _, log = run_protocol(SimConfig(S=7, N_C=2, seed=seed, tol=1e-3), vals)
        n1, n2 = log.neighbor_sets(0)
        table[int(1 in n1), int(1 in n2)] += 1
        for j in n1:
            freq[j - 1] += 1
    assert chi2_contingency(table).pvalue > 1e-3
    assert chisquare(freq).pvalue > 1e-3


# ---------------------------------------------------------------- breach oracle


def test_single_chunk_neighbor_breaches(values):
    _, log = run_protocol(SimConfig(S=7, N_C=1, seed=0), values)
    for s, nbrs in enumerate(log.neighbor_sets(s) for s in range(7)):
        for j in nbrs[0]:
            assert breach_oracle(log, Adversary.node(j), S=7)[s]


def test_everyone_else_breaches(values):
    _, log = run_protocol(SimConfig(S=7, N_C=5, seed=0), values)
    for s in range(7):
        adv = Adversary(nodes=frozenset(set(range(7)) - {s}))
        flags = breach_oracle(log, adv, S=7)
        assert flags[s] and flags.sum() == 1


def test_non_neighbor_never_breaches(values):
    g = build_graph("expander", 7)
    _, log = run_protocol(SimConfig(protocol="plain", S=7), values)
    for s in range(7):
        for j in range(7):
            if j == s:
                continue
            assert breach_oracle(log, Adversary.node(j), S=7)[s] == bool(g.adjacency[s, j])


def test_breach_requires_every_round(values):
    _, log = run_protocol(SimConfig(S=7, N_C=3, seed=5), values)
    sets = log.neighbor_sets(0)
    for j in range(1, 7):
        expected = all(j in n for n in sets)
        assert breach_oracle(log, Adversary.node(j), S=7)[0] == expected


def test_tapped_link_breaches(values):
    _, log = run_protocol(SimConfig(protocol="plain", S=7), values)
    rec = log.records
    sel = rec[(rec["sender"] == 2) & (rec["receiver"] != 2)][0]
    flags = breach_oracle(log, Adversary(edges=frozenset([int(sel["edge"])])), S=7)
    assert flags[2] and flags[sel["receiver"]]
    assert flags.sum() == 2


def test_empty_log():
    assert not breach_oracle(MessageLog(), Adversary.node(0), S=4).any()


# ---------------------------------------------------------------- Monte Carlo


def test_collusion_monte_carlo_example():
    sc = AttackScenario("collusion", 10, 3, 2, N_L=2)
    rep = monte_carlo_breach(sc, 100_000, seed=0)
    assert rep.ci_low <= rep.exact <= rep.ci_high
    assert rep.within_sigma(3)


def test_eavesdropping_monte_carlo_example():
    sc = AttackScenario("eavesdropping", 10, 3, 2, N_E=6, E=30)
    rep = monte_carlo_breach(sc, 100_000, seed=1)
    assert rep.ci_low <= rep.exact <= rep.ci_high


def test_all_colluding_always_breaches():
    rep = monte_carlo_breach(AttackScenario("collusion", 10, 3, 4, N_L=9), 2000, seed=0)
    assert rep.empirical_rate == 1.0


def test_no_taps_never_breaches():
    rep = monte_carlo_breach(AttackScenario("eavesdropping", 10, 3, 2, N_E=0, E=30), 2000, seed=0)
    assert rep.empirical_rate == 0.0 and rep.exact == 0.0


def test_independent_rate_below_bound():
    sc = AttackScenario("independent", 20, 3, 2)
    rep = monte_carlo_breach(sc, 50_000, seed=2)
    assert rep.ci_low <= rep.bound


def test_monte_carlo_deterministic_and_json():
    sc = AttackScenario("collusion", 12, 3, 2, N_L=3)
    a = monte_carlo_breach(sc, 15_000, seed=9)
    b = monte_carlo_breach(sc, 15_000, seed=9)
    assert a == b
    d = json.loads(a.to_json())
    assert set(d) == {"scenario", "trials", "empirical_rate", "exact", "bound",
                      "ci_low", "ci_high"}
    assert d["trials"] == 15_000


def test_monte_carlo_needs_enough_trials():
    with pytest.raises(InvalidScenarioError):
        monte_carlo_breach(AttackScenario("collusion", 10, 3, 2, N_L=2), 999)
