"""Round-based network simulation with explicit message records.

``run_protocol`` replays one aggregation and logs every scalar that crosses
a link. ``breach_oracle`` decides from such a log which victims an
adversary could reconstruct. ``monte_carlo_breach`` estimates breach rates
at the abstraction used by the closed-form privacy results: in every chunk
round the victim's neighbors (or its links) form a fresh uniform subset.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import binomtest

from .exceptions import InvalidScenarioError
from .graph import Graph, build_graph
from .privacy import AttackScenario
from .sharing import (
    AggregationResult,
    RandomRegularTopology,
    RelabeledTopology,
    chunked_aggregate,
    consensus_aggregate,
    shamir_aggregate,
)

PROTOCOLS = ("plain", "shamir", "chunk")
MC_BATCH = 10_000
MIN_TRIALS = 1_000

LOG_DTYPE = np.dtype([
    ("round", np.int32),
    ("iteration", np.int32),
    ("sender", np.int32),
    ("receiver", np.int32),
    ("edge", np.int32),
    ("payload", np.float64),
])


@dataclass
class SimConfig:
    """One simulated protocol execution.

    ``graph`` is a :class:`Graph` or a topology name. ``topology`` chooses how
    the chunk protocol changes neighbors between rounds: ``"relabel"`` keeps
    the physical graph and reshuffles agents, ``"regenerate"`` samples a new
    random regular graph. ``adversary`` is ``None``, ``"collusion"`` (``N_L``
    colluders) or ``"eavesdropping"`` (``N_E`` tapped links).
    """

    graph: Graph | str = "expander"
    S: int = 7
    protocol: str = "chunk"
    N_C: int = 3
    eps: float | None = None
    tol: float = 1e-8
    seed: int | None = 0
    d: int = 3
    topology: str = "relabel"
    adversary: str | None = None
    N_L: int = 0
    N_E: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; choose from {PROTOCOLS}")
        if self.topology not in ("relabel", "regenerate"):
            raise ValueError(f"unknown topology mode {self.topology!r}")
        if self.S < 3:
            raise ValueError(f"need at least 3 agents, got S={self.S}")
        if self.topology == "regenerate" and (self.S * self.d) % 2:
            raise ValueError(f"no {self.d}-regular graph on {self.S} nodes; S * d must be even")
        if self.adversary is not None:
            self.scenario()

    def build_graph(self) -> Graph:
        if isinstance(self.graph, Graph):
            if self.graph.size != self.S:
                raise ValueError(f"graph has {self.graph.size} nodes, config says S={self.S}")
            return self.graph
        return build_graph(self.graph, self.S, d=self.d, seed=self.seed)

    def scenario(self, d_s: int | None = None) -> AttackScenario:
        if self.adversary is None:
            raise InvalidScenarioError("config has no adversary")
        d_s = self.d if d_s is None else d_s
        if self.adversary == "collusion":
            return AttackScenario("collusion", self.S, d_s, self.N_C, N_L=self.N_L)
        if self.adversary == "eavesdropping":
            return AttackScenario("eavesdropping", self.S, d_s, self.N_C, N_E=self.N_E,
                                  E=self.d * self.S)
        raise InvalidScenarioError(f"unknown adversary {self.adversary!r}")


class MessageLog:
    """Every scalar sent, as a structured array with :data:`LOG_DTYPE` fields.

    ``round`` is the chunk round or Shamir evaluation column, ``edge`` the id
    of the physical link. One record is written per unit of adjacency, so a
    self-loop appears with ``sender == receiver`` and counts towards the
    message total the same way it counts towards the degree.
    """

    def __init__(self):
        self._parts = []
        self._records = None

    def _append(self, block):
        self._parts.append(block)
        self._records = None

    @property
    def records(self) -> np.ndarray:
        if self._records is None:
            if self._parts:
                self._records = np.concatenate(self._parts)
            else:
                self._records = np.empty(0, dtype=LOG_DTYPE)
        return self._records

    def __len__(self) -> int:
        return int(sum(len(p) for p in self._parts))

    def __eq__(self, other) -> bool:
        return isinstance(other, MessageLog) and np.array_equal(self.records, other.records)

    def round(self, h: int) -> np.ndarray:
        rec = self.records
        return rec[rec["round"] == h]

    def neighbor_sets(self, node: int) -> list[frozenset]:
        """Receivers (other than ``node``) of ``node``'s messages, per round."""
        rec = self.records
        out = []
        for h in np.unique(rec["round"]):
            sel = rec[(rec["round"] == h) & (rec["sender"] == node) & (rec["receiver"] != node)]
            out.append(frozenset(sel["receiver"].tolist()))
        return out


class _LinkPattern:
    """Precomputed per-record sender/receiver/edge arrays for one round graph."""

    def __init__(self, g: Graph, placement):
        placement = np.asarray(placement)
        A = g.adjacency
        snd, rcv = np.nonzero(A)
        mult = A[snd, rcv]
        self.sender = np.repeat(snd, mult).astype(np.int32)
        self.receiver = np.repeat(rcv, mult).astype(np.int32)
        pu, pv = placement[self.sender], placement[self.receiver]
        lo, hi = np.minimum(pu, pv), np.maximum(pu, pv)
        S = A.shape[0]
        # physical links indexed in row-major order of the upper triangle
        phys = np.zeros((S, S), dtype=bool)
        phys[lo, hi] = True
        ids = np.cumsum(phys.ravel()).reshape(S, S) - 1
        self.edge = ids[lo, hi].astype(np.int32)

    def block(self, h: int, t: int, x) -> np.ndarray:
        out = np.empty(self.sender.shape[0], dtype=LOG_DTYPE)
        out["round"] = h
        out["iteration"] = t
        out["sender"] = self.sender
        out["receiver"] = self.receiver
        out["edge"] = self.edge
        out["payload"] = np.asarray(x)[self.sender]
        return out


def run_protocol(cfg: SimConfig, values) -> tuple[AggregationResult, MessageLog]:
    """Run the configured aggregation of ``values`` and log every message.

    The result is the one :mod:`decolearn.sharing` returns for the same seed.

    Raises
    ------
    ConsensusError
        Propagated from the underlying protocol.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (cfg.S,):
        raise ValueError(f"expected {cfg.S} scalar values, got shape {values.shape}")
    g = cfg.build_graph()
    log = MessageLog()

    if cfg.protocol == "plain":
        pat = _LinkPattern(g, np.arange(cfg.S))
        res = consensus_aggregate(values, g, eps=cfg.eps, tol=cfg.tol,
                                  observer=lambda t, x: log._append(pat.block(0, t, x)))
        return res, log

    if cfg.protocol == "shamir":
        pat = _LinkPattern(g, np.arange(cfg.S))
        res = shamir_aggregate(values, g, eps=cfg.eps, tol=cfg.tol, seed=cfg.seed,
                               observer=lambda j, t, x: log._append(pat.block(j, t, x)))
        # regroup the lockstep records by evaluation round
        rec = log.records
        order = np.lexsort((rec["iteration"], rec["round"]))
        log._parts = [rec[order]]
        log._records = None
        return res, log

    topo = RelabeledTopology(g) if cfg.topology == "relabel" else RandomRegularTopology(cfg.S, cfg.d)
    patterns = {}

    def observer(h, rg, placement, t, x):
        if h not in patterns:
            patterns[h] = _LinkPattern(rg, placement)
        log._append(patterns[h].block(h, t, x))

    res = chunked_aggregate(values, topo, cfg.N_C, eps=cfg.eps, tol=cfg.tol, seed=cfg.seed,
                            observer=observer)
    return res, log


@dataclass(frozen=True)
class Adversary:
    """Honest-but-curious observers: a set of nodes and/or tapped links."""

    nodes: frozenset = field(default_factory=frozenset)
    edges: frozenset = field(default_factory=frozenset)

    @classmethod
    def node(cls, j: int) -> "Adversary":
        return cls(nodes=frozenset([int(j)]))


def breach_oracle(log: MessageLog, adversary: Adversary, S: int | None = None) -> np.ndarray:
    """Victims whose chunk the adversary received directly in every round.

    A victim ``s`` is breached when, in each chunk round, some message sent by
    ``s`` reached an adversary node other than ``s`` or crossed a tapped link.
    """
    rec = log.records
    rec = rec[rec["sender"] != rec["receiver"]]
    if S is None:
        S = int(max(rec["sender"].max(initial=-1), rec["receiver"].max(initial=-1))) + 1
    rounds = np.unique(log.records["round"])
    if rounds.size == 0:
        return np.zeros(S, dtype=bool)
    nodes = np.array(sorted(adversary.nodes), dtype=np.int64)
    taps = np.array(sorted(adversary.edges), dtype=np.int64)
    seen = np.isin(rec["edge"], taps)
    breached = np.ones(S, dtype=bool)
    for h in rounds:
        in_round = rec["round"] == h
        hit = np.zeros(S, dtype=bool)
        by_node = in_round & np.isin(rec["receiver"], nodes)
        hit[np.unique(rec["sender"][by_node])] = True
        by_tap = in_round & seen
        hit[np.unique(rec["sender"][by_tap])] = True
        breached &= hit
    # adversary nodes are not victims
    for s in adversary.nodes:
        if s < S:
            breached[s] = False
    return breached


# --------------------------------------------------------------------------
# Monte Carlo
# --------------------------------------------------------------------------


@dataclass
class MonteCarloReport:
    scenario: dict
    trials: int
    empirical_rate: float
    exact: float | None
    bound: float
    ci_low: float
    ci_high: float
    breaches: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("breaches")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def within_sigma(self, k: float = 3.0) -> bool:
        """Whether the rate lies within ``k`` binomial standard errors of ``exact``."""
        p = self.exact
        sd = np.sqrt(p * (1 - p) / self.trials)
        return abs(self.empirical_rate - p) <= k * sd


def _random_subsets(rng, n_trials, n_rounds, pool, size):
    """Uniform ``size``-subsets of ``range(pool)``, one per trial and round."""
    keys = rng.random((n_trials, n_rounds, pool))
    return np.argpartition(keys, size - 1, axis=-1)[..., :size]


def _batch_breaches(sc: AttackScenario, n: int, rng) -> int:
    if sc.kind == "collusion":
        others = sc.S - 1
        perm = np.argsort(rng.random((n, others)), axis=1)
        colluder = np.zeros((n, others), dtype=bool)
        np.put_along_axis(colluder, perm[:, :sc.N_L], True, axis=1)
        nbr = _random_subsets(rng, n, sc.N_C, others, sc.d_s)
        hit = np.take_along_axis(colluder[:, None, :], nbr, axis=2).any(axis=2)
        return int(hit.all(axis=1).sum())
    if sc.kind == "eavesdropping":
        if sc.N_E == 0:
            return 0
        perm = np.argsort(rng.random((n, sc.E)), axis=1)
        tapped = np.zeros((n, sc.E), dtype=bool)
        np.put_along_axis(tapped, perm[:, :sc.N_E], True, axis=1)
        links = _random_subsets(rng, n, sc.N_C, sc.E, sc.d_s)
        hit = np.take_along_axis(tapped[:, None, :], links, axis=2).any(axis=2)
        return int(hit.all(axis=1).sum())
    # independent: some single peer neighbors the victim in every round
    others = sc.S - 1
    nbr = _random_subsets(rng, n, sc.N_C, others, sc.d_s)
    member = np.zeros((n, sc.N_C, others), dtype=bool)
    np.put_along_axis(member, nbr, True, axis=2)
    return int(member.all(axis=1).any(axis=1).sum())


def monte_carlo_breach(scenario: AttackScenario, trials: int = 100_000, seed=None) -> MonteCarloReport:
    """Empirical breach rate of a fixed victim with a 95% binomial interval.

    Trials run in batches of :data:`MC_BATCH`, each with its own stream
    spawned from ``seed``, so the result does not depend on how batches are
    scheduled.
    """
    if not isinstance(scenario, AttackScenario):
        raise InvalidScenarioError("scenario must be an AttackScenario")
    if trials < MIN_TRIALS:
        raise InvalidScenarioError(f"need at least {MIN_TRIALS} trials, got {trials}")
    sizes = [MC_BATCH] * (trials // MC_BATCH)
    if trials % MC_BATCH:
        sizes.append(trials % MC_BATCH)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = root.spawn(len(sizes))
    hits = sum(_batch_breaches(scenario, n, np.random.default_rng(ss))
               for n, ss in zip(sizes, streams))
    ci = binomtest(hits, trials).proportion_ci(confidence_level=0.95, method="exact")
    rep = scenario.report()
    return MonteCarloReport(
        scenario=asdict(scenario),
        trials=int(trials),
        empirical_rate=hits / trials,
        exact=rep.exact,
        bound=rep.bound,
        ci_low=float(ci.low),
        ci_high=float(ci.high),
        breaches=int(hits),
    )
