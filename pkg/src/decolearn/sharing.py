"""Privacy-preserving aggregation on top of dynamic consensus.

Two ways to compute ``sum_a xi_a`` without sending raw values:

* Shamir sharing: every agent hides its value as the intercept of a random
  polynomial of degree ``S - 1``, the network runs one consensus per
  evaluation point ``n = 1..S`` and interpolates the summed polynomial at 0.
* Random chunking: every agent splits its value into ``N_C`` additive chunks
  and the network aggregates one chunk per round over a freshly relabeled
  topology.

Real-valued Shamir polynomials evaluated at ``1..S`` reach magnitudes around
``B * S**(S-1)`` while the intercept is of order one, so no floating-point
pipeline can recover it past ``S ~ 7``. The Shamir rounds therefore run in
exact integer arithmetic on a shared iteration clock. Because the consensus
map is linear and the interpolation weights reproduce each agent's own
intercept exactly, the recovered sum then carries exactly the error of plain
consensus on the raw values after the same number of rounds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .consensus import default_max_iters, run_consensus
from .exceptions import ConsensusError, NumericOverflowError, StepSizeError
from .graph import Graph, build_random_regular, default_eps, transition_matrix

MAX_INTERPOLATION_POINTS = 64
CHUNK_GRID_BITS = 30


@dataclass
class AggregationResult:
    """Network sum recovered by one of the aggregation protocols.

    ``estimates`` holds the sum as known by every agent; ``value`` is the one
    held by agent 0, which is what the learning loop adopts.
    """

    method: str
    estimates: np.ndarray
    rounds: int
    round_iterations: list[int]
    edges: int

    @property
    def value(self):
        return self.estimates[0]

    @property
    def total_iterations(self) -> int:
        return int(sum(self.round_iterations))

    @property
    def scalar_messages(self) -> int:
        """Scalars sent over links: one per edge endpoint per round-iteration."""
        return self.total_iterations * self.edges


# --------------------------------------------------------------------------
# Shamir sharing
# --------------------------------------------------------------------------


@dataclass
class ShamirShareSet:
    """Per-agent polynomial coefficients; column 0 is the secret."""

    coefficients: np.ndarray  # (S, S)

    @property
    def size(self) -> int:
        return self.coefficients.shape[0]

    def exact_evaluations(self) -> list[list[Fraction]]:
        """``g_a(n)`` for ``n = 1..S`` by Horner's rule in exact arithmetic."""
        S = self.size
        out = []
        for row in self.coefficients:
            coef = [Fraction(float(c)) for c in row]
            vals = []
            for n in range(1, S + 1):
                acc = Fraction(0)
                for c in reversed(coef):
                    acc = acc * n + c
                vals.append(acc)
            out.append(vals)
        return out

    @property
    def evaluations(self) -> np.ndarray:
        """Rounded float view of :meth:`exact_evaluations`."""
        return np.array([[float(v) for v in row] for row in self.exact_evaluations()])

    def intercepts(self) -> np.ndarray:
        return self.coefficients[:, 0].copy()


def shamir_shares(values, coeff_range: float | None = None, seed=None) -> ShamirShareSet:
    """Draw the random polynomials hiding ``values``.

    Coefficients of ``n, n**2, ..., n**(S-1)`` are uniform on
    ``[-coeff_range, coeff_range]``; the default range is ``10 * max|xi|``.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 1:
        raise ValueError("values must be one-dimensional")
    S = values.shape[0]
    if S < 2:
        raise ValueError(f"need at least two agents, got {S}")
    if coeff_range is None:
        coeff_range = 10.0 * float(np.max(np.abs(values))) if S else 0.0
    if coeff_range < 0:
        raise ValueError("coeff_range must be nonnegative")
    rng = np.random.default_rng(seed)
    coef = np.empty((S, S))
    coef[:, 0] = values
    coef[:, 1:] = rng.uniform(-coeff_range, coeff_range, size=(S, S - 1))
    return ShamirShareSet(coef)


def lagrange_weights(S: int) -> tuple[np.ndarray, np.ndarray]:
    """Signs and log-magnitudes of ``prod_{m != l} m / (m - l)``, ``l = 1..S``.

    The product equals ``(-1)**(l-1) * C(S, l)``, so the log-magnitude is a
    sum of ``lgamma`` terms and never overflows.
    """
    _check_points(S)
    l = np.arange(1, S + 1)
    signs = np.where(l % 2 == 1, 1.0, -1.0)
    logmag = np.array(
        [math.lgamma(S + 1) - math.lgamma(k + 1) - math.lgamma(S - k + 1) for k in l]
    )
    return signs, logmag


def _integer_weights(S: int) -> list[int]:
    return [(-1) ** (l - 1) * math.comb(S, l) for l in range(1, S + 1)]


def _check_points(S: int) -> None:
    if S < 1:
        raise ValueError("need at least one evaluation point")
    if S > MAX_INTERPOLATION_POINTS:
        raise NumericOverflowError(
            f"interpolation through S={S} points refused (limit {MAX_INTERPOLATION_POINTS})"
        )


def lagrange_intercept(aggregates) -> float:
    """Value at 0 of the polynomial through ``(l, aggregates[l-1])``, ``l = 1..S``.

    The weighted sum is formed exactly from the float inputs and rounded
    once, so the alternating binomial weights cause no cancellation error.
    """
    vals = list(aggregates)
    S = len(vals)
    _check_points(S)
    if not all(math.isfinite(float(v)) for v in vals):
        raise NumericOverflowError(f"non-finite aggregate in interpolation with S={S}")
    exact = sum(w * Fraction(v) for w, v in zip(_integer_weights(S), vals))
    try:
        return float(exact)
    except OverflowError as exc:
        raise NumericOverflowError(f"intercept overflows float for S={S}") from exc


class _ExactConsensus:
    """Integer-scaled consensus ``x <- W x`` with ``W = I - (p/q) L``.

    States are held as Python integers with an implicit common denominator
    ``den`` that picks up a factor ``q`` every round.
    """

    def __init__(self, graph: Graph, eps: Fraction):
        self.S = graph.size
        self.p, self.q = eps.numerator, eps.denominator
        adj = graph.adjacency
        lap_diag = graph.degrees - np.diag(adj)
        self.center = [self.q - self.p * int(v) for v in lap_diag]
        off = adj - np.diag(np.diag(adj))
        width = max(1, int((off > 0).sum(axis=1).max()))
        self.nbr = np.zeros((self.S, width), dtype=np.int64)
        self.wts = np.zeros((self.S, width), dtype=object)
        for s in range(self.S):
            js = np.nonzero(off[s])[0]
            self.nbr[s, : len(js)] = js
            self.wts[s, : len(js)] = [self.p * int(off[s, j]) for j in js]
        self.center = np.array(self.center, dtype=object)

    def step(self, X):
        out = X * self.center[:, None]
        for k in range(self.nbr.shape[1]):
            out = out + X[self.nbr[:, k]] * self.wts[:, k][:, None]
        return out


def _dyadic_scale(values) -> int:
    """Smallest ``K`` with every value an integer multiple of ``2**-K``."""
    K = 0
    for v in values:
        den = Fraction(v).denominator
        K = max(K, den.bit_length() - 1)
    return K


def _exact_pending(X, totals, tol: Fraction, den: int):
    """Index of the first column that has not met ``tol``, or ``None``."""
    S = X.shape[0]
    a, b = tol.numerator, tol.denominator
    for n in range(X.shape[1]):
        col = X[:, n]
        T = totals[n]
        sq = sum(int(v) * int(v) for v in col)
        if T == 0:
            # absolute fallback: ||x|| <= tol with x = col / den
            if b * b * sq > a * a * den * den:
                return n
            continue
        if b * b * (S * sq - T * T) > a * a * T * T:
            return n
        if b * max(abs(S * int(v) - T) for v in col) > a * abs(T):
            return n
    return None


def shamir_aggregate(
    values,
    graph: Graph,
    eps: float | None = None,
    tol: float = 1e-8,
    coeff_range: float | None = None,
    seed=None,
    max_iters: int | None = None,
    observer=None,
) -> AggregationResult:
    """Sum of ``values`` through Shamir-shared consensus.

    ``values`` may be ``(S,)`` or ``(S, n)``; each column gets its own
    polynomials. All ``S * n`` evaluation rounds advance on one clock until
    every one of them meets ``tol``. ``observer(n, t, x)`` receives the float
    view of what agents transmit in evaluation round ``n`` at iteration ``t``.
    """
    vals = np.asarray(values, dtype=float)
    single = vals.ndim == 1
    if single:
        vals = vals[:, None]
    S, ncol = vals.shape
    if S != graph.size:
        raise ValueError(f"{S} values for a graph with {graph.size} nodes")
    _check_points(S)
    eps_f = default_eps(graph) if eps is None else float(eps)
    tm = transition_matrix(graph, eps_f)
    eps_q = Fraction(eps_f).limit_denominator(1 << 20)
    if max_iters is None:
        max_iters = default_max_iters(tm, tol)

    rng = np.random.default_rng(seed)
    shares = []
    for c in range(ncol):
        shares.append(shamir_shares(vals[:, c], coeff_range, seed=rng))
    evals = [sh.exact_evaluations() for sh in shares]  # [col][agent][n]
    flat = [evals[c][a][n] for c in range(ncol) for a in range(S) for n in range(S)]
    K = max((f.denominator.bit_length() - 1 for f in flat), default=0)
    scale = 1 << K
    X = np.empty((S, ncol * S), dtype=object)
    for c in range(ncol):
        for a in range(S):
            for n in range(S):
                X[a, c * S + n] = int(evals[c][a][n] * scale)
    engine = _ExactConsensus(graph, eps_q)
    tol_q = Fraction(tol).limit_denominator(1 << 60)
    den = scale
    t = 0
    while True:
        totals = [sum(int(v) for v in X[:, j]) for j in range(X.shape[1])]
        pending = _exact_pending(X, totals, tol_q, den)
        if pending is None:
            break
        if t >= max_iters:
            n = pending % S + 1
            raise ConsensusError(
                f"Shamir round for evaluation point {n} did not converge after {t} iterations",
                index=n,
            )
        t += 1
        if observer is not None:
            for j in range(X.shape[1]):
                observer(j, t, np.array([int(v) / den for v in X[:, j]]))
        X = engine.step(X)
        den *= engine.q

    weights = _integer_weights(S)
    est = np.empty((S, ncol))
    for c in range(ncol):
        for s in range(S):
            acc = sum(w * int(X[s, c * S + n]) for n, w in enumerate(weights))
            est[s, c] = float(Fraction(S * acc, den))
    if single:
        est = est[:, 0]
    return AggregationResult(
        method="shamir",
        estimates=est,
        rounds=S,
        round_iterations=[t] * S,
        edges=graph.total_degree,
    )


# --------------------------------------------------------------------------
# plain consensus
# --------------------------------------------------------------------------


def consensus_aggregate(values, graph: Graph, eps=None, tol=1e-8, max_iters=None, observer=None):
    """Sum of ``values`` by a single unprotected consensus run."""
    tm = transition_matrix(graph, eps)
    run = run_consensus(tm, values, tol=tol, max_iters=max_iters, observer=observer,
                        record_trajectory=False)
    return AggregationResult(
        method="plain",
        estimates=run.sums,
        rounds=1,
        round_iterations=[run.iterations],
        edges=graph.total_degree,
    )


# --------------------------------------------------------------------------
# random chunking
# --------------------------------------------------------------------------


@dataclass
class ChunkSet:
    """Additive chunks, ``chunks[..., h]`` is the payload of round ``h``."""

    values: np.ndarray
    chunks: np.ndarray

    @property
    def n_chunks(self) -> int:
        return self.chunks.shape[-1]

    def residual(self) -> np.ndarray:
        return self.chunks.sum(axis=-1) - self.values


def random_chunks(value, n_chunks: int, chunk_range=None, seed=None) -> ChunkSet:
    """Split ``value`` (scalar or array) into ``n_chunks`` additive pieces.

    The first ``n_chunks - 1`` pieces are uniform on ``[-r, r]`` with
    ``r = 10 * max(1, |value|)`` by default, drawn on a dyadic grid of
    ``2**-30`` times the range so their partial sum is exact. The last piece
    is ``value`` minus that partial sum, which makes the chunks add back to
    ``value`` exactly whenever ``value`` lies on the same grid and to within
    one rounding of the range otherwise.
    """
    if int(n_chunks) != n_chunks or n_chunks < 1:
        raise ValueError(f"n_chunks must be a positive integer, got {n_chunks}")
    rng = np.random.default_rng(seed)
    v = np.asarray(value, dtype=float)
    if chunk_range is None:
        r = 10.0 * np.maximum(1.0, np.abs(v))
    else:
        r = np.broadcast_to(np.asarray(chunk_range, dtype=float), v.shape)
    grid = np.exp2(np.floor(np.log2(r)) - CHUNK_GRID_BITS)
    levels = np.floor(r / grid)
    u = rng.uniform(-1.0, 1.0, size=v.shape + (n_chunks - 1,))
    free = np.round(u * levels[..., None]) * grid[..., None]
    partial = free.sum(axis=-1)
    last = v - partial
    chunks = np.concatenate([free, last[..., None]], axis=-1)
    return ChunkSet(v, chunks)


class RelabeledTopology:
    """Fixed physical graph; agents get a fresh uniform placement each round."""

    def __init__(self, graph: Graph):
        self.graph = graph

    def draw(self, rng):
        perm = rng.permutation(self.graph.size)
        return self.graph.relabel(perm), perm


class RandomRegularTopology:
    """A freshly sampled random ``d``-regular graph each round."""

    def __init__(self, S: int, d: int = 3):
        self.S, self.d = S, d

    def draw(self, rng):
        seed = int(rng.integers(2**63))
        return build_random_regular(self.S, self.d, seed=seed), np.arange(self.S)


class FixedTopology:
    """Same graph and placement every round (no protection across rounds)."""

    def __init__(self, graph: Graph):
        self.graph = graph

    def draw(self, rng):
        return self.graph, np.arange(self.graph.size)


def _as_topology(topology):
    if isinstance(topology, Graph):
        return RelabeledTopology(topology)
    return topology


def chunked_aggregate(
    values,
    topology,
    n_chunks: int,
    eps: float | None = None,
    tol: float = 1e-8,
    seed=None,
    chunk_range=None,
    max_iters: int | None = None,
    observer=None,
) -> AggregationResult:
    """Sum of ``values`` by consensus on random chunks.

    ``topology`` is a graph (relabeled every round) or an object with a
    ``draw(rng) -> (graph, placement)`` method. Each round's graph is
    validated before use; ``observer(h, graph, placement, t, x)`` sees every
    transmitted state.
    """
    vals = np.asarray(values, dtype=float)
    source = _as_topology(topology)
    rng = np.random.default_rng(seed)
    cs = random_chunks(vals, n_chunks, chunk_range, seed=rng)
    S = vals.shape[0]
    totals = np.zeros(vals.shape)
    iters = []
    edges = None
    for h in range(n_chunks):
        for _ in range(100):
            g, placement = source.draw(rng)
            if g.size == S and g.is_connected():
                break
        else:
            raise ConsensusError(f"no usable topology for chunk round {h}", index=h)
        try:
            tm = transition_matrix(g, eps)
        except StepSizeError as exc:
            raise ConsensusError(f"chunk round {h}: {exc}", index=h) from exc
        if max_iters is None:
            max_iters = default_max_iters(tm, tol)
        cb = None
        if observer is not None:
            cb = lambda t, x, h=h, g=g, pl=placement: observer(h, g, pl, t, x)
        try:
            run = run_consensus(tm, cs.chunks[..., h], tol=tol, max_iters=max_iters,
                                observer=cb, record_trajectory=False)
        except ConsensusError as exc:
            raise ConsensusError(f"chunk round {h}: {exc}", last_error=exc.last_error,
                                 index=h) from exc
        totals = totals + run.sums
        iters.append(run.iterations)
        edges = g.total_degree if edges is None else edges
    return AggregationResult(
        method="chunk",
        estimates=totals,
        rounds=n_chunks,
        round_iterations=iters,
        edges=edges,
    )
