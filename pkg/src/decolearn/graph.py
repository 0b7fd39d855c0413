"""Communication topologies for dynamic consensus.

Graphs are undirected multigraphs stored as integer multiplicity matrices.
A self-loop adds 1 to ``adjacency[s, s]`` and 1 to ``degrees[s]``, so it
cancels in the Laplacian ``D - A`` and never influences the consensus update.

Builders use 0-based storage. The inverse-chord rule is stated on 1-based
labels ``s`` as ``(s - 1)(j - 1) = 1 mod S``; with ``x = s - 1`` this is simply
``x * x' = 1 mod S`` on the stored indices, which is how it is implemented.
"""
from __future__ import annotations

import io
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import (
    ConstructionError,
    GraphError,
    InvalidSizeError,
    StepSizeError,
)

DENSE_EIGEN_LIMIT = 2000
EXPANSION_BRUTEFORCE_LIMIT = 20


@dataclass(frozen=True)
class Graph:
    """Undirected multigraph with self-loops.

    Attributes
    ----------
    adjacency : ndarray of shape (S, S), int
        Symmetric edge multiplicities; the diagonal holds self-loop counts.
    name : str
        Free-form label (``"ring"``, ``"expander"``, ...).
    """

    adjacency: np.ndarray
    name: str = "graph"
    degrees: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        adj = np.array(self.adjacency, dtype=np.int64, copy=True)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise GraphError(f"adjacency must be square, got shape {adj.shape}")
        if adj.shape[0] < 1:
            raise InvalidSizeError("graph must have at least one node")
        if np.any(adj < 0):
            raise GraphError("edge multiplicities must be nonnegative")
        if not np.array_equal(adj, adj.T):
            raise GraphError("adjacency must be symmetric")
        adj.setflags(write=False)
        deg = adj.sum(axis=1)
        deg.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "degrees", deg)

    @property
    def size(self) -> int:
        return int(self.adjacency.shape[0])

    @property
    def total_degree(self) -> int:
        """Sum of degrees, the edge count ``E`` used by the privacy formulas."""
        return int(self.degrees.sum())

    @property
    def max_degree(self) -> int:
        return int(self.degrees.max())

    def laplacian(self) -> np.ndarray:
        return np.diag(self.degrees) - self.adjacency

    def is_regular(self, d: int | None = None) -> bool:
        if d is None:
            d = int(self.degrees[0])
        return bool(np.all(self.degrees == d))

    def is_connected(self) -> bool:
        return is_connected(self)

    def edges(self) -> list[tuple[int, int, int]]:
        """Undirected edges as ``(u, v, multiplicity)`` with ``u <= v``."""
        iu, iv = np.nonzero(np.triu(self.adjacency))
        return [(int(u), int(v), int(self.adjacency[u, v])) for u, v in zip(iu, iv)]

    def relabel(self, perm) -> "Graph":
        """Graph seen by agents when agent ``a`` sits at position ``perm[a]``."""
        perm = np.asarray(perm)
        if sorted(perm.tolist()) != list(range(self.size)):
            raise GraphError("perm must be a permutation of 0..S-1")
        return Graph(self.adjacency[np.ix_(perm, perm)], name=self.name)

    def to_edgelist(self) -> str:
        edges = self.edges()
        out = io.StringIO()
        out.write(f"{self.size} {len(edges)}\n")
        for u, v, m in edges:
            out.write(f"{u} {v} {m}\n")
        return out.getvalue()

    @classmethod
    def from_edgelist(cls, text: str, name: str = "graph") -> "Graph":
        lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
        lines = [ln for ln in lines if ln]
        if not lines:
            raise GraphError("empty edge list")
        try:
            S, n_edges = (int(tok) for tok in lines[0].split())
        except ValueError as exc:
            raise GraphError(f"line 1: expected 'S E', got {lines[0]!r}") from exc
        if len(lines) - 1 != n_edges:
            raise GraphError(f"header announces {n_edges} edges, found {len(lines) - 1}")
        adj = np.zeros((S, S), dtype=np.int64)
        for lineno, ln in enumerate(lines[1:], start=2):
            try:
                u, v, m = (int(tok) for tok in ln.split())
            except ValueError as exc:
                raise GraphError(f"line {lineno}: expected 'u v mult', got {ln!r}") from exc
            if not (0 <= u < S and 0 <= v < S) or m < 0:
                raise GraphError(f"line {lineno}: edge ({u}, {v}, {m}) out of range")
            if u > v:
                u, v = v, u
            adj[u, v] += m
            if u != v:
                adj[v, u] += m
        return cls(adj, name=name)

    def save(self, path) -> None:
        Path(path).write_text(self.to_edgelist())

    @classmethod
    def load(cls, path, name: str = "graph") -> "Graph":
        return cls.from_edgelist(Path(path).read_text(), name=name)


def is_connected(g: Graph) -> bool:
    """Breadth-first reachability from node 0."""
    S = g.size
    seen = np.zeros(S, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in np.nonzero(g.adjacency[u])[0]:
            if not seen[v]:
                seen[v] = True
                queue.append(int(v))
    return bool(seen.all())


def _check_size(S: int, minimum: int = 3) -> int:
    if int(S) != S or S < minimum:
        raise InvalidSizeError(f"need S >= {minimum}, got {S}")
    return int(S)


def build_ring(S: int) -> Graph:
    """Cycle graph: node ``s`` linked to ``s - 1`` and ``s + 1`` (mod S)."""
    S = _check_size(S)
    adj = np.zeros((S, S), dtype=np.int64)
    idx = np.arange(S)
    adj[idx, (idx + 1) % S] = 1
    adj[(idx + 1) % S, idx] = 1
    return Graph(adj, name="ring")


def build_complete(S: int) -> Graph:
    S = _check_size(S)
    return Graph(np.ones((S, S), dtype=np.int64) - np.eye(S, dtype=np.int64), name="complete")


def build_inverse_chord_expander(S: int, collapse_multi_edges: bool = False) -> Graph:
    """Cycle with inverse chords, made 3-regular for every ``S >= 3``.

    Each stored index ``x`` is linked to ``x +- 1`` and to ``x'`` with
    ``x * x' = 1 (mod S)``. Nodes without an inverse (``x = 0`` and, for
    composite ``S``, every non-unit) and self-inverse nodes get a self-loop.
    A chord that coincides with a cycle edge raises its multiplicity to 2
    unless ``collapse_multi_edges`` is set, in which case multiplicities are
    capped at 1 and those nodes end up with degree 2.
    """
    S = _check_size(S)
    adj = np.zeros((S, S), dtype=np.int64)
    for x in range(S):
        adj[x, (x + 1) % S] += 1
        adj[(x + 1) % S, x] += 1
    for x in range(S):
        inv = next((y for y in range(S) if (x * y) % S == 1 % S), None)
        if inv is None or inv == x:
            adj[x, x] += 1
        elif x < inv:
            adj[x, inv] += 1
            adj[inv, x] += 1
    if collapse_multi_edges:
        adj = np.minimum(adj, 1)
    return Graph(adj, name="expander")


def build_random_regular(S: int, d: int, seed=None, max_tries: int = 1000) -> Graph:
    """Simple connected ``d``-regular graph from the configuration model.

    Stubs are paired by a uniform shuffle; pairings that create a self-loop,
    a repeated edge, or a disconnected graph are rejected and redrawn.
    """
    S = int(S)
    d = int(d)
    if S < 1 or d < 1:
        raise InvalidSizeError(f"need S >= 1 and d >= 1, got S={S}, d={d}")
    if (S * d) % 2:
        raise ConstructionError(f"S * d must be even, got S={S}, d={d}")
    if d >= S:
        raise InvalidSizeError(f"need d < S, got S={S}, d={d}")
    rng = np.random.default_rng(seed)
    stubs = np.repeat(np.arange(S), d)
    for _ in range(max_tries):
        pairs = rng.permutation(stubs).reshape(-1, 2)
        u, v = pairs[:, 0], pairs[:, 1]
        if np.any(u == v):
            continue
        adj = np.zeros((S, S), dtype=np.int64)
        np.add.at(adj, (u, v), 1)
        np.add.at(adj, (v, u), 1)
        if adj.max() > 1:
            continue
        g = Graph(adj, name="random_regular")
        if is_connected(g):
            return g
    raise ConstructionError(
        f"no simple connected {d}-regular graph on {S} nodes after {max_tries} tries"
    )


def build_graph(kind: str, S: int, d: int = 3, seed=None) -> Graph:
    """Dispatch on a topology name used by configs and the CLI."""
    if kind == "ring":
        return build_ring(S)
    if kind == "complete":
        return build_complete(S)
    if kind == "expander":
        return build_inverse_chord_expander(S)
    if kind == "random_regular":
        return build_random_regular(S, d, seed=seed)
    raise GraphError(f"unknown graph type {kind!r}")


@dataclass(frozen=True)
class TransitionMatrix:
    """Consensus operator ``W = I - eps (D - A)``."""

    W: np.ndarray
    eps: float
    graph: Graph = field(repr=False)

    @property
    def size(self) -> int:
        return int(self.W.shape[0])


def default_eps(g: Graph) -> float:
    return 1.0 / (g.max_degree + 1)


def transition_matrix(g: Graph, eps: float | None = None) -> TransitionMatrix:
    """Build ``W`` and check that its spectrum gives convergent consensus.

    Raises
    ------
    StepSizeError
        If an eigenvalue falls below -1 or the eigenvalue 1 is not simple.
    """
    if eps is None:
        eps = default_eps(g)
    eps = float(eps)
    if not eps > 0:
        raise StepSizeError(f"eps must be positive, got {eps}")
    S = g.size
    W = np.eye(S) - eps * g.laplacian()
    W.setflags(write=False)
    tm = TransitionMatrix(W, eps, g)
    evals = _eigvalsh(W)
    lo, l2 = evals[0], evals[-2] if S > 1 else -np.inf
    if lo < -1.0 - 1e-12:
        raise StepSizeError(
            f"eps={eps} gives eigenvalue {lo:.6g} < -1; use a smaller eps"
        )
    if l2 > 1.0 - 1e-12:
        raise StepSizeError(
            f"eigenvalue 1 is degenerate (second eigenvalue {l2:.6g}); graph disconnected?"
        )
    return tm


def _eigvalsh(W: np.ndarray) -> np.ndarray:
    if W.shape[0] <= DENSE_EIGEN_LIMIT:
        return np.linalg.eigvalsh(W)
    lam2, _ = _power_second_eigenpair(W)
    # only the top two and the bottom eigenvalue are needed by callers
    lo = _power_extreme(W)
    return np.array([lo, lam2, 1.0])


def _power_second_eigenpair(W, rtol=1e-10, max_iter=1_000_000, seed=0):
    """Largest eigenpair of ``W`` orthogonal to the all-ones vector.

    Power iteration runs on ``(W + I) / 2`` so that the largest-magnitude
    eigenvalue of the deflated operator is the algebraically largest one.
    """
    S = W.shape[0]
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(S)
    v -= v.mean()
    v /= np.linalg.norm(v)
    mu = 0.0
    for _ in range(max_iter):
        w = 0.5 * (W @ v + v)
        w -= w.mean()
        mu = float(v @ w)
        # the eigenvalue error is of order residual**2 / separation
        if np.linalg.norm(w - mu * v) <= math.sqrt(rtol) * 1e-3 * abs(mu):
            v = w / np.linalg.norm(w)
            break
        v = w / np.linalg.norm(w)
    return 2.0 * mu - 1.0, v


def _power_extreme(W, rtol=1e-10, max_iter=1_000_000, seed=1):
    # smallest eigenvalue via the top of (I - W) / 2, eigenvalues in [0, 1]
    S = W.shape[0]
    v = np.random.default_rng(seed).standard_normal(S)
    v /= np.linalg.norm(v)
    mu = 0.0
    for _ in range(max_iter):
        w = 0.5 * (v - W @ v)
        mu_new = float(v @ w)
        v = w / np.linalg.norm(w)
        if abs(mu_new - mu) <= rtol * max(abs(mu_new), 1e-300):
            mu = mu_new
            break
        mu = mu_new
    return 1.0 - 2.0 * mu


def spectral_gap(tm: TransitionMatrix, dense_limit: int = DENSE_EIGEN_LIMIT) -> tuple[float, float]:
    """Return ``(lambda2, 1 - lambda2)`` for the consensus operator."""
    W = np.asarray(tm.W)
    if not np.allclose(W, W.T, atol=1e-14, rtol=0):
        raise GraphError("transition matrix must be symmetric")
    if W.shape[0] == 1:
        return 0.0, 1.0
    if W.shape[0] <= dense_limit:
        lam2 = float(np.linalg.eigvalsh(W)[-2])
    else:
        lam2, _ = _power_second_eigenpair(W)
    return lam2, 1.0 - lam2


def top_eigenvector(tm: TransitionMatrix) -> tuple[float, np.ndarray]:
    evals, evecs = np.linalg.eigh(tm.W)
    v = evecs[:, -1]
    return float(evals[-1]), v * np.sign(v.sum())


def expansion_constant_bruteforce(g: Graph) -> float:
    """Exact edge expansion by enumerating every nonempty proper node subset."""
    S = g.size
    if S > EXPANSION_BRUTEFORCE_LIMIT:
        raise InvalidSizeError(
            f"brute-force expansion limited to S <= {EXPANSION_BRUTEFORCE_LIMIT}, got {S}"
        )
    if S < 2:
        raise InvalidSizeError("need at least two nodes")
    edges = [(u, v, m) for u, v, m in g.edges() if u != v]
    masks = np.arange(1, (1 << S) - 1, dtype=np.int64)
    cut = np.zeros(masks.shape, dtype=np.int64)
    for u, v, m in edges:
        cut += m * (((masks >> u) ^ (masks >> v)) & 1)
    bits = np.unpackbits(masks.astype(">u4").view(np.uint8).reshape(-1, 4), axis=1)
    size = bits.sum(axis=1)
    denom = np.minimum(size, S - size)
    return float(np.min(cut / denom))
