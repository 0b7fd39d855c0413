"""Federated multi-task Gaussian mixture fitted by MAP-EM.

Every agent keeps its samples and its own mixing weights. One EM round
computes local responsibilities and sufficient statistics, sums the
statistics over the network with one of the aggregation protocols and
solves the MAP M-step, where each precision matrix comes out of the
graphical lasso.

The maximized objective is

    sum_a sum_n sum_k r_ank [ln pi_ak + ln N(x_an | mu_k, inv(L_k)) - ln r_ank]
      - sum_k [lambda0/2 mu_k' L_k mu_k + rho/2 |L_k|_1]
      + gamma sum_a sum_k ln pi_ak

with the prior mean of every ``mu_k`` fixed at zero. The normalizing
``1/2 ln det(lambda0 L_k)`` of the Gaussian prior on ``mu_k`` is left out so
that the glasso problem solved in the M-step is the exact maximizer over
``L_k`` and every round ascends.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from ..exceptions import (
    ConsensusError,
    EMStallError,
    EmptyComponentError,
    SingularPrecisionError,
)
from ..graph import Graph, build_graph
from ..sharing import chunked_aggregate, consensus_aggregate, shamir_aggregate
from .glasso import glasso

EMPTY_TOL = 1e-8
AGGREGATORS = ("direct", "consensus", "shamir", "chunked")
COVARIANCE_FORMS = ("derived", "plus_outer")
_LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------
# containers
# --------------------------------------------------------------------------


class Dataset:
    """Per-agent sample matrices sharing one feature dimension.

    Parameters
    ----------
    agents : sequence of array-like
        ``agents[a]`` has shape ``(N_a, M)`` with ``N_a >= 1``.
    """

    def __init__(self, agents: Sequence):
        mats = []
        for a, X in enumerate(agents):
            X = np.asarray(X, dtype=float)
            if X.ndim == 1:
                X = X[:, None]
            if X.ndim != 2 or X.shape[0] < 1:
                raise ValueError(f"agent {a}: expected a non-empty 2-D array, got {X.shape}")
            if not np.all(np.isfinite(X)):
                raise ValueError(f"agent {a}: data contains NaN or inf")
            mats.append(X)
        if not mats:
            raise ValueError("dataset has no agents")
        dims = {X.shape[1] for X in mats}
        if len(dims) != 1:
            raise ValueError(f"agents disagree on the feature dimension: {sorted(dims)}")
        self.agents = mats

    @property
    def S(self) -> int:
        return len(self.agents)

    @property
    def M(self) -> int:
        return self.agents[0].shape[1]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([X.shape[0] for X in self.agents])

    def pooled(self) -> np.ndarray:
        return np.vstack(self.agents)

    def __len__(self) -> int:
        return self.S

    def __getitem__(self, a: int) -> np.ndarray:
        return self.agents[a]


@dataclass
class MixtureParams:
    """Shared component parameters and per-agent mixing weights.

    ``mu`` is ``(K, M)``, ``Lambda`` is ``(K, M, M)`` and ``pi`` is ``(S, K)``.
    """

    mu: np.ndarray
    Lambda: np.ndarray
    pi: np.ndarray
    gamma: float = 1.0
    lambda0: float = 1e-3
    rho: float = 0.1

    @property
    def K(self) -> int:
        return self.mu.shape[0]

    @property
    def M(self) -> int:
        return self.mu.shape[1]

    def validate(self) -> None:
        K, M = self.mu.shape
        if self.Lambda.shape != (K, M, M):
            raise ValueError(f"Lambda has shape {self.Lambda.shape}, expected {(K, M, M)}")
        if self.pi.ndim != 2 or self.pi.shape[1] != K:
            raise ValueError(f"pi has shape {self.pi.shape}, expected (S, {K})")
        if np.any(self.pi <= 0) or not np.allclose(self.pi.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("every row of pi must be a strictly positive simplex vector")
        for k in range(K):
            if not np.allclose(self.Lambda[k], self.Lambda[k].T, atol=1e-12):
                raise ValueError(f"Lambda[{k}] is not symmetric")
            _cholesky(self.Lambda[k], k)

    def permuted(self, perm) -> "MixtureParams":
        perm = np.asarray(perm)
        return replace(self, mu=self.mu[perm], Lambda=self.Lambda[perm], pi=self.pi[:, perm])


@dataclass
class LocalStats:
    """Responsibility-weighted counts, sums and second moments of one agent."""

    N: np.ndarray
    m: np.ndarray
    C: np.ndarray

    @property
    def K(self) -> int:
        return self.N.shape[0]

    @property
    def M(self) -> int:
        return self.m.shape[1]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.N, self.m.ravel(), self.C.ravel()])

    @classmethod
    def unflatten(cls, vec, K: int, M: int) -> "LocalStats":
        vec = np.asarray(vec, dtype=float)
        N = vec[:K]
        m = vec[K:K + K * M].reshape(K, M)
        C = vec[K + K * M:].reshape(K, M, M)
        return cls(N.copy(), m.copy(), C.copy())


@dataclass
class GlobalStats(LocalStats):
    """Network-wide sums plus what the aggregation cost."""

    method: str = "direct"
    iterations: int = 0
    scalar_messages: int = 0
    agent_estimates: np.ndarray | None = field(default=None, repr=False)

    def subset(self, ks) -> "GlobalStats":
        ks = np.asarray(ks)
        return replace(self, N=self.N[ks], m=self.m[ks], C=self.C[ks])


@dataclass
class AggregatorConfig:
    """How the statistics are summed across agents.

    ``method`` is ``"direct"`` (exact in-process sum), ``"consensus"``
    (unprotected dynamic consensus), ``"shamir"`` or ``"chunked"``.
    ``graph`` is a :class:`Graph` or a topology name for
    :func:`decolearn.graph.build_graph`.
    """

    method: str = "direct"
    graph: Graph | str = "expander"
    eps: float | None = None
    tol: float = 1e-8
    n_chunks: int = 3
    max_iters: int | None = None

    def __post_init__(self):
        if self.method not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.method!r}; choose from {AGGREGATORS}")
        if int(self.n_chunks) != self.n_chunks or self.n_chunks < 1:
            raise ValueError(f"n_chunks must be a positive integer, got {self.n_chunks}")

    def resolve_graph(self, S: int) -> Graph:
        g = self.graph
        if isinstance(g, Graph):
            if g.size != S:
                raise ValueError(f"graph has {g.size} nodes but there are {S} agents")
            return g
        return build_graph(g, S)


@dataclass
class EMResult:
    params: MixtureParams
    responsibilities: list
    objective_trace: list
    n_rounds: int
    converged: bool
    history: list = field(default_factory=list, repr=False)
    aggregation: list = field(default_factory=list, repr=False)
    reseeded: list = field(default_factory=list)


# --------------------------------------------------------------------------
# E-step and statistics
# --------------------------------------------------------------------------


def _cholesky(L, k):
    try:
        return np.linalg.cholesky(L)
    except np.linalg.LinAlgError as exc:
        raise SingularPrecisionError(
            f"precision matrix of component {k} is not positive definite", component=k
        ) from exc


def log_gaussian(X, mu, Lambda, k=None) -> np.ndarray:
    """Row-wise ``ln N(x | mu, inv(Lambda))`` through a Cholesky factor."""
    chol = _cholesky(Lambda, k)
    d = (X - mu) @ chol
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return 0.5 * (logdet - X.shape[1] * _LOG_2PI) - 0.5 * np.einsum("ij,ij->i", d, d)


def log_joint(X, params: MixtureParams, agent: int) -> np.ndarray:
    """``ln pi_ak + ln N(x | mu_k, inv(L_k))`` as an ``(N, K)`` matrix."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.empty((X.shape[0], params.K))
    for k in range(params.K):
        out[:, k] = log_gaussian(X, params.mu[k], params.Lambda[k], k)
    return out + np.log(params.pi[agent])


def responsibilities(X, params: MixtureParams, agent: int) -> np.ndarray:
    """Posterior component weights of agent ``agent``'s samples.

    Raises
    ------
    SingularPrecisionError
        If some precision matrix has no Cholesky factor; ``component`` names it.
    """
    lj = log_joint(X, params, agent)
    return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))


def local_stats(X, resp) -> LocalStats:
    """``N_k = sum r``, ``m_k = sum r x`` and ``C_k = sum r x x'`` for one agent."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    resp = np.atleast_2d(np.asarray(resp, dtype=float))
    if resp.shape[0] != X.shape[0]:
        raise ValueError(f"{resp.shape[0]} responsibility rows for {X.shape[0]} samples")
    N = resp.sum(axis=0)
    m = resp.T @ X
    C = np.einsum("nk,ni,nj->kij", resp, X, X)
    return LocalStats(N, m, C)


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------


def _element_name(index: int, K: int, M: int) -> str:
    if index < K:
        return f"N[{index}]"
    index -= K
    if index < K * M:
        return f"m[{index // M}][{index % M}]"
    index -= K * M
    k, rest = divmod(index, M * M)
    return f"C[{k}][{rest // M}][{rest % M}]"


def aggregate_stats(
    locals_: Sequence[LocalStats],
    aggregator: str | AggregatorConfig = "direct",
    graph: Graph | str | None = None,
    seed=None,
) -> GlobalStats:
    """Sum the agents' statistics with the chosen protocol.

    The consensus-family protocols run all ``K (1 + M + M**2)`` scalars as
    parallel columns. The returned sums are the ones agent 0 ends up with.

    Raises
    ------
    ConsensusError
        If aggregation does not converge; ``index`` is the flat position of
        the failing element and the message names it.
    """
    cfg = aggregator if isinstance(aggregator, AggregatorConfig) else AggregatorConfig(aggregator)
    if graph is not None:
        cfg = replace(cfg, graph=graph)
    if not locals_:
        raise ValueError("no local statistics to aggregate")
    K, M = locals_[0].K, locals_[0].M
    for a, ls in enumerate(locals_):
        if ls.N.shape != (K,) or ls.m.shape != (K, M) or ls.C.shape != (K, M, M):
            raise ValueError(f"agent {a} statistics do not match shape K={K}, M={M}")
    V = np.stack([ls.flatten() for ls in locals_])
    S = V.shape[0]

    if cfg.method == "direct":
        total = V.sum(axis=0)
        g = LocalStats.unflatten(total, K, M)
        return GlobalStats(g.N, g.m, _sym(g.C), method="direct")

    g = cfg.resolve_graph(S)
    try:
        if cfg.method == "consensus":
            res = consensus_aggregate(V, g, eps=cfg.eps, tol=cfg.tol, max_iters=cfg.max_iters)
        elif cfg.method == "shamir":
            res = shamir_aggregate(V, g, eps=cfg.eps, tol=cfg.tol, seed=seed,
                                   max_iters=cfg.max_iters)
        else:
            res = chunked_aggregate(V, g, cfg.n_chunks, eps=cfg.eps, tol=cfg.tol, seed=seed,
                                    max_iters=cfg.max_iters)
    except ConsensusError as exc:
        where = ""
        if exc.index is not None and cfg.method == "consensus":
            where = f" at element {_element_name(exc.index, K, M)}"
        raise ConsensusError(f"{cfg.method} aggregation failed{where}: {exc}",
                             last_error=exc.last_error, index=exc.index) from exc
    est = np.asarray(res.estimates)
    g0 = LocalStats.unflatten(est[0], K, M)
    return GlobalStats(
        g0.N, g0.m, _sym(g0.C),
        method=cfg.method,
        iterations=res.total_iterations,
        scalar_messages=res.scalar_messages,
        agent_estimates=est,
    )


def _sym(C):
    return 0.5 * (C + np.swapaxes(C, -1, -2))


# --------------------------------------------------------------------------
# M-step
# --------------------------------------------------------------------------


def component_covariance(N, m, C, lambda0: float, form: str = "derived"):
    """Mean and the matrix handed to the glasso for one component.

    ``form="derived"`` centers the second moment,
    ``C/N - ((N + lambda0)/N) mu mu'``, which is what maximizes the objective.
    ``form="plus_outer"`` returns ``C/N + mu mu'`` instead.
    """
    if form not in COVARIANCE_FORMS:
        raise ValueError(f"unknown covariance form {form!r}")
    mu = m / (lambda0 + N)
    outer = np.outer(mu, mu)
    if form == "derived":
        Sigma = C / N - ((N + lambda0) / N) * outer
    else:
        Sigma = C / N + outer
    return mu, 0.5 * (Sigma + Sigma.T)


def _load_diagonal(Sigma, r, k, scale=None):
    """Shift ``Sigma`` until the glasso problem is well posed.

    ``scale`` sets the size of the minimal shift; it defaults to the size of
    ``Sigma`` itself, which is useless when ``Sigma`` vanishes, so callers
    pass the raw second moment.
    """
    M = Sigma.shape[0]
    scale = max(np.trace(Sigma) / M, np.abs(Sigma).max(), scale or 0.0)
    if not scale > 0:
        scale = 1.0
    lam_min = np.linalg.eigvalsh(Sigma)[0]
    floor = 1e-10 * scale
    if lam_min < -1e-12 * scale or lam_min + r <= floor:
        shift = max(0.0, floor - lam_min - r) + max(0.0, -lam_min)
        warnings.warn(
            f"component {k}: sample matrix not positive definite "
            f"(min eigenvalue {lam_min:.3e}); adding {shift:.3e} to the diagonal",
            RuntimeWarning,
            stacklevel=3,
        )
        Sigma = Sigma + shift * np.eye(M)
    return Sigma


def update_gaussian_params(
    stats: GlobalStats | LocalStats,
    lambda0: float = 1e-3,
    rho: float = 0.1,
    covariance_form: str = "derived",
):
    """MAP means and glasso precisions from summed statistics.

    Returns
    -------
    mu : ndarray of shape (K, M)
    Lambda : ndarray of shape (K, M, M)

    Raises
    ------
    EmptyComponentError
        If some ``N_k`` is below 1e-8; ``components`` lists them all.
    """
    if lambda0 < 0 or rho < 0:
        raise ValueError(f"lambda0 and rho must be nonnegative, got {lambda0}, {rho}")
    empty = [k for k in range(stats.K) if not stats.N[k] >= EMPTY_TOL]
    if empty:
        raise EmptyComponentError(f"components {empty} have no mass", components=empty)
    K, M = stats.K, stats.M
    mu = np.empty((K, M))
    Lam = np.empty((K, M, M))
    for k in range(K):
        Nk = float(stats.N[k])
        mu[k], Sigma = component_covariance(Nk, stats.m[k], stats.C[k], lambda0, covariance_form)
        r = rho / Nk
        Sigma = _load_diagonal(Sigma, r, k, np.trace(stats.C[k]) / (Nk * M))
        Lam[k] = glasso(Sigma, r)
    return mu, Lam


def update_pi(Nk, Na: float, gamma: float = 1.0) -> np.ndarray:
    """Mixing weights ``(N_ak + gamma) / (N_a + K gamma)`` of one agent."""
    Nk = np.asarray(Nk, dtype=float)
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    K = Nk.shape[-1]
    pi = (Nk + gamma) / (Na + K * gamma)
    return pi / pi.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------


def _xlogx(r):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r > 0, r * np.log(np.where(r > 0, r, 1.0)), 0.0)


def penalized_objective(data, params: MixtureParams, resp) -> float:
    """Lower bound on the log posterior that EM ascends (see module notes)."""
    data = data if isinstance(data, Dataset) else Dataset(data)
    total = 0.0
    for a, X in enumerate(data.agents):
        r = np.asarray(resp[a])
        lj = log_joint(X, params, a)
        total += float(np.sum(r * lj) - np.sum(_xlogx(r)))
    for k in range(params.K):
        L = params.Lambda[k]
        mu = params.mu[k]
        total -= 0.5 * params.lambda0 * float(mu @ L @ mu)
        total -= 0.5 * params.rho * float(np.abs(L).sum())
    total += params.gamma * float(np.log(params.pi).sum())
    return total


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------


def _sq_dist(X, centers):
    return ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)


def kmeanspp_centers(data, K: int, seed=None) -> np.ndarray:
    """k-means++ centers drawn across agents without pooling the data.

    Each draw first picks an agent with probability proportional to its
    summed squared distance to the centers so far (uniform by sample count
    for the first center) and then a sample within that agent. The result
    has the law of k-means++ on the pooled data.
    """
    data = data if isinstance(data, Dataset) else Dataset(data)
    rng = np.random.default_rng(seed)
    centers = []
    for _ in range(K):
        if not centers:
            w_agents = data.sizes.astype(float)
            d2 = [np.ones(n) for n in data.sizes]
        else:
            C = np.array(centers)
            d2 = [_sq_dist(X, C).min(axis=1) for X in data.agents]
            w_agents = np.array([d.sum() for d in d2])
        if not w_agents.sum() > 0:
            # every sample already is a center; repeat one
            w_agents = data.sizes.astype(float)
            d2 = [np.ones(n) for n in data.sizes]
        a = rng.choice(data.S, p=w_agents / w_agents.sum())
        n = rng.choice(data.sizes[a], p=d2[a] / d2[a].sum())
        centers.append(data.agents[a][n].copy())
    return np.array(centers)


def initialize_responsibilities(data, K: int, seed=None) -> list:
    """Hard assignment of every sample to its nearest k-means++ center."""
    data = data if isinstance(data, Dataset) else Dataset(data)
    if K < 1:
        raise ValueError(f"K must be positive, got {K}")
    centers = kmeanspp_centers(data, K, seed)
    out = []
    for X in data.agents:
        lab = _sq_dist(X, centers).argmin(axis=1)
        r = np.zeros((X.shape[0], K))
        r[np.arange(X.shape[0]), lab] = 1.0
        out.append(r)
    return out


def _reseed(data: Dataset, mu, Lam, empty, stats: GlobalStats):
    """Move empty components to the samples farthest from the live means."""
    M = data.M
    total_N = stats.N.sum()
    mean = stats.m.sum(axis=0) / total_N
    var = np.trace(stats.C.sum(axis=0)) / total_N - mean @ mean
    var = var / M if var > 0 else 1.0
    live = [k for k in range(mu.shape[0]) if k not in empty]
    for k in empty:
        ref = mu[live] if live else mean[None, :]
        best, point = -1.0, None
        for X in data.agents:
            d = _sq_dist(X, ref).min(axis=1)
            i = int(d.argmax())
            if d[i] > best:
                best, point = d[i], X[i]
        mu[k] = point
        Lam[k] = np.eye(M) / var
        live.append(k)
    return mu, Lam


# --------------------------------------------------------------------------
# the loop
# --------------------------------------------------------------------------


def federated_em(
    data,
    K: int,
    gamma: float = 1.0,
    lambda0: float = 1e-3,
    rho: float = 0.1,
    aggregator: str | AggregatorConfig = "direct",
    seed=None,
    tol: float = 1e-6,
    max_rounds: int = 200,
    covariance_form: str = "derived",
    init_resp=None,
    stall_slack: float | None = None,
    raise_on_stall: bool = True,
    reseed_empty: bool = True,
    record_history: bool = False,
) -> EMResult:
    """Run federated MAP-EM until the objective stops moving.

    Parameters
    ----------
    data : Dataset or sequence of arrays
        One ``(N_a, M)`` matrix per agent, at least three agents.
    K : int
        Number of mixture components.
    aggregator : str or AggregatorConfig
        How statistics are summed each round.
    seed : int, optional
        Drives initialization and every aggregation round.
    tol : float
        Stop when the relative objective change falls below ``tol``.
    init_resp : list of arrays, optional
        Starting responsibilities; k-means++ hard assignment otherwise.
    stall_slack : float, optional
        Allowed relative decrease of the objective between rounds; defaults
        to 1e-9 for ``direct`` aggregation and 1e-5 otherwise.

    Returns
    -------
    EMResult

    Raises
    ------
    EMStallError
        If the objective drops by more than the slack; ``state`` carries
        the round, both objective values and the parameters.
    """
    data = data if isinstance(data, Dataset) else Dataset(data)
    if data.S < 3:
        raise ValueError(f"federated EM needs at least 3 agents, got {data.S}")
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K}")
    if max_rounds < 1:
        raise ValueError(f"max_rounds must be positive, got {max_rounds}")
    cfg = aggregator if isinstance(aggregator, AggregatorConfig) else AggregatorConfig(aggregator)
    if stall_slack is None:
        stall_slack = 1e-9 if cfg.method == "direct" else 1e-5
    if cfg.method != "direct":
        cfg = replace(cfg, graph=cfg.resolve_graph(data.S))

    root = np.random.SeedSequence(seed)
    init_seq, agg_seq = root.spawn(2)
    if init_resp is None:
        resp = initialize_responsibilities(data, K, seed=init_seq)
    else:
        resp = [np.asarray(r, dtype=float) for r in init_resp]
        if len(resp) != data.S:
            raise ValueError(f"init_resp has {len(resp)} entries for {data.S} agents")
    agg_rng = np.random.default_rng(agg_seq)

    trace, history, agg_log, reseeded = [], [], [], []
    params = None
    converged = False
    rnd = 0
    for rnd in range(1, max_rounds + 1):
        locals_ = [local_stats(X, r) for X, r in zip(data.agents, resp)]
        glob = aggregate_stats(locals_, cfg, seed=int(agg_rng.integers(2**63)))
        agg_log.append({"round": rnd, "iterations": glob.iterations,
                        "scalar_messages": glob.scalar_messages})
        empty = [k for k in range(K) if not glob.N[k] >= EMPTY_TOL]
        if empty and not reseed_empty:
            raise EmptyComponentError(f"round {rnd}: components {empty} have no mass",
                                      components=empty)
        live = [k for k in range(K) if k not in empty]
        mu = np.zeros((K, data.M))
        Lam = np.zeros((K, data.M, data.M))
        if live:
            mu[live], Lam[live] = update_gaussian_params(
                glob.subset(live), lambda0, rho, covariance_form
            )
        if empty:
            mu, Lam = _reseed(data, mu, Lam, empty, glob)
            reseeded.append((rnd, empty))
        # mixing weights only need the agent's own counts
        pi = np.array([update_pi(ls.N, X.shape[0], gamma) for ls, X in zip(locals_, data.agents)])
        params = MixtureParams(mu, Lam, pi, gamma=gamma, lambda0=lambda0, rho=rho)
        resp = [responsibilities(X, params, a) for a, X in enumerate(data.agents)]
        obj = penalized_objective(data, params, resp)
        if record_history:
            history.append(replace(params, mu=mu.copy(), Lambda=Lam.copy(), pi=pi.copy()))
        if trace and not empty:
            prev = trace[-1]
            if obj < prev - stall_slack * max(abs(prev), 1.0):
                trace.append(obj)
                if raise_on_stall:
                    raise EMStallError(
                        f"round {rnd}: objective fell from {prev:.12g} to {obj:.12g}",
                        state={"round": rnd, "previous": prev, "current": obj,
                               "params": params, "trace": list(trace)},
                    )
                continue
            trace.append(obj)
            if abs(obj - prev) < tol * max(abs(prev), 1e-300):
                converged = True
                break
        else:
            trace.append(obj)
    return EMResult(params, resp, trace, rnd, converged, history, agg_log, reseeded)


__all__ = [
    "AggregatorConfig",
    "Dataset",
    "EMResult",
    "GlobalStats",
    "LocalStats",
    "MixtureParams",
    "aggregate_stats",
    "component_covariance",
    "federated_em",
    "initialize_responsibilities",
    "kmeanspp_centers",
    "local_stats",
    "log_gaussian",
    "penalized_objective",
    "responsibilities",
    "update_gaussian_params",
    "update_pi",
]
