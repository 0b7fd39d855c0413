"""Dynamic consensus: iterate ``x(t+1) = W x(t)`` to the network mean."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConsensusError, DecolearnError
from .graph import Graph, TransitionMatrix, spectral_gap

ZERO_MEAN_RTOL = 1e-12
MAX_ITERS_FLOOR = 10_000
ROUNDING_FLOOR = 64 * np.finfo(float).eps


class InvalidGapError(DecolearnError, ValueError):
    pass


@dataclass
class ConsensusRun:
    """Outcome of :func:`run_consensus`.

    ``result`` has the shape of ``xi0``. For 2-D input every column is an
    independent scalar consensus run advanced on a shared clock, and
    ``trajectory_error`` records the worst column at each iteration.
    """

    xi0: np.ndarray
    result: np.ndarray
    iterations: int
    trajectory_error: list[float] = field(default_factory=list)

    @property
    def sums(self) -> np.ndarray:
        """Per-agent estimate of the network sum, ``S * x_s``."""
        return self.result * self.result.shape[0]


def step(tm: TransitionMatrix, xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.shape[0] != tm.size:
        raise ValueError(f"state has {xi.shape[0]} entries, graph has {tm.size} nodes")
    return tm.W @ xi


def step_elementwise(g: Graph, eps: float, xi: np.ndarray) -> np.ndarray:
    """Neighbor-sum form of the update, ``x_a + eps * sum_j A_aj (x_j - x_a)``."""
    xi = np.asarray(xi, dtype=float)
    out = np.empty_like(xi)
    for a in range(g.size):
        acc = 0.0
        for j in np.nonzero(g.adjacency[a])[0]:
            acc += g.adjacency[a, j] * (xi[j] - xi[a])
        out[a] = xi[a] + eps * acc
    return out


def _errors(x: np.ndarray, total0: np.ndarray, scale0: np.ndarray):
    """Relative error per column and the sup-norm deviation from the mean.

    ``S ||x||^2 - xbar^2`` equals ``S ||x - mean(x)||^2`` whenever the sum is
    conserved, which the update guarantees up to rounding; the deviation form
    keeps that rounding drift out of the metric and is exactly zero at
    consensus.
    """
    S = x.shape[0]
    mean = x.sum(axis=0) / S
    dev = x - mean
    radicand = S * np.einsum("i...,i...->...", dev, dev)
    zero_mean = np.abs(total0) <= ZERO_MEAN_RTOL * scale0
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.sqrt(radicand) / np.abs(total0)
    absolute = np.sqrt(np.einsum("i...,i...->...", x, x))
    err = np.where(zero_mean, absolute, rel)
    maxdev = np.abs(dev).max(axis=0)
    # spread that float64 cannot resolve any further
    floor = ROUNDING_FLOOR * np.abs(x).max(axis=0)
    return err, maxdev, zero_mean, maxdev <= floor


def relative_error(tm: TransitionMatrix, xi0, t: int) -> float:
    """Relative error after ``t`` rounds starting from ``xi0``.

    Falls back to the absolute error ``||W^t xi0||`` when the network sum is
    (numerically) zero.
    """
    x = np.asarray(xi0, dtype=float)
    total0 = x.sum()
    scale0 = np.linalg.norm(x)
    for _ in range(int(t)):
        x = tm.W @ x
    err, _, _, _ = _errors(x, np.asarray(total0), np.asarray(scale0))
    return float(err)


def estimate_iterations(S: int, delta: float, gap: float) -> int:
    """Predicted rounds ``ln(sqrt(S)/delta) / |ln(1 - gap)|``, rounded up."""
    if not gap > 0:
        raise InvalidGapError(f"spectral gap must be positive, got {gap}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    rate = abs(1.0 - gap)
    if rate >= 1.0:
        raise InvalidGapError(f"gap {gap} leaves an eigenvalue of modulus >= 1")
    if rate == 0.0:
        return 1
    return max(1, math.ceil(math.log(math.sqrt(S) / delta) / abs(math.log(rate))))


def iterations_to_tolerance(tm: TransitionMatrix, X0, delta: float, max_iters: int | None = None):
    """First round at which each column's relative error is at most ``delta``.

    Columns are advanced together but counted separately, so ``X0`` of shape
    ``(S, n)`` yields ``n`` counts. Columns still above ``delta`` after
    ``max_iters`` rounds get ``-1``.
    """
    x = np.array(X0, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if max_iters is None:
        max_iters = default_max_iters(tm, delta)
    total0 = x.sum(axis=0)
    scale0 = np.sqrt(np.einsum("ij,ij->j", x, x))
    counts = np.full(x.shape[1], -1, dtype=np.int64)
    W = tm.W

    def done_at(state):
        err, _, _, at_floor = _errors(state, total0, scale0)
        return (err <= delta) | at_floor

    # W is symmetric with spectrum in (-1, 1], so the error never grows:
    # advance in blocks and step singly only through the block where a
    # column crosses the tolerance.
    block = 32
    t = 0
    hit = done_at(x)
    counts[hit] = 0
    while np.any(counts < 0) and t < max_iters:
        n = min(block, max_iters - t)
        start = x
        for _ in range(n):
            x = W @ x
        pending = counts < 0
        hit = done_at(x) & pending
        if not np.any(hit):
            t += n
            continue
        y = start
        for s in range(1, n + 1):
            y = W @ y
            newly = done_at(y) & (counts < 0)
            counts[newly] = t + s
            if not np.any(hit & (counts < 0)):
                break
        t += n
    return counts


def default_max_iters(tm: TransitionMatrix, tol: float) -> int:
    _, gap = spectral_gap(tm)
    try:
        est = estimate_iterations(tm.size, min(tol, 0.5), gap)
    except InvalidGapError:
        return MAX_ITERS_FLOOR
    return max(MAX_ITERS_FLOOR, 10 * est)


def run_consensus(
    tm: TransitionMatrix,
    xi0,
    tol: float = 1e-5,
    max_iters: int | None = None,
    observer=None,
    record_trajectory: bool = True,
    criterion: str = "strict",
) -> ConsensusRun:
    """Iterate until every column is within ``tol`` of its network mean.

    A column has converged when its relative error is at most ``tol`` and no
    agent is further than ``tol * |mean|`` from the mean (``tol`` absolute
    when the sum is zero). Columns whose spread is down to float64 rounding
    level also count as converged, since no further round can improve them.
    With ``criterion="relative"`` only the relative
    error is tested, which is the iteration count the scaling experiments
    report. ``observer(t, x)`` is called with the state each agent transmits
    at round ``t = 1, 2, ...``.

    Raises
    ------
    ConsensusError
        When ``max_iters`` rounds pass without convergence. ``last_error``
        carries the final relative error.
    """
    if criterion not in ("strict", "relative"):
        raise ValueError(f"unknown criterion {criterion!r}")
    x = np.array(xi0, dtype=float)
    if x.shape[0] != tm.size:
        raise ValueError(f"state has {x.shape[0]} entries, graph has {tm.size} nodes")
    if max_iters is None:
        max_iters = default_max_iters(tm, tol)
    total0 = x.sum(axis=0)
    scale0 = np.sqrt(np.einsum("i...,i...->...", x, x))
    W = tm.W
    trajectory = []
    t = 0
    while True:
        err, maxdev, zero_mean, at_floor = _errors(x, total0, scale0)
        worst = float(np.max(err))
        if record_trajectory:
            trajectory.append(worst)
        bound = np.where(zero_mean, tol, tol * np.abs(total0) / tm.size)
        ok = err <= tol
        if criterion == "strict":
            ok &= maxdev <= bound
        if np.all(ok | at_floor):
            break
        if t >= max_iters:
            pending = np.atleast_1d(~(ok | at_floor))
            index = None
            if x.ndim > 1:
                index = int(np.argmax(np.where(pending, np.atleast_1d(err), -np.inf)))
            raise ConsensusError(
                f"no consensus after {t} rounds (relative error {worst:.3e} > {tol:.1e})",
                last_error=worst,
                index=index,
            )
        t += 1
        if observer is not None:
            observer(t, x)
        x = W @ x
    return ConsensusRun(np.asarray(xi0, dtype=float), x, t, trajectory)
