"""Breach probabilities of random chunking under three attack models.

All products are accumulated as sums of ``log1p`` terms so large colluder
counts or degrees cannot underflow. Reported probabilities are clamped to
``[0, 1]``; the raw values are kept in ``BreachReport.diagnostics``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .exceptions import InvalidScenarioError


@dataclass(frozen=True)
class AttackScenario:
    """Parameters of one attack on victim ``s``.

    ``kind`` is ``"independent"``, ``"collusion"`` or ``"eavesdropping"``.
    ``E`` is the total degree ``sum_i d_i`` (``d * S`` for ``d``-regular
    graphs), the number of links an eavesdropper chooses from.
    """

    kind: str
    S: int
    d_s: int
    N_C: int
    N_L: int = 0
    N_E: int = 0
    E: int = 0
    eta: float = 0.01

    def __post_init__(self):
        if self.kind not in ("independent", "collusion", "eavesdropping"):
            raise InvalidScenarioError(f"unknown attack kind {self.kind!r}")
        if min(self.S, self.d_s, self.N_C) < 1 or min(self.N_L, self.N_E, self.E) < 0:
            raise InvalidScenarioError(f"counts must be positive: {self}")
        if self.d_s > self.S - 1:
            raise InvalidScenarioError(f"d_s={self.d_s} exceeds S-1={self.S - 1}")
        if self.kind == "collusion" and not 1 <= self.N_L <= self.S - 1:
            raise InvalidScenarioError(f"need 1 <= N_L <= S-1, got N_L={self.N_L}")
        if self.kind == "eavesdropping":
            if self.E < self.d_s:
                raise InvalidScenarioError(f"E={self.E} smaller than d_s={self.d_s}")
            if self.N_E > self.E:
                raise InvalidScenarioError(f"N_E={self.N_E} exceeds E={self.E}")

    def report(self) -> "BreachReport":
        if self.kind == "collusion":
            return collusion_breach(self.S, self.d_s, self.N_L, self.N_C)
        if self.kind == "eavesdropping":
            return eaves_breach(self.E, self.d_s, self.N_E, self.N_C)
        return BreachReport(
            exact=None,
            bound=independent_breach_bound(self.S, self.d_s, self.N_C),
        )


@dataclass
class BreachReport:
    exact: Optional[float]
    bound: float
    secure_bound: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _clamp(p: float) -> float:
    return min(1.0, max(0.0, p))


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise InvalidScenarioError(msg)


def independent_breach_bound(S: int, d_s: int, N_C: int) -> float:
    """Union bound ``(S-1) (d_s/(S-1))**N_C`` on some peer seeing every chunk."""
    _require(S >= 2 and 1 <= d_s <= S - 1 and N_C >= 1, f"invalid S={S}, d_s={d_s}, N_C={N_C}")
    return _clamp(math.exp(math.log(S - 1) + N_C * math.log(d_s / (S - 1))))


def independent_secure_bound(S: int, d_max: int, N_C: int) -> float:
    """Lower bound on the probability that no node in the network is breached."""
    _require(S >= 2 and 1 <= d_max <= S - 1 and N_C >= 1,
             f"invalid S={S}, d_max={d_max}, N_C={N_C}")
    raw = 1.0 - math.exp(math.log(S) + math.log(S - 1) + N_C * math.log(d_max / (S - 1)))
    return max(0.0, raw)


def _breach_from_log_miss(log_miss: float, N_C: int) -> float:
    """``(1 - exp(log_miss))**N_C`` without cancellation."""
    if log_miss == -math.inf:
        return 1.0
    hit = -math.expm1(log_miss)
    if hit <= 0.0:
        return 0.0
    return math.exp(N_C * math.log(hit))


def collusion_breach(S: int, d_s: int, N_L: int, N_C: int) -> BreachReport:
    """Probability that ``N_L`` colluders see a chunk of ``s`` in every round.

    Exact value ``{1 - prod_{l=1}^{N_L} (1 - d_s/(S-l))}**N_C`` and its
    upper bound ``exp(-N_C (1 - d_s/(S-N_L))**N_L)``; both are 1 once
    ``N_L >= S - d_s`` because every neighbor set then contains a colluder.
    """
    _require(S >= 2 and 1 <= d_s <= S - 1, f"invalid S={S}, d_s={d_s}")
    _require(1 <= N_L <= S - 1, f"need 1 <= N_L <= S-1, got {N_L}")
    _require(N_C >= 1, f"need N_C >= 1, got {N_C}")
    if N_L >= S - d_s:
        return BreachReport(1.0, 1.0, diagnostics={"regime": "saturated"})
    log_miss = sum(math.log1p(-d_s / (S - l)) for l in range(1, N_L + 1))
    exact = _breach_from_log_miss(log_miss, N_C)
    log_q = N_L * math.log1p(-d_s / (S - N_L))
    raw_bound = math.exp(-N_C * math.exp(log_q))
    return BreachReport(
        _clamp(exact),
        _clamp(raw_bound),
        diagnostics={"log_p_no_colluder": log_miss, "raw_exact": exact, "raw_bound": raw_bound},
    )


def eaves_breach(E: int, d_s: int, N_E: int, N_C: int) -> BreachReport:
    """Probability that ``N_E`` tapped links cover one of the victim's links every round."""
    _require(1 <= d_s <= E, f"invalid E={E}, d_s={d_s}")
    _require(0 <= N_E <= E, f"need 0 <= N_E <= E, got {N_E}")
    _require(N_C >= 1, f"need N_C >= 1, got {N_C}")
    if N_E == 0:
        return BreachReport(0.0, _clamp(math.exp(-N_C)), diagnostics={"regime": "untapped"})
    if N_E > E - d_s:
        return BreachReport(1.0, 1.0, diagnostics={"regime": "saturated"})
    log_miss = sum(math.log1p(-N_E / (E - l)) for l in range(d_s))
    exact = _breach_from_log_miss(log_miss, N_C)
    frac = N_E / (E - d_s + 1)
    if frac >= 1.0:
        raw_bound = 1.0
    else:
        raw_bound = math.exp(-N_C * math.exp(d_s * math.log1p(-frac)))
    return BreachReport(
        _clamp(exact),
        _clamp(raw_bound),
        diagnostics={"log_p_untapped": log_miss, "raw_exact": exact, "raw_bound": raw_bound},
    )


def min_chunks_collusion(eta: float, S: int, d_s: int, N_L: int) -> int:
    """Smallest ``N_C`` whose collusion bound is at most ``eta``."""
    _require(0 < eta < 1, f"eta must lie in (0, 1), got {eta}")
    _require(1 <= d_s <= S - 1, f"invalid S={S}, d_s={d_s}")
    _require(N_L >= 0, f"N_L must be nonnegative, got {N_L}")
    if N_L >= S - d_s:
        raise InvalidScenarioError(
            f"N_L={N_L} >= S-d_s={S - d_s}: no number of chunks protects the victim"
        )
    if N_L == 0:
        return 1
    factor = math.exp(-N_L * math.log1p(-d_s / (S - N_L)))
    return max(1, math.ceil(abs(math.log(eta)) * factor))


def min_chunks_eaves(eta: float, E: int, d_s: int, N_E: int) -> int:
    """Smallest ``N_C`` whose eavesdropping bound is at most ``eta``."""
    _require(0 < eta < 1, f"eta must lie in (0, 1), got {eta}")
    _require(1 <= d_s <= E, f"invalid E={E}, d_s={d_s}")
    if N_E >= E - d_s + 1:
        raise InvalidScenarioError(
            f"N_E={N_E} taps too many links (limit {E - d_s}); no finite N_C"
        )
    if N_E == 0:
        return 1
    factor = math.exp(-d_s * math.log1p(-N_E / (E - d_s + 1)))
    return max(1, math.ceil(abs(math.log(eta)) * factor))


def collusion_grid(S=100, d_s=3, n_chunks=range(1, 21), n_colluders=range(1, 100)):
    rows = []
    for nc in n_chunks:
        for nl in n_colluders:
            rep = collusion_breach(S, d_s, nl, nc)
            rows.append({"N_C": nc, "N_L": nl, "exact": rep.exact, "bound": rep.bound})
    return rows


def eaves_grid(E=300, d_s=3, n_chunks=range(1, 21), n_tapped=None):
    if n_tapped is None:
        n_tapped = range(0, E + 1)
    rows = []
    for nc in n_chunks:
        for ne in n_tapped:
            rep = eaves_breach(E, d_s, ne, nc)
            rows.append({"N_C": nc, "N_E": ne, "N_E_over_E": ne / E,
                         "exact": rep.exact, "bound": rep.bound})
    return rows


def write_grid_csv(rows, path, header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def breach_matrix(rows, row_key: str, col_key: str, value: str = "exact") -> np.ndarray:
    """Pivot grid rows into a heat-map array indexed by sorted key values."""
    rk = sorted({r[row_key] for r in rows})
    ck = sorted({r[col_key] for r in rows})
    out = np.full((len(rk), len(ck)), np.nan)
    ri = {k: i for i, k in enumerate(rk)}
    ci = {k: i for i, k in enumerate(ck)}
    for r in rows:
        out[ri[r[row_key]], ci[r[col_key]]] = r[value]
    return out
