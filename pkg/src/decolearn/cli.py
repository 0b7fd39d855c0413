"""Command line experiment harness.

``decolearn <scaling|privacy|aggbench|learn|synth> --config FILE [--out DIR] [--seed N]``

Every CSV starts with a ``#`` comment holding the resolved config. Exit
codes: 0 success, 2 config error, 3 aggregation or consensus failure, 4 I/O
error, 5 EM stalled or did not converge.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .consensus import estimate_iterations, iterations_to_tolerance
from .exceptions import (
    ConsensusError,
    DecolearnError,
    EMStallError,
    GraphError,
    InvalidScenarioError,
    StepSizeError,
)
from .files import (
    ConfigError,
    DataFileError,
    find_agent_files,
    header_comment,
    load_config,
    read_agent_csv,
    resolve_config,
    write_agent_csv,
    write_csv,
)
from .graph import build_graph, spectral_gap, transition_matrix
from .learning.mixture import AggregatorConfig, Dataset, federated_em
from .privacy import AttackScenario, collusion_grid, eaves_grid
from .sharing import chunked_aggregate, consensus_aggregate, shamir_aggregate
from .simnet import monte_carlo_breach

log = logging.getLogger("decolearn")

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_IO, EXIT_EM = 0, 2, 3, 4, 5

SCALING_COLUMNS = ["graph_type", "S", "eps", "delta", "predicted_t", "measured_t",
                   "lambda2", "error"]
AGGBENCH_COLUMNS = ["method", "S", "N_C", "tol", "rounds", "total_iterations",
                    "scalar_messages", "abs_error", "error"]

DEFAULTS = {
    "scaling": {
        "graph_types": ["ring", "expander"],
        "S": list(range(7, 200)),
        "delta": 1e-3,
        "eps": None,
        "trials": 5,
        "low": -1.0,
        "high": 2.0,
        "seed": 0,
    },
    "privacy": {
        "S": 100,
        "d_s": 3,
        "N_C_max": 20,
        "N_L_max": None,
        "E": None,
        "montecarlo": [],
        "trials": 100_000,
        "seed": 0,
    },
    "aggbench": {
        "S": [7, 13, 19, 31],
        "methods": ["shamir", "chunk"],
        "N_C": 3,
        "tol": 1e-5,
        "graph": "expander",
        "low": -1.0,
        "high": 2.0,
        "seed": 0,
    },
    "learn": {
        "data_dir": ".",
        "K": 2,
        "gamma": 1.0,
        "lambda0": 1e-3,
        "rho": 0.1,
        "tol": 1e-6,
        "max_rounds": 200,
        "aggregator": "direct",
        "N_C": 3,
        "eps": None,
        "agg_tol": 1e-8,
        "agg_max_iters": None,
        "graph": "expander",
        "covariance_form": "derived",
        "seed": 0,
    },
    "synth": {
        "S": 3,
        "K": 2,
        "M": 2,
        "N": 100,
        "pi": None,
        "skew": 1.0,
        "separation": 4.0,
        "seed": 0,
    },
}


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


# --------------------------------------------------------------------------
# scaling
# --------------------------------------------------------------------------


def cmd_scaling(cfg: dict, out: Path) -> int:
    kinds = _as_list(cfg["graph_types"])
    sizes = sorted({int(s) for s in _as_list(cfg["S"])})
    delta = float(cfg["delta"])
    _require(kinds and sizes, "scaling: graph_types and S must be non-empty")
    _require(0 < delta < 1, f"scaling: delta must lie in (0, 1), got {delta}")
    _require(int(cfg["trials"]) >= 1, "scaling: trials must be positive")
    _require(min(sizes) >= 3, "scaling: S must be at least 3")
    rows = []
    for kind in kinds:
        for S in sizes:
            row = {"graph_type": kind, "S": S, "delta": delta, "error": ""}
            try:
                g = build_graph(kind, S, seed=int(cfg["seed"]) + S)
                tm = transition_matrix(g, cfg["eps"])
                lam2, gap = spectral_gap(tm)
                row.update(eps=tm.eps, lambda2=lam2,
                           predicted_t=estimate_iterations(S, delta, gap))
                rng = np.random.default_rng([int(cfg["seed"]), S])
                X0 = rng.uniform(cfg["low"], cfg["high"], size=(S, int(cfg["trials"])))
                counts = iterations_to_tolerance(tm, X0, delta)
                if np.any(counts < 0):
                    raise ConsensusError(f"no convergence for S={S}")
                row["measured_t"] = float(counts.mean())
            except (DecolearnError, ValueError) as exc:
                row["error"] = f"{type(exc).__name__}: {exc}"
                log.warning("scaling %s S=%d failed: %s", kind, S, exc)
            rows.append(row)
    rows.sort(key=lambda r: (r["graph_type"], r["S"]))
    write_csv(out / "scaling.csv", rows, SCALING_COLUMNS, header_comment("scaling", cfg))
    return EXIT_OK


# --------------------------------------------------------------------------
# privacy
# --------------------------------------------------------------------------


def cmd_privacy(cfg: dict, out: Path) -> int:
    S, d_s = int(cfg["S"]), int(cfg["d_s"])
    nc_max = int(cfg["N_C_max"])
    nl_max = S - 1 if cfg["N_L_max"] is None else int(cfg["N_L_max"])
    E = d_s * S if cfg["E"] is None else int(cfg["E"])
    _require(S >= 2 and 1 <= d_s <= S - 1, f"privacy: invalid S={S}, d_s={d_s}")
    _require(nc_max >= 1, "privacy: N_C_max must be positive")
    _require(1 <= nl_max <= S - 1, f"privacy: N_L_max must lie in [1, {S - 1}]")
    _require(E >= d_s, f"privacy: E={E} smaller than d_s")
    comment = header_comment("privacy", cfg)
    coll = collusion_grid(S, d_s, range(1, nc_max + 1), range(1, nl_max + 1))
    write_csv(out / "collusion.csv", coll, ["N_C", "N_L", "exact", "bound"], comment)
    eav = eaves_grid(E, d_s, range(1, nc_max + 1), range(0, E + 1))
    write_csv(out / "eavesdropping.csv", eav, ["N_C", "N_E", "N_E_over_E", "exact", "bound"],
              comment)
    reports = []
    for i, spec in enumerate(_as_list(cfg["montecarlo"])):
        _require(isinstance(spec, dict), f"privacy: montecarlo entry {i} must be an object")
        sc = AttackScenario(**spec)
        seq = np.random.SeedSequence([int(cfg["seed"]), i])
        reports.append(monte_carlo_breach(sc, int(cfg["trials"]), seed=seq).to_dict())
    if reports:
        (out / "montecarlo.json").write_text(json.dumps(reports, indent=2) + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------
# aggbench
# --------------------------------------------------------------------------


def cmd_aggbench(cfg: dict, out: Path) -> int:
    sizes = sorted({int(s) for s in _as_list(cfg["S"])})
    methods = _as_list(cfg["methods"])
    n_chunks = [int(n) for n in _as_list(cfg["N_C"])]
    tol = float(cfg["tol"])
    _require(sizes and methods and n_chunks, "aggbench: S, methods and N_C must be non-empty")
    bad = set(methods) - {"plain", "shamir", "chunk"}
    _require(not bad, f"aggbench: unknown methods {sorted(bad)}")
    _require(min(n_chunks) >= 1, "aggbench: N_C must be positive")
    rows = []
    for S in sizes:
        rng = np.random.default_rng([int(cfg["seed"]), S])
        xi = rng.uniform(cfg["low"], cfg["high"], size=S)
        truth = float(np.sum(xi))
        g = build_graph(cfg["graph"], S, seed=int(cfg["seed"]) + S)
        for method in methods:
            for nc in (n_chunks if method == "chunk" else [None]):
                row = {"method": method, "S": S, "N_C": "" if nc is None else nc, "tol": tol,
                       "error": ""}
                seed = [int(cfg["seed"]), S, nc or 0]
                try:
                    if method == "plain":
                        res = consensus_aggregate(xi, g, tol=tol)
                    elif method == "shamir":
                        res = shamir_aggregate(xi, g, tol=tol, seed=seed)
                    else:
                        res = chunked_aggregate(xi, g, nc, tol=tol, seed=seed)
                    row.update(rounds=res.rounds, total_iterations=res.total_iterations,
                               scalar_messages=res.scalar_messages,
                               abs_error=abs(float(res.value) - truth))
                except DecolearnError as exc:
                    row["error"] = f"{type(exc).__name__}: {exc}"
                    log.warning("aggbench %s S=%d failed: %s", method, S, exc)
                rows.append(row)
    rows.sort(key=lambda r: (r["method"], r["S"], str(r["N_C"])))
    write_csv(out / "aggbench.csv", rows, AGGBENCH_COLUMNS, header_comment("aggbench", cfg))
    return EXIT_OK


# --------------------------------------------------------------------------
# learn
# --------------------------------------------------------------------------


def cmd_learn(cfg: dict, out: Path, base: Path) -> int:
    data_dir = Path(cfg["data_dir"])
    if not data_dir.is_absolute():
        data_dir = base / data_dir
    files = find_agent_files(data_dir)
    data = Dataset([read_agent_csv(p) for p in files])
    _require(data.S >= 3, f"learn: need at least 3 agent files, found {data.S}")
    agg = AggregatorConfig(cfg["aggregator"], graph=cfg["graph"], eps=cfg["eps"],
                           tol=float(cfg["agg_tol"]), n_chunks=int(cfg["N_C"]),
                           max_iters=cfg["agg_max_iters"])
    status = EXIT_OK
    try:
        res = federated_em(
            data, int(cfg["K"]), gamma=float(cfg["gamma"]), lambda0=float(cfg["lambda0"]),
            rho=float(cfg["rho"]), aggregator=agg, seed=int(cfg["seed"]),
            tol=float(cfg["tol"]), max_rounds=int(cfg["max_rounds"]),
            covariance_form=cfg["covariance_form"],
        )
    except EMStallError as exc:
        trace = exc.state.get("trace", [])
        _write_trace(out, trace, cfg)
        log.error("%s", exc)
        return EXIT_EM
    if not res.converged:
        log.error("EM did not converge in %d rounds", res.n_rounds)
        status = EXIT_EM
    p = res.params
    model = {
        "K": p.K,
        "M": p.M,
        "agents": [f.name for f in files],
        "mu": p.mu.tolist(),
        "Lambda": [L.ravel().tolist() for L in p.Lambda],
        "pi": p.pi.tolist(),
        "objective_trace": list(res.objective_trace),
        "n_rounds": res.n_rounds,
        "converged": res.converged,
        "config": cfg,
    }
    (out / "model.json").write_text(json.dumps(model, indent=2, default=str) + "\n")
    _write_trace(out, res.objective_trace, cfg)
    return status


def _write_trace(out: Path, trace, cfg):
    rows = [{"round": i + 1, "objective": v} for i, v in enumerate(trace)]
    write_csv(out / "objective_trace.csv", rows, ["round", "objective"],
              header_comment("learn", cfg))


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------


def synthesize(cfg: dict):
    """Agent samples, labels and ground truth for a multi-task mixture."""
    S, K, M = int(cfg["S"]), int(cfg["K"]), int(cfg["M"])
    _require(S >= 1 and K >= 1 and M >= 1, f"synth: S, K, M must be positive, got {S}, {K}, {M}")
    sizes = [int(n) for n in _as_list(cfg["N"])]
    if len(sizes) == 1:
        sizes = sizes * S
    _require(len(sizes) == S, f"synth: N lists {len(sizes)} sizes for {S} agents")
    _require(min(sizes) >= 1, "synth: every agent needs at least one sample")
    rng = np.random.default_rng(int(cfg["seed"]))
    if cfg["pi"] is None:
        _require(float(cfg["skew"]) > 0, "synth: skew must be positive")
        pi = rng.dirichlet(np.full(K, float(cfg["skew"])), size=S)
    else:
        pi = np.asarray(cfg["pi"], dtype=float)
        if pi.ndim == 1:
            pi = np.tile(pi, (S, 1))
        _require(pi.shape == (S, K), f"synth: pi must be {S} x {K}, got {pi.shape}")
        _require(np.all(pi >= 0) and np.allclose(pi.sum(axis=1), 1.0),
                 "synth: rows of pi must be probability vectors")
    means = rng.normal(0.0, float(cfg["separation"]), size=(K, M))
    covs = []
    for _ in range(K):
        A = rng.normal(0.0, 0.3, size=(M, M)) + np.eye(M)
        covs.append(A @ A.T)
    covs = np.array(covs)
    chols = np.linalg.cholesky(covs)
    agents, labels = [], []
    for a in range(S):
        z = rng.choice(K, size=sizes[a], p=pi[a])
        eps = rng.standard_normal((sizes[a], M))
        X = means[z] + np.einsum("nij,nj->ni", chols[z], eps)
        agents.append(X)
        labels.append(z)
    truth = {"means": means.tolist(), "covariances": covs.tolist(), "pi": pi.tolist(),
             "N": sizes, "labels": [z.tolist() for z in labels]}
    return agents, labels, truth


def cmd_synth(cfg: dict, out: Path) -> int:
    agents, _, truth = synthesize(cfg)
    comment = header_comment("synth", cfg)
    for a, X in enumerate(agents):
        write_agent_csv(out / f"agent_{a}.csv", X, comment)
    truth["config"] = cfg
    (out / "ground_truth.json").write_text(json.dumps(truth, indent=2) + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decolearn", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(DEFAULTS))
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--out", default=".", help="output directory (created if missing)")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        raw = load_config(args.config)
        cfg = resolve_config(raw, DEFAULTS[args.command], args.command)
        if args.seed is not None:
            _require(0 <= args.seed < 2**64, f"seed must fit in 64 bits, got {args.seed}")
            cfg["seed"] = args.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "scaling":
            return cmd_scaling(cfg, out)
        if args.command == "privacy":
            return cmd_privacy(cfg, out)
        if args.command == "aggbench":
            return cmd_aggbench(cfg, out)
        if args.command == "learn":
            return cmd_learn(cfg, out, Path(args.config).resolve().parent)
        return cmd_synth(cfg, out)
    except DataFileError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (ConfigError, InvalidScenarioError, GraphError, StepSizeError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except ConsensusError as exc:
        log.error("aggregation failed: %s", exc)
        return EXIT_CONVERGENCE
    except EMStallError as exc:
        log.error("%s", exc)
        return EXIT_EM
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (TypeError, ValueError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
