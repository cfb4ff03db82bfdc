"""Command-line entry point.

Subcommands::

    gen                     sample a preset mixture to CSV (+ sidecar, + truth JSON)
    corrupt                 apply an adversary to a sample CSV
    separation              classify how two (or k) Gaussians are separated
    anticoncentration verify  build and verify the anti-concentration polynomial
    check-conditions        test the deterministic sample conditions on a partition
    cluster                 candidate clusterings from the relaxation
    estimate                full pipeline: clusterings, fits, tournament
    report                  summary table over estimate artifacts

Exit codes: 0 success, 1 domain error (JSON on stderr), 2 usage error.
Every run writes its fully resolved configuration next to its output as
``<output stem>.config.json``.  The default seed comes from the
``SOSGMM_SEED`` environment variable (0 when unset).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, MissingInput, SosGmmError

SEED_ENV = "SOSGMM_SEED"


# ---------------------------------------------------------------------------
# configuration


def _between(lo=None, hi=None, lo_open=False, hi_open=False) -> Callable[[Any], bool]:
    def ok(v):
        if lo is not None and (v < lo or (lo_open and v == lo)):
            return False
        if hi is not None and (v > hi or (hi_open and v == hi)):
            return False
        return True

    return ok


_ANY = lambda v: True  # noqa: E731
_POS = _between(0, lo_open=True)
_FRAC = _between(0, 1, hi_open=True)
_NONNEG_INT = _between(0)
_POS_INT = _between(1)

# name -> (type, check, description of the allowed range)
FIELDS: dict[str, tuple[type, Callable[[Any], bool], str]] = {
    "seed": (int, _NONNEG_INT, ">= 0"),
    "threads": (int, _POS_INT, ">= 1"),
    "k": (int, _POS_INT, ">= 1"),
    "d": (int, _POS_INT, ">= 1"),
    "n": (int, _POS_INT, ">= 1"),
    "t": (int, _POS_INT, ">= 1"),
    "degree": (int, lambda v: v in (2, 4), "2 or 4"),
    "delta": (float, _POS, "> 0"),
    "xi": (float, _between(0, 1, lo_open=True), "in (0, 1]"),
    "eps": (float, _FRAC, "in [0, 1)"),
    "eta": (float, _between(0, 1, True, True), "in (0, 1)"),
    "distance": (float, _POS, "> 0"),
    "c3": (float, _POS, "> 0"),
    "C": (float, _POS, "> 0"),
    "Cprime": (float, _POS, "> 0"),
    "mc_samples": (int, _POS_INT, ">= 1"),
    "grid_points": (int, _between(3), ">= 3"),
    "n_dirs": (int, _POS_INT, ">= 1"),
    "max_candidates": (int, _POS_INT, ">= 1"),
    "filter_cf": (float, _POS, "> 0"),
    "tournament_mc": (int, _POS_INT, ">= 1"),
    "literal_threshold": (bool, _ANY, "true/false"),
    "preset": (str, lambda v: v in ("mean-sep", "var-sep", "cov-sep"), "mean-sep, var-sep or cov-sep"),
    "adversary": (str, lambda v: v in ("far-cluster", "mean-shift", "random-noise"), "a known adversary"),
    "strict": (bool, _ANY, "true/false"),
    "input": (str, _ANY, "path"),
    "samples": (str, _ANY, "path"),
    "fresh": (str, _ANY, "path"),
    "truth": (str, _ANY, "path"),
    "partition": (str, _ANY, "path"),
    "params": (list, _ANY, "list of paths"),
    "artifacts": (str, _ANY, "path"),
    "out": (str, _ANY, "path"),
    "debug_dump": (str, _ANY, "path"),
    "action": (str, lambda v: v == "verify", "verify"),
}


@dataclass
class RunConfig:
    """Fully resolved configuration of one subcommand run.

    ``values`` holds every parameter of the subcommand with defaults
    filled in.  Unknown keys and out-of-range values raise
    :class:`ConfigError`.
    """

    command: str
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        for key, val in list(self.values.items()):
            if key not in FIELDS:
                raise ConfigError(f"unknown configuration key {key!r} for {self.command}")
            if val is None:
                continue
            typ, check, allowed = FIELDS[key]
            if typ is float and isinstance(val, int) and not isinstance(val, bool):
                val = float(val)
            if typ is int and isinstance(val, float) and val.is_integer():
                val = int(val)
            if not isinstance(val, typ) or (typ is int and isinstance(val, bool)):
                raise ConfigError(f"{key} must be of type {typ.__name__}, got {val!r}")
            if not check(val):
                raise ConfigError(f"{key}={val!r} out of range ({allowed})")
            self.values[key] = val

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def to_dict(self) -> dict:
        return {"schema": 1, "command": self.command, "version": __version__, "config": dict(self.values)}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return cls(data["command"], dict(data["config"]))


# ---------------------------------------------------------------------------
# argument parsing


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # raise instead of exiting so main() controls the code
        raise _UsageError(f"{self.prog}: {message}")


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise _UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default ${SEED_ENV} or 0)")
    p.add_argument("--threads", type=int, default=1, help="threads for numeric kernels")
    p.add_argument("--config", default=None, help="JSON file of parameter values (flags override)")
    p.add_argument("--out", required=out_required, help="output path")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sosgmm", description="Robust clustering of Gaussian mixtures.")
    ap.add_argument("--version", action="version", version=f"sosgmm {__version__}")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", help="sample a preset mixture")
    p.add_argument("--preset", default="mean-sep")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--n", type=int, default=200)
    _common(p)

    p = sub.add_parser("corrupt", help="apply an adversary to a sample file")
    p.add_argument("--input", required=True)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--adversary", default="far-cluster")
    p.add_argument("--distance", type=float, default=1e3)
    _common(p)

    p = sub.add_parser("separation", help="classify the separation of Gaussians")
    p.add_argument("params", nargs="+", help="parameter JSON files (two or more)")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--c3", type=float, default=0.1)
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--Cprime", type=float, default=1.0)
    p.add_argument("--mc-samples", dest="mc_samples", type=int, default=100_000)
    _common(p)

    p = sub.add_parser("anticoncentration", help="anti-concentration certificate")
    p.add_argument("action", choices=["verify"])
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--C", type=float, default=None)
    p.add_argument("--grid-points", dest="grid_points", type=int, default=4001)
    _common(p)

    p = sub.add_parser("check-conditions", help="deterministic sample conditions")
    p.add_argument("--samples", required=True)
    p.add_argument("--partition", default=None, help="JSON list of index lists (default: by label)")
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--xi", type=float, default=0.1)
    p.add_argument("--t", type=int, default=4)
    p.add_argument("--n-dirs", dest="n_dirs", type=int, default=50)
    p.add_argument("--literal-threshold", dest="literal_threshold", action="store_true")
    _common(p)

    for name in ("cluster", "estimate"):
        p = sub.add_parser(name, help="candidate clusterings" if name == "cluster" else "full pipeline")
        p.add_argument("--samples", required=True)
        if name == "estimate":
            p.add_argument("--fresh", required=True)
            p.add_argument("--truth", default=None, help="true mixture JSON for a TV report")
            p.add_argument("--filter-cf", dest="filter_cf", type=float, default=10.0)
            p.add_argument("--tournament-mc", dest="tournament_mc", type=int, default=20000)
        p.add_argument("--k", type=int, default=2)
        p.add_argument("--t", type=int, default=4)
        p.add_argument("--delta", type=float, default=0.5)
        p.add_argument("--eps", type=float, default=0.05)
        p.add_argument("--eta", type=float, default=0.1)
        p.add_argument("--max-candidates", dest="max_candidates", type=int, default=1000)
        p.add_argument("--degree", type=int, default=2)
        p.add_argument("--strict", action="store_true", help="strict solver tolerances")
        if name == "cluster":
            p.add_argument("--debug-dump", dest="debug_dump", default=None,
                           help="write the first moment matrix and its residuals here")
        _common(p)

    p = sub.add_parser("report", help="summarize estimate artifacts")
    p.add_argument("--artifacts", required=True, help="directory holding estimate JSON files")
    _common(p)
    return ap


_META = {"command", "config"}


def resolve_config(ns: argparse.Namespace, argv: Sequence[str]) -> RunConfig:
    """Merge defaults, an optional config file and explicit flags."""
    values = {k: v for k, v in vars(ns).items() if k not in _META}
    if ns.config:
        path = Path(ns.config)
        if not path.exists():
            raise MissingInput(f"no such config file: {path}")
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        if isinstance(doc, dict) and "config" in doc and "command" in doc:
            doc = doc["config"]  # accept a config echo file as input
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        explicit = _explicit_dests(argv)
        for key, val in doc.items():
            if key == "schema":
                continue
            if key not in values:
                raise ConfigError(f"unknown configuration key {key!r} for {ns.command}")
            if key not in explicit:
                values[key] = val
    if values.get("seed") is None:
        values["seed"] = _default_seed()
    if ns.command == "gen" and values.get("d") is None:
        from .presets import DEFAULT_DIMS

        values["d"] = DEFAULT_DIMS.get(values.get("preset"), None)
    return RunConfig(ns.command, values)


def _explicit_dests(argv: Sequence[str]) -> set:
    out = set()
    for tok in argv:
        if tok.startswith("--"):
            out.add(tok[2:].split("=", 1)[0].replace("-", "_"))
    return out


# ---------------------------------------------------------------------------
# helpers


def _echo_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + ".config.json")


def _write_echo(cfg: RunConfig) -> None:
    from .io import write_json

    write_json(cfg.to_dict(), _echo_path(cfg.out))


def _set_threads(n: int):
    from threadpoolctl import threadpool_limits

    if n > 1:
        try:
            import numba

            with warnings.catch_warnings():
                warnings.simplefilter("ignore")  # threading-layer probing is noisy
                numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
        except Exception:  # no usable threading layer; kernels stay serial
            pass
    return threadpool_limits(limits=n)


def _flat_cov(g) -> list:
    return np.asarray(g.covariance).reshape(-1).tolist()


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(cfg: RunConfig) -> dict:
    from .gaussians import sample_mixture
    from .io import write_json, write_samples
    from .presets import preset_mixture

    m = preset_mixture(cfg.preset, cfg.k, cfg.d)
    s = sample_mixture(m, cfg.n, cfg.seed)
    out = write_samples(s, cfg.out)
    truth = out.with_name(out.stem + ".truth.json")
    write_json({"kind": "mixture", "preset": cfg.preset, **m.to_dict()}, truth)
    return {"samples": str(out), "truth": str(truth)}


def cmd_corrupt(cfg: RunConfig) -> dict:
    from .gaussians import corrupt
    from .io import read_samples, write_samples

    s = read_samples(cfg.input)
    c = corrupt(s, cfg.eps, cfg.adversary, seed=cfg.seed, distance=cfg.distance)
    out = write_samples(c, cfg.out)
    return {"samples": str(out), "replaced": int(c.corrupted.sum())}


def cmd_separation(cfg: RunConfig) -> dict:
    import itertools

    from .gaussians import MixtureModel
    from .io import read_gaussian, write_json
    from .separation import classify_separation, partition_mixture, tv_bracket, tv_monte_carlo

    if len(cfg.params) < 2:
        raise ConfigError("separation needs at least two parameter files")
    comps = [read_gaussian(p) for p in cfg.params]
    pairs = []
    for a, b in itertools.combinations(range(len(comps)), 2):
        v = classify_separation(comps[a], comps[b], cfg.eps, cfg.c3)
        lo, hi = tv_bracket(comps[a], comps[b])
        mc = tv_monte_carlo(comps[a], comps[b], cfg.mc_samples, cfg.seed)
        pairs.append({
            "pair": [a, b],
            "verdict": v.to_dict(),
            "tv_bracket": [lo, hi],
            "tv_monte_carlo": {"estimate": mc.value, "stderr": mc.stderr},
        })
    doc = {"kind": "separation", "files": list(cfg.params), "pairs": pairs}
    if len(comps) > 2:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            part = partition_mixture(
                MixtureModel.uniform(comps), cfg.eps, cfg.C, cfg.Cprime, cfg.c3, seed=cfg.seed
            )
        doc["partition"] = part.to_dict()
        doc["warnings"] = [str(w.message) for w in caught]
    write_json(doc, cfg.out)
    return {"verdict": str(cfg.out), "cases": [p["verdict"]["case"] for p in pairs]}


def cmd_anticoncentration(cfg: RunConfig) -> dict:
    from .anticoncentration import build_q
    from .io import write_json

    cert = build_q(cfg.eps, cfg.C, grid_points=cfg.grid_points, raise_on_failure=False)
    write_json({"kind": "anticoncentration", **cert.to_dict()}, cfg.out)
    if not cert.passed:
        from .errors import ConstructionFailed

        raise ConstructionFailed(f"certificate checks failed for eps={cfg.eps}; see {cfg.out}")
    return {"certificate": str(cfg.out), "pass": True}


def _partition_from(cfg: RunConfig, s) -> list:
    from .io import read_json

    if cfg.partition:
        blocks = read_json(cfg.partition)
        if isinstance(blocks, dict):
            blocks = blocks.get("partition", blocks.get("clusterings", [None])[0])
        if not isinstance(blocks, list):
            raise ConfigError("partition file must hold a list of index lists")
        return [np.asarray(b, dtype=int) for b in blocks]
    if s.labels is None:
        raise ConfigError("samples carry no labels; pass --partition")
    return [np.flatnonzero(s.labels == c) for c in np.unique(s.labels)]


def cmd_check_conditions(cfg: RunConfig) -> dict:
    from .io import read_samples, write_json
    from .moments import check_deterministic_conditions

    s = read_samples(cfg.samples)
    blocks = _partition_from(cfg, s)
    rep = check_deterministic_conditions(
        s, blocks, cfg.delta, cfg.xi, cfg.t, cfg.n_dirs, cfg.seed,
        literal_threshold=bool(cfg.literal_threshold),
    )
    write_json({"kind": "conditions", **rep.to_dict()}, cfg.out)
    return {"report": str(cfg.out), "passed": bool(rep.passed)}


def _cluster_params(cfg: RunConfig):
    from .clustering import ClusterParams
    from .sos import Tolerances

    return ClusterParams(
        t=cfg.t, delta=cfg.delta, eps=cfg.eps, eta=cfg.eta, degree=cfg.degree,
        max_candidates=cfg.max_candidates,
        tol=Tolerances() if cfg.strict else Tolerances.relaxed(),
    )


def cmd_cluster(cfg: RunConfig) -> dict:
    from .clustering import cluster
    from .io import read_samples, write_json

    s = read_samples(cfg.samples)
    params = _cluster_params(cfg)
    if cfg.debug_dump:
        from .sos import encode_axioms, fit_whitening, solve_feasible

        W, _ = fit_whitening(s.points, cfg.k, eps=cfg.eps, seed=cfg.seed)
        ax = encode_axioms(s.points, cfg.k, cfg.t, cfg.delta, cfg.eps, W, degree=cfg.degree)
        solve_feasible(ax, None, "max", params.tol, debug_path=cfg.debug_dump)
    t0 = time.perf_counter()
    cs = cluster(s.points, cfg.k, params, cfg.seed)
    doc = {"kind": "clustering", "samples": str(cfg.samples), "params": params.to_dict(),
           "runtime_seconds": time.perf_counter() - t0, **cs.to_dict()}
    if s.labels is not None:
        from .clustering import agreement

        mask = s.clean_mask()
        doc["agreement"] = [agreement(s.labels, c, mask) for c in cs.clusterings]
    write_json(doc, cfg.out)
    return {"clusterings": str(cfg.out), "count": len(cs)}


def cmd_estimate(cfg: RunConfig) -> dict:
    from .io import read_mixture, read_samples, write_json
    from .robust import PipelineParams, full_pipeline, match_components

    s = read_samples(cfg.samples)
    fresh = read_samples(cfg.fresh)
    params = PipelineParams(cluster=_cluster_params(cfg), c_f=cfg.filter_cf, mc_samples=cfg.tournament_mc)
    t0 = time.perf_counter()
    h, diag = full_pipeline(s, fresh, cfg.k, params, cfg.seed)
    runtime = time.perf_counter() - t0
    doc = {
        "kind": "estimate",
        "samples": str(Path(cfg.samples).resolve()),
        "fresh": str(Path(cfg.fresh).resolve()),
        "truth": None if cfg.truth is None else str(Path(cfg.truth).resolve()),
        "k": cfg.k,
        "means": [g.mean.tolist() for g in h.components],
        "covariances": [_flat_cov(g) for g in h.components],
        "weights": h.weights.tolist(),
        "hypothesis": h.to_dict(),
        "provenance": h.source,
        "diagnostics": diag,
        "runtime_seconds": runtime,
    }
    if cfg.truth is not None:
        doc["tv_report"] = match_components(h, read_mixture(cfg.truth))
    write_json(doc, cfg.out)
    return {"estimate": str(cfg.out), "runtime_seconds": runtime}


REPORT_COLUMNS = (
    "artifact", "k", "max_tv_error", "mean_tv_error", "weight_error",
    "misclassification", "candidates", "runtime_seconds",
)


def summarize_estimate(path: Path, doc: dict) -> dict:
    """One summary row for an estimate artifact."""
    from .gaussians import MixtureModel
    from .io import read_mixture, read_samples
    from .robust import HypothesisMixture, match_components, recluster

    h = HypothesisMixture.from_dict(doc["hypothesis"])
    row = {c: None for c in REPORT_COLUMNS}
    row.update(artifact=path.name, k=h.k, runtime_seconds=doc.get("runtime_seconds"),
               candidates=doc.get("diagnostics", {}).get("candidates"))
    truth: Optional[MixtureModel] = None
    if doc.get("truth"):
        truth = read_mixture(doc["truth"])
    if truth is not None:
        rep = doc.get("tv_report") or match_components(h, truth)
        tv = [v for v in rep["tv"] if v is not None]
        row.update(max_tv_error=max(tv), mean_tv_error=float(np.mean(tv)), weight_error=rep["weight_tv"])
        samples = doc.get("samples")
        if samples and Path(samples).exists():
            s = read_samples(samples)
            if s.labels is not None:
                perm = np.asarray(rep["permutation"])
                pred = perm[recluster(s.points, h.components)]
                mask = s.clean_mask()
                row["misclassification"] = float(np.mean(pred[mask] != s.labels[mask]))
    return row


def cmd_report(cfg: RunConfig) -> dict:
    from .io import read_json, write_json

    root = Path(cfg.artifacts)
    if not root.is_dir():
        raise MissingInput(f"no such artifact directory: {root}")
    rows = []
    for path in sorted(root.glob("*.json")):
        try:
            doc = read_json(path)
        except SosGmmError:
            continue
        if isinstance(doc, dict) and doc.get("kind") == "estimate":
            rows.append(summarize_estimate(path, doc))
    if not rows:
        raise MissingInput(f"no estimate artifacts in {root}")
    out = Path(cfg.out)
    if out.suffix == ".json":
        write_json({"kind": "report", "rows": rows}, out)
    else:
        with open(out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if v is None else (format(v, ".17g") if isinstance(v, float) else v))
                            for k, v in r.items()})
    return {"report": str(out), "rows": len(rows)}


COMMANDS = {
    "gen": cmd_gen,
    "corrupt": cmd_corrupt,
    "separation": cmd_separation,
    "anticoncentration": cmd_anticoncentration,
    "check-conditions": cmd_check_conditions,
    "cluster": cmd_cluster,
    "estimate": cmd_estimate,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry points


def _error(payload: dict) -> None:
    sys.stderr.write(json.dumps(payload) + "\n")


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Execute one subcommand; returns the exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise _UsageError("a subcommand is required")
        cfg = resolve_config(ns, argv)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        _error({"error": "UsageError", "code": "usage", "message": str(exc)})
        return 2
    except ConfigError as exc:
        _error(exc.to_dict())
        return 2
    except SosGmmError as exc:
        _error(exc.to_dict())
        return 1
    try:
        Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
        _write_echo(cfg)
        with _set_threads(cfg.threads):
            summary = COMMANDS[cfg.command](cfg)
    except SosGmmError as exc:
        _error(exc.to_dict())
        return 1
    except (ValueError, np.linalg.LinAlgError) as exc:
        _error({"error": type(exc).__name__, "code": "domain_error", "message": str(exc)})
        return 1
    print(json.dumps(summary))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
