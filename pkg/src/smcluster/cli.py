"""Command-line interface: generate, run, eval and sweep."""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .baselines import AgglomConfig, McmcConfig, agglomerative_run, mcmc_run
from .core import CrpPrior, Partition
from .data import (
    DataFormatError,
    GmmGenConfig,
    Stream,
    gen_circles,
    gen_gmm,
    load_stream,
    write_points,
)
from .metrics import EvalReport, bcubed, score_clustering
from .models import LikelihoodCache, model_from_config
from .proposal import SurrogatePair
from .smc import run_smc
from .splitsmc import run_split_smc

ALGORITHMS = ("greedy", "smc", "split-smc", "gibbs", "mwg", "agglom")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
OUTDIR_ENV = "SMCLUSTER_OUTDIR"


class ConfigError(ValueError):
    """Invalid configuration or inputs (exit code 2)."""


@dataclass
class RunConfig:
    algorithm: str = "split-smc"
    m: int = 100
    m_prime: Optional[int] = None
    alpha: float = 1.0
    model: dict = field(default_factory=lambda: {"kind": "nig"})
    surrogate: Optional[dict] = None
    seed: int = 0
    shuffle_seed: Optional[int] = None
    budget_seconds: float = math.inf
    patience: Optional[int] = None
    batch_size: Optional[int] = None
    kind: str = "points"
    input: Optional[str] = None
    output: Optional[str] = None
    trace: Optional[str] = None

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {', '.join(ALGORITHMS)}")
        if not isinstance(self.m, int) or self.m < 1:
            raise ConfigError("m must be an integer >= 1")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.kind not in ("points", "fragments"):
            raise ConfigError("kind must be 'points' or 'fragments'")
        if self.surrogate is not None:
            if self.algorithm in ("smc", "split-smc", "greedy") and (self.m_prime is None or self.m_prime < 1):
                raise ConfigError("m_prime must be >= 1 when a surrogate is given")
        if self.algorithm == "mwg" and self.surrogate is None:
            raise ConfigError("mwg needs a surrogate model")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.budget_seconds < 0:
            raise ConfigError("budget_seconds must be non-negative")
        if self.input is None:
            raise ConfigError("an input dataset is required")

    @classmethod
    def from_mapping(cls, cfg: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        out = cls(**cfg)
        if out.budget_seconds is None:
            out.budget_seconds = math.inf
        return out


CONFIG_HELP = """\
Run configuration (JSON object). Keys:
  algorithm       greedy | smc | split-smc | gibbs | mwg | agglom   (default split-smc)
  m               particle count, >= 1; greedy forces m = 1         (default 100)
  m_prime         surrogate shortlist size, required with a surrogate
  alpha           concentration, > 0                                (default 1.0)
  model           likelihood spec, e.g. {"kind": "nig", "mu0": 0, "lambda": 0.0002, "a": 2, "b": 0.5}
                  {"kind": "bigram", "corpus_path": "names.txt", "rescale_c": 1.0}
                  {"kind": "unit"}; any spec may add "log_scale_per_point" or
                  "log_scale_per_cluster"
  surrogate       optional likelihood spec used for proposals (smc, split-smc, mwg)
  seed            master seed                                       (default 0)
  shuffle_seed    shuffle the input before streaming (omit to keep file order)
  budget_seconds  wall-clock budget for gibbs/mwg/agglom
  patience        sweeps (gibbs/mwg, default 500) or iterations (agglom, default 100)
  batch_size      agglom candidate pairs per iteration; omit for all pairs
  kind            points | fragments                                (default points)
  input, output, trace   file paths; outputs go under $SMCLUSTER_OUTDIR when relative
"""


def _resolve_out(path: Optional[str]) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    base = os.environ.get(OUTDIR_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    return p


def _corpus(stream: Stream) -> Optional[list[str]]:
    if stream.records and hasattr(stream.records[0], "attributes"):
        return [str(r.attributes["name"]) for r in stream.records]
    return None


def _scorer(spec: dict, stream: Stream) -> LikelihoodCache:
    try:
        model = model_from_config(spec, corpus=None if "corpus_path" in spec else _corpus(stream))
    except (ValueError, TypeError, OSError) as exc:
        raise ConfigError(f"bad model spec: {exc}") from None
    payloads = stream.payloads
    if spec.get("kind") == "bigram":
        payloads = [p["name"] for p in payloads]
    return LikelihoodCache.for_payloads(model, payloads)


def execute(cfg: RunConfig, stream: Stream, trace_fh=None) -> tuple[Partition, dict]:
    """Run one configured algorithm over an already loaded stream."""
    if cfg.kind == "fragments" and cfg.model.get("kind") == "bigram":
        missing = [stream.original_ids[k] for k, r in enumerate(stream.records) if not r.attributes.get("name")]
        if missing:
            raise ConfigError(f"fragments without a name: {missing[:10]}")
    scorer = _scorer(cfg.model, stream)
    surrogate = _scorer(cfg.surrogate, stream) if cfg.surrogate is not None else None
    prior = CrpPrior(cfg.alpha)
    ids = list(range(len(stream)))
    gold = stream.gold()
    t0 = time.perf_counter()
    summary: dict = {"algorithm": cfg.algorithm, "n": len(ids)}
    if cfg.algorithm in ("greedy", "smc", "split-smc"):
        m = 1 if cfg.algorithm == "greedy" else cfg.m
        proposal = SurrogatePair(surrogate, scorer, cfg.m_prime) if surrogate is not None else None
        if cfg.algorithm == "split-smc":
            state, trace = run_split_smc(ids, scorer, prior, m, trace_sink=trace_fh, proposal=proposal,
                                         gold=gold, seed=cfg.seed)
            part = state.top()
            summary["n_subproblems"] = len(state.subproblems)
        else:
            pset, trace = run_smc(ids, scorer, prior, m, trace_sink=trace_fh, proposal=proposal, gold=gold)
            part = pset.top()
        summary["log_effective_particles"] = trace.last.log_effective_particles
    elif cfg.algorithm in ("gibbs", "mwg"):
        mc = McmcConfig(cfg.budget_seconds, cfg.patience or 500, cfg.seed)
        part, info = mcmc_run(ids, scorer, prior, mc, cfg.algorithm, surrogate, trace_fh)
        summary["sweeps"] = info["sweeps"]
        summary["budget_exceeded"] = info["timed_out"]
    else:
        ac = AgglomConfig(cfg.batch_size, cfg.patience or 100, 0.0, cfg.seed, cfg.budget_seconds)
        part = agglomerative_run(ids, scorer, prior, ac, trace_fh)
    summary["runtime_seconds"] = time.perf_counter() - t0
    summary["log_posterior"] = score_clustering(part, cfg.alpha, scorer)
    summary["model_evaluations"] = scorer.misses
    if surrogate is not None:
        summary["surrogate_evaluations"] = surrogate.misses
    summary["n_clusters"] = len(part)
    if gold is not None:
        rep = bcubed(part, gold)
        summary.update(precision=rep.precision, recall=rep.recall, f1=rep.f1)
    return part, summary


def write_clustering(part: Partition, original_ids: list, path) -> None:
    labels = part.labels()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "cluster"])
        for k, oid in enumerate(original_ids):
            w.writerow([oid, labels[k]])


def read_clustering(path) -> dict:
    """Map original id (as text) to label from an ``id,cluster`` file or a dataset with gold."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        out = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            if line.strip():
                rec = json.loads(line)
                if rec.get("gold_entity") is None:
                    raise ConfigError(f"{path}: line {lineno} has no gold_entity")
                out[str(rec["id"])] = rec["gold_entity"]
        return out
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        raise ConfigError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    col = "cluster" if "cluster" in header else "gold" if "gold" in header else None
    if header[0] != "id" or col is None:
        raise ConfigError(f"{path}: expected an 'id' column and a 'cluster' or 'gold' column")
    j = header.index(col)
    return {row[0]: row[j] for row in rows[1:] if row}


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _overrides(args) -> dict:
    out = {}
    for key in ("algorithm", "m", "m_prime", "alpha", "seed", "shuffle_seed", "budget_seconds",
                "patience", "batch_size", "kind", "input", "output", "trace"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    if getattr(args, "model", None):
        out["model"] = json.loads(args.model)
    if getattr(args, "surrogate", None):
        out["surrogate"] = json.loads(args.surrogate)
    return out


def cmd_generate(args) -> int:
    if args.kind == "gmm":
        cfg = GmmGenConfig(seed=args.seed, n=args.n or 700)
        records = gen_gmm(cfg)
        meta = {"kind": "gmm", "seed": args.seed, "config": asdict(cfg), "config_hash": cfg.digest()}
    else:
        records = gen_circles(args.seed)
        params = {"seed": args.seed}
        meta = {"kind": "circles", "seed": args.seed,
                "config_hash": hashlib.sha256(json.dumps(params).encode()).hexdigest()[:16]}
    out = _resolve_out(args.output)
    try:
        write_points(records, out)
        with open(f"{out}.meta.json", "w") as fh:
            json.dump(meta, fh, sort_keys=True, indent=1)
            fh.write("\n")
    except OSError as exc:
        print(f"error: cannot write {out}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"path": str(out), "n": len(records)}))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = RunConfig.from_mapping({**_load_config(args.config), **_overrides(args)})
    cfg.validate()
    try:
        stream = load_stream(cfg.input, cfg.kind, cfg.shuffle_seed,
                             require_name=cfg.model.get("kind") == "bigram")
    except (OSError, DataFormatError) as exc:
        raise ConfigError(f"cannot load {cfg.input}: {exc}") from None
    trace_path = _resolve_out(cfg.trace)
    trace_fh = open(trace_path, "w") if trace_path else None
    try:
        part, summary = execute(cfg, stream, trace_fh)
    finally:
        if trace_fh:
            trace_fh.close()
    out = _resolve_out(cfg.output)
    if out is not None:
        write_clustering(part, stream.original_ids, out)
        summary["output"] = str(out)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = read_clustering(args.pred)
    gold = read_clustering(args.gold)
    missing = sorted(set(gold) - set(pred))
    extra = sorted(set(pred) - set(gold))
    if missing or extra:
        raise ConfigError(f"id covers differ: missing from pred {missing[:10]}, extra in pred {extra[:10]}")
    ids = sorted(gold)
    index = {oid: k for k, oid in enumerate(ids)}
    pred_p = Partition.from_labels({index[i]: pred[i] for i in ids})
    gold_p = Partition.from_labels({index[i]: gold[i] for i in ids})
    rep = bcubed(pred_p, gold_p)
    if args.data:
        cfg = RunConfig.from_mapping({**_load_config(args.config), **_overrides(args)})
        stream = load_stream(args.data, cfg.kind)
        order = {str(oid): k for k, oid in enumerate(stream.original_ids)}
        if set(order) != set(ids):
            raise ConfigError("data file ids differ from the clustering ids")
        scorer = _scorer(cfg.model, stream)
        data_p = Partition.from_labels({order[i]: pred[i] for i in ids})
        rep.log_posterior = score_clustering(data_p, cfg.alpha, scorer)
    for k, v in rep.as_record().items():
        print(f"{k}={v}")
    return EXIT_OK


def _parse_grid(args) -> dict:
    grid = {}
    if args.grid:
        grid.update(json.loads(Path(args.grid).read_text()) if Path(args.grid).exists() else json.loads(args.grid))
    for key, conv in (("algorithms", str), ("ms", int), ("m_primes", int)):
        v = getattr(args, key)
        if v:
            grid[{"algorithms": "algorithm", "ms": "m", "m_primes": "m_prime"}[key]] = [conv(s) for s in v.split(",")]
    for k, v in grid.items():
        if k not in ("algorithm", "m", "m_prime") or not isinstance(v, list) or not v:
            raise ConfigError(f"bad grid axis {k!r}")
    return grid


def sweep_cell_seed(master: int, cell: int, rep: int) -> int:
    return int(np.random.SeedSequence([master, cell, rep]).generate_state(1)[0])


def cmd_sweep(args) -> int:
    base = {**_load_config(args.config), **_overrides(args)}
    grid = _parse_grid(args)
    axes = sorted(grid)
    cells = list(itertools.product(*(grid[a] for a in axes))) if axes else [()]
    master = base.get("seed", 0)
    reps = args.replications
    if reps < 1:
        raise ConfigError("replications must be >= 1")
    rows = []
    for c, values in enumerate(cells):
        point = dict(zip(axes, values))
        results, failures = [], []
        for r in range(reps):
            seed = sweep_cell_seed(master, c, r)
            cfg = RunConfig.from_mapping({**base, **point, "seed": seed, "shuffle_seed": seed})
            try:
                cfg.validate()
                stream = load_stream(cfg.input, cfg.kind, cfg.shuffle_seed)
                _, summary = execute(cfg, stream)
                results.append(summary)
            except Exception as exc:  # a failed cell is recorded, not fatal
                failures.append(f"{type(exc).__name__}: {exc}")
        row = {**point, "replications": reps, "failed": len(failures)}
        for metric in ("f1", "precision", "recall", "log_posterior", "runtime_seconds", "model_evaluations"):
            vals = [s[metric] for s in results if metric in s]
            if vals:
                row[f"{metric}_mean"] = float(np.mean(vals))
                row[f"{metric}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        if failures:
            row["errors"] = " | ".join(failures)
        rows.append(row)
    out = _resolve_out(args.output)
    cols = list(dict.fromkeys(k for row in rows for k in row))
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if out:
            fh.close()
    return EXIT_OK


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--algorithm", choices=ALGORITHMS)
    p.add_argument("--m", type=int)
    p.add_argument("--m-prime", dest="m_prime", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--model", help="model spec as inline JSON")
    p.add_argument("--surrogate", help="surrogate model spec as inline JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--shuffle-seed", dest="shuffle_seed", type=int)
    p.add_argument("--budget-seconds", dest="budget_seconds", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--kind", choices=("points", "fragments"))
    p.add_argument("--input", "-i")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smcluster", description=__doc__)
    parser.add_argument("--help-config", action="store_true", help="print the run config schema")
    sub = parser.add_subparsers(dest="command")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("kind", choices=("gmm", "circles"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, help="number of points (gmm only)")
    g.add_argument("--output", "-o", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="cluster a dataset")
    _add_run_flags(r)
    r.add_argument("--output", "-o", help="clustering CSV (id,cluster)")
    r.add_argument("--trace", help="per-step trace (JSON lines)")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score a clustering against gold")
    e.add_argument("pred")
    e.add_argument("gold", help="clustering CSV, points file with gold, or fragments file")
    e.add_argument("--data", help="dataset, to report the log posterior")
    _add_run_flags(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="replicated runs over a grid")
    _add_run_flags(s)
    s.add_argument("--grid", help="JSON object or file: axis -> list of values")
    s.add_argument("--algorithms", help="comma-separated algorithms")
    s.add_argument("--ms", help="comma-separated particle counts")
    s.add_argument("--m-primes", dest="m_primes", help="comma-separated shortlist sizes")
    s.add_argument("--replications", "-R", type=int, default=1)
    s.add_argument("--output", "-o", help="summary CSV (default stdout)")
    s.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.help_config:
        print(CONFIG_HELP, end="")
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, json.JSONDecodeError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
