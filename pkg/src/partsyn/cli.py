"""Command-line pipeline: describe, synthesize, utility, risk, compare.

Settings resolve as command-line flag, then JSON config file, then the
defaults in :class:`RunConfig`. Exit codes: 0 success, 1 usage error,
2 data error, 3 model-fit failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import data as D
from .mcmc import ChainConfig, SamplerError
from .models import ModelOptions
from .risk import DEFAULT_RADII, DEFAULT_S_GRID, evaluate_risk
from .synthesis import (MAX_RHAT, PROVENANCE_FILE, ModelFitError, SyntheticCollection, read_collection,
                        sequential_synthesize, write_collection)
from .utility import DEFAULT_ESTIMANDS, evaluate_utility

log = logging.getLogger("partsyn")

SCHEMA_VERSION = 1
METHODS = ("bayes", "cart")
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FIT = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Every pipeline setting; the field names are the config-file keys."""

    input: str | None = None
    schema: dict = field(default_factory=dict)  # canonical name -> column in the input file
    sample_n: int | None = 10000  # None or 0 keeps every valid row
    seed: int = 0
    m: int = 20
    method: str = "bayes"
    out: str = "out"
    collection: str | None = None  # defaults to <out>/<method>
    threads: int = 1
    force: bool = False
    # MCMC budget
    chains: int = 2
    warmup: int = 5000
    keep: int = 5000
    thin: int = 5
    independent_chains: bool = False
    tau_is_sd: bool = False
    max_rhat: float = MAX_RHAT  # convergence gate on coefficient split R-hat
    # CART controls
    cart_min_leaf: int = 5
    cart_cp: float = 1e-8
    cart_max_depth: int = 30
    # utility
    G: int = 10
    subsample: int = 2000
    B: int = 1000
    estimands: list = field(default_factory=lambda: list(DEFAULT_ESTIMANDS))
    log_price_regression: bool = False
    # risk
    radii: list = field(default_factory=lambda: [list(r) for r in DEFAULT_RADII])
    S_grid: list = field(default_factory=lambda: list(DEFAULT_S_GRID))
    plots: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise UsageError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.m < 2:
            raise UsageError("m must be at least 2")
        if self.threads < 1:
            raise UsageError("threads must be at least 1")
        if not self.radii or any(len(r) != 2 for r in self.radii):
            raise UsageError("radii must be a non-empty list of [r_avail, r_price] pairs")
        if not self.S_grid:
            raise UsageError("S_grid must not be empty")

    def collection_dir(self, method: str | None = None) -> str:
        if self.collection and method in (None, self.method):
            return self.collection
        return os.path.join(self.out, method or self.method)

    def mcmc(self) -> ChainConfig:
        return ChainConfig(n_chains=self.chains, warmup=self.warmup, keep=self.keep, thin=self.thin,
                           seed=self.seed, independent_chains=self.independent_chains, threads=self.threads)

    def synthesis_snapshot(self, method: str) -> dict:
        """Settings that determine the synthetic data (hashed into provenance)."""
        keys = ["input", "schema", "sample_n", "seed", "m"]
        if method == "bayes":
            keys += ["chains", "warmup", "keep", "thin", "independent_chains", "tau_is_sd", "max_rhat"]
        else:
            keys += ["cart_min_leaf", "cart_cp", "cart_max_depth"]
        snap = {k: getattr(self, k) for k in keys}
        snap["method"] = method
        return snap


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def load_config_file(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config file must hold a JSON object of flat keys")
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return raw


def resolve_config(cli: dict, file_values: dict | None = None) -> RunConfig:
    """Merge defaults < config file < command-line flags."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in cli.items() if k in _FIELDS})
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise UsageError(str(exc)) from None


# ------------------------------------------------------------------ helpers

def _clean(obj):
    """JSON-safe copy: NaN and infinities become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(obj, path) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, allow_nan=False)
        fh.write("\n")
    return path


def load_confidential(cfg: RunConfig) -> D.ConfidentialTable:
    if not cfg.input:
        raise UsageError("--input is required")
    schema = D.schema_with_sources(cfg.schema) if cfg.schema else D.DEFAULT_SCHEMA
    table = D.load_csv(cfg.input, schema)
    if table.n_rejected:
        log.warning("dropped %d invalid row(s) from %s", table.n_rejected, cfg.input)
    if cfg.sample_n and table.n > cfg.sample_n:
        table = D.sample_records(table, cfg.sample_n, cfg.seed)
    return table


def _synthesize(cfg: RunConfig, conf: D.ConfidentialTable, method: str) -> SyntheticCollection:
    if method == "cart":
        from .cart import TreeControls, cart_sequential_synthesize

        controls = TreeControls(cfg.cart_min_leaf, cfg.cart_cp, cfg.cart_max_depth)
        return cart_sequential_synthesize(conf, cfg.m, controls, cfg.seed, cfg.threads)
    options = ModelOptions(tau_is_sd=cfg.tau_is_sd)
    return sequential_synthesize(conf, cfg.m, cfg.mcmc(), cfg.seed, options, cfg.force, cfg.threads,
                                 max_rhat=cfg.max_rhat)


def _collection(cfg: RunConfig, conf: D.ConfidentialTable, method: str, build: bool) -> SyntheticCollection:
    path = cfg.collection_dir(method)
    if build and not os.path.exists(os.path.join(path, PROVENANCE_FILE)):
        log.info("no %s collection at %s; synthesizing", method, path)
        write_collection(_synthesize(cfg, conf, method), path, config=cfg.synthesis_snapshot(method))
    coll = read_collection(path)
    if len(coll.keys) != conf.n or not coll.keys.equals(conf.keys_frame().reset_index(drop=True)):
        raise D.DataError(f"collection in {path} does not match the confidential key columns")
    return coll


# ------------------------------------------------------------------ commands

def cmd_describe(cfg: RunConfig) -> dict:
    conf = load_confidential(cfg)
    summary = {"schema_version": SCHEMA_VERSION, "n": conf.n, "n_rejected": conf.n_rejected}
    for col in (D.DAYS, D.PRICE):
        x = conf.frame[col].to_numpy(float)
        summary[col] = {"mean": float(x.mean()), "q25": float(np.quantile(x, 0.25)),
                        "median": float(np.quantile(x, 0.5)), "q75": float(np.quantile(x, 0.75)),
                        "min": float(x.min()), "max": float(x.max()), "zero_fraction": float(np.mean(x == 0))}
    write_json(summary, os.path.join(cfg.out, "describe.json"))
    return summary


def cmd_synthesize(cfg: RunConfig) -> dict:
    conf = load_confidential(cfg)
    coll = _synthesize(cfg, conf, cfg.method)
    path = cfg.collection_dir()
    files = write_collection(coll, path, config=cfg.synthesis_snapshot(cfg.method))
    D.write_csv(conf, os.path.join(path, "confidential_sample.csv"))
    if cfg.plots:
        from . import plots

        tables = coll.tables()
        plots.days_histogram(conf, tables, os.path.join(path, "days_histogram.png"))
        plots.price_density(conf, tables, os.path.join(path, "price_density.png"))
    return {"collection": path, "files": files, "m": coll.m}


def _utility(cfg: RunConfig, conf, coll):
    return evaluate_utility(conf, coll.tables(), cfg.G, cfg.subsample, cfg.B, cfg.estimands, cfg.seed,
                            cfg.threads, cfg.log_price_regression)


def _risk(cfg: RunConfig, conf, coll):
    return evaluate_risk(conf, coll.tables(), [tuple(r) for r in cfg.radii], cfg.S_grid, cfg.seed)


def cmd_utility(cfg: RunConfig) -> dict:
    conf = load_confidential(cfg)
    coll = _collection(cfg, conf, cfg.method, build=False)
    report = _utility(cfg, conf, coll)
    path = cfg.collection_dir()
    out = report.to_dict()
    write_json(out, os.path.join(path, "utility.json"))
    frame = report.interval_frame()
    frame.to_csv(os.path.join(path, "utility_intervals.csv"), index=False)
    if cfg.plots:
        from . import plots

        plots.interval_panels(frame, os.path.join(path, "utility_estimands.png"), "estimand")
        plots.interval_panels(frame, os.path.join(path, "utility_regression.png"), "regression")
    return out


def cmd_risk(cfg: RunConfig) -> dict:
    conf = load_confidential(cfg)
    coll = _collection(cfg, conf, cfg.method, build=False)
    report = _risk(cfg, conf, coll)
    path = cfg.collection_dir()
    out = report.to_dict()
    write_json(out, os.path.join(path, "risk.json"))
    report.sweep_frame().to_csv(os.path.join(path, "risk_sweep.csv"), index=False)
    if cfg.plots:
        from . import plots

        plots.sweep_panels(report.sweep_frame(), os.path.join(path, "risk_sweep.png"))
    return out


def compare_reports(utilities: dict, risks: dict) -> dict:
    """Side-by-side table of every utility and risk measure, one column per method."""
    methods = list(utilities)
    first = utilities[methods[0]]
    glob = {"Up": {m: utilities[m].Up for m in methods}, "Uc": {m: utilities[m].Uc for m in methods}}
    for var in first.ecdf:
        for stat in ("Um", "Ua"):
            glob[f"{stat}[{var}]"] = {m: utilities[m].ecdf[var][stat] for m in methods}
    estimands = []
    for k, e in enumerate(first.estimands):
        row = {"variable": e.variable, "estimand": e.estimand, "confidential": e.confidential.to_dict()}
        for m in methods:
            other = utilities[m].estimands[k]
            row[m] = {"interval": other.synthetic.to_dict(), "overlap": other.overlap}
        estimands.append(row)
    regression = []
    for k, e in enumerate(first.regression):
        row = {"coefficient": e.coefficient, "confidential": e.confidential.to_dict()}
        for m in methods:
            other = utilities[m].regression[k]
            row[m] = {"interval": other.synthetic.to_dict(), "overlap": other.overlap}
        regression.append(row)
    attribute = []
    for k, a in enumerate(risks[methods[0]].attribute):
        row = {"r_avail": a["r_avail"], "r_price": a["r_price"], "confidential": a["AR_confidential"]}
        row.update({m: risks[m].attribute[k]["AR_synthetic"] for m in methods})
        attribute.append(row)
    ident = {"confidential": risks[methods[0]].identification["confidential"]}
    ident.update({m: risks[m].identification["synthetic"] for m in methods})
    return {"schema_version": SCHEMA_VERSION, "methods": methods, "global_utility": glob,
            "estimands": estimands, "regression": regression, "attribute_risk": attribute,
            "identification_risk": ident}


def cmd_compare(cfg: RunConfig) -> dict:
    conf = load_confidential(cfg)
    utilities, risks, frames, sweeps = {}, {}, [], []
    for method in METHODS:
        coll = _collection(cfg, conf, method, build=True)
        utilities[method] = _utility(cfg, conf, coll)
        risks[method] = _risk(cfg, conf, coll)
        frames.append(utilities[method].interval_frame().assign(method=method))
        sweeps.append(risks[method].sweep_frame().assign(method=method))
    report = compare_reports(utilities, risks)
    path = os.path.join(cfg.out, "compare")
    write_json(report, os.path.join(path, "compare.json"))
    intervals = pd.concat(frames, ignore_index=True)
    intervals = intervals[(intervals["source"] == "synthetic") | (intervals["method"] == METHODS[0])]
    intervals.loc[intervals["source"] == "confidential", "method"] = "confidential"
    intervals.to_csv(os.path.join(path, "compare_intervals.csv"), index=False)
    sweep = pd.concat(sweeps, ignore_index=True)
    sweep = sweep[(sweep["dataset"] == "synthetic") | (sweep["method"] == METHODS[0])]
    sweep.loc[sweep["dataset"] == "confidential", "method"] = "confidential"
    sweep.to_csv(os.path.join(path, "compare_sweep.csv"), index=False)
    if cfg.plots:
        from . import plots

        plots.interval_panels(intervals, os.path.join(path, "compare_estimands.png"), "estimand")
        plots.interval_panels(intervals, os.path.join(path, "compare_regression.png"), "regression")
        plots.sweep_panels(sweep, os.path.join(path, "compare_sweep.png"))
    return report


COMMANDS = {"describe": cmd_describe, "synthesize": cmd_synthesize, "utility": cmd_utility,
            "risk": cmd_risk, "compare": cmd_compare}


# ------------------------------------------------------------------ parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--input", help="confidential listings CSV")
    p.add_argument("--config", dest="config_file", help="JSON file of flat config keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default: out)")
    p.add_argument("--threads", type=int, help="worker cap for chains and replicates")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--m", type=int, help="number of synthetic replicates")
    p.add_argument("--force", action="store_true", help="keep going when convergence checks fail")
    p.add_argument("--sample-n", dest="sample_n", type=int, help="records sampled from the input (0: all)")
    p.add_argument("--collection", help="replicate directory (default: <out>/<method>)")
    p.add_argument("--no-plots", dest="plots", action="store_false")
    p.add_argument("-v", "--verbose", action="count")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="partsyn", parents=[common],
                     description="Partially synthetic listings data: synthesis, utility and disclosure risk.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "describe": "summary statistics of the confidential sensitive columns",
        "synthesize": "fit the synthesizer and write m replicates",
        "utility": "global and analysis-specific utility of a collection",
        "risk": "attribute and identification disclosure risk of a collection",
        "compare": "side-by-side report for the Bayesian and CART synthesizers",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    logging.basicConfig(level=logging.DEBUG if args.get("verbose", 0) > 1 else
                        logging.INFO if args.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = load_config_file(args["config_file"]) if "config_file" in args else {}
        cfg = resolve_config(args, file_values)
        result = COMMANDS[args["command"]](cfg)
    except UsageError as exc:
        print(f"partsyn: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, FileNotFoundError) as exc:
        print(f"partsyn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ModelFitError, SamplerError) as exc:
        print(f"partsyn: model fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    print(json.dumps(_clean(_brief(args["command"], result)), indent=2))
    return EXIT_OK


def _brief(command: str, result: dict) -> dict:
    if command == "utility":
        return {k: v for k, v in result["global"].items() if not k.endswith("per_replicate")}
    if command == "risk":
        return {"attribute": [{k: v for k, v in a.items() if not k.endswith("per_replicate")}
                              for a in result["attribute"]],
                "identification": {k: v for k, v in result["identification"].items()
                                   if k != "synthetic_per_replicate"}}
    return result


if __name__ == "__main__":
    sys.exit(main())
