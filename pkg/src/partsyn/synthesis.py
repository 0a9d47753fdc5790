"""Sequential partial synthesis: AvailableDays first, then Price."""

from __future__ import annotations

import datetime
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from . import data as D
from .mcmc import ChainConfig, PosteriorDraws, diagnostics, last_draws, run_chain, select_parameter_sets
from .models import (ModelOptions, PriceParams, PriceTarget, ZitpParams, ZitpTarget,
                     draw_synthetic_days, draw_synthetic_logprice, write_parameter_sets)

log = logging.getLogger(__name__)

PROVENANCE_FILE = "provenance.json"
MAX_RHAT = 1.2


class ModelFitError(RuntimeError):
    """Model fitting failed or did not pass the convergence checks."""


def stream(seed: int, *key: int) -> np.random.Generator:
    """Random generator for a named sub-task of a seeded run."""
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class SyntheticReplicate:
    index: int  # 1-based
    days: np.ndarray
    price: np.ndarray

    def __post_init__(self):
        self.days = np.asarray(self.days, dtype=np.int64)
        self.price = np.asarray(self.price, dtype=float)


@dataclass
class SyntheticCollection:
    """m synthetic replicates sharing the un-synthesized key columns."""

    keys: pd.DataFrame
    replicates: list[SyntheticReplicate]
    provenance: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.replicates)

    def table(self, position: int) -> D.ConfidentialTable:
        rep = self.replicates[position]
        frame = self.keys.copy()
        frame[D.DAYS] = rep.days
        frame[D.PRICE] = rep.price
        return D.ConfidentialTable(frame[list(D.COLUMNS)].reset_index(drop=True))

    def tables(self) -> list[D.ConfidentialTable]:
        return [self.table(k) for k in range(self.m)]

    @classmethod
    def from_tables(cls, tables, provenance=None) -> "SyntheticCollection":
        """Wrap already-complete tables (e.g. copies of the confidential data)."""
        tables = list(tables)
        keys = tables[0].keys_frame().reset_index(drop=True)
        for t in tables[1:]:
            if not t.keys_frame().reset_index(drop=True).equals(keys):
                raise D.DataError("replicates disagree on the un-synthesized columns")
        reps = [SyntheticReplicate(k + 1, t.days, t.price) for k, t in enumerate(tables)]
        return cls(keys.copy(), reps, dict(provenance or {}))


@dataclass
class FittedModels:
    design: D.DesignMatrix
    zitp: PosteriorDraws
    price: PosteriorDraws
    zitp_sets: list[ZitpParams]
    price_sets: list[PriceParams]
    diagnostics: dict


def _fit(target, config: ChainConfig, m: int):
    if config.independent_chains:
        config = replace(config, n_chains=m)
        draws = run_chain(target, config)
        return draws, last_draws(draws)
    draws = run_chain(target, config)
    return draws, select_parameter_sets(draws, m, config.min_gap)


def _check(draws: PosteriorDraws, prefixes, label: str, force: bool, max_rhat: float) -> dict:
    if draws.n_chains < 2 or draws.n_draws < 50:
        return {"available": False}
    report = diagnostics(draws)
    summary = report.summary()
    worst = report.max_rhat(prefixes)
    summary["max_coef_rhat"] = worst
    summary["available"] = True
    if np.isfinite(worst) and worst > max_rhat:
        msg = f"{label}: split R-hat {worst:.3f} exceeds {max_rhat}"
        if not force:
            raise ModelFitError(msg + " (rerun with a larger budget or force)")
        log.warning("%s; continuing because force is set", msg)
    return summary


def fit_models(table: D.ConfidentialTable, m: int, mcmc_config: ChainConfig = ChainConfig(),
               options: ModelOptions = ModelOptions(), force: bool = False,
               max_rhat: float = MAX_RHAT) -> FittedModels:
    """Fit both synthesis models on the confidential table and pick m parameter sets each.

    The price model uses the confidential AvailableDays as predictor.
    """
    design = D.encode_design(table)
    try:
        zitp_draws, zsets = _fit(ZitpTarget(design, table.days, options),
                                 replace(mcmc_config, seed=mcmc_config.seed * 2), m)
        price_draws, psets = _fit(PriceTarget(design, table.days, table.price, options),
                                  replace(mcmc_config, seed=mcmc_config.seed * 2 + 1), m)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise ModelFitError(str(exc)) from exc
    diag = {
        "zitp": _check(zitp_draws, ("alpha", "beta"), "count model", force, max_rhat),
        "price": _check(price_draws, ("gamma",), "price model", force, max_rhat),
    }
    return FittedModels(
        design=design,
        zitp=zitp_draws,
        price=price_draws,
        zitp_sets=[ZitpParams.from_named(s) for s in zsets],
        price_sets=[PriceParams.from_named(s) for s in psets],
        diagnostics=diag,
    )


def synthesize_replicate(design_X: np.ndarray, zitp: ZitpParams, price: PriceParams,
                         rng: np.random.Generator,
                         options: ModelOptions = ModelOptions()) -> tuple[np.ndarray, np.ndarray]:
    """Draw one (days, price) replicate from the encoded keys alone.

    Takes no confidential sensitive values: days are drawn first and the
    price mean uses those synthetic days.
    """
    days = draw_synthetic_days(zitp.without_latents(), design_X, rng, options)
    prices = draw_synthetic_logprice(price, design_X, days, rng)
    return days, prices


def sequential_synthesize(table: D.ConfidentialTable, m: int = 20,
                          mcmc_config: ChainConfig = ChainConfig(), seed: int = 0,
                          options: ModelOptions = ModelOptions(), force: bool = False,
                          threads: int = 1, fitted: FittedModels | None = None,
                          max_rhat: float = MAX_RHAT) -> SyntheticCollection:
    """Fit the models and generate ``m`` partially synthetic replicates.

    Replicate l pairs the l-th parameter set of each model and draws from
    its own stream derived from ``(seed, l)``.
    """
    if m < 2:
        raise ValueError("need m >= 2 replicates")
    if fitted is None:
        fitted = fit_models(table, m, replace(mcmc_config, seed=seed, threads=threads),
                            options, force, max_rhat)
    X = fitted.design.X

    def one(ell: int) -> SyntheticReplicate:
        days, price = synthesize_replicate(X, fitted.zitp_sets[ell - 1], fitted.price_sets[ell - 1],
                                           stream(seed, 2, ell), options)
        return SyntheticReplicate(ell, days, price)

    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        reps = list(pool.map(one, range(1, m + 1)))
    provenance = {
        "method": "bayes",
        "m": m,
        "seed": seed,
        "mcmc": replace(mcmc_config, seed=seed).to_dict(),
        "model_options": options.__dict__.copy(),
        "diagnostics": fitted.diagnostics,
    }
    coll = SyntheticCollection(table.keys_frame().reset_index(drop=True).copy(), reps, provenance)
    coll.fitted = fitted
    return coll


def write_collection(collection: SyntheticCollection, out_dir, prefix: str = "synthetic",
                     config: dict | None = None) -> list[str]:
    """Write one CSV per replicate (``<prefix>_<l>.csv``) plus a JSON provenance sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for k, rep in enumerate(collection.replicates):
        name = f"{prefix}_{rep.index}.csv"
        D.write_csv(collection.table(k), os.path.join(out_dir, name))
        files.append(name)
    prov = dict(collection.provenance)
    prov["files"] = files
    prov["schema_version"] = 1
    if config is not None:
        prov["config"] = config
        prov["config_hash"] = config_hash(config)
    prov["created"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    with open(os.path.join(out_dir, PROVENANCE_FILE), "w") as fh:
        json.dump(prov, fh, indent=2, sort_keys=True, default=_jsonable)
    fitted = getattr(collection, "fitted", None)
    if fitted is not None:
        sets = [("zitp", k + 1, s) for k, s in enumerate(_named_sets(fitted.zitp, fitted.zitp_sets))]
        sets += [("price", k + 1, s) for k, s in enumerate(_named_sets(fitted.price, fitted.price_sets))]
        write_parameter_sets(sets, os.path.join(out_dir, "parameter_sets.csv"))
    return [os.path.join(out_dir, f) for f in files + [PROVENANCE_FILE]]


def _named_sets(draws: PosteriorDraws, sets) -> list[dict]:
    out = []
    for s in sets:
        if isinstance(s, ZitpParams):
            vals = list(s.alpha) + list(s.beta) + [s.tau]
        else:
            vals = list(s.gamma) + [s.sigma]
        out.append(dict(zip(draws.names, vals)))
    return out


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def read_collection(out_dir) -> SyntheticCollection:
    """Load a collection written by :func:`write_collection`."""
    prov_path = os.path.join(out_dir, PROVENANCE_FILE)
    if not os.path.exists(prov_path):
        raise D.DataError(f"no {PROVENANCE_FILE} in {out_dir}")
    with open(prov_path) as fh:
        prov = json.load(fh)
    tables = []
    for name in prov["files"]:
        path = os.path.join(out_dir, name)
        if not os.path.exists(path):
            raise D.DataError(f"missing replicate file: {path}")
        t = D.load_csv(path, D.CANONICAL_SCHEMA)
        if t.n_rejected:
            raise D.DataError(f"{path}: {t.n_rejected} invalid row(s)")
        tables.append(t)
    return SyntheticCollection.from_tables(tables, prov)
