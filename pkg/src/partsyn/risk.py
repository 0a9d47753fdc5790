"""Attribute and identification disclosure risk, with intruder-knowledge noise.

An intruder knows the un-synthesized keys (RoomType, Neighborhood,
ReviewsCount) of every confidential record and matches them against a
released dataset. Matching is vectorized: comparison rows are sorted by an
integer key code and each target's block is located with ``searchsorted``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from . import data as D

SCHEMA_VERSION = 1
DEFAULT_RADII = ((5.0, 0.05), (10.0, 0.05), (10.0, 0.10))
DEFAULT_S_GRID = tuple(round(0.01 * k, 2) for k in range(16))
_MAX_COUNT = 1e15  # noised counts beyond this cannot match any real count


@dataclass(frozen=True)
class MatchRadii:
    """Similarity band: absolute days and relative price.

    Attribute risk always uses the raw-price band. Identification uses the
    band on log price when ``price_scale_for_id`` is set.
    """

    r_avail: float = 5.0
    r_price: float = 0.05
    price_scale_for_id: bool = True

    def __post_init__(self):
        if self.r_avail < 0 or self.r_price < 0:
            raise ValueError("radii must be non-negative")


@dataclass(frozen=True)
class MatchSet:
    target: int
    matches: np.ndarray

    @property
    def c(self) -> int:
        return len(self.matches)


@dataclass(frozen=True)
class NoisePolicy:
    """Log-normal perturbation of the intruder's ReviewsCount.

    log RC* ~ Normal(log(RC + 1), S * RC), RC* = max(0, round(exp(.) - 1)).
    """

    S: float = 0.0
    seed: int = 0
    rounding: str = "nearest"

    def __post_init__(self):
        if not 0 <= self.S < 1:
            raise ValueError("S must lie in [0, 1)")
        if self.rounding != "nearest":
            raise ValueError("only nearest-integer rounding is supported")

    def rng(self) -> np.random.Generator:
        # keyed on the S value so a given S draws the same noise in any grid
        return np.random.default_rng(np.random.SeedSequence([self.seed, 4, int(round(self.S * 1e6))]))


def perturb_knowledge(reviews, noise: NoisePolicy) -> np.ndarray:
    """Intruder's noisy copy of the ReviewsCount column; identity when S = 0."""
    rc = np.asarray(reviews, dtype=np.int64)
    if noise.S == 0:
        return rc.copy()
    draw = noise.rng().normal(np.log(rc + 1.0), noise.S * rc)
    val = np.expm1(np.minimum(draw, math.log(_MAX_COUNT)))
    return np.maximum(0, np.rint(val)).astype(np.int64)


def _key_codes(conf: D.ConfidentialTable, comparison: D.ConfidentialTable, target_reviews):
    """Integer key per target (with its known reviews) and per comparison row; -1 never matches."""
    room = sorted(set(conf.frame[D.ROOM_TYPE]) | set(comparison.frame[D.ROOM_TYPE]))
    hood = sorted(set(conf.frame[D.NEIGHBORHOOD]) | set(comparison.frame[D.NEIGHBORHOOD]))
    r_cap = int(comparison.reviews.max()) + 1 if comparison.n else 1

    def code(t, reviews):
        r = D._codes(t.frame[D.ROOM_TYPE], room, D.ROOM_TYPE)
        h = D._codes(t.frame[D.NEIGHBORHOOD], hood, D.NEIGHBORHOOD)
        reviews = np.asarray(reviews, dtype=np.int64)
        k = (r * len(hood) + h) * r_cap + reviews
        return np.where((reviews >= 0) & (reviews < r_cap), k, -1)

    return code(conf, target_reviews), code(comparison, comparison.reviews)


def _pairs(conf: D.ConfidentialTable, comparison: D.ConfidentialTable, target_reviews=None):
    """All (target, comparison) index pairs agreeing on the key triple, plus c_i per target."""
    if target_reviews is None:
        target_reviews = conf.reviews
    tkey, ckey = _key_codes(conf, comparison, target_reviews)
    order = np.argsort(ckey, kind="stable")
    sorted_keys = ckey[order]
    lo = np.searchsorted(sorted_keys, tkey, side="left")
    hi = np.searchsorted(sorted_keys, tkey, side="right")
    counts = np.where(tkey >= 0, hi - lo, 0)
    tgt = np.repeat(np.arange(conf.n), counts)
    start = np.repeat(lo - (np.cumsum(counts) - counts), counts)
    cmp = order[start + np.arange(len(tgt))]
    return tgt, cmp, counts


def key_match(conf: D.ConfidentialTable, i: int, comparison: D.ConfidentialTable,
              noise: NoisePolicy = NoisePolicy(), noised_reviews=None) -> MatchSet:
    """Rows of ``comparison`` sharing record i's keys (its ReviewsCount as the intruder knows it)."""
    if noised_reviews is None:
        noised_reviews = perturb_knowledge(conf.reviews, noise)
    tgt, cmp, _ = _pairs(conf, comparison, noised_reviews)
    return MatchSet(i, np.sort(cmp[tgt == i]))


def attribute_risk(conf: D.ConfidentialTable, syn: D.ConfidentialTable, radii: MatchRadii) -> float:
    """AR = Σ_i share of key-matched released records whose days and raw price lie within the radii."""
    tgt, cmp, counts = _pairs(conf, syn)
    cd, cp = conf.days.astype(np.int64), conf.price.astype(float)
    sd, sp = syn.days.astype(np.int64), syn.price.astype(float)
    close = (np.abs(sd[cmp] - cd[tgt]) <= radii.r_avail) & \
        (np.abs(sp[cmp] - cp[tgt]) / cp[tgt] <= radii.r_price)
    hits = np.bincount(tgt[close], minlength=conf.n)
    has = counts > 0
    p = np.zeros(conf.n)
    p[has] = hits[has] / counts[has]
    return math.fsum(p.tolist())


@dataclass(frozen=True)
class IdentificationRisk:
    EMR: float
    TMR: float
    FMR: float
    u: int

    def to_dict(self) -> dict:
        return asdict(self)


def identification_counts(conf: D.ConfidentialTable, comparison: D.ConfidentialTable, radii: MatchRadii,
                          noised_reviews=None) -> tuple[np.ndarray, np.ndarray]:
    """(c_i, T_i) for every confidential record after the similarity refinement."""
    if conf.n != comparison.n:
        raise ValueError("identification risk needs row-aligned datasets of equal size")
    tgt, cmp, _ = _pairs(conf, comparison, noised_reviews)
    cd, sd = conf.days.astype(np.int64), comparison.days.astype(np.int64)
    if radii.price_scale_for_id:
        lc, ls = np.log(conf.price), np.log(comparison.price)
        price_ok = np.abs(ls[cmp] - lc[tgt]) <= radii.r_price * np.abs(lc[tgt])
    else:
        cp, sp = conf.price.astype(float), comparison.price.astype(float)
        price_ok = np.abs(sp[cmp] - cp[tgt]) / cp[tgt] <= radii.r_price
    keep = (np.abs(sd[cmp] - cd[tgt]) <= radii.r_avail) & price_ok
    c = np.bincount(tgt[keep], minlength=conf.n)
    T = np.zeros(conf.n, dtype=bool)
    T[tgt[keep & (tgt == cmp)]] = True
    return c, T


def identification_risk(conf: D.ConfidentialTable, comparison: D.ConfidentialTable, radii: MatchRadii,
                        noise: NoisePolicy = NoisePolicy(), noised_reviews=None) -> IdentificationRisk:
    """Expected match risk, true and false unique-match rates, and the unique count.

    FMR is NaN when no record has a unique match.
    """
    if noised_reviews is None:
        noised_reviews = perturb_knowledge(conf.reviews, noise)
    c, T = identification_counts(conf, comparison, radii, noised_reviews)
    has = c > 0
    emr = math.fsum((T[has] / c[has]).tolist())
    unique = c == 1
    u = int(unique.sum())
    tmr = int((unique & T).sum()) / conf.n
    fmr = int((unique & ~T).sum()) / u if u else math.nan
    return IdentificationRisk(emr, tmr, fmr, u)


def _mean_risk(results: list[IdentificationRisk]) -> IdentificationRisk:
    fmr = [r.FMR for r in results if not math.isnan(r.FMR)]
    return IdentificationRisk(
        float(np.mean([r.EMR for r in results])),
        float(np.mean([r.TMR for r in results])),
        float(np.mean(fmr)) if fmr else math.nan,
        float(np.mean([r.u for r in results])),
    )


def uncertainty_sweep(conf: D.ConfidentialTable, tables: list[D.ConfidentialTable], radii: MatchRadii,
                      S_grid=DEFAULT_S_GRID, seed: int = 0) -> list[dict]:
    """Identification risk at each noise level S, for the confidential baseline and the replicates.

    One noise draw per S is shared by every dataset evaluated at that S.
    Synthetic rows average over replicates.
    """
    S_grid = list(S_grid)
    if not S_grid:
        raise ValueError("empty S grid")
    rows = []
    for S in S_grid:
        noised = perturb_knowledge(conf.reviews, NoisePolicy(S, seed))
        base = identification_risk(conf, conf, radii, noised_reviews=noised)
        syn = _mean_risk([identification_risk(conf, t, radii, noised_reviews=noised) for t in tables])
        rows.append({"S": S, "dataset": "confidential", **base.to_dict()})
        rows.append({"S": S, "dataset": "synthetic", **syn.to_dict()})
    return rows


@dataclass
class RiskReport:
    attribute: list[dict]
    identification: dict
    sweep: list[dict]
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "settings": self.settings, "attribute": self.attribute,
                "identification": self.identification, "sweep": self.sweep}

    def sweep_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.sweep, columns=["S", "dataset", "EMR", "TMR", "FMR", "u"])


def evaluate_risk(conf: D.ConfidentialTable, tables: list[D.ConfidentialTable], radii_list=DEFAULT_RADII,
                  S_grid=DEFAULT_S_GRID, seed: int = 0) -> RiskReport:
    """Attribute risk over ``radii_list`` and the identification sweep over ``S_grid``.

    Identification uses the first radius pair.
    """
    radii_list = [r if isinstance(r, MatchRadii) else MatchRadii(*r) for r in radii_list]
    attribute = []
    for r in radii_list:
        per = [attribute_risk(conf, t, r) for t in tables]
        attribute.append({"r_avail": r.r_avail, "r_price": r.r_price,
                          "AR_synthetic": float(np.mean(per)), "AR_synthetic_per_replicate": per,
                          "AR_confidential": attribute_risk(conf, conf, r)})
    id_radii = radii_list[0]
    base = identification_risk(conf, conf, id_radii)
    per = [identification_risk(conf, t, id_radii) for t in tables]
    identification = {"r_avail": id_radii.r_avail, "r_price": id_radii.r_price,
                      "confidential": base.to_dict(), "synthetic": _mean_risk(per).to_dict(),
                      "synthetic_per_replicate": [p.to_dict() for p in per]}
    sweep = uncertainty_sweep(conf, tables, id_radii, S_grid, seed)
    return RiskReport(attribute, identification, sweep,
                      {"radii": [[r.r_avail, r.r_price] for r in radii_list], "S_grid": list(S_grid),
                       "seed": seed, "n": conf.n, "m": len(tables)})
