"""Global and analysis-specific utility of synthetic replicates.

Every metric function is pure; :func:`evaluate_utility` assembles them
into a :class:`UtilityReport` for a whole collection.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import stats
from scipy.cluster.hierarchy import cut_tree, linkage

from . import data as D

LEVEL = 0.95
SCHEMA_VERSION = 1
DEFAULT_ESTIMANDS = ("mean", "q0.25", "q0.9")


@dataclass(frozen=True)
class IntervalEstimate:
    point: float
    lower: float
    upper: float
    level: float = LEVEL
    variance: float = math.nan
    df: float = math.inf

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError("interval lower bound exceeds upper bound")

    def to_dict(self) -> dict:
        return asdict(self)


def _z(level: float) -> float:
    return float(stats.norm.ppf(0.5 + level / 2))


def normal_interval(point: float, variance: float, level: float = LEVEL, df: float = math.inf) -> IntervalEstimate:
    q = _z(level) if not np.isfinite(df) else float(stats.t.ppf(0.5 + level / 2, df))
    half = q * math.sqrt(max(variance, 0.0))
    return IntervalEstimate(point, point - half, point + half, level, variance, df)


# ---------------------------------------------------------------- propensity

@dataclass(frozen=True)
class PropensityScore:
    value: float
    converged: bool
    iterations: int


def _propensity_design(conf: D.ConfidentialTable, syn: D.ConfidentialTable) -> np.ndarray:
    levels = D.table_levels(conf)
    keys = np.vstack([D.encode_design(t, levels, full_room_type=False).X for t in (conf, syn)])
    days = np.concatenate([conf.days, syn.days]).astype(float)
    logp = np.log(np.concatenate([conf.price, syn.price]))
    cols = [np.ones(len(days)), keys]
    for v in (days, logp):
        sd = v.std()
        cols.append(((v - v.mean()) / sd if sd > 0 else v - v.mean())[:, None])
    return np.column_stack(cols)


def logistic_irls(X: np.ndarray, y: np.ndarray, max_iter: int = 50, tol: float = 1e-10,
                  ridge: float = 1e-6) -> tuple[np.ndarray, bool, int]:
    """Logistic regression by iteratively reweighted least squares.

    A ridge of ``ridge`` on the information matrix keeps separable data finite.
    """
    beta = np.zeros(X.shape[1])
    eye = ridge * np.eye(X.shape[1])
    for it in range(1, max_iter + 1):
        eta = np.clip(X @ beta, -30, 30)
        p = 1.0 / (1.0 + np.exp(-eta))
        w = p * (1 - p)
        step = np.linalg.solve(X.T @ (X * w[:, None]) + eye, X.T @ (y - p) - ridge * beta)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            return beta, True, it
    return beta, False, max_iter


def propensity_utility(conf: D.ConfidentialTable, syn: D.ConfidentialTable,
                       max_iter: int = 50) -> PropensityScore:
    """pMSE: mean squared distance of fitted membership probabilities from 1/2."""
    if conf.n != syn.n:
        raise ValueError("propensity utility needs equal row counts")
    X = _propensity_design(conf, syn)
    y = np.r_[np.zeros(conf.n), np.ones(syn.n)]
    beta, ok, it = logistic_irls(X, y, max_iter)
    p = 1.0 / (1.0 + np.exp(-np.clip(X @ beta, -30, 30)))
    return PropensityScore(float(np.mean((p - 0.5) ** 2)), ok, it)


# ---------------------------------------------------------------- cluster

def _cluster_features(conf: D.ConfidentialTable, syn: D.ConfidentialTable) -> np.ndarray:
    both = pd.concat([conf.frame, syn.frame], ignore_index=True)
    num = np.column_stack([np.log1p(both[D.REVIEWS].to_numpy(float)),
                           both[D.DAYS].to_numpy(float),
                           np.log(both[D.PRICE].to_numpy(float))])
    sd = num.std(axis=0)
    num = (num - num.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    cats = [pd.get_dummies(both[c]).to_numpy(float) for c in (D.ROOM_TYPE, D.NEIGHBORHOOD)]
    return np.hstack([num] + cats)


def cluster_utility(conf: D.ConfidentialTable, syn: D.ConfidentialTable, G: int = 10,
                    subsample: int = 2000, seed: int = 0) -> float:
    """Cluster-proportion utility after average-linkage clustering of the merged data.

    The same ``subsample`` row positions are taken from both sides.
    """
    if conf.n != syn.n:
        raise ValueError("cluster utility needs equal row counts")
    k = min(subsample, conf.n)
    rows = np.sort(np.random.default_rng(seed).choice(conf.n, size=k, replace=False))
    sub_c = D.ConfidentialTable(conf.frame.iloc[rows].reset_index(drop=True))
    sub_s = D.ConfidentialTable(syn.frame.iloc[rows].reset_index(drop=True))
    F = _cluster_features(sub_c, sub_s)
    if G > len(F):
        raise ValueError(f"G={G} exceeds the {len(F)} clustered points")
    if G == 1:
        labels = np.zeros(len(F), dtype=np.int64)
    else:
        labels = cut_tree(linkage(F, method="average", metric="euclidean"), n_clusters=G).ravel()
    return cluster_statistic(labels, np.r_[np.zeros(k), np.ones(k)], G)


def cluster_statistic(labels: np.ndarray, is_syn: np.ndarray, G: int) -> float:
    N = len(labels)
    n_g = np.bincount(labels, minlength=G).astype(float)
    s_g = np.bincount(labels, weights=is_syn, minlength=G)
    keep = n_g > 0
    w = n_g[keep] / N
    return float(np.sum(w * (s_g[keep] / n_g[keep] - 0.5) ** 2) / G)


# ---------------------------------------------------------------- ecdf

def ecdf_utility(conf_col, syn_col) -> tuple[float, float]:
    """(max, mean squared) difference of the two ECDFs over the merged values."""
    c = np.sort(np.asarray(conf_col, dtype=float))
    s = np.sort(np.asarray(syn_col, dtype=float))
    if len(c) == 0 or len(s) == 0:
        raise ValueError("empty column")
    merged = np.concatenate([c, s])
    diff = np.searchsorted(c, merged, side="right") / len(c) - np.searchsorted(s, merged, side="right") / len(s)
    return float(np.max(np.abs(diff))), float(np.mean(diff ** 2))


# ---------------------------------------------------------------- inference

def combine_estimates(q, v, level: float = LEVEL) -> IntervalEstimate:
    """Combining rules for partially synthetic data.

    T = v̄ + b/m with ν = (m − 1)(1 + v̄ / (b/m))²; normal quantiles when b = 0.
    """
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    m = len(q)
    if m < 2 or len(v) != m:
        raise ValueError("need m >= 2 paired estimates")
    if (v < 0).any():
        raise ValueError("negative variance estimate")
    qbar = float(q.mean())
    b = float(q.var(ddof=1))
    vbar = float(v.mean())
    T = vbar + b / m
    if b / m == 0:
        return normal_interval(qbar, T, level)
    r = 1 + vbar / (b / m)
    nu = (m - 1) * r * r  # float product saturates to inf (normal quantile) for tiny b
    return normal_interval(qbar, T, level, df=nu)


def bootstrap_quantile(col, p: float, B: int = 1000, seed: int = 0,
                       chunk: int = 100) -> tuple[float, float]:
    """Sample quantile (linear interpolation) and its bootstrap variance."""
    x = np.asarray(col, dtype=float)
    if len(x) == 0:
        raise ValueError("empty column")
    if B < 200:
        raise ValueError("need B >= 200 bootstrap replicates")
    rng = np.random.default_rng(seed)
    reps = np.empty(B)
    for start in range(0, B, chunk):
        stop = min(B, start + chunk)
        idx = rng.integers(0, len(x), size=(stop - start, len(x)))
        reps[start:stop] = np.quantile(x[idx], p, axis=1)
    return float(np.quantile(x, p)), float(reps.var(ddof=1))


def interval_overlap(conf: IntervalEstimate, syn: IntervalEstimate) -> float:
    """Average share of each interval covered by their intersection; negative when disjoint.

    Returns NaN when either interval has zero width.
    """
    wc, ws = conf.upper - conf.lower, syn.upper - syn.lower
    if wc <= 0 or ws <= 0:
        return math.nan
    inter = min(conf.upper, syn.upper) - max(conf.lower, syn.lower)
    return inter / (2 * wc) + inter / (2 * ws)


def parse_estimand(name: str) -> tuple[str, float | None]:
    if name == "mean":
        return "mean", None
    if name.startswith("q"):
        p = float(name[1:])
        if 0 <= p <= 1:
            return "quantile", p
    raise ValueError(f"unknown estimand {name!r}; use 'mean' or 'q<p>' with p in [0, 1]")


def _single_estimate(col: np.ndarray, estimand: str, B: int, seed: int) -> tuple[float, float, float]:
    """(point, variance, df) from one dataset."""
    kind, p = parse_estimand(estimand)
    if kind == "mean":
        return float(col.mean()), float(col.var(ddof=1) / len(col)), float(len(col) - 1)
    point, var = bootstrap_quantile(col, p, B, seed)
    return point, var, math.inf


@dataclass
class EstimandEntry:
    variable: str
    estimand: str
    confidential: IntervalEstimate
    synthetic: IntervalEstimate
    overlap: float
    overlap_per_replicate: list[float]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confidential"] = self.confidential.to_dict()
        d["synthetic"] = self.synthetic.to_dict()
        return d


def estimand_utility(conf: D.ConfidentialTable, tables: list[D.ConfidentialTable], variable: str,
                     estimand: str, B: int = 1000, seed: int = 0) -> EstimandEntry:
    """Confidential vs synthetic interval for a mean or quantile of one sensitive variable.

    The synthetic interval combines all replicates; ``overlap`` averages the
    overlaps of the per-replicate intervals with the confidential one.
    """
    col_c = conf.frame[variable].to_numpy(float)
    pc, vc, dfc = _single_estimate(col_c, estimand, B, seed)
    ci_c = normal_interval(pc, vc, df=dfc)
    qs, vs, per = [], [], []
    for t in tables:
        q, v, df = _single_estimate(t.frame[variable].to_numpy(float), estimand, B, seed)
        qs.append(q)
        vs.append(v)
        per.append(interval_overlap(ci_c, normal_interval(q, v, df=df)))
    ci_s = combine_estimates(qs, vs)
    return EstimandEntry(variable, estimand, ci_c, ci_s, float(np.mean(per)), per)


def regression_design(table: D.ConfidentialTable, levels: dict | None = None) -> tuple[np.ndarray, list[str]]:
    """Intercept, reference-coded RoomType and Neighborhood, raw ReviewsCount and AvailableDays."""
    enc = D.encode_design(table, levels or D.table_levels(table), full_room_type=False)
    X = np.column_stack([np.ones(table.n), enc.X[:, :-1], table.reviews.astype(float),
                         table.days.astype(float)])
    return X, ["(Intercept)"] + enc.columns[:-1] + [D.REVIEWS, D.DAYS]


def ols(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Coefficients, their variances and residual degrees of freedom."""
    n, k = X.shape
    if np.linalg.matrix_rank(X) < k:
        raise np.linalg.LinAlgError("regression design is rank deficient")
    XtX_inv = np.linalg.inv(X.T @ X)
    coef = XtX_inv @ (X.T @ y)
    resid = y - X @ coef
    df = n - k
    s2 = float(resid @ resid) / df if df > 0 else math.nan
    return coef, s2 * np.diag(XtX_inv), df


@dataclass
class CoefficientEntry:
    coefficient: str
    confidential: IntervalEstimate
    synthetic: IntervalEstimate
    overlap: float
    overlap_per_replicate: list[float]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confidential"] = self.confidential.to_dict()
        d["synthetic"] = self.synthetic.to_dict()
        return d


def regression_utility(conf: D.ConfidentialTable, tables: list[D.ConfidentialTable],
                       log_price: bool = False) -> list[CoefficientEntry]:
    """OLS of Price on the keys and AvailableDays, confidential vs combined synthetic."""
    levels = D.table_levels(conf)

    def fit(t):
        X, names = regression_design(t, levels)
        y = np.log(t.price) if log_price else t.price.astype(float)
        return (*ols(X, y), names)

    coef_c, var_c, df_c, names = fit(conf)
    fits = [fit(t) for t in tables]
    out = []
    for j, name in enumerate(names):
        ci_c = normal_interval(coef_c[j], var_c[j], df=df_c)
        per = [interval_overlap(ci_c, normal_interval(f[0][j], f[1][j], df=f[2])) for f in fits]
        ci_s = combine_estimates([f[0][j] for f in fits], [f[1][j] for f in fits])
        out.append(CoefficientEntry(name, ci_c, ci_s, float(np.mean(per)), per))
    return out


# ---------------------------------------------------------------- report

@dataclass
class UtilityReport:
    Up: float
    Up_per_replicate: list[float]
    Up_converged: bool
    Uc: float
    Uc_per_replicate: list[float]
    ecdf: dict[str, dict]
    estimands: list[EstimandEntry]
    regression: list[CoefficientEntry]
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "settings": self.settings,
            "global": {
                "Up": self.Up,
                "Up_per_replicate": self.Up_per_replicate,
                "Up_converged": self.Up_converged,
                "Uc": self.Uc,
                "Uc_per_replicate": self.Uc_per_replicate,
                "ecdf": self.ecdf,
            },
            "estimands": [e.to_dict() for e in self.estimands],
            "regression": [e.to_dict() for e in self.regression],
        }

    def interval_frame(self) -> pd.DataFrame:
        """Tidy interval endpoints: one row per (kind, target, source)."""
        rows = []
        for e in self.estimands:
            for src, ci in (("confidential", e.confidential), ("synthetic", e.synthetic)):
                rows.append(("estimand", e.variable, e.estimand, src, ci.point, ci.lower, ci.upper, e.overlap))
        for e in self.regression:
            for src, ci in (("confidential", e.confidential), ("synthetic", e.synthetic)):
                rows.append(("regression", D.PRICE, e.coefficient, src, ci.point, ci.lower, ci.upper, e.overlap))
        return pd.DataFrame(rows, columns=["kind", "variable", "target", "source", "point", "lower", "upper",
                                           "overlap"])


def evaluate_utility(conf: D.ConfidentialTable, tables: list[D.ConfidentialTable], G: int = 10,
                     subsample: int = 2000, B: int = 1000, estimands=DEFAULT_ESTIMANDS, seed: int = 0,
                     threads: int = 1, log_price_regression: bool = False) -> UtilityReport:
    """Every utility measure for a list of replicate tables against the confidential table."""
    if len(tables) < 2:
        raise ValueError("need at least 2 replicates")
    for e in estimands:
        parse_estimand(e)

    def global_one(t):
        return (propensity_utility(conf, t), cluster_utility(conf, t, G, subsample, seed),
                {v: ecdf_utility(conf.frame[v], t.frame[v]) for v in (D.DAYS, D.PRICE)})

    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        per = list(pool.map(global_one, tables))
    ecdf = {}
    for v in (D.DAYS, D.PRICE):
        um = [p[2][v][0] for p in per]
        ua = [p[2][v][1] for p in per]
        ecdf[v] = {"Um": float(np.mean(um)), "Ua": float(np.mean(ua)), "Um_per_replicate": um,
                   "Ua_per_replicate": ua}
    entries = [estimand_utility(conf, tables, v, e, B, seed) for v in (D.DAYS, D.PRICE) for e in estimands]
    return UtilityReport(
        Up=float(np.mean([p[0].value for p in per])),
        Up_per_replicate=[p[0].value for p in per],
        Up_converged=all(p[0].converged for p in per),
        Uc=float(np.mean([p[1] for p in per])),
        Uc_per_replicate=[p[1] for p in per],
        ecdf=ecdf,
        estimands=entries,
        regression=regression_utility(conf, tables, log_price_regression),
        settings={"G": G, "subsample": subsample, "B": B, "estimands": list(estimands), "seed": seed,
                  "level": LEVEL, "m": len(tables), "log_price_regression": log_price_regression},
    )
