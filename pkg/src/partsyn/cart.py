"""Sequential CART baseline: leaf-sampling regression trees for days then price."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import data as D
from .synthesis import SyntheticCollection, SyntheticReplicate, stream


@dataclass(frozen=True)
class TreeControls:
    """Growth limits. A split must lower the SSE by at least ``cp`` times the root SSE."""

    min_leaf: int = 5
    cp: float = 1e-8
    max_depth: int = 30

    def __post_init__(self):
        if self.min_leaf < 1 or self.max_depth < 0 or self.cp < 0:
            raise ValueError("invalid tree controls")


@dataclass
class _Node:
    depth: int
    rows: np.ndarray | None = None  # training rows, kept on leaves only
    feature: int = -1
    threshold: float = np.nan  # numeric: go left when x <= threshold
    left_codes: frozenset = field(default_factory=frozenset)  # categorical: codes going left
    seen_codes: frozenset = field(default_factory=frozenset)  # categorical: codes present at fit
    left: int = -1
    right: int = -1
    default_left: bool = True  # route for categorical codes unseen at this node

    @property
    def is_leaf(self) -> bool:
        return self.left < 0


@dataclass
class RegressionTree:
    """Binary regression tree whose leaves keep the indices of their training rows."""

    nodes: list[_Node]
    columns: list[str]
    categorical: list[bool]
    levels: dict[str, list]
    response: np.ndarray
    controls: TreeControls

    @property
    def leaves(self) -> list[int]:
        return [k for k, nd in enumerate(self.nodes) if nd.is_leaf]

    def leaf_sizes(self) -> np.ndarray:
        return np.array([len(self.nodes[k].rows) for k in self.leaves])

    @property
    def depth(self) -> int:
        return max(nd.depth for nd in self.nodes)

    def _matrix(self, predictors: pd.DataFrame) -> np.ndarray:
        return _encode(predictors, self.columns, self.categorical, self.levels)

    def apply(self, predictors: pd.DataFrame) -> np.ndarray:
        """Leaf node id for every row of ``predictors``."""
        Z = self._matrix(predictors)
        out = np.empty(len(Z), dtype=np.int64)
        stack = [(0, np.arange(len(Z)))]
        while stack:
            k, idx = stack.pop()
            nd = self.nodes[k]
            if nd.is_leaf:
                out[idx] = k
                continue
            x = Z[idx, nd.feature]
            if self.categorical[nd.feature]:
                known = np.isin(x, list(nd.seen_codes))
                go_left = np.where(known, np.isin(x, list(nd.left_codes)), nd.default_left)
            else:
                go_left = x <= nd.threshold
            stack.append((nd.left, idx[go_left]))
            stack.append((nd.right, idx[~go_left]))
        return out

    def sample(self, predictors: pd.DataFrame, rng: np.random.Generator) -> np.ndarray:
        """Route rows to leaves and draw one observed response per row, uniformly with replacement."""
        leaf = self.apply(predictors)
        out = np.empty(len(leaf), dtype=self.response.dtype)
        for k in np.unique(leaf):
            where = np.flatnonzero(leaf == k)
            pool = self.response[self.nodes[k].rows]
            out[where] = pool[rng.integers(0, len(pool), size=len(where))]
        return out


def _encode(frame: pd.DataFrame, columns, categorical, levels) -> np.ndarray:
    Z = np.empty((len(frame), len(columns)))
    for j, (c, is_cat) in enumerate(zip(columns, categorical)):
        if is_cat:
            lookup = {v: i for i, v in enumerate(levels[c])}
            Z[:, j] = [lookup.get(v, -1) for v in frame[c].to_numpy()]
        else:
            Z[:, j] = frame[c].to_numpy(dtype=float)
    return Z


def _best_split(x: np.ndarray, y: np.ndarray, is_cat: bool, min_leaf: int):
    """Best SSE reduction for one predictor: (gain, threshold, left_codes)."""
    n = len(y)
    if is_cat:
        codes, inv = np.unique(x, return_inverse=True)
        means = np.bincount(inv, weights=y) / np.bincount(inv)
        rank = np.empty(len(codes), dtype=np.int64)
        rank[np.argsort(means, kind="stable")] = np.arange(len(codes))
        key = rank[inv].astype(float)
    else:
        key = x
    order = np.argsort(key, kind="stable")
    ks, ys = key[order], y[order]
    csum = np.cumsum(ys)
    csq = np.cumsum(ys * ys)
    total, total_sq = csum[-1], csq[-1]
    nl = np.arange(1, n)
    valid = (ks[:-1] < ks[1:]) & (nl >= min_leaf) & (n - nl >= min_leaf)
    if not valid.any():
        return 0.0, None, None
    sl, ql = csum[:-1], csq[:-1]
    sse = (ql - sl * sl / nl) + ((total_sq - ql) - (total - sl) ** 2 / (n - nl))
    parent = total_sq - total * total / n
    gain = np.where(valid, parent - sse, -np.inf)
    b = int(np.argmax(gain))
    if is_cat:
        left = frozenset(codes[rank <= ks[b]].tolist())
        return float(gain[b]), np.nan, left
    return float(gain[b]), 0.5 * (ks[b] + ks[b + 1]), frozenset()


def fit_tree(response, predictors: pd.DataFrame, controls: TreeControls = TreeControls(),
             categorical: list[str] | None = None) -> RegressionTree:
    """Grow a regression tree by greedy SSE-minimizing binary splits.

    Categorical predictors (object or category dtype unless ``categorical``
    is given) are split by ordering their levels by mean response. A
    constant response yields a single leaf.
    """
    y = np.asarray(response)
    if len(y) != len(predictors):
        raise ValueError("response and predictors differ in length")
    if len(y) < 2 * controls.min_leaf:
        raise ValueError(f"need at least {2 * controls.min_leaf} rows, got {len(y)}")
    columns = list(predictors.columns)
    if categorical is None:
        categorical = [c for c in columns if not pd.api.types.is_numeric_dtype(predictors[c])]
    is_cat = [c in categorical for c in columns]
    levels = {c: sorted(pd.unique(predictors[c]).tolist()) for c in columns if c in categorical}
    Z = _encode(predictors, columns, is_cat, levels)
    yf = y.astype(float)
    root_sse = float(((yf - yf.mean()) ** 2).sum())
    min_gain = controls.cp * root_sse

    nodes = [_Node(depth=0, rows=np.arange(len(y)))]
    stack = [0]
    while stack:
        k = stack.pop()
        nd = nodes[k]
        rows = nd.rows
        if nd.depth >= controls.max_depth or len(rows) < 2 * controls.min_leaf:
            continue
        yr = yf[rows]
        if np.ptp(yr) == 0:
            continue
        best = (0.0, -1, None, None)
        for j in range(len(columns)):
            gain, thr, codes = _best_split(Z[rows, j], yr, is_cat[j], controls.min_leaf)
            if thr is not None or codes:
                if gain > best[0]:
                    best = (gain, j, thr, codes)
        gain, j, thr, codes = best
        if j < 0 or gain <= min_gain or gain <= 0:
            continue
        x = Z[rows, j]
        go_left = np.isin(x, list(codes)) if is_cat[j] else x <= thr
        nd.feature, nd.threshold, nd.left_codes = j, thr, codes
        if is_cat[j]:
            nd.seen_codes = frozenset(np.unique(x).tolist())
        nd.default_left = int(go_left.sum()) >= int((~go_left).sum())
        nd.left, nd.right = len(nodes), len(nodes) + 1
        nodes.append(_Node(depth=nd.depth + 1, rows=rows[go_left]))
        nodes.append(_Node(depth=nd.depth + 1, rows=rows[~go_left]))
        nd.rows = None
        stack.extend([nd.right, nd.left])
    return RegressionTree(nodes, columns, is_cat, levels, y, controls)


DAYS_PREDICTORS = [D.ROOM_TYPE, D.NEIGHBORHOOD, D.REVIEWS]
PRICE_PREDICTORS = DAYS_PREDICTORS + [D.DAYS]


def cart_sequential_synthesize(table: D.ConfidentialTable, m: int = 20,
                               controls: TreeControls = TreeControls(), seed: int = 0,
                               threads: int = 1) -> SyntheticCollection:
    """Synthesize days then price by sampling observed values within tree leaves.

    The price tree is grown on confidential days; synthetic records are
    routed through it with their synthetic days.
    """
    if m < 2:
        raise ValueError("need m >= 2 replicates")
    frame = table.frame
    t_days = fit_tree(table.days, frame[DAYS_PREDICTORS], controls)
    t_price = fit_tree(table.price, frame[PRICE_PREDICTORS], controls)
    keys = frame[DAYS_PREDICTORS]

    def one(ell: int) -> SyntheticReplicate:
        rng = stream(seed, 3, ell)
        days = t_days.sample(keys, rng)
        routed = keys.assign(**{D.DAYS: days})
        return SyntheticReplicate(ell, days, t_price.sample(routed, rng))

    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        reps = list(pool.map(one, range(1, m + 1)))
    provenance = {
        "method": "cart",
        "m": m,
        "seed": seed,
        "cart": {"min_leaf": controls.min_leaf, "cp": controls.cp, "max_depth": controls.max_depth},
        "trees": {"days_leaves": len(t_days.leaves), "price_leaves": len(t_price.leaves),
                  "min_leaf_size": int(min(t_days.leaf_sizes().min(), t_price.leaf_sizes().min()))},
    }
    coll = SyntheticCollection(table.keys_frame().reset_index(drop=True).copy(), reps, provenance)
    coll.trees = (t_days, t_price)
    return coll
