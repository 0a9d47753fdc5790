"""Loading, validation, sampling and numeric encoding of the listings table."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

NEIGHBORHOOD = "Neighborhood"
ROOM_TYPE = "RoomType"
REVIEWS = "ReviewsCount"
DAYS = "AvailableDays"
PRICE = "Price"

COLUMNS = (NEIGHBORHOOD, ROOM_TYPE, REVIEWS, DAYS, PRICE)
KEYS = (ROOM_TYPE, NEIGHBORHOOD, REVIEWS)
MAX_DAYS = 365


class DataError(Exception):
    """Raised when input data cannot be read or fails validation."""


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str  # "categorical", "count" or "continuous"
    sensitive: bool
    source_column: str


DEFAULT_SCHEMA = (
    ColumnSchema(NEIGHBORHOOD, "categorical", False, "neighbourhood_group"),
    ColumnSchema(ROOM_TYPE, "categorical", False, "room_type"),
    ColumnSchema(REVIEWS, "count", False, "number_of_reviews"),
    ColumnSchema(DAYS, "count", True, "availability_365"),
    ColumnSchema(PRICE, "continuous", True, "price"),
)


# Schema for files written by this package (canonical headers).
CANONICAL_SCHEMA = tuple(
    ColumnSchema(c.name, c.kind, c.sensitive, c.name) for c in DEFAULT_SCHEMA
)


def schema_with_sources(mapping: dict[str, str] | None) -> tuple[ColumnSchema, ...]:
    """Return the default schema with ``source_column`` overridden per ``mapping``.

    ``mapping`` goes from canonical column name to the header used in the CSV.
    """
    if not mapping:
        return DEFAULT_SCHEMA
    unknown = set(mapping) - set(COLUMNS)
    if unknown:
        raise DataError(f"unknown columns in schema map: {sorted(unknown)}")
    return tuple(
        ColumnSchema(c.name, c.kind, c.sensitive, mapping.get(c.name, c.source_column))
        for c in DEFAULT_SCHEMA
    )


@dataclass(frozen=True)
class ConfidentialTable:
    """Validated records in canonical column order.

    ``frame`` holds the five canonical columns; ``n_rejected`` counts rows
    dropped during validation.
    """

    frame: pd.DataFrame
    schema: tuple[ColumnSchema, ...] = DEFAULT_SCHEMA
    n_rejected: int = 0

    def __post_init__(self):
        missing = [c for c in COLUMNS if c not in self.frame.columns]
        if missing:
            raise DataError(f"table is missing columns {missing}")
        _check_valid(self.frame)

    @property
    def n(self) -> int:
        return len(self.frame)

    @property
    def days(self) -> np.ndarray:
        return self.frame[DAYS].to_numpy()

    @property
    def price(self) -> np.ndarray:
        return self.frame[PRICE].to_numpy()

    @property
    def reviews(self) -> np.ndarray:
        return self.frame[REVIEWS].to_numpy()

    def keys_frame(self) -> pd.DataFrame:
        return self.frame[[NEIGHBORHOOD, ROOM_TYPE, REVIEWS]]

    def with_sensitive(self, days, price) -> "ConfidentialTable":
        """Copy of the table with the two sensitive columns replaced."""
        frame = self.frame.copy()
        frame[DAYS] = np.asarray(days, dtype=np.int64)
        frame[PRICE] = np.asarray(price, dtype=float)
        return ConfidentialTable(frame, self.schema)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "ConfidentialTable":
        frame = frame.loc[:, list(COLUMNS)].reset_index(drop=True).copy()
        frame[NEIGHBORHOOD] = frame[NEIGHBORHOOD].astype(str)
        frame[ROOM_TYPE] = frame[ROOM_TYPE].astype(str)
        frame[REVIEWS] = frame[REVIEWS].astype(np.int64)
        frame[DAYS] = frame[DAYS].astype(np.int64)
        frame[PRICE] = frame[PRICE].astype(float)
        return cls(frame)


def _check_valid(frame: pd.DataFrame) -> None:
    if frame[list(COLUMNS)].isna().any().any():
        raise DataError("missing values in table")
    days = frame[DAYS].to_numpy()
    if np.any((days < 0) | (days > MAX_DAYS)):
        raise DataError("AvailableDays outside {0..365}")
    if np.any(frame[PRICE].to_numpy() <= 0):
        raise DataError("non-positive Price")
    if np.any(frame[REVIEWS].to_numpy() < 0):
        raise DataError("negative ReviewsCount")


def _valid_mask(raw: pd.DataFrame) -> tuple[pd.DataFrame, np.ndarray]:
    out = pd.DataFrame(index=raw.index)
    for col in (NEIGHBORHOOD, ROOM_TYPE):
        s = raw[col]
        out[col] = s.astype("string").str.strip()
    for col in (REVIEWS, DAYS, PRICE):
        out[col] = pd.to_numeric(raw[col], errors="coerce")
    ok = out.notna().all(axis=1).to_numpy()
    ok &= (out[NEIGHBORHOOD].fillna("") != "").to_numpy()
    ok &= (out[ROOM_TYPE].fillna("") != "").to_numpy()
    for col in (REVIEWS, DAYS):
        v = out[col].to_numpy(dtype=float, na_value=np.nan)
        ok &= np.isfinite(v) & (v == np.round(v)) & (v >= 0)
    days = out[DAYS].to_numpy(dtype=float, na_value=np.nan)
    ok &= days <= MAX_DAYS
    price = out[PRICE].to_numpy(dtype=float, na_value=np.nan)
    ok &= np.isfinite(price) & (price > 0)
    return out, ok


def load_csv(path, schema=DEFAULT_SCHEMA) -> ConfidentialTable:
    """Read a comma-separated file, validate it and return the clean table.

    Rows violating the type or support constraints are dropped and counted
    in ``n_rejected``.
    """
    if not os.path.exists(path):
        raise DataError(f"input file not found: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""])
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    sources = {c.name: c.source_column for c in schema}
    missing = [s for s in sources.values() if s not in raw.columns]
    if missing:
        raise DataError(f"{path}: missing required column(s) {missing}")
    raw = raw[[sources[c] for c in COLUMNS]]
    raw.columns = list(COLUMNS)
    cleaned, ok = _valid_mask(raw)
    n_bad = int((~ok).sum())
    if n_bad:
        log.info("%s: rejected %d invalid row(s)", path, n_bad)
    good = cleaned[ok]
    if len(good) == 0:
        raise DataError(f"{path}: no valid rows")
    table = ConfidentialTable.from_frame(good)
    return ConfidentialTable(table.frame, tuple(schema), n_bad)


def write_csv(table: ConfidentialTable, path) -> None:
    """Write ``table`` with the canonical header (the native output schema)."""
    table.frame.to_csv(path, index=False)


def sample_records(table: ConfidentialTable, n: int, seed: int) -> ConfidentialTable:
    """Uniform sample of ``n`` rows without replacement, in sampled order."""
    if n <= 0:
        raise ValueError("sample size must be positive")
    if n > table.n:
        raise DataError(f"cannot sample {n} rows from a table of {table.n}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(table.n, size=n, replace=False)
    frame = table.frame.iloc[idx].reset_index(drop=True)
    return ConfidentialTable(frame, table.schema, table.n_rejected)


@dataclass(frozen=True)
class DesignMatrix:
    """Encoded predictors for the synthesis models.

    RoomType is one-hot with every level kept (no global intercept),
    Neighborhood is reference coded against its lexicographically first
    level, and ReviewsCount enters as ``log(x + 1)``.
    """

    X: np.ndarray
    columns: list[str]
    levels: dict[str, list[str]] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def level_dictionary(self) -> dict[str, int]:
        return {name: j for j, name in enumerate(self.columns)}

    def with_column(self, name: str, values) -> "DesignMatrix":
        X = np.column_stack([self.X, np.asarray(values, dtype=float)])
        return DesignMatrix(X, self.columns + [name], self.levels)


def table_levels(table: ConfidentialTable) -> dict[str, list[str]]:
    return {
        ROOM_TYPE: sorted(table.frame[ROOM_TYPE].unique()),
        NEIGHBORHOOD: sorted(table.frame[NEIGHBORHOOD].unique()),
    }


def _codes(values: pd.Series, levels: list[str], col: str) -> np.ndarray:
    lookup = {lev: k for k, lev in enumerate(levels)}
    try:
        return np.fromiter((lookup[v] for v in values), dtype=np.int64, count=len(values))
    except KeyError as exc:
        raise DataError(f"unseen {col} level {exc.args[0]!r}") from None


def encode_design(table: ConfidentialTable, levels: dict[str, list[str]] | None = None,
                  full_room_type: bool = True) -> DesignMatrix:
    """Encode the three key variables.

    ``levels`` fixes the category dictionaries (e.g. from the confidential
    table) so that other tables encode identically; an unseen level raises.
    With ``full_room_type=False`` RoomType is reference coded as well, for
    models that carry their own intercept.
    """
    if levels is None:
        levels = table_levels(table)
    room = _codes(table.frame[ROOM_TYPE], levels[ROOM_TYPE], ROOM_TYPE)
    hood = _codes(table.frame[NEIGHBORHOOD], levels[NEIGHBORHOOD], NEIGHBORHOOD)
    n = table.n
    room_levels = levels[ROOM_TYPE] if full_room_type else levels[ROOM_TYPE][1:]
    offset = 0 if full_room_type else 1
    cols, blocks = [], []
    R = np.zeros((n, len(room_levels)))
    for k in range(len(room_levels)):
        R[:, k] = room == k + offset
    blocks.append(R)
    cols += [f"{ROOM_TYPE}[{lev}]" for lev in room_levels]
    H = np.zeros((n, len(levels[NEIGHBORHOOD]) - 1))
    for k in range(H.shape[1]):
        H[:, k] = hood == k + 1
    blocks.append(H)
    cols += [f"{NEIGHBORHOOD}[{lev}]" for lev in levels[NEIGHBORHOOD][1:]]
    blocks.append(np.log1p(table.reviews.astype(float))[:, None])
    cols.append(f"log1p({REVIEWS})")
    return DesignMatrix(np.hstack(blocks), cols, {k: list(v) for k, v in levels.items()})


# Marginal shares of the public NYC listings file, used only for the simulator.
_BOROUGHS = ("Manhattan", "Brooklyn", "Queens", "Bronx", "Staten Island")
_BOROUGH_P = (0.443, 0.411, 0.116, 0.022, 0.008)
_ROOMS = ("Entire home/apt", "Private room", "Shared room")
_ROOM_P = (0.520, 0.457, 0.023)


def simulate_listings(n: int, seed: int = 0) -> ConfidentialTable:
    """Draw a listings-like table for demos and tests.

    Marginals loosely follow the public NYC file (many zero availabilities,
    heavy-tailed reviews and prices). The generating process is deliberately
    not the synthesis model.
    """
    rng = np.random.default_rng(seed)
    hood = rng.choice(len(_BOROUGHS), size=n, p=_BOROUGH_P)
    room = rng.choice(len(_ROOMS), size=n, p=_ROOM_P)
    never = rng.random(n) < 0.2
    reviews = np.where(never, 0, rng.negative_binomial(0.45, 0.45 / (0.45 + 30), size=n))
    active = np.log1p(reviews)
    p_zero = 1 / (1 + np.exp(-(0.3 - 0.35 * active + 0.4 * (room == 0) - 0.3 * (hood >= 2))))
    zero = rng.random(n) < p_zero
    shape = rng.choice(3, size=n, p=(0.45, 0.35, 0.20))
    days = np.where(
        shape == 0, rng.integers(1, 120, size=n),
        np.where(shape == 1, rng.integers(60, 366, size=n), 365 - rng.integers(0, 15, size=n)),
    )
    days = np.where(zero, 0, days)
    room_eff = np.array([5.2, 4.35, 4.1])[room]
    hood_eff = np.array([0.2, 0.0, -0.15, -0.25, -0.2])[hood]
    logp = room_eff + hood_eff - 0.03 * active + 0.0006 * days + rng.standard_t(6, n) * 0.42
    price = np.clip(np.round(np.exp(logp)), 10, 10000).astype(float)
    frame = pd.DataFrame({
        NEIGHBORHOOD: np.array(_BOROUGHS)[hood],
        ROOM_TYPE: np.array(_ROOMS)[room],
        REVIEWS: reviews.astype(np.int64),
        DAYS: days.astype(np.int64),
        PRICE: price,
    })
    return ConfidentialTable.from_frame(frame)
