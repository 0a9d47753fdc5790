from collections import Counter

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from partsyn import data as D
from conftest import make_table

HEADER = "neighbourhood_group,room_type,number_of_reviews,availability_365,price\n"
ROWS = [
    "Brooklyn,Private room,9,365,149",
    "Manhattan,Entire home/apt,45,355,225",
    "Manhattan,Private room,0,365,150",
    "Brooklyn,Entire home/apt,270,194,89",
    "Queens,Shared room,9,0,80",
]


def write(tmp_path, rows, header=HEADER):
    p = tmp_path / "in.csv"
    p.write_text(header + "\n".join(rows) + "\n")
    return p


def test_clean_file_loads_every_row(tmp_path):
    t = D.load_csv(write(tmp_path, ROWS))
    assert t.n == 5 and t.n_rejected == 0
    assert list(t.frame.columns) == list(D.COLUMNS)


@pytest.mark.parametrize("bad", ["Queens,Shared room,9,0,abc", "Queens,Shared room,9,400,80",
                                 "Queens,Shared room,-1,0,80", "Queens,Shared room,9,0,0",
                                 "Queens,,9,0,80", "Queens,Shared room,2.5,0,80"])
def test_invalid_row_is_rejected_and_counted(tmp_path, bad):
    t = D.load_csv(write(tmp_path, ROWS + [bad]))
    assert t.n == 5 and t.n_rejected == 1


def test_load_errors(tmp_path):
    with pytest.raises(D.DataError, match="not found"):
        D.load_csv(tmp_path / "nope.csv")
    with pytest.raises(D.DataError, match="missing required column"):
        D.load_csv(write(tmp_path, ["Queens,Shared room,9,0"], "neighbourhood_group,room_type,number_of_reviews,price\n"))
    with pytest.raises(D.DataError, match="no valid rows"):
        D.load_csv(write(tmp_path, ["Queens,Shared room,9,999,80"]))


def test_schema_override(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("a,b,c,d,e\nQueens,Shared room,1,2,3\n")
    schema = D.schema_with_sources({D.NEIGHBORHOOD: "a", D.ROOM_TYPE: "b", D.REVIEWS: "c", D.DAYS: "d", D.PRICE: "e"})
    t = D.load_csv(p, schema)
    assert t.frame.iloc[0].tolist() == ["Queens", "Shared room", 1, 2, 3.0]
    with pytest.raises(D.DataError):
        D.schema_with_sources({"Nope": "x"})


def test_reference_schema_flags():
    sens = {c.name: c.sensitive for c in D.DEFAULT_SCHEMA}
    assert sens == {D.NEIGHBORHOOD: False, D.ROOM_TYPE: False, D.REVIEWS: False, D.DAYS: True, D.PRICE: True}


def test_round_trip(tmp_path, listings):
    p = tmp_path / "rt.csv"
    D.write_csv(listings, p)
    back = D.load_csv(p, D.CANONICAL_SCHEMA)
    for col in (D.REVIEWS, D.DAYS):
        assert np.array_equal(back.frame[col].to_numpy(), listings.frame[col].to_numpy())
    np.testing.assert_allclose(back.price, listings.price, rtol=0, atol=1e-6)
    assert back.keys_frame().equals(listings.keys_frame())


def test_sampling(listings):
    full = D.sample_records(listings, listings.n, seed=1)
    cols = list(D.COLUMNS)
    key = lambda f: f.sort_values(cols).reset_index(drop=True)
    assert key(full.frame).equals(key(listings.frame))
    a = D.sample_records(listings, 100, seed=7)
    b = D.sample_records(listings, 100, seed=7)
    assert a.frame.equals(b.frame) and a.n == 100
    with pytest.raises(D.DataError):
        D.sample_records(listings, listings.n + 1, seed=1)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(0, 10_000))
def test_sample_is_sub_multiset(n, seed):
    base = D.simulate_listings(60, seed=3)
    s = D.sample_records(base, n, seed)
    rows = lambda t: Counter(map(tuple, t.frame.itertuples(index=False)))
    assert not rows(s) - rows(base)
    assert s.n == n


def test_design_column_count_and_coding():
    hoods = ["Bronx", "Brooklyn", "Manhattan", "Queens", "Staten Island"]
    rooms = ["Entire home/apt", "Private room", "Shared room"]
    rows = [(h, rooms[k % 3], k, 1, 10.0) for k, h in enumerate(hoods * 3)]
    d = D.encode_design(make_table(rows))
    assert d.X.shape == (15, 3 + 4 + 1)
    assert d.columns[:3] == [f"RoomType[{r}]" for r in rooms]
    assert "Neighborhood[Bronx]" not in d.columns
    assert np.all(d.X[:, :3].sum(axis=1) == 1)
    assert np.all(d.X[:, 3:7].sum(axis=1) <= 1)


def test_design_zero_reviews_and_single_row():
    d = D.encode_design(make_table([("Queens", "Private room", 0, 3, 10.0)]))
    assert d.X[0, -1] == 0.0
    assert d.X[0, : len(d.levels[D.ROOM_TYPE])].tolist() == [1.0]
    assert d.level_dictionary()["RoomType[Private room]"] == 0


def test_unseen_level_is_reported(listings):
    levels = D.table_levels(listings)
    odd = make_table([("Atlantis", "Private room", 0, 3, 10.0)])
    with pytest.raises(D.DataError, match="unseen Neighborhood"):
        D.encode_design(odd, levels)


@settings(max_examples=25, deadline=None)
@given(st.permutations(list(range(40))))
def test_design_is_row_order_stable(perm):
    base = D.simulate_listings(40, seed=8)
    levels = D.table_levels(base)
    shuffled = D.ConfidentialTable(base.frame.iloc[list(perm)].reset_index(drop=True))
    a = D.encode_design(base, levels).X
    b = D.encode_design(shuffled, levels).X
    assert np.array_equal(a[list(perm)], b)


def test_simulator_respects_support():
    t = D.simulate_listings(2000, seed=0)
    assert t.days.min() >= 0 and t.days.max() <= 365 and (t.price > 0).all()
    assert 0.2 < np.mean(t.days == 0) < 0.7
