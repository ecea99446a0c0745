import io
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cccf.data import (
    DataError,
    ParseError,
    RatingTriples,
    build_matrix,
    filter_min_interactions,
    load_ratings,
    parse_ratings,
    split_per_user,
)

from conftest import random_triples


def triples_from(pairs, rating=3.0):
    return RatingTriples.from_entries([(u, i, rating) for u, i in pairs])


# parse_ratings


def test_movielens_line():
    t = parse_ratings(io.BytesIO(b"1::1193::5::978300760\n"), "movielens-dat")
    assert list(t) == [("1", "1193", 5.0)]


@pytest.mark.parametrize("fmt", ["csv", "movielens-dat"])
def test_empty_stream_gives_no_entries(fmt):
    assert len(parse_ratings(io.BytesIO(b""), fmt)) == 0


def test_csv_with_and_without_timestamp():
    a = parse_ratings(io.StringIO("user_id,item_id,rating\nu,i,4\n"))
    b = parse_ratings(io.StringIO("user_id,item_id,rating,timestamp\nu,i,4,123\n"))
    assert list(a) == list(b) == [("u", "i", 4.0)]


def test_duplicate_pair_keeps_last():
    text = "user_id,item_id,rating\na,x,1\nb,x,2\na,x,5\n"
    t = parse_ratings(io.StringIO(text))
    assert dict(((u, i), r) for u, i, r in t) == {("a", "x"): 5.0, ("b", "x"): 2.0}
    assert len(t) == 2


@pytest.mark.parametrize("text,line", [
    ("user_id,item_id,rating\na,x,1\nb,x\n", 3),
    ("user_id,item_id,rating\na,x,seven\n", 2),
    ("user_id,item_id,rating\na,x,9\n", 2),
    ("user_id,item_id,rating\na,x,nan\n", 2),
    ("uid,iid,r\n", 1),
])
def test_malformed_line_reports_line_number(text, line):
    with pytest.raises(ParseError) as err:
        parse_ratings(io.StringIO(text))
    assert err.value.line_no == line


def test_malformed_movielens_line():
    with pytest.raises(ParseError) as err:
        parse_ratings(io.BytesIO(b"1::2::3\n1:2:3\n"), "movielens-dat")
    assert err.value.line_no == 2


def test_unknown_format():
    with pytest.raises(DataError):
        parse_ratings(io.BytesIO(b""), "tsv")


def test_movielens_1m_counts():
    from conftest import ROOT
    path = ROOT / "data" / "ml-1m" / "ratings.dat"
    if not path.exists():
        pytest.skip("MovieLens-1M ratings.dat not present under data/ml-1m/")
    t = load_ratings(path)
    assert len(t) == 1_000_209
    assert len(set(t.users)) == 6040


def test_ml100k_loads(ml100k):
    assert len(ml100k) == 100_000
    assert len(set(ml100k.users)) == 943
    assert len(set(ml100k.items)) == 1682


# filter_min_interactions


def repeated_pass_oracle(pairs, c):
    pairs = list(pairs)
    while True:
        uc = Counter(u for u, _ in pairs)
        kept = [(u, i) for u, i in pairs if uc[u] >= c]
        ic = Counter(i for _, i in kept)
        kept = [(u, i) for u, i in kept if ic[i] >= c]
        if kept == pairs:
            return pairs
        pairs = kept


def test_filter_min_one_is_identity():
    t = random_triples(np.random.default_rng(0), 8, 9)
    assert list(filter_min_interactions(t, 1)) == list(t)


def test_filter_cascade_to_empty_raises():
    t = triples_from([("a", "x"), ("b", "x"), ("c", "x")])
    # users have 1 rating each; dropping them empties the shared item
    with pytest.raises(DataError, match="dataset vanished under filtering"):
        filter_min_interactions(t, 2)


def test_filter_chain_fixed_point():
    # six users and six items; removing u5 drops i5 below threshold, which in turn drops u4 ...
    pairs = [("u0", "i0"), ("u0", "i1"), ("u1", "i0"), ("u1", "i1"), ("u2", "i1"), ("u2", "i2"),
             ("u3", "i2"), ("u3", "i3"), ("u4", "i3"), ("u4", "i4"), ("u5", "i4"), ("u5", "i5"),
             ("u3", "i0"), ("u2", "i0")]
    got = {(u, i) for u, i, _ in filter_min_interactions(triples_from(pairs), 2)}
    assert got == set(repeated_pass_oracle(pairs, 2))
    assert got  # the dense corner survives


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_filter_matches_oracle_and_is_idempotent(seed, c):
    rng = np.random.default_rng(seed)
    t = random_triples(rng, int(rng.integers(2, 10)), int(rng.integers(2, 10)), density=0.4)
    pairs = [(u, i) for u, i, _ in t]
    expect = repeated_pass_oracle(pairs, c)
    if not expect:
        with pytest.raises(DataError):
            filter_min_interactions(t, c)
        return
    once = filter_min_interactions(t, c)
    assert [(u, i) for u, i, _ in once] == expect
    assert list(filter_min_interactions(once, c)) == list(once)
    assert min(Counter(once.users).values()) >= c
    assert min(Counter(once.items).values()) >= c


# split_per_user


def test_split_ten_ratings_gives_seven_three():
    t = triples_from([("u", f"i{j}") for j in range(10)] + [("v", f"i{j}") for j in range(10)])
    train, test = split_per_user(t, 0.7, seed=3)
    assert Counter(train.users) == {"u": 7, "v": 7}
    assert Counter(test.users) == {"u": 3, "v": 3}


def test_split_two_ratings_all_train():
    t = triples_from([("u", "a"), ("u", "b")])
    train, test = split_per_user(t, 0.7, seed=0)
    assert len(train) == 2 and len(test) == 0


def test_split_requires_two_ratings():
    with pytest.raises(DataError):
        split_per_user(triples_from([("u", "a"), ("v", "a"), ("v", "b")]), 0.7, 0)


def test_split_drops_items_unseen_in_train(caplog):
    # item "z" is rated once; wherever it lands in test it cannot be predicted
    pairs = [("u", f"i{j}") for j in range(4)] + [("v", f"i{j}") for j in range(4)] + [("u", "z")]
    t = triples_from(pairs)
    for seed in range(20):
        train, test = split_per_user(t, 0.7, seed)
        assert set(test.items) <= set(train.items)
        assert set(test.users) <= set(train.users)


def test_split_determinism_and_seed_sensitivity():
    t = random_triples(np.random.default_rng(1), 100, 30, density=0.3)
    a = split_per_user(t, 0.7, 5)
    b = split_per_user(t, 0.7, 5)
    c = split_per_user(t, 0.7, 6)
    assert list(a[0]) == list(b[0]) and list(a[1]) == list(b[1])
    assert list(a[0]) != list(c[0])


@given(st.integers(0, 10_000), st.floats(0.1, 0.9))
def test_split_partitions_each_user(seed, frac):
    rng = np.random.default_rng(seed)
    t = random_triples(rng, 12, 25, density=0.5)
    keep = np.fromiter((c >= 2 for c in map(Counter(t.users).__getitem__, t.users)), bool)
    t = t.subset(keep)
    train, test = split_per_user(t, frac, seed)
    tr, te = set(train), set(test)
    assert not tr & te
    assert tr | te <= set(t)
    counts = Counter(t.users)
    for u, c in Counter(train.users).items():
        assert c == int(np.ceil(frac * counts[u] - 1e-9))


# build_matrix


def test_single_triple():
    mat = build_matrix(triples_from([("a", "x")]))
    assert (mat.m, mat.n) == (1, 1)
    assert len(mat.by_user(0)) == 1 and len(mat.by_item(0)) == 1


def test_first_appearance_indexing():
    mat = build_matrix(triples_from([("7", "x"), ("3", "y"), ("7", "y")]))
    assert mat.user_ids == ["7", "3"]
    assert mat.user_index == {"7": 0, "3": 1}
    assert mat.item_ids == ["x", "y"]


def test_empty_triples_rejected():
    with pytest.raises(DataError):
        build_matrix(RatingTriples([], [], np.empty(0)))


def transpose_oracle(mat):
    by_item = {}
    for i in range(mat.m):
        for j, r in mat.by_user(i):
            by_item.setdefault(j, []).append((i, r))
    return by_item


@given(st.integers(0, 10_000))
def test_transpose_consistency(seed):
    rng = np.random.default_rng(seed)
    t = random_triples(rng, int(rng.integers(1, 12)), int(rng.integers(1, 12)), density=0.4)
    mat = build_matrix(t)
    oracle = transpose_oracle(mat)
    for j in range(mat.n):
        assert sorted(mat.by_item(j)) == sorted(oracle[j])
    flat_u = sorted((i, j, r) for i in range(mat.m) for j, r in mat.by_user(i))
    flat_i = sorted((i, j, r) for j in range(mat.n) for i, r in mat.by_item(j))
    assert flat_u == flat_i
    # every row and column is populated, index maps invert
    assert all(mat.by_user(i) for i in range(mat.m))
    assert all(mat.by_item(j) for j in range(mat.n))
    assert [mat.user_index[u] for u in mat.user_ids] == list(range(mat.m))
    # every input triple is reachable through the maps
    for u, i, r in t:
        assert (mat.item_index[i], r) in mat.by_user(mat.user_index[u])


def test_canonical_csv_dump():
    mat = build_matrix(triples_from([("b", "y"), ("a", "x")], rating=4.5))
    out = io.StringIO()
    mat.to_csv(out)
    assert out.getvalue() == "user_index,item_index,rating\n0,0,4.5\n1,1,4.5\n"
